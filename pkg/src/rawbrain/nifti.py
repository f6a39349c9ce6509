"""Reader/writer for single-file NIfTI-1 volumes (``.nii`` and ``.nii.gz``).

Only 3D scalar images are handled. Orientation fields (qform/sform) are
parsed into the header but never applied; voxel axes are used as stored.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (BadMagicError, NiftiError, TruncatedDataError, UnsupportedDatatypeError,
                     UnsupportedFormError)

HEADER_SIZE = 348
VOX_OFFSET = 352
GZIP_MAGIC = b"\x1f\x8b"

# datatype code -> (numpy kind, bitpix)
DATATYPES = {
    2: ("u1", 8),
    4: ("i2", 16),
    8: ("i4", 32),
    16: ("f4", 32),
    64: ("f8", 64),
}

# (name, struct code) in file order; sums to 348 bytes
_LAYOUT = [
    ("sizeof_hdr", "i"), ("data_type", "10s"), ("db_name", "18s"), ("extents", "i"),
    ("session_error", "h"), ("regular", "c"), ("dim_info", "B"), ("dim", "8h"),
    ("intent_p1", "f"), ("intent_p2", "f"), ("intent_p3", "f"), ("intent_code", "h"),
    ("datatype", "h"), ("bitpix", "h"), ("slice_start", "h"), ("pixdim", "8f"),
    ("vox_offset", "f"), ("scl_slope", "f"), ("scl_inter", "f"), ("slice_end", "h"),
    ("slice_code", "B"), ("xyzt_units", "B"), ("cal_max", "f"), ("cal_min", "f"),
    ("slice_duration", "f"), ("toffset", "f"), ("glmax", "i"), ("glmin", "i"),
    ("descrip", "80s"), ("aux_file", "24s"), ("qform_code", "h"), ("sform_code", "h"),
    ("quatern_b", "f"), ("quatern_c", "f"), ("quatern_d", "f"),
    ("qoffset_x", "f"), ("qoffset_y", "f"), ("qoffset_z", "f"),
    ("srow_x", "4f"), ("srow_y", "4f"), ("srow_z", "4f"),
    ("intent_name", "16s"), ("magic", "4s"),
]
_FMT = "".join(code for _, code in _LAYOUT)
assert struct.calcsize("<" + _FMT) == HEADER_SIZE


@dataclass
class NiftiHeader:
    dim: tuple
    datatype: int
    bitpix: int
    pixdim: tuple
    vox_offset: float
    scl_slope: float
    scl_inter: float
    magic: bytes
    endian: str = "<"
    qform_code: int = 0
    sform_code: int = 0
    quatern: tuple = (0.0, 0.0, 0.0)
    qoffset: tuple = (0.0, 0.0, 0.0)
    srow: tuple = ((0.0,) * 4,) * 3
    descrip: str = ""
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def extents(self):
        n = self.dim[0]
        return tuple(self.dim[1 : n + 1])

    @property
    def spacing(self):
        return tuple(float(v) for v in self.pixdim[1:4])


@dataclass
class Volume:
    """A 3D scalar image indexed ``data[x, y, z]`` with spacing in mm."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    path: Optional[str] = None
    header: Optional[NiftiHeader] = None

    def __post_init__(self):
        if self.data.ndim != 3:
            raise NiftiError(f"Volume data must be 3D, got shape {self.data.shape}", field="dim")
        if min(self.data.shape) < 1:
            raise NiftiError("Volume extents must be >= 1", field="dim")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise NiftiError(f"spacing must be three positive values, got {self.spacing}", field="pixdim")

    @property
    def extents(self):
        return self.data.shape


def _parse_header(buf: bytes) -> NiftiHeader:
    if len(buf) < HEADER_SIZE:
        raise TruncatedDataError(f"header needs {HEADER_SIZE} bytes, file has {len(buf)}", field="sizeof_hdr")
    endian = None
    for e in ("<", ">"):
        d0 = struct.unpack_from(e + "h", buf, 40)[0]
        if 1 <= d0 <= 7:
            endian = e
            break
    if endian is None:
        raise NiftiError("dim[0] is implausible in either byte order", field="dim")
    values = struct.unpack_from(endian + _FMT, buf, 0)
    raw, i = {}, 0
    for name, code in _LAYOUT:
        count = int(code[:-1]) if code[:-1].isdigit() and code[-1] != "s" else 1
        raw[name] = values[i : i + count] if count > 1 else values[i]
        i += count
    magic = raw["magic"]
    if magic == b"ni1\x00":
        raise UnsupportedFormError("two-file NIfTI (.hdr/.img) is not supported", field="magic")
    if magic != b"n+1\x00":
        raise BadMagicError(f"bad magic {magic!r}; expected b'n+1\\x00'", field="magic")
    if raw["sizeof_hdr"] != HEADER_SIZE:
        raise NiftiError(f"sizeof_hdr is {raw['sizeof_hdr']}, expected 348", field="sizeof_hdr")
    return NiftiHeader(
        dim=tuple(raw["dim"]), datatype=raw["datatype"], bitpix=raw["bitpix"],
        pixdim=tuple(raw["pixdim"]), vox_offset=raw["vox_offset"],
        scl_slope=raw["scl_slope"], scl_inter=raw["scl_inter"], magic=magic, endian=endian,
        qform_code=raw["qform_code"], sform_code=raw["sform_code"],
        quatern=(raw["quatern_b"], raw["quatern_c"], raw["quatern_d"]),
        qoffset=(raw["qoffset_x"], raw["qoffset_y"], raw["qoffset_z"]),
        srow=(raw["srow_x"], raw["srow_y"], raw["srow_z"]),
        descrip=raw["descrip"].split(b"\x00")[0].decode("latin-1"), raw=raw,
    )


def read_nifti(path) -> Volume:
    """Load a NIfTI-1 file, gzip-compressed or not, as a :class:`Volume`.

    Voxels come back as float32 (float64 for 64-bit files) with
    ``scl_slope``/``scl_inter`` applied; a slope of 0 means "unscaled".
    """
    path = Path(path)
    buf = path.read_bytes()
    if buf[:2] == GZIP_MAGIC:
        buf = gzip.decompress(buf)
    hdr = _parse_header(buf)

    ndim = hdr.dim[0]
    ext = list(hdr.dim[1 : ndim + 1]) + [1] * (3 - ndim)
    if any(n < 1 for n in ext):
        raise NiftiError(f"non-positive extent in dim {hdr.dim}", field="dim")
    if any(n != 1 for n in ext[3:]):
        raise NiftiError(f"only 3D volumes are supported, dim={hdr.dim}", field="dim")
    nx, ny, nz = ext[:3]

    if hdr.datatype not in DATATYPES:
        raise UnsupportedDatatypeError(f"datatype code {hdr.datatype} is not supported", field="datatype")
    kind, bitpix = DATATYPES[hdr.datatype]
    if hdr.bitpix != bitpix:
        raise NiftiError(f"bitpix {hdr.bitpix} inconsistent with datatype {hdr.datatype}", field="bitpix")

    offset = int(hdr.vox_offset)
    if offset < HEADER_SIZE:
        raise NiftiError(f"vox_offset {hdr.vox_offset} lies inside the header", field="vox_offset")
    dtype = np.dtype(hdr.endian + kind)
    nbytes = nx * ny * nz * dtype.itemsize
    if len(buf) < offset + nbytes:
        raise TruncatedDataError(
            f"voxel payload needs {nbytes} bytes at offset {offset}, only {max(0, len(buf) - offset)} present",
            field="vox_offset")
    stored = np.frombuffer(buf, dtype=dtype, count=nx * ny * nz, offset=offset)
    out_dtype = np.float64 if hdr.datatype == 64 else np.float32

    slope, inter = hdr.scl_slope, hdr.scl_inter
    if not np.isfinite(slope) or slope == 0:
        slope, inter = 1.0, 0.0
    if not np.isfinite(inter):
        inter = 0.0
    if slope == 1.0 and inter == 0.0:
        values = stored.astype(out_dtype)
    else:
        values = (stored.astype(np.float64) * slope + inter).astype(out_dtype)
    data = values.reshape((nx, ny, nz), order="F")
    spacing = tuple(abs(v) if v != 0 else 1.0 for v in hdr.pixdim[1:4])
    return Volume(data, spacing, path=str(path), header=hdr)


def encode_nifti(volume: Volume, descrip: str = "") -> bytes:
    """Serialize ``volume`` as an uncompressed little-endian float32 NIfTI-1 byte string."""
    nx, ny, nz = volume.extents
    sx, sy, sz = volume.spacing
    fields = {name: 0 for name, _ in _LAYOUT}
    fields.update(
        sizeof_hdr=HEADER_SIZE, data_type=b"", db_name=b"", regular=b"r",
        dim=(3, nx, ny, nz, 1, 1, 1, 1), datatype=16, bitpix=32,
        pixdim=(1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0), vox_offset=float(VOX_OFFSET),
        scl_slope=1.0, scl_inter=0.0, xyzt_units=2, descrip=descrip.encode("latin-1")[:79],
        aux_file=b"", sform_code=1,
        srow_x=(sx, 0.0, 0.0, 0.0), srow_y=(0.0, sy, 0.0, 0.0), srow_z=(0.0, 0.0, sz, 0.0),
        intent_name=b"", magic=b"n+1\x00",
    )
    values = []
    for name, code in _LAYOUT:
        v = fields[name]
        if isinstance(v, tuple):
            values.extend(v)
        else:
            values.append(v)
    header = struct.pack("<" + _FMT, *values)
    payload = np.asarray(volume.data, dtype="<f4").tobytes(order="F")
    return header + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + payload


def write_nifti(volume: Volume, path, compress: Optional[bool] = None, descrip: str = ""):
    """Write ``volume`` as float32 NIfTI-1.

    ``compress`` defaults to ``True`` when the path ends in ``.gz``. The gzip
    stream carries no timestamp, so equal volumes give equal files.
    """
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"
    blob = encode_nifti(volume, descrip)
    if compress:
        blob = gzip.compress(blob, mtime=0)
    try:
        path.write_bytes(blob)
    except OSError as exc:
        raise NiftiError(f"cannot write {path}: {exc}", field="path") from exc
