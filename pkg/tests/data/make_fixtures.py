"""Regenerate the NIfTI fixtures with nibabel (an independent writer).

Run from the repository root: ``python3 tests/data/make_fixtures.py``.
Expected voxel arrays are stored next to each file as ``.npy``.
"""
from pathlib import Path

import nibabel as nib
import numpy as np

HERE = Path(__file__).parent
SPACING = (1.5, 2.0, 2.5)


def _write(name, data, dtype, endian="<", slope=None, inter=None):
    hdr = nib.Nifti1Header(endianness=endian)
    hdr.set_data_dtype(dtype)
    img = nib.Nifti1Image(data, np.diag(SPACING + (1.0,)), header=hdr)
    img.header.set_zooms(SPACING)
    if slope is not None:
        img.header.set_slope_inter(slope, inter)
    nib.save(img, str(HERE / name))


def main():
    rng = np.random.default_rng(20240501)
    f32 = rng.normal(size=(4, 5, 6)).astype(np.float32)
    np.save(HERE / "f32.npy", f32)
    _write("le_f32.nii", f32, np.float32)
    _write("be_f32.nii", f32, np.float32, endian=">")
    _write("le_f32.nii.gz", f32, np.float32)

    f64 = rng.normal(size=(3, 4, 2))
    np.save(HERE / "f64.npy", f64)
    _write("le_f64.nii", f64, np.float64)

    u8 = rng.integers(0, 256, size=(5, 3, 4)).astype(np.uint8)
    np.save(HERE / "u8.npy", u8)
    _write("u8.nii", u8, np.uint8)

    i32 = rng.integers(-2**20, 2**20, size=(2, 3, 4)).astype(np.int32)
    np.save(HERE / "i32.npy", i32)
    _write("i32.nii", i32, np.int32)

    # stored ints with slope/intercept; nibabel must not rescale the payload itself
    i16 = rng.integers(-1000, 1000, size=(6, 5, 4)).astype(np.int16)
    np.save(HERE / "i16_raw.npy", i16)
    hdr = nib.Nifti1Header()
    hdr.set_data_dtype(np.int16)
    hdr.set_data_shape(i16.shape)
    hdr.set_zooms(SPACING)
    hdr["vox_offset"] = 352
    hdr["scl_slope"] = 0.25
    hdr["scl_inter"] = -3.0
    with open(HERE / "i16_scaled.nii", "wb") as fh:
        hdr.write_to(fh)  # 348 bytes plus the 4-byte extension flag
        fh.write(i16.astype("<i2").tobytes(order="F"))

if __name__ == "__main__":
    main()
