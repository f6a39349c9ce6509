"""Minimal preprocessing: crop to the brain, resample, normalize; plus crop augmentation.

Grid mapping uses the pixel-center convention: output index ``i`` along an
axis of ``n_src -> n_dst`` voxels samples the source at
``(i + 0.5) * n_src / n_dst - 0.5``, clamped to the valid range. Trilinear
interpolation is applied separably, one axis at a time, which is the same
product of linear weights as interpolating over the 8 neighbours.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import PreprocessError
from .nifti import Volume
from .tensor import Tensor


@dataclass(frozen=True)
class Resolution:
    name: str
    grid: tuple
    voxel_size: tuple = (1.0, 1.0, 1.0)


RESOLUTIONS = {
    "high": Resolution("high", (136, 168, 136), (1.36, 1.30, 1.36)),
    "medium": Resolution("medium", (68, 84, 68), (2.73, 2.63, 2.73)),
    "low": Resolution("low", (34, 42, 34), (5.46, 5.27, 5.46)),
}


def get_resolution(res) -> Resolution:
    if isinstance(res, Resolution):
        return res
    try:
        return RESOLUTIONS[res]
    except KeyError:
        raise PreprocessError(f"unknown resolution {res!r}; choose from {sorted(RESOLUTIONS)}") from None


@dataclass(frozen=True)
class BBox:
    """Inclusive voxel index bounds per axis."""

    lo: tuple
    hi: tuple

    @property
    def shape(self):
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    def slices(self):
        return tuple(slice(l, h + 1) for l, h in zip(self.lo, self.hi))


@dataclass(frozen=True)
class AugmentConfig:
    min_fraction: float = 0.9
    max_fraction: float = 1.0

    def __post_init__(self):
        if not 0 < self.min_fraction <= self.max_fraction <= 1:
            raise ValueError(f"need 0 < min_fraction <= max_fraction <= 1, got "
                             f"{self.min_fraction}, {self.max_fraction}")


def compute_bbox(volume) -> BBox:
    """Tightest box around all nonzero voxels."""
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    nz = data != 0
    if not nz.any():
        raise PreprocessError("volume is all background; nothing to crop")
    lo, hi = [], []
    for ax in range(3):
        other = tuple(a for a in range(3) if a != ax)
        idx = np.flatnonzero(nz.any(axis=other))
        lo.append(int(idx[0]))
        hi.append(int(idx[-1]))
    return BBox(tuple(lo), tuple(hi))


def crop(volume: Volume, box: BBox) -> Volume:
    return Volume(volume.data[box.slices()], volume.spacing, path=volume.path, header=volume.header)


def source_coords(n_src, n_dst):
    """Continuous source positions sampled by each output index (before clamping)."""
    return (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5


def _interp_axis(arr, axis, n_dst):
    n_src = arr.shape[axis]
    if n_src == n_dst:
        return arr
    pos = np.clip(source_coords(n_src, n_dst), 0, n_src - 1)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_src - 1)
    w = (pos - i0).astype(arr.dtype)
    shape = [1] * arr.ndim
    shape[axis] = n_dst
    w = w.reshape(shape)
    a = np.take(arr, i0, axis=axis)
    b = np.take(arr, i1, axis=axis)
    out = a + w * (b - a)
    # rounding must not push a sample outside its two neighbours
    return np.clip(out, np.minimum(a, b), np.maximum(a, b))


def resample_array(arr, target):
    """Trilinear resampling of the last three axes of ``arr`` to ``target``."""
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise PreprocessError(f"target extents must be three values >= 1, got {target}")
    off = arr.ndim - 3
    out = arr
    for ax in range(3):
        out = _interp_axis(out, off + ax, target[ax])
    return out


def resample_trilinear(volume: Volume, target_extents) -> Volume:
    src = volume.extents
    data = resample_array(volume.data, target_extents)
    spacing = tuple(sp * s / t for sp, s, t in zip(volume.spacing, src, data.shape))
    return Volume(data, spacing, path=volume.path, header=volume.header)


def minmax_normalize(arr):
    lo, hi = arr.min(), arr.max()
    if hi <= lo:
        raise PreprocessError("cannot normalize a constant volume")
    return (arr - lo) / (hi - lo)


def minimal_preprocess(volume: Volume, resolution) -> Tensor:
    """Crop to the nonzero bounding box, resample to the grid, rescale to [0, 1].

    Returns a float32 tensor of shape (1, 1, D, H, W).
    """
    res = get_resolution(resolution)
    cropped = crop(volume, compute_bbox(volume))
    resampled = resample_array(cropped.data.astype(np.float64), res.grid)
    out = minmax_normalize(resampled).astype(np.float32)
    return Tensor(out[None, None])


def draw_crop(shape, cfg: AugmentConfig, rng):
    """Per-axis (fraction, size, offset) for one random crop of a grid of ``shape``."""
    draws = []
    for n in shape:
        f = rng.uniform(cfg.min_fraction, cfg.max_fraction)
        size = min(n, max(1, int(round(f * n))))
        offset = int(rng.integers(0, n - size + 1))
        draws.append((f, size, offset))
    return draws


def augment_random_crop(x, cfg: AugmentConfig, rng):
    """Crop a random sub-box per axis and resample it back to the input extents.

    ``x`` is a Tensor or array of shape (..., D, H, W); the leading axes share
    one crop.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    grid = arr.shape[-3:]
    draws = draw_crop(grid, cfg, rng)
    sl = tuple(slice(o, o + s) for _, s, o in draws)
    cropped = arr[(Ellipsis,) + sl]
    out = resample_array(cropped, grid).astype(arr.dtype, copy=False)
    return Tensor(out) if isinstance(x, Tensor) else out


def otsu_threshold(values, bins=256):
    """Threshold maximizing between-class variance over a ``bins``-bin histogram.

    Returns the upper edge of the last bin assigned to the lower class.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = values.min(), values.max()
    if hi <= lo:
        raise PreprocessError("histogram is single-valued; no threshold exists")
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(counts)[:-1].astype(np.float64)
    w1 = counts.sum() - w0
    s0 = np.cumsum(counts * centers)[:-1]
    mu0 = s0 / np.maximum(w0, 1)
    mu1 = (np.sum(counts * centers) - s0) / np.maximum(w1, 1)
    between = w0 * w1 * (mu0 - mu1) ** 2
    between[(w0 == 0) | (w1 == 0)] = -1
    k = int(np.argmax(between))
    return float(edges[k + 1])


def threshold_mask(volume: Volume) -> Volume:
    """Approximate brain extraction: Otsu threshold, keep the largest component.

    A rough stand-in for a real skull stripper; voxels outside the kept
    component are set to 0.
    """
    thr = otsu_threshold(volume.data)
    fg = volume.data > thr
    labels, n = ndimage.label(fg)
    if n > 1:
        sizes = np.bincount(labels.ravel())
        sizes[0] = 0
        fg = labels == int(np.argmax(sizes))
    data = np.where(fg, volume.data, 0).astype(volume.data.dtype)
    return Volume(data, volume.spacing, path=volume.path, header=volume.header)
