"""From a synthetic scan on disk to a network input."""
import tempfile
from pathlib import Path

import numpy as np

from rawbrain.nifti import read_nifti, write_nifti
from rawbrain.phantom import PhantomParams, generate_phantom, phantom_labels
from rawbrain.preprocess import AugmentConfig, augment_random_crop, compute_bbox, draw_crop, minimal_preprocess

params = PhantomParams()
rng = np.random.default_rng(0)
vol = generate_phantom(60.0, params, rng)
print(vol.data.shape, vol.data.dtype, vol.spacing)  # (64, 80, 64) float32

labels = phantom_labels(60.0, params)
print(np.bincount(labels.ravel()))  # background+cavity, core, rim voxels

path = Path(tempfile.mkdtemp()) / "sub.nii.gz"
write_nifti(vol, path)
back = read_nifti(path)
print(back.data.tobytes() == vol.data.tobytes())  # True

box = compute_bbox(back.data)  # brain box; background is exactly zero
print(box.lo, box.hi, box.shape)

x = minimal_preprocess(back, "low")  # crop, resample, scale to [0, 1]
print(x.shape, x.data.min(), x.data.max())  # (1, 1, 34, 42, 34) 0.0 1.0

# training-time crop: 90-100% of each axis, resampled back to the grid
for frac, size, offset in draw_crop(x.shape[2:], AugmentConfig(), np.random.default_rng(1)):
    print(f"{frac:.3f} {size} {offset}")
y = augment_random_crop(x, AugmentConfig(), np.random.default_rng(1))
print(y.shape == x.shape)
