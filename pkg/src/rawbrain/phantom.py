"""Synthetic skull-stripped "brains" whose geometry encodes age.

Each phantom is an ellipsoid on a zero background. Inside it:

* a central spherical cavity (ventricle stand-in) that grows linearly with age,
* an outer rim (cortex stand-in, intensity ``rim_intensity``) that thins with age,
* a core of intensity ``core_intensity``.

Gaussian noise is added to tissue voxels only and clamped at 0, and the whole
object is shifted by a random whole-voxel offset.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import PhantomError
from .manifest import Manifest, Subject
from .nifti import Volume, write_nifti


@dataclass(frozen=True)
class PhantomParams:
    grid: tuple = (64, 80, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    semi_axes: tuple = (24, 30, 24)
    cavity_radius_base: float = 2.5
    cavity_growth: float = 0.09
    rim_thickness_base: float = 6.0
    shell_thinning: float = 0.05
    core_intensity: float = 1.0
    rim_intensity: float = 0.6
    noise_sigma: float = 0.05
    age_min: float = 20.0
    age_max: float = 72.0
    max_shift: int = 4

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise PhantomError("noise_sigma must be >= 0")
        if self.age_max <= self.age_min:
            raise PhantomError("age_max must exceed age_min")
        span = self.age_max - self.age_min
        r_max = self.cavity_radius_base + self.cavity_growth * span
        rim_min = self.rim_thickness_base - self.shell_thinning * span
        if rim_min <= 0:
            raise PhantomError(f"rim vanishes before age_max (thickness {rim_min:.2f})")
        if r_max >= min(self.semi_axes) - self.rim_thickness_base:
            raise PhantomError(f"cavity radius {r_max:.2f} at age_max reaches the rim")
        for n, a in zip(self.grid, self.semi_axes):
            if 2 * (a + self.max_shift) + 1 > n:
                raise PhantomError(f"ellipsoid with semi-axis {a} and shift {self.max_shift} "
                                   f"does not fit in {n} voxels")

    @property
    def center(self):
        return tuple(n // 2 for n in self.grid)

    def cavity_radius(self, age):
        return self.cavity_radius_base + self.cavity_growth * (age - self.age_min)

    def rim_thickness(self, age):
        return self.rim_thickness_base - self.shell_thinning * (age - self.age_min)

    def analytic_bbox(self, shift=(0, 0, 0)):
        """Inclusive (lo, hi) voxel bounds of the ellipsoid support."""
        lo = tuple(c - a + s for c, a, s in zip(self.center, self.semi_axes, shift))
        hi = tuple(c + a + s for c, a, s in zip(self.center, self.semi_axes, shift))
        return lo, hi

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def phantom_labels(age, params: PhantomParams, shift=(0, 0, 0)):
    """Noise-free label map: 0 background/cavity, 1 core, 2 rim."""
    if not params.age_min <= age <= params.age_max:
        raise PhantomError(f"age {age} outside [{params.age_min}, {params.age_max}]")
    c = np.array(params.center) + np.array(shift)
    x, y, z = np.ogrid[: params.grid[0], : params.grid[1], : params.grid[2]]
    ax, ay, az = params.semi_axes
    rho2 = ((x - c[0]) / ax) ** 2 + ((y - c[1]) / ay) ** 2 + ((z - c[2]) / az) ** 2
    inside = rho2 <= 1.0
    inner = 1.0 - params.rim_thickness(age) / min(params.semi_axes)
    rim = inside & (rho2 > inner * inner)
    d2 = (x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2
    cavity = d2 <= params.cavity_radius(age) ** 2
    labels = np.zeros(params.grid, dtype=np.uint8)
    labels[inside] = 1
    labels[rim] = 2
    labels[cavity] = 0
    return labels


def generate_phantom(age, params: PhantomParams, rng=None, translate=True) -> Volume:
    """One phantom volume for ``age`` (years)."""
    rng = rng if rng is not None else np.random.default_rng()
    if translate and params.max_shift > 0:
        shift = tuple(int(v) for v in rng.integers(-params.max_shift, params.max_shift + 1, size=3))
    else:
        shift = (0, 0, 0)
    labels = phantom_labels(age, params, shift)
    data = np.zeros(params.grid, dtype=np.float64)
    data[labels == 1] = params.core_intensity
    data[labels == 2] = params.rim_intensity
    if params.noise_sigma > 0:
        tissue = labels > 0
        noisy = data[tissue] + rng.normal(0.0, params.noise_sigma, size=int(tissue.sum()))
        data[tissue] = np.maximum(noisy, 0.0)
    return Volume(data.astype(np.float32), params.spacing)


def subject_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def generate_dataset(n, params: PhantomParams, seed, out_dir, prefix="sub") -> Manifest:
    """Write ``n`` phantoms as ``.nii.gz`` files plus ``manifest.csv`` into ``out_dir``.

    Ages are uniform on the parameter range; sexes alternate F, M, F, ...
    """
    if n < 1:
        raise PhantomError("n must be >= 1")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PhantomError(f"cannot create output directory {out}: {exc}") from exc
    ages = np.random.default_rng(np.random.SeedSequence([int(seed), 2**31])).uniform(
        params.age_min, params.age_max, size=n)
    subjects = []
    for i in range(n):
        sid = f"{prefix}-{i:05d}"
        vol = generate_phantom(float(ages[i]), params, subject_rng(seed, i))
        path = out / f"{sid}.nii.gz"
        try:
            write_nifti(vol, path, compress=True, descrip=f"phantom age={ages[i]:.6f}")
        except Exception as exc:
            raise PhantomError(f"cannot write {path}: {exc}") from exc
        subjects.append(Subject(sid, path.name, float(ages[i]), "F" if i % 2 == 0 else "M"))
    manifest = Manifest(subjects, root=out)
    manifest.write_csv(out / "manifest.csv")
    return manifest


def shifted_domain(params: PhantomParams, noise_sigma=0.2, rim_intensity=0.45) -> PhantomParams:
    """A "new scanner" variant: more noise and lower rim contrast, same anatomy."""
    return replace(params, noise_sigma=noise_sigma, rim_intensity=rim_intensity)
