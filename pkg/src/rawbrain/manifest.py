"""Dataset manifests (CSV) and in-memory datasets of preprocessed tensors.

Manifest CSV columns: ``subject_id, path, age_years, sex``. Relative paths
are resolved against the manifest's directory. A path may point at a NIfTI
file (preprocessed on load) or at a container file holding one
preprocessed tensor under the name ``"x"``.
"""
from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .container import read_container, write_container
from .errors import ConfigError, SpecMismatchError

COLUMNS = ("subject_id", "path", "age_years", "sex")


@dataclass(frozen=True)
class Subject:
    subject_id: str
    path: str
    age_years: float
    sex: str = ""


@dataclass
class Manifest:
    subjects: list
    root: Optional[Path] = None

    def __len__(self):
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    def resolve(self, subject: Subject) -> Path:
        p = Path(subject.path)
        if not p.is_absolute() and self.root is not None:
            p = Path(self.root) / p
        return p

    @property
    def ids(self):
        return [s.subject_id for s in self.subjects]

    @property
    def ages(self):
        return np.array([s.age_years for s in self.subjects], dtype=np.float64)

    def subset(self, ids):
        keep = set(ids)
        return Manifest([s for s in self.subjects if s.subject_id in keep], self.root)

    @classmethod
    def read_csv(cls, path):
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in COLUMNS if c not in (reader.fieldnames or [])]
            if missing:
                raise ConfigError(f"manifest {path} lacks columns {missing}", token=missing[0])
            subjects = [Subject(row["subject_id"], row["path"], float(row["age_years"]), row["sex"])
                        for row in reader]
        return cls(subjects, root=path.parent)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COLUMNS)
            for s in self.subjects:
                w.writerow([s.subject_id, s.path, repr(float(s.age_years)), s.sex])


@dataclass
class Dataset:
    """Preprocessed inputs ``x`` (N, 1, D, H, W) with ages and labels."""

    ids: list
    x: np.ndarray
    ages: np.ndarray
    sexes: list = field(default_factory=list)

    def __post_init__(self):
        self.ages = np.asarray(self.ages, dtype=np.float64)
        if not (len(self.ids) == len(self.x) == len(self.ages)):
            raise ValueError("ids, x and ages must have equal length")
        if not self.sexes:
            self.sexes = [""] * len(self.ids)

    def __len__(self):
        return len(self.ids)

    @property
    def grid(self):
        return tuple(self.x.shape[2:])

    def take(self, index):
        index = np.asarray(index, dtype=np.intp)
        return Dataset([self.ids[i] for i in index], self.x[index], self.ages[index],
                       [self.sexes[i] for i in index])

    def subset(self, ids):
        pos = {sid: i for i, sid in enumerate(self.ids)}
        return self.take([pos[s] for s in ids])


def save_tensor(path, x: np.ndarray, meta: Optional[dict] = None):
    write_container(path, {"kind": "tensor", **(meta or {})}, {"x": np.asarray(x, dtype=np.float32)})


def load_tensor(path):
    meta, arrays = read_container(path)
    return arrays["x"], meta


def _load_one(args):
    from .nifti import read_nifti
    from .preprocess import minimal_preprocess

    path, resolution = args
    suffixes = "".join(Path(path).suffixes)
    if suffixes.endswith(".nii") or suffixes.endswith(".nii.gz"):
        return minimal_preprocess(read_nifti(path), resolution).data[0]
    x, _ = load_tensor(path)
    return x.reshape(x.shape[-4:]) if x.ndim == 5 else x


def load_dataset(manifest: Manifest, resolution, workers=1) -> Dataset:
    """Load every subject, preprocessing NIfTI inputs to ``resolution``."""
    from .preprocess import get_resolution

    res = get_resolution(resolution)
    jobs = [(str(manifest.resolve(s)), res) for s in manifest]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            xs = list(pool.map(_load_one, jobs, chunksize=8))
    else:
        xs = [_load_one(j) for j in jobs]
    for s, x in zip(manifest, xs):
        if tuple(x.shape[-3:]) != tuple(res.grid):
            raise SpecMismatchError(f"{s.subject_id}: tensor grid {x.shape[-3:]} != {res.name} grid {res.grid}")
    x = np.stack(xs).astype(np.float32) if xs else np.zeros((0, 1) + tuple(res.grid), np.float32)
    return Dataset(manifest.ids, x, manifest.ages, [s.sex for s in manifest])
