"""Cross-validation and brain-age metrics.

Standardized MAE is MAE divided by the sample standard deviation (ddof=1)
of chronological age within the evaluated group, which makes groups with
different age ranges comparable.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .manifest import Dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    seed: int
    ids: tuple
    folds: tuple  # fold index per id, aligned with ``ids``

    def members(self, fold):
        return [i for i, f in zip(self.ids, self.folds) if f == fold]

    def sizes(self):
        return [self.folds.count(f) for f in range(self.k)]


def kfold_split(subject_ids, k, seed=0) -> FoldAssignment:
    """Shuffle ids with ``seed`` and deal them round-robin into ``k`` folds."""
    ids = list(subject_ids)
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(ids) < k:
        raise ValueError(f"k={k} exceeds the number of subjects ({len(ids)})")
    if len(set(ids)) != len(ids):
        raise ValueError("subject ids must be unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = [0] * len(ids)
    for rank, i in enumerate(order):
        folds[i] = rank % k
    return FoldAssignment(k, seed, tuple(ids), tuple(folds))


def _pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions, {target.size} targets")
    if pred.size == 0:
        raise ValueError("empty input")
    return pred, target


def mae(pred, target) -> float:
    pred, target = _pair(pred, target)
    return float(np.mean(np.abs(pred - target)))


def standardized_mae(pred, target) -> float:
    pred, target = _pair(pred, target)
    if target.size < 2:
        raise ValueError("standardized MAE needs at least two targets")
    sd = float(np.std(target, ddof=1))
    if sd == 0:
        raise ValueError("targets have zero spread")
    return mae(pred, target) / sd


def brain_age_gap(pred, target) -> np.ndarray:
    pred, target = _pair(pred, target)
    return pred - target


def pearson_r(x, y) -> float:
    x, y = _pair(x, y)
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = np.dot(xc, xc), np.dot(yc, yc)
    if sxx == 0 or syy == 0:
        raise ValueError("pearson_r needs nonzero variance in both inputs")
    return float(np.clip(np.dot(xc, yc) / np.sqrt(sxx * syy), -1.0, 1.0))


@dataclass
class GroupRow:
    label: str
    n: int
    mae: Optional[float] = None
    standardized_mae: Optional[float] = None
    note: str = ""


@dataclass
class EvalReport:
    mae: float
    fold_maes: list = field(default_factory=list)
    fold_std: Optional[float] = None
    pooled_mae: Optional[float] = None
    standardized_mae: Optional[float] = None
    bag_age_r: Optional[float] = None
    groups: list = field(default_factory=list)
    k: Optional[int] = None
    seed: Optional[int] = None
    predictions: dict = field(default_factory=dict)  # id -> {"pred", "age", "fold"}
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["groups"] = [GroupRow(**g) for g in d.get("groups", [])]
        return cls(**d)

    def to_table(self, title="model"):
        """Plain-text rendering in a "MAE (std)" layout."""
        cell = f"{self.mae:.2f}" + (f" ({self.fold_std:.2f})" if self.fold_std is not None else "")
        lines = [f"{'':<16}{'MAE (std)':>14}", f"{title:<16}{cell:>14}"]
        if self.standardized_mae is not None:
            lines.append(f"{'standardized':<16}{self.standardized_mae:>14.3f}")
        if self.bag_age_r is not None:
            lines.append(f"{'r(BAG, age)':<16}{self.bag_age_r:>14.3f}")
        if self.groups:
            lines.append("")
            lines.append(f"{'group':<16}{'n':>6}{'MAE':>10}{'std. MAE':>10}")
            for g in self.groups:
                if g.mae is None:
                    lines.append(f"{g.label:<16}{g.n:>6}{'-':>10}{'-':>10}  {g.note}")
                else:
                    lines.append(f"{g.label:<16}{g.n:>6}{g.mae:>10.2f}{g.standardized_mae:>10.3f}")
        return "\n".join(lines)


def bias_report(pred, target, groups) -> EvalReport:
    """Per-group n, MAE and standardized MAE, plus the overall BAG-age correlation.

    Groups with fewer than two members get a row with a note and no metrics.
    """
    pred, target = _pair(pred, target)
    groups = list(groups)
    if len(groups) != pred.size:
        raise ValueError("every subject needs a group label")
    rows = []
    for label in sorted(set(groups), key=str):
        sel = np.array([g == label for g in groups])
        n = int(sel.sum())
        if n < 2:
            log.warning("group %r has %d member(s); skipped", label, n)
            rows.append(GroupRow(str(label), n, note="skipped: fewer than 2 members"))
            continue
        try:
            smae = standardized_mae(pred[sel], target[sel])
        except ValueError:
            smae = None
        rows.append(GroupRow(str(label), n, mae(pred[sel], target[sel]), smae))
    r = None
    if pred.size >= 2:
        try:
            r = pearson_r(brain_age_gap(pred, target), target)
        except ValueError:
            r = None
    try:
        smae_all = standardized_mae(pred, target)
    except ValueError:
        smae_all = None
    return EvalReport(mae(pred, target), pooled_mae=mae(pred, target), standardized_mae=smae_all,
                      bag_age_r=r, groups=rows)


FitPredict = Callable[[Dataset, Dataset, int], np.ndarray]


def default_fit_predict(spec_builder, cfg, output_bias=True, seed=0) -> FitPredict:
    """Train a fresh model per fold and predict the held-out samples (eval mode, no augmentation)."""
    from .models import init_state, predict
    from .training import train

    def fit_predict(train_data, test_data, fold):
        spec = spec_builder()
        bias = float(np.mean(train_data.ages)) if output_bias else None
        state = init_state(spec, seed=seed + fold, output_bias=bias)
        ck = train(spec, state, train_data, cfg)
        return predict(spec, ck.state, test_data.x)

    return fit_predict


def cross_validate(spec_builder, data: Dataset, k, cfg=None, seed=0, fit_predict: Optional[FitPredict] = None,
                   group_by_sex=True) -> EvalReport:
    """k-fold cross-validation.

    The headline ``mae`` is the mean of the fold MAEs (``fold_std`` is their
    ddof=1 spread); ``pooled_mae``, ``standardized_mae`` and ``bag_age_r``
    are computed over all held-out predictions together.
    """
    if fit_predict is None:
        fit_predict = default_fit_predict(spec_builder, cfg, seed=seed)
    split = kfold_split(data.ids, k, seed)
    pos = {sid: i for i, sid in enumerate(data.ids)}
    preds = {}
    fold_maes = []
    for fold in range(k):
        test_ids = split.members(fold)
        train_ids = [i for i, f in zip(split.ids, split.folds) if f != fold]
        test = data.subset(test_ids)
        try:
            p = np.asarray(fit_predict(data.subset(train_ids), test, fold), dtype=np.float64).ravel()
        except Exception as exc:
            raise RuntimeError(f"fold {fold} failed: {exc}") from exc
        if p.size != len(test_ids):
            raise RuntimeError(f"fold {fold}: {p.size} predictions for {len(test_ids)} subjects")
        fold_maes.append(mae(p, test.ages))
        for sid, pi, age in zip(test_ids, p, test.ages):
            preds[sid] = {"pred": float(pi), "age": float(age), "fold": fold}
        log.info("fold %d: MAE %.3f", fold, fold_maes[-1])
    order = list(data.ids)
    all_pred = np.array([preds[s]["pred"] for s in order])
    all_age = np.array([preds[s]["age"] for s in order])
    groups = [data.sexes[pos[s]] or "all" for s in order] if group_by_sex else ["all"] * len(order)
    pooled = bias_report(all_pred, all_age, groups)
    return EvalReport(
        mae=float(np.mean(fold_maes)), fold_maes=fold_maes,
        fold_std=float(np.std(fold_maes, ddof=1)) if k > 1 else None,
        pooled_mae=pooled.mae, standardized_mae=pooled.standardized_mae, bag_age_r=pooled.bag_age_r,
        groups=pooled.groups, k=k, seed=seed, predictions=preds,
        config=cfg.to_dict() if cfg is not None and hasattr(cfg, "to_dict") else {},
    )
