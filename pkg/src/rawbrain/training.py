"""AdamW, the one-cycle schedule, the LR finder, the training loop and checkpoints."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import ops
from .container import decode_container, encode_container
from .errors import ContainerError, GradientError, SpecMismatchError, TrainingError
from .manifest import Dataset
from .models import ModelSpec, ModelState, check_state, forward
from .preprocess import AugmentConfig, augment_random_crop, get_resolution
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "rawbrain-checkpoint"


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings. ``eta_max=None`` means: find it with :func:`lr_find`."""

    eta_max: Optional[float] = None
    momentum_min: float = 0.85
    momentum_max: float = 0.95
    beta2: float = 0.99
    eps: float = 1e-5
    weight_decay: float = 0.01
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    pct_start: float = 0.25
    div_factor: float = 25.0
    final_div: float = 1e4
    augment: bool = True
    aug_min_fraction: float = 0.9
    aug_max_fraction: float = 1.0
    drop_last: bool = True
    lr_find_start: float = 1e-7
    lr_find_end: float = 10.0
    lr_find_steps: int = 100

    def __post_init__(self):
        if not 0 < self.momentum_min < self.momentum_max < 1:
            raise ValueError("need 0 < momentum_min < momentum_max < 1")
        if self.eta_max is not None and self.eta_max <= 0:
            raise ValueError("eta_max must be > 0")
        if not 0 < self.pct_start < 1:
            raise ValueError("pct_start must lie in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys {sorted(unknown)}")
        return cls(**d)


def default_batch_size(resolution) -> int:
    return 8 if get_resolution(resolution).name == "high" else 32


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def copy(self):
        return OptimizerState({k: a.copy() for k, a in self.m.items()},
                              {k: a.copy() for k, a in self.v.items()}, self.t)


def adamw_step(params: dict, grads: dict, opt: OptimizerState, lr, beta1, beta2=0.99, eps=1e-5,
               weight_decay=0.0):
    """One AdamW update, in place.

    ``theta <- theta * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)``; the
    decay acts on the weights directly, never through the moments.
    Parameters whose gradient is ``None`` are left untouched.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for parameter {name!r}")
    opt.t += 1
    t = opt.t
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in opt.m:
            opt.m[name] = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
        m, v = opt.m[name], opt.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= step


def _cos_anneal(start, end, frac):
    return end + (start - end) / 2.0 * (1.0 + math.cos(math.pi * frac))


def one_cycle_peak(total_steps, pct_start):
    peak = int(round(pct_start * total_steps))
    if total_steps >= 3:
        peak = min(max(peak, 1), total_steps - 2)
    return min(peak, max(total_steps - 1, 0))


def one_cycle(step, total_steps, cfg: TrainConfig, eta_max=None):
    """(lr, momentum) at ``step`` of a ``total_steps`` one-cycle run.

    Phase 1 (steps 0..peak) cosine-anneals lr from eta_max/div_factor up to
    eta_max while momentum falls from momentum_max to momentum_min; phase 2
    (peak..total_steps-1) anneals lr down to eta_max/(div_factor*final_div)
    and momentum back up. ``peak = round(pct_start * total_steps)``.
    """
    eta = cfg.eta_max if eta_max is None else eta_max
    if eta is None:
        raise ValueError("one_cycle needs eta_max")
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    lr_start = eta / cfg.div_factor
    lr_end = eta / (cfg.div_factor * cfg.final_div)
    peak = one_cycle_peak(total_steps, cfg.pct_start)
    if step <= peak:
        frac = step / peak if peak > 0 else 0.0
        return (_cos_anneal(lr_start, eta, frac), _cos_anneal(cfg.momentum_max, cfg.momentum_min, frac))
    frac = (step - peak) / (total_steps - 1 - peak)
    return _cos_anneal(eta, lr_end, frac), _cos_anneal(cfg.momentum_min, cfg.momentum_max, frac)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

def _batches(n, batch_size, rng, drop_last):
    order = rng.permutation(n)
    stop = n - n % batch_size if drop_last and n >= batch_size else n
    return [order[i : min(i + batch_size, stop)] for i in range(0, stop, batch_size)]


def _make_batch(data: Dataset, idx, cfg: TrainConfig, rng, dtype):
    x = data.x[idx]
    if cfg.augment:
        acfg = AugmentConfig(cfg.aug_min_fraction, cfg.aug_max_fraction)
        x = np.stack([augment_random_crop(xi, acfg, rng) for xi in x])
    return Tensor(x.astype(dtype, copy=False)), data.ages[idx]


def _param_dtype(state):
    return next(iter(state.params.values())).dtype


def train_step(spec, state, x, y, opt, lr, beta1, cfg: TrainConfig):
    """Forward, backward and one AdamW update; returns the batch loss."""
    state.zero_grad()
    with Tape() as tape:
        pred = forward(spec, state, x, training=True)
        loss = ops.mse_loss(pred, Tensor(np.asarray(y, dtype=x.dtype)))
    value = float(loss.data)
    if not np.isfinite(value):
        return value
    tape.backward(loss)
    adamw_step(state.params, {k: p.grad for k, p in state.params.items()}, opt, lr, beta1, cfg.beta2,
               cfg.eps, cfg.weight_decay)
    return value


# ---------------------------------------------------------------------------
# LR finder
# ---------------------------------------------------------------------------

@dataclass
class LRFindResult:
    lrs: list
    losses: list
    raw_losses: list
    best_lr: float
    eta_max: float

    def to_dict(self):
        return asdict(self)


def lr_find(spec: ModelSpec, state: ModelState, data: Dataset, cfg: TrainConfig, lr_start=None,
            lr_end=None, num_steps=None, beta=0.98, seed=None) -> LRFindResult:
    """Mock training with an exponentially growing learning rate.

    Runs on a copy of ``state`` so the caller's model is untouched. The loss
    is smoothed by a bias-corrected moving average (factor ``beta``); the
    sweep stops once it exceeds 4x the best value. ``eta_max`` is the
    learning rate of the smallest smoothed loss divided by 10.
    """
    lr_start = cfg.lr_find_start if lr_start is None else lr_start
    lr_end = cfg.lr_find_end if lr_end is None else lr_end
    num_steps = cfg.lr_find_steps if num_steps is None else num_steps
    if not 0 < lr_start < lr_end:
        raise ValueError("need 0 < lr_start < lr_end")
    if num_steps < 2:
        raise ValueError("num_steps must be >= 2")
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    work = state.copy()
    opt = OptimizerState()
    dtype = _param_dtype(work)
    bs = min(cfg.batch_size, len(data))
    queue = []
    lrs, smooth, raw = [], [], []
    avg, best = 0.0, math.inf
    for i in range(num_steps):
        lr = lr_start * (lr_end / lr_start) ** (i / (num_steps - 1))
        if not queue:
            queue = _batches(len(data), bs, rng, cfg.drop_last)
        idx = queue.pop(0)
        x, y = _make_batch(data, idx, cfg, rng, dtype)
        try:
            loss = train_step(spec, work, x, y, opt, lr, 0.9, cfg)
        except GradientError:
            loss = math.inf
        if not np.isfinite(loss):
            if i == 0:
                raise TrainingError(f"loss diverged at the first LR-finder step (lr={lr_start:g}); "
                                    f"use a smaller lr_start", [data.ids[j] for j in idx])
            break
        avg = beta * avg + (1 - beta) * loss
        sm = avg / (1 - beta ** (i + 1))
        lrs.append(lr)
        raw.append(loss)
        smooth.append(sm)
        best = min(best, sm)
        if sm > 4 * best:
            break
    k = int(np.argmin(smooth))
    return LRFindResult(lrs, smooth, raw, lrs[k], lrs[k] / 10.0)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    spec: ModelSpec
    state: ModelState
    opt: OptimizerState
    config: TrainConfig
    log: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def train(spec: ModelSpec, state: ModelState, data: Dataset, cfg: TrainConfig,
          opt: Optional[OptimizerState] = None) -> Checkpoint:
    """Train with augmentation, MSE, AdamW and the one-cycle schedule.

    ``state`` is copied, not modified. When ``cfg.eta_max`` is ``None`` the
    LR finder runs first and its result is kept in the log.
    """
    if len(data) == 0:
        raise TrainingError("empty training set")
    if tuple(data.x.shape[1:]) != spec.input_shape:
        raise SpecMismatchError(f"data sample shape {tuple(data.x.shape[1:])} != model input {spec.input_shape}")
    check_state(spec, state)
    state = state.copy()
    opt = OptimizerState() if opt is None else opt.copy()
    run_log = {"epochs": []}
    eta_max = cfg.eta_max
    if eta_max is None and cfg.epochs > 0:
        found = lr_find(spec, state, data, cfg)
        eta_max = found.eta_max
        run_log["lr_find"] = found.to_dict()
        log.info("lr_find: eta_max=%.4g", eta_max)
    run_log["eta_max"] = eta_max

    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 1]))
    bs = min(cfg.batch_size, len(data))
    per_epoch = len(_batches(len(data), bs, np.random.default_rng(0), cfg.drop_last))
    total = cfg.epochs * per_epoch
    dtype = _param_dtype(state)
    step = 0
    for epoch in range(cfg.epochs):
        losses, sizes = [], []
        for idx in _batches(len(data), bs, rng, cfg.drop_last):
            x, y = _make_batch(data, idx, cfg, rng, dtype)
            lr, mom = one_cycle(step, total, cfg, eta_max)
            try:
                loss = train_step(spec, state, x, y, opt, lr, mom, cfg)
            except GradientError as exc:
                raise TrainingError(f"epoch {epoch} step {step}: {exc}", [data.ids[j] for j in idx]) from exc
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch} step {step}", [data.ids[j] for j in idx])
            losses.append(loss)
            sizes.append(len(idx))
            step += 1
        mean = float(np.average(losses, weights=sizes))
        run_log["epochs"].append({"epoch": epoch, "loss": mean, "batch_losses": losses, "batch_sizes": sizes})
        log.info("epoch %d: loss %.4f", epoch, mean)
    return Checkpoint(spec, state, opt, cfg, run_log, rng.bit_generator.state)


def epoch_losses(ck: Checkpoint):
    return [e["loss"] for e in ck.log.get("epochs", [])]


def check_compatible(ck: Checkpoint, target):
    """Raise :class:`SpecMismatchError` unless ``ck`` fits ``target`` (spec, grid or resolution)."""
    if isinstance(target, ModelSpec):
        ok, want = ck.spec == target, target.name
    else:
        grid = tuple(target) if isinstance(target, (tuple, list)) else get_resolution(target).grid
        ok, want = ck.spec.grid == tuple(grid), f"grid {tuple(grid)}"
    if not ok:
        raise SpecMismatchError(f"checkpoint model {ck.spec.name} (grid {ck.spec.grid}) does not match {want}")


def fine_tune(ck: Checkpoint, data: Dataset, cfg: TrainConfig, resolution=None) -> Checkpoint:
    """Transfer learning: the same routine as :func:`train`, started from ``ck``.

    The optimizer state is reset and the LR finder re-run on ``data``.
    """
    if resolution is not None:
        check_compatible(ck, resolution)
    if ck.spec.grid is not None and tuple(data.x.shape[2:]) != ck.spec.grid:
        raise SpecMismatchError(f"data grid {tuple(data.x.shape[2:])} != checkpoint grid {ck.spec.grid}")
    return train(ck.spec, ck.state, data, replace(cfg, eta_max=None))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def checkpoint_bytes(ck: Checkpoint) -> bytes:
    meta = {
        "kind": CHECKPOINT_KIND,
        "spec": ck.spec.to_dict(),
        "config": ck.config.to_dict(),
        "log": ck.log,
        "rng_state": ck.rng_state,
        "opt_t": ck.opt.t,
        "training": ck.state.training,
        "bn_ready": ck.state.bn_ready,
        "meta": ck.meta,
    }
    arrays = ck.state.arrays()
    for k in sorted(ck.opt.m):
        arrays[f"opt.m/{k}"] = ck.opt.m[k]
        arrays[f"opt.v/{k}"] = ck.opt.v[k]
    return encode_container(meta, arrays)


def save_checkpoint(ck: Checkpoint, path):
    Path(path).write_bytes(checkpoint_bytes(ck))


def load_checkpoint(path) -> Checkpoint:
    meta, arrays = decode_container(Path(path).read_bytes())
    if meta.get("kind") != CHECKPOINT_KIND:
        raise ContainerError(f"{path} holds a {meta.get('kind')!r}, not a checkpoint")
    spec = ModelSpec.from_dict(meta["spec"])
    params, buffers, m, v = {}, {}, {}, {}
    for name, arr in arrays.items():
        group, key = name.split("/", 1)
        if group == "param":
            params[key] = Tensor(arr, requires_grad=True, name=key)
        elif group == "buffer":
            buffers[key] = arr
        elif group == "opt.m":
            m[key] = arr
        elif group == "opt.v":
            v[key] = arr
        else:
            raise ContainerError(f"unexpected tensor {name!r} in checkpoint")
    state = ModelState(params, buffers, meta["training"], meta["bn_ready"])
    try:
        check_state(spec, state)
    except SpecMismatchError as exc:
        raise ContainerError(f"tensor directory inconsistent with stored spec: {exc}") from exc
    for k in m:
        if k not in params or m[k].shape != params[k].shape or v.get(k, m[k]).shape != m[k].shape:
            raise ContainerError(f"optimizer moments for {k!r} do not match the parameter")
    return Checkpoint(spec, state, OptimizerState(m, v, meta["opt_t"]), TrainConfig.from_dict(meta["config"]),
                      meta["log"], meta["rng_state"], meta.get("meta", {}))
