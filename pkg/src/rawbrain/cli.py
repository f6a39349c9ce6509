"""Command-line entry point.

Subcommands follow the pipeline stages::

    rawbrain phantom-gen --out data/ --n 600 --seed 1
    rawbrain preprocess  --manifest data/manifest.csv --out pre/ --resolution low
    rawbrain lr-find     --manifest pre/manifest.csv
    rawbrain train       --manifest pre/manifest.csv --out model.ckpt --epochs 20
    rawbrain finetune    --checkpoint model.ckpt --manifest other/manifest.csv --out tl.ckpt
    rawbrain predict     --checkpoint tl.ckpt --manifest test/manifest.csv --report pred.json
    rawbrain crossval    --manifest pre/manifest.csv --k 10 --report cv.json
    rawbrain bias-report --predictions pred.json --report bias.json

Settings come from built-in defaults, then an optional ``--config`` JSON
file, then command-line flags (later wins). The resolved settings are
embedded in every checkpoint, report and preprocessed tensor written.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, RawBrainError

COMMANDS = ("phantom-gen", "preprocess", "lr-find", "train", "finetune", "predict", "crossval", "bias-report")

# paths each command cannot run without; "out" is created, the rest must exist
REQUIRED = {
    "phantom-gen": ("out",),
    "preprocess": ("manifest", "out"),
    "lr-find": ("manifest",),
    "train": ("manifest", "out"),
    "finetune": ("checkpoint", "manifest", "out"),
    "predict": ("checkpoint", "manifest"),
    "crossval": ("manifest",),
    "bias-report": ("predictions",),
}
MUST_EXIST = ("manifest", "checkpoint", "predictions")


@dataclass
class RunConfig:
    command: str = ""
    resolution: Optional[str] = None
    manifest: Optional[str] = None
    checkpoint: Optional[str] = None
    predictions: Optional[str] = None
    out: Optional[str] = None
    report: Optional[str] = None
    seed: int = 0
    workers: int = 1
    n: int = 100
    noise_sigma: Optional[float] = None
    k: int = 10
    eta_max: Optional[float] = None
    epochs: Optional[int] = None
    batch_size: Optional[int] = None
    weight_decay: Optional[float] = None
    momentum_min: Optional[float] = None
    momentum_max: Optional[float] = None
    pct_start: Optional[float] = None
    div_factor: Optional[float] = None
    final_div: Optional[float] = None
    augment: Optional[bool] = None
    lr_find_start: Optional[float] = None
    lr_find_end: Optional[float] = None
    lr_find_steps: Optional[int] = None

    def to_dict(self):
        return asdict(self)

    def train_config(self, resolution_name):
        from .training import TrainConfig, default_batch_size

        overrides = {f.name: getattr(self, f.name) for f in fields(TrainConfig)
                     if hasattr(self, f.name) and f.name != "seed" and getattr(self, f.name) is not None}
        overrides.setdefault("batch_size", default_batch_size(resolution_name))
        return TrainConfig(seed=self.seed, **overrides)


_TYPES = {}
for _f in fields(RunConfig):
    _t = str(_f.type)
    _TYPES[_f.name] = (bool if "bool" in _t else int if "int" in _t else float if "float" in _t else str)


def _coerce(key, value, source):
    want = _TYPES[key]
    if value is None:
        return None
    if want is bool:
        if isinstance(value, bool):
            return value
    elif want is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif want is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(value, str):
        return value
    raise ConfigError(f"{source}: {key!r} expects {want.__name__}, got {value!r}", token=key)


def build_parser():
    p = argparse.ArgumentParser(prog="rawbrain", description=__doc__.split("\n\n")[0],
                                argument_default=argparse.SUPPRESS)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON file with settings (flags override it)")
    p.add_argument("--resolution", choices=("high", "medium", "low"))
    for name in ("manifest", "checkpoint", "predictions", "out", "report"):
        p.add_argument(f"--{name}")
    for name in ("seed", "workers", "n", "k", "epochs", "batch-size", "lr-find-steps"):
        p.add_argument(f"--{name}", type=int)
    for name in ("noise-sigma", "eta-max", "weight-decay", "momentum-min", "momentum-max", "pct-start",
                 "div-factor", "final-div", "lr-find-start", "lr-find-end"):
        p.add_argument(f"--{name}", type=float)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        token = None
        if "unrecognized arguments:" in message:
            token = message.split("unrecognized arguments:")[1].split()[0]
        raise ConfigError(message, token=token)


def parse_config(argv, config_file=None) -> RunConfig:
    """Resolve a :class:`RunConfig` from ``argv`` and an optional JSON file."""
    parser = build_parser()
    parser.__class__ = _Parser
    ns = vars(parser.parse_args(argv))
    ns.pop("verbose", None)
    config_file = ns.pop("config", config_file)
    values = {}
    if config_file is not None:
        try:
            data = json.loads(Path(config_file).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {config_file} does not exist", token=str(config_file)) from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {config_file} is not valid JSON: {exc}", token=str(config_file)) from None
        if not isinstance(data, dict):
            raise ConfigError(f"config file {config_file} must hold a JSON object", token=str(config_file))
        for key, value in data.items():
            if key not in _TYPES:
                raise ConfigError(f"unknown config key {key!r}", token=key)
            if key == "command":
                # embedded configs carry their command; it must agree with the one invoked
                if value != ns["command"]:
                    raise ConfigError(f"config file is for {value!r}, not {ns['command']!r}", token=key)
                continue
            values[key] = _coerce(key, value, str(config_file))
    for key, value in ns.items():
        values[key] = _coerce(key, value, "command line")
    cfg = RunConfig(**values)
    for key in REQUIRED[cfg.command]:
        if getattr(cfg, key) is None:
            raise ConfigError(f"{cfg.command} requires --{key}", token=f"--{key}")
    for key in MUST_EXIST:
        path = getattr(cfg, key)
        if path is not None and key in REQUIRED[cfg.command] and not Path(path).exists():
            raise ConfigError(f"--{key} path {path} does not exist", token=path)
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _write_report(cfg, report, out=None, title="model"):
    report.config = {"run": cfg.to_dict(), **(report.config or {})}
    if cfg.report:
        Path(cfg.report).write_text(report.to_json() + "\n")
        Path(cfg.report).with_suffix(".txt").write_text(report.to_table(title) + "\n")
    print(report.to_table(title), file=out or sys.stdout)


def _dataset(cfg, resolution):
    from .manifest import Manifest, load_dataset

    return load_dataset(Manifest.read_csv(cfg.manifest), resolution, workers=cfg.workers)


def _cmd_phantom_gen(cfg):
    from .phantom import PhantomParams, generate_dataset

    params = PhantomParams()
    if cfg.noise_sigma is not None:
        params = replace(params, noise_sigma=cfg.noise_sigma)
    m = generate_dataset(cfg.n, params, cfg.seed, cfg.out)
    Path(cfg.out, "phantom.json").write_text(
        json.dumps({"params": params.to_dict(), "run": cfg.to_dict()}, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(m)} phantoms and manifest.csv to {cfg.out}")


def _preprocess_one(job):
    from .manifest import save_tensor
    from .nifti import read_nifti
    from .preprocess import minimal_preprocess

    src, dst, resolution, meta = job
    save_tensor(dst, minimal_preprocess(read_nifti(src), resolution).data, meta)


def _cmd_preprocess(cfg):
    from concurrent.futures import ProcessPoolExecutor

    from .manifest import Manifest, Subject

    res = cfg.resolution or "low"
    m = Manifest.read_csv(cfg.manifest)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs, rows = [], []
    for s in m:
        dst = out / f"{s.subject_id}.rbt"
        jobs.append((str(m.resolve(s)), str(dst), res,
                     {"subject_id": s.subject_id, "resolution": res, "run": cfg.to_dict()}))
        rows.append(Subject(s.subject_id, dst.name, s.age_years, s.sex))
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            list(pool.map(_preprocess_one, jobs))
    else:
        for job in jobs:
            _preprocess_one(job)
    Manifest(rows, out).write_csv(out / "manifest.csv")
    print(f"preprocessed {len(rows)} subjects to {res} grid in {out}")


def _fresh_model(cfg, data, resolution):
    from .models import build_resnet3d, init_state

    spec = build_resnet3d(resolution)
    return spec, init_state(spec, seed=cfg.seed, output_bias=float(np.mean(data.ages)))


def _cmd_lr_find(cfg):
    from .training import lr_find

    res = cfg.resolution or "low"
    data = _dataset(cfg, res)
    spec, state = _fresh_model(cfg, data, res)
    result = lr_find(spec, state, data, cfg.train_config(res))
    print(f"{'lr':>12} {'smoothed loss':>14}")
    for lr, loss in zip(result.lrs, result.losses):
        print(f"{lr:12.4e} {loss:14.4f}")
    print(f"eta_max = {result.eta_max:.6g}  (min loss at lr {result.best_lr:.6g})")
    if cfg.report:
        Path(cfg.report).write_text(json.dumps({**result.to_dict(), "run": cfg.to_dict()}, indent=2) + "\n")


def _save(ck, cfg):
    from .training import save_checkpoint

    ck.meta = {"run": cfg.to_dict()}
    save_checkpoint(ck, cfg.out)


def _cmd_train(cfg):
    from .training import train

    res = cfg.resolution or "low"
    data = _dataset(cfg, res)
    spec, state = _fresh_model(cfg, data, res)
    ck = train(spec, state, data, cfg.train_config(res))
    _save(ck, cfg)
    losses = [f"{e['loss']:.3f}" for e in ck.log["epochs"]]
    print(f"trained {len(losses)} epochs (eta_max={ck.log['eta_max']:.4g}); epoch losses: {', '.join(losses)}")


def _checkpoint_resolution(cfg):
    from .preprocess import RESOLUTIONS
    from .training import check_compatible, load_checkpoint

    ck = load_checkpoint(cfg.checkpoint)
    if cfg.resolution is not None:
        check_compatible(ck, cfg.resolution)
        return ck, cfg.resolution
    for name, r in RESOLUTIONS.items():
        if tuple(r.grid) == ck.spec.grid:
            return ck, name
    from .preprocess import Resolution
    return ck, Resolution("checkpoint", ck.spec.grid)


def _cmd_finetune(cfg):
    from .training import fine_tune

    ck, res = _checkpoint_resolution(cfg)
    data = _dataset(cfg, res)
    name = res if isinstance(res, str) else "low"
    out = fine_tune(ck, data, cfg.train_config(name))
    _save(out, cfg)
    print(f"fine-tuned for {len(out.log['epochs'])} epochs (eta_max={out.log['eta_max']:.4g})")


def _cmd_predict(cfg):
    from .evaluation import bias_report
    from .models import predict

    ck, res = _checkpoint_resolution(cfg)
    data = _dataset(cfg, res)
    pred = predict(ck.spec, ck.state, data.x)
    report = bias_report(pred, data.ages, [s or "all" for s in data.sexes])
    report.predictions = {sid: {"pred": float(p), "age": float(a), "sex": s}
                          for sid, p, a, s in zip(data.ids, pred, data.ages, data.sexes)}
    _write_report(cfg, report, title="predict")


def _cmd_crossval(cfg):
    from .evaluation import cross_validate
    from .models import build_resnet3d

    res = cfg.resolution or "low"
    data = _dataset(cfg, res)
    report = cross_validate(lambda: build_resnet3d(res), data, cfg.k, cfg.train_config(res), seed=cfg.seed)
    _write_report(cfg, report, title=f"3D CNN {res}")


def _cmd_bias_report(cfg):
    from .evaluation import bias_report
    from .manifest import Manifest

    data = json.loads(Path(cfg.predictions).read_text())
    preds = data.get("predictions", data)
    ids = sorted(preds)
    sexes = {}
    if cfg.manifest:
        sexes = {s.subject_id: s.sex for s in Manifest.read_csv(cfg.manifest)}
    groups = [sexes.get(i) or preds[i].get("sex") or "all" for i in ids]
    report = bias_report([preds[i]["pred"] for i in ids], [preds[i]["age"] for i in ids], groups)
    _write_report(cfg, report, title="bias")


HANDLERS = {
    "phantom-gen": _cmd_phantom_gen, "preprocess": _cmd_preprocess, "lr-find": _cmd_lr_find,
    "train": _cmd_train, "finetune": _cmd_finetune, "predict": _cmd_predict,
    "crossval": _cmd_crossval, "bias-report": _cmd_bias_report,
}


def dispatch(cfg: RunConfig) -> int:
    try:
        HANDLERS[cfg.command](cfg)
    except RawBrainError as exc:
        _report_error(exc)
        return 1
    return 0


def _report_error(exc):
    info = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("token", "field", "axis", "batch_ids"):
        if getattr(exc, attr, None):
            info[attr] = getattr(exc, attr)
    print(json.dumps(info), file=sys.stderr)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    logging.basicConfig(level=logging.INFO if ("-v" in argv or "--verbose" in argv) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(argv)
    except ConfigError as exc:
        _report_error(exc)
        return 2
    return dispatch(cfg)


if __name__ == "__main__":
    sys.exit(main())
