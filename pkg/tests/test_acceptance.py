"""The ten acceptance criteria, one test each, at their stated tolerances."""
import time
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from rawbrain import ops
from rawbrain.errors import BadMagicError, TruncatedDataError, UnsupportedDatatypeError
from rawbrain.evaluation import cross_validate, kfold_split, mae
from rawbrain.gradcheck import grad_check
from rawbrain.manifest import Dataset, load_dataset
from rawbrain.models import build_resnet3d, count_parameters, forward, init_state, predict
from rawbrain.nifti import Volume, read_nifti, write_nifti
from rawbrain.phantom import PhantomParams, generate_dataset, shifted_domain
from rawbrain.preprocess import AugmentConfig, augment_random_crop, resample_array, resample_trilinear, source_coords
from rawbrain.tensor import Tensor
from rawbrain.training import (TrainConfig, fine_tune, lr_find, one_cycle, one_cycle_peak,
                               save_checkpoint, train)

from conftest import SHIFT_SEED

DATA = Path(__file__).parent / "data"
MEAN_PREDICTOR_FLOOR = 52 / 4  # E|U - mean| for U uniform on a 52-year range


def test_c01_parameter_counts(acceptance):
    with acceptance(1, "parameter counts") as rec:
        t = time.perf_counter()
        got = {r: count_parameters(build_resnet3d(r)) for r in ("high", "medium", "low")}
        elapsed = time.perf_counter() - t
        rec["text"] = f"{got} in {elapsed:.3f}s"
        assert got == {"high": 49_820_497, "medium": 6_317_905, "low": 1_015_633}
        assert elapsed < 1.0


def test_c02_high_res_shape_ladder(acceptance):
    with acceptance(2, "high-res shape ladder") as rec:
        spec = build_resnet3d("high")
        ladder = dict(spec.shape_ladder())
        # run the stem and pool for real on one sample to confirm the inferred extents
        state = init_state(spec, seed=0)
        x = Tensor(np.random.default_rng(0).random((1, 1, 136, 168, 136), dtype=np.float32))
        from rawbrain.models import run_layers

        stem = [layer for layer in spec.layers if getattr(layer, "name", "").startswith("stem")]
        pool_at = next(i for i, layer in enumerate(spec.layers) if type(layer).__name__ == "MaxPool")
        h = run_layers(tuple(stem), state, x, training=True)
        pooled = run_layers(tuple(spec.layers[len(stem):pool_at + 1]), state, h, training=True)
        rec["text"] = f"stem {h.shape}, pool {pooled.shape}, flatten {ladder['Flatten'][0]}"
        assert h.shape == (1, 16, 68, 84, 68)
        assert pooled.shape == (1, 16, 34, 42, 34)
        assert ladder["Flatten"] == (1_553_664,)


def test_c03_gradient_suite(acceptance):
    with acceptance(3, "gradient checks") as rec:
        rng = np.random.default_rng(0)

        def t(*shape, positive=False):
            v = rng.standard_normal(shape)
            return Tensor(np.abs(v) + 0.5 if positive else v, requires_grad=True)

        x5, w5, bias = t(2, 2, 5, 6, 4), t(3, 2, 3, 3, 3), t(3)
        gamma, beta = t(2), t(2)
        a, b = t(2, 3, 3, 3, 3), t(2, 3, 3, 3, 3)
        xm, wd, bd = t(4, 5), t(5, 3), t(3)
        pred, target = t(6), t(6)
        cases = {
            "conv3d": (lambda x, w, c: ops.conv3d(x, w, c, stride=2, padding=1), [x5, w5, bias], 1e-5),
            "maxpool3d": (lambda x: ops.maxpool3d(x, 3, 2, 1), [x5], 1e-4),
            "batchnorm": (lambda x, g, c: ops.batchnorm(x, g, c, training=True), [x5, gamma, beta], 1e-5),
            "relu": (ops.relu, [a], 1e-5),
            "sigmoid": (ops.sigmoid, [a], 1e-5),
            "add": (ops.add, [a, b], 1e-5),
            "dense": (ops.dense, [xm, wd, bd], 1e-5),
            "flatten": (ops.flatten, [a], 1e-5),
            "mse_loss": (ops.mse_loss, [pred, target], 1e-5),
        }
        worst = {name: grad_check(fn, inputs, eps=eps) for name, (fn, inputs, eps) in cases.items()}
        spec = build_resnet3d((8, 10, 8))
        state = init_state(spec, seed=1, dtype=np.float64)
        x = Tensor(rng.standard_normal((3, 1, 8, 10, 8)), requires_grad=True)
        ages = rng.standard_normal(3)
        for p in state.params.values():
            p.requires_grad = False
        checked = [x] + [state.params[n] for n in ("block1.proj.weight", "block2.bn2.weight", "head.fc2.bias")]
        for p in checked[1:]:
            p.requires_grad = True
        e2e = grad_check(lambda *_: ops.mse_loss(forward(spec, state, x, training=True), ages), checked)
        op_max = max(worst.values())
        rec["text"] = f"max op error {op_max:.2e} ({max(worst, key=worst.get)}), end-to-end {e2e:.2e}"
        assert op_max < 1e-4
        assert e2e < 1e-3


def test_c04_schedule_anchors(acceptance):
    with acceptance(4, "schedule anchors") as rec:
        cfg = TrainConfig(eta_max=0.02)
        total = 300
        peak = one_cycle_peak(total, cfg.pct_start)
        lr0, m0 = one_cycle(0, total, cfg)
        lrp, mp = one_cycle(peak, total, cfg)
        _, mn = one_cycle(total - 1, total, cfg)
        lrs = np.array([one_cycle(s, total, cfg)[0] for s in range(total)])
        jump = np.abs(np.diff(lrs)).max()
        assert m0 == pytest.approx(0.95, abs=1e-12) and mn == pytest.approx(0.95, abs=1e-12)
        assert lrp == pytest.approx(0.02, rel=1e-12) and mp == pytest.approx(0.85, abs=1e-12)
        assert jump <= np.pi / 2 * 0.02 / peak * 1.0001

        rng = np.random.default_rng(0)
        data = Dataset([str(i) for i in range(8)], rng.random((8, 1, 8, 10, 8), dtype=np.float32),
                       rng.uniform(20, 72, 8))
        spec = build_resnet3d((8, 10, 8))
        state = init_state(spec, seed=0, output_bias=46.0)
        before = {k: v.copy() for k, v in state.arrays().items()}
        res = lr_find(spec, state, data, TrainConfig(batch_size=4), lr_start=1e-7, lr_end=1e-3, num_steps=40)
        want = [1e-7 * (1e-3 / 1e-7) ** (i / 39) for i in range(len(res.lrs))]
        geometric = np.max(np.abs(np.array(res.lrs) / want - 1))
        untouched = all(before[k].tobytes() == v.tobytes() for k, v in state.arrays().items())
        rec["text"] = (f"mom {m0:.2f}/{mn:.2f}, peak ({lrp:.3g}, {mp:.2f}), max lr jump {jump:.2e}, "
                       f"sweep ratio error {geometric:.1e}, state untouched {untouched}")
        assert geometric < 1e-13 and untouched


@pytest.mark.slow
def test_c05_phantom_learnability(acceptance, phantom_split, phantom_model):
    with acceptance(5, "phantom learnability") as rec:
        _, test = phantom_split
        err = mae(predict(phantom_model.spec, phantom_model.state, test.x), test.ages)
        limit = 0.6 * MEAN_PREDICTOR_FLOOR
        rec["text"] = f"held-out MAE {err:.2f} <= {limit:.2f} (eta_max {phantom_model.log['eta_max']:.3g})"
        assert err <= limit


@pytest.mark.slow
def test_c06_transfer_learning(acceptance, phantom_model, tmp_path):
    with acceptance(6, "transfer learning") as rec:
        shifted = load_dataset(generate_dataset(300, shifted_domain(PhantomParams()), SHIFT_SEED, tmp_path), "low")
        tune, test = shifted.take(range(200)), shifted.take(range(200, 300))
        zero_shot = mae(predict(phantom_model.spec, phantom_model.state, test.x), test.ages)
        tuned = fine_tune(phantom_model, tune, replace(phantom_model.config, epochs=5))
        after = mae(predict(tuned.spec, tuned.state, test.x), test.ages)
        rec["text"] = f"zero-shot MAE {zero_shot:.2f}, fine-tuned MAE {after:.2f}"
        assert after < zero_shot


def test_c07_determinism(acceptance, tmp_path):
    with acceptance(7, "determinism") as rec:
        man = generate_dataset(40, PhantomParams(), seed=3, out_dir=tmp_path / "a")
        generate_dataset(40, PhantomParams(), seed=3, out_dir=tmp_path / "b")
        names = ["manifest.csv"] + [Path(s.path).name for s in man]
        same_files = all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names)
        data = load_dataset(man, "low")
        spec = build_resnet3d("low")
        cfg = TrainConfig(eta_max=None, epochs=2, batch_size=8, seed=5, lr_find_steps=30)
        runs = []
        for i in range(2):
            ck = train(spec, init_state(spec, seed=5, output_bias=float(data.ages.mean())), data, cfg)
            save_checkpoint(ck, tmp_path / f"run{i}.ckpt")
            runs.append((tmp_path / f"run{i}.ckpt").read_bytes())
        rec["text"] = f"{len(names)} phantom files identical {same_files}, checkpoints identical {runs[0] == runs[1]}"
        assert same_files and runs[0] == runs[1]


def test_c08_nifti_conformance(acceptance, tmp_path):
    with acceptance(8, "NIfTI conformance") as rec:
        rng = np.random.default_rng(0)
        for i in range(20):
            shape = tuple(rng.integers(1, 12, 3))
            vol = Volume(rng.standard_normal(shape).astype(np.float32), tuple(rng.uniform(0.5, 3, 3)))
            path = tmp_path / f"v{i}.nii{'.gz' if i % 2 else ''}"
            write_nifti(vol, path)
            assert read_nifti(path).data.tobytes() == vol.data.tobytes()
        external = read_nifti(DATA / "le_f32.nii")
        assert external.data.tobytes() == np.load(DATA / "f32.npy").tobytes()
        good = (tmp_path / "v0.nii").read_bytes()
        bad_magic = good[:344] + b"xxxx" + good[348:]
        bad_type = good[:70] + (32).to_bytes(2, "little") + (64).to_bytes(2, "little") + good[74:]
        raised = []
        for blob, kind in ((bad_magic, BadMagicError), (bad_type, UnsupportedDatatypeError),
                           (good[:-3], TruncatedDataError)):
            (tmp_path / "bad.nii").write_bytes(blob)
            with pytest.raises(kind):
                read_nifti(tmp_path / "bad.nii")
            raised.append(kind.__name__)
        rec["text"] = f"20 round trips bit-exact, external fixture identical, raised {', '.join(raised)}"


def test_c09_resampling_identities(acceptance):
    with acceptance(9, "resampling identities") as rec:
        rng = np.random.default_rng(0)
        data = rng.standard_normal((7, 8, 9)).astype(np.float32)
        identity = resample_trilinear(Volume(data), (7, 8, 9)).data.tobytes() == data.tobytes()
        const = np.all(resample_array(np.full((5, 6, 7), 1.25), (9, 4, 11)) == 1.25)
        src, dst = (12, 15, 10), (17, 9, 23)
        f = lambda x, y, z: 2 * x + 3 * y - z + 1  # noqa: E731
        out = resample_array(f(*np.meshgrid(*[np.arange(n, dtype=np.float64) for n in src], indexing="ij")), dst)
        g = np.meshgrid(*(source_coords(n, m) for n, m in zip(src, dst)), indexing="ij")
        inside = np.all([(c >= 0) & (c <= n - 1) for c, n in zip(g, src)], axis=0)
        rel = (np.abs(out - f(*g)) / np.maximum(np.abs(f(*g)), 1.0))[inside].max()
        x = rng.random((1, 1, 34, 42, 34)).astype(np.float32)
        aug = augment_random_crop(x, AugmentConfig(1.0, 1.0), rng).tobytes() == x.tobytes()
        rec["text"] = f"identity {identity}, constant {bool(const)}, affine rel error {rel:.1e}, crop 1.0 identity {aug}"
        assert identity and const and rel < 1e-5 and aug


def test_c10_cross_validation_harness(acceptance):
    with acceptance(10, "cross-validation harness") as rec:
        ids = [f"sub-{i:05d}" for i in range(10_691)]
        sizes = Counter(kfold_split(ids, 10, seed=0).sizes())
        ages = np.random.default_rng(0).uniform(20, 72, len(ids))
        data = Dataset(ids, np.zeros((len(ids), 1, 1, 1, 1), np.float32), ages)
        report = cross_validate(None, data, 10, fit_predict=lambda tr, te, fold: np.full(len(te.ids), 46.0))
        partition = sorted(report.predictions) == sorted(ids)
        mean_fold = float(np.mean(report.fold_maes))
        rec["text"] = f"fold sizes {dict(sizes)}, partition {partition}, mae {report.mae:.4f} = mean fold {mean_fold:.4f}"
        assert sizes == Counter({1069: 9, 1070: 1})
        assert partition and report.mae == mean_fold
