from contextlib import contextmanager

import numpy as np
import pytest

ACCEPTANCE = pytest.StashKey[dict]()

# the phantom learnability run, shared by the acceptance and training suites
TRAIN_N, TEST_N = 500, 100
PHANTOM_SEED = 1
SHIFT_SEED = 7


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(lines):
        terminalreporter.write_line(lines[num])


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per criterion, printed in the terminal summary."""
    store = request.config.stash[ACCEPTANCE]

    @contextmanager
    def criterion(num, title):
        detail = {}
        try:
            yield detail
        except BaseException as exc:
            store[num] = f"[FAIL] {num:>2}. {title}: {detail.get('text', '')} {type(exc).__name__}: {exc}".rstrip()
            raise
        store[num] = f"[PASS] {num:>2}. {title}: {detail.get('text', '')}".rstrip()

    return criterion


@pytest.fixture(scope="session")
def phantom_split(tmp_path_factory):
    from rawbrain.manifest import load_dataset
    from rawbrain.phantom import PhantomParams, generate_dataset

    out = tmp_path_factory.mktemp("phantoms")
    data = load_dataset(generate_dataset(TRAIN_N + TEST_N, PhantomParams(), PHANTOM_SEED, out), "low")
    return data.take(range(TRAIN_N)), data.take(range(TRAIN_N, TRAIN_N + TEST_N))


@pytest.fixture(scope="session")
def phantom_model(phantom_split):
    """lr_find then 20 epochs on the low-resolution phantom training split."""
    from rawbrain.models import build_resnet3d, init_state
    from rawbrain.training import TrainConfig, train

    train_data, _ = phantom_split
    spec = build_resnet3d("low")
    state = init_state(spec, seed=0, output_bias=float(np.mean(train_data.ages)))
    cfg = TrainConfig(eta_max=None, epochs=20, batch_size=32, seed=0)
    return train(spec, state, train_data, cfg)
