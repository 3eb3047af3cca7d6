import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from protoprompt import kernels  # noqa: E402

AVAILABLE_BACKENDS = [b for b in ("compiled", "python") if b in kernels.BACKENDS]


@pytest.fixture(params=AVAILABLE_BACKENDS)
def backend(request):
    prev = kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# shared synthetic task and training runs (expensive, built once per session)

SYNTH = dict(num_classes=3, height=8, width=8, channels=16, samples=64, eval_samples=16, snr=4.0, seed=7)
TRAIN = dict(num_classes=3, channels=16, tau=0.07, n_tokens=2, lr=1e-3, max_steps=500, seed=7)


@pytest.fixture(scope="session")
def synthetic_task(tmp_path_factory):
    from protoprompt import data
    from protoprompt.config import SynthConfig

    root = tmp_path_factory.mktemp("synthetic")
    manifests = data.gen_synthetic(SynthConfig(**SYNTH), root)
    return {split: data.load_dataset(path, SYNTH["num_classes"]) for split, path in manifests.items()}


@pytest.fixture(scope="session")
def trained_runs(synthetic_task):
    """Default run plus the two ablation variants, same seed and steps."""
    import time

    from protoprompt.config import TrainConfig
    from protoprompt.metrics import evaluate
    from protoprompt.trainer import fit

    runs = {}
    variants = {
        "pcl": {},
        "no_pcl": {"pcl_enabled": False},
        "fixed": {"fixed_prototypes": True},
    }
    for name, extra in variants.items():
        cfg = TrainConfig(**TRAIN, **extra)
        started = time.perf_counter()
        state, history = fit(cfg, synthetic_task["train"])
        seconds = time.perf_counter() - started
        report = evaluate(state, synthetic_task["eval"])
        runs[name] = SimpleRun(cfg, state, history, report, seconds)
    return runs


class SimpleRun:
    def __init__(self, config, state, history, report, seconds):
        self.config, self.state, self.history, self.report, self.seconds = config, state, history, report, seconds


def mean_pairwise_cosine(table):
    unit = table / np.linalg.norm(table, axis=1, keepdims=True)
    cos = unit @ unit.T
    return float(cos[~np.eye(len(table), dtype=bool)].mean())


# ---------------------------------------------------------------------------
# acceptance result lines, echoed at the end of the run

ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(line)
