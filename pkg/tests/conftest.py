import numpy as np
import pytest

from elecloc.synth import Dataset, make_dataset
from elecloc.training import TrainConfig

TINY = dict(
    n_in=128,
    n_kp=12,
    n_coarse=32,
    n_dense=128,
    enc_widths=(8, 8, 16, 16),
    head_widths=(16,),
    coarse_widths=(32,),
    refine_widths=(8,),
    n_rr=2,
    epochs=2,
    batch_size=3,
    initial_lr=1e-3,
)


def tiny_config(**kw) -> TrainConfig:
    return TrainConfig(**{**TINY, **kw})


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """12 subjects split 6/2/4, shared by the data, training and CLI tests."""
    root = tmp_path_factory.mktemp("ds")
    make_dataset(root, 12, seed=3, split=(6, 2, 4))
    return Dataset.open(root)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def report(request):
    """Print and record one PASS/FAIL line per acceptance criterion; returns the verdict."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def _report(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        print(line)
        lines.append(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
