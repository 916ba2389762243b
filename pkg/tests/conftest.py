import numpy as np
import pytest

from fedseq.data import Vocabulary, build_vocabulary
from fedseq.model import HyperParams
from fedseq.synth import SynthConfig, generate_cohort

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {k:>2}: {detail}")


@pytest.fixture(scope="session")
def small_synth():
    cfg = SynthConfig(num_patients=120, num_centers=3, num_groups=12, mean_visits=3.0, seed=7)
    return generate_cohort(cfg)


@pytest.fixture(scope="session")
def small_cohort(small_synth):
    return small_synth[0]


@pytest.fixture(scope="session")
def small_vocab(small_cohort) -> Vocabulary:
    return build_vocabulary(small_cohort)


@pytest.fixture(scope="session")
def small_hyper(small_vocab) -> HyperParams:
    return HyperParams(hidden=16, layers=1, heads=2, ffn_dim=32, max_len=24, learning_rate=1e-2,
                       batch_size=16).for_vocab(small_vocab)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
