import numpy as np
import pytest

from lensforge.data import GoldRewardSpec, PairSet, SyntheticBenchConfig, generate_benchmark
from lensforge.numkit import Rng


def random_pairs(seed: int, n: int = 20, d: int = 6, scale: float = 1.0) -> PairSet:
    rng = Rng(seed)
    return PairSet(np.arange(n), scale * rng.spawn(1).normal_like((n, d)), scale * rng.spawn(2).normal_like((n, d)))


@pytest.fixture
def small_bench():
    """A 200-prompt benchmark in 16 dimensions with its gold spec."""
    cfg = SyntheticBenchConfig(dim=16, num_prompts=200, num_test_prompts=100, intrinsic_dim=8)
    gold = GoldRewardSpec(seed=3, dim=16, input_scale=cfg.embedding_scale)
    train, test = generate_benchmark(cfg, gold, Rng(11))
    return cfg, gold, train, test


# acceptance verdicts, printed once at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
