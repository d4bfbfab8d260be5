"""Session fixtures: the long-horizon training benchmark.

The 20 mutual-learning runs (4 modes x 5 seeds) dominate the suite's wall
time, so they are computed once per session and shared by every test that
consumes them.
"""

import time

import pytest

from calign.formats import RunConfig
from calign.mteacher import run_mutual_learning

BENCH_MODES = ("source_only", "assign@0.9", "fca", "mgcamt")
BENCH_SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="session")
def benchmark_runs():
    """(runs, wall) where runs maps (mode, seed) -> RunResult.

    eval_interval=400 keeps exactly two evaluation points per run: the end of
    burn-in and the last iteration. The adaptation flags are left off in the
    config; the named modes pin their own (tca, cca) combination.
    """
    t0 = time.perf_counter()
    runs = {}
    for mode in BENCH_MODES:
        for seed in BENCH_SEEDS:
            config = RunConfig(
                seed=seed,
                mode=mode,
                eval_interval=400,
                tca_enabled=False,
                cca_enabled=False,
            )
            runs[(mode, seed)] = run_mutual_learning(config)
    return runs, time.perf_counter() - t0
