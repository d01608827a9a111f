"""Shared fixtures: a desk-scale synthetic market and a small fast one."""
from __future__ import annotations

from dataclasses import dataclass

import pytest

from basket_ism.market_data import generate_synthetic_market
from basket_ism.pipeline import RunConfig, calibrate_and_rearrange
from basket_ism.pricing import EngineState

DESK_SEED = 3

_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record and print one acceptance line: ``verdict(n, ok, detail)``."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@dataclass(eq=False)
class Calibrated:
    snapshot: object
    calibrated: object
    results: dict
    timings: dict
    config: RunConfig

    def state(self, **kwargs):
        matrices = {t: r.matrix for t, r in self.results.items()}
        return EngineState(self.snapshot, matrices, seed=self.config.seed, **kwargs)


def _calibrate(snapshot, tmp_dir, **cfg):
    config = RunConfig(output_dir=str(tmp_dir), greeks=False, **cfg)
    cal, results, timings = calibrate_and_rearrange(snapshot, config)
    return Calibrated(snapshot, cal, results, timings, config)


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """30 assets, five maturities, M=20'000, K=1'400, ten iterations."""
    snapshot = generate_synthetic_market(30, seed=1)
    return _calibrate(snapshot, tmp_path_factory.mktemp("desk"), seed=DESK_SEED, workers=5)


@pytest.fixture(scope="session")
def small(tmp_path_factory):
    """Three assets, three maturities, M=4'000, K=280."""
    snapshot = generate_synthetic_market(3, maturities=(0.25, 0.5, 1.0), seed=2,
                                         weights=1.0 / 3.0, n_reference=50_000)
    return _calibrate(snapshot, tmp_path_factory.mktemp("small"), seed=5, n_samples=4000,
                      bins=280, workers=1)
