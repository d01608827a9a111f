"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
import math
import time

import numpy as np
import pytest
from scipy import stats

from basket_ism.ism import IsmConfig, build_target, run_ism
from basket_ism.localvol import calibrate_local_vol, estimate_density
from basket_ism.oracle import (TOY_BIN_MASS, TOY_EDGES, demo_underdetermination, tiny_instances,
                               toy_problem, verify_lemma1, verify_theorem1)
from basket_ism.pipeline import TIMING_KEYS, repricing_table
from basket_ism.pricing import PricingRequest, greeks_spot, price, remap_constituent
from basket_ism.sampling import draw_independent
from basket_ism.smile import MarginalLaw

MONEYNESS = (0.8, 0.9, 1.0, 1.1, 1.2)


def _toy_law():
    return MarginalLaw.from_cdf(np.array(TOY_EDGES), np.r_[0.0, np.cumsum(TOY_BIN_MASS)], 1.0)


def test_criterion_01_toy_golden(verdict):
    clock = time.perf_counter()
    matrix, target = toy_problem()
    first = run_ism(matrix, target, IsmConfig(bins=3, seed=0)).harvest_trace[0]
    finals = [run_ism(matrix, target, IsmConfig(bins=3, seed=s)).discrete_error
              for s in range(100)]
    elapsed = time.perf_counter() - clock
    ok = (target.counts.tolist() == [3, 5, 2] and first.bin_counts.tolist() == [4, 3, 3]
          and first.taken.tolist() == [3, 3, 2] and abs(first.error - 0.2) < 1e-12
          and min(finals) == 0.0 and elapsed < 1.0)
    verdict(1, ok, f"V={target.counts.tolist()} c={first.bin_counts.tolist()} "
                   f"c_bar={first.taken.tolist()} stage loss={first.error:.3f} "
                   f"seeds reaching 0: {sum(f == 0.0 for f in finals)}/100 in {elapsed:.2f}s")
    assert ok


def test_criterion_02_desk_discrete_error(desk, verdict):
    errs = {t: r.discrete_error for t, r in desk.results.items()}
    per_maturity = {t: sum(row[k] for k in TIMING_KEYS) for t, row in desk.timings.items()}
    ok = max(errs.values()) <= 0.03 and max(per_maturity.values()) <= 30.0
    verdict(2, ok, "l_hat " + ", ".join(f"T={t:g}: {100 * e:.2f}%" for t, e in errs.items())
            + f"; slowest maturity {max(per_maturity.values()):.1f}s")
    assert ok


def _repricing_errors(run, results):
    rows = repricing_table(run.snapshot, run.calibrated, results)
    central = max(abs(r["error"]) for r in rows if 0.9 <= r["moneyness"] <= 1.1)
    return central, max(abs(r["error"]) for r in rows)


def _rearrange_cumulative(run):
    cfg = run.config
    out = {}
    for j, t in enumerate(run.snapshot.maturities):
        start = draw_independent(run.calibrated.constituent_laws[t], cfg.n_samples, cfg.seed,
                                 weights=run.snapshot.weights, stream_key=(j,))
        target = build_target(run.calibrated.index_laws[t], cfg.n_samples, cfg.bins,
                              rounding="cumulative")
        out[t] = run_ism(start, target, cfg.ism_config(), stream_key=(j,))
    return out


def test_criterion_03_index_repricing(desk, verdict):
    central, full = _repricing_errors(desk, desk.results)
    ok = central <= 0.005 and full <= 0.01
    # the gate uses the default per-bin rounding; cumulative rounding is reported alongside
    alt_central, alt_full = _repricing_errors(desk, _rearrange_cumulative(desk))
    verdict(3, ok, f"max |model - market| {100 * central:.2f} vol pts on 0.9-1.1 (limit 0.5), "
                   f"{100 * full:.2f} on 0.8-1.2 (limit 1.0); with cumulative rounding "
                   f"{100 * alt_central:.2f} and {100 * alt_full:.2f}")
    assert ok


def test_criterion_04_call_price_bound(desk, verdict):
    cases = []
    matrix, target = toy_problem()
    toy = run_ism(matrix, target, IsmConfig(bins=3, seed=0)).matrix.index_vector()
    cases.append(("toy", toy, _toy_law()))
    for t, r in desk.results.items():
        cases.append((f"desk T={t:g}", r.matrix.index_vector(), desk.calibrated.index_laws[t]))
    law = desk.calibrated.index_laws[1.0]
    cases.append(("point mass", np.full(100, float(law.quantile(0.5))), law))
    cases.append(("one tail", law.quantile(np.linspace(0.9, 0.999, 200)), law))
    violations = 0
    for _, x, lw in cases:
        strikes = np.linspace(float(lw.quantile(0.02)), float(lw.quantile(0.98)), 11)
        violations += verify_theorem1(x, lw, strikes).violations
    ok = violations == 0
    verdict(4, ok, f"{violations} violations over {len(cases)} sample sets x 11 strikes")
    assert ok


def test_criterion_05_rank_matching_trend(verdict):
    curve = verify_lemma1(trials=20, seed=0)
    e = curve.mean_errors
    ok = curve.non_increasing() and e[-1] < e[0] / 2
    verdict(5, ok, "mean error " + ", ".join(f"M={m}: {v:.4f}"
                                             for m, v in zip(curve.sample_sizes, e)))
    assert ok


def test_criterion_06_oracle_dominance(verdict):
    rows = tiny_instances(n_instances=10, seed=0)
    brute = sum(r.brute_force_dominates for r in rows)
    improves = sum(r.ism_improves for r in rows)
    ok = brute == 10 and improves == 10
    verdict(6, ok, f"brute force <= ISM in {brute}/10; ISM <= independent in {improves}/10")
    assert ok


def test_criterion_07_marginal_preservation(desk, small, verdict):
    checked, equal = 0, 0
    for run in (desk, small):
        cfg = run.config
        for j, t in enumerate(run.snapshot.maturities):
            start = draw_independent(run.calibrated.constituent_laws[t], cfg.n_samples, cfg.seed,
                                     weights=run.snapshot.weights, stream_key=(j,))
            checked += 1
            equal += run.results[t].matrix.column_multisets_equal(start)
    matrix, target = toy_problem()
    for s in range(100):
        checked += 1
        equal += run_ism(matrix, target, IsmConfig(bins=3, seed=s)).matrix \
            .column_multisets_equal(matrix)
    ok = equal == checked
    verdict(7, ok, f"column multisets identical in {equal}/{checked} runs")
    assert ok


def test_criterion_08_underdetermination(verdict):
    rep = demo_underdetermination()
    gap = abs(rep.call_c1 - rep.call_c2)
    ok = rep.index_ks < 0.01 and gap > 0.05
    verdict(8, ok, f"index KS {rep.index_ks:.4f}; sub-basket calls {rep.call_c1:.4f} vs "
                   f"{rep.call_c2:.4f} (exact {rep.call_c1_exact:.4f} vs {rep.call_c2_exact:.4f})")
    assert ok


def test_criterion_09_greeks(desk, verdict):
    state = desk.state()
    s0 = state.basket_spot()
    deltas = [greeks_spot(PricingRequest("european-call", m * s0, 0.25), state,
                          engine="lvm", sticky="moneyness").delta for m in MONEYNESS]
    fwd = greeks_spot(PricingRequest("forward", s0, 0.25), state, engine="lvm")
    bumped = remap_constituent(state, [4], 0.01, maturities=(0.25,))
    before, after = state.matrices[0.25].values, bumped.matrices[0.25].values
    others = np.delete(np.arange(before.shape[1]), 4)
    untouched = np.array_equal(after[:, others], before[:, others])
    ok = (bool(np.all(np.diff(deltas) < 0)) and deltas[0] >= 0.9 and 0.5 <= deltas[2] <= 0.7
          and abs(fwd.delta - 1.0) < 1e-10 and abs(fwd.gamma) < 1e-8 and untouched)
    verdict(9, ok, "delta " + ", ".join(f"{m:.1f}: {d:.3f}" for m, d in zip(MONEYNESS, deltas))
            + f"; forward delta-1 {fwd.delta - 1:.1e}, gamma {fwd.gamma:.1e}; "
              f"other columns untouched: {untouched}")
    assert ok


def _flat_density(t, vol=0.2, spot=100.0, m=20_000):
    z = stats.norm.ppf((np.arange(m) + 0.5) / m)
    return estimate_density(spot * np.exp(-0.5 * vol * vol * t + vol * math.sqrt(t) * z), t)


def test_criterion_10_local_vol_oracle(desk, verdict):
    mats = (0.25, 0.5, 1.0, 2.0)
    dens = {t: _flat_density(t) for t in mats}
    surface = calibrate_local_vol(dens, 0.0, 100.0)
    worst = 0.0
    for j, t in enumerate(mats):
        k = surface.strike_grid
        sel = (k >= dens[t].law.quantile(0.1)) & (k <= dens[t].law.quantile(0.9))
        worst = max(worst, float(np.max(np.abs(surface.values[j, sel] / 0.2 - 1.0))))
    state = desk.state(n_paths=50_000)
    s0 = state.basket_spot()
    z_scores = []
    for m in MONEYNESS:
        req = PricingRequest("european-call", m * s0, 0.5)
        a, b = price(state, req, "static"), price(state, req, "lvm")
        z_scores.append(abs(a.price - b.price) / math.hypot(a.stderr, b.stderr))
    ok = worst < 0.05 and max(z_scores) < 3.0
    verdict(10, ok, f"flat vol max rel error {100 * worst:.2f}% (limit 5%); paths vs static "
                    f"max {max(z_scores):.2f} combined s.e. (limit 3)")
    assert ok


@pytest.fixture(scope="module", autouse=True)
def _quiet_warnings():
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield
