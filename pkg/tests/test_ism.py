import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from basket_ism.errors import ConfigError, LawError, StageError
from basket_ism.ism import (IsmConfig, assign_bins, bin_counts, build_target, discrete_error,
                            run_ism, run_per_maturity)
from basket_ism.oracle import toy_problem
from basket_ism.sampling import SampleMatrix, draw_independent, empirical_cdf, ks_distance
from basket_ism.smile import MarginalLaw

LAWS = [MarginalLaw.lognormal(100.0, 0.2, 1.0), MarginalLaw.lognormal(60.0, 0.35, 1.0)]


def _index_law(rho=0.6, m=200_000, seed=0):
    """Index law of the two LAWS under a Gaussian copula, from a large reference sample."""
    from scipy.stats import norm
    rng = np.random.default_rng(seed)
    z1 = rng.standard_normal(m)
    z2 = rho * z1 + np.sqrt(1 - rho**2) * rng.standard_normal(m)
    total = LAWS[0].quantile(norm.cdf(z1)) + LAWS[1].quantile(norm.cdf(z2))
    return MarginalLaw.from_samples(total, 1.0)


@pytest.fixture(scope="module")
def index_law():
    return _index_law()


def test_toy_target_and_first_sort_pass():
    matrix, target = toy_problem()
    assert target.counts.tolist() == [3, 5, 2]
    res = run_ism(matrix, target, IsmConfig(bins=3, seed=0))
    first = res.harvest_trace[0]
    assert first.arrangement == "sort"
    assert first.bin_counts.tolist() == [4, 3, 3]
    assert first.taken.tolist() == [3, 3, 2]
    assert first.error == pytest.approx(0.2)
    assert (target.counts - first.taken).tolist() == [0, 2, 0]


def test_toy_final_error_over_seeds():
    matrix, target = toy_problem()
    finals = [run_ism(matrix, target, IsmConfig(bins=3, seed=s)).discrete_error
              for s in range(100)]
    assert min(finals) == 0.0
    assert set(np.round(finals, 12)) <= {0.0, 0.1, 0.2}


def test_uniform_target_equidistributes():
    m = 1000
    target = build_target(MarginalLaw.uniform(), m, m)
    assert set(np.unique(target.counts)) <= {0, 1, 2}
    assert abs(target.total_mass - m) <= m / 2
    assert np.allclose(np.diff(target.bin_edges), np.diff(target.bin_edges)[0], rtol=1e-9)


def test_target_range_uses_extreme_quantiles(index_law):
    m, k = 5000, 500
    t = build_target(index_law, m, k)
    assert t.bin_edges[0] == pytest.approx(float(index_law.quantile(1 / m)))
    assert t.bin_edges[-1] == pytest.approx(float(index_law.quantile((m - 1) / m)))
    assert t.n_bins == k
    assert m - k / 2 <= t.total_mass <= m + k / 2


def test_cumulative_rounding_keeps_total(index_law):
    m, k = 5000, 2000
    t = build_target(index_law, m, k, rounding="cumulative")
    inside = index_law.cdf(t.bin_edges[-1]) - index_law.cdf(t.bin_edges[0])
    assert abs(t.total_mass - m * inside) <= 1


def test_target_errors(index_law):
    with pytest.raises(ConfigError):
        build_target(index_law, 10, 20)
    point = MarginalLaw.from_cdf(np.array([1.0, 1.0 + 1e-15, 2.0]), np.array([0.0, 1.0, 1.0]), 1.0)
    with pytest.raises(LawError):
        build_target(point, 100, 10)
    with pytest.raises(LawError):
        build_target(index_law, 100, 10, edges=[0.0, 1.0, 0.5])


def test_config_validation():
    for kwargs in ({"bins": 1}, {"max_iterations": 0}, {"stop_fraction": 1.0},
                   {"rounding": "floor"}):
        with pytest.raises(ConfigError):
            IsmConfig(**kwargs)


def test_bin_counts_toy_and_empty():
    matrix, target = toy_problem()
    sorted_idx = np.sort(matrix.values, axis=0).sum(axis=1)
    counts, outside = bin_counts(sorted_idx, target)
    assert counts.tolist() == [4, 3, 3] and outside == 0
    counts, outside = bin_counts(np.array([]), target)
    assert counts.tolist() == [0, 0, 0] and outside == 0


def _brute_bin(x, edges):
    if x == edges[0]:
        return 0
    for k in range(1, len(edges)):
        if edges[k - 1] < x <= edges[k]:
            return k - 1
    return -1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 8), min_size=1, max_size=40), st.integers(-2, 12))
def test_assign_bins_matches_brute_force(points, shift):
    # values on, between and outside the edges of {0, 0.25, ..., 2}
    target = build_target(MarginalLaw.uniform(0.0, 2.0), 8, 8, edges=np.linspace(0, 2, 9))
    edges = target.bin_edges
    values = np.array([edges[p] for p in points] + [0.25 * shift + 0.1])
    got = assign_bins(values, target)
    assert got.tolist() == [_brute_bin(v, edges) for v in values]


def test_discrete_error_conventions():
    edges = np.linspace(0, 3, 4)
    target = build_target(MarginalLaw.uniform(0, 3), 6, 3, edges=edges)
    perfect = np.array([0.5, 0.6, 1.5, 1.6, 2.5, 2.6])
    assert discrete_error(perfect, target) == 0.0
    moved = perfect.copy()
    moved[1] = 1.2  # one sample crosses the edge at 1
    assert discrete_error(moved, target) == pytest.approx(1 / 6)
    outside = perfect.copy()
    outside[0] = -1.0  # out-of-range samples leave their bin short
    assert discrete_error(outside, target) == pytest.approx(1 / 12)


def test_comonotone_target_is_reached_by_first_sort():
    start = draw_independent(LAWS, 2000, seed=9)
    sorted_sum = np.sort(start.values, axis=0).sum(axis=1)
    target = build_target(empirical_cdf(sorted_sum), 2000, 100)
    res = run_ism(start, target, IsmConfig(bins=100, seed=0))
    assert res.discrete_error == 0.0
    assert res.harvest_trace[0].arrangement == "sort"
    assert res.harvest_trace[0].error == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000), st.integers(10, 200), st.integers(2, 10))
def test_multisets_preserved(seed, m, k):
    start = draw_independent(LAWS, m, seed=seed)
    target = build_target(_small_law(), m, min(k, m))
    res = run_ism(start, target, IsmConfig(bins=target.n_bins, seed=seed, max_iterations=3))
    assert res.matrix.column_multisets_equal(start)
    for j in range(2):
        assert np.array_equal(np.sort(res.matrix.uniforms[res.matrix.permutations[:, j], j]),
                              np.sort(start.uniforms[:, j]))


_SMALL = {}


def _small_law():
    if "law" not in _SMALL:
        _SMALL["law"] = _index_law(m=20_000, seed=1)
    return _SMALL["law"]


def test_deterministic_and_seed_dependent(index_law):
    start = draw_independent(LAWS, 3000, seed=1)
    target = build_target(index_law, 3000, 300)
    a = run_ism(start, target, IsmConfig(bins=300, seed=4))
    b = run_ism(start, target, IsmConfig(bins=300, seed=4))
    c = run_ism(start, target, IsmConfig(bins=300, seed=5))
    assert np.array_equal(a.matrix.permutations, b.matrix.permutations)
    assert not np.array_equal(a.matrix.permutations, c.matrix.permutations)
    assert np.array_equal(start.permutations, np.tile(np.arange(3000)[:, None], (1, 2)))


def test_harvest_is_monotone_and_trace_is_json(index_law):
    start = draw_independent(LAWS, 3000, seed=2)
    target = build_target(index_law, 3000, 300)
    sink = io.StringIO()
    res = run_ism(start, target, IsmConfig(bins=300, seed=1), trace_sink=sink)
    outstanding = target.total_mass
    remaining = 3000
    for p in res.harvest_trace:
        new_outstanding = outstanding - int(p.taken.sum())
        assert new_outstanding < outstanding or p.harvested == 0
        assert p.remaining == remaining - p.harvested
        outstanding, remaining = new_outstanding, p.remaining
    assert res.iterations_used <= 10
    lines = [json.loads(x) for x in sink.getvalue().splitlines()]
    assert len(lines) == len(res.harvest_trace)
    assert set(lines[0]) == {"pass", "arrangement", "harvested", "remaining", "error"}
    assert [x["arrangement"] for x in lines[:2]] == ["sort", "mix"]


def test_improves_on_independent_start(index_law):
    start = draw_independent(LAWS, 5000, seed=3)
    target = build_target(index_law, 5000, 500)
    res = run_ism(start, target, IsmConfig(bins=500, seed=2))
    assert res.discrete_error < discrete_error(start, target)
    assert res.discrete_error < 0.03


def test_ks_bounded_by_discrete_error(index_law):
    m = 5000
    start = draw_independent(LAWS, m, seed=4)
    target = build_target(index_law, m, 500)
    res = run_ism(start, target, IsmConfig(bins=500, seed=3))
    ks = ks_distance(empirical_cdf(res.matrix.index_vector()), index_law)
    max_bin = float(np.max(np.diff(index_law.cdf(target.bin_edges))))
    assert ks <= res.discrete_error + 1 / m + max_bin


def test_sort_of_sorted_matrix_is_identity():
    vals = np.sort(draw_independent(LAWS, 500, seed=5).values, axis=0)
    sorted_start = SampleMatrix.from_values(vals)
    target = build_target(empirical_cdf(vals.sum(axis=1)), 500, 50)
    res = run_ism(sorted_start, target, IsmConfig(bins=50, seed=0))
    # every harvested row is an original row: the sort pass moved nothing
    rows = {tuple(r) for r in vals}
    assert all(tuple(r) in rows for r in res.matrix.values)


def test_target_size_mismatch(index_law):
    start = draw_independent(LAWS, 100, seed=0)
    with pytest.raises(ConfigError):
        run_ism(start, build_target(index_law, 200, 20), IsmConfig(bins=20))


def _laws_by_maturity():
    mats = (0.5, 1.0)
    cons = {t: [MarginalLaw.lognormal(100.0, 0.2, t), MarginalLaw.lognormal(60.0, 0.35, t)]
            for t in mats}
    index = {t: MarginalLaw.lognormal(160.0, 0.22, t) for t in mats}
    return cons, index


def test_per_maturity_matches_single_runs_and_is_order_free():
    cons, index = _laws_by_maturity()
    cfg = IsmConfig(bins=100, seed=7)
    serial = run_per_maturity(cons, index, 1000, cfg, parallel=False)
    parallel = run_per_maturity(cons, index, 1000, cfg, parallel=True, max_workers=2)
    assert list(serial) == [0.5, 1.0]
    for j, t in enumerate(serial):
        assert np.array_equal(serial[t].matrix.permutations, parallel[t].matrix.permutations)
        single = run_ism(draw_independent(cons[t], 1000, 7, stream_key=(j,)),
                         build_target(index[t], 1000, 100), cfg, stream_key=(j,))
        assert np.array_equal(single.matrix.permutations, serial[t].matrix.permutations)


def test_per_maturity_failure_is_tagged():
    cons, index = _laws_by_maturity()
    index[1.0] = MarginalLaw.from_cdf(np.array([5.0, 5.0 + 1e-15, 6.0]),
                                      np.array([0.0, 1.0, 1.0]), 1.0)
    with pytest.raises(StageError) as err:
        run_per_maturity(cons, index, 1000, IsmConfig(bins=100), parallel=False)
    assert err.value.maturity == 1.0 and err.value.stage == "ism"
    del index[1.0]
    with pytest.raises(ConfigError):
        run_per_maturity(cons, index, 1000, IsmConfig(bins=100))


def test_desk_target_mass(desk):
    for t in desk.snapshot.maturities:
        target = desk.results[t].target
        m, k = desk.config.n_samples, desk.config.bins
        assert m - k / 2 <= target.total_mass <= m + k / 2
