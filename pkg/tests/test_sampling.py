import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from basket_ism.errors import EmptySubset
from basket_ism.oracle import TOY_PAIRS
from basket_ism.sampling import (SampleMatrix, aggregate, draw_independent, empirical_copula,
                                 empirical_cdf, ks_distance, read_matrix_csv, symmetry_measure,
                                 two_sample_ks, write_matrix_csv)
from basket_ism.smile import MarginalLaw

LOGNORMAL = MarginalLaw.lognormal(100.0, 0.25, 1.0)


def _shuffled(matrix, seed):
    rng = np.random.default_rng(seed)
    perm = np.column_stack([rng.permutation(matrix.n_samples) for _ in range(matrix.n_assets)])
    return matrix.rearranged(perm)


def test_lognormal_draw_mean():
    m = draw_independent([LOGNORMAL], 10_000, seed=1)
    x = m.values[:, 0]
    se = x.std(ddof=1) / math.sqrt(len(x))
    assert abs(x.mean() - 100.0) < 3 * se


def test_uniform_toy_shape():
    u = MarginalLaw.uniform()
    m = draw_independent([u, u], 10, seed=0)
    assert m.values.shape == (10, 2)
    assert np.all((m.values >= 0) & (m.values <= 1))
    assert np.array_equal(m.permutations, np.tile(np.arange(10)[:, None], (1, 2)))


def test_draw_is_deterministic():
    laws = [LOGNORMAL, MarginalLaw.lognormal(50.0, 0.4, 1.0)]
    a = draw_independent(laws, 500, seed=3, stream_key=(2,))
    b = draw_independent(laws, 500, seed=3, stream_key=(2,))
    c = draw_independent(laws, 500, seed=3, stream_key=(1,))
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_draw_rejects_mixed_maturities():
    with pytest.raises(ValueError):
        draw_independent([LOGNORMAL, MarginalLaw.lognormal(100.0, 0.2, 2.0)], 10, 0)


def test_values_are_quantiles_of_uniforms():
    m = draw_independent([LOGNORMAL], 100, seed=4)
    assert np.array_equal(m.values[:, 0], LOGNORMAL.quantile(m.uniforms[:, 0]))


def test_singleton_basket():
    m = SampleMatrix.from_values(TOY_PAIRS, weights=np.array([2.0, 3.0]))
    assert np.array_equal(aggregate(m, [1]), 3.0 * TOY_PAIRS[:, 1])


def test_toy_sorted_index_vector():
    m = SampleMatrix.from_values(np.sort(TOY_PAIRS, axis=0))
    idx = aggregate(m)
    assert np.allclose(idx, [0.05, 0.12, 0.31, 0.57, 0.70, 0.78, 0.93, 1.41, 1.52, 1.83])
    # bin membership of the worked example: 4, 3 and 3 rows
    assert np.histogram(idx, [0, 2 / 3, 4 / 3, 2])[0].tolist() == [4, 3, 3]


def test_empty_subset():
    m = SampleMatrix.from_values(TOY_PAIRS)
    with pytest.raises(EmptySubset):
        aggregate(m, [])


@settings(max_examples=40, deadline=None)
@given(arrays(float, (12, 5), elements=st.floats(0, 100)),
       st.sets(st.integers(0, 4), min_size=1, max_size=4))
def test_aggregate_is_additive(values, subset):
    m = SampleMatrix.from_values(values, weights=np.linspace(0.5, 1.5, 5))
    rest = sorted(set(range(5)) - subset)
    total = aggregate(m, subset) + aggregate(m, rest)
    assert np.allclose(total, m.index_vector(), rtol=1e-12, atol=1e-9)


def test_empirical_cdf_steps():
    f = empirical_cdf([1.0, 2.0, 3.0])
    assert f(2.0) == pytest.approx(2 / 3)
    assert f(0.5) == 0.0
    assert f(3.0) == 1.0 and f(10.0) == 1.0
    assert f.cdf_left(2.0) == pytest.approx(1 / 3)


def test_ks_of_lognormal_draws():
    m = draw_independent([LOGNORMAL], 20_000, seed=11)
    sd = 0.25
    ref = stats.lognorm(s=sd, scale=100.0 * math.exp(-0.5 * sd * sd))
    x = np.sort(m.values[:, 0])
    n = len(x)
    direct = max(np.max(np.arange(1, n + 1) / n - ref.cdf(x)), np.max(ref.cdf(x) - np.arange(n) / n))
    assert direct < 0.015
    assert ks_distance(empirical_cdf(x), LOGNORMAL) == pytest.approx(direct, abs=1e-4)


def test_ks_of_stratified_quantiles():
    m = 500
    x = LOGNORMAL.quantile((np.arange(m) + 0.5) / m)
    assert ks_distance(empirical_cdf(x), LOGNORMAL) <= 1 / (2 * m) + 1e-6


def test_ks_single_sample_at_median():
    x = LOGNORMAL.quantile(0.5)
    assert ks_distance(empirical_cdf([x]), LOGNORMAL) == pytest.approx(0.5, abs=1e-9)


def test_copula_ranks_are_permutations():
    m = _shuffled(draw_independent([LOGNORMAL, LOGNORMAL], 200, seed=2), 0)
    cop = empirical_copula(m)
    ref = (np.arange(200) + 1) / 200
    # with laws attached the copula sample is F_n(s_n), i.e. the stored uniforms
    assert np.allclose(cop.rank_matrix, m.current_uniforms(), atol=1e-6)
    raw = empirical_copula(SampleMatrix.from_values(m.values))
    assert np.array_equal(np.sort(raw.rank_matrix, axis=0), np.tile(ref[:, None], (1, 2)))
    assert raw(np.ones(2)) == 1.0


def test_symmetry_comonotone_is_one():
    x = np.sort(np.random.default_rng(0).random((1000, 4)), axis=0)
    assert symmetry_measure(x) == pytest.approx(1.0)


def test_symmetry_two_columns_is_one():
    x = np.random.default_rng(1).random((300, 2))
    assert symmetry_measure(x) == 1.0


def test_symmetry_detects_singled_out_pair():
    rng = np.random.default_rng(2)
    u = rng.random((10_000, 2))
    structured = np.column_stack([u[:, 0], u[:, 0], u[:, 1]])
    # exchangeable Gaussian copula with the same mean rank correlation (1/3)
    rho = 2 * math.sin(math.pi / 18)
    z = math.sqrt(rho) * rng.standard_normal((10_000, 1)) + \
        math.sqrt(1 - rho) * rng.standard_normal((10_000, 3))
    s1, s2 = symmetry_measure(structured), symmetry_measure(z)
    assert s1 < 1.0 and s1 < s2


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_rearrangement_preserves_multisets(seed):
    m = draw_independent([LOGNORMAL, LOGNORMAL, LOGNORMAL], 64, seed=seed % 7)
    r = _shuffled(m, seed)
    assert m.column_multisets_equal(r)
    for j in range(3):
        assert ks_distance(empirical_cdf(r.values[:, j]), LOGNORMAL) == \
            ks_distance(empirical_cdf(m.values[:, j]), LOGNORMAL)


def test_with_column_law_keeps_ranks_and_other_columns():
    laws = [LOGNORMAL, MarginalLaw.lognormal(80.0, 0.3, 1.0)]
    m = _shuffled(draw_independent(laws, 1000, seed=6), 3)
    bumped = m.with_column_law(1, MarginalLaw.lognormal(80.0, 0.31, 1.0))
    assert np.array_equal(bumped.values[:, 0], m.values[:, 0])
    assert np.array_equal(np.argsort(bumped.values[:, 1]), np.argsort(m.values[:, 1]))
    assert bumped.laws[1] is not m.laws[1] and bumped.laws[0] is m.laws[0]


def test_matrix_csv_round_trip(tmp_path):
    m = _shuffled(draw_independent([LOGNORMAL, LOGNORMAL], 30, seed=8), 1)
    path = tmp_path / "m.csv"
    write_matrix_csv(m, path, ["X", "Y"])
    assert path.read_text().splitlines()[0] == "row,asset,uniform,value"
    values, uniforms, names = read_matrix_csv(path)
    assert names == ["X", "Y"]
    assert np.array_equal(values, m.values)
    assert np.array_equal(uniforms, m.current_uniforms())


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=8),
       st.lists(st.integers(0, 5), min_size=1, max_size=8))
def test_ks_against_stepped_target_matches_two_sample_ks(a, b):
    # ties on both sides exercise the left and right limits of each jump
    a, b = np.array(a, float), np.array(b, float)
    assert ks_distance(empirical_cdf(a), empirical_cdf(b)) == pytest.approx(
        two_sample_ks(a, b), abs=1e-15)
