"""Independent checks of the rearrangement approach.

* exhaustive rearrangement search on tiny matrices,
* the rank-matching convergence experiment for two assets,
* the call-price bound ``|V_MC - V| <= eps (b - a)``,
* two dependence structures with the same index law but different
  sub-basket laws.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import integrate
from scipy.stats import norm

from .errors import SizeError
from .ism import IsmConfig, build_target, run_ism
from .rng import STAGE_ORACLE, open_uniforms, substream
from .sampling import (SampleMatrix, draw_independent, empirical_cdf, ks_distance, ks_sorted_batch,
                       symmetry_measure, two_sample_ks)
from .smile import MarginalLaw

MAX_ARRANGEMENTS = 1_000_000


def index_loss(matrix_or_index, index_law):
    """Sup distance between the empirical index CDF and the index law."""
    idx = matrix_or_index.index_vector() if isinstance(matrix_or_index, SampleMatrix) \
        else np.asarray(matrix_or_index, dtype=float)
    return ks_distance(empirical_cdf(idx), index_law)


# --------------------------------------------------------------------------
# exhaustive search
# --------------------------------------------------------------------------

@dataclass(eq=False)
class EnumerationResult:
    best_error: float
    best_matrix: SampleMatrix
    arrangements_tested: int


def brute_force_rearrange(matrix, index_law, chunk=50_000):
    """Global minimum of the index sup-distance over all column orders.

    Column 0 stays fixed (relabelling rows does not change the empirical
    law), every other column runs over all ``M!`` orders.

    Raises:
        SizeError: if ``(M!)^(N-1)`` exceeds one million.
    """
    m, n = matrix.n_samples, matrix.n_assets
    total = math.factorial(m) ** (n - 1)
    if total > MAX_ARRANGEMENTS:
        raise SizeError(f"(M!)^(N-1) = {total} arrangements exceeds {MAX_ARRANGEMENTS}")
    perms = np.array(list(itertools.permutations(range(m))), dtype=np.intp)
    vals = matrix.values
    w = matrix.weights
    base = w[0] * vals[:, 0]
    best, best_combo = np.inf, None
    tested = 0
    # enumerate the product space as flat indices to keep memory bounded
    nperm = len(perms)
    for start in range(0, total, chunk):
        flat = np.arange(start, min(start + chunk, total))
        idx = np.empty((len(flat), m))
        idx[:] = base
        choice = []
        rem = flat.copy()
        for j in range(1, n):
            c = rem % nperm
            rem //= nperm
            choice.append(c)
            idx += w[j] * vals[perms[c], j]
        srt = np.sort(idx, axis=1)
        # for a continuous target the supremum sits at the sample points
        err = ks_sorted_batch(srt, index_law)
        k = int(np.argmin(err))
        tested += len(flat)
        if err[k] < best:
            best = float(err[k])
            best_combo = [int(c[k]) for c in choice]
    cols = [np.arange(m)] + [perms[c] for c in best_combo]
    perm_rows = np.column_stack(cols)
    # rows of the best matrix: column j takes the current row perms[c][i]
    new_perm = np.take_along_axis(matrix.permutations, perm_rows, axis=0)
    best_matrix = matrix.rearranged(new_perm)
    return EnumerationResult(index_loss(best_matrix, index_law), best_matrix, tested)


# --------------------------------------------------------------------------
# two-asset Gaussian-copula reference model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianPair:
    """Two lognormal assets joined by a Gaussian copula with correlation ``rho``."""

    forwards: tuple = (100.0, 100.0)
    vols: tuple = (0.2, 0.3)
    maturity: float = 1.0
    rho: float = 0.5

    def _sd(self, i):
        return self.vols[i] * math.sqrt(self.maturity)

    def marginal(self, i, n_points=4001):
        return MarginalLaw.lognormal(self.forwards[i], self.vols[i], self.maturity, n_points)

    def quantile(self, i, u):
        sd = self._sd(i)
        return self.forwards[i] * np.exp(-0.5 * sd * sd + sd * norm.ppf(u))

    def cdf(self, i, x):
        sd = self._sd(i)
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            z = (np.log(np.maximum(x, 0.0) / self.forwards[i]) + 0.5 * sd * sd) / sd
        return norm.cdf(z)

    def sample(self, rng, m):
        z1 = rng.standard_normal(m)
        z2 = self.rho * z1 + math.sqrt(1.0 - self.rho**2) * rng.standard_normal(m)
        return np.column_stack([self.quantile(0, norm.cdf(z1)), self.quantile(1, norm.cdf(z2))])

    def index_law(self, n_points=2001, n_nodes=160):
        """Law of ``S_1 + S_2`` by Gauss-Hermite quadrature over the first factor.

        For ``rho = 1`` the sum is an increasing function of one normal and
        its CDF is read off directly.
        """
        if self.rho >= 1.0 - 1e-12:
            z = np.linspace(-7.0, 7.0, n_points)
            u = norm.cdf(z)
            total = self.quantile(0, u) + self.quantile(1, u)
            return MarginalLaw.from_cdf(total, u, self.maturity, forward=sum(self.forwards))
        z, wts = np.polynomial.hermite_e.hermegauss(n_nodes)
        wts = wts / wts.sum()
        s1 = self.quantile(0, norm.cdf(z))
        hi = sum(float(self.quantile(i, norm.cdf(8.0))) for i in range(2))
        grid = np.linspace(0.0, hi, n_points)
        rest = grid[:, None] - s1[None, :]
        u2 = np.clip(self.cdf(1, rest), 1e-300, 1.0 - 1e-16)
        cond = norm.cdf((norm.ppf(u2) - self.rho * z[None, :]) / math.sqrt(1.0 - self.rho**2))
        cond[rest <= 0] = 0.0
        cdf = cond @ wts
        return MarginalLaw.from_cdf(grid, cdf, self.maturity, forward=sum(self.forwards))


def rank_match(reference, independent):
    """Reorder each independent column so its ranks follow the reference column.

    Row ``m`` of column ``n`` receives the independent sample whose rank
    equals the rank of ``reference[m, n]`` in its column.
    """
    ref = np.asarray(reference)
    ind = np.asarray(independent)
    out = np.empty_like(ind)
    for j in range(ref.shape[1]):
        ranks = np.empty(len(ref), dtype=np.intp)
        ranks[np.argsort(ref[:, j], kind="stable")] = np.arange(len(ref))
        out[:, j] = np.sort(ind[:, j])[ranks]
    return out


@dataclass(frozen=True)
class Lemma1Curve:
    sample_sizes: tuple
    mean_errors: tuple
    std_errors: tuple

    def non_increasing(self):
        e = self.mean_errors
        return all(b <= a for a, b in zip(e, e[1:]))


def verify_lemma1(model=None, sample_sizes=(50, 100, 200, 400, 800), trials=20, seed=0,
                  index_law=None, stratified=False):
    """Sup-distance of the rank-matched independent samples to the true index law.

    For each ``M`` and trial: draw joint reference samples from ``model``,
    draw independent marginal samples, rank-match them and measure the index
    sup-distance.  ``stratified`` draws the independent marginals at the
    midpoints ``(m - 1/2) / M`` instead of at random.
    """
    model = GaussianPair() if model is None else model
    law = model.index_law() if index_law is None else index_law
    means, stds = [], []
    for i, m in enumerate(sample_sizes):
        errs = []
        for k in range(trials):
            rng = substream(seed, STAGE_ORACLE, 1, i, k)
            ref = model.sample(rng, m)
            if stratified:
                u = np.tile(((np.arange(m) + 0.5) / m)[:, None], (1, 2))
            else:
                u = open_uniforms(rng, (m, 2))
            ind = np.column_stack([model.quantile(0, u[:, 0]), model.quantile(1, u[:, 1])])
            errs.append(index_loss(rank_match(ref, ind).sum(axis=1), law))
        means.append(float(np.mean(errs)))
        stds.append(float(np.std(errs, ddof=1)) if trials > 1 else 0.0)
    return Lemma1Curve(tuple(sample_sizes), tuple(means), tuple(stds))


# --------------------------------------------------------------------------
# call price bound
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundRow:
    strike: float
    mc_price: float
    law_price: float
    error: float
    bound: float

    @property
    def holds(self):
        return self.error <= self.bound * (1.0 + 1e-12) + 1e-12


@dataclass(frozen=True)
class Theorem1Report:
    epsilon: float
    a: float
    b: float
    rows: tuple

    @property
    def violations(self):
        return sum(not r.holds for r in self.rows)

    @property
    def all_hold(self):
        return self.violations == 0


def verify_theorem1(samples, index_law, strikes, tol=1e-9):
    """Check ``|mean (x - K)^+ - E(X - K)^+| <= eps (b - a)`` at each strike.

    ``eps`` is the exact sup distance of the two CDFs; ``[a, b]`` is the
    smallest interval outside which they differ by less than ``tol``.
    """
    x = np.sort(np.asarray(samples, dtype=float))
    ecdf = empirical_cdf(x)
    eps = ks_distance(ecdf, index_law)
    g = index_law.grid
    f = index_law.cdf_values
    lo_law = g[np.argmax(f > tol)]
    hi_law = g[len(f) - 1 - np.argmax((f < 1.0 - tol)[::-1])]
    a = min(float(x[0]), float(lo_law))
    b = max(float(x[-1]), float(hi_law))
    rows = []
    for k in np.atleast_1d(strikes):
        mc = float(np.maximum(x - k, 0.0).mean())
        mk = float(index_law.call_price(k))
        rows.append(BoundRow(float(k), mc, mk, abs(mc - mk), eps * (b - a)))
    return Theorem1Report(float(eps), a, b, tuple(rows))


# --------------------------------------------------------------------------
# same index law, different sub-basket law
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class UnderdeterminationReport:
    index_ks: float
    basket_ks: float
    call_c1: float
    call_c2: float
    call_c1_exact: float
    call_c2_exact: float
    symmetry_c1: float
    symmetry_c2: float
    symmetry_gaussian: float

    def to_dict(self):
        return asdict(self)


def _call_on_uniform_sum(coefs, strike):
    """``E(sum_i c_i U_i - K)^+`` for independent uniforms, by quadrature."""
    if len(coefs) == 1:
        return integrate.quad(lambda u: max(coefs[0] * u - strike, 0.0), 0.0, 1.0,
                              points=[min(max(strike / coefs[0], 0.0), 1.0)])[0]
    a, b = float(coefs[0]), float(coefs[1])

    def inner(u):
        # E(y + b V)^+ for V uniform on [0, 1], in closed form
        y = a * u - strike
        if y >= 0.0:
            return y + 0.5 * b
        if y + b <= 0.0:
            return 0.0
        return (y + b) ** 2 / (2.0 * b)

    kinks = sorted({min(max(x / a, 0.0), 1.0) for x in (strike - b, strike)})
    val, _ = integrate.quad(inner, 0.0, 1.0, points=kinks, epsabs=1e-13, epsrel=1e-12)
    return val


def _gaussian_exchangeable(rng, m, n, rank_corr):
    rho = 2.0 * math.sin(math.pi * rank_corr / 6.0)  # Spearman -> Pearson for Gaussians
    z0 = rng.standard_normal((m, 1))
    z = math.sqrt(rho) * z0 + math.sqrt(1.0 - rho) * rng.standard_normal((m, n))
    return norm.cdf(z)


def demo_underdetermination(n_samples=100_000, seed=0, strike=1.0):
    """Two three-asset worlds with uniform marginals.

    ``C1``: ``S1 = S2``, ``S3`` independent.  ``C2``: ``S1 = S3``, ``S2``
    independent.  Both give ``2 U + U'`` for the index, while the basket
    ``S1 + S2`` is ``2U`` in one world and ``U + U'`` in the other.
    """
    r1 = substream(seed, STAGE_ORACLE, 3, 1)
    r2 = substream(seed, STAGE_ORACLE, 3, 2)
    u1, u3 = open_uniforms(r1, n_samples), open_uniforms(r1, n_samples)
    v1, v2 = open_uniforms(r2, n_samples), open_uniforms(r2, n_samples)
    c1 = SampleMatrix.from_values(np.column_stack([u1, u1, u3]))
    c2 = SampleMatrix.from_values(np.column_stack([v1, v2, v1]))
    b1 = c1.values[:, 0] + c1.values[:, 1]
    b2 = c2.values[:, 0] + c2.values[:, 1]
    g = SampleMatrix.from_values(
        _gaussian_exchangeable(substream(seed, STAGE_ORACLE, 3, 3), n_samples, 3, 1.0 / 3.0))
    return UnderdeterminationReport(
        index_ks=two_sample_ks(c1.index_vector(), c2.index_vector()),
        basket_ks=two_sample_ks(b1, b2),
        call_c1=float(np.maximum(b1 - strike, 0.0).mean()),
        call_c2=float(np.maximum(b2 - strike, 0.0).mean()),
        call_c1_exact=_call_on_uniform_sum([2.0], strike),
        call_c2_exact=_call_on_uniform_sum([1.0, 1.0], strike),
        symmetry_c1=symmetry_measure(c1),
        symmetry_c2=symmetry_measure(c2),
        symmetry_gaussian=symmetry_measure(g),
    )


# --------------------------------------------------------------------------
# worked toy example and tiny random instances
# --------------------------------------------------------------------------

# two independent uniform columns, ten rows
TOY_PAIRS = np.array([
    [0.29, 0.31], [0.14, 0.47], [0.26, 0.17], [0.44, 0.07], [0.05, 0.01],
    [1.00, 0.69], [0.31, 0.83], [0.76, 0.49], [0.72, 0.41], [0.04, 0.76],
])
TOY_EDGES = (0.0, 2.0 / 3.0, 4.0 / 3.0, 2.0)
TOY_BIN_MASS = (0.3, 0.5, 0.2)


def toy_problem():
    """``(matrix, target)`` of the ten-row, three-bin worked example."""
    edges = np.array(TOY_EDGES)
    law = MarginalLaw.from_cdf(edges, np.r_[0.0, np.cumsum(TOY_BIN_MASS)], maturity=1.0)
    target = build_target(law, len(TOY_PAIRS), len(TOY_BIN_MASS), edges=edges)
    return SampleMatrix.from_values(TOY_PAIRS), target


def toy_example_summary(seeds=range(100)):
    """First sort pass and final discrete errors of the worked example over ``seeds``."""
    matrix, target = toy_problem()
    finals = []
    first = None
    for s in seeds:
        res = run_ism(matrix, target, IsmConfig(bins=target.n_bins, seed=int(s)))
        finals.append(res.discrete_error)
        if first is None:
            first = res.harvest_trace[0]
    return {
        "target": target.counts.tolist(),
        "sort_bin_counts": first.bin_counts.tolist(),
        "sort_harvested": first.taken.tolist(),
        "sort_stage_loss": first.error,
        "final_errors": finals,
        "seeds_reaching_zero": int(sum(e == 0.0 for e in finals)),
    }


@dataclass(frozen=True)
class TinyInstance:
    n_samples: int
    n_bins: int
    rho: float
    brute_force_loss: float
    ism_loss: float
    independent_loss: float

    @property
    def brute_force_dominates(self):
        return self.brute_force_loss <= self.ism_loss + 1e-12

    @property
    def ism_improves(self):
        return self.ism_loss <= self.independent_loss + 1e-12


def tiny_instances(n_instances=10, seed=0, sizes=(4, 5)):
    """Random two-asset problems small enough to enumerate.

    Instance ``i`` draws its correlation, sample count and bin count from
    ``substream(seed, STAGE_ORACLE, 4, i)``, then independent lognormal
    marginals for the starting matrix.  Each instance reports the sup-distance
    of the index to its law for the exhaustive optimum, for ISM and for the
    independent start.
    """
    out = []
    for i in range(n_instances):
        rng = substream(seed, STAGE_ORACLE, 4, i)
        rho = float(rng.uniform(0.3, 0.95))
        m = int(rng.choice(sizes))
        k = int(rng.integers(2, m + 1))
        model = GaussianPair(rho=rho)
        law = model.index_law()
        laws = [model.marginal(0), model.marginal(1)]
        start = draw_independent(laws, m, seed, stream_key=(4, i))
        target = build_target(law, m, k)
        res = run_ism(start, target, IsmConfig(bins=k, seed=seed), stream_key=(4, i))
        brute = brute_force_rearrange(start, law)
        out.append(TinyInstance(m, k, rho, brute.best_error, index_loss(res.matrix, law),
                                index_loss(start, law)))
    return out


def tiny_instance_summary(n_instances=10, seed=0):
    rows = tiny_instances(n_instances, seed)
    return {
        "instances": [{**asdict(r), "brute_force_dominates": r.brute_force_dominates,
                       "ism_improves": r.ism_improves} for r in rows],
        "brute_force_dominates_all": all(r.brute_force_dominates for r in rows),
        "ism_improves_all": all(r.ism_improves for r in rows),
    }
