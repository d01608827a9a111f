"""Sample matrices, empirical distributions and dependence diagnostics."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import EmptySubset
from .rng import STAGE_SAMPLING, open_uniforms, substream


@dataclass(eq=False)
class SampleMatrix:
    """M x N samples of the constituents at one maturity.

    ``source_values[:, n]`` holds column ``n`` in draw order and ``uniforms``
    the uniforms that generated it.  ``permutations[m, n]`` is the draw row
    currently sitting at row ``m`` of column ``n``; ``values`` is the
    rearranged matrix.  Rearranging only ever touches ``permutations``.
    """

    maturity: float
    source_values: np.ndarray
    permutations: np.ndarray
    weights: np.ndarray
    uniforms: np.ndarray | None = None
    laws: tuple | None = None

    def __post_init__(self):
        self.source_values = np.asarray(self.source_values, dtype=float)
        self.permutations = np.asarray(self.permutations, dtype=np.intp)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.source_values.ndim != 2:
            raise ValueError("sample matrix must be two-dimensional")
        if self.permutations.shape != self.source_values.shape:
            raise ValueError("permutations must match the sample matrix shape")
        if self.weights.shape != (self.n_assets,):
            raise ValueError("one weight per column required")
        self._values = np.take_along_axis(self.source_values, self.permutations, axis=0)

    @classmethod
    def from_values(cls, values, weights=None, maturity=0.0, uniforms=None, laws=None):
        values = np.asarray(values, dtype=float)
        m, n = values.shape
        perm = np.tile(np.arange(m)[:, None], (1, n))
        w = np.ones(n) if weights is None else weights
        return cls(maturity, values.copy(), perm, w, uniforms, None if laws is None else tuple(laws))

    @property
    def n_samples(self):
        return self.source_values.shape[0]

    @property
    def n_assets(self):
        return self.source_values.shape[1]

    @property
    def values(self):
        return self._values

    def current_uniforms(self):
        if self.uniforms is None:
            return None
        return np.take_along_axis(self.uniforms, self.permutations, axis=0)

    def index_vector(self):
        return self._values @ self.weights

    def rearranged(self, permutations):
        """New matrix sharing the draws but with the given row provenance."""
        return SampleMatrix(self.maturity, self.source_values, permutations, self.weights,
                            self.uniforms, self.laws)

    def with_column_law(self, n, law):
        """Re-map column ``n`` through a new law using its stored uniforms.

        The permutation is kept, so the rank structure of the matrix (and with
        it the dependence) is unchanged.  Other columns are shared untouched.
        """
        if self.uniforms is None:
            raise ValueError("matrix carries no uniforms")
        src = self.source_values.copy()
        src[:, n] = law.quantile(self.uniforms[:, n])
        laws = None
        if self.laws is not None:
            laws = list(self.laws)
            laws[n] = law
            laws = tuple(laws)
        return SampleMatrix(self.maturity, src, self.permutations, self.weights, self.uniforms, laws)

    def column_multisets_equal(self, other):
        """Exact per-column multiset equality of the current values."""
        if self.source_values.shape != other.source_values.shape:
            return False
        return bool(np.array_equal(np.sort(self.values, axis=0), np.sort(other.values, axis=0)))


def draw_independent(laws, n_samples, seed, weights=None, stream_key=()):
    """Independent inverse-transform draws, one substream per column.

    Args:
        laws: marginal laws (one per column) sharing a maturity.
        n_samples: rows M.
        seed: master seed.
        weights: column weights; defaults to ones.
        stream_key: extra substream keys, e.g. the maturity index.
    """
    if n_samples < 2:
        raise ValueError("need at least two samples")
    maturities = {law.maturity for law in laws}
    if len(maturities) != 1:
        raise ValueError("all laws must share one maturity")
    n = len(laws)
    u = np.empty((n_samples, n))
    x = np.empty((n_samples, n))
    for j, law in enumerate(laws):
        u[:, j] = open_uniforms(substream(seed, STAGE_SAMPLING, *stream_key, j), n_samples)
        x[:, j] = law.quantile(u[:, j])
    perm = np.tile(np.arange(n_samples)[:, None], (1, n))
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    return SampleMatrix(maturities.pop(), x, perm, w, u, tuple(laws))


def aggregate(matrix, subset=None):
    """Weighted basket vector ``sum_{n in subset} w_n * values[:, n]``.

    ``subset=None`` gives the full index vector.
    """
    if subset is None:
        return matrix.index_vector()
    idx = sorted(set(int(i) for i in subset))
    if not idx:
        raise EmptySubset("basket subset is empty")
    if idx[0] < 0 or idx[-1] >= matrix.n_assets:
        raise IndexError(f"basket subset {idx} outside 0..{matrix.n_assets - 1}")
    return matrix.values[:, idx] @ matrix.weights[idx]


@dataclass(frozen=True, eq=False)
class EmpiricalCdf:
    sorted_samples: np.ndarray

    @property
    def n(self):
        return len(self.sorted_samples)

    def cdf(self, x):
        return np.searchsorted(self.sorted_samples, x, side="right") / self.n

    __call__ = cdf

    def cdf_left(self, x):
        """Left limit ``P(X < x)``."""
        return np.searchsorted(self.sorted_samples, x, side="left") / self.n

    def quantile(self, u):
        """Generalized inverse ``inf{x : F(x) >= u}``."""
        k = np.ceil(np.asarray(u, dtype=float) * self.n - 1e-9).astype(np.intp) - 1
        return self.sorted_samples[np.clip(k, 0, self.n - 1)]


def empirical_cdf(samples):
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    if len(x) < 1:
        raise ValueError("need at least one sample")
    return EmpiricalCdf(x)


def ks_sorted_batch(sorted_rows, target):
    """Sup distance between the empirical CDF of each (sorted) row and ``target.cdf``.

    Evaluated at the sample points on both sides of each jump, which is
    where the supremum sits for a continuous target.  Ties are honoured.
    A stepped target (one with ``cdf_left`` and ``sorted_samples``, such as
    an EmpiricalCdf) is compared limit against limit and also at its own
    jump points.
    """
    x = np.atleast_2d(sorted_rows)
    m = x.shape[1]
    f = target.cdf(x)
    f_left = target.cdf_left(x) if hasattr(target, "cdf_left") else f
    if m > 1 and np.any(x[:, 1:] == x[:, :-1]):
        upper = np.stack([np.searchsorted(r, r, side="right") for r in x]) / m
        lower = np.stack([np.searchsorted(r, r, side="left") for r in x]) / m
    else:
        upper = np.arange(1, m + 1) / m
        lower = np.arange(0, m) / m
    d = np.maximum(np.abs(upper - f), np.abs(f_left - lower)).max(axis=1)
    jumps = getattr(target, "sorted_samples", None)
    if jumps is not None and hasattr(target, "cdf_left"):
        at = np.stack([np.searchsorted(r, jumps, side="right") for r in x]) / m
        before = np.stack([np.searchsorted(r, jumps, side="left") for r in x]) / m
        d = np.maximum(d, np.maximum(np.abs(at - target.cdf(jumps)),
                                     np.abs(before - target.cdf_left(jumps))).max(axis=1))
    return d


def ks_distance(a, target):
    """``sup_x |F_hat(x) - F(x)|`` for an EmpiricalCdf against a law.

    Evaluated at every sample point (both sides of the jump) and, when the
    target exposes a grid, at every grid node.
    """
    d = float(ks_sorted_batch(a.sorted_samples[None, :], target)[0])
    grid = getattr(target, "grid", None)
    if grid is not None:
        d = max(d, float(np.max(np.abs(a.cdf(grid) - target.cdf(grid)))))
    return d


def two_sample_ks(a, b):
    """Sup distance between two empirical CDFs."""
    xa, xb = np.sort(np.ravel(a)), np.sort(np.ravel(b))
    pts = np.concatenate([xa, xb])
    fa = np.searchsorted(xa, pts, side="right") / len(xa)
    fb = np.searchsorted(xb, pts, side="right") / len(xb)
    return float(np.max(np.abs(fa - fb)))


@dataclass(frozen=True, eq=False)
class EmpiricalCopula:
    rank_matrix: np.ndarray

    def __call__(self, u):
        """Fraction of rows lying in ``[0, u_1] x ... x [0, u_N]``."""
        u = np.asarray(u, dtype=float)
        return float(np.mean(np.all(self.rank_matrix <= u, axis=1)))


def empirical_copula(matrix, laws=None):
    """Rank matrix ``F_n(s_n^m)``; normalized ranks ``r / M`` if no laws are known."""
    laws = matrix.laws if laws is None else laws
    vals = matrix.values
    if laws is None:
        ranks = _ranks(vals) + 1.0
        return EmpiricalCopula(ranks / matrix.n_samples)
    cols = [law.cdf(vals[:, n]) for n, law in enumerate(laws)]
    return EmpiricalCopula(np.column_stack(cols))


def _ranks(values):
    order = np.argsort(values, axis=0, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(values.shape[0])[:, None], axis=0)
    return ranks.astype(float)


def rank_correlation_matrix(values):
    """Spearman rank correlation of the columns."""
    return np.atleast_2d(np.corrcoef(_ranks(np.asarray(values)), rowvar=False))


def symmetry_measure(matrix):
    """``1 - max_{n<l} |rho_s(n, l) - mean rho_s|`` over Spearman correlations.

    Exchangeable matrices score close to 1; a matrix that singles out some
    pairs as strongly dependent scores lower.  Clipped to [0, 1].
    """
    values = matrix.values if isinstance(matrix, SampleMatrix) else np.asarray(matrix)
    if values.shape[1] < 2:
        raise ValueError("symmetry needs at least two columns")
    rho = rank_correlation_matrix(values)
    iu = np.triu_indices(values.shape[1], k=1)
    pairs = rho[iu]
    dev = float(np.max(np.abs(pairs - pairs.mean())))
    return float(np.clip(1.0 - dev, 0.0, 1.0))


def write_matrix_csv(matrix, path, names=None):
    """Dump the current arrangement as ``row,asset,uniform,value``."""
    u = matrix.current_uniforms()
    vals = matrix.values
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "asset", "uniform", "value"])
        for m in range(matrix.n_samples):
            for n in range(matrix.n_assets):
                name = names[n] if names else str(n)
                w.writerow([m, name, "" if u is None else repr(float(u[m, n])),
                            repr(float(vals[m, n]))])


def read_matrix_csv(path):
    """Inverse of :func:`write_matrix_csv`; returns ``(values, uniforms, names)``."""
    rows = {}
    names = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            if r["asset"] not in names:
                names.append(r["asset"])
            rows[(int(r["row"]), r["asset"])] = (r["uniform"], float(r["value"]))
    m = 1 + max(k[0] for k in rows)
    vals = np.empty((m, len(names)))
    uni = np.empty((m, len(names)))
    has_u = True
    for (i, name), (u, v) in rows.items():
        j = names.index(name)
        vals[i, j] = v
        if u == "":
            has_u = False
        else:
            uni[i, j] = float(u)
    return vals, (uni if has_u else None), names
