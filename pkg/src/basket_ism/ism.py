"""Iterative Sort-Mix rearrangement.

The index law is discretized into ``K`` equidistant bins carrying a target
sample count each.  The constituent columns are then alternately sorted and
shuffled; after every arrangement the rows whose index value lands in a bin
that still needs samples are harvested (at most the outstanding count per
bin).  Whatever is left when the loop stops is appended as is.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import BasketIsmError, ConfigError, LawError, StageError
from .rng import STAGE_ISM, substream
from .sampling import SampleMatrix, draw_independent


@dataclass(frozen=True, eq=False)
class TargetVector:
    """Bin edges ``g_0 < ... < g_K`` and target counts per bin."""

    bin_edges: np.ndarray
    counts: np.ndarray
    n_samples: int

    @property
    def n_bins(self):
        return len(self.counts)

    @property
    def total_mass(self):
        return int(self.counts.sum())


@dataclass(frozen=True)
class IsmConfig:
    bins: int = 1400
    max_iterations: int = 10
    stop_fraction: float = 1e-3
    seed: int = 0
    rounding: str = "bin"

    def __post_init__(self):
        if self.bins < 2:
            raise ConfigError("need at least two bins")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if not 0.0 <= self.stop_fraction < 1.0:
            raise ConfigError("stop_fraction must lie in [0, 1)")
        if self.rounding not in ("bin", "cumulative"):
            raise ConfigError(f"unknown rounding {self.rounding!r}")


@dataclass(frozen=True)
class HarvestPass:
    """One sort or mix pass.  ``bin_counts``/``taken`` are per-bin arrays."""

    index: int
    arrangement: str
    harvested: int
    remaining: int
    error: float
    bin_counts: np.ndarray = field(repr=False, compare=False)
    taken: np.ndarray = field(repr=False, compare=False)

    def to_json(self):
        return json.dumps({"pass": self.index, "arrangement": self.arrangement,
                           "harvested": self.harvested, "remaining": self.remaining,
                           "error": self.error})


@dataclass(eq=False)
class IsmResult:
    matrix: SampleMatrix
    discrete_error: float
    iterations_used: int
    harvest_trace: list
    target: TargetVector

    def trace_lines(self):
        return "\n".join(p.to_json() for p in self.harvest_trace)


def build_target(index_law, n_samples, n_bins, edges=None, rounding="bin"):
    """Discretize ``index_law`` for ``n_samples`` rows.

    The default range runs from the ``1/M`` to the ``(M-1)/M`` quantile, so
    about one sample is expected on either side of it.  ``edges`` overrides
    the range when the law is already bounded.

    ``rounding="bin"`` rounds each bin's expected count half to even, which
    zeroes every bin expecting fewer than half a sample; on heavy-tailed laws
    that drops most of the tail.  ``rounding="cumulative"`` rounds the
    cumulative count at each edge instead and differences, keeping the total
    within one sample of the in-range mass.

    Raises:
        LawError: if the range collapses to a point.
    """
    if edges is None:
        if n_samples < n_bins or n_bins < 2:
            raise ConfigError(f"need M >= K >= 2, got M={n_samples}, K={n_bins}")
        g0 = float(index_law.quantile(1.0 / n_samples))
        gk = float(index_law.quantile((n_samples - 1.0) / n_samples))
        edges = np.linspace(g0, gk, n_bins + 1)
        if not gk > g0 or np.any(np.diff(edges) <= 0):
            raise LawError(f"degenerate index law: quantile range [{g0}, {gk}]")
    else:
        edges = np.asarray(edges, dtype=float)
        if edges.ndim != 1 or len(edges) < 3 or np.any(np.diff(edges) <= 0):
            raise LawError("bin edges must be strictly increasing with at least two bins")
    cdf = np.asarray(index_law.cdf(edges), dtype=float)
    # the first bin is closed on the left, so it also takes any atom at g_0
    left = getattr(index_law, "cdf_left", None)
    if left is not None:
        cdf[0] = float(left(edges[0]))
    if rounding == "bin":
        counts = np.rint(n_samples * np.diff(cdf)).astype(np.int64)
    elif rounding == "cumulative":
        counts = np.diff(np.rint(n_samples * (cdf - cdf[0]))).astype(np.int64)
    else:
        raise ConfigError(f"unknown rounding {rounding!r}")
    return TargetVector(edges, np.maximum(counts, 0), int(n_samples))


def assign_bins(values, target):
    """Zero-based bin of each value under ``(g_{k-1}, g_k]``, first bin closed; -1 outside."""
    values = np.asarray(values, dtype=float)
    edges = target.bin_edges
    k = np.searchsorted(edges, values, side="left")
    k[values == edges[0]] = 1
    out = (k < 1) | (k > len(edges) - 1)
    k = k - 1
    k[out] = -1
    return k


def bin_counts(index_vector, target):
    """Counts per bin plus the number of values outside ``[g_0, g_K]``."""
    b = assign_bins(index_vector, target)
    inside = b >= 0
    return np.bincount(b[inside], minlength=target.n_bins), int(np.count_nonzero(~inside))


def discrete_error(matrix_or_index, target):
    """``sum_k |c_k - target_k| / (2 M)`` over the full matrix."""
    if isinstance(matrix_or_index, SampleMatrix):
        index = matrix_or_index.index_vector()
    else:
        index = np.asarray(matrix_or_index, dtype=float)
    counts, _ = bin_counts(index, target)
    return float(np.abs(counts - target.counts).sum() / (2.0 * target.n_samples))


def select_valid_rows(bins, outstanding, rng):
    """Positions to harvest: per bin at most ``outstanding[k]``, chosen uniformly.

    Rows are grouped by bin with random tie keys, so taking the first
    ``outstanding[k]`` of each group is a uniform random subset.
    """
    n = len(bins)
    keys = rng.random(n)
    inside = bins >= 0
    pos = np.flatnonzero(inside)
    if len(pos) == 0:
        return pos
    b = bins[pos]
    order = np.lexsort((keys[pos], b))
    b_sorted = b[order]
    starts = np.flatnonzero(np.r_[True, b_sorted[1:] != b_sorted[:-1]])
    group_len = np.diff(np.r_[starts, len(b_sorted)])
    rank = np.arange(len(b_sorted)) - np.repeat(starts, group_len)
    keep = rank < outstanding[b_sorted]
    return np.sort(pos[order[keep]])


def run_ism(matrix, target, config, stream_key=(), trace_sink=None):
    """Rearrange ``matrix`` so its index distribution follows ``target``.

    Each iteration sorts every remaining column ascending and harvests, then
    shuffles every remaining column and harvests again.  It stops when the
    remaining fraction drops below ``config.stop_fraction``, when the target
    is exhausted or after ``config.max_iterations``.  The input matrix is
    not modified.

    Args:
        matrix: initial sample matrix.
        target: target vector built for ``matrix.n_samples`` rows.
        config: iteration settings and seed.
        stream_key: extra substream keys (the maturity index in a desk run).
        trace_sink: optional text stream receiving one JSON line per pass.

    Raises:
        ConfigError: if the target was built for a different sample count.
    """
    m_rows, n_cols = matrix.n_samples, matrix.n_assets
    if target.n_samples != m_rows:
        raise ConfigError(f"target built for M={target.n_samples}, matrix has M={m_rows}")
    rng = substream(config.seed, STAGE_ISM, *stream_key)
    src = matrix.source_values
    w = matrix.weights
    cols = np.arange(n_cols)
    # rows currently in play, as draw-row provenance per column
    remaining = matrix.permutations.copy()
    outstanding = target.counts.astype(np.int64).copy()
    stored = []
    stored_counts = np.zeros(target.n_bins, dtype=np.int64)
    trace = []
    bins = assign_bins(src[remaining, cols] @ w, target)
    iterations = 0
    pass_no = 0
    for _ in range(config.max_iterations):
        if len(remaining) / m_rows < config.stop_fraction or outstanding.sum() == 0:
            break
        iterations += 1
        for arrangement in ("sort", "mix"):
            if len(remaining) == 0 or outstanding.sum() == 0:
                break
            if arrangement == "sort":
                order = np.argsort(src[remaining, cols], axis=0, kind="stable")
            else:
                order = np.argsort(rng.random(remaining.shape), axis=0)
            remaining = np.take_along_axis(remaining, order, axis=0)
            bins = assign_bins(src[remaining, cols] @ w, target)
            counts = np.bincount(bins[bins >= 0], minlength=target.n_bins)
            take = select_valid_rows(bins, outstanding, rng)
            taken = np.bincount(bins[take], minlength=target.n_bins)
            outstanding -= taken
            stored_counts += taken
            stored.append(remaining[take])
            keep = np.ones(len(remaining), dtype=bool)
            keep[take] = False
            remaining = remaining[keep]
            bins = bins[keep]
            left = np.bincount(bins[bins >= 0], minlength=target.n_bins)
            err = float(np.abs(stored_counts + left - target.counts).sum() / (2.0 * m_rows))
            entry = HarvestPass(pass_no, arrangement, int(len(take)), int(len(remaining)),
                                err, counts, taken)
            trace.append(entry)
            if trace_sink is not None:
                trace_sink.write(entry.to_json() + "\n")
            pass_no += 1
    perm = np.vstack(stored + [remaining]) if stored else remaining
    out = matrix.rearranged(perm)
    return IsmResult(out, discrete_error(out, target), iterations, trace, target)


def run_per_maturity(constituent_laws, index_laws, n_samples, config, weights=None,
                     parallel=True, max_workers=None):
    """Independent draw + ISM for every maturity.

    Args:
        constituent_laws: maturity -> sequence of constituent laws.
        index_laws: maturity -> index law.
        n_samples: rows M per maturity.
        config: shared ISM settings; seeds are split per maturity.
        weights: constituent weights.
        parallel: run maturities in a thread pool.

    Returns:
        dict maturity -> IsmResult, ordered by maturity.

    Raises:
        StageError: tagged with the failing maturity.
    """
    maturities = sorted(constituent_laws)
    missing = [t for t in maturities if t not in index_laws]
    if missing:
        raise ConfigError(f"no index law for maturities {missing}")

    def one(j, t):
        try:
            mat = draw_independent(constituent_laws[t], n_samples, config.seed,
                                   weights=weights, stream_key=(j,))
            target = build_target(index_laws[t], n_samples, config.bins,
                                  rounding=config.rounding)
            return run_ism(mat, target, config, stream_key=(j,))
        except BasketIsmError as exc:
            raise StageError("ism", str(exc), maturity=t) from exc

    jobs = list(enumerate(maturities))
    if parallel and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(lambda a: one(*a), jobs))
    else:
        results = [one(j, t) for j, t in jobs]
    return dict(zip(maturities, results))
