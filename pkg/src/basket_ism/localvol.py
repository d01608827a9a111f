"""Basket densities, the Dupire local volatility surface and path simulation.

The surface is calibrated on a common strike grid.  At each quoted maturity
the numerator of Dupire's formula is built from the time slope of Black
implied total variance (backward difference anchored at ``w(0) = 0``), and the
denominator from the kernel density of the basket samples.  Between quoted
maturities local variance is constant in time, so the integrated variance is
linear in time and matches each quoted node.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .errors import CalibrationError, DegenerateSamples, NumericalError
from .rng import STAGE_PATHS, substream
from .smile import MarginalLaw, implied_vol

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
DEFAULT_VOL_CAP = 5.0


@dataclass(frozen=True, eq=False)
class BasketDensity:
    """Kernel density of basket samples at one maturity."""

    maturity: float
    grid: np.ndarray
    pdf: np.ndarray
    cdf: np.ndarray
    bandwidth: float
    n_samples: int
    law: MarginalLaw

    def call_price(self, strike):
        """Undiscounted call price under the smoothed density."""
        return self.law.call_price(strike)

    def mean(self):
        return self.law.mean()


def silverman_bandwidth(samples, factor=1.0):
    x = np.asarray(samples, dtype=float)
    sd = float(np.std(x, ddof=1)) if len(x) > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * len(x) ** (-0.2) * factor


def estimate_density(samples, maturity, bandwidth_factor=1.0, n_grid=1024, bandwidth=None,
                     chunk=2_000_000):
    """Gaussian kernel density of basket samples.

    Args:
        samples: basket values at ``maturity``.
        maturity: year fraction.
        bandwidth_factor: multiplier on Silverman's rule.
        n_grid: number of grid nodes on ``[min - 3h, max + 3h]``.
        bandwidth: explicit bandwidth; overrides the rule.

    Raises:
        DegenerateSamples: zero spread and no explicit bandwidth.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if len(x) < 1000:
        warnings.warn(f"density from only {len(x)} samples", RuntimeWarning, stacklevel=2)
    h = silverman_bandwidth(x, bandwidth_factor) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise DegenerateSamples("basket samples have zero spread; pass an explicit bandwidth")
    grid = np.linspace(x.min() - 3.0 * h, x.max() + 3.0 * h, n_grid)
    pdf = np.zeros(n_grid)
    step = max(1, chunk // n_grid)
    for i in range(0, len(x), step):
        z = (grid[None, :] - x[i:i + step, None]) / h
        pdf += np.exp(-0.5 * z * z).sum(axis=0)
    pdf /= len(x) * h * math.sqrt(2.0 * math.pi)
    law = MarginalLaw.from_pdf(grid, pdf, maturity, forward=float(x.mean()))
    return BasketDensity(float(maturity), grid, law.pdf_values, law.cdf_values, h, len(x), law)


@dataclass(frozen=True, eq=False)
class LocalVolSurface:
    """Local volatility on ``maturities x strike_grid``.

    ``values[j, i]`` applies on ``(T_{j-1}, T_j]`` (``T_0 = 0``), constant in
    time; strikes are interpolated linearly and extrapolated flat; the last
    row extends beyond the last maturity.
    """

    maturities: np.ndarray
    strike_grid: np.ndarray
    values: np.ndarray
    interpolation: str = "piecewise-constant-variance"
    floored_fraction: float = 0.0

    def row_index(self, t):
        j = int(np.searchsorted(self.maturities, t, side="left"))
        return min(j, len(self.maturities) - 1)

    def __call__(self, t, k):
        row = self.values[self.row_index(t)]
        return np.interp(k, self.strike_grid, row)

    def integrated_variance(self, t, k):
        """``int_0^t sigma^2(s, k) ds`` at fixed strike."""
        edges = np.concatenate([[0.0], self.maturities[:-1], [np.inf]])
        total = 0.0
        for j in range(len(self.maturities)):
            dt = max(0.0, min(t, edges[j + 1]) - edges[j])
            if dt > 0:
                total += dt * float(np.interp(k, self.strike_grid, self.values[j])) ** 2
        return total

    @classmethod
    def flat(cls, vol, maturities=(1.0,), strike_grid=(1e-8, 1e8)):
        m = np.asarray(maturities, dtype=float)
        k = np.asarray(strike_grid, dtype=float)
        return cls(m, k, np.full((len(m), len(k)), float(vol)))


def _implied_total_variance(prices, forward, strikes, maturity):
    w = np.full(len(strikes), np.nan)
    for i, (p, k) in enumerate(zip(prices, strikes)):
        try:
            w[i] = implied_vol(p, forward, k, maturity) ** 2 * maturity
        except NumericalError:
            pass
    return w


def calibrate_local_vol(densities, rate, spot, n_strikes=161, region=(0.005, 0.995),
                        vol_cap=DEFAULT_VOL_CAP, max_floored=0.10):
    """Dupire local volatility from a term structure of basket densities.

    Local variance at ``(T_j, k)`` is
    ``(dU/dT - r U + r k (F(k) - 1)) / (k^2 f(k) / 2)`` with ``U`` the
    undiscounted call; ``dU/dT`` comes from the backward slope of implied
    total variance at fixed strike.  Nodes outside the ``region`` quantiles
    of their maturity's density are extrapolated flat in strike.

    Args:
        densities: maturity -> BasketDensity (at least two maturities).
        rate: constant rate.
        spot: basket spot ``B(0)``.
        n_strikes: size of the common strike grid.
        region: CDF band in which a node is calibrated directly.
        vol_cap: hard cap on local volatility.
        max_floored: fraction of floored nodes beyond which calibration fails.

    Raises:
        CalibrationError: too many floored nodes, or unusable inputs.
    """
    mats = np.array(sorted(densities), dtype=float)
    if len(mats) < 2:
        raise CalibrationError("need at least two maturities")
    dens = [densities[t] for t in sorted(densities)]
    lo = min(float(d.law.quantile(1e-3)) for d in dens)
    hi = max(float(d.law.quantile(1.0 - 1e-3)) for d in dens)
    k = np.linspace(lo, hi, n_strikes)

    w_prev = np.zeros(n_strikes)
    t_prev = 0.0
    values = np.empty((len(mats), n_strikes))
    floored = 0
    calibrated = 0
    for j, (t, d) in enumerate(zip(mats, dens)):
        fwd = spot * math.exp(rate * t)
        u = d.call_price(k)
        w = _implied_total_variance(u, fwd, k, t)
        cdf = d.law.cdf(k)
        f = d.law.pdf(k)
        inside = (cdf >= region[0]) & (cdf <= region[1]) & np.isfinite(w) & np.isfinite(w_prev) & (f > 0)
        w_t = (w - w_prev) / (t - t_prev)
        s = np.sqrt(np.where(w > 0, w, np.nan))
        d1 = (np.log(fwd / k) + 0.5 * w) / s
        u_t = rate * fwd * norm.cdf(d1) + fwd * norm.pdf(d1) * w_t / (2.0 * s)
        num = u_t - rate * u + rate * k * (cdf - 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            var = num / (0.5 * k * k * f)
        low = inside & ~(var >= VARIANCE_FLOOR)
        floored += int(np.count_nonzero(low))
        calibrated += int(np.count_nonzero(inside))
        var = np.where(inside, np.maximum(np.nan_to_num(var, nan=VARIANCE_FLOOR), VARIANCE_FLOOR), np.nan)
        vol = np.minimum(np.sqrt(var), vol_cap)
        if not np.any(inside):
            raise CalibrationError(f"no usable strikes at T={t:g}")
        idx = np.flatnonzero(inside)
        values[j] = np.interp(k, k[idx], vol[idx])
        w_prev = np.where(np.isfinite(w), w, np.nan)
        t_prev = t
    frac = floored / max(calibrated, 1)
    if frac > max_floored:
        raise CalibrationError(
            f"{frac:.1%} of local variance nodes hit the floor (limit {max_floored:.0%})"
        )
    if floored:
        logger.info("floored %d of %d local variance nodes", floored, calibrated)
    return LocalVolSurface(mats, k, values, floored_fraction=frac)


def simulate_paths(surface, spot, rate, time_grid, n_paths, seed, antithetic=False,
                   martingale_correction=False, normals=None):
    """Log-Euler paths of ``dB / B = r dt + sigma_LV(t, B) dW``.

    Args:
        surface: LocalVolSurface (or anything callable as ``surface(t, B)``
            with a ``row_index`` method).
        spot: ``B(0)``.
        rate: constant rate.
        time_grid: increasing times starting at 0.
        n_paths: number of paths (even when ``antithetic``).
        seed: master seed.
        antithetic: pair each normal draw with its negative.
        martingale_correction: rescale each time slice so its mean equals the
            forward exactly.
        normals: pre-drawn ``(n_paths, n_steps)`` normals (common random
            numbers across bumped runs).

    Returns:
        Array ``(n_paths, len(time_grid))``.
    """
    tg = np.asarray(time_grid, dtype=float)
    if tg[0] != 0.0 or np.any(np.diff(tg) <= 0):
        raise ValueError("time grid must start at 0 and increase")
    if normals is None:
        normals = draw_normals(seed, n_paths, len(tg) - 1, antithetic)
    paths = np.empty((n_paths, len(tg)))
    paths[:, 0] = spot
    x = np.full(n_paths, float(spot))
    for i in range(len(tg) - 1):
        dt = tg[i + 1] - tg[i]
        # left-point rule: vol of the interval (t_i, t_{i+1}] at the current level
        sig = surface(tg[i + 1], x)
        x = x * np.exp((rate - 0.5 * sig * sig) * dt + sig * math.sqrt(dt) * normals[:, i])
        if martingale_correction:
            x *= spot * math.exp(rate * tg[i + 1]) / x.mean()
        paths[:, i + 1] = x
    return paths


def draw_normals(seed, n_paths, n_steps, antithetic=False):
    rng = substream(seed, STAGE_PATHS)
    if antithetic:
        if n_paths % 2:
            raise ValueError("antithetic sampling needs an even path count")
        half = rng.standard_normal((n_paths // 2, n_steps))
        return np.concatenate([half, -half])
    return rng.standard_normal((n_paths, n_steps))


def time_grid_for(maturity, steps_per_year=100, knots=()):
    """Uniform grid to ``maturity`` that also hits every knot below it."""
    n = max(1, int(math.ceil(maturity * steps_per_year)))
    pts = set(np.linspace(0.0, maturity, n + 1).tolist())
    pts.update(float(k) for k in knots if 0.0 < k < maturity)
    return np.array(sorted(pts))


def write_surface_csv(surface, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["maturity", "strike", "local_vol"])
        for j, t in enumerate(surface.maturities):
            for k, v in zip(surface.strike_grid, surface.values[j]):
                w.writerow([repr(float(t)), repr(float(k)), repr(float(v))])


def read_surface_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append((float(r["maturity"]), float(r["strike"]), float(r["local_vol"])))
    mats = np.array(sorted({r[0] for r in rows}))
    strikes = np.array(sorted({r[1] for r in rows}))
    values = np.empty((len(mats), len(strikes)))
    for t, k, v in rows:
        values[np.searchsorted(mats, t), np.searchsorted(strikes, k)] = v
    return LocalVolSurface(mats, strikes, values)


def write_densities_csv(densities, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["maturity", "strike", "pdf"])
        for t in sorted(densities):
            d = densities[t]
            for k, p in zip(d.grid, d.pdf):
                w.writerow([repr(float(t)), repr(float(k)), repr(float(p))])
