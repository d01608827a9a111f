"""SABR smiles and the risk-neutral marginal laws extracted from them.

The smile of every asset (and of the index) at every quoted maturity is
described by a Hagan lognormal SABR expansion with a fixed CEV exponent.  A
calibrated smile is turned into a :class:`MarginalLaw` by differentiating the
undiscounted call price curve twice in strike.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.stats import norm

from .errors import ArbitrageError, CalibrationError, ClippedMassWarning, NumericalError

logger = logging.getLogger(__name__)

DEFAULT_BETA = 0.9


# --------------------------------------------------------------------------
# Black formulas
# --------------------------------------------------------------------------

def black_call(forward, strike, maturity, vol, discount=1.0):
    """Black-76 call price. Vectorized over ``strike`` and ``vol``."""
    forward = np.asarray(forward, dtype=float)
    strike = np.asarray(strike, dtype=float)
    vol = np.asarray(vol, dtype=float)
    sd = vol * np.sqrt(maturity)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = (np.log(forward / strike) + 0.5 * sd**2) / sd
        d2 = d1 - sd
        price = forward * norm.cdf(d1) - strike * norm.cdf(d2)
    intrinsic = np.maximum(forward - strike, 0.0)
    price = np.where(sd > 0, price, intrinsic)
    return discount * price


def black_put(forward, strike, maturity, vol, discount=1.0):
    call = black_call(forward, strike, maturity, vol, 1.0)
    return discount * (call - (np.asarray(forward) - np.asarray(strike)))


def implied_vol(price, forward, strike, maturity, discount=1.0, kind="call"):
    """Invert the Black formula for a single option price.

    Out-of-the-money conversion is applied through put-call parity so the
    root search always works on the price with the larger time value.

    Raises:
        NumericalError: if the price lies outside the no-arbitrage bounds.
    """
    undisc = price / discount
    if kind == "put":
        undisc = undisc + (forward - strike)
    # undisc is now an undiscounted call price
    if strike < forward:
        target = undisc - (forward - strike)
        fn = black_put
    else:
        target = undisc
        fn = black_call
    upper_bound = strike if fn is black_put else forward
    if not (0.0 < target < upper_bound):
        raise NumericalError(
            f"price {price:.6g} outside arbitrage bounds for K={strike:.6g}, F={forward:.6g}"
        )

    def objective(v):
        return float(fn(forward, strike, maturity, v)) - target

    lo, hi = 1e-6, 1.0
    while objective(hi) < 0:
        hi *= 2.0
        if hi > 1e3:
            raise NumericalError("implied vol above 1000%")
    if objective(lo) > 0:
        return lo
    return optimize.brentq(objective, lo, hi, xtol=1e-14, rtol=1e-14, maxiter=200)


# --------------------------------------------------------------------------
# SABR
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SabrParams:
    alpha: float
    beta: float
    rho: float
    gamma: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not -1.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (-1, 1), got {self.rho}")
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")


def _z_over_x(z, rho):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = np.abs(z) < 1e-7
    zs = z[small]
    out[small] = 1.0 - 0.5 * rho * zs + (2.0 - 3.0 * rho**2) * zs**2 / 12.0
    zl = z[~small]
    s = np.sqrt(1.0 - 2.0 * rho * zl + zl**2)
    # log((s + z - rho) / (1 - rho)) written to avoid cancellation near z = 0
    x = np.log1p(((zl**2 - 2.0 * rho * zl) / (s + 1.0) + zl) / (1.0 - rho))
    out[~small] = zl / x
    return out


def sabr_implied_vol(params, forward, strike, maturity):
    """Hagan et al. (2002) lognormal implied volatility.

    Vectorized over ``strike``. The at-the-money point is handled through the
    series expansion of ``z / x(z)``.

    Raises:
        NumericalError: if the expansion yields a non-positive or non-finite vol.
    """
    if forward <= 0 or maturity <= 0:
        raise ValueError("forward and maturity must be positive")
    k = np.asarray(strike, dtype=float)
    if np.any(k <= 0):
        raise ValueError("strikes must be positive")
    a, b, r, g = params.alpha, params.beta, params.rho, params.gamma
    omb = 1.0 - b
    log_fk = np.log(forward / k)
    fk_pow = (forward * k) ** (0.5 * omb)
    denom = fk_pow * (1.0 + omb**2 / 24.0 * log_fk**2 + omb**4 / 1920.0 * log_fk**4)
    z = g / a * fk_pow * log_fk
    correction = 1.0 + maturity * (
        omb**2 / 24.0 * a**2 / fk_pow**2
        + 0.25 * r * b * g * a / fk_pow
        + (2.0 - 3.0 * r**2) / 24.0 * g**2
    )
    vol = a / denom * _z_over_x(z, r) * correction
    if not np.all(np.isfinite(vol)) or np.any(vol <= 0):
        raise NumericalError(f"SABR expansion produced non-positive vol for {params}")
    return vol if np.ndim(strike) else float(vol)


@dataclass
class FitReport:
    rmse: float
    residuals: np.ndarray
    n_evaluations: int


def _residuals_fn(beta, forward, strikes, maturity, vols):
    def residuals(theta):
        alpha, rho, gamma = theta
        try:
            params = SabrParams(alpha, beta, rho, gamma)
            model = sabr_implied_vol(params, forward, strikes, maturity)
        except (ValueError, NumericalError):
            return np.full(len(vols), 10.0)
        return model - vols

    return residuals


def calibrate_sabr(quotes, spot, forward, beta_fixed=DEFAULT_BETA, initial_guess=None,
                   rmse_cap=0.02, side="mid"):
    """Fit ``alpha, rho, gamma`` to one asset/maturity quote grid.

    Args:
        quotes: OptionQuote objects sharing one maturity; moneyness is
            strike / spot.
        spot: spot price used to turn moneyness into strikes.
        forward: forward price for the maturity.
        beta_fixed: CEV exponent held fixed during the fit.
        initial_guess: starting SabrParams; the default starts from the
            at-the-money quote with ``rho = -0.3`` and ``gamma = 1``.
        rmse_cap: maximum acceptable root-mean-square vol error.
        side: quote side used for the fit.

    Returns:
        ``(SabrParams, FitReport)``.

    Raises:
        CalibrationError: when the fitted RMSE exceeds ``rmse_cap``.
    """
    sel = [q for q in quotes if q.side == side]
    if len(sel) < 3:
        raise CalibrationError(f"need at least 3 {side} quotes, got {len(sel)}")
    maturities = {q.maturity for q in sel}
    if len(maturities) != 1:
        raise CalibrationError("quotes span more than one maturity")
    maturity = maturities.pop()
    mny = np.array([q.moneyness for q in sel])
    if len(np.unique(mny)) != len(mny):
        raise CalibrationError("duplicate moneyness in quote grid")
    order = np.argsort(mny)
    strikes = mny[order] * spot
    vols = np.array([q.implied_vol for q in sel])[order]

    if initial_guess is None:
        atm = float(np.interp(forward, strikes, vols))
        initial_guess = SabrParams(atm * forward ** (1.0 - beta_fixed), beta_fixed, -0.3, 1.0)

    residuals = _residuals_fn(beta_fixed, forward, strikes, maturity, vols)

    def to_theta(x):
        return np.array([np.exp(x[0]), 0.999 * np.tanh(x[1]), x[2] ** 2])

    def sse(x):
        res = residuals(to_theta(x))
        return float(res @ res)

    x0 = np.array([np.log(initial_guess.alpha), np.arctanh(initial_guess.rho / 0.999),
                   np.sqrt(initial_guess.gamma)])
    nm = optimize.minimize(sse, x0, method="Nelder-Mead",
                           options={"xatol": 1e-10, "fatol": 1e-16, "maxiter": 4000,
                                    "maxfev": 8000})
    theta0 = to_theta(nm.x)
    theta0[1] = np.clip(theta0[1], -0.998, 0.998)
    polish = optimize.least_squares(
        residuals, theta0,
        bounds=([1e-8, -0.999, 0.0], [np.inf, 0.999, np.inf]),
        xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000,
    )
    best = polish.x if 2 * polish.cost <= nm.fun else theta0
    res = residuals(best)
    rmse = float(np.sqrt(np.mean(res**2)))
    if rmse > rmse_cap:
        raise CalibrationError(f"SABR fit RMSE {rmse:.4%} above cap {rmse_cap:.4%}")
    params = SabrParams(float(best[0]), beta_fixed, float(best[1]), float(best[2]))
    return params, FitReport(rmse, res, int(nm.nfev + polish.nfev))


# --------------------------------------------------------------------------
# Marginal laws
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MarginalLaw:
    """Distribution of one asset (or basket) at one maturity on a strike grid.

    The CDF is linear between grid nodes, which makes :meth:`quantile` its
    exact inverse.  ``clipped_mass`` records density mass that was floored
    away during extraction.
    """

    maturity: float
    grid: np.ndarray
    cdf_values: np.ndarray
    pdf_values: np.ndarray
    forward: float
    clipped_mass: float = 0.0
    _inv: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        cdf = np.asarray(self.cdf_values, dtype=float)
        if grid.ndim != 1 or len(grid) < 2 or np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing with at least two nodes")
        if cdf.shape != grid.shape or np.any(np.diff(cdf) < 0):
            raise ValueError("cdf values must be non-decreasing on the grid")
        keep = np.concatenate([[True], np.diff(cdf) > 0])
        object.__setattr__(self, "_inv", (cdf[keep], grid[keep]))

    # construction -----------------------------------------------------

    @classmethod
    def from_cdf(cls, grid, cdf, maturity, forward=None, pdf=None, clipped_mass=0.0):
        """Build a law from CDF values, rescaled to run exactly from 0 to 1."""
        grid = np.asarray(grid, dtype=float)
        cdf = np.maximum.accumulate(np.asarray(cdf, dtype=float))
        span = cdf[-1] - cdf[0]
        if span <= 0:
            raise ValueError("cdf carries no mass on the grid")
        cdf = (cdf - cdf[0]) / span
        if pdf is None:
            pdf = np.gradient(cdf, grid)
        else:
            pdf = np.asarray(pdf, dtype=float) / span
        law = cls(maturity, grid, cdf, pdf, 0.0, clipped_mass)
        fwd = law.mean() if forward is None else float(forward)
        object.__setattr__(law, "forward", fwd)
        return law

    @classmethod
    def from_pdf(cls, grid, pdf, maturity, forward=None, clipped_mass=0.0):
        """Build a law from non-negative density values (trapezoid-integrated)."""
        grid = np.asarray(grid, dtype=float)
        pdf = np.asarray(pdf, dtype=float)
        if np.any(pdf < 0):
            raise ValueError("density values must be non-negative")
        cells = 0.5 * (pdf[1:] + pdf[:-1]) * np.diff(grid)
        cdf = np.concatenate([[0.0], np.cumsum(cells)])
        return cls.from_cdf(grid, cdf, maturity, forward, pdf=pdf, clipped_mass=clipped_mass)

    @classmethod
    def lognormal(cls, forward, vol, maturity, n_points=4001, tail_sd=7.0):
        sd = vol * np.sqrt(maturity)
        z = np.linspace(-tail_sd, tail_sd, n_points)
        grid = forward * np.exp(-0.5 * sd**2 + sd * z)
        pdf = norm.pdf(z) / (grid * sd)
        return cls.from_cdf(grid, norm.cdf(z), maturity, forward, pdf=pdf)

    @classmethod
    def uniform(cls, low=0.0, high=1.0, maturity=1.0):
        grid = np.array([low, high], dtype=float)
        return cls.from_cdf(grid, np.array([0.0, 1.0]), maturity,
                            pdf=np.full(2, 1.0 / (high - low)))

    @classmethod
    def from_samples(cls, samples, maturity, n_points=4001):
        """Piecewise-linear CDF through a large reference sample."""
        x = np.sort(np.asarray(samples, dtype=float))
        grid = np.linspace(x[0], x[-1], n_points)
        cdf = np.searchsorted(x, grid, side="right") / len(x)
        cdf[0] = 0.0
        return cls.from_cdf(grid, cdf, maturity)

    # evaluation -------------------------------------------------------

    def cdf(self, x):
        return np.interp(x, self.grid, self.cdf_values, left=0.0, right=1.0)

    def pdf(self, x):
        return np.interp(x, self.grid, self.pdf_values, left=0.0, right=0.0)

    def quantile(self, u):
        u_arr = np.asarray(u, dtype=float)
        if np.any((u_arr <= 0.0) | (u_arr >= 1.0)):
            raise ValueError("quantile requires u strictly inside (0, 1)")
        xp, fp = self._inv
        return np.interp(u_arr, xp, fp)

    def mean(self):
        """Exact mean of the piecewise-linear CDF (piecewise-uniform mass)."""
        mass = np.diff(self.cdf_values)
        mid = 0.5 * (self.grid[1:] + self.grid[:-1])
        return float(mass @ mid)

    def call_price(self, strike):
        """Undiscounted call price ``E[(X - K)^+] = int_K^inf (1 - F)``, exact for the
        piecewise-linear CDF."""
        k = np.atleast_1d(np.asarray(strike, dtype=float))
        g, c = self.grid, self.cdf_values
        surv = 1.0 - c
        cells = 0.5 * (surv[1:] + surv[:-1]) * np.diff(g)
        tail = np.concatenate([np.cumsum(cells[::-1])[::-1], [0.0]])  # int_{g_i}^{g_end}
        kc = np.clip(k, g[0], g[-1])
        i = np.clip(np.searchsorted(g, kc, side="right") - 1, 0, len(g) - 2)
        s_k = 1.0 - np.interp(kc, g, c)
        partial = 0.5 * (s_k + surv[i + 1]) * (g[i + 1] - kc)
        price = partial + tail[i + 1] + np.maximum(g[0] - k, 0.0)
        return price if np.ndim(strike) else float(price[0])

    def put_price(self, strike):
        return self.call_price(strike) - (self.mean() - np.asarray(strike, dtype=float))


def quantile(law, u):
    """Inverse CDF of ``law`` at probabilities strictly inside (0, 1)."""
    return law.quantile(u)


def _sabr_raw_cdf(params, forward, maturity, strikes, h):
    up = black_call(forward, strikes + h, maturity, sabr_implied_vol(params, forward, strikes + h, maturity))
    dn = black_call(forward, strikes - h, maturity, sabr_implied_vol(params, forward, strikes - h, maturity))
    return 1.0 + (up - dn) / (2.0 * h)


def _find_tail_strike(params, forward, maturity, level, lower):
    """Strike where the smile-implied CDF crosses ``level`` (bisection in log strike)."""
    atm_sd = sabr_implied_vol(params, forward, forward, maturity) * np.sqrt(maturity)
    span = max(atm_sd, 1e-4)
    lo_x, hi_x = (-1.0, 0.0) if lower else (0.0, 1.0)
    # widen until bracketed
    for _ in range(60):
        edge = lo_x if lower else hi_x
        k = forward * np.exp(edge * span)
        val = _sabr_raw_cdf(params, forward, maturity, np.array([k]), 1e-5 * k)[0]
        if (lower and val < level) or (not lower and val > 1.0 - level):
            break
        if lower:
            lo_x *= 1.5
        else:
            hi_x *= 1.5
        if abs(edge) * span > 12.0:
            break
    for _ in range(80):
        mid = 0.5 * (lo_x + hi_x)
        k = forward * np.exp(mid * span)
        val = _sabr_raw_cdf(params, forward, maturity, np.array([k]), 1e-5 * k)[0]
        if lower:
            if val < level:
                lo_x = mid
            else:
                hi_x = mid
        else:
            if val > 1.0 - level:
                hi_x = mid
            else:
                lo_x = mid
    return forward * np.exp((lo_x if lower else hi_x) * span)


def extract_law(params, forward, rate, maturity, n_points=2001, tail=1e-5,
                max_clipped=0.01, warn_clipped=1e-8):
    """Risk-neutral law implied by a SABR smile.

    The density is the second strike-difference of undiscounted call prices
    on an equidistant grid that spans the ``[tail, 1 - tail]`` quantiles of the
    smile's own CDF. Negative density values are floored at zero and the law
    renormalized.

    Args:
        params: calibrated SabrParams.
        forward: forward of the asset at ``maturity``.
        rate: continuously compounded rate (the law is forward-measure, so the
            rate only enters through ``forward``; kept for a uniform signature).
        maturity: year fraction.
        n_points: grid size.
        tail: probability left outside each end of the grid.
        max_clipped: clipped mass above which the law is rejected.
        warn_clipped: clipped mass above which a ClippedMassWarning is emitted.

    Raises:
        ArbitrageError: if more than ``max_clipped`` of the mass was negative.
    """
    del rate
    k_lo = _find_tail_strike(params, forward, maturity, tail, lower=True)
    k_hi = _find_tail_strike(params, forward, maturity, tail, lower=False)
    grid = np.linspace(k_lo, k_hi, n_points)
    h = grid[1] - grid[0]
    ext = np.concatenate([[grid[0] - h], grid, [grid[-1] + h]])
    if ext[0] <= 0:
        ext[0] = 0.5 * grid[0]  # keep strikes positive; the node is only a stencil point
    calls = black_call(forward, ext, maturity, sabr_implied_vol(params, forward, ext, maturity))
    left_h = grid[0] - ext[0]
    pdf = np.empty(n_points)
    pdf[1:-1] = (calls[3:-1] - 2.0 * calls[2:-2] + calls[1:-3]) / h**2
    pdf[0] = 2.0 * ((calls[2] - calls[1]) / h - (calls[1] - calls[0]) / left_h) / (h + left_h)
    pdf[-1] = (calls[-1] - 2.0 * calls[-2] + calls[-3]) / h**2
    positive = np.maximum(pdf, 0.0)
    negative = np.minimum(pdf, 0.0)
    total = float(np.trapezoid(positive, grid))
    clipped = float(-np.trapezoid(negative, grid)) / total
    if clipped > max_clipped:
        raise ArbitrageError(
            f"clipped density mass {clipped:.3%} exceeds {max_clipped:.1%} at T={maturity:g}"
        )
    if clipped > warn_clipped:
        warnings.warn(
            f"floored {clipped:.3e} of negative density mass at T={maturity:g}",
            ClippedMassWarning, stacklevel=2,
        )
    return MarginalLaw.from_pdf(grid, positive, maturity, forward=forward, clipped_mass=clipped)


def write_params_csv(rows, path):
    """Write calibrated parameters as ``asset,maturity,alpha,beta,rho,gamma,rmse``.

    ``rows`` is an iterable of ``(asset, maturity, SabrParams, rmse)``.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["asset", "maturity", "alpha", "beta", "rho", "gamma", "rmse"])
        for asset, maturity, p, rmse in rows:
            w.writerow([asset, repr(float(maturity)), repr(p.alpha), repr(p.beta),
                        repr(p.rho), repr(p.gamma), repr(float(rmse))])


def read_params_csv(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            p = SabrParams(float(row["alpha"]), float(row["beta"]), float(row["rho"]),
                           float(row["gamma"]))
            out.append((row["asset"], float(row["maturity"]), p, float(row["rmse"])))
    return out


@dataclass(eq=False)
class CalibratedMarket:
    """Fitted smiles and extracted laws for every asset and the index.

    The dictionaries are keyed by maturity; constituent entries are lists in
    snapshot order.
    """

    maturities: tuple
    constituent_params: dict
    index_params: dict
    constituent_laws: dict
    index_laws: dict
    constituent_fits: dict
    index_fits: dict

    def params_rows(self, names):
        """Rows for :func:`write_params_csv`."""
        rows = []
        for t in self.maturities:
            for name, p, fit in zip(names, self.constituent_params[t], self.constituent_fits[t]):
                rows.append((name, t, p, fit.rmse))
            rows.append(("__INDEX__", t, self.index_params[t], self.index_fits[t].rmse))
        return rows


def calibrate_asset(snapshot, asset, maturity, side="mid", rmse_cap=0.02, n_points=2001,
                    beta_fixed=DEFAULT_BETA):
    """Fit one asset (or the index, ``asset="__INDEX__"``) and extract its law."""
    if asset == "__INDEX__":
        spot, fwd = snapshot.index_spot, snapshot.index_forward(maturity)
    else:
        spot, fwd = snapshot.constituents[asset].spot, snapshot.forward(asset, maturity)
    quotes = snapshot.quotes_for(asset, maturity, side)
    params, fit = calibrate_sabr(quotes, spot, fwd, beta_fixed=beta_fixed, rmse_cap=rmse_cap,
                                 side=side)
    law = extract_law(params, fwd, snapshot.rate, maturity, n_points=n_points)
    return params, fit, law


def calibrate_snapshot(snapshot, side="mid", rmse_cap=0.02, n_points=2001,
                       beta_fixed=DEFAULT_BETA):
    """Calibrate every constituent and the index at every maturity."""
    cp, ip, cl, il, cf, ifit = {}, {}, {}, {}, {}, {}
    for t in snapshot.maturities:
        cons, index = calibrate_maturity(snapshot, t, side, rmse_cap, n_points, beta_fixed)
        cp[t] = [c[0] for c in cons]
        cf[t] = [c[1] for c in cons]
        cl[t] = [c[2] for c in cons]
        ip[t], ifit[t], il[t] = index
    return CalibratedMarket(tuple(snapshot.maturities), cp, ip, cl, il, cf, ifit)


def calibrate_maturity(snapshot, maturity, side="mid", rmse_cap=0.02, n_points=2001,
                       beta_fixed=DEFAULT_BETA):
    """Constituent fits (list of ``(params, fit, law)``) and the index fit at one maturity."""
    cons = [calibrate_asset(snapshot, n, maturity, side, rmse_cap, n_points, beta_fixed)
            for n in range(snapshot.n_assets)]
    index = calibrate_asset(snapshot, "__INDEX__", maturity, side, rmse_cap, n_points, beta_fixed)
    return cons, index
