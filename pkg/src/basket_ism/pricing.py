"""Basket pricing from rearranged samples and from the basket local vol model.

European payoffs at a quoted maturity are priced directly on the static
samples.  Anything path dependent goes through paths of the basket local
volatility model calibrated from the same samples.  Greeks are bump and
revalue with common random numbers; constituent vegas re-map a single
column through its stored uniforms, so the rearrangement is never redone.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DonorInBasket, StateError, UnsupportedPayoff, ValidationError
from .localvol import (calibrate_local_vol, draw_normals, estimate_density, simulate_paths,
                       time_grid_for)
from .market_data import OptionQuote
from .sampling import aggregate
from .smile import DEFAULT_BETA, calibrate_sabr, extract_law

TERMINAL_PAYOFFS = ("european-call", "european-put", "forward")
PATH_PAYOFFS = ("asian-call", "asian-put")

_CUSTOM = {}


def register_payoff(name, fn, path=False):
    """Register a custom payoff.

    ``fn`` receives the basket values at maturity (``path=False``, shape
    ``(M,)``) or the monitored path matrix (``path=True``, shape
    ``(n_paths, n_dates)``) together with the strike, and returns payoffs.
    """
    _CUSTOM[name] = (fn, bool(path))


@dataclass(frozen=True)
class PriceResult:
    price: float
    stderr: float


@dataclass(frozen=True)
class PricingRequest:
    """One basket derivative.

    ``basket`` lists constituent indices (``None`` is the full index).
    ``averaging`` lists the Asian monitoring dates; by default every
    simulation date after 0.
    """

    payoff: str
    strike: float
    maturity: float
    basket: tuple | None = None
    notional: float = 1.0
    averaging: tuple | None = None

    def __post_init__(self):
        if self.basket is not None:
            b = tuple(sorted(set(int(i) for i in self.basket)))
            if not b:
                raise ValidationError("basket is empty")
            object.__setattr__(self, "basket", b)
        if self.maturity <= 0:
            raise ValidationError("maturity must be positive")


@dataclass
class GreeksReport:
    delta: float
    gamma: float
    constituent_deltas: dict
    vegas: dict = field(default_factory=dict)
    bump_size: float = 0.0
    price: float = float("nan")
    engine: str = "lvm"


# --------------------------------------------------------------------------
# payoffs
# --------------------------------------------------------------------------

def _terminal_payoff(name, values, strike):
    if name == "european-call":
        return np.maximum(values - strike, 0.0)
    if name == "european-put":
        return np.maximum(strike - values, 0.0)
    if name == "forward":
        return values - strike
    if name in _CUSTOM and not _CUSTOM[name][1]:
        return np.asarray(_CUSTOM[name][0](values, strike), dtype=float)
    raise UnsupportedPayoff(f"{name!r} is not a terminal payoff")


def _path_payoff(name, paths, strike):
    if name in TERMINAL_PAYOFFS or (name in _CUSTOM and not _CUSTOM[name][1]):
        return _terminal_payoff(name, paths[:, -1], strike)
    if name == "asian-call":
        return np.maximum(paths.mean(axis=1) - strike, 0.0)
    if name == "asian-put":
        return np.maximum(strike - paths.mean(axis=1), 0.0)
    if name in _CUSTOM:
        return np.asarray(_CUSTOM[name][0](paths, strike), dtype=float)
    raise UnsupportedPayoff(f"unknown payoff {name!r}")


def price_european_static(basket_samples, strike, rate, maturity, kind="call"):
    """Discounted sample mean of a European payoff; s.e. is std / sqrt(M)."""
    b = np.asarray(basket_samples, dtype=float)
    name = kind if kind.startswith("european") or kind == "forward" else f"european-{kind}"
    pay = _terminal_payoff(name, b, strike)
    df = math.exp(-rate * maturity)
    se = float(pay.std(ddof=1) / math.sqrt(len(pay))) if len(pay) > 1 else 0.0
    return PriceResult(df * float(pay.mean()), df * se)


# --------------------------------------------------------------------------
# engine state
# --------------------------------------------------------------------------

@dataclass(eq=False)
class EngineState:
    """Calibrated state shared by the pricers.

    Holds the snapshot, the per-maturity rearranged sample matrices and the
    Monte Carlo settings.  Surfaces are cached per basket.
    """

    snapshot: object
    matrices: dict
    n_paths: int = 100_000
    steps_per_year: int = 100
    seed: int = 0
    bandwidth_factor: float = 1.0
    beta_fixed: float = DEFAULT_BETA
    side: str = "mid"
    max_floored: float = 0.10
    _surfaces: dict = field(default_factory=dict, repr=False)

    @property
    def rate(self):
        return self.snapshot.rate

    @property
    def maturities(self):
        return tuple(sorted(self.matrices))

    def basket_indices(self, basket):
        n = self.snapshot.n_assets
        return tuple(range(n)) if basket is None else tuple(basket)

    def basket_spot(self, basket=None):
        idx = list(self.basket_indices(basket))
        return float(self.snapshot.spots[idx] @ self.snapshot.weights[idx])

    def basket_samples(self, maturity, basket=None):
        if maturity not in self.matrices:
            raise ValidationError(f"no static samples at T={maturity:g}; quoted: {self.maturities}")
        return aggregate(self.matrices[maturity], self.basket_indices(basket))

    def densities(self, basket=None):
        return {t: estimate_density(self.basket_samples(t, basket), t, self.bandwidth_factor)
                for t in self.maturities}

    def surface(self, basket=None):
        key = self.basket_indices(basket)
        if key not in self._surfaces:
            self._surfaces[key] = calibrate_local_vol(self.densities(basket), self.rate,
                                                      self.basket_spot(basket),
                                                      max_floored=self.max_floored)
        return self._surfaces[key]

    def with_matrices(self, matrices):
        return replace(self, matrices=dict(matrices), _surfaces={})


def price_static(state, request):
    """Price a terminal payoff on the static samples at a quoted maturity."""
    if request.payoff in PATH_PAYOFFS or (request.payoff in _CUSTOM and _CUSTOM[request.payoff][1]):
        raise UnsupportedPayoff(f"{request.payoff!r} needs paths; use price_path_dependent")
    b = state.basket_samples(request.maturity, request.basket)
    pay = _terminal_payoff(request.payoff, b, request.strike)
    df = math.exp(-state.rate * request.maturity)
    return PriceResult(request.notional * df * float(pay.mean()),
                       request.notional * df * float(pay.std(ddof=1) / math.sqrt(len(pay))))


def price_path_dependent(surface, request, spot, rate, n_paths=100_000, seed=0,
                         steps_per_year=100, normals=None, martingale_correction=False,
                         antithetic=False):
    """Discounted pathwise payoff mean under the basket local vol model.

    Raises:
        UnsupportedPayoff: unknown payoff name.
    """
    known = TERMINAL_PAYOFFS + PATH_PAYOFFS + tuple(_CUSTOM)
    if request.payoff not in known:
        raise UnsupportedPayoff(f"unknown payoff {request.payoff!r}")
    tg, dates = _monitoring(request, steps_per_year)
    if normals is None:
        normals = draw_normals(seed, n_paths, len(tg) - 1, antithetic)
    paths = simulate_paths(surface, spot, rate, tg, n_paths, seed, normals=normals,
                           martingale_correction=martingale_correction)
    pos = np.searchsorted(tg, dates)
    pay = _path_payoff(request.payoff, paths[:, pos], request.strike)
    df = math.exp(-rate * request.maturity)
    return PriceResult(request.notional * df * float(pay.mean()),
                       request.notional * df * float(pay.std(ddof=1) / math.sqrt(len(pay))))


def _monitoring(request, steps_per_year):
    dates = request.averaging
    if dates is None or request.payoff in TERMINAL_PAYOFFS:
        tg = time_grid_for(request.maturity, steps_per_year)
        if request.payoff in PATH_PAYOFFS or request.payoff in _CUSTOM:
            return tg, tg[1:] if dates is None else np.asarray(dates, dtype=float)
        return tg, np.array([request.maturity])
    dates = np.asarray(sorted(float(d) for d in dates), dtype=float)
    if dates[0] <= 0 or dates[-1] > request.maturity:
        raise ValidationError("averaging dates must lie in (0, maturity]")
    return time_grid_for(request.maturity, steps_per_year, dates), dates


def price(state, request, engine="auto"):
    """Dispatch to the static pricer when possible, otherwise to paths."""
    if engine == "auto":
        static_ok = request.payoff in TERMINAL_PAYOFFS or (
            request.payoff in _CUSTOM and not _CUSTOM[request.payoff][1])
        engine = "static" if static_ok and request.maturity in state.matrices else "lvm"
    if engine == "static":
        return price_static(state, request)
    return price_path_dependent(state.surface(request.basket), request,
                                state.basket_spot(request.basket), state.rate,
                                state.n_paths, state.seed, state.steps_per_year)


# --------------------------------------------------------------------------
# Greeks
# --------------------------------------------------------------------------

def _spot_pricer(state, request, engine, sticky="moneyness"):
    """Return ``V(B0)`` with all randomness frozen (common random numbers).

    ``sticky="moneyness"`` treats the calibrated laws as functions of
    strike / spot, so moving the spot rescales the frozen samples or paths.
    ``sticky="strike"`` holds the local vol surface fixed in absolute strike
    and re-simulates from the bumped spot (lvm engine only).
    """
    if sticky not in ("moneyness", "strike"):
        raise ValidationError(f"unknown sticky convention {sticky!r}")
    b0 = state.basket_spot(request.basket)
    r = state.rate
    df = math.exp(-r * request.maturity)
    if engine == "static":
        if sticky != "moneyness":
            raise ValidationError("the static engine supports sticky-moneyness only")
        if request.payoff in PATH_PAYOFFS:
            raise UnsupportedPayoff("static engine prices terminal payoffs only")
        b = state.basket_samples(request.maturity, request.basket)
        # scale to the exact forward so linear payoffs have exact sensitivities
        shape = b * (math.exp(r * request.maturity) / b.mean())

        def value(spot):
            pay = _terminal_payoff(request.payoff, shape * spot, request.strike)
            return request.notional * df * float(pay.mean())
        return value, b0

    surface = state.surface(request.basket)
    tg, dates = _monitoring(request, state.steps_per_year)
    normals = draw_normals(state.seed, state.n_paths, len(tg) - 1)
    pos = np.searchsorted(tg, dates)

    def simulate(spot):
        paths = simulate_paths(surface, spot, r, tg, state.n_paths, state.seed,
                               normals=normals, martingale_correction=True)
        return paths[:, pos]

    if sticky == "moneyness":
        base = simulate(b0) / b0

        def value(spot):
            pay = _path_payoff(request.payoff, base * spot, request.strike)
            return request.notional * df * float(pay.mean())
        return value, b0

    def value(spot):
        pay = _path_payoff(request.payoff, simulate(spot), request.strike)
        return request.notional * df * float(pay.mean())
    return value, b0


def greeks_spot(request, state, bump=1e-3, engine="lvm", sticky="moneyness"):
    """Delta (forward difference) and gamma (central difference) in basket spot.

    ``bump`` is relative to the basket spot.  Every revaluation uses the same
    random numbers; the model forward is pinned exactly, so a forward
    contract has delta 1 and gamma 0 up to rounding.  ``sticky`` picks what
    stays fixed when the spot moves (see :func:`_spot_pricer`).
    """
    if bump <= 0:
        raise ValidationError("bump must be positive")
    value, b0 = _spot_pricer(state, request, engine, sticky)
    eps = bump * b0
    v0, vu, vd = value(b0), value(b0 + eps), value(b0 - eps)
    delta = (vu - v0) / eps
    gamma = (vd - 2.0 * v0 + vu) / eps**2
    names = state.snapshot.names
    w = state.snapshot.weights
    cdeltas = {names[n]: float(w[n] * delta) for n in state.basket_indices(request.basket)}
    return GreeksReport(float(delta), float(gamma), cdeltas, {}, float(eps), float(v0), engine)


def bumped_law(snapshot, asset, maturity, bump, side="mid", beta_fixed=DEFAULT_BETA):
    """Law of ``asset`` after shifting its whole implied vol curve by ``bump``."""
    quotes = [OptionQuote(q.maturity, q.moneyness, q.side, q.implied_vol + bump)
              for q in snapshot.quotes_for(asset, maturity, side)]
    spot, fwd = snapshot.constituents[asset].spot, snapshot.forward(asset, maturity)
    params, _ = calibrate_sabr(quotes, spot, fwd, beta_fixed=beta_fixed, side=side)
    return extract_law(params, fwd, snapshot.rate, maturity)


def remap_constituent(state, assets, bump, laws=None, maturities=None):
    """New state with the columns of ``assets`` re-mapped under bumped laws.

    The stored uniforms are pushed through the bumped quantile function and
    placed in the stored permutation order; every other column is shared.
    ``maturities`` restricts the remap (other maturities are shared as is).

    Raises:
        StateError: if a matrix carries no uniforms or laws.
    """
    out = dict(state.matrices)
    for t, mat in state.matrices.items():
        if maturities is not None and t not in maturities:
            continue
        if mat.uniforms is None or mat.laws is None:
            raise StateError(f"matrix at T={t:g} has no stored uniforms/laws")
        new = mat
        for n in assets:
            if laws is not None:
                law = laws[(n, t)]
            else:
                law = bumped_law(state.snapshot, n, t, bump, state.side, state.beta_fixed)
            new = new.with_column_law(n, law)
        out[t] = new
    return state.with_matrices(out)


def vega_constituent(n, state, request, bump=0.01, engine="static"):
    """Sensitivity to constituent ``n``'s implied vol curve, per vol point.

    Forward difference.  ``engine="static"`` reprices on the re-mapped
    samples; ``"lvm"`` re-estimates the densities and the local vol surface
    and reprices on common random numbers.
    """
    return _vega(state, request, [n], bump, engine)


def vega_parallel(state, request, bump=0.01, engine="static"):
    """Sensitivity to a simultaneous shift of every constituent curve."""
    return _vega(state, request, list(range(state.snapshot.n_assets)), bump, engine)


def _vega(state, request, assets, bump, engine):
    # the static pricer only reads the request maturity
    mats = (request.maturity,) if engine == "static" else None
    if bump == 0:
        bumped = remap_constituent(state, assets, 0.0, laws={
            (n, t): state.matrices[t].laws[n] for n in assets for t in state.matrices},
            maturities=mats)
    else:
        bumped = remap_constituent(state, assets, bump, maturities=mats)
    v0 = _engine_value(state, request, engine)
    v1 = _engine_value(bumped, request, engine)
    if bump == 0:
        return v1 - v0
    return (v1 - v0) * 0.01 / bump


def _engine_value(state, request, engine):
    if engine == "static":
        return price_static(state, request).price
    value, b0 = _spot_pricer(state, request, "lvm", "strike")
    return value(b0)


def all_vegas(state, request, bump=0.01, engine="static"):
    names = state.snapshot.names
    return {names[n]: vega_constituent(n, state, request, bump, engine)
            for n in state.basket_indices(request.basket)}


# --------------------------------------------------------------------------
# external assets
# --------------------------------------------------------------------------

@dataclass(eq=False)
class ExtendedBasket:
    basket_samples: np.ndarray
    external_samples: dict


def extend_basket_external(matrix, donor, external_law, basket=None, external_weight=1.0,
                           eps=1e-12):
    """Add assets outside the index by recycling donor columns' dependence.

    Each donor column is mapped to uniforms through its own law and then
    through the external law's quantile, so the external asset inherits the
    donor's position in the copula.  Donors must lie outside ``basket`` and
    each donor may serve one external asset only.

    Args:
        matrix: rearranged SampleMatrix with laws.
        donor: donor column, or a sequence of donors.
        external_law: MarginalLaw, or a sequence matching ``donor``.
        basket: constituent indices kept in the basket (default: all but the
            donors).
        external_weight: weight(s) of the external asset(s).

    Raises:
        DonorInBasket: donor listed in the basket or used twice.
    """
    donors = [int(donor)] if np.isscalar(donor) else [int(d) for d in donor]
    ext_laws = [external_law] if np.isscalar(donor) else list(external_law)
    if len(ext_laws) != len(donors):
        raise ValidationError("one external law per donor required")
    if len(set(donors)) != len(donors):
        raise DonorInBasket("each donor column may be recycled once only")
    if basket is None:
        basket = [n for n in range(matrix.n_assets) if n not in donors]
    basket = sorted(set(int(b) for b in basket))
    clash = set(basket) & set(donors)
    if clash:
        raise DonorInBasket(f"donor(s) {sorted(clash)} are part of the basket")
    if matrix.laws is None:
        raise StateError("matrix carries no marginal laws")
    weights = np.broadcast_to(np.asarray(external_weight, dtype=float), (len(donors),))
    total = aggregate(matrix, basket) if basket else np.zeros(matrix.n_samples)
    ext = {}
    for d, law, w in zip(donors, ext_laws, weights):
        u = np.clip(matrix.laws[d].cdf(matrix.values[:, d]), eps, 1.0 - eps)
        s = law.quantile(u)
        ext[d] = s
        total = total + w * s
    return ExtendedBasket(total, ext)
