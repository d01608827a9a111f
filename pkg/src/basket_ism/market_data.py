"""Market snapshots: loading, validation, serialization and a synthetic generator.

File layout (CSV, one header row; the JSON form carries the same rows under
``"rows"`` next to ``"as_of"`` and ``"rate"``)::

    asset,maturity_yf,moneyness,side,implied_vol,spot,weight

Index rows use the asset name ``__INDEX__``; their ``spot`` column holds the
index level and ``weight`` is left empty.  ``rate`` and ``as_of`` are optional
trailing CSV columns repeated on every row.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArbitrageError, ConfigError, NumericalError, ParseError, ValidationError
from .rng import STAGE_SYNTH, substream
from .smile import DEFAULT_BETA, SabrParams, extract_law, implied_vol, sabr_implied_vol

INDEX_NAME = "__INDEX__"
SIDES = ("bid", "ask", "mid")
DEFAULT_MONEYNESS = (0.8, 0.85, 0.9, 0.95, 0.975, 1.0, 1.025, 1.05, 1.1, 1.15, 1.2)
DEFAULT_MATURITIES = (0.25, 0.5, 1.0, 1.25, 2.0)
CSV_COLUMNS = ("asset", "maturity_yf", "moneyness", "side", "implied_vol", "spot", "weight",
               "rate", "as_of")
WEIGHT_TOLERANCE = 1e-3


@dataclass(frozen=True, order=True)
class OptionQuote:
    maturity: float
    moneyness: float
    side: str
    implied_vol: float

    def __post_init__(self):
        if not self.maturity > 0:
            raise ValidationError(f"maturity must be positive, got {self.maturity}")
        if not self.moneyness > 0:
            raise ValidationError(f"moneyness must be positive, got {self.moneyness}")
        if not self.implied_vol > 0:
            raise ValidationError(f"implied vol must be positive, got {self.implied_vol}")
        if self.side not in SIDES:
            raise ValidationError(f"unknown quote side {self.side!r}")


@dataclass(frozen=True)
class ConstituentSpec:
    name: str
    spot: float
    weight: float
    quotes: tuple = ()

    def __post_init__(self):
        if not self.spot > 0:
            raise ValidationError(f"{self.name}: spot must be positive")
        if not self.weight > 0:
            raise ValidationError(f"{self.name}: weight must be positive")


@dataclass(frozen=True)
class MarketSnapshot:
    """Validated market inputs shared read-only by every stage."""

    as_of: str | None
    rate: float
    constituents: tuple
    index_quotes: tuple
    maturities: tuple
    index_spot: float
    _spots: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        mats = tuple(float(t) for t in self.maturities)
        if not mats:
            raise ValidationError("snapshot has no maturities")
        if any(b <= a for a, b in zip(mats, mats[1:])):
            raise ValidationError("maturities must be strictly increasing")
        object.__setattr__(self, "maturities", mats)
        for c in self.constituents:
            _check_grid(c.name, c.quotes, mats)
        _check_grid(INDEX_NAME, self.index_quotes, mats)
        object.__setattr__(self, "_spots", np.array([c.spot for c in self.constituents]))

    @property
    def n_assets(self):
        return len(self.constituents)

    @property
    def names(self):
        return [c.name for c in self.constituents]

    @property
    def spots(self):
        return self._spots.copy()

    @property
    def weights(self):
        return np.array([c.weight for c in self.constituents])

    def forward(self, asset, maturity):
        return self.constituents[asset].spot * math.exp(self.rate * maturity)

    def index_forward(self, maturity):
        return self.index_spot * math.exp(self.rate * maturity)

    def quotes_for(self, asset, maturity, side="mid"):
        qs = self.index_quotes if asset == INDEX_NAME else self.constituents[asset].quotes
        return [q for q in qs if q.maturity == maturity and q.side == side]

    def moneyness_grid(self, maturity=None, side="mid"):
        t = self.maturities[0] if maturity is None else maturity
        return sorted({q.moneyness for q in self.index_quotes if q.maturity == t and q.side == side})

    def with_constituent_quotes(self, asset, quotes):
        """Copy of the snapshot with one constituent's quotes replaced."""
        cons = list(self.constituents)
        c = cons[asset]
        cons[asset] = ConstituentSpec(c.name, c.spot, c.weight, tuple(sorted(quotes)))
        return MarketSnapshot(self.as_of, self.rate, tuple(cons), self.index_quotes,
                              self.maturities, self.index_spot)


def _check_grid(name, quotes, maturities):
    seen = set()
    for q in quotes:
        key = (q.maturity, q.moneyness, q.side)
        if key in seen:
            raise ValidationError(
                f"duplicate grid point for {name}: maturity {q.maturity:g}, "
                f"moneyness {q.moneyness:g}, side {q.side}"
            )
        seen.add(key)
    have = {q.maturity for q in quotes}
    for t in maturities:
        if t not in have:
            raise ValidationError(f"{name} has no quotes at maturity {t:g}")
    extra = have.difference(maturities)
    if extra:
        raise ValidationError(f"{name} quotes maturity {min(extra):g} outside the snapshot maturities")


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------

def _rows_to_snapshot(rows, as_of=None, rate=None):
    quotes = {}
    spots = {}
    weights = {}
    order = []
    rates = set() if rate is None else {float(rate)}
    as_ofs = set() if as_of is None else {as_of}
    for lineno, row in enumerate(rows, start=2):
        try:
            asset = row["asset"].strip()
            t = float(row["maturity_yf"])
            m = float(row["moneyness"])
            side = row["side"].strip()
            vol = float(row["implied_vol"])
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ParseError(f"malformed row {lineno}: {row!r}") from exc
        if not asset:
            raise ParseError(f"malformed row {lineno}: empty asset name")
        if not all(math.isfinite(v) for v in (t, m, vol)):
            raise ParseError(f"malformed row {lineno}: non-finite value")
        try:
            q = OptionQuote(t, m, side, vol)
        except ValidationError as exc:
            raise ValidationError(f"{asset} at maturity {t:g}: {exc}") from None
        if asset not in quotes:
            quotes[asset] = []
            order.append(asset)
        quotes[asset].append(q)
        for key, store in (("spot", spots), ("weight", weights)):
            raw = row.get(key)
            if raw not in (None, ""):
                try:
                    val = float(raw)
                except ValueError as exc:
                    raise ParseError(f"malformed {key} on row {lineno}") from exc
                if store.setdefault(asset, val) != val:
                    raise ValidationError(f"{asset}: inconsistent {key} values")
        if row.get("rate") not in (None, ""):
            rates.add(float(row["rate"]))
        if row.get("as_of") not in (None, ""):
            as_ofs.add(row["as_of"])
    if not quotes:
        raise ParseError("no quote rows found")
    if len(rates) > 1:
        raise ValidationError("more than one rate in snapshot")
    if len(as_ofs) > 1:
        raise ValidationError("more than one as_of date in snapshot")
    if INDEX_NAME not in quotes:
        raise ValidationError(f"snapshot has no {INDEX_NAME} quotes")
    maturities = tuple(sorted({q.maturity for q in quotes[INDEX_NAME]}))
    constituents = []
    # constituent order is by name, so row order in the file does not matter
    for asset in sorted(order):
        if asset == INDEX_NAME:
            continue
        if asset not in spots or asset not in weights:
            raise ValidationError(f"{asset}: missing spot or weight")
        constituents.append((asset, spots[asset], weights[asset], tuple(sorted(quotes[asset]))))
    if len(constituents) < 1:
        raise ValidationError("snapshot has no constituents")
    implied_spot = sum(s * w for _, s, w, _ in constituents)
    index_spot = spots.get(INDEX_NAME, implied_spot)
    ratio = index_spot / implied_spot
    if abs(ratio - 1.0) > WEIGHT_TOLERANCE:
        raise ValidationError(
            f"weighted constituent spots {implied_spot:.6g} miss index spot {index_spot:.6g} "
            f"by {abs(ratio - 1):.3%}"
        )
    if abs(ratio - 1.0) < 1e-12:
        ratio = 1.0
    specs = tuple(ConstituentSpec(n, s, w * ratio, q) for n, s, w, q in constituents)
    return MarketSnapshot(
        as_of=as_ofs.pop() if as_ofs else None,
        rate=rates.pop() if rates else 0.0,
        constituents=specs,
        index_quotes=tuple(sorted(quotes[INDEX_NAME])),
        maturities=maturities,
        index_spot=float(index_spot),
    )


def _snapshot_rows(snap):
    for c in snap.constituents:
        for q in c.quotes:
            yield {"asset": c.name, "maturity_yf": q.maturity, "moneyness": q.moneyness,
                   "side": q.side, "implied_vol": q.implied_vol, "spot": c.spot,
                   "weight": c.weight}
    for q in snap.index_quotes:
        yield {"asset": INDEX_NAME, "maturity_yf": q.maturity, "moneyness": q.moneyness,
               "side": q.side, "implied_vol": q.implied_vol, "spot": snap.index_spot,
               "weight": None}


def _infer_format(path, fmt):
    if fmt is not None:
        return fmt
    suffix = Path(path).suffix.lower()
    return "json" if suffix == ".json" else "csv"


def load_snapshot(path, format=None):
    """Read and validate a snapshot file.

    Raises:
        ParseError: missing, unreadable or malformed file.
        ValidationError: inconsistent market data (missing maturities,
            non-positive vols, duplicate grid points, weight mismatch).
    """
    fmt = _infer_format(path, format)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    if not text.strip():
        raise ParseError(f"{path} is empty")
    if fmt == "json":
        try:
            doc = json.loads(text)
            rows = doc["rows"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"{path}: not a snapshot document") from exc
        rows = [{k: ("" if v is None else str(v)) for k, v in r.items()} for r in rows]
        return _rows_to_snapshot(rows, doc.get("as_of"), doc.get("rate"))
    if fmt != "csv":
        raise ValueError(f"unknown format {fmt!r}")
    reader = csv.DictReader(io.StringIO(text))
    missing = {"asset", "maturity_yf", "moneyness", "side", "implied_vol"} - set(reader.fieldnames or ())
    if missing:
        raise ParseError(f"{path}: header lacks columns {sorted(missing)}")
    return _rows_to_snapshot(list(reader))


def dumps_snapshot(snap, format="csv"):
    if format == "json":
        doc = {"as_of": snap.as_of, "rate": snap.rate, "rows": list(_snapshot_rows(snap))}
        return json.dumps(doc, indent=1) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in _snapshot_rows(snap):
        w.writerow([r["asset"], repr(r["maturity_yf"]), repr(r["moneyness"]), r["side"],
                    repr(r["implied_vol"]), repr(r["spot"]),
                    "" if r["weight"] is None else repr(r["weight"]),
                    repr(snap.rate), snap.as_of or ""])
    return buf.getvalue()


def save_snapshot(snap, path, format=None):
    Path(path).write_text(dumps_snapshot(snap, _infer_format(path, format)))


# --------------------------------------------------------------------------
# Synthetic market
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SkewedFactorCopula:
    """One-factor Gaussian dependence whose loading depends on the factor's sign.

    Down-moves of the common factor use correlation ``rho_down``, up-moves
    ``rho_up``; ``rho_down > rho_up`` gives the stronger lower-tail
    dependence seen in equity indices.  Uniforms are produced by ranking, so
    marginals are exactly uniform whatever the mixture does to the factor
    scale.
    """

    rho_down: float = 0.7
    rho_up: float = 0.3

    def sample(self, rng, n_samples, n_assets):
        y = rng.standard_normal(n_samples)
        eps = rng.standard_normal((n_samples, n_assets))
        load = np.sqrt(np.where(y < 0, self.rho_down, self.rho_up))
        z = load[:, None] * y[:, None] + np.sqrt(1.0 - load**2)[:, None] * eps
        ranks = np.argsort(np.argsort(z, axis=0, kind="stable"), axis=0, kind="stable")
        return (ranks + 0.5) / n_samples


def default_smile_config(n_assets, seed, beta=DEFAULT_BETA):
    """Per-asset short-dated SABR parameters in the range of a liquid equity index."""
    rng = substream(seed, STAGE_SYNTH, 0)
    alpha = rng.uniform(0.43, 0.50, n_assets)
    rho = rng.uniform(-0.52, -0.28, n_assets)
    gamma = rng.uniform(1.2, 1.5, n_assets)
    return [SabrParams(float(a), beta, float(r), float(g)) for a, r, g in zip(alpha, rho, gamma)]


def smile_at(params, maturity, vov_decay=0.5, reference_maturity=0.25):
    """Scale vol-of-vol as ``(reference_maturity / maturity) ** vov_decay``."""
    g = params.gamma * (reference_maturity / maturity) ** vov_decay
    return SabrParams(params.alpha, params.beta, params.rho, g)


def generate_synthetic_market(n_assets, maturities=DEFAULT_MATURITIES, smile_config=None, seed=0,
                              *, spots=None, weights=0.066, rate=0.0,
                              moneyness=DEFAULT_MONEYNESS, vov_decay=0.5,
                              copula=SkewedFactorCopula(), n_reference=200_000,
                              as_of="2024-01-02"):
    """Build a snapshot with known constituent smiles and a jointly simulated index.

    Constituent quotes are the exact SABR vols of ``smile_config`` (one
    SabrParams per asset; vol-of-vol rescaled per maturity by ``vov_decay``).
    Index quotes are implied from a Monte Carlo of the constituents coupled
    through ``copula``, so an admissible dependence exists by construction.

    Raises:
        ConfigError: parameters giving negative variance or unusable densities.
    """
    if n_assets < 2:
        raise ConfigError("need at least two assets")
    maturities = tuple(float(t) for t in maturities)
    if not maturities:
        raise ConfigError("maturities must be non-empty")
    if smile_config is None:
        smile_config = default_smile_config(n_assets, seed)
    if len(smile_config) != n_assets:
        raise ConfigError("smile_config needs one entry per asset")
    if spots is None:
        spots = np.round(substream(seed, STAGE_SYNTH, 1).uniform(50.0, 450.0, n_assets), 2)
    spots = np.broadcast_to(np.asarray(spots, dtype=float), (n_assets,))
    w = np.broadcast_to(np.asarray(weights, dtype=float), (n_assets,))
    index_spot = float(spots @ w)
    mny = np.asarray(moneyness, dtype=float)

    quotes = [[] for _ in range(n_assets)]
    index_quotes = []
    for j, t in enumerate(maturities):
        df = math.exp(-rate * t)
        laws = []
        for n in range(n_assets):
            fwd = spots[n] / df
            try:
                p = smile_at(smile_config[n], t, vov_decay)
                vols = sabr_implied_vol(p, fwd, mny * spots[n], t)
                laws.append(extract_law(p, fwd, rate, t))
            except (ValueError, NumericalError, ArbitrageError) as exc:
                raise ConfigError(f"asset {n} at T={t:g}: {exc}") from exc
            quotes[n].extend(OptionQuote(t, float(m), "mid", float(v)) for m, v in zip(mny, vols))
        u = copula.sample(substream(seed, STAGE_SYNTH, 2, j), n_reference, n_assets)
        index = np.zeros(n_reference)
        for n in range(n_assets):
            index += w[n] * laws[n].quantile(u[:, n])
        fwd_i = index_spot / df
        index *= fwd_i / index.mean()
        for m in mny:
            k = m * index_spot
            if k < fwd_i:
                price, kind = df * np.maximum(k - index, 0.0).mean(), "put"
            else:
                price, kind = df * np.maximum(index - k, 0.0).mean(), "call"
            try:
                vol = implied_vol(price, fwd_i, k, t, df, kind)
            except NumericalError as exc:
                raise ConfigError(f"index quote at T={t:g}, m={m:g}: {exc}") from exc
            index_quotes.append(OptionQuote(t, float(m), "mid", float(vol)))

    cons = tuple(
        ConstituentSpec(f"A{n:02d}", float(spots[n]), float(w[n]), tuple(sorted(quotes[n])))
        for n in range(n_assets)
    )
    return MarketSnapshot(as_of, float(rate), cons, tuple(sorted(index_quotes)), maturities,
                          index_spot)
