"""End-to-end orchestration: config, per-maturity pipeline, report and rendering.

Randomness flows from one master seed.  Every stage draws from
``substream(seed, STAGE_*, maturity_index, ...)``, so any single stage can
be rerun in isolation and the results do not depend on the worker count.
"""
from __future__ import annotations

import configparser
import csv
import io
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import BasketIsmError, ConfigError, IoError, NumericalError, StageError
from .ism import IsmConfig, build_target, run_ism
from .localvol import write_densities_csv, write_surface_csv
from .market_data import INDEX_NAME, generate_synthetic_market, load_snapshot, save_snapshot
from .pricing import EngineState, PricingRequest, all_vegas, greeks_spot, vega_parallel
from .sampling import draw_independent, write_matrix_csv
from .smile import (DEFAULT_BETA, CalibratedMarket, calibrate_asset, implied_vol,
                    sabr_implied_vol, write_params_csv)

ENV_OUTPUT_DIR = "BASKET_ISM_OUT"
DEFAULT_OUTPUT_DIR = "basket_ism_out"
NOT_COMPUTED = "not computed"

# exit status per failing stage; 1 is left for unexpected errors, 2 for usage
EXIT_CODES = {
    "config": 3,
    "input": 4,
    "synth": 10,
    "calibrate": 11,
    "rearrange": 12,
    "localvol": 13,
    "repricing": 14,
    "price": 14,
    "greeks": 15,
    "oracle": 16,
    "report": 17,
}

TIMING_KEYS = ("calibrate_constituents", "calibrate_index", "sampling", "target", "arranging")

# INI section for every RunConfig field
_SECTIONS = {
    "run": ("snapshot_path", "output_dir", "seed", "workers", "write_matrices"),
    "synthetic": ("n_assets", "synth_seed", "n_reference"),
    "sampling": ("n_samples",),
    "ism": ("bins", "iterations", "stop_fraction", "rounding"),
    "calibration": ("beta_fixed", "side", "rmse_cap"),
    "localvol": ("bandwidth_factor", "max_floored", "n_paths", "steps_per_year"),
    "greeks": ("greeks", "vegas", "greeks_maturity", "greeks_moneyness", "greeks_engine",
               "greeks_sticky", "delta_bump", "vega_bump"),
}


def default_output_dir():
    return os.environ.get(ENV_OUTPUT_DIR, DEFAULT_OUTPUT_DIR)


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a pipeline run.

    Defaults are the desk setup: 20'000 samples, 1'400 bins, 10 iterations
    and SABR with beta fixed at 0.9.  ``snapshot_path=None`` builds a
    synthetic market with ``n_assets`` constituents instead of loading one.
    """

    snapshot_path: str | None = None
    output_dir: str = field(default_factory=default_output_dir)
    seed: int = 0
    workers: int = 1
    write_matrices: bool = False
    n_assets: int = 30
    synth_seed: int = 1
    n_reference: int = 200_000
    n_samples: int = 20_000
    bins: int = 1400
    iterations: int = 10
    stop_fraction: float = 1e-3
    rounding: str = "bin"
    beta_fixed: float = DEFAULT_BETA
    side: str = "mid"
    rmse_cap: float = 0.02
    bandwidth_factor: float = 1.0
    max_floored: float = 0.10
    n_paths: int = 100_000
    steps_per_year: int = 100
    greeks: bool = True
    vegas: bool = True
    greeks_maturity: float = 0.25
    greeks_moneyness: tuple = (0.8, 0.9, 1.0, 1.1, 1.2)
    greeks_engine: str = "lvm"
    greeks_sticky: str = "moneyness"
    delta_bump: float = 1e-3
    vega_bump: float = 0.01

    def __post_init__(self):
        counts = ("workers", "n_assets", "n_reference", "n_samples", "bins", "iterations",
                  "n_paths", "steps_per_year")
        for name in counts:
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.bins > self.n_samples:
            raise ConfigError(f"bins ({self.bins}) cannot exceed n_samples ({self.n_samples})")
        if not 0.0 < self.beta_fixed <= 1.0:
            raise ConfigError("beta_fixed must lie in (0, 1]")
        if not 0.0 <= self.max_floored <= 1.0:
            raise ConfigError("max_floored must lie in [0, 1]")
        if self.delta_bump <= 0 or self.vega_bump <= 0:
            raise ConfigError("bump sizes must be positive")
        if self.greeks_engine not in ("static", "lvm"):
            raise ConfigError(f"unknown greeks engine {self.greeks_engine!r}")
        if self.greeks_sticky not in ("moneyness", "strike"):
            raise ConfigError(f"unknown sticky convention {self.greeks_sticky!r}")
        object.__setattr__(self, "greeks_moneyness",
                           tuple(float(m) for m in self.greeks_moneyness))
        # the ISM settings are checked by IsmConfig itself
        self.ism_config()

    def ism_config(self):
        return IsmConfig(bins=self.bins, max_iterations=self.iterations,
                         stop_fraction=self.stop_fraction, seed=self.seed,
                         rounding=self.rounding)

    def ensure_output_dir(self):
        """Create the output directory and check it is writable.

        Raises:
            ConfigError: if the directory cannot be created or written.
        """
        path = Path(self.output_dir)
        try:
            path.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {path}: {exc}") from exc
        if not os.access(path, os.W_OK):
            raise ConfigError(f"output directory {path} is not writable")
        return path

    def to_dict(self):
        d = asdict(self)
        d["greeks_moneyness"] = list(self.greeks_moneyness)
        return d

    def to_ini(self):
        cp = configparser.ConfigParser()
        d = self.to_dict()
        for section, keys in _SECTIONS.items():
            cp[section] = {}
            for k in keys:
                v = d[k]
                if v is None:
                    v = ""
                elif isinstance(v, list):
                    v = ", ".join(repr(x) for x in v)
                elif isinstance(v, float):
                    v = repr(v)
                cp[section][k] = str(v)
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, path_or_text, **overrides):
        """Read an INI file (or INI text).  Missing keys keep their defaults.

        Raises:
            ConfigError: unknown keys or values of the wrong type.
        """
        cp = configparser.ConfigParser()
        text = str(path_or_text)
        try:
            if "\n" in text or text.lstrip().startswith("["):
                cp.read_string(text)
            elif Path(text).is_file():
                cp.read(text)
            else:
                raise ConfigError(f"config file {text} not found")
        except configparser.Error as exc:
            raise ConfigError(f"unreadable config: {exc}") from exc
        types = {f.name: f.type for f in fields(cls)}
        known = {k for keys in _SECTIONS.values() for k in keys}
        kwargs = {}
        for section in cp.sections():
            for key, raw in cp[section].items():
                if key not in known:
                    raise ConfigError(f"unknown config key [{section}] {key}")
                kwargs[key] = _parse_value(key, raw, types[key])
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)


def _parse_value(key, raw, type_name):
    raw = raw.strip()
    try:
        if key == "snapshot_path":
            return raw or None
        if key == "greeks_moneyness":
            return tuple(float(x) for x in raw.replace(",", " ").split())
        if type_name == "bool":
            return raw.lower() in ("1", "true", "yes", "on")
        if type_name == "int":
            return int(float(raw))
        if type_name == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

@dataclass
class RunReport:
    """Outcome of one pipeline run.

    ``timings`` holds one row per maturity with the seconds spent in each of
    ``TIMING_KEYS``; ``stage_timings`` covers the stages that run once.
    ``repricing`` has one row per maturity and quoted moneyness.  ``greeks``
    is ``None`` when Greeks were not requested.
    """

    config: dict
    discrete_errors: list
    timings: list
    stage_timings: dict
    total_wall: float
    repricing: list
    greeks: dict | None = None

    def discrete_error_by_maturity(self):
        return {r["maturity"]: r["discrete_error"] for r in self.discrete_errors}

    def max_repricing_error(self, lo=0.0, hi=math.inf):
        errs = [abs(r["error"]) for r in self.repricing
                if r["error"] is not None and lo <= r["moneyness"] <= hi]
        return max(errs) if errs else None

    def to_dict(self):
        return {
            "config": self.config,
            "discrete_errors": self.discrete_errors,
            "timings": self.timings,
            "stage_timings": self.stage_timings,
            "total_wall": self.total_wall,
            "repricing": self.repricing,
            "greeks": self.greeks,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, d):
        return cls(d["config"], d["discrete_errors"], d["timings"], d["stage_timings"],
                   d["total_wall"], d["repricing"], d.get("greeks"))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _finite(x):
    x = float(x)
    return x if math.isfinite(x) else None


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def _stage(name, maturity=None):
    """Context manager turning package errors into StageError."""
    class _Guard:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and isinstance(exc, BasketIsmError) and not isinstance(exc, StageError):
                raise StageError(name, str(exc), maturity) from exc
            return False
    return _Guard()


def load_or_synthesize(config):
    """The snapshot named by the config, or a synthetic one."""
    if config.snapshot_path:
        with _stage("input"):
            return load_snapshot(config.snapshot_path)
    with _stage("synth"):
        return generate_synthetic_market(config.n_assets, seed=config.synth_seed,
                                         n_reference=config.n_reference)


def calibrate_and_rearrange(snapshot, config):
    """Per-maturity calibration, sampling and ISM, scheduled over ``config.workers``.

    Returns:
        ``(CalibratedMarket, {maturity: IsmResult}, {maturity: timing dict})``.
    """
    jobs = list(enumerate(snapshot.maturities))

    def one(job):
        j, t = job
        return _timed_job(snapshot, config, j, t)

    if config.workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            outs = list(pool.map(one, jobs))
    else:
        outs = [one(job) for job in jobs]
    mats = tuple(snapshot.maturities)
    cal = CalibratedMarket(
        mats,
        {t: [c[0] for c in o[0]] for t, o in zip(mats, outs)},
        {t: o[1][0] for t, o in zip(mats, outs)},
        {t: [c[2] for c in o[0]] for t, o in zip(mats, outs)},
        {t: o[1][2] for t, o in zip(mats, outs)},
        {t: [c[1] for c in o[0]] for t, o in zip(mats, outs)},
        {t: o[1][1] for t, o in zip(mats, outs)},
    )
    results = {t: o[2] for t, o in zip(mats, outs)}
    timings = {t: o[3] for t, o in zip(mats, outs)}
    return cal, results, timings


def _timed_job(snapshot, config, j, t):
    """Calibration, sampling, target and ISM for maturity ``t`` (index ``j``), timed per step."""
    timing = {}
    clock = time.perf_counter()
    with _stage("calibrate", t):
        cons = [calibrate_asset(snapshot, n, t, config.side, config.rmse_cap,
                                beta_fixed=config.beta_fixed) for n in range(snapshot.n_assets)]
        timing["calibrate_constituents"] = time.perf_counter() - clock
        clock = time.perf_counter()
        index = calibrate_asset(snapshot, INDEX_NAME, t, config.side, config.rmse_cap,
                                beta_fixed=config.beta_fixed)
        timing["calibrate_index"] = time.perf_counter() - clock
    clock = time.perf_counter()
    with _stage("rearrange", t):
        mat = draw_independent([c[2] for c in cons], config.n_samples, config.seed,
                               weights=snapshot.weights, stream_key=(j,))
        timing["sampling"] = time.perf_counter() - clock
        clock = time.perf_counter()
        target = build_target(index[2], config.n_samples, config.bins, rounding=config.rounding)
        timing["target"] = time.perf_counter() - clock
        clock = time.perf_counter()
        result = run_ism(mat, target, config.ism_config(), stream_key=(j,))
        timing["arranging"] = time.perf_counter() - clock
    return cons, index, result, timing


def repricing_table(snapshot, calibrated, results):
    """Market vs model implied vols of the index at every quoted moneyness.

    The model price is the static sample price of the out-of-the-money
    option; ``fit_vol`` is the calibrated index smile at the same strike.
    """
    rows = []
    s0 = snapshot.index_spot
    for t in snapshot.maturities:
        basket = results[t].matrix.index_vector()
        fwd = snapshot.index_forward(t)
        df = math.exp(-snapshot.rate * t)
        for q in sorted(snapshot.quotes_for(INDEX_NAME, t), key=lambda q: q.moneyness):
            k = q.moneyness * s0
            kind = "put" if k < fwd else "call"
            pay = np.maximum(k - basket, 0.0) if kind == "put" else np.maximum(basket - k, 0.0)
            try:
                model = implied_vol(df * float(pay.mean()), fwd, k, t, df, kind)
            except NumericalError:
                model = float("nan")
            fit = float(sabr_implied_vol(calibrated.index_params[t], fwd, k, t))
            rows.append({
                "maturity": t,
                "moneyness": q.moneyness,
                "strike": k,
                "market_vol": q.implied_vol,
                "fit_vol": _finite(fit),
                "model_vol": _finite(model),
                "error": _finite(model - q.implied_vol),
            })
    return rows


def greeks_table(state, config):
    """Delta/gamma of index calls across strikes plus constituent vegas at the money."""
    t = config.greeks_maturity
    if t not in state.matrices:
        raise ConfigError(f"greeks maturity {t:g} is not a quoted maturity {state.maturities}")
    s0 = state.basket_spot()
    rows = []
    for m in config.greeks_moneyness:
        req = PricingRequest("european-call", m * s0, t)
        g = greeks_spot(req, state, config.delta_bump, config.greeks_engine,
                        config.greeks_sticky)
        rows.append({"moneyness": m, "strike": m * s0, "price": g.price, "delta": g.delta,
                     "gamma": g.gamma})
    out = {"maturity": t, "engine": config.greeks_engine, "sticky": config.greeks_sticky,
           "delta_bump": config.delta_bump,
           "rows": rows, "vega_bump": config.vega_bump, "vegas": None, "parallel_vega": None}
    if config.vegas:
        atm = PricingRequest("european-call", s0, t)
        vegas = all_vegas(state, atm, config.vega_bump, "static")
        out["vegas"] = [{"asset": k, "vega": float(v)} for k, v in vegas.items()]
        out["parallel_vega"] = float(vega_parallel(state, atm, config.vega_bump, "static"))
    return out


def run_pipeline(config, snapshot=None):
    """Run every stage and write the report files into ``config.output_dir``.

    Args:
        config: RunConfig.
        snapshot: optional MarketSnapshot overriding ``config.snapshot_path``.

    Returns:
        RunReport.

    Raises:
        ConfigError: invalid config or unwritable output directory.
        StageError: tagged with the failing stage and, where relevant, maturity.
    """
    wall = time.perf_counter()
    out = config.ensure_output_dir()
    stage_timings = {}
    clock = time.perf_counter()
    if snapshot is None:
        snapshot = load_or_synthesize(config)
    stage_timings["input"] = time.perf_counter() - clock
    with _stage("report"):
        _write(out / "snapshot.csv", lambda p: save_snapshot(snapshot, p))

    cal, results, timings = calibrate_and_rearrange(snapshot, config)
    with _stage("report"):
        _write(out / "params.csv", lambda p: write_params_csv(cal.params_rows(snapshot.names), p))
        _write(out / "ism_trace.jsonl",
               lambda p: Path(p).write_text("".join(
                   json.dumps({"maturity": t, **json.loads(line)}) + "\n"
                   for t in snapshot.maturities
                   for line in results[t].trace_lines().splitlines())))
        if config.write_matrices:
            for t in snapshot.maturities:
                _write(out / f"matrix_T{t!r}.csv",
                       lambda p, t=t: write_matrix_csv(results[t].matrix, p, snapshot.names))

    clock = time.perf_counter()
    with _stage("localvol"):
        state = EngineState(snapshot, {t: r.matrix for t, r in results.items()},
                            n_paths=config.n_paths, steps_per_year=config.steps_per_year,
                            seed=config.seed, bandwidth_factor=config.bandwidth_factor,
                            beta_fixed=config.beta_fixed, side=config.side,
                            max_floored=config.max_floored)
        surface = state.surface()
        densities = state.densities()
    stage_timings["localvol"] = time.perf_counter() - clock
    with _stage("report"):
        _write(out / "surface.csv", lambda p: write_surface_csv(surface, p))
        _write(out / "densities.csv", lambda p: write_densities_csv(densities, p))

    clock = time.perf_counter()
    with _stage("repricing"):
        repricing = repricing_table(snapshot, cal, results)
    stage_timings["repricing"] = time.perf_counter() - clock

    greeks = None
    if config.greeks:
        clock = time.perf_counter()
        with _stage("greeks", config.greeks_maturity):
            greeks = greeks_table(state, config)
        stage_timings["greeks"] = time.perf_counter() - clock

    report = RunReport(
        config=config.to_dict(),
        discrete_errors=[{"maturity": t, "discrete_error": results[t].discrete_error,
                          "iterations": results[t].iterations_used}
                         for t in snapshot.maturities],
        timings=[{"maturity": t, **{k: timings[t][k] for k in TIMING_KEYS},
                  "total": sum(timings[t][k] for k in TIMING_KEYS)}
                 for t in snapshot.maturities],
        stage_timings=stage_timings,
        total_wall=0.0,
        repricing=repricing,
        greeks=greeks,
    )
    report.total_wall = time.perf_counter() - wall
    with _stage("report"):
        for fmt in ("json", "markdown", "csv"):
            report_render(report, fmt, out)
    return report


def _write(path, writer):
    try:
        writer(path)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------

def _fmt(x, digits=6):
    if x is None:
        return "n/a"
    if isinstance(x, float):
        return f"{x:.{digits}g}"
    return str(x)


def render_markdown(report):
    lines = ["# Basket ISM run report", ""]
    cfg = report.config
    lines += [f"M = {cfg['n_samples']}, K = {cfg['bins']}, iterations = {cfg['iterations']}, "
              f"seed = {cfg['seed']}, beta = {cfg['beta_fixed']}", ""]
    lines += ["## Discrete error", "", "| maturity | discrete error | iterations |",
              "|---|---|---|"]
    for r in report.discrete_errors:
        lines.append(f"| {_fmt(r['maturity'])} | {100 * r['discrete_error']:.3f}% | "
                     f"{r['iterations']} |")
    lines += ["", "## Timings (s)", "",
              "| maturity | " + " | ".join(TIMING_KEYS) + " | total |",
              "|---" * (len(TIMING_KEYS) + 2) + "|"]
    for r in report.timings:
        lines.append(f"| {_fmt(r['maturity'])} | "
                     + " | ".join(f"{r[k]:.3f}" for k in TIMING_KEYS) + f" | {r['total']:.3f} |")
    lines.append("")
    for k in sorted(report.stage_timings):
        lines.append(f"- {k}: {report.stage_timings[k]:.3f} s")
    lines += [f"- total wall time: {report.total_wall:.3f} s", ""]
    lines += ["## Market vs model implied vol", ""]
    for t in sorted({r["maturity"] for r in report.repricing}):
        lines += [f"### T = {_fmt(t)}", "",
                  "| moneyness | market | fit | model | model - market |", "|---|---|---|---|---|"]
        for r in (r for r in report.repricing if r["maturity"] == t):
            err = "n/a" if r["error"] is None else f"{100 * r['error']:+.3f}"
            model = "n/a" if r["model_vol"] is None else f"{100 * r['model_vol']:.3f}"
            fit = "n/a" if r["fit_vol"] is None else f"{100 * r['fit_vol']:.3f}"
            lines.append(f"| {_fmt(r['moneyness'])} | {100 * r['market_vol']:.3f} | {fit} | "
                         f"{model} | {err} |")
        lines.append("")
    lines += ["## Greeks", ""]
    g = report.greeks
    if g is None:
        lines += [NOT_COMPUTED, ""]
    else:
        lines += [f"European calls at T = {_fmt(g['maturity'])}, engine {g['engine']}, "
                  f"sticky {g['sticky']}, relative spot bump {_fmt(g['delta_bump'])}", "",
                  "| strike / ATM | price | delta | gamma |", "|---|---|---|---|"]
        for r in g["rows"]:
            lines.append(f"| {_fmt(r['moneyness'])} | {_fmt(r['price'])} | "
                         f"{_fmt(r['delta'], 4)} | {_fmt(r['gamma'], 3)} |")
        lines.append("")
        if g["vegas"] is None:
            lines += ["Vegas: " + NOT_COMPUTED, ""]
        else:
            lines += [f"ATM vega per vol point (bump {_fmt(g['vega_bump'])})", "",
                      "| constituent | vega |", "|---|---|"]
            lines += [f"| {r['asset']} | {_fmt(r['vega'], 4)} |" for r in g["vegas"]]
            lines += [f"| parallel | {_fmt(g['parallel_vega'], 4)} |", ""]
    return "\n".join(lines) + "\n"


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if r.get(h) is None else (repr(r[h]) if isinstance(r[h], float) else r[h])
                    for h in header])
    return buf.getvalue()


def render_csv(report):
    """File name -> CSV text for each report table."""
    files = {
        "discrete_errors.csv": _csv_text(["maturity", "discrete_error", "iterations"],
                                         report.discrete_errors),
        "timings.csv": _csv_text(["maturity", *TIMING_KEYS, "total"], report.timings),
        "repricing.csv": _csv_text(["maturity", "moneyness", "strike", "market_vol", "fit_vol",
                                    "model_vol", "error"], report.repricing),
    }
    g = report.greeks
    if g is None:
        files["greeks.csv"] = f"# {NOT_COMPUTED}\n"
    else:
        files["greeks.csv"] = _csv_text(["moneyness", "strike", "price", "delta", "gamma"],
                                        g["rows"])
        if g["vegas"] is None:
            files["vegas.csv"] = f"# {NOT_COMPUTED}\n"
        else:
            rows = g["vegas"] + [{"asset": "parallel", "vega": g["parallel_vega"]}]
            files["vegas.csv"] = _csv_text(["asset", "vega"], rows)
    return files


def report_render(report, format, out_dir):
    """Write the report in ``format`` (csv, json or markdown) under ``out_dir``.

    Returns:
        list of written paths.

    Raises:
        IoError: if a file cannot be written.
        ConfigError: unknown format.
    """
    out = Path(out_dir)
    if format == "json":
        files = {"report.json": report.to_json()}
    elif format == "markdown":
        files = {"report.md": render_markdown(report)}
    elif format == "csv":
        files = render_csv(report)
    else:
        raise ConfigError(f"unknown report format {format!r}")
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, text in files.items():
            (out / name).write_text(text)
            written.append(out / name)
    except OSError as exc:
        raise IoError(f"cannot write report into {out}: {exc}") from exc
    return written
