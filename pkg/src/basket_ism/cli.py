"""Command-line front end.

Every subcommand reads and writes the file formats of the underlying
modules, with conventional names inside one output directory (``--out``,
default ``$BASKET_ISM_OUT`` or ``./basket_ism_out``):

``snapshot.csv``, ``params.csv``, ``matrix_T<maturity>.csv``,
``ism_trace.jsonl``, ``surface.csv``, ``densities.csv``, ``report.*``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np

from .errors import BasketIsmError, ConfigError, StageError
from .ism import build_target, run_ism
from .localvol import write_densities_csv, write_surface_csv
from .market_data import INDEX_NAME, generate_synthetic_market, load_snapshot, save_snapshot
from .pipeline import (EXIT_CODES, RunConfig, RunReport, default_output_dir, report_render,
                       run_pipeline)
from .pricing import EngineState, PricingRequest, greeks_spot, price, vega_constituent
from .sampling import (SampleMatrix, draw_independent, empirical_cdf, read_matrix_csv,
                       write_matrix_csv)
from .smile import (calibrate_snapshot, extract_law, read_params_csv, write_params_csv)


log = logging.getLogger("basket_ism")


_MATRIX_RE = re.compile(r"matrix_T(.+)\.csv$")


def _out_dir(args):
    out = Path(args.out or default_output_dir())
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args, **overrides):
    if getattr(args, "config", None):
        return RunConfig.from_ini(args.config, **overrides)
    return RunConfig(**{k: v for k, v in overrides.items() if v is not None})


def _snapshot(args, out):
    path = args.snapshot or out / "snapshot.csv"
    try:
        return load_snapshot(path)
    except BasketIsmError as exc:
        raise StageError("input", str(exc)) from exc


def _laws_from_params(snapshot, rows):
    """Constituent and index laws per maturity from a params file."""
    names = snapshot.names
    cons = {t: [None] * snapshot.n_assets for t in snapshot.maturities}
    index = {}
    for asset, t, p, _ in rows:
        if asset == INDEX_NAME:
            index[t] = extract_law(p, snapshot.index_forward(t), snapshot.rate, t)
        else:
            n = names.index(asset)
            cons[t][n] = extract_law(p, snapshot.forward(n, t), snapshot.rate, t)
    missing = [t for t in snapshot.maturities if t not in index or None in cons[t]]
    if missing:
        raise ConfigError(f"params file lacks entries for maturities {missing}")
    return cons, index


def _load_laws(snapshot, out, params_path=None):
    path = Path(params_path) if params_path else out / "params.csv"
    if path.is_file():
        return _laws_from_params(snapshot, read_params_csv(path))
    cal = calibrate_snapshot(snapshot)
    return cal.constituent_laws, cal.index_laws


def _load_matrices(snapshot, directory, laws=None):
    mats = {}
    for p in sorted(Path(directory).glob("matrix_T*.csv")):
        t = float(_MATRIX_RE.search(p.name).group(1))
        values, uniforms, names = read_matrix_csv(p)
        if names != snapshot.names:
            raise ConfigError(f"{p.name}: asset columns do not match the snapshot")
        mats[t] = SampleMatrix.from_values(values, snapshot.weights, t, uniforms,
                                           None if laws is None else laws.get(t))
    if not mats:
        raise ConfigError(f"no matrix_T*.csv files in {directory}")
    return mats


def _state(args, snapshot, out, with_laws=False):
    laws = None
    if with_laws:
        laws, _ = _load_laws(snapshot, out, getattr(args, "params", None))
    mats = _load_matrices(snapshot, args.matrices or out, laws)
    return EngineState(snapshot, mats, n_paths=args.paths, steps_per_year=args.steps_per_year,
                       seed=args.seed)


def _request(args, state):
    basket = None if not args.basket else tuple(int(x) for x in args.basket.split(","))
    strike = args.strike if args.strike is not None else args.moneyness * state.basket_spot(basket)
    return PricingRequest(args.payoff, strike, args.maturity, basket)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_synth(args):
    out = _out_dir(args)
    try:
        maturities = tuple(float(x) for x in args.maturities.split(","))
        snap = generate_synthetic_market(args.assets, maturities, seed=args.seed,
                                         n_reference=args.n_reference)
    except BasketIsmError as exc:
        raise StageError("synth", str(exc)) from exc
    path = Path(args.output) if args.output else out / "snapshot.csv"
    save_snapshot(snap, path)
    print(path)


def cmd_calibrate(args):
    out = _out_dir(args)
    snap = _snapshot(args, out)
    try:
        cal = calibrate_snapshot(snap, side=args.side, beta_fixed=args.beta)
    except BasketIsmError as exc:
        raise StageError("calibrate", str(exc)) from exc
    path = out / "params.csv"
    write_params_csv(cal.params_rows(snap.names), path)
    print(path)


def cmd_rearrange(args):
    out = _out_dir(args)
    cfg = _config(args, n_samples=args.samples, bins=args.bins, iterations=args.iterations,
                  seed=args.seed, output_dir=str(out))
    snap = _snapshot(args, out)
    cons, index = _load_laws(snap, out, args.params)
    trace = []
    for j, t in enumerate(snap.maturities):
        try:
            mat = draw_independent(cons[t], cfg.n_samples, cfg.seed, snap.weights, (j,))
            target = build_target(index[t], cfg.n_samples, cfg.bins, rounding=cfg.rounding)
            res = run_ism(mat, target, cfg.ism_config(), stream_key=(j,))
        except BasketIsmError as exc:
            raise StageError("rearrange", str(exc), t) from exc
        write_matrix_csv(res.matrix, out / f"matrix_T{t!r}.csv", snap.names)
        trace += [json.dumps({"maturity": t, **json.loads(line)})
                  for line in res.trace_lines().splitlines()]
        print(f"T={t:g} discrete_error={res.discrete_error:.6f} iterations={res.iterations_used}")
    (out / "ism_trace.jsonl").write_text("".join(line + "\n" for line in trace))


def cmd_localvol(args):
    out = _out_dir(args)
    snap = _snapshot(args, out)
    state = _state(args, snap, out)
    try:
        surface = state.surface()
        densities = state.densities()
    except BasketIsmError as exc:
        raise StageError("localvol", str(exc)) from exc
    write_surface_csv(surface, out / "surface.csv")
    write_densities_csv(densities, out / "densities.csv")
    print(out / "surface.csv")


def cmd_price(args):
    out = _out_dir(args)
    snap = _snapshot(args, out)
    state = _state(args, snap, out)
    try:
        req = _request(args, state)
        res = price(state, req, args.engine)
    except BasketIsmError as exc:
        raise StageError("price", str(exc), args.maturity) from exc
    print(json.dumps({"payoff": req.payoff, "strike": req.strike, "maturity": req.maturity,
                      "price": res.price, "stderr": res.stderr}))


def cmd_greeks(args):
    out = _out_dir(args)
    snap = _snapshot(args, out)
    state = _state(args, snap, out, with_laws=args.vega)
    try:
        req = _request(args, state)
        g = greeks_spot(req, state, args.bump, args.engine, args.sticky)
        doc = {"price": g.price, "delta": g.delta, "gamma": g.gamma,
               "constituent_deltas": g.constituent_deltas, "engine": g.engine}
        if args.vega:
            names = snap.names
            doc["vegas"] = {names[n]: vega_constituent(n, state, req, args.vega_bump)
                            for n in state.basket_indices(req.basket)}
    except BasketIsmError as exc:
        raise StageError("greeks", str(exc), args.maturity) from exc
    print(json.dumps(doc, indent=2))


def _read_tiny(path):
    """Values and names from a ``matrix_T*.csv`` file or a CSV with one column per asset."""
    try:
        with open(path, newline="") as fh:
            header = next(csv.reader(fh), None)
        if not header:
            raise ValueError("file is empty")
        if header[:2] == ["row", "asset"]:
            values, _, names = read_matrix_csv(path)
            return values, names
        return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2), header
    except (OSError, ValueError, KeyError) as exc:
        raise StageError("input", f"cannot read {path}: {exc}") from exc


def _enumeration_inputs(args):
    """Sample values, asset names and index reference samples for ``oracle enumerate``."""
    if not args.file:
        raise ConfigError("oracle enumerate needs --file")
    values, names = _read_tiny(args.file)
    if not args.target:
        # without reference samples the target is the comonotone sum of the columns
        return values, names, np.sort(values, axis=0).sum(axis=1)
    try:
        return values, names, np.loadtxt(args.target, delimiter=",", skiprows=1, ndmin=1)
    except (OSError, ValueError) as exc:
        raise StageError("input", f"cannot read {args.target}: {exc}") from exc


def _enumerate(values, names, reference):
    from . import oracle
    res = oracle.brute_force_rearrange(SampleMatrix.from_values(values), empirical_cdf(reference))
    return {"assets": list(names), "arrangements_tested": res.arrangements_tested,
            "best_error": res.best_error, "best_matrix": res.best_matrix.values.tolist()}


def cmd_oracle(args):
    from . import oracle
    inputs = _enumeration_inputs(args) if args.check == "enumerate" else None
    try:
        if args.check == "toy":
            doc = oracle.toy_example_summary(seeds=range(args.seeds))
        elif args.check == "lemma1":
            sizes = tuple(int(x) for x in args.M.split(","))
            curve = oracle.verify_lemma1(sample_sizes=sizes, trials=args.trials, seed=args.seed)
            print("M,mean_error,std_error")
            for m, e, sd in zip(curve.sample_sizes, curve.mean_errors, curve.std_errors):
                print(f"{m},{e!r},{sd!r}")
            return
        elif args.check == "enumerate":
            doc = _enumerate(*inputs)
        elif args.check == "underdetermination":
            doc = oracle.demo_underdetermination(seed=args.seed).to_dict()
        else:
            doc = oracle.tiny_instance_summary(n_instances=args.instances, seed=args.seed)
    except BasketIsmError as exc:
        raise StageError("oracle", str(exc)) from exc
    print(json.dumps(doc, indent=2, default=float))


def cmd_report(args):
    out = _out_dir(args)
    src = Path(args.input) if args.input else out / "report.json"
    try:
        report = RunReport.from_json(src.read_text())
    except (OSError, ValueError, KeyError) as exc:
        raise StageError("report", f"cannot read {src}: {exc}") from exc
    for fmt in args.format:
        for p in report_render(report, fmt, out):
            print(p)


def cmd_run(args):
    out = args.out or None
    cfg = _config(args, output_dir=out, seed=args.seed, workers=args.workers,
                  snapshot_path=args.snapshot)
    report = run_pipeline(cfg)
    for r in report.discrete_errors:
        print(f"T={r['maturity']:g} discrete_error={r['discrete_error']:.6f}")
    print(f"total wall time {report.total_wall:.2f} s; report in {cfg.output_dir}")


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _add_engine_args(p, payoff=True):
    p.add_argument("--snapshot", help="snapshot file (default OUT/snapshot.csv)")
    p.add_argument("--matrices", help="directory holding matrix_T*.csv (default OUT)")
    if payoff:
        p.add_argument("--payoff", default="european-call")
    p.add_argument("--strike", type=float, help="absolute strike")
    p.add_argument("--moneyness", type=float, default=1.0, help="strike / basket spot")
    p.add_argument("--maturity", type=float, required=True)
    p.add_argument("--basket", help="comma-separated constituent indices (default: index)")
    p.add_argument("--paths", type=int, default=100_000)
    p.add_argument("--steps-per-year", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="basket-ism",
        description="Basket option pricing with the Iterative Sort-Mix rearrangement.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out",
                       help="output directory (default $BASKET_ISM_OUT or ./basket_ism_out)")
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic market snapshot"))
    p.add_argument("--assets", type=int, default=30)
    p.add_argument("--maturities", default="0.25,0.5,1.0,1.25,2.0")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--n-reference", type=int, default=200_000)
    p.add_argument("--output", help="snapshot path (default OUT/snapshot.csv)")
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("calibrate", help="fit SABR smiles, write params.csv"))
    p.add_argument("--snapshot")
    p.add_argument("--beta", type=float, default=0.9)
    p.add_argument("--side", default="mid", choices=("bid", "ask", "mid"))
    p.set_defaults(func=cmd_calibrate)

    p = common(sub.add_parser("rearrange", help="independent draw + ISM per maturity"))
    p.add_argument("--snapshot")
    p.add_argument("--params", help="params file (default OUT/params.csv; calibrates if absent)")
    p.add_argument("--config", help="INI run config")
    p.add_argument("--samples", type=int)
    p.add_argument("--bins", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_rearrange)

    p = common(sub.add_parser("localvol", help="basket densities and local vol surface"))
    p.add_argument("--snapshot")
    p.add_argument("--matrices")
    p.set_defaults(func=cmd_localvol, paths=1, steps_per_year=100, seed=0)

    p = common(sub.add_parser("price", help="price one basket derivative"))
    _add_engine_args(p)
    p.add_argument("--engine", default="auto", choices=("auto", "static", "lvm"))
    p.set_defaults(func=cmd_price)

    p = common(sub.add_parser("greeks", help="spot delta/gamma and constituent vegas"))
    _add_engine_args(p)
    p.add_argument("--engine", default="lvm", choices=("static", "lvm"))
    p.add_argument("--bump", type=float, default=1e-3, help="relative spot bump")
    p.add_argument("--sticky", default="moneyness", choices=("moneyness", "strike"),
                   help="what stays fixed when the spot moves")
    p.add_argument("--vega", action="store_true", help="also compute constituent vegas")
    p.add_argument("--vega-bump", type=float, default=0.01)
    p.add_argument("--params")
    p.set_defaults(func=cmd_greeks)

    p = common(sub.add_parser("oracle", help="run a numerical check"))
    p.add_argument("check", choices=("toy", "lemma1", "underdetermination", "tiny", "enumerate"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--M", default="50,100,200,400,800", help="lemma1 sample sizes")
    p.add_argument("--file", help="enumerate: sample matrix CSV")
    p.add_argument("--target", help="enumerate: CSV of index reference samples (one column)")
    p.set_defaults(func=cmd_oracle)

    p = common(sub.add_parser("report", help="render a report.json"))
    p.add_argument("--input")
    p.add_argument("--format", nargs="+", default=["markdown"],
                   choices=("csv", "json", "markdown"))
    p.set_defaults(func=cmd_report)

    p = common(sub.add_parser("run", help="full pipeline from one config file"))
    p.add_argument("--config")
    p.add_argument("--snapshot")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.stage, 1)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CODES["config"]
    except BasketIsmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
