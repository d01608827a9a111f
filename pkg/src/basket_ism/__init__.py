"""Basket option pricing with the Iterative Sort-Mix rearrangement.

Pipeline: market snapshot -> SABR marginals -> independent samples ->
ISM rearrangement against the index law -> basket density -> Dupire local
volatility -> static and path pricing, Greeks.
"""
from .errors import BasketIsmError, StageError
from .ism import IsmConfig, IsmResult, TargetVector, build_target, run_ism, run_per_maturity
from .localvol import LocalVolSurface, calibrate_local_vol, estimate_density, simulate_paths
from .market_data import MarketSnapshot, generate_synthetic_market, load_snapshot, save_snapshot
from .pipeline import RunConfig, RunReport, report_render, run_pipeline
from .pricing import EngineState, PricingRequest, greeks_spot, price
from .sampling import SampleMatrix, aggregate, draw_independent, empirical_cdf
from .smile import MarginalLaw, SabrParams, calibrate_sabr, calibrate_snapshot, extract_law

__version__ = "0.1.0"

__all__ = [
    "BasketIsmError", "StageError", "IsmConfig", "IsmResult", "TargetVector", "build_target",
    "run_ism", "run_per_maturity", "LocalVolSurface", "calibrate_local_vol", "estimate_density",
    "simulate_paths", "MarketSnapshot", "generate_synthetic_market", "load_snapshot",
    "save_snapshot", "RunConfig", "RunReport", "report_render", "run_pipeline", "EngineState",
    "PricingRequest", "greeks_spot", "price", "SampleMatrix", "aggregate", "draw_independent",
    "empirical_cdf", "MarginalLaw", "SabrParams", "calibrate_sabr", "calibrate_snapshot",
    "extract_law",
]
