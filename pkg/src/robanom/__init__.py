"""Robust cellwise anomaly detection for large panels of daily time series."""

__version__ = "0.1.0"

from .panel import Panel, load_panel, make_panel, write_panel
from .dgp import DgpParams, OutlierSpec, inject_outliers, simulate_dgp
from .trend import TrendCycleSpec, build_design, fit_panel, lte_fit
from .scatter import com_scatter, feau_estimate, mrcd_scatter, ogk_scatter
from .distance import OutlierReport, cellwise_scores, flag, flag_and_merge, parse_threshold
from .forecast import forecast_scores, realtime_init, realtime_step, robhar_fit, robnhar_fit
from .typology import TypologyConfig, classify, infer_sign
from .clustering import extract_features, kmeans, elbow_curve, overlap_report
from .bench import McConfig, run_monte_carlo, roc_curve

__all__ = [
    "Panel", "load_panel", "make_panel", "write_panel",
    "DgpParams", "OutlierSpec", "inject_outliers", "simulate_dgp",
    "TrendCycleSpec", "build_design", "fit_panel", "lte_fit",
    "com_scatter", "feau_estimate", "mrcd_scatter", "ogk_scatter",
    "OutlierReport", "cellwise_scores", "flag", "flag_and_merge", "parse_threshold",
    "forecast_scores", "realtime_init", "realtime_step", "robhar_fit", "robnhar_fit",
    "TypologyConfig", "classify", "infer_sign",
    "extract_features", "kmeans", "elbow_curve", "overlap_report",
    "McConfig", "run_monte_carlo", "roc_curve",
]
