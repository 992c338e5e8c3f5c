"""Fusion quality indicators and report machinery."""
from .indicators import (
    average_gradient,
    fmi_wt,
    msssim,
    q_abf,
    q_w,
    scd,
    spatial_frequency,
    standard_deviation,
    viff,
)
from .report import (
    COLUMNS,
    METRIC_HEADERS,
    MetricReport,
    evaluate_batch,
    evaluate_pair,
    format_table,
    mean_report,
    read_csv,
    write_csv,
)

__all__ = [
    "COLUMNS", "METRIC_HEADERS", "MetricReport", "average_gradient", "evaluate_batch",
    "evaluate_pair", "fmi_wt", "format_table", "mean_report", "msssim", "q_abf", "q_w",
    "read_csv", "scd", "spatial_frequency", "standard_deviation", "viff", "write_csv",
]
