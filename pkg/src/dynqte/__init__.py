"""Estimation and testing of dynamic quantile treatment effects in switchback experiments."""

__version__ = "0.1.0"

from .bootstrap import BootstrapConfig, TestResult, run_test, run_test_st
from .errors import (
    BootstrapAbort,
    ConvergenceError,
    DataValidationError,
    DynQTEError,
    NumericalError,
    SingularDesignError,
)
from .kernels import KernelSpec
from .panel import (
    PanelDataset,
    SpatioPanelDataset,
    alternating_design,
    design_row,
    load_panel_csv,
    load_regions_csv,
    write_panel_csv,
    write_regions_csv,
)
from .spatial import estimate_st
from .vcdp import EstimandReport, cqde, cqie, cqte_closed_form, estimate

__all__ = [
    "BootstrapAbort",
    "BootstrapConfig",
    "ConvergenceError",
    "DataValidationError",
    "DynQTEError",
    "EstimandReport",
    "KernelSpec",
    "NumericalError",
    "PanelDataset",
    "SingularDesignError",
    "SpatioPanelDataset",
    "TestResult",
    "alternating_design",
    "cqde",
    "cqie",
    "cqte_closed_form",
    "design_row",
    "estimate",
    "estimate_st",
    "load_panel_csv",
    "load_regions_csv",
    "run_test",
    "run_test_st",
    "write_panel_csv",
    "write_regions_csv",
]
