"""Hybrid, theoretic and de facto estimands for longitudinal trials with
intercurrent events: MMRM (REML), reference-based multiple imputation,
Rubin pooling and a potential-outcome simulator."""
__version__ = "0.1.0"

from .data import Dataset, DataError, DataInclusionPolicy, Reason, VisitSchedule, read_csv, write_csv, validate
from .ice import Category, classify, classify_dataset, summarize
from .mmrm import MmrmModelSpec, fit
from .pooling import pool
from .simulate import ScenarioConfig, calibrate_preset, simulate
from .estimands import EstimandKind, EstimandSpec, estimate, true_defacto, true_hybrid, true_theoretic
