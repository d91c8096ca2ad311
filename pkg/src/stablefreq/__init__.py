"""Learned monotone primary frequency control with stability certificates."""
import os as _os

# STABLEFREQ_THREADS caps BLAS threads; must be set before numpy loads
if _os.environ.get("STABLEFREQ_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["STABLEFREQ_THREADS"])
from .controller import MonotoneParams, TabulatedController, droop_params, evaluate, init_params
from .power_net import NetworkCase, bundled_case, load_case, solve_equilibrium

__version__ = "0.1.0"

__all__ = [
    "MonotoneParams",
    "TabulatedController",
    "NetworkCase",
    "bundled_case",
    "droop_params",
    "evaluate",
    "init_params",
    "load_case",
    "solve_equilibrium",
]
