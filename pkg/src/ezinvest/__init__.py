"""Epstein-Zin consumption-investment in Markovian incomplete markets."""

from .market import (
    ConstantParams,
    EZPreferences,
    HestonParams,
    KimOmbergParams,
    MarketModel,
    ParamCheckReport,
    check_conditions,
    make_constant,
    make_heston,
    make_kim_omberg,
    make_model,
)
from .solver import Grid, SolverConfig, SolverError, ValueSurface, make_grid, solve_value_pde

__all__ = [
    "ConstantParams",
    "EZPreferences",
    "HestonParams",
    "KimOmbergParams",
    "MarketModel",
    "ParamCheckReport",
    "check_conditions",
    "make_constant",
    "make_heston",
    "make_kim_omberg",
    "make_model",
    "Grid",
    "SolverConfig",
    "SolverError",
    "ValueSurface",
    "make_grid",
    "solve_value_pde",
]
