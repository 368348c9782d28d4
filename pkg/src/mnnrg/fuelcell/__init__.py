"""Fuel-cell air-path case study."""

from .model import FuelCellPlant, fc_constraints, fc_derivatives, fc_outputs
from .params import CompressorMap, FcParams, load_params

__all__ = [
    "CompressorMap",
    "FcParams",
    "FuelCellPlant",
    "fc_constraints",
    "fc_derivatives",
    "fc_outputs",
    "load_params",
]
