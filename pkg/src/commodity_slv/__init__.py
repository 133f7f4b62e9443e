"""Micro (futures-curve) and macro (index) stochastic local volatility models
for a rolled commodity excess-return index."""

__version__ = "0.1.0"

from .market_data import MarketSnapshot, load_market
from .mc_engine import MacroParams, MicroParams, simulate_macro, simulate_micro
from .model_calibration import MacroModel, MicroModel, calibrate_macro, calibrate_micro

__all__ = [
    "MacroModel",
    "MacroParams",
    "MarketSnapshot",
    "MicroModel",
    "MicroParams",
    "calibrate_macro",
    "calibrate_micro",
    "load_market",
    "simulate_macro",
    "simulate_micro",
]
