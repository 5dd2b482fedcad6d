"""Exact cooperative-game data valuation for federated data blocks."""

from fedval.game import GameStructure, UtilityTable, build_utility_table, enumerate_subsets
from fedval.valuation import METRICS, compute, extract_coefficients

__all__ = [
    "GameStructure",
    "UtilityTable",
    "build_utility_table",
    "enumerate_subsets",
    "METRICS",
    "compute",
    "extract_coefficients",
]
