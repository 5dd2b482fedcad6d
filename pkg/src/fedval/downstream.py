"""Reward allocation, data selection and the robustness measures built on them."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from fedval.game import mask_of
from fedval.valuation import Valuation


ABOVE_RTOL = 1e-12


class DegenerateAllocationError(ValueError):
    pass


class UndefinedNormalizationError(ValueError):
    pass


@dataclass(frozen=True)
class Proportional:
    total: float

    def __post_init__(self):
        if not self.total > 0:
            raise ValueError(f"proportional reward total must be positive, got {self.total}")


@dataclass(frozen=True)
class Balanced:
    pass


RewardScheme = Proportional | Balanced


def allocate_rewards(valuation: Valuation | np.ndarray, scheme: RewardScheme) -> np.ndarray:
    """Per-block rewards.

    Proportional pays ``total * phi_b / sum(phi)``; Balanced pays
    ``n * phi_b - sum(phi)`` so rewards sum to zero.
    """
    phi = _block_values(valuation)
    total = phi.sum()
    if isinstance(scheme, Proportional):
        if total == 0:
            raise DegenerateAllocationError("total data value is zero; proportional shares are undefined")
        return phi / total * scheme.total
    if isinstance(scheme, Balanced):
        return phi.size * phi - total
    raise TypeError(f"unknown reward scheme {scheme!r}")


def client_rewards(rewards: np.ndarray, block_owner) -> np.ndarray:
    owners = np.asarray(block_owner)
    return np.bincount(owners, weights=rewards, minlength=owners.max() + 1)


@dataclass(frozen=True)
class TopK:
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be positive, got {self.k}")


@dataclass(frozen=True)
class AboveAverage:
    pass


@dataclass(frozen=True)
class AboveMedian:
    pass


SelectionStrategy = TopK | AboveAverage | AboveMedian


def select_blocks(valuation: Valuation | np.ndarray, strategy: SelectionStrategy) -> list[int]:
    """Selected block indices in ascending order."""
    phi = _block_values(valuation)
    if isinstance(strategy, TopK):
        if strategy.k > phi.size:
            raise ValueError(f"k={strategy.k} exceeds the {phi.size} blocks")
        # stable sort on -phi keeps ties in block order
        order = np.argsort(-phi, kind="stable")
        return sorted(int(b) for b in order[: strategy.k])
    if isinstance(strategy, AboveAverage):
        return _strictly_above(phi, phi.mean())
    if isinstance(strategy, AboveMedian):
        return _strictly_above(phi, float(np.median(phi)))
    raise TypeError(f"unknown selection strategy {strategy!r}")


def _strictly_above(phi: np.ndarray, threshold: float) -> list[int]:
    # equal values can round to either side of their own mean; gaps below
    # ABOVE_RTOL of the largest magnitude count as ties
    slack = ABOVE_RTOL * float(np.abs(phi).max(initial=0.0))
    return [int(b) for b in np.flatnonzero(phi > threshold + slack)]


def symmetric_percentage_change(attacked: float, truthful: float) -> float:
    """``200 (a - b) / (|a| + |b|)``, bounded in [-200, 200]; 0 when both are 0."""
    denom = abs(attacked) + abs(truthful)
    if denom == 0:
        return 0.0
    # divide first: rounding is monotone, so the ratio stays within [-1, 1]
    return 200.0 * ((attacked - truthful) / denom)


def valuation_error(attacked: Valuation, truthful: Valuation) -> float:
    """Client-level mean absolute error normalized by the mean absolute truthful value."""
    scale = float(np.mean(np.abs(truthful.client_values)))
    if scale == 0:
        raise UndefinedNormalizationError("truthful client values are all zero")
    return float(np.mean(np.abs(attacked.client_values - truthful.client_values))) / scale


def utility_decline(
    honest: Valuation,
    attacked: Valuation,
    strategy: SelectionStrategy,
    oracle: Callable[[int], float],
    eps: float = 1e-12,
    clamp: bool = False,
) -> float:
    """Percent utility lost by selecting blocks with attacked instead of honest values.

    ``oracle`` maps a block mask to honest utility (a UtilityTable works via
    ``table.__getitem__``); the empty selection has utility 0.
    """
    chosen_honest = mask_of(select_blocks(honest, strategy))
    chosen_attacked = mask_of(select_blocks(attacked, strategy))
    if chosen_honest == chosen_attacked:
        return 0.0
    u_honest = oracle(chosen_honest) if chosen_honest else 0.0
    u_attacked = oracle(chosen_attacked) if chosen_attacked else 0.0
    decline = 100.0 * (u_honest - u_attacked) / max(abs(u_honest), eps)
    return max(decline, 0.0) if clamp else decline


def _block_values(valuation) -> np.ndarray:
    if isinstance(valuation, Valuation):
        return np.asarray(valuation.block_values, dtype=np.float64)
    return np.asarray(valuation, dtype=np.float64)
