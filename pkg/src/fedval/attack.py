"""The data-overvaluation attack against linear valuation metrics.

For every proper subset ``S`` containing at least one attacker block, the
attacker looks at the sign of its own coefficient ``beta_i(S)`` and of the
other clients' total ``beta_{-i}(S)``: it inflates ``v(S)`` when raising it
helps itself without helping the others, deflates it in the mirror case, and
behaves honestly otherwise.  The grand coalition is never retrained.
"""

from __future__ import annotations

import enum
import json
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from fedval.game import GameStructure, UtilityTable, client_blocks
from fedval.valuation import CoefficientTable, Valuation, compute

ZERO_TOL = 1e-12


class AttackAction(str, enum.Enum):
    HONEST = "honest"
    POSITIVE = "positive"
    NEGATIVE = "negative"


_CODES = {AttackAction.HONEST: 0, AttackAction.POSITIVE: 1, AttackAction.NEGATIVE: -1}
_ACTIONS = {v: k for k, v in _CODES.items()}

ManipulableOracle = Callable[[int, AttackAction], float]


class AttackExecutionError(RuntimeError):
    def __init__(self, mask: int, cause: BaseException):
        super().__init__(f"utility evaluation failed for mask {mask}: {cause}")
        self.mask = mask


def decide(beta_own: float, beta_others: float, zero_tol: float = ZERO_TOL) -> AttackAction:
    """Sign rule: inflate when own > 0 >= others, deflate when own < 0 <= others."""
    own = 0.0 if abs(beta_own) <= zero_tol else beta_own
    others = 0.0 if abs(beta_others) <= zero_tol else beta_others
    if own > 0 and others <= 0:
        return AttackAction.POSITIVE
    if own < 0 and others >= 0:
        return AttackAction.NEGATIVE
    return AttackAction.HONEST


@dataclass(frozen=True, eq=False)
class AttackPlan:
    """Per-subset actions of a single attacker.  The full mask has no entry."""

    structure: GameStructure
    attacker: int
    codes: np.ndarray

    def action(self, mask: int) -> AttackAction:
        if mask == self.structure.full_mask:
            raise KeyError("the grand coalition is never retrained")
        return _ACTIONS[int(self.codes[mask])]

    def __getitem__(self, mask: int) -> AttackAction:
        return self.action(mask)

    @property
    def actions(self) -> dict[int, AttackAction]:
        return {m: self.action(m) for m in range(self.structure.full_mask)}

    def manipulated(self) -> list[int]:
        return [int(m) for m in np.flatnonzero(self.codes[: self.structure.full_mask])]

    def count(self, action: AttackAction) -> int:
        return int(np.sum(self.codes[: self.structure.full_mask] == _CODES[action]))

    def same_as(self, other: "AttackPlan") -> bool:
        return self.attacker == other.attacker and np.array_equal(self.codes, other.codes)

    def to_json(self) -> str:
        return json.dumps(
            {
                "attacker": self.attacker,
                "block_owner": list(self.structure.block_owner),
                "actions": [{"mask": m, "action": a.value} for m, a in self.actions.items()],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "AttackPlan":
        doc = json.loads(text)
        structure = GameStructure.from_owners(doc["block_owner"])
        codes = np.zeros(structure.num_subsets, dtype=np.int8)
        for row in doc["actions"]:
            codes[int(row["mask"])] = _CODES[AttackAction(row["action"])]
        return cls(structure, int(doc["attacker"]), codes)

    @classmethod
    def honest(cls, structure: GameStructure, attacker: int) -> "AttackPlan":
        structure._check_client(attacker)
        return cls(structure, attacker, np.zeros(structure.num_subsets, dtype=np.int8))


def plan_attack(
    coeffs: CoefficientTable,
    attacker: int,
    structure: GameStructure | None = None,
    zero_tol: float = ZERO_TOL,
) -> AttackPlan:
    """Exact-knowledge plan: the attacker knows which subset is being retrained."""
    structure = structure or coeffs.structure
    structure._check_client(attacker)
    own = coeffs.client_coeffs[attacker]
    others = coeffs.others(attacker)
    codes = np.zeros(structure.num_subsets, dtype=np.int8)
    attacker_mask = structure.client_masks[attacker]
    for mask in range(1, structure.full_mask):
        if mask & attacker_mask:
            codes[mask] = _CODES[decide(own[mask], others[mask], zero_tol)]
    return AttackPlan(structure, attacker, codes)


# incomplete knowledge --------------------------------------------------


class SubsetPrior:
    """Attacker belief over the retrained subset given its own observed blocks.

    ``weights`` is a non-negative array over masks; conditioning on the
    attacker's observed block mask ``o`` renormalizes it over the masks whose
    attacker part equals ``o``.  The full mask never carries weight.
    """

    def __init__(self, structure: GameStructure, attacker: int, weights):
        structure._check_client(attacker)
        weights = np.asarray(weights, dtype=np.float64).copy()
        if weights.shape != (structure.num_subsets,) or np.any(weights < 0):
            raise ValueError("prior weights must be a non-negative array over all masks")
        weights[structure.full_mask] = 0.0
        self.structure = structure
        self.attacker = attacker
        self.weights = weights
        self._own = np.arange(structure.num_subsets) & structure.client_masks[attacker]

    @classmethod
    def uniform(cls, structure: GameStructure, attacker: int) -> "SubsetPrior":
        """Uniform over every proper subset consistent with the observation."""
        return cls(structure, attacker, np.ones(structure.num_subsets))

    @classmethod
    def point_mass(cls, structure: GameStructure, attacker: int, mask: int) -> "SubsetPrior":
        weights = np.zeros(structure.num_subsets)
        weights[mask] = 1.0
        return cls(structure, attacker, weights)

    def conditional(self, observed: int) -> tuple[np.ndarray, np.ndarray]:
        if observed & ~self.structure.client_masks[self.attacker]:
            raise ValueError(f"observed mask {observed} contains blocks the attacker does not own")
        support = np.flatnonzero((self._own == observed) & (self.weights > 0))
        if support.size == 0:
            raise ValueError(f"prior has empty support for observed mask {observed}")
        p = self.weights[support]
        return support, p / p.sum()

    def belief(self, mask: int) -> tuple[np.ndarray, np.ndarray]:
        return self.conditional(int(self._own[mask]))


class ExactKnowledge:
    """Degenerate belief: the attacker always knows the true subset."""

    def __init__(self, structure: GameStructure, attacker: int):
        self.structure = structure
        self.attacker = attacker

    def belief(self, mask: int) -> tuple[np.ndarray, np.ndarray]:
        return np.array([mask]), np.array([1.0])


def expected_coefficients(
    coeffs: CoefficientTable, attacker: int, observed: int, prior: SubsetPrior
) -> tuple[float, float]:
    """(E[beta_i | o], E[beta_-i | o]) under ``prior``."""
    support, p = prior.conditional(observed)
    own = coeffs.client_coeffs[attacker][support]
    others = coeffs.others(attacker)[support]
    return float(p @ own), float(p @ others)


def plan_attack_incomplete(
    coeffs: CoefficientTable,
    attacker: int,
    structure: GameStructure | None,
    prior,
    zero_tol: float = ZERO_TOL,
) -> AttackPlan:
    """Plan from expected coefficients when only the attacker's own blocks are known.

    ``prior`` needs a ``belief(mask) -> (support masks, probabilities)`` method;
    :class:`SubsetPrior` derives it from the observed attacker blocks alone.
    """
    structure = structure or coeffs.structure
    structure._check_client(attacker)
    own_all = coeffs.client_coeffs[attacker]
    others_all = coeffs.others(attacker)
    attacker_mask = structure.client_masks[attacker]
    codes = np.zeros(structure.num_subsets, dtype=np.int8)
    cache: dict[int, int] = {}
    depends_on_observation = isinstance(prior, SubsetPrior)
    for mask in range(1, structure.full_mask):
        if not mask & attacker_mask:
            continue
        key = client_blocks(mask, attacker, structure) if depends_on_observation else mask
        if key not in cache:
            support, p = prior.belief(mask)
            cache[key] = _CODES[decide(float(p @ own_all[support]), float(p @ others_all[support]), zero_tol)]
        codes[mask] = cache[key]
    return AttackPlan(structure, attacker, codes)


# execution -------------------------------------------------------------


def execute_attack(
    plan: AttackPlan,
    oracle: ManipulableOracle,
    honest: UtilityTable | None = None,
) -> UtilityTable:
    """Evaluate every proper subset under its planned action.

    When ``honest`` is given, honest subsets and the grand coalition reuse its
    utilities instead of calling the oracle (valid for deterministic oracles).
    """
    structure = plan.structure
    values = np.zeros(structure.num_subsets)
    for mask in range(1, structure.full_mask):
        action = plan.action(mask)
        if honest is not None and action is AttackAction.HONEST:
            values[mask] = honest.values[mask]
            continue
        try:
            values[mask] = oracle(mask, action)
        except Exception as exc:
            raise AttackExecutionError(mask, exc) from exc
    full = structure.full_mask
    values[full] = honest.values[full] if honest is not None else oracle(full, AttackAction.HONEST)
    return UtilityTable(structure, values, attacked=True)


def empirical_values(
    metric: str,
    coeffs: CoefficientTable,
    augmented: UtilityTable,
    cross_check: bool = True,
    tol: float = 1e-9,
) -> Valuation:
    """Values the server computes from (possibly manipulated) utilities.

    Uses the coefficient form ``sum_S beta(S) v_hat(S)``; with ``cross_check``
    the metric is also run directly on ``augmented`` and both must agree.
    """
    if coeffs.structure.block_owner != augmented.structure.block_owner:
        raise ValueError("coefficients and utilities belong to different structures")
    result = coeffs.apply(augmented.values)
    if cross_check:
        direct = compute(metric, augmented)
        gap = max(
            float(np.abs(direct.block_values - result.block_values).max()),
            float(np.abs(direct.client_values - result.client_values).max()),
        )
        scale = max(1.0, float(np.abs(augmented.values).max()))
        if gap > tol * scale:
            raise AssertionError(f"{metric}: linear form and direct evaluation differ by {gap:.3e}")
    return Valuation(result.structure, result.block_values, result.client_values, metric)


def shift_oracle(table: UtilityTable, delta: float, attacker: int | None = None) -> ManipulableOracle:
    """Synthetic manipulable oracle: +delta when inflating, -delta when deflating.

    With ``attacker`` set, inflation is impossible on subsets that already hold
    all of the attacker's blocks (its full dataset is the best it can report),
    mirroring how positive augmentation behaves in federated training.
    """
    full_own = table.structure.client_masks[attacker] if attacker is not None else None

    def oracle(mask: int, action: AttackAction) -> float:
        if action is AttackAction.POSITIVE and full_own is not None and mask & full_own == full_own:
            return float(table.values[mask])
        if action is AttackAction.POSITIVE:
            return table.values[mask] + delta
        if action is AttackAction.NEGATIVE:
            return table.values[mask] - delta
        return float(table.values[mask])

    return oracle
