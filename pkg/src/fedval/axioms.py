"""Witness-based checks of the valuation axioms.

Each check builds games that satisfy an axiom's hypothesis from the supplied
games and measures how far the metric is from the axiom's conclusion.

Block-level dummies and symmetric pairs are constructed globally (the block is
additive, or the pair interchangeable, in every coalition context).  Such games
satisfy the hypotheses of both the block-level axioms (DUM, SYM) and their
inner-block variants (DUM-IB, SYM-IB).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fedval.game import GameStructure, UtilityTable
from fedval.valuation import compute

AXIOMS = ("EFF", "LIN", "DUM", "SYM", "DUM-C", "DUM-IB", "SYM-C", "SYM-IB")

METRIC_AXIOMS = {
    "sv": ("EFF", "LIN", "DUM", "SYM"),
    "tsv": ("EFF", "LIN", "DUM-C", "DUM-IB", "SYM-C", "SYM-IB"),
    "loo": ("LIN", "DUM", "SYM"),
    "bv": ("LIN", "DUM", "SYM"),
    "bsv": ("LIN", "DUM", "SYM"),
}


@dataclass
class AxiomResult:
    axiom: str
    checks: int = 0
    max_residual: float = 0.0
    counterexample: dict | None = None
    tol: float = 1e-9

    @property
    def passed(self) -> bool:
        return self.counterexample is None

    def record(self, residual: float, **context):
        self.checks += 1
        if residual > self.max_residual:
            self.max_residual = residual
        if residual >= self.tol and self.counterexample is None:
            self.counterexample = {"residual": residual, **context}


@dataclass
class AxiomReport:
    metric: str
    results: dict[str, AxiomResult] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results.values())

    def __getitem__(self, axiom: str) -> AxiomResult:
        return self.results[axiom]

    def summary(self) -> str:
        lines = [f"axioms for {self.metric}:"]
        for r in self.results.values():
            status = "pass" if r.passed else "FAIL"
            lines.append(f"  {r.axiom:7s} {status}  checks={r.checks} max_residual={r.max_residual:.3e}")
        return "\n".join(lines)


def _swap_perm(n: int, pairs) -> np.ndarray:
    """Mask permutation swapping bit a with bit b for each (a, b) in pairs."""
    masks = np.arange(1 << n)
    out = masks.copy()
    for a, b in pairs:
        bit_a = (masks >> a) & 1
        bit_b = (masks >> b) & 1
        differ = bit_a != bit_b
        out = np.where(differ, out ^ ((1 << a) | (1 << b)), out)
    return out


def dummy_block_game(table: UtilityTable, block: int, value: float) -> UtilityTable:
    """Make ``block`` add exactly ``value`` to every coalition."""
    masks = np.arange(table.structure.num_subsets)
    bit = 1 << block
    v = table.values[masks & ~bit] + np.where(masks & bit, value, 0.0)
    return UtilityTable(table.structure, v)


def dummy_client_game(table: UtilityTable, client: int) -> UtilityTable:
    """Split the game so ``client``'s blocks act independently of everyone else's."""
    own = table.structure.client_masks[client]
    masks = np.arange(table.structure.num_subsets)
    v = table.values[masks & ~own] + table.values[masks & own]
    return UtilityTable(table.structure, v)


def symmetric_game(table: UtilityTable, pairs) -> UtilityTable:
    """Average the game with its image under the block swaps in ``pairs``."""
    perm = _swap_perm(table.structure.total_blocks, pairs)
    return UtilityTable(table.structure, 0.5 * (table.values + table.values[perm]))


def check_axioms(
    metric: str,
    games,
    axioms=None,
    tol: float = 1e-9,
    seed: int = 0,
) -> AxiomReport:
    """Check ``axioms`` (default: every axiom) for ``metric`` on ``games``.

    ``games`` is an iterable of ``(structure, table)`` pairs or bare tables.
    """
    rng = np.random.default_rng(seed)
    wanted = tuple(axioms) if axioms is not None else AXIOMS
    unknown = set(wanted) - set(AXIOMS)
    if unknown:
        raise ValueError(f"unknown axioms: {sorted(unknown)}")
    report = AxiomReport(metric, {a: AxiomResult(a, tol=tol) for a in wanted})

    for g, item in enumerate(games):
        table = item[1] if isinstance(item, tuple) else item
        s: GameStructure = table.structure
        phi = compute(metric, table)

        if "EFF" in wanted:
            report["EFF"].record(abs(phi.block_values.sum() - table.grand), game=g, total=float(phi.block_values.sum()), grand=table.grand)

        if "LIN" in wanted:
            other = rng.uniform(-1, 1, s.num_subsets)
            other[0] = 0.0
            t2 = UtilityTable(s, other)
            summed = compute(metric, UtilityTable(s, table.values + other))
            direct = phi.block_values + compute(metric, t2).block_values
            report["LIN"].record(float(np.abs(summed.block_values - direct).max()), game=g)

        for b in range(s.total_blocks):
            c = float(rng.uniform(-1, 1))
            if "DUM" in wanted or "DUM-IB" in wanted:
                val = compute(metric, dummy_block_game(table, b, c))
                for ax in ("DUM", "DUM-IB"):
                    if ax in wanted:
                        report[ax].record(abs(val.block_values[b] - c), game=g, block=b, expected=c, got=float(val.block_values[b]))

        n = s.total_blocks
        if n >= 2 and ("SYM" in wanted):
            a, b = sorted(int(x) for x in rng.choice(n, 2, replace=False))
            val = compute(metric, symmetric_game(table, [(a, b)]))
            report["SYM"].record(abs(val.block_values[a] - val.block_values[b]), game=g, blocks=(a, b))

        if "SYM-IB" in wanted:
            for client in range(s.num_clients):
                blocks = s.client_blocks_of(client)
                if len(blocks) < 2:
                    continue
                a, b = sorted(int(x) for x in rng.choice(blocks, 2, replace=False))
                val = compute(metric, symmetric_game(table, [(a, b)]))
                report["SYM-IB"].record(abs(val.block_values[a] - val.block_values[b]), game=g, client=client, blocks=(a, b))

        if "DUM-C" in wanted:
            for client in range(s.num_clients):
                witness = dummy_client_game(table, client)
                val = compute(metric, witness)
                expected = witness[s.client_masks[client]]
                report["DUM-C"].record(abs(val.client_values[client] - expected), game=g, client=client)

        if "SYM-C" in wanted:
            for c1 in range(s.num_clients):
                for c2 in range(c1 + 1, s.num_clients):
                    if s.blocks_per_client[c1] != s.blocks_per_client[c2]:
                        continue
                    pairs = list(zip(s.client_blocks_of(c1), s.client_blocks_of(c2)))
                    val = compute(metric, symmetric_game(table, pairs))
                    report["SYM-C"].record(abs(val.client_values[c1] - val.client_values[c2]), game=g, clients=(c1, c2))

    return report


def random_games(count: int, seed: int = 0, min_blocks: int = 2, max_blocks: int = 10, max_clients: int = 4):
    """Random games with uniform utilities in [-1, 1] and random ownership."""
    rng = np.random.default_rng(seed)
    for _ in range(count):
        n = int(rng.integers(min_blocks, max_blocks + 1))
        n_clients = int(rng.integers(1, min(max_clients, n) + 1))
        cuts = np.sort(rng.choice(np.arange(1, n), n_clients - 1, replace=False)) if n_clients > 1 else []
        counts = np.diff(np.concatenate(([0], cuts, [n]))).astype(int)
        structure = GameStructure(tuple(int(c) for c in counts))
        values = rng.uniform(-1, 1, structure.num_subsets)
        values[0] = 0.0
        yield structure, UtilityTable(structure, values)
