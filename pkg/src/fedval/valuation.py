"""Exact linear data valuation metrics over a complete utility table.

Supported metric ids:

``sv``
    Shapley value over all blocks.
``loo``
    Leave-one-out, ``v(D_N) - v(D_N \\ {b})``.
``bsv``
    Beta Shapley semivalue, Beta(alpha, beta) with default (16, 1).
``bv``
    Banzhaf value.
``tsv``
    Truth-Shapley: client-level Shapley over whole client datasets, then a
    within-client Shapley split of each client's value among its blocks.

All kernels accept utilities with shape ``(2**n,)`` or ``(2**n, k)``; the
second form evaluates ``k`` games at once and is what coefficient extraction
uses to push the whole basis of indicator games through a metric.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import betaln, logsumexp

from fedval.game import GameStructure, UtilityTable, popcounts

METRICS = ("sv", "loo", "bsv", "bv", "tsv")
DEFAULT_BSV_PARAMS = (16.0, 1.0)

_EXTRACT_CHUNK = 256


class UnknownMetricError(ValueError):
    pass


def check_metric(metric: str) -> str:
    if metric not in METRICS:
        raise UnknownMetricError(f"unknown metric {metric!r}; expected one of {', '.join(METRICS)}")
    return metric


# weights ---------------------------------------------------------------


@dataclass(frozen=True)
class SemivalueWeights:
    """Weight applied to each individual subset of size ``s`` (``s = 0..n-1``)."""

    per_subset_weight: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.per_subset_weight, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("semivalue weights must be a non-empty 1-d array")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError(f"semivalue weights must be finite and non-negative, got {w}")
        object.__setattr__(self, "per_subset_weight", w)

    @property
    def n(self) -> int:
        return self.per_subset_weight.size

    def total_mass(self) -> float:
        """``sum_s C(n-1, s) w(s)``; equals 1 for probabilistic semivalues."""
        n = self.n
        return float(sum(math.comb(n - 1, s) * w for s, w in enumerate(self.per_subset_weight)))


def shapley_weights(n: int) -> SemivalueWeights:
    # s!(n-1-s)!/n! == 1 / (n * C(n-1, s)); exact integers, no factorial overflow
    if n < 1:
        raise ValueError("n must be >= 1")
    return SemivalueWeights(np.array([1.0 / (n * math.comb(n - 1, s)) for s in range(n)]))


def banzhaf_weights(n: int) -> SemivalueWeights:
    if n < 1:
        raise ValueError("n must be >= 1")
    return SemivalueWeights(np.full(n, 2.0 ** -(n - 1)))


def beta_weights(n: int, alpha: float, beta: float) -> SemivalueWeights:
    """Beta Shapley per-subset weights, ``w(s) ∝ B(beta + s, alpha + n - 1 - s)``.

    Normalized so that ``sum_s C(n-1, s) w(s) = 1``.  Beta(1, 1) gives the
    Shapley weights.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not (alpha > 0 and beta > 0):
        raise ValueError(f"alpha and beta must be positive, got alpha={alpha}, beta={beta}")
    s = np.arange(n, dtype=np.float64)
    log_w = betaln(beta + s, alpha + n - 1 - s)
    log_comb = np.array([math.lgamma(n) - math.lgamma(k + 1) - math.lgamma(n - k) for k in range(n)])
    log_w = log_w - logsumexp(log_w + log_comb)
    return SemivalueWeights(np.exp(log_w))


# kernels ---------------------------------------------------------------


@lru_cache(maxsize=32)
def _without_bit(n: int) -> tuple[np.ndarray, np.ndarray]:
    """For every block b: masks lacking b, and their popcounts."""
    pc = popcounts(n)
    masks = np.arange(1 << n)
    idx = np.stack([masks[(masks >> b) & 1 == 0] for b in range(n)]) if n else np.zeros((0, 1), int)
    return idx, pc[idx]


def semivalue_kernel(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-player semivalue ``sum_{S not containing b} w(|S|) (v(S+b) - v(S))``."""
    n = weights.size
    idx, sizes = _without_bit(n)
    out = np.empty((n,) + values.shape[1:])
    for b in range(n):
        diff = values[idx[b] | (1 << b)] - values[idx[b]]
        w = weights[sizes[b]]
        out[b] = np.tensordot(w, diff, axes=(0, 0))
    return out


def loo_kernel(values: np.ndarray, n: int) -> np.ndarray:
    full = (1 << n) - 1
    return np.stack([values[full] - values[full ^ (1 << b)] for b in range(n)])


def truth_shapley_kernel(values: np.ndarray, structure: GameStructure) -> tuple[np.ndarray, np.ndarray]:
    """Two-stage Truth-Shapley; returns (block values, client values)."""
    n_clients = structure.num_clients
    client_w = shapley_weights(n_clients).per_subset_weight
    coalitions = np.arange(1 << n_clients)
    union = np.array([structure.union_mask(_bits(int(c))) for c in coalitions], dtype=np.int64)
    sizes = popcounts(n_clients)

    block_out = np.empty((structure.total_blocks,) + values.shape[1:])
    client_out = np.empty((n_clients,) + values.shape[1:])
    offset = 0
    for i, m_i in enumerate(structure.blocks_per_client):
        others = coalitions[(coalitions >> i) & 1 == 0]
        w = client_w[sizes[others]]
        base = union[others]
        inner = np.arange(1 << m_i, dtype=np.int64) << offset
        # u_i(S) = client i's Shapley value when it contributes only S
        joined = values[inner[:, None] | base[None, :]] - values[base][None, ...]
        u = np.tensordot(w, joined, axes=(0, 1))
        block_out[offset : offset + m_i] = semivalue_kernel(u, shapley_weights(m_i).per_subset_weight)
        client_out[i] = u[-1]
        offset += m_i
    return block_out, client_out


def _bits(c: int) -> list[int]:
    return [k for k in range(c.bit_length()) if (c >> k) & 1]


def _client_sums(block_values: np.ndarray, structure: GameStructure) -> np.ndarray:
    starts = np.cumsum((0,) + structure.blocks_per_client[:-1])
    return np.add.reduceat(block_values, starts, axis=0)


def metric_arrays(
    metric: str,
    values: np.ndarray,
    structure: GameStructure,
    bsv_params: tuple[float, float] = DEFAULT_BSV_PARAMS,
) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate ``metric`` on raw (possibly batched) utilities."""
    check_metric(metric)
    n = structure.total_blocks
    if metric == "tsv":
        return truth_shapley_kernel(values, structure)
    if metric == "loo":
        blocks = loo_kernel(values, n)
    else:
        weights = {
            "sv": lambda: shapley_weights(n),
            "bv": lambda: banzhaf_weights(n),
            "bsv": lambda: beta_weights(n, *bsv_params),
        }[metric]()
        blocks = semivalue_kernel(values, weights.per_subset_weight)
    return blocks, _client_sums(blocks, structure)


# valuation results -----------------------------------------------------


@dataclass(frozen=True, eq=False)
class Valuation:
    """Block-level and client-level data values produced by one metric."""

    structure: GameStructure
    block_values: np.ndarray
    client_values: np.ndarray
    metric: str

    def others(self, client: int) -> float:
        """Total value of every client except ``client``."""
        return float(np.delete(self.client_values, client).sum())

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "block_owner": list(self.structure.block_owner),
            "block_values": {str(b): float(v) for b, v in enumerate(self.block_values)},
            "client_values": {str(c): float(v) for c, v in enumerate(self.client_values)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Valuation":
        doc = json.loads(text)
        structure = GameStructure.from_owners(doc["block_owner"])
        blocks = np.array([doc["block_values"][str(b)] for b in range(structure.total_blocks)])
        clients = np.array([doc["client_values"][str(c)] for c in range(structure.num_clients)])
        return cls(structure, blocks, clients, doc["metric"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "level", "index", "client", "value"])
        for b, v in enumerate(self.block_values):
            writer.writerow([self.metric, "block", b, self.structure.block_owner[b], repr(float(v))])
        for c, v in enumerate(self.client_values):
            writer.writerow([self.metric, "client", c, c, repr(float(v))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Valuation":
        rows = list(csv.DictReader(io.StringIO(text)))
        owners = [int(r["client"]) for r in rows if r["level"] == "block"]
        structure = GameStructure.from_owners(owners)
        blocks = np.array([float(r["value"]) for r in rows if r["level"] == "block"])
        clients = np.array([float(r["value"]) for r in rows if r["level"] == "client"])
        return cls(structure, blocks, clients, rows[0]["metric"])


def _valuation(metric, table: UtilityTable, **kw) -> Valuation:
    blocks, clients = metric_arrays(metric, table.values, table.structure, **kw)
    return Valuation(table.structure, blocks, clients, metric)


def shapley(table: UtilityTable, structure: GameStructure | None = None) -> Valuation:
    return _valuation("sv", table)


def loo(table: UtilityTable, structure: GameStructure | None = None) -> Valuation:
    return _valuation("loo", table)


def banzhaf(table: UtilityTable, structure: GameStructure | None = None) -> Valuation:
    return _valuation("bv", table)


def beta_shapley(table: UtilityTable, alpha: float = 16.0, beta: float = 1.0) -> Valuation:
    return _valuation("bsv", table, bsv_params=(alpha, beta))


def truth_shapley(table: UtilityTable, structure: GameStructure | None = None) -> Valuation:
    return _valuation("tsv", table)


def semivalue(
    table: UtilityTable, structure: GameStructure | None, weights: SemivalueWeights, metric: str = "semivalue"
) -> Valuation:
    structure = table.structure
    if weights.n != structure.total_blocks:
        raise ValueError(f"need {structure.total_blocks} weights, got {weights.n}")
    blocks = semivalue_kernel(table.values, weights.per_subset_weight)
    return Valuation(structure, blocks, _client_sums(blocks, structure), metric)


def compute(metric: str, table: UtilityTable, bsv_params=DEFAULT_BSV_PARAMS) -> Valuation:
    """Evaluate a metric by id."""
    return _valuation(metric, table, bsv_params=bsv_params)


# coefficients ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CoefficientTable:
    """Linear weights of a metric: ``phi = coeffs @ v``.

    ``block_coeffs`` has shape ``(total_blocks, 2**n)`` and ``client_coeffs``
    shape ``(num_clients, 2**n)``.  ``block_coeffs`` may be ``None`` for
    client-only tables.
    """

    structure: GameStructure
    metric: str
    client_coeffs: np.ndarray
    block_coeffs: np.ndarray | None = None

    def client(self, client: int, mask: int) -> float:
        return float(self.client_coeffs[client, mask])

    def others(self, client: int) -> np.ndarray:
        """beta_{-i}(S) for every mask."""
        return np.delete(self.client_coeffs, client, axis=0).sum(axis=0)

    def apply(self, values: np.ndarray) -> Valuation:
        """The linear form ``sum_S beta(S) v(S)``."""
        values = np.asarray(values, dtype=np.float64)
        blocks = self.block_coeffs @ values if self.block_coeffs is not None else None
        return Valuation(self.structure, blocks, self.client_coeffs @ values, self.metric)

    def rows(self, actions=None):
        """Row dicts per mask; ``actions(mask)`` may supply one label per client."""
        n_blocks = self.structure.total_blocks
        for mask in range(self.structure.num_subsets):
            row = {"mask": mask}
            if self.block_coeffs is not None:
                row["block"] = [float(self.block_coeffs[b, mask]) for b in range(n_blocks)]
            row["client"] = [float(x) for x in self.client_coeffs[:, mask]]
            if actions is not None:
                row["actions"] = list(actions(mask))
            yield row

    def to_json(self, actions=None, extra: dict | None = None) -> str:
        doc = {
            "metric": self.metric,
            "block_owner": list(self.structure.block_owner),
            **(extra or {}),
            "rows": list(self.rows(actions)),
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "CoefficientTable":
        doc = json.loads(text)
        structure = GameStructure.from_owners(doc["block_owner"])
        rows = sorted(doc["rows"], key=lambda r: r["mask"])
        client = np.array([r["client"] for r in rows]).T
        block = np.array([r["block"] for r in rows]).T if "block" in rows[0] else None
        return cls(structure, doc["metric"], client, block)

    def to_csv(self, actions=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        n_blocks, n_clients = self.structure.total_blocks, self.structure.num_clients
        header = ["mask"]
        if self.block_coeffs is not None:
            header += [f"block_{b}" for b in range(n_blocks)]
        header += [f"client_{c}" for c in range(n_clients)]
        if actions is not None:
            header += [f"action_{c}" for c in range(n_clients)]
        writer.writerow(header)
        for row in self.rows(actions):
            out = [row["mask"]] + [repr(x) for x in row.get("block", [])] + [repr(x) for x in row["client"]]
            if actions is not None:
                out += row["actions"]
            writer.writerow(out)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, metric: str, structure: GameStructure) -> "CoefficientTable":
        rows = list(csv.DictReader(io.StringIO(text)))
        rows.sort(key=lambda r: int(r["mask"]))
        client = np.array([[float(r[f"client_{c}"]) for r in rows] for c in range(structure.num_clients)])
        block = None
        if rows and "block_0" in rows[0]:
            block = np.array([[float(r[f"block_{b}"]) for r in rows] for b in range(structure.total_blocks)])
        return cls(structure, metric, client, block)


def extract_coefficients(
    metric: str, structure: GameStructure, bsv_params=DEFAULT_BSV_PARAMS
) -> CoefficientTable:
    """Coefficients of a linear metric, read off its values on indicator games.

    Column ``S`` of the result is the metric evaluated on the game that is 1
    on ``S`` and 0 elsewhere.  The indicator for the empty set is included even
    though it violates ``v(empty) = 0``; every kernel is linear in the raw
    array, so the coefficient on ``v(empty)`` comes out correctly.
    """
    check_metric(metric)
    size = structure.num_subsets
    blocks = np.empty((structure.total_blocks, size))
    clients = np.empty((structure.num_clients, size))
    for start in range(0, size, _EXTRACT_CHUNK):
        stop = min(size, start + _EXTRACT_CHUNK)
        basis = np.zeros((size, stop - start))
        basis[np.arange(start, stop), np.arange(stop - start)] = 1.0
        b, c = metric_arrays(metric, basis, structure, bsv_params)
        blocks[:, start:stop] = b
        clients[:, start:stop] = c
    return CoefficientTable(structure, metric, clients, blocks)


def closed_form_sv_client_coeffs(structure: GameStructure) -> CoefficientTable:
    """Client-level Shapley coefficients from their closed form."""
    n = structure.total_blocks
    size = structure.num_subsets
    pc = popcounts(n)
    out = np.zeros((structure.num_clients, size))
    masks = np.arange(size)
    for i, own in enumerate(structure.client_masks):
        d_i = structure.blocks_per_client[i]
        own_in = popcounts(n)[masks & own]
        for mask in range(1, size - 1):
            s = int(pc[mask])
            # (s-1)!(n-s-1)!/n! == 1 / (n (n-1) C(n-2, s-1))
            ratio = 1.0 / (n * (n - 1) * math.comb(n - 2, s - 1))
            out[i, mask] = (int(own_in[mask]) * n - d_i * s) * ratio
        out[i, size - 1] = d_i / n
        out[i, 0] = -d_i / n
    return CoefficientTable(structure, "sv", out)
