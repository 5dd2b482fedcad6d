"""Game structure, subset masks and dense utility tables.

A subset of data blocks is an ``int`` bitmask: bit ``b`` set means block ``b``
is in the subset.  Utility tables are dense ``float64`` arrays indexed by mask.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_ENUMERATION_CAP = 20

UtilityOracle = Callable[[int], float]


class EnumerationLimitError(ValueError):
    """Raised when a game has too many blocks to enumerate every subset."""


class NonFiniteUtilityError(ArithmeticError):
    """Raised when a utility oracle returns NaN or infinity."""

    def __init__(self, mask: int, value: float):
        super().__init__(f"utility oracle returned {value!r} for mask {mask} ({mask:#b})")
        self.mask = mask
        self.value = value


@dataclass(frozen=True)
class GameStructure:
    """Partition of ``total_blocks`` data blocks among ``num_clients`` clients.

    Blocks are numbered contiguously, client by client: client 0 owns blocks
    ``0 .. M_0 - 1``, client 1 the next ``M_1`` and so on.
    """

    blocks_per_client: tuple[int, ...]
    cap: int = DEFAULT_ENUMERATION_CAP
    block_owner: tuple[int, ...] = field(init=False, repr=False)
    client_masks: tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self):
        counts = tuple(int(m) for m in self.blocks_per_client)
        if not counts:
            raise ValueError("a game needs at least one client")
        if any(m < 1 for m in counts):
            raise ValueError(f"every client needs at least one block, got {counts}")
        total = sum(counts)
        if total > self.cap:
            raise EnumerationLimitError(
                f"{total} blocks exceeds the enumeration cap of {self.cap}"
            )
        owner: list[int] = []
        masks: list[int] = []
        start = 0
        for client, m in enumerate(counts):
            owner.extend([client] * m)
            masks.append(((1 << m) - 1) << start)
            start += m
        object.__setattr__(self, "blocks_per_client", counts)
        object.__setattr__(self, "block_owner", tuple(owner))
        object.__setattr__(self, "client_masks", tuple(masks))

    @classmethod
    def from_owners(cls, block_owner: Sequence[int], cap: int = DEFAULT_ENUMERATION_CAP):
        """Rebuild a structure from a block -> client map (must be contiguous)."""
        owners = [int(o) for o in block_owner]
        if not owners:
            raise ValueError("empty block_owner")
        counts = [0] * (max(owners) + 1)
        for o in owners:
            counts[o] += 1
        structure = cls(tuple(counts), cap=cap)
        if list(structure.block_owner) != owners:
            raise ValueError(f"block_owner {owners} is not contiguous by client")
        return structure

    @property
    def num_clients(self) -> int:
        return len(self.blocks_per_client)

    @property
    def total_blocks(self) -> int:
        return len(self.block_owner)

    @property
    def num_subsets(self) -> int:
        return 1 << self.total_blocks

    @property
    def full_mask(self) -> int:
        return self.num_subsets - 1

    def client_blocks_of(self, client: int) -> list[int]:
        self._check_client(client)
        return [b for b, o in enumerate(self.block_owner) if o == client]

    def union_mask(self, clients) -> int:
        """Mask of every block owned by any client in ``clients``."""
        mask = 0
        for c in clients:
            self._check_client(c)
            mask |= self.client_masks[c]
        return mask

    def _check_client(self, client: int):
        if not 0 <= client < self.num_clients:
            raise IndexError(f"client {client} out of range for {self.num_clients} clients")

    def to_dict(self) -> dict:
        return {"blocks_per_client": list(self.blocks_per_client)}


def check_mask(mask: int, structure: GameStructure) -> int:
    if mask < 0 or mask > structure.full_mask:
        raise ValueError(f"mask {mask} has bits outside the {structure.total_blocks} blocks")
    return mask


def mask_of(blocks) -> int:
    mask = 0
    for b in blocks:
        mask |= 1 << b
    return mask


def blocks_of(mask: int) -> list[int]:
    out = []
    b = 0
    while mask:
        if mask & 1:
            out.append(b)
        mask >>= 1
        b += 1
    return out


def popcounts(n_bits: int) -> np.ndarray:
    """Popcount of every mask ``0 .. 2**n_bits - 1``."""
    pc = np.zeros(1 << n_bits, dtype=np.int64)
    for b in range(n_bits):
        pc[1 << b : 1 << (b + 1)] = pc[: 1 << b] + 1
    return pc


def enumerate_subsets(structure: GameStructure) -> Iterator[int]:
    """Yield every subset mask once, in ascending integer order."""
    if structure.total_blocks > structure.cap:
        raise EnumerationLimitError(
            f"{structure.total_blocks} blocks exceeds the enumeration cap of {structure.cap}"
        )
    return iter(range(structure.num_subsets))


def client_blocks(mask: int, client: int, structure: GameStructure) -> int:
    """The part of ``mask`` owned by ``client``."""
    structure._check_client(client)
    return mask & structure.client_masks[client]


def other_clients_blocks(mask: int, client: int, structure: GameStructure) -> int:
    """The part of ``mask`` owned by every client except ``client``."""
    return mask & ~client_blocks(mask, client, structure)


def is_full_client_subset(mask: int, client: int, structure: GameStructure) -> bool:
    """True when ``mask`` contains every block of ``client``."""
    structure._check_client(client)
    own = structure.client_masks[client]
    return mask & own == own


def clients_in(mask: int, structure: GameStructure) -> list[int]:
    """Clients owning at least one block of ``mask``."""
    return [c for c, cm in enumerate(structure.client_masks) if mask & cm]


def is_client_union(mask: int, structure: GameStructure) -> bool:
    """True when ``mask`` is a union of complete client block sets."""
    return all(mask & cm in (0, cm) for cm in structure.client_masks)


@dataclass(frozen=True, eq=False)
class UtilityTable:
    """Dense map from subset mask to utility with ``v(empty) = 0``."""

    structure: GameStructure
    values: np.ndarray
    attacked: bool = False

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.shape != (self.structure.num_subsets,):
            raise ValueError(
                f"expected {self.structure.num_subsets} utilities, got shape {values.shape}"
            )
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            raise NonFiniteUtilityError(int(bad[0]), float(values[bad[0]]))
        if values[0] != 0.0:
            raise ValueError(f"v(empty) must be 0, got {values[0]!r}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __getitem__(self, mask: int) -> float:
        return float(self.values[mask])

    def __len__(self) -> int:
        return len(self.values)

    @property
    def grand(self) -> float:
        return float(self.values[-1])

    def equals(self, other: "UtilityTable") -> bool:
        """Bitwise equality of utilities and identical structure."""
        return (
            self.structure.block_owner == other.structure.block_owner
            and self.values.tobytes() == other.values.tobytes()
        )

    # serialization -----------------------------------------------------

    def _header(self) -> dict:
        return {
            "total_blocks": self.structure.total_blocks,
            "block_owner": list(self.structure.block_owner),
            "attacked": self.attacked,
        }

    def to_json(self) -> str:
        doc = self._header()
        doc["rows"] = [[m, float(v)] for m, v in enumerate(self.values)]
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "UtilityTable":
        doc = json.loads(text)
        structure = GameStructure.from_owners(
            doc["block_owner"], cap=max(DEFAULT_ENUMERATION_CAP, doc["total_blocks"])
        )
        return cls(structure, _rows_to_values(structure, doc["rows"]), bool(doc.get("attacked")))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# " + json.dumps(self._header()) + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["mask", "utility"])
        for m, v in enumerate(self.values):
            writer.writerow([m, repr(float(v))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "UtilityTable":
        first, _, rest = text.partition("\n")
        if not first.startswith("#"):
            raise ValueError("utility CSV is missing its '# {...}' header line")
        header = json.loads(first[1:])
        structure = GameStructure.from_owners(
            header["block_owner"], cap=max(DEFAULT_ENUMERATION_CAP, header["total_blocks"])
        )
        reader = csv.DictReader(io.StringIO(rest))
        rows = [(int(r["mask"]), float(r["utility"])) for r in reader]
        return cls(structure, _rows_to_values(structure, rows), bool(header.get("attacked")))

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(self.to_csv() if path.suffix == ".csv" else self.to_json())

    @classmethod
    def load(cls, path) -> "UtilityTable":
        path = Path(path)
        text = path.read_text()
        return cls.from_csv(text) if path.suffix == ".csv" else cls.from_json(text)


def _rows_to_values(structure: GameStructure, rows) -> np.ndarray:
    values = np.full(structure.num_subsets, np.nan)
    for m, v in rows:
        values[check_mask(int(m), structure)] = v
    missing = np.flatnonzero(np.isnan(values))
    if missing.size:
        raise ValueError(f"utility rows missing for {missing.size} masks, first {missing[0]}")
    return values


def build_utility_table(oracle: UtilityOracle, structure: GameStructure) -> UtilityTable:
    """Evaluate ``oracle`` on every subset.  The empty subset is pinned to 0."""
    values = np.zeros(structure.num_subsets)
    for mask in enumerate_subsets(structure):
        if mask == 0:
            continue
        value = float(oracle(mask))
        if not math.isfinite(value):
            raise NonFiniteUtilityError(mask, value)
        values[mask] = value
    return UtilityTable(structure, values)


def table_from_function(fn: Callable[[list[int]], float], structure: GameStructure) -> UtilityTable:
    """Convenience: build a table from a function of the block list."""
    return build_utility_table(lambda m: fn(blocks_of(m)), structure)
