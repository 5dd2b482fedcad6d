"""Deterministic desk-scale federated learning used as a utility oracle.

Clients hold Gaussian-mixture data blocks with Dirichlet-skewed class
proportions.  A multinomial logistic regression is trained with FedAvg: each
round, every participating client runs minibatch SGD from the current global
model and the server averages the local models weighted by sample count.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numba
import numpy as np

from fedval.attack import AttackAction, AttackPlan
from fedval.game import GameStructure, blocks_of


@dataclass(frozen=True)
class FLConfig:
    rounds: int = 3
    local_epochs: int = 3
    learning_rate: float = 0.001
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError(f"rounds, local_epochs and batch_size must be positive: {self}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    structure: GameStructure
    dim: int
    classes: int
    samples_per_block: int
    skew: float
    seed: int
    separation: float = 1.0
    validation_size: int = 600
    label_noise: float = 0.0
    block_x: tuple[np.ndarray, ...] = field(default=(), repr=False)
    block_y: tuple[np.ndarray, ...] = field(default=(), repr=False)
    val_x: np.ndarray = field(default=None, repr=False)
    val_y: np.ndarray = field(default=None, repr=False)

    def spec(self) -> dict:
        return {
            "seed": self.seed,
            "dim": self.dim,
            "classes": self.classes,
            "samples_per_block": self.samples_per_block,
            "skew": self.skew,
            "separation": self.separation,
            "validation_size": self.validation_size,
            "label_noise": self.label_noise,
            "structure": self.structure.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.spec())

    @classmethod
    def from_json(cls, text: str) -> "SyntheticDataset":
        doc = json.loads(text)
        structure = GameStructure(tuple(doc.pop("structure")["blocks_per_client"]))
        return generate_synthetic(structure, **doc)

    def to_csv(self) -> str:
        """Raw samples, one row each; ``block`` is -1 for the validation set."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["block", "label"] + [f"x{k}" for k in range(self.dim)])
        parts = list(enumerate(zip(self.block_x, self.block_y))) + [(-1, (self.val_x, self.val_y))]
        for b, (xs, ys) in parts:
            for x, y in zip(xs, ys):
                writer.writerow([b, int(y)] + [repr(float(v)) for v in x])
        return buf.getvalue()

    def class_histogram(self, block: int) -> np.ndarray:
        return np.bincount(self.block_y[block], minlength=self.classes) / len(self.block_y[block])


def generate_synthetic(
    structure: GameStructure,
    dim: int = 10,
    classes: int = 3,
    samples_per_block: int = 200,
    skew: float = 0.6,
    seed: int = 0,
    separation: float = 1.0,
    validation_size: int = 600,
    label_noise: float = 0.0,
    concentration: float = 0.3,
) -> SyntheticDataset:
    """Non-IID blocks: class proportions ``(1 - skew) * uniform + skew * Dirichlet``.

    With ``label_noise > 0`` each block also gets its own corruption rate drawn
    uniformly from ``[0, label_noise]``; that fraction of its labels is
    replaced by uniformly random classes, so blocks differ in quality.
    """
    if classes < 2 or dim < 2:
        raise ValueError(f"need classes >= 2 and dim >= 2, got classes={classes}, dim={dim}")
    if samples_per_block < 1 or validation_size < 1:
        raise ValueError("samples_per_block and validation_size must be positive")
    if not 0.0 <= skew <= 1.0:
        raise ValueError(f"skew must lie in [0, 1], got {skew}")
    if not 0.0 <= label_noise <= 1.0:
        raise ValueError(f"label_noise must lie in [0, 1], got {label_noise}")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, separation, size=(classes, dim))

    def draw(proportions, n):
        counts = rng.multinomial(n, proportions)
        y = np.repeat(np.arange(classes), counts)[rng.permutation(n)]
        x = means[y] + rng.normal(size=(n, dim))
        return x, y

    uniform = np.full(classes, 1.0 / classes)
    xs, ys = [], []
    for _ in range(structure.total_blocks):
        p = (1.0 - skew) * uniform + skew * rng.dirichlet(np.full(classes, concentration))
        x, y = draw(p / p.sum(), samples_per_block)
        if label_noise > 0:
            flip = rng.random(samples_per_block) < rng.uniform(0.0, label_noise)
            y = np.where(flip, rng.integers(classes, size=samples_per_block), y)
        xs.append(x)
        ys.append(y)
    val_x, val_y = draw(uniform, validation_size)
    return SyntheticDataset(
        structure, dim, classes, samples_per_block, float(skew), int(seed), float(separation),
        validation_size, float(label_noise), tuple(xs), tuple(ys), val_x, val_y,
    )


@dataclass(frozen=True, eq=False)
class LinearModel:
    weights: np.ndarray  # (classes, dim)
    bias: np.ndarray  # (classes,)

    @classmethod
    def zeros(cls, classes: int, dim: int) -> "LinearModel":
        return cls(np.zeros((classes, dim)), np.zeros(classes))

    def logits(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weights.T + self.bias

    def same_as(self, other: "LinearModel") -> bool:
        return self.weights.tobytes() == other.weights.tobytes() and self.bias.tobytes() == other.bias.tobytes()


@numba.njit(cache=True)
def _sgd(weights, bias, x, y, order, epochs, lr, batch):
    n, d = x.shape
    k = weights.shape[0]
    grad_w = np.empty_like(weights)
    grad_b = np.empty_like(bias)
    probs = np.empty(k)
    for e in range(epochs):
        base = e * n
        for start in range(0, n, batch):
            stop = min(n, start + batch)
            grad_w[:] = 0.0
            grad_b[:] = 0.0
            for r in range(start, stop):
                i = order[base + r]
                top = -np.inf
                for c in range(k):
                    z = bias[c]
                    for j in range(d):
                        z += weights[c, j] * x[i, j]
                    probs[c] = z
                    if z > top:
                        top = z
                total = 0.0
                for c in range(k):
                    probs[c] = np.exp(probs[c] - top)
                    total += probs[c]
                for c in range(k):
                    g = probs[c] / total
                    if c == y[i]:
                        g -= 1.0
                    grad_b[c] += g
                    for j in range(d):
                        grad_w[c, j] += g * x[i, j]
            scale = lr / (stop - start)
            for c in range(k):
                bias[c] -= scale * grad_b[c]
                for j in range(d):
                    weights[c, j] -= scale * grad_w[c, j]


def _concat(dataset: SyntheticDataset, blocks: list[int]) -> tuple[np.ndarray, np.ndarray]:
    x = np.concatenate([dataset.block_x[b] for b in blocks])
    y = np.concatenate([dataset.block_y[b] for b in blocks])
    return x, y


def honest_data(dataset: SyntheticDataset, client: int, mask: int):
    own = mask & dataset.structure.client_masks[client]
    return _concat(dataset, blocks_of(own))


def positive_augment(dataset: SyntheticDataset, attacker: int, mask: int):
    """The attacker trains on its whole local dataset regardless of ``mask``."""
    if not mask & dataset.structure.client_masks[attacker]:
        raise ValueError(f"attacker {attacker} owns no block of mask {mask}")
    return _concat(dataset, dataset.structure.client_blocks_of(attacker))


def negative_augment(dataset: SyntheticDataset, attacker: int, mask: int):
    """The attacker's blocks in ``mask`` with every feature vector negated."""
    if not mask & dataset.structure.client_masks[attacker]:
        raise ValueError(f"attacker {attacker} owns no block of mask {mask}")
    x, y = honest_data(dataset, attacker, mask)
    return -x, y


_AUGMENT = {
    AttackAction.HONEST: lambda ds, c, m: honest_data(ds, c, m),
    AttackAction.POSITIVE: positive_augment,
    AttackAction.NEGATIVE: negative_augment,
}


def fedavg_train(
    dataset: SyntheticDataset,
    mask: int,
    config: FLConfig,
    augment: dict[int, AttackAction] | None = None,
) -> LinearModel:
    """Train on the blocks in ``mask``; ``augment`` maps client -> action."""
    if mask == 0:
        raise ValueError("cannot train on an empty subset")
    structure = dataset.structure
    augment = augment or {}
    participants = [c for c in range(structure.num_clients) if mask & structure.client_masks[c]]
    local_data = [_AUGMENT[augment.get(c, AttackAction.HONEST)](dataset, c, mask) for c in participants]
    counts = np.array([len(y) for _, y in local_data], dtype=np.float64)

    model = LinearModel.zeros(dataset.classes, dataset.dim)
    for t in range(config.rounds):
        locals_w = np.empty((len(participants),) + model.weights.shape)
        locals_b = np.empty((len(participants),) + model.bias.shape)
        for slot, (client, (x, y)) in enumerate(zip(participants, local_data)):
            rng = np.random.default_rng([config.seed, t, client])
            order = np.concatenate([rng.permutation(len(y)) for _ in range(config.local_epochs)])
            w = model.weights.copy()
            b = model.bias.copy()
            _sgd(w, b, x, y, order, config.local_epochs, float(config.learning_rate), int(config.batch_size))
            locals_w[slot] = w
            locals_b[slot] = b
        share = counts / counts.sum()
        model = LinearModel(np.tensordot(share, locals_w, axes=1), share @ locals_b)
    return model


def model_utility(model: LinearModel, dataset: SyntheticDataset, kind: str = "accuracy") -> float:
    """Validation accuracy, or negative mean cross-entropy for ``kind="negloss"``."""
    logits = model.logits(dataset.val_x)
    if kind == "accuracy":
        return float(np.mean(np.argmax(logits, axis=1) == dataset.val_y))
    if kind == "negloss":
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1))
        picked = shifted[np.arange(len(dataset.val_y)), dataset.val_y]
        # exactly rounded sum: the uniform predictor scores exactly -ln K
        return math.fsum(picked - log_norm) / len(picked)
    raise ValueError(f"unknown utility kind {kind!r}")


class FLOracle:
    """Attack-aware utility oracle backed by FedAvg retraining.

    ``oracle(mask, action)`` retrains on ``mask`` with the attacker applying
    ``action``; results are memoized per distinct training input, so an
    inflation that leaves the attacker's data unchanged reuses the honest run.
    """

    def __init__(
        self,
        dataset: SyntheticDataset,
        config: FLConfig,
        attacker: int | None = None,
        kind: str = "accuracy",
        subtract_baseline: bool = False,
    ):
        self.dataset = dataset
        self.config = config
        self.attacker = attacker
        self.kind = kind
        self.baseline = (
            model_utility(LinearModel.zeros(dataset.classes, dataset.dim), dataset, kind)
            if subtract_baseline
            else 0.0
        )
        self._memo: dict[tuple[int, str], float] = {}
        self.retrainings = 0

    def _key(self, mask: int, action: AttackAction) -> tuple[int, AttackAction]:
        if action is AttackAction.HONEST or self.attacker is None:
            return mask, AttackAction.HONEST
        own = self.dataset.structure.client_masks[self.attacker]
        if not mask & own:
            return mask, AttackAction.HONEST
        if action is AttackAction.POSITIVE and mask & own == own:
            return mask, AttackAction.HONEST
        return mask, action

    def __call__(self, mask: int, action: AttackAction = AttackAction.HONEST) -> float:
        if mask == 0:
            return 0.0
        key = self._key(mask, action)
        if key not in self._memo:
            augment = {self.attacker: key[1]} if key[1] is not AttackAction.HONEST else None
            model = fedavg_train(self.dataset, mask, self.config, augment)
            self._memo[key] = model_utility(model, self.dataset, self.kind) - self.baseline
            self.retrainings += 1
        return self._memo[key]


def fl_utility_oracle(
    dataset: SyntheticDataset,
    config: FLConfig,
    plan: AttackPlan | None = None,
    kind: str = "accuracy",
    subtract_baseline: bool = False,
):
    """Plain ``mask -> utility`` oracle; with ``plan`` the attacker follows it."""
    attacker = plan.attacker if plan is not None else None
    inner = FLOracle(dataset, config, attacker, kind, subtract_baseline)
    full = dataset.structure.full_mask

    def oracle(mask: int) -> float:
        if plan is None or mask == full:
            return inner(mask)
        return inner(mask, plan.action(mask))

    oracle.inner = inner
    return oracle
