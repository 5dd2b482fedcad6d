"""Config-driven reproduction pipeline: honest valuation, attack, downstream effects."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from collections.abc import Callable
from pathlib import Path
from typing import Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from fedval import downstream as ds
from fedval.attack import (
    AttackAction,
    AttackPlan,
    SubsetPrior,
    empirical_values,
    execute_attack,
    plan_attack,
    plan_attack_incomplete,
)
from fedval.game import DEFAULT_ENUMERATION_CAP, GameStructure, NonFiniteUtilityError, build_utility_table, is_client_union
from fedval.flsim import FLConfig, FLOracle, generate_synthetic
from fedval.valuation import METRICS, CoefficientTable, closed_form_sv_client_coeffs, extract_coefficients

log = logging.getLogger(__name__)

SELECTIONS = ("topk", "above_average", "above_median")
REWARDS = ("proportional", "balanced")


class ConfigError(ValueError):
    def __init__(self, diagnostics: list[str]):
        super().__init__("invalid config:\n" + "\n".join(f"  {d}" for d in diagnostics))
        self.diagnostics = diagnostics


class RunError(RuntimeError):
    pass


# config ----------------------------------------------------------------


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class StructureSpec(_Section):
    blocks_per_client: list[int] = Field(default=[3, 3, 3], min_length=1)
    enumeration_cap: int = Field(default=DEFAULT_ENUMERATION_CAP, ge=1)

    @field_validator("blocks_per_client")
    @classmethod
    def _positive(cls, v):
        bad = [m for m in v if m < 1]
        if bad:
            raise ValueError(f"every client needs at least one block, got {v}")
        return v

    @model_validator(mode="after")
    def _cap(self):
        if sum(self.blocks_per_client) > self.enumeration_cap:
            raise ValueError(
                f"{sum(self.blocks_per_client)} blocks exceeds enumeration_cap={self.enumeration_cap}"
            )
        return self

    def build(self) -> GameStructure:
        return GameStructure(tuple(self.blocks_per_client), cap=self.enumeration_cap)


class DatasetSpec(_Section):
    dim: int = Field(default=10, ge=2)
    classes: int = Field(default=3, ge=2)
    samples_per_block: int = Field(default=200, ge=1)
    skew: float = Field(default=0.6, ge=0.0, le=1.0)
    separation: float = Field(default=0.4, gt=0.0)
    validation_size: int = Field(default=600, ge=1)
    label_noise: float = Field(default=0.3, ge=0.0, le=1.0)


class FLSpec(_Section):
    rounds: int = Field(default=3, ge=1)
    local_epochs: int = Field(default=3, ge=1)
    learning_rate: float = Field(default=0.05, gt=0.0)
    batch_size: int = Field(default=32, ge=1)


class AttackSpec(_Section):
    enabled: bool = True
    attacker: Union[Literal["random"], int] = "random"
    knowledge: Literal["exact", "incomplete"] = "exact"


class BetaSpec(_Section):
    alpha: float = Field(default=16.0, gt=0.0)
    beta: float = Field(default=1.0, gt=0.0)


class ExperimentConfig(_Section):
    structure: StructureSpec = StructureSpec()
    dataset: DatasetSpec = DatasetSpec()
    fl: FLSpec = FLSpec()
    metrics: list[Literal["sv", "loo", "bsv", "bv", "tsv"]] = Field(default=list(METRICS), min_length=1)
    bsv: BetaSpec = BetaSpec()
    attack: AttackSpec = AttackSpec()
    utility: Literal["accuracy", "negloss"] = "accuracy"
    subtract_baseline: bool = False
    rewards: list[Literal["proportional", "balanced"]] = Field(default=list(REWARDS))
    reward_total: float = Field(default=1.0, gt=0.0)
    selections: list[Literal["topk", "above_average", "above_median"]] = Field(default=list(SELECTIONS))
    topk_draws: int = Field(default=5, ge=1)
    runs: int = Field(default=15, ge=1)
    seed: int = Field(default=0, ge=0)
    output_dir: str | None = None

    @model_validator(mode="after")
    def _cross(self):
        n_clients = len(self.structure.blocks_per_client)
        if isinstance(self.attack.attacker, int) and not 0 <= self.attack.attacker < n_clients:
            raise ValueError(f"attack.attacker={self.attack.attacker} is not a client index (0..{n_clients - 1})")
        if "topk" in self.selections and sum(self.structure.blocks_per_client) < 2:
            raise ValueError("topk selection needs at least 2 blocks")
        return self


def _diagnostics(err: ValidationError) -> list[str]:
    out = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        got = e.get("input")
        shown = "" if isinstance(got, dict) else f" (got {got!r})"
        out.append(f"{loc}: {e['msg']}{shown}")
    return out


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError([f"line {exc.lineno}, column {exc.colno}: {exc.msg}"]) from exc
    if not isinstance(raw, dict):
        raise ConfigError(["<root>: config must be a JSON object"])
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_diagnostics(exc)) from exc


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def validate_config(path) -> list[str]:
    """Every violated constraint of the config at ``path``; empty when valid."""
    text = Path(path).read_text()
    try:
        parse_config(text)
    except ConfigError as exc:
        return exc.diagnostics
    return []


# runs ------------------------------------------------------------------


def run_seed(master: int, run: int) -> int:
    return int(np.random.SeedSequence([master, run]).generate_state(1)[0])


def _strategies(config: ExperimentConfig, n_blocks: int, rng: np.random.Generator) -> dict[str, list]:
    out = {}
    for name in config.selections:
        if name == "topk":
            ks = rng.integers(1, n_blocks, size=config.topk_draws)
            out[name] = [ds.TopK(int(k)) for k in ks]
        elif name == "above_average":
            out[name] = [ds.AboveAverage()]
        else:
            out[name] = [ds.AboveMedian()]
    return out


def _schemes(config: ExperimentConfig) -> dict[str, object]:
    return {
        name: ds.Proportional(config.reward_total) if name == "proportional" else ds.Balanced()
        for name in config.rewards
    }


def _reward_or_nan(valuation, scheme):
    try:
        return ds.allocate_rewards(valuation, scheme)
    except ds.DegenerateAllocationError:
        return np.full(valuation.block_values.shape, np.nan)


def _valuation_error_or_nan(attacked, truthful) -> float:
    try:
        return ds.valuation_error(attacked, truthful)
    except ds.UndefinedNormalizationError:
        return math.nan


def _plan(config, coeffs: CoefficientTable, attacker: int) -> AttackPlan:
    structure = coeffs.structure
    if not config.attack.enabled:
        return AttackPlan.honest(structure, attacker)
    if config.attack.knowledge == "exact":
        return plan_attack(coeffs, attacker, structure)
    return plan_attack_incomplete(coeffs, attacker, structure, SubsetPrior.uniform(structure, attacker))


def execute_run(config: ExperimentConfig, run: int, coeffs: dict[str, CoefficientTable]) -> dict:
    """One repetition: fresh data, honest table, attack per metric, downstream measures."""
    seed = run_seed(config.seed, run)
    rng = np.random.default_rng(seed)
    structure = config.structure.build()
    attacker = (
        int(rng.integers(structure.num_clients))
        if config.attack.attacker == "random"
        else int(config.attack.attacker)
    )
    strategies = _strategies(config, structure.total_blocks, rng)
    schemes = _schemes(config)

    dataset = generate_synthetic(structure, seed=seed, **config.dataset.model_dump())
    fl = FLConfig(seed=seed, **config.fl.model_dump())
    oracle = FLOracle(dataset, fl, attacker, config.utility, config.subtract_baseline)
    honest = build_utility_table(oracle, structure)

    out = {"run": run, "seed": seed, "attacker": attacker, "grand_utility": honest.grand, "metrics": {}}
    for metric in config.metrics:
        table = coeffs[metric]
        plan = _plan(config, table, attacker)
        attacked_table = execute_attack(plan, oracle, honest)
        truthful = empirical_values(metric, table, honest)
        attacked = empirical_values(metric, table, attacked_table)

        row = {
            "n_positive": plan.count(AttackAction.POSITIVE),
            "n_negative": plan.count(AttackAction.NEGATIVE),
            "phi_attacker": float(truthful.client_values[attacker]),
            "phihat_attacker": float(attacked.client_values[attacker]),
            "phi_others": truthful.others(attacker),
            "phihat_others": attacked.others(attacker),
        }
        row["change_attacker_pct"] = ds.symmetric_percentage_change(row["phihat_attacker"], row["phi_attacker"])
        row["change_others_pct"] = ds.symmetric_percentage_change(row["phihat_others"], row["phi_others"])
        row["valuation_error"] = _valuation_error_or_nan(attacked, truthful)

        rewards = {}
        for name, scheme in schemes.items():
            r_true = _reward_or_nan(truthful, scheme)
            r_att = _reward_or_nan(attacked, scheme)
            own = structure.client_masks[attacker]
            mine = [b for b in range(structure.total_blocks) if own >> b & 1]
            row[f"reward_{name}_attacker"] = float(r_true[mine].sum())
            row[f"rewardhat_{name}_attacker"] = float(r_att[mine].sum())
            rewards[name] = {"truthful": r_true.tolist(), "attacked": r_att.tolist()}

        selections = {}
        for name, strats in strategies.items():
            declines = [ds.utility_decline(truthful, attacked, s, honest.__getitem__) for s in strats]
            row[f"decline_{name}_pct"] = float(np.mean(declines))
            selections[name] = [
                {
                    "strategy": repr(s),
                    "honest": ds.select_blocks(truthful, s),
                    "attacked": ds.select_blocks(attacked, s),
                    "decline_pct": d,
                }
                for s, d in zip(strats, declines)
            ]

        out["metrics"][metric] = {
            "row": row,
            "truthful": truthful.to_dict(),
            "attacked": attacked.to_dict(),
            "rewards": rewards,
            "selections": selections,
        }
    out["retrainings"] = oracle.retrainings
    return out


def _run_safely(args) -> dict:
    config, run, coeffs = args
    try:
        return execute_run(config, run, coeffs)
    except NonFiniteUtilityError as exc:
        raise RunError(f"run {run}: non-finite utility at mask {exc.mask}") from exc
    except (ArithmeticError, FloatingPointError, ValueError) as exc:
        raise RunError(f"run {run}: {exc}") from exc


def aggregate(runs: list[dict], metrics) -> dict:
    """Mean and standard error of every numeric per-run column, per metric."""
    out = {}
    for metric in metrics:
        columns: dict[str, list[float]] = {}
        for r in runs:
            for key, value in r["metrics"][metric]["row"].items():
                columns.setdefault(key, []).append(float(value))
        out[metric] = {key: summarize(values) for key, values in columns.items()}
    return out


def summarize(values) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    n = arr.size
    stderr = float(np.std(arr, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return {"mean": float(np.mean(arr)), "stderr": stderr, "n": n}


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> dict:
    structure = config.structure.build()
    bsv = (config.bsv.alpha, config.bsv.beta)
    coeffs = {m: extract_coefficients(m, structure, bsv) for m in config.metrics}
    tasks = [(config, r, coeffs) for r in range(config.runs)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_run_safely, tasks))
    else:
        runs = [_run_safely(t) for t in tasks]
    for r in runs:
        log.info("run %d: attacker=%d retrainings=%d", r["run"], r["attacker"], r["retrainings"])
    return {
        "config": config.model_dump(mode="json"),
        "runs": runs,
        "aggregate": aggregate(runs, config.metrics),
    }


CSV_PREFIX = ["run", "seed", "attacker", "metric", "grand_utility"]


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = None
    for r in report["runs"]:
        for metric, entry in r["metrics"].items():
            row = entry["row"]
            if header is None:
                header = CSV_PREFIX + list(row)
                writer.writerow(header)
            values = [r["run"], r["seed"], r["attacker"], metric, repr(float(r["grand_utility"]))]
            values += [repr(float(v)) if isinstance(v, float) else v for v in row.values()]
            writer.writerow(values)
    return buf.getvalue()


def write_report(report: dict, out_dir, fmt: str = "both") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt in ("json", "both"):
        path = out_dir / "report.json"
        path.write_text(json.dumps(report, indent=1) + "\n")
        written.append(path)
    if fmt in ("csv", "both"):
        path = out_dir / "report.csv"
        path.write_text(report_csv(report))
        written.append(path)
    return written


# coefficient dump ------------------------------------------------------


def coefficient_dump(config: ExperimentConfig, metric: str) -> tuple[CoefficientTable, dict, Callable]:
    """Coefficients plus the exact-knowledge action every client would take."""
    structure = config.structure.build()
    table = extract_coefficients(metric, structure, (config.bsv.alpha, config.bsv.beta))
    plans = [plan_attack(table, c, structure) for c in range(structure.num_clients)]

    def actions(mask):
        if mask == structure.full_mask:
            return ["grand"] * structure.num_clients
        return [p.action(mask).value for p in plans]

    checks: dict = {}
    if metric == "sv":
        gap = float(np.abs(closed_form_sv_client_coeffs(structure).client_coeffs - table.client_coeffs).max())
        checks["closed_form_max_gap"] = gap
        checks["closed_form_check"] = gap <= 1e-9
    if metric == "tsv":
        off = [m for m in range(structure.num_subsets) if not is_client_union(m, structure)]
        worst = float(np.abs(table.client_coeffs[:, off]).max()) if off else 0.0
        checks["client_union_support_max"] = worst
        checks["client_union_support_check"] = worst < 1e-12
    return table, checks, actions


def write_coefficients(config: ExperimentConfig, metric: str, out_dir, fmt: str = "both") -> list[Path]:
    table, checks, actions = coefficient_dump(config, metric)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt in ("json", "both"):
        path = out_dir / f"coeffs_{metric}.json"
        path.write_text(table.to_json(actions, extra={"checks": checks}) + "\n")
        written.append(path)
    if fmt in ("csv", "both"):
        path = out_dir / f"coeffs_{metric}.csv"
        path.write_text(table.to_csv(actions))
        written.append(path)
    return written
