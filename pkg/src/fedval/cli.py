"""Command line entry point: ``fedval run|validate|coeffs``."""

from __future__ import annotations

import logging
import os
import sys
import time

import click

from fedval.experiment import (
    ConfigError,
    RunError,
    load_config,
    run_experiment,
    validate_config,
    write_coefficients,
    write_report,
)
from fedval.valuation import METRICS

OUT_ENV = "FEDVAL_OUT_DIR"

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _load(path: str, seed: int | None):
    try:
        config = load_config(path)
    except ConfigError as exc:
        click.echo(str(exc), err=True)
        sys.exit(EXIT_CONFIG)
    if seed is not None:
        config = config.model_copy(update={"seed": seed})
    return config


def _out_dir(flag: str | None, config) -> str:
    return flag or config.output_dir or os.environ.get(OUT_ENV) or "results"


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log per-run progress.")
def main(verbose: bool):
    """Exact data valuation and data-overvaluation experiments on simulated FL."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None, help="Override the master seed.")
@click.option("--out", "out", default=None, help=f"Output directory (default: config, ${OUT_ENV}, ./results).")
@click.option("--jobs", type=click.IntRange(min=1), default=1, help="Parallel worker processes.")
@click.option("--format", "fmt", type=click.Choice(["json", "csv", "both"]), default="both")
def run(config: str, seed, out, jobs: int, fmt: str):
    """Run the experiment described by CONFIG and write report files."""
    cfg = _load(config, seed)
    start = time.perf_counter()
    try:
        report = run_experiment(cfg, jobs=jobs)
    except RunError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_RUNTIME)
    for path in write_report(report, _out_dir(out, cfg), fmt):
        click.echo(f"wrote {path}")
    click.echo(f"{cfg.runs} runs in {time.perf_counter() - start:.1f}s")
    for metric, cols in report["aggregate"].items():
        ch = cols["change_attacker_pct"]
        err = cols["valuation_error"]
        click.echo(
            f"  {metric:4s} attacker change {ch['mean']:+8.2f}% (se {ch['stderr']:.2f})"
            f"  valuation error {err['mean']:.4f}"
        )


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
def validate(config: str):
    """List every problem in CONFIG; exit 2 if there are any."""
    problems = validate_config(config)
    for p in problems:
        click.echo(p)
    if problems:
        sys.exit(EXIT_CONFIG)
    click.echo("ok")


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--metric", type=click.Choice(METRICS), required=True)
@click.option("--seed", type=int, default=None, help="Accepted for symmetry; coefficients do not depend on it.")
@click.option("--out", "out", default=None)
@click.option("--format", "fmt", type=click.Choice(["json", "csv", "both"]), default="both")
def coeffs(config: str, metric: str, seed, out, fmt: str):
    """Write the metric's coefficient table for the configured structure."""
    cfg = _load(config, seed)
    for path in write_coefficients(cfg, metric, _out_dir(out, cfg), fmt):
        click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
