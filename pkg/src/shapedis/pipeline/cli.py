"""`shapedis` command group: one subcommand per pipeline stage.

Commands resolve a run directory as $SHAPEDIS_RUNS_DIR/<run-id> (default
./runs), take an exclusive lock while writing, and leave all provenance in
the run's manifest. Configuration comes from a TOML file; --seed overrides
every section's seed so one flag reruns the whole pipeline elsewhere in
seed space.
"""

from __future__ import annotations

import functools
import json
import os
from pathlib import Path

import click

from ..errors import ShapedisError
from .config import ABLATIONS, PipelineConfig, load_config, override_seed
from .manifest import RunLock, find_orphans, load_manifest
from .reproduce import TABLES, desk_config, run_reproduce
from .stages import (
    LABEL_POLICIES,
    prepare_run,
    run_cluster,
    run_eval,
    run_make_data,
    run_train_stage1,
    run_train_stage2,
    run_traverse,
)

DEFAULT_RUNS_DIR = "runs"


def runs_root() -> Path:
    return Path(os.environ.get("SHAPEDIS_RUNS_DIR", DEFAULT_RUNS_DIR))


def resolve_run_dir(run_id: str) -> Path:
    return runs_root() / run_id


def friendly_errors(fn):
    """Package errors become exit-code-1 messages instead of tracebacks."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ShapedisError as exc:
            raise click.ClickException(str(exc)) from exc

    return wrapper


def common_options(fn):
    fn = click.option(
        "--deterministic/--no-deterministic",
        default=True,
        show_default=True,
        help="Single-threaded, bitwise-stable math.",
    )(fn)
    fn = click.option("--seed", type=int, default=None, help="Override every config seed.")(fn)
    fn = click.option(
        "--run-id", default="default", show_default=True, help="Run directory name."
    )(fn)
    fn = click.option(
        "--config",
        "config_path",
        type=click.Path(path_type=Path),
        default=None,
        help="TOML config file; defaults apply when omitted.",
    )(fn)
    return fn


def _resolve(config_path, seed, deterministic) -> PipelineConfig:
    config = load_config(config_path)
    if seed is not None:
        config = override_seed(config, seed)
    prepare_run(deterministic, seed)
    return config


@click.group()
def main() -> None:
    """Two-stage shape pipeline: data, training, clustering, evaluation."""


@main.command("make-data")
@common_options
@click.option("--force", is_flag=True, help="Replace an existing non-empty data directory.")
@friendly_errors
def make_data(config_path, run_id, seed, deterministic, force):
    """Generate the synthetic cohort for a run."""
    config = _resolve(config_path, seed, deterministic)
    run_dir = resolve_run_dir(run_id)
    with RunLock(run_dir):
        manifest = run_make_data(config, run_dir, force=force)
    click.echo(
        f"wrote {config.geometry.n_shapes} shapes to {run_dir} "
        f"({manifest.timings['make-data']:.1f}s)"
    )


@main.command("train-stage1")
@common_options
@friendly_errors
def train_stage1_cmd(config_path, run_id, seed, deterministic):
    """Fit the shape-code decoder on the run's SDF samples."""
    config = _resolve(config_path, seed, deterministic)
    run_dir = resolve_run_dir(run_id)
    with RunLock(run_dir):
        manifest = run_train_stage1(config, run_dir)
    click.echo(
        f"stage-1 checkpoint written to {run_dir / 'stage1.pt'} "
        f"({manifest.timings['train-stage1']:.1f}s)"
    )


@main.command("cluster")
@common_options
@friendly_errors
def cluster_cmd(config_path, run_id, seed, deterministic):
    """Cluster stage-1 codes into pseudo disease labels."""
    config = _resolve(config_path, seed, deterministic)
    run_dir = resolve_run_dir(run_id)
    with RunLock(run_dir):
        run_cluster(config, run_dir)
    report = json.loads((run_dir / "cluster_report.json").read_text())
    purity = report.get("purity")
    msg = f"pseudo labels written to {run_dir / 'pseudo_labels.csv'}"
    if purity is not None:
        msg += f" (purity {purity:.1f}%)"
    click.echo(msg)


@main.command("train-stage2")
@common_options
@click.option(
    "--ablation",
    type=click.Choice(ABLATIONS),
    default="none",
    show_default=True,
    help="Objective reduction to train instead of the full model.",
)
@click.option(
    "--labels",
    "labels_policy",
    type=click.Choice(LABEL_POLICIES),
    default="pseudo",
    show_default=True,
    help="Disease supervision source.",
)
@friendly_errors
def train_stage2_cmd(config_path, run_id, seed, deterministic, ablation, labels_policy):
    """Fit the disentangling code VAE against the frozen stage-1 decoder."""
    config = _resolve(config_path, seed, deterministic)
    run_dir = resolve_run_dir(run_id)
    with RunLock(run_dir):
        manifest = run_train_stage2(
            config, run_dir, ablation=ablation, labels_policy=labels_policy
        )
    stage = f"train-stage2:{ablation}"
    click.echo(f"stage-2 [{ablation}] trained ({manifest.timings[stage]:.1f}s)")


@main.command("eval")
@common_options
@click.option(
    "--ablation",
    type=click.Choice(ABLATIONS),
    default="none",
    show_default=True,
    help="Which trained stage-2 variant to score.",
)
@friendly_errors
def eval_cmd(config_path, run_id, seed, deterministic, ablation):
    """Score latent separation, kNN prediction, and reconstruction."""
    config = _resolve(config_path, seed, deterministic)
    run_dir = resolve_run_dir(run_id)
    with RunLock(run_dir):
        run_eval(config, run_dir, ablation=ablation)
    suffix = "" if ablation == "none" else f"_{ablation}"
    metrics_path = run_dir / f"metrics{suffix}.json"
    blob = json.loads(metrics_path.read_text())
    click.echo(f"metrics written to {metrics_path}")
    click.echo(
        "disease SAP (test) "
        f"{blob['disease']['sap']['test']:.3f}, "
        "age SAP (test) "
        f"{blob['age']['sap']['test']:.3f}"
    )


@main.command("traverse")
@common_options
@click.option(
    "--ablation",
    type=click.Choice(ABLATIONS),
    default="none",
    show_default=True,
    help="Which trained stage-2 variant to traverse.",
)
@friendly_errors
def traverse_cmd(config_path, run_id, seed, deterministic, ablation):
    """Sweep each designated latent coordinate and export the mesh series."""
    config = _resolve(config_path, seed, deterministic)
    run_dir = resolve_run_dir(run_id)
    with RunLock(run_dir):
        run_traverse(config, run_dir, ablation=ablation)
    report_path = run_dir / "traversals" / f"report_{ablation}.json"
    blob = json.loads(report_path.read_text())
    click.echo(f"traversal report written to {report_path}")
    for factor, entry in blob["coords"].items():
        rho = entry.get("volume_spearman")
        rho_txt = "n/a" if rho is None else f"{rho:+.2f}"
        click.echo(f"  {factor}: volume spearman {rho_txt}, {entry['n_empty']} empty")


@main.command("orphans")
@click.option("--run-id", default="default", show_default=True, help="Run directory name.")
@friendly_errors
def orphans_cmd(run_id):
    """List files in a run directory that no manifest entry accounts for."""
    run_dir = resolve_run_dir(run_id)
    orphans = find_orphans(run_dir)
    if not orphans:
        click.echo(f"{run_dir}: no orphans")
        return
    for rel in orphans:
        click.echo(rel)
    raise SystemExit(1)


@main.command("reproduce")
@click.option(
    "--table",
    type=click.Choice([str(t) for t in TABLES]),
    required=True,
    help="Which comparison grid to run.",
)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option(
    "--deterministic/--no-deterministic", default=True, show_default=True
)
@click.option(
    "--budget-minutes",
    type=float,
    default=None,
    help="Wall-clock cap; cells past it are marked skipped in the report.",
)
@friendly_errors
def reproduce_cmd(table, seed, deterministic, budget_minutes):
    """Run a desk-scale comparison grid and print it next to reference rows."""
    prepare_run(deterministic, seed)
    config = desk_config(seed)
    out_dir = resolve_run_dir(f"repro-table{table}")
    with RunLock(out_dir):
        text = run_reproduce(int(table), out_dir, config=config, budget_minutes=budget_minutes)
    click.echo(text)
    click.echo(f"report bundle in {out_dir}")


@main.command("status")
@click.option("--run-id", default="default", show_default=True, help="Run directory name.")
@friendly_errors
def status_cmd(run_id):
    """Show a run's completed stages and timings."""
    run_dir = resolve_run_dir(run_id)
    manifest = load_manifest(run_dir)
    click.echo(f"run {manifest.run_id} (config {manifest.config_hash[:12]})")
    for stage in manifest.completed:
        timing = manifest.timings.get(stage)
        suffix = "" if timing is None else f" ({timing:.1f}s)"
        click.echo(f"  {stage}{suffix}")
    if not manifest.completed:
        click.echo("  no stages completed")


if __name__ == "__main__":
    main()
