from __future__ import annotations

import logging
from pathlib import Path
from typing import NoReturn

import typer
from rich.console import Console
from rich.logging import RichHandler

from .config import resolve_config
from .domain import (
    AGGREGATIONS,
    REGULARIZATIONS,
    SPACES,
    CheckpointError,
    CheckpointMismatch,
    ConfigError,
    DataFormatError,
    KgballError,
    MetricsReport,
    TrainingDiverged,
    UnknownId,
)
from .services import RecommenderService
from .storage.fs import FileSystemCheckpointStore
from .util.render import render_config, render_metrics

app = typer.Typer(add_completion=False, no_args_is_help=True)

_USAGE_ERRORS = (ConfigError, DataFormatError, CheckpointError, CheckpointMismatch, UnknownId)


def _service() -> RecommenderService:
    return RecommenderService(FileSystemCheckpointStore())


def _fail(e: Exception) -> NoReturn:
    typer.secho(str(e), err=True, fg=typer.colors.RED)
    if isinstance(e, _USAGE_ERRORS | FileNotFoundError):
        raise typer.Exit(2)
    if isinstance(e, TrainingDiverged):
        raise typer.Exit(3)
    raise typer.Exit(1)


def _parse_list(value: str, kind: type, flag: str) -> list:
    try:
        items = [kind(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise typer.BadParameter(f"expected a comma-separated list, got {value!r}", param_hint=flag)
    if not items:
        raise typer.BadParameter("list is empty", param_hint=flag)
    return items


def _parse_ks(value: str) -> list[int]:
    ks = _parse_list(value, int, "--k")
    if any(k < 1 for k in ks):
        raise typer.BadParameter("every K must be >= 1", param_hint="--k")
    return ks


def _choice(value: str | None, allowed: tuple[str, ...], flag: str) -> str | None:
    if value is not None and value not in allowed:
        raise typer.BadParameter(f"must be one of {', '.join(allowed)}", param_hint=flag)
    return value


def _echo_report(report: MetricsReport, prefix: str = "") -> None:
    for k, (recall, ndcg) in sorted(report.metrics.items()):
        typer.echo(f"{prefix}{k}\t{recall!r}\t{ndcg!r}")


@app.callback()
def main(
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Log per-batch detail"),
    quiet: bool = typer.Option(False, "--quiet", "-q", help="Only log warnings and errors"),
) -> None:
    """Knowledge-graph regularized recommendation in the Poincaré ball."""
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


@app.command()
def train(
    interactions: Path = typer.Option(..., "--interactions", help="user<TAB>item file"),
    out: Path = typer.Option(..., "--out", help="Checkpoint to write"),
    triples: Path | None = typer.Option(None, "--triples", help="head<TAB>relation<TAB>tail file"),
    config: Path | None = typer.Option(None, "--config", help="Flat TOML config file"),
    history: Path | None = typer.Option(
        None, "--history", help="History log (default: <out>.history.csv)"
    ),
    seed: int | None = typer.Option(None, "--seed"),
    mode: str | None = typer.Option(None, "--mode", help="adaptive | fixed"),
    beta: float | None = typer.Option(None, "--beta", help="KG weight in fixed mode"),
    epochs: int | None = typer.Option(None, "--epochs"),
    space: str | None = typer.Option(None, "--space", help="hyperbolic | euclidean"),
    aggregation: str | None = typer.Option(None, "--aggregation", help="attention | average"),
    dim: int | None = typer.Option(None, "--dim"),
    lr: float | None = typer.Option(None, "--lr"),
    batch_size: int | None = typer.Option(None, "--batch-size"),
) -> None:
    """Train a model and write the best checkpoint and its history log."""
    overrides = {
        "seed": seed,
        "regularization": _choice(mode, REGULARIZATIONS, "--mode"),
        "beta": beta,
        "epochs": epochs,
        "space": _choice(space, SPACES, "--space"),
        "aggregation": _choice(aggregation, AGGREGATIONS, "--aggregation"),
        "dim": dim,
        "lr": lr,
        "batch_size": batch_size,
    }
    try:
        effective = resolve_config(config, overrides)
        render_config(effective)
        result = _service().train(interactions, triples, effective, out, history)
        typer.echo(
            f"Wrote {out} (best epoch {result.best_epoch} of {len(result.history)}"
            + (", stopped early)" if result.stopped_early else ")")
        )
    except (KgballError, FileNotFoundError) as e:
        _fail(e)


@app.command()
def evaluate(
    checkpoint: Path = typer.Option(..., "--checkpoint"),
    interactions: Path = typer.Option(..., "--interactions"),
    triples: Path | None = typer.Option(None, "--triples"),
    k: str = typer.Option("20", "--k", help="Comma-separated cutoffs, e.g. 10,20"),
    exclude_validation: bool | None = typer.Option(
        None,
        "--exclude-validation/--keep-validation",
        help="Drop validation items from test candidates (default: as trained)",
    ),
) -> None:
    """Print Recall@K and NDCG@K on the held-out test sets as TSV."""
    ks = _parse_ks(k)
    try:
        report = _service().evaluate(checkpoint, interactions, triples, ks, exclude_validation)
    except (KgballError, FileNotFoundError) as e:
        _fail(e)
    typer.echo("K\trecall\tndcg")
    _echo_report(report)


@app.command()
def recommend(
    checkpoint: Path = typer.Option(..., "--checkpoint"),
    user: int = typer.Option(..., "--user", help="Original user id"),
    k: int = typer.Option(20, "--k", min=1),
) -> None:
    """Print the top-K original item ids for a user, one per line."""
    try:
        items = _service().recommend(checkpoint, user, k)
    except (KgballError, FileNotFoundError) as e:
        _fail(e)
    for item in items:
        typer.echo(str(item))


@app.command("export-embeddings")
def export_embeddings(
    checkpoint: Path = typer.Option(..., "--checkpoint"),
    entity: int = typer.Option(..., "--entity", help="Original id of the root entity"),
    out: Path = typer.Option(..., "--out", help="CSV to write"),
    hops: int = typer.Option(2, "--hops", min=0, max=2),
) -> None:
    """Write the root entity and its KG neighbourhood (up to two hops) as CSV."""
    try:
        n = _service().export_embeddings(checkpoint, entity, hops, out)
    except (KgballError, FileNotFoundError) as e:
        _fail(e)
    typer.echo(f"Wrote {n} row(s) to {out}")


@app.command("sweep-beta")
def sweep_beta(
    interactions: Path = typer.Option(..., "--interactions"),
    triples: Path | None = typer.Option(None, "--triples"),
    config: Path | None = typer.Option(None, "--config"),
    betas: str = typer.Option("0,0.01,0.1,0.5,1.0", "--betas"),
    k: str = typer.Option("20", "--k"),
    seed: int | None = typer.Option(None, "--seed"),
    epochs: int | None = typer.Option(None, "--epochs"),
) -> None:
    """Train once per fixed β plus once adaptively; print beta/K/recall/ndcg as TSV."""
    ks = _parse_ks(k)
    values = _parse_list(betas, float, "--betas")
    try:
        effective = resolve_config(config, {"seed": seed, "epochs": epochs})
        reports = _service().sweep_beta(interactions, triples, effective, values, ks)
    except (KgballError, FileNotFoundError) as e:
        _fail(e)
    render_metrics(reports, title="beta sweep")
    typer.echo("beta\tK\trecall\tndcg")
    for label, report in reports.items():
        _echo_report(report, prefix=f"{label}\t")


@app.command()
def ablation(
    interactions: Path = typer.Option(..., "--interactions"),
    triples: Path | None = typer.Option(None, "--triples"),
    config: Path | None = typer.Option(None, "--config"),
    runs: int = typer.Option(5, "--runs", min=1),
    k: str = typer.Option("20", "--k"),
    seed: int | None = typer.Option(None, "--seed"),
    epochs: int | None = typer.Option(None, "--epochs"),
) -> None:
    """Train the six ablation variants, averaging each over several seeds."""
    ks = _parse_ks(k)
    try:
        effective = resolve_config(config, {"seed": seed, "epochs": epochs})
        reports = _service().ablation(interactions, triples, effective, ks, runs)
    except (KgballError, FileNotFoundError) as e:
        _fail(e)
    render_metrics(reports, title=f"ablation ({runs} run(s) each)")
    typer.echo("variant\tK\trecall\tndcg")
    for label, report in reports.items():
        _echo_report(report, prefix=f"{label}\t")
