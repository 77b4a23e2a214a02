from __future__ import annotations

from collections.abc import Mapping

from rich.console import Console
from rich.table import Table

from ..domain import MetricsReport, TrainingConfig


def render_config(config: TrainingConfig, console: Console | None = None) -> None:
    table = Table(title="effective config", show_header=True, header_style="bold")
    table.add_column("key")
    table.add_column("value", justify="right")
    for key, value in config.as_dict().items():
        table.add_row(key, "-" if value is None else str(value))
    (console or Console(stderr=True)).print(table)


def render_metrics(
    reports: Mapping[str, MetricsReport], console: Console | None = None, title: str = "metrics"
) -> None:
    """One row per (label, K); recall in green, NDCG in cyan."""
    table = Table(title=title, show_header=True, header_style="bold")
    table.add_column("run")
    table.add_column("K", justify="right")
    table.add_column("recall", justify="right", style="green")
    table.add_column("ndcg", justify="right", style="cyan")
    for label, report in reports.items():
        for k, (recall, ndcg) in sorted(report.metrics.items()):
            table.add_row(label, str(k), f"{recall:.4f}", f"{ndcg:.4f}")
    (console or Console(stderr=True)).print(table)
