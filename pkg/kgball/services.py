from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import replace
from pathlib import Path
from typing import Any

import numpy as np

from .data import load_dataset
from .domain import (
    CheckpointMismatch,
    Dataset,
    ExportRow,
    IdMap,
    InvalidInput,
    MetricsReport,
    TrainingConfig,
)
from .evaluation import evaluate, rank_items
from .geometry import make_space
from .storage.base import Checkpoint, CheckpointStore
from .trainer import TrainResult, train
from .util.io_safety import atomic_write_text

_logger = logging.getLogger(__name__)

ABLATION_VARIANTS: dict[str, dict[str, Any]] = {
    "euclidean-bpr": {"space": "euclidean", "regularization": "fixed", "beta": 0.0},
    "hyperbolic-bpr": {"space": "hyperbolic", "regularization": "fixed", "beta": 0.0},
    "euclidean-attention": {
        "space": "euclidean",
        "aggregation": "attention",
        "regularization": "fixed",
    },
    "hyperbolic-attention": {
        "space": "hyperbolic",
        "aggregation": "attention",
        "regularization": "fixed",
    },
    "hyperbolic-average": {
        "space": "hyperbolic",
        "aggregation": "average",
        "regularization": "fixed",
    },
    "full": {"space": "hyperbolic", "aggregation": "attention", "regularization": "adaptive"},
}


def default_history_path(checkpoint: Path) -> Path:
    return checkpoint.with_name(checkpoint.name + ".history.csv")


def sidecar(path: Path, kind: str) -> Path:
    return path.with_name(f"{path.name}.{kind}.map")


def _average(reports: Sequence[MetricsReport]) -> MetricsReport:
    ks = sorted(reports[0].metrics)
    metrics = {
        k: (
            float(np.mean([r.recall(k) for r in reports])),
            float(np.mean([r.ndcg(k) for r in reports])),
        )
        for k in ks
    }
    return MetricsReport(metrics=metrics, n_users=reports[-1].n_users)


class RecommenderService:
    def __init__(self, store: CheckpointStore):
        self.s = store

    # --- training ---
    def train(
        self,
        interactions: Path,
        triples: Path | None,
        config: TrainingConfig,
        out: Path,
        history: Path | None = None,
    ) -> TrainResult:
        """Load, split, train and persist the best checkpoint, the history log and id maps."""
        dataset = load_dataset(interactions, triples, config)
        history = history or default_history_path(out)
        if history.exists():
            history.unlink()
        result = train(
            dataset,
            config,
            on_epoch=lambda record: self.s.append_history(history, record, config.eval_k),
        )
        checkpoint = Checkpoint.from_training(dataset, config, result.params, result.best_epoch)
        self.s.save_checkpoint(out, checkpoint)
        self._write_id_maps(dataset, interactions, triples)
        _logger.info(
            "training finished after %d epochs; best epoch %d",
            len(result.history),
            result.best_epoch,
        )
        return result

    def _write_id_maps(self, dataset: Dataset, interactions: Path, triples: Path | None) -> None:
        n_items = dataset.interactions.n_items
        self.s.write_id_map(sidecar(interactions, "users"), dataset.user_ids)
        self.s.write_id_map(
            sidecar(interactions, "items"), IdMap(dataset.entity_ids.original[:n_items])
        )
        if triples is not None:
            self.s.write_id_map(sidecar(triples, "entities"), dataset.entity_ids)
            self.s.write_id_map(sidecar(triples, "relations"), dataset.relation_ids)

    # --- inference ---
    def _check_compatible(self, checkpoint: Checkpoint, dataset: Dataset, path: Path) -> None:
        params = checkpoint.params
        problems: list[str] = []
        if dataset.interactions.n_users != params.n_users:
            problems.append(f"{dataset.interactions.n_users} users vs {params.n_users}")
        if dataset.interactions.n_items != params.n_items:
            problems.append(f"{dataset.interactions.n_items} items vs {params.n_items}")
        if dataset.kg.n_entities != params.entity_embeddings.shape[0]:
            n_entities = params.entity_embeddings.shape[0]
            problems.append(f"{dataset.kg.n_entities} entities vs {n_entities}")
        same_users = np.array_equal(dataset.user_ids.original, checkpoint.user_ids.original)
        if not problems and not same_users:
            problems.append("user ids differ")
        if not problems and any(
            not np.array_equal(a, b)
            for a, b in zip(dataset.interactions.train, checkpoint.train, strict=True)
        ):
            problems.append("training split differs")
        if problems:
            raise CheckpointMismatch(f"{path} does not match the data: " + "; ".join(problems))

    def evaluate(
        self,
        checkpoint_path: Path,
        interactions: Path,
        triples: Path | None,
        ks: Sequence[int],
        exclude_validation: bool | None = None,
    ) -> MetricsReport:
        """Rebuild the split from the embedded config and score the held-out test sets."""
        checkpoint = self.s.load_checkpoint(checkpoint_path)
        config = checkpoint.config
        dataset = load_dataset(interactions, triples, config)
        self._check_compatible(checkpoint, dataset, checkpoint_path)
        exclude = config.exclude_validation if exclude_validation is None else exclude_validation
        return evaluate(
            checkpoint.params,
            dataset.interactions,
            ks,
            make_space(config.space, config.curvature),
            target="test",
            exclude_validation=exclude,
        )

    def recommend(self, checkpoint_path: Path, user: int, k: int) -> list[int]:
        """Top-``k`` original item ids for the original user id ``user``."""
        if k < 1:
            raise InvalidInput("k must be >= 1")
        checkpoint = self.s.load_checkpoint(checkpoint_path)
        dense_user = checkpoint.user_ids.dense(user)
        space = make_space(checkpoint.config.space, checkpoint.config.curvature)
        ranked = rank_items(
            checkpoint.params, dense_user, checkpoint.train[dense_user].tolist(), k, space
        )
        return [checkpoint.entity_ids.to_original(v) for v in ranked.items]

    def export_rows(self, checkpoint: Checkpoint, root: int, hops: int) -> list[ExportRow]:
        """Breadth-first neighbourhood of ``root`` over the undirected KG, up to ``hops``."""
        if hops not in (0, 1, 2):
            raise InvalidInput(f"hops must be 0, 1 or 2, got {hops}")
        start = checkpoint.entity_ids.dense(root)
        adjacency: dict[int, set[int]] = {}
        for h, _, t in checkpoint.triples.tolist():
            adjacency.setdefault(h, set()).add(t)
            adjacency.setdefault(t, set()).add(h)
        seen = {start}
        frontier = [start]
        layers = [[start]]
        for _ in range(hops):
            nxt = sorted(
                {n for e in frontier for n in adjacency.get(e, ()) if n not in seen},
                key=checkpoint.entity_ids.to_original,
            )
            if not nxt:
                break
            seen.update(nxt)
            layers.append(nxt)
            frontier = nxt
        table = checkpoint.params.entity_embeddings
        return [
            ExportRow(
                entity_id=checkpoint.entity_ids.to_original(e),
                hop=hop,
                coords=tuple(table[e].tolist()),
            )
            for hop, layer in enumerate(layers)
            for e in layer
        ]

    def export_embeddings(self, checkpoint_path: Path, root: int, hops: int, out: Path) -> int:
        checkpoint = self.s.load_checkpoint(checkpoint_path)
        rows = self.export_rows(checkpoint, root, hops)
        dim = checkpoint.params.dim
        lines = [",".join(["entity_id", "hop"] + [f"x{i + 1}" for i in range(dim)])]
        lines += [
            ",".join([str(r.entity_id), str(r.hop)] + [repr(float(x)) for x in r.coords])
            for r in rows
        ]
        atomic_write_text(out, "\n".join(lines) + "\n")
        _logger.info("exported %d entities around %d to %s", len(rows), root, out)
        return len(rows)

    # --- experiments ---
    def _run(self, dataset: Dataset, config: TrainingConfig, ks: Sequence[int]) -> MetricsReport:
        result = train(dataset, config)
        space = make_space(config.space, config.curvature)
        return evaluate(
            result.params,
            dataset.interactions,
            ks,
            space,
            exclude_validation=config.exclude_validation,
        )

    def sweep_beta(
        self,
        interactions: Path,
        triples: Path | None,
        config: TrainingConfig,
        betas: Sequence[float],
        ks: Sequence[int],
    ) -> dict[str, MetricsReport]:
        """Test metrics for each fixed β, plus the adaptive model as a reference row."""
        dataset = load_dataset(interactions, triples, config)
        reports: dict[str, MetricsReport] = {}
        for beta in betas:
            _logger.info("sweep: fixed beta=%s", beta)
            run = replace(config, regularization="fixed", beta=float(beta))
            reports[repr(float(beta))] = self._run(dataset, run, ks)
        _logger.info("sweep: adaptive reference")
        reports["adaptive"] = self._run(dataset, replace(config, regularization="adaptive"), ks)
        return reports

    def ablation(
        self,
        interactions: Path,
        triples: Path | None,
        config: TrainingConfig,
        ks: Sequence[int],
        runs: int = 5,
    ) -> dict[str, MetricsReport]:
        """Each ablation variant averaged over ``runs`` seeds starting at ``config.seed``."""
        if runs < 1:
            raise InvalidInput("runs must be >= 1")
        per_variant: dict[str, list[MetricsReport]] = {name: [] for name in ABLATION_VARIANTS}
        for offset in range(runs):
            seeded = replace(config, seed=config.seed + offset)
            dataset = load_dataset(interactions, triples, seeded)
            for name, overrides in ABLATION_VARIANTS.items():
                _logger.info("ablation: %s, seed %d", name, seeded.seed)
                per_variant[name].append(self._run(dataset, replace(seeded, **overrides), ks))
        return {name: _average(reports) for name, reports in per_variant.items()}
