from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, fields
from functools import cached_property
from typing import Literal

import numpy as np

Space = Literal["hyperbolic", "euclidean"]
Aggregation = Literal["attention", "average"]
Regularization = Literal["adaptive", "fixed"]

SPACES: tuple[str, ...] = ("hyperbolic", "euclidean")
AGGREGATIONS: tuple[str, ...] = ("attention", "average")
REGULARIZATIONS: tuple[str, ...] = ("adaptive", "fixed")


@dataclass(frozen=True)
class TrainingConfig:
    curvature: float = 1.0
    dim: int = 64
    proxy_lr: float | None = None  # step size of the one-step proxy; None -> lr
    lr: float = 1e-3
    beta_lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 4096
    epochs: int = 100
    seed: int = 2020
    space: Space = "hyperbolic"
    aggregation: Aggregation = "attention"
    regularization: Regularization = "adaptive"
    beta: float = 0.1  # only used when regularization == "fixed"
    negatives: int = 1
    patience: int = 20  # epochs without NDCG gain before stopping; 0 disables
    eval_k: int = 20
    test_ratio: float = 0.2
    valid_ratio: float = 0.1
    kcore: int = 0
    exclude_validation: bool = True

    def __post_init__(self) -> None:
        problems: list[str] = []
        if self.curvature <= 0:
            problems.append("curvature must be > 0")
        if self.dim < 1:
            problems.append("dim must be >= 1")
        for name in ("lr", "beta_lr"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be > 0")
        if self.proxy_lr is not None and self.proxy_lr < 0:
            problems.append("proxy_lr must be >= 0")
        if self.weight_decay < 0:
            problems.append("weight_decay must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if self.negatives < 1:
            problems.append("negatives must be >= 1")
        if self.patience < 0:
            problems.append("patience must be >= 0")
        if self.eval_k < 1:
            problems.append("eval_k must be >= 1")
        if not 0.0 <= self.test_ratio < 1.0 or not 0.0 <= self.valid_ratio < 1.0:
            problems.append("split ratios must lie in [0, 1)")
        if self.space not in SPACES:
            problems.append(f"space must be one of {SPACES}")
        if self.aggregation not in AGGREGATIONS:
            problems.append(f"aggregation must be one of {AGGREGATIONS}")
        if self.regularization not in REGULARIZATIONS:
            problems.append(f"regularization must be one of {REGULARIZATIONS}")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def alpha(self) -> float:
        """Step size of the proxy update; defaults to the inner learning rate."""
        return self.lr if self.proxy_lr is None else self.proxy_lr

    @property
    def adaptive(self) -> bool:
        return self.regularization == "adaptive"

    @property
    def uses_kg(self) -> bool:
        return self.adaptive or self.beta != 0.0

    def as_dict(self) -> dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class IdMap:
    """Bijection between original ids and dense ids ``0..n-1``."""

    original: np.ndarray  # int64, original id at each dense position

    @cached_property
    def _index(self) -> dict[int, int]:
        return {int(o): i for i, o in enumerate(self.original)}

    def __len__(self) -> int:
        return int(self.original.shape[0])

    def dense(self, original_id: int) -> int:
        try:
            return self._index[int(original_id)]
        except KeyError:
            raise UnknownId(f"Unknown id: {original_id}") from None

    def to_original(self, dense_id: int) -> int:
        if not 0 <= dense_id < len(self):
            raise UnknownId(f"Dense id out of range: {dense_id}")
        return int(self.original[dense_id])


@dataclass(frozen=True)
class NeighborSet:
    """Head-indexed adjacency N_v for item heads, in CSR form.

    Pairs of each item are sorted by (relation, tail) and unique.
    """

    n_items: int
    indptr: np.ndarray  # (n_items + 1,)
    relations: np.ndarray  # (nnz,)
    tails: np.ndarray  # (nnz,)

    @classmethod
    def from_pairs(cls, n_items: int, pairs: Iterable[tuple[int, int, int]]) -> NeighborSet:
        """Build from ``(item, relation, tail)`` triples; duplicates are dropped."""
        unique = sorted(set(pairs))
        heads = np.fromiter((h for h, _, _ in unique), dtype=np.int64, count=len(unique))
        rels = np.fromiter((r for _, r, _ in unique), dtype=np.int64, count=len(unique))
        tails = np.fromiter((t for _, _, t in unique), dtype=np.int64, count=len(unique))
        counts = np.bincount(heads, minlength=n_items)
        indptr = np.zeros(n_items + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        return cls(n_items=n_items, indptr=indptr, relations=rels, tails=tails)

    @classmethod
    def empty(cls, n_items: int) -> NeighborSet:
        return cls.from_pairs(n_items, [])

    def degree(self, item: int | np.ndarray) -> np.ndarray:
        item = np.asarray(item)
        return self.indptr[item + 1] - self.indptr[item]

    def of(self, item: int) -> list[tuple[int, int]]:
        if not 0 <= item < self.n_items:
            raise UnknownId(f"Unknown item: {item}")
        lo, hi = self.indptr[item], self.indptr[item + 1]
        return list(zip(self.relations[lo:hi].tolist(), self.tails[lo:hi].tolist(), strict=True))

    def padded(self, items: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(relations, tails, mask)`` of shape ``(B, max_degree)``.

        Padding slots hold id 0 and ``mask == False``.
        """
        items = np.asarray(items, dtype=np.int64)
        deg = self.degree(items)
        width = int(deg.max()) if deg.size else 0
        cols = np.arange(width)
        mask = cols[None, :] < deg[:, None]
        pos = np.where(mask, self.indptr[items][:, None] + cols[None, :], 0)
        if self.relations.size == 0:
            zeros = np.zeros_like(pos)
            return zeros, zeros, mask
        return np.where(mask, self.relations[pos], 0), np.where(mask, self.tails[pos], 0), mask


@dataclass(frozen=True)
class InteractionDataset:
    n_users: int
    n_items: int
    train: Sequence[np.ndarray]  # per user, sorted item ids (S_u)
    valid: Sequence[np.ndarray]
    test: Sequence[np.ndarray]  # T_u

    def train_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        users = np.repeat(np.arange(self.n_users), [len(s) for s in self.train])
        items = np.concatenate(list(self.train)) if self.n_users else np.zeros(0, np.int64)
        return users.astype(np.int64), items.astype(np.int64)

    @cached_property
    def train_sets(self) -> tuple[frozenset[int], ...]:
        return tuple(frozenset(s.tolist()) for s in self.train)


@dataclass(frozen=True)
class KnowledgeGraph:
    n_entities: int
    n_relations: int
    triples: np.ndarray  # (T, 3) dense (head, relation, tail), unique and sorted
    neighbors: NeighborSet


@dataclass(frozen=True)
class Dataset:
    interactions: InteractionDataset
    kg: KnowledgeGraph
    user_ids: IdMap
    entity_ids: IdMap  # items first, then the remaining KG entities
    relation_ids: IdMap


@dataclass(frozen=True)
class RankedList:
    user: int
    items: Sequence[int]  # ascending distance, never in the excluded set


@dataclass(frozen=True)
class MetricsReport:
    metrics: Mapping[int, tuple[float, float]]  # K -> (recall, ndcg)
    n_users: int

    def recall(self, k: int) -> float:
        return self.metrics[k][0]

    def ndcg(self, k: int) -> float:
        return self.metrics[k][1]

    def to_tsv(self) -> str:
        lines = ["K\trecall\tndcg"]
        lines += [f"{k}\t{r!r}\t{n!r}" for k, (r, n) in sorted(self.metrics.items())]
        return "\n".join(lines)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    inner_loss: float
    kg_loss: float
    mean_sigma_beta: float
    recall: float
    ndcg: float

    def to_line(self) -> str:
        return ",".join(
            [str(self.epoch)]
            + [
                repr(float(x))
                for x in (
                    self.inner_loss,
                    self.mean_sigma_beta,
                    self.recall,
                    self.ndcg,
                    self.kg_loss,
                )
            ]
        )


@dataclass(frozen=True)
class ExportRow:
    entity_id: int  # original id
    hop: int
    coords: Sequence[float] = field(default_factory=tuple)


class KgballError(Exception): ...


class InvalidInput(KgballError): ...


class UnknownId(KgballError): ...


class NoNeighbors(KgballError): ...


class DataFormatError(KgballError): ...


class DegenerateDataset(KgballError): ...


class ConfigError(KgballError): ...


class TrainingDiverged(KgballError): ...


class CheckpointError(KgballError): ...


class CheckpointMismatch(KgballError): ...
