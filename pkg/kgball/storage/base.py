from __future__ import annotations

from abc import ABC, abstractmethod
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..domain import (
    Dataset,
    EpochRecord,
    IdMap,
    TrainingConfig,
)
from ..model import ModelParameters


@dataclass(frozen=True)
class Checkpoint:
    """Everything ``evaluate``/``recommend``/``export`` need without the original config file."""

    params: ModelParameters
    config: TrainingConfig
    user_ids: IdMap
    entity_ids: IdMap
    relation_ids: IdMap
    train: Sequence[np.ndarray]
    valid: Sequence[np.ndarray]
    triples: np.ndarray  # (T, 3) dense
    best_epoch: int = 0

    @classmethod
    def from_training(
        cls, dataset: Dataset, config: TrainingConfig, params: ModelParameters, best_epoch: int
    ) -> Checkpoint:
        return cls(
            params=params,
            config=config,
            user_ids=dataset.user_ids,
            entity_ids=dataset.entity_ids,
            relation_ids=dataset.relation_ids,
            train=dataset.interactions.train,
            valid=dataset.interactions.valid,
            triples=dataset.kg.triples,
            best_epoch=best_epoch,
        )


class CheckpointStore(ABC):
    @abstractmethod
    def save_checkpoint(
        self, path: Path, checkpoint: Checkpoint
    ) -> None:  # pragma: no cover - interface only
        ...

    @abstractmethod
    def load_checkpoint(self, path: Path) -> Checkpoint:  # pragma: no cover - interface only
        ...

    @abstractmethod
    def append_history(
        self, path: Path, record: EpochRecord, eval_k: int
    ) -> None:  # pragma: no cover - interface only
        """Append one epoch line, creating the file with its header when needed."""
        ...

    @abstractmethod
    def write_id_map(self, path: Path, ids: IdMap) -> None:  # pragma: no cover - interface only
        ...

    @abstractmethod
    def read_id_map(self, path: Path) -> IdMap:  # pragma: no cover - interface only
        ...
