from .domain import (
    CheckpointError,
    CheckpointMismatch,
    ConfigError,
    DataFormatError,
    Dataset,
    DegenerateDataset,
    IdMap,
    InteractionDataset,
    InvalidInput,
    KgballError,
    KnowledgeGraph,
    MetricsReport,
    NeighborSet,
    NoNeighbors,
    RankedList,
    TrainingConfig,
    TrainingDiverged,
    UnknownId,
)
from .geometry import EuclideanSpace, PoincareBall, make_space
from .model import Model, ModelParameters
from .services import RecommenderService
from .storage.fs import FileSystemCheckpointStore
from .trainer import TrainResult, train

__all__ = [
    "CheckpointError",
    "CheckpointMismatch",
    "ConfigError",
    "DataFormatError",
    "Dataset",
    "DegenerateDataset",
    "EuclideanSpace",
    "FileSystemCheckpointStore",
    "IdMap",
    "InteractionDataset",
    "InvalidInput",
    "KgballError",
    "KnowledgeGraph",
    "MetricsReport",
    "Model",
    "ModelParameters",
    "NeighborSet",
    "NoNeighbors",
    "PoincareBall",
    "RankedList",
    "RecommenderService",
    "TrainResult",
    "TrainingConfig",
    "TrainingDiverged",
    "UnknownId",
    "make_space",
    "train",
]
