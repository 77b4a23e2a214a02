from .base import Checkpoint, CheckpointStore
from .fs import FileSystemCheckpointStore

__all__ = ["Checkpoint", "CheckpointStore", "FileSystemCheckpointStore"]
