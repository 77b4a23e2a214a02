from __future__ import annotations

import json
import logging
import struct
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import numpy as np

from ..domain import (
    CheckpointError,
    ConfigError,
    DataFormatError,
    EpochRecord,
    IdMap,
    TrainingConfig,
)
from ..model import ModelParameters
from ..util.io_safety import append_line, atomic_write_bytes, atomic_write_text
from .base import Checkpoint, CheckpointStore

_logger = logging.getLogger(__name__)

MAGIC = b"KGBALL01"
_FORMAT_VERSION = 1
_HEADER_LEN = struct.Struct("<I")


def _csr(sets: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    indptr = np.zeros(len(sets) + 1, dtype=np.int64)
    np.cumsum([len(s) for s in sets], out=indptr[1:])
    indices = np.concatenate(list(sets)) if sets else np.zeros(0)
    return indptr, indices.astype(np.int64)


def _uncsr(indptr: np.ndarray, indices: np.ndarray) -> list[np.ndarray]:
    return [indices[indptr[i] : indptr[i + 1]] for i in range(indptr.size - 1)]


def history_header(eval_k: int) -> str:
    return f"epoch,inner_loss,mean_sigma_beta,recall@{eval_k},ndcg@{eval_k},kg_loss"


class FileSystemCheckpointStore(CheckpointStore):
    """Single-file binary checkpoints plus text sidecars, all written atomically."""

    # --- checkpoint ---
    def save_checkpoint(self, path: Path, checkpoint: Checkpoint) -> None:
        params = checkpoint.params
        train_indptr, train_indices = _csr(checkpoint.train)
        valid_indptr, valid_indices = _csr(checkpoint.valid)
        arrays: list[tuple[str, np.ndarray]] = [
            ("users", params.user_embeddings.astype("<f8")),
            ("entities", params.entity_embeddings.astype("<f8")),
            ("relations", params.relation_embeddings.astype("<f8")),
            ("beta_logits", params.beta_logits.astype("<f8")),
            ("user_ids", checkpoint.user_ids.original.astype("<i8")),
            ("entity_ids", checkpoint.entity_ids.original.astype("<i8")),
            ("relation_ids", checkpoint.relation_ids.original.astype("<i8")),
            ("train_indptr", train_indptr.astype("<i8")),
            ("train_indices", train_indices.astype("<i8")),
            ("valid_indptr", valid_indptr.astype("<i8")),
            ("valid_indices", valid_indices.astype("<i8")),
            ("triples", checkpoint.triples.reshape(-1, 3).astype("<i8")),
        ]
        header = {
            "format": _FORMAT_VERSION,
            "dim": params.dim,
            "curvature": checkpoint.config.curvature,
            "n_users": params.n_users,
            "n_items": params.n_items,
            "n_entities": int(params.entity_embeddings.shape[0]),
            "n_relations": len(checkpoint.relation_ids),
            "space": checkpoint.config.space,
            "aggregation": checkpoint.config.aggregation,
            "regularization": checkpoint.config.regularization,
            "best_epoch": checkpoint.best_epoch,
            "config": checkpoint.config.as_dict(),
            "arrays": [
                {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)}
                for name, arr in arrays
            ],
        }
        head = json.dumps(header, sort_keys=True).encode("utf-8")
        payload = b"".join(
            [MAGIC, _HEADER_LEN.pack(len(head)), head]
            + [np.ascontiguousarray(arr).tobytes() for _, arr in arrays]
        )
        atomic_write_bytes(path, payload)
        _logger.info("wrote checkpoint %s (%d bytes)", path, len(payload))

    def _read_arrays(self, path: Path, blob: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
        if blob[: len(MAGIC)] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        offset = len(MAGIC)
        if len(blob) < offset + _HEADER_LEN.size:
            raise CheckpointError(f"{path}: truncated header")
        (n,) = _HEADER_LEN.unpack_from(blob, offset)
        offset += _HEADER_LEN.size
        try:
            header = json.loads(blob[offset : offset + n].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: unreadable header: {e}") from e
        offset += n
        if header.get("format") != _FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format {header.get('format')}")
        arrays: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64))
            size = count * dtype.itemsize
            if offset + size > len(blob):
                raise CheckpointError(f"{path}: truncated array '{entry['name']}'")
            arrays[entry["name"]] = (
                np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
            )
            offset += size
        if offset != len(blob):
            raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
        return header, arrays

    def load_checkpoint(self, path: Path) -> Checkpoint:
        if not path.exists():
            raise FileNotFoundError(f"No such file: {path}")
        header, arrays = self._read_arrays(path, path.read_bytes())
        try:
            config = TrainingConfig(**header["config"])
            params = ModelParameters(
                user_embeddings=arrays["users"].astype(np.float64),
                entity_embeddings=arrays["entities"].astype(np.float64),
                relation_embeddings=arrays["relations"].astype(np.float64),
                beta_logits=arrays["beta_logits"].astype(np.float64),
                n_items=int(header["n_items"]),
            )
            checkpoint = Checkpoint(
                params=params,
                config=config,
                user_ids=IdMap(arrays["user_ids"].astype(np.int64)),
                entity_ids=IdMap(arrays["entity_ids"].astype(np.int64)),
                relation_ids=IdMap(arrays["relation_ids"].astype(np.int64)),
                train=_uncsr(arrays["train_indptr"], arrays["train_indices"]),
                valid=_uncsr(arrays["valid_indptr"], arrays["valid_indices"]),
                triples=arrays["triples"].astype(np.int64).reshape(-1, 3),
                best_epoch=int(header.get("best_epoch", 0)),
            )
        except (KeyError, TypeError, ConfigError) as e:
            raise CheckpointError(f"{path}: inconsistent checkpoint: {e}") from e
        _logger.debug("loaded %s: %d users, %d items", path, params.n_users, params.n_items)
        return checkpoint

    # --- text sidecars ---
    def append_history(self, path: Path, record: EpochRecord, eval_k: int) -> None:
        append_line(path, record.to_line(), header=history_header(eval_k))

    def write_id_map(self, path: Path, ids: IdMap) -> None:
        lines = [f"{int(o)}\t{i}" for i, o in enumerate(ids.original)]
        atomic_write_text(path, "".join(line + "\n" for line in lines))

    def read_id_map(self, path: Path) -> IdMap:
        if not path.exists():
            raise FileNotFoundError(f"No such file: {path}")
        pairs: list[tuple[int, int]] = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not all(p.isascii() and p.isdigit() for p in parts):
                raise DataFormatError(f"{path}:{lineno}: expected 'original<TAB>dense'")
            pairs.append((int(parts[0]), int(parts[1])))
        pairs.sort(key=lambda p: p[1])
        if [d for _, d in pairs] != list(range(len(pairs))):
            raise DataFormatError(f"{path}: dense ids are not 0..{len(pairs) - 1}")
        return IdMap(np.array([o for o, _ in pairs], dtype=np.int64))
