"""Interaction and KG file loading, id densification and the per-user split."""

from __future__ import annotations

import logging
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .domain import (
    DataFormatError,
    Dataset,
    IdMap,
    InteractionDataset,
    KnowledgeGraph,
    NeighborSet,
    TrainingConfig,
)

_logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RawInteractions:
    """Deduplicated interactions with dense ids, sorted by (user, item)."""

    user_ids: IdMap
    item_ids: IdMap
    users: np.ndarray
    items: np.ndarray

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def per_user(self) -> list[np.ndarray]:
        bounds = np.searchsorted(self.users, np.arange(self.n_users + 1))
        return [self.items[bounds[u] : bounds[u + 1]] for u in range(self.n_users)]


def _is_id(token: str) -> bool:
    return token.isascii() and token.isdigit()


def _rows(path: Path, width: int) -> Iterator[tuple[int, ...]]:
    if not path.exists():
        raise FileNotFoundError(f"No such file: {path}")
    seen = False
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            tokens = line.rstrip("\r\n").split("\t")
            if len(tokens) != width or not all(_is_id(t) for t in tokens):
                raise DataFormatError(
                    f"{path}:{lineno}: expected {width} TAB-separated non-negative integers, "
                    f"got {line.rstrip()!r}"
                )
            seen = True
            yield tuple(int(t) for t in tokens)
    if not seen:
        raise DataFormatError(f"{path}: file is empty")


def _densify(raw: np.ndarray) -> tuple[IdMap, np.ndarray]:
    original, dense = np.unique(raw, return_inverse=True)
    return IdMap(original.astype(np.int64)), dense.astype(np.int64)


def kcore_filter(users: np.ndarray, items: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Drop pairs until every remaining user and item has at least ``k`` interactions."""
    if k <= 1:
        return users, items
    keep = np.ones(users.shape[0], dtype=bool)
    while True:
        _, u_inv, u_count = np.unique(users[keep], return_inverse=True, return_counts=True)
        _, i_inv, i_count = np.unique(items[keep], return_inverse=True, return_counts=True)
        ok = (u_count[u_inv] >= k) & (i_count[i_inv] >= k)
        if ok.all():
            break
        idx = np.flatnonzero(keep)
        keep[idx[~ok]] = False
    _logger.info("%d-core filter kept %d of %d interactions", k, int(keep.sum()), keep.size)
    return users[keep], items[keep]


def load_interactions(path: Path, kcore: int = 0) -> RawInteractions:
    rows = np.array(list(_rows(Path(path), 2)), dtype=np.int64).reshape(-1, 2)
    pairs = np.unique(rows, axis=0)
    if pairs.shape[0] < rows.shape[0]:
        _logger.debug("dropped %d duplicate interactions", rows.shape[0] - pairs.shape[0])
    users, items = kcore_filter(pairs[:, 0], pairs[:, 1], kcore)
    if users.size == 0:
        raise DataFormatError(f"{path}: no interactions left after {kcore}-core filtering")
    user_ids, dense_users = _densify(users)
    item_ids, dense_items = _densify(items)
    order = np.lexsort((dense_items, dense_users))
    raw = RawInteractions(user_ids, item_ids, dense_users[order], dense_items[order])
    _logger.info(
        "loaded %d users, %d items, %d interactions from %s",
        raw.n_users,
        raw.n_items,
        raw.users.size,
        path,
    )
    return raw


def load_triples(path: Path, item_ids: IdMap) -> tuple[KnowledgeGraph, IdMap, IdMap]:
    """Load ``head relation tail`` lines; returns the graph and its entity/relation id maps.

    Entity dense ids start with the items (in ``item_ids`` order) followed by the
    remaining raw entity ids in ascending order. A raw id names an item iff it
    is in ``item_ids``.
    """
    rows = np.array(list(_rows(Path(path), 3)), dtype=np.int64).reshape(-1, 3)
    raw_entities = np.unique(np.concatenate([rows[:, 0], rows[:, 2]]))
    extra = np.setdiff1d(raw_entities, item_ids.original)
    entity_ids = IdMap(np.concatenate([item_ids.original, extra]).astype(np.int64))
    relation_ids, relations = _densify(rows[:, 1])

    lookup = np.argsort(entity_ids.original)
    sorted_original = entity_ids.original[lookup]
    heads = lookup[np.searchsorted(sorted_original, rows[:, 0])]
    tails = lookup[np.searchsorted(sorted_original, rows[:, 2])]
    triples = np.unique(np.stack([heads, relations, tails], axis=1), axis=0)

    n_items = len(item_ids)
    item_heads = triples[triples[:, 0] < n_items]
    neighbors = NeighborSet.from_pairs(n_items, map(tuple, item_heads.tolist()))
    kg = KnowledgeGraph(
        n_entities=len(entity_ids),
        n_relations=len(relation_ids),
        triples=triples,
        neighbors=neighbors,
    )
    with_neighbors = int(np.count_nonzero(neighbors.degree(np.arange(n_items))))
    _logger.info(
        "loaded %d entities, %d relations, %d triples; %d of %d items have neighbours",
        kg.n_entities,
        kg.n_relations,
        triples.shape[0],
        with_neighbors,
        n_items,
    )
    return kg, entity_ids, relation_ids


def empty_graph(item_ids: IdMap) -> tuple[KnowledgeGraph, IdMap, IdMap]:
    n_items = len(item_ids)
    kg = KnowledgeGraph(
        n_entities=n_items,
        n_relations=0,
        triples=np.zeros((0, 3), dtype=np.int64),
        neighbors=NeighborSet.empty(n_items),
    )
    return kg, item_ids, IdMap(np.zeros(0, dtype=np.int64))


def _split_sizes(n: int, test_ratio: float, valid_ratio: float) -> tuple[int, int]:
    if n < 3:
        return 0, 0
    n_test = int(np.floor(test_ratio * n + 0.5))
    n_valid = int(np.floor(valid_ratio * (n - n_test) + 0.5))
    while n - n_test - n_valid < 1:
        if n_valid:
            n_valid -= 1
        else:
            n_test -= 1
    return n_test, n_valid


def split(
    raw: RawInteractions,
    test_ratio: float = 0.2,
    valid_ratio: float = 0.1,
    seed: int = 2020,
) -> InteractionDataset:
    """Per-user random test/validation/train split, drawn in ascending user order."""
    rng = np.random.default_rng(seed)
    train, valid, test = [], [], []
    for items in raw.per_user():
        perm = rng.permutation(items)
        n_test, n_valid = _split_sizes(items.size, test_ratio, valid_ratio)
        test.append(np.sort(perm[:n_test]))
        valid.append(np.sort(perm[n_test : n_test + n_valid]))
        train.append(np.sort(perm[n_test + n_valid :]))
    return InteractionDataset(
        n_users=raw.n_users,
        n_items=raw.n_items,
        train=train,
        valid=valid,
        test=test,
    )


def load_dataset(
    interactions_path: Path, triples_path: Path | None, config: TrainingConfig
) -> Dataset:
    raw = load_interactions(interactions_path, kcore=config.kcore)
    if triples_path is None:
        kg, entity_ids, relation_ids = empty_graph(raw.item_ids)
    else:
        kg, entity_ids, relation_ids = load_triples(triples_path, raw.item_ids)
    interactions = split(raw, config.test_ratio, config.valid_ratio, config.seed)
    return Dataset(
        interactions=interactions,
        kg=kg,
        user_ids=raw.user_ids,
        entity_ids=entity_ids,
        relation_ids=relation_ids,
    )
