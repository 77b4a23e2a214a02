from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from kgball.domain import Dataset, IdMap, InteractionDataset, KnowledgeGraph, NeighborSet

# Six users with six of eight items each; original ids are deliberately sparse.
USERS = [100 + u for u in range(6)]
ITEMS = [10 * i for i in range(8)]
TRIPLES = [
    (0, 0, 1000),
    (10, 0, 1000),
    (20, 0, 1001),
    (30, 1, 1001),
    (40, 1, 1002),
    (50, 0, 1002),
    (60, 1, 10),
    (1000, 1, 1001),  # attribute-to-attribute; not part of any N_v
]


def random_ball_points(
    rng: np.random.Generator, n: int, d: int, c: float, max_radius: float = 0.7
) -> np.ndarray:
    """Points uniformly oriented with norm in [0, max_radius / sqrt(c))."""
    direction = rng.normal(size=(n, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = rng.uniform(0.0, max_radius, size=(n, 1)) / np.sqrt(c)
    return direction * radius


def make_dataset(
    train: list[list[int]],
    n_items: int,
    triples: list[tuple[int, int, int]] | None = None,
    n_entities: int | None = None,
    n_relations: int = 1,
    test: list[list[int]] | None = None,
    valid: list[list[int]] | None = None,
) -> Dataset:
    """An in-memory dataset with dense ids; items are entities ``0..n_items-1``."""
    triples = triples or []
    n_entities = n_entities if n_entities is not None else n_items
    n_users = len(train)

    def arrays(sets: list[list[int]] | None) -> list[np.ndarray]:
        sets = sets or [[] for _ in range(n_users)]
        return [np.array(sorted(s), dtype=np.int64) for s in sets]

    interactions = InteractionDataset(
        n_users=n_users,
        n_items=n_items,
        train=arrays(train),
        valid=arrays(valid),
        test=arrays(test),
    )
    kg = KnowledgeGraph(
        n_entities=n_entities,
        n_relations=n_relations,
        triples=np.array(sorted(set(triples)), dtype=np.int64).reshape(-1, 3),
        neighbors=NeighborSet.from_pairs(n_items, [t for t in triples if t[0] < n_items]),
    )
    return Dataset(
        interactions=interactions,
        kg=kg,
        user_ids=IdMap(np.arange(n_users, dtype=np.int64)),
        entity_ids=IdMap(np.arange(n_entities, dtype=np.int64)),
        relation_ids=IdMap(np.arange(n_relations, dtype=np.int64)),
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(7)


@pytest.fixture
def interactions_file(tmp_path: Path) -> Path:
    path = tmp_path / "interactions.tsv"
    lines = []
    for u, user in enumerate(USERS):
        skip = {ITEMS[u % 8], ITEMS[(u + 1) % 8]}
        lines += [f"{user}\t{item}" for item in ITEMS if item not in skip]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def triples_file(tmp_path: Path) -> Path:
    path = tmp_path / "triples.tsv"
    path.write_text("".join(f"{h}\t{r}\t{t}\n" for h, r, t in TRIPLES), encoding="utf-8")
    return path
