"""Full-ranking evaluation: Recall@K and NDCG@K over all items outside the training set."""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from typing import Literal

import numpy as np

from .domain import DegenerateDataset, InteractionDataset, MetricsReport, RankedList
from .geometry import Space
from .model import ModelParameters

_logger = logging.getLogger(__name__)

CHUNK_USERS = 512


def top_k(distances: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` smallest finite distances, ties broken by ascending index."""
    candidates = np.flatnonzero(np.isfinite(distances))
    values = distances[candidates]
    if k < candidates.size:
        threshold = np.partition(values, k - 1)[k - 1]
        keep = values <= threshold
        candidates, values = candidates[keep], values[keep]
    order = np.lexsort((candidates, values))
    return candidates[order[:k]]


def _masked_distances(
    params: ModelParameters, users: np.ndarray, space: Space, exclude: Sequence[np.ndarray]
) -> np.ndarray:
    dist = space.pairwise_distance(params.user_embeddings[users], params.item_embeddings)
    for row, items in enumerate(exclude):
        dist[row, items] = np.inf
    return dist


def rank_items(
    params: ModelParameters, user: int, exclude: Iterable[int], k: int, space: Space
) -> RankedList:
    """Top-``k`` items by ascending distance to ``user``, never returning an excluded item."""
    params.user(user)
    excluded = np.fromiter(exclude, dtype=np.int64)
    dist = _masked_distances(params, np.array([user]), space, [excluded])[0]
    return RankedList(user=user, items=top_k(dist, k).tolist())


def recall_at_k(ranked: Sequence[int], test: Iterable[int], k: int) -> float:
    relevant = set(test)
    hits = sum(1 for item in ranked[:k] if item in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked: Sequence[int], test: Iterable[int], k: int) -> float:
    relevant = set(test)
    dcg = sum(1.0 / np.log2(i + 2) for i, item in enumerate(ranked[:k]) if item in relevant)
    idcg = sum(1.0 / np.log2(i + 2) for i in range(min(k, len(relevant))))
    return float(dcg / idcg)


def evaluate(
    params: ModelParameters,
    interactions: InteractionDataset,
    ks: Sequence[int],
    space: Space,
    target: Literal["test", "valid", "train"] = "test",
    exclude_validation: bool = True,
) -> MetricsReport:
    """Macro-averaged Recall@K / NDCG@K over users with a nonempty target set.

    ``test`` ranks items outside the training set (and, by default, outside the
    validation set). ``valid`` ranks items outside the training set. ``train``
    ranks every item and measures how well the training set is recovered.
    """
    targets = {"test": interactions.test, "valid": interactions.valid, "train": interactions.train}[
        target
    ]
    users = np.array([u for u in range(interactions.n_users) if len(targets[u])], dtype=np.int64)
    if users.size == 0:
        raise DegenerateDataset(f"no user has a nonempty {target} set")
    ks = sorted(set(ks))
    kmax = ks[-1]
    empty = np.zeros(0, dtype=np.int64)

    def excluded(u: int) -> np.ndarray:
        if target == "train":
            return empty
        if target == "test" and exclude_validation:
            return np.concatenate([interactions.train[u], interactions.valid[u]])
        return interactions.train[u]

    sums = {k: [0.0, 0.0] for k in ks}
    for start in range(0, users.size, CHUNK_USERS):
        chunk = users[start : start + CHUNK_USERS]
        dist = _masked_distances(params, chunk, space, [excluded(int(u)) for u in chunk])
        for row, u in enumerate(chunk):
            ranked = top_k(dist[row], kmax).tolist()
            for k in ks:
                sums[k][0] += recall_at_k(ranked, targets[u], k)
                sums[k][1] += ndcg_at_k(ranked, targets[u], k)
    n = int(users.size)
    report = MetricsReport(
        metrics={k: (r / n, g / n) for k, (r, g) in sums.items()}, n_users=n
    )
    _logger.debug("evaluated %d users on %s: %s", n, target, dict(report.metrics))
    return report
