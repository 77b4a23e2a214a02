"""Learnable parameters, forward quantities and losses.

The scalar operations (``preference_distance``, ``bpr_loss``, ``attention_score``,
``neighborhood_representation``, ``kg_loss``, ``combined_loss``) read a single
example. The ``*_batch`` functions evaluate many examples at once and return
per-example gradients for every embedding row they read. The trainer scatters
those gradients into :class:`Gradients`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .domain import (
    Aggregation,
    InvalidInput,
    NeighborSet,
    NoNeighbors,
    Regularization,
    UnknownId,
)
from .geometry import Space

_logger = logging.getLogger(__name__)

TABLES: tuple[str, ...] = ("user_embeddings", "entity_embeddings", "relation_embeddings")


def sigmoid(x: np.ndarray | float) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -np.asarray(x, dtype=np.float64)))


@dataclass
class ModelParameters:
    """Θ = {u, v, r, t} plus the per-item regularization logits β.

    Items are the first ``n_items`` rows of the entity table, so
    ``item_embeddings`` is a view and item v and entity v are one embedding.
    """

    user_embeddings: np.ndarray  # (n_users, d)
    entity_embeddings: np.ndarray  # (n_entities, d)
    relation_embeddings: np.ndarray  # (n_relations, d)
    beta_logits: np.ndarray  # (n_items,)
    n_items: int

    @classmethod
    def initialize(
        cls,
        n_users: int,
        n_items: int,
        n_entities: int,
        n_relations: int,
        dim: int,
        space: Space,
        rng: np.random.Generator,
    ) -> ModelParameters:
        if n_entities < n_items:
            raise InvalidInput("entity table must contain every item")
        bound = 0.01 / np.sqrt(dim)

        def table(rows: int) -> np.ndarray:
            return space.project(rng.uniform(-bound, bound, size=(rows, dim)))

        _logger.debug(
            "initializing %d users, %d entities, %d relations in %d dimensions",
            n_users,
            n_entities,
            n_relations,
            dim,
        )
        return cls(
            user_embeddings=table(n_users),
            entity_embeddings=table(n_entities),
            relation_embeddings=table(max(n_relations, 1)),
            beta_logits=np.zeros(n_items),
            n_items=n_items,
        )

    @property
    def dim(self) -> int:
        return int(self.user_embeddings.shape[1])

    @property
    def n_users(self) -> int:
        return int(self.user_embeddings.shape[0])

    @property
    def item_embeddings(self) -> np.ndarray:
        return self.entity_embeddings[: self.n_items]

    def table(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def copy(self) -> ModelParameters:
        return ModelParameters(
            user_embeddings=self.user_embeddings.copy(),
            entity_embeddings=self.entity_embeddings.copy(),
            relation_embeddings=self.relation_embeddings.copy(),
            beta_logits=self.beta_logits.copy(),
            n_items=self.n_items,
        )

    def user(self, user: int) -> np.ndarray:
        if not 0 <= user < self.n_users:
            raise UnknownId(f"Unknown user: {user}")
        return self.user_embeddings[user]

    def item(self, item: int) -> np.ndarray:
        if not 0 <= item < self.n_items:
            raise UnknownId(f"Unknown item: {item}")
        return self.entity_embeddings[item]

    def entity(self, entity: int) -> np.ndarray:
        if not 0 <= entity < self.entity_embeddings.shape[0]:
            raise UnknownId(f"Unknown entity: {entity}")
        return self.entity_embeddings[entity]

    def relation(self, relation: int) -> np.ndarray:
        if not 0 <= relation < self.relation_embeddings.shape[0]:
            raise UnknownId(f"Unknown relation: {relation}")
        return self.relation_embeddings[relation]


@dataclass(frozen=True)
class RowGrad:
    """Gradient of one table restricted to the rows in ``indices`` (sorted, unique)."""

    indices: np.ndarray
    values: np.ndarray

    @classmethod
    def scatter(cls, indices: np.ndarray, values: np.ndarray, dim: int) -> RowGrad:
        indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        values = np.asarray(values, dtype=np.float64).reshape(-1, dim)
        uniq, inverse = np.unique(indices, return_inverse=True)
        summed = np.zeros((uniq.shape[0], dim))
        np.add.at(summed, inverse, values)
        return cls(indices=uniq, values=summed)

    @classmethod
    def empty(cls, dim: int) -> RowGrad:
        return cls(indices=np.zeros(0, dtype=np.int64), values=np.zeros((0, dim)))

    def take(self, rows: np.ndarray) -> np.ndarray:
        """Gradient rows for arbitrary ``rows``; rows outside ``indices`` are zero."""
        rows = np.asarray(rows, dtype=np.int64)
        dim = self.values.shape[1]
        out = np.zeros(rows.shape + (dim,))
        if self.indices.size == 0:
            return out
        pos = np.clip(np.searchsorted(self.indices, rows), 0, self.indices.size - 1)
        hit = self.indices[pos] == rows
        out[hit] = self.values[pos[hit]]
        return out

    def dense(self, rows: int) -> np.ndarray:
        out = np.zeros((rows, self.values.shape[1]))
        out[self.indices] = self.values
        return out

    def merge(self, other: RowGrad) -> RowGrad:
        dim = self.values.shape[1]
        return RowGrad.scatter(
            np.concatenate([self.indices, other.indices]),
            np.concatenate([self.values, other.values]),
            dim,
        )

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


@dataclass(frozen=True)
class Gradients:
    user_embeddings: RowGrad
    entity_embeddings: RowGrad
    relation_embeddings: RowGrad

    def table(self, name: str) -> RowGrad:
        return getattr(self, name)

    def is_finite(self) -> bool:
        return all(self.table(name).is_finite() for name in TABLES)


@dataclass(frozen=True)
class BprBatch:
    loss: np.ndarray  # (B,)
    grad_user: np.ndarray  # (B, d), d loss_b / d u_b
    grad_pos: np.ndarray
    grad_neg: np.ndarray


@dataclass(frozen=True)
class KgBatch:
    """L_K for a batch of items that all have neighbours."""

    items: np.ndarray  # (B,)
    loss: np.ndarray  # (B,)
    relations: np.ndarray  # (B, N) padded ids
    tails: np.ndarray  # (B, N) padded ids
    mask: np.ndarray  # (B, N)
    grad_item: np.ndarray  # (B, d), d loss_b / d v_b
    grad_relations: np.ndarray  # (B, N, d), zero on padding
    grad_tails: np.ndarray  # (B, N, d), zero on padding


@dataclass
class Model:
    """Forward computations of the recommender for a fixed KG and geometry."""

    neighbors: NeighborSet
    space: Space
    aggregation: Aggregation = "attention"
    kg_evaluations: int = field(default=0, compare=False)

    # --- single-example operations ---

    def preference_distance(self, params: ModelParameters, user: int, item: int) -> float:
        return float(self.space.distance(params.user(user), params.item(item)))

    def bpr_loss(self, params: ModelParameters, user: int, pos: int, neg: int) -> float:
        if pos == neg:
            raise InvalidInput("positive and negative item must differ")
        params.user(user), params.item(pos), params.item(neg)
        batch = self.bpr_batch(params, np.array([user]), np.array([pos]), np.array([neg]))
        return float(batch.loss[0])

    def attention_score(
        self, params: ModelParameters, item: int, relation: int, tail: int
    ) -> float:
        shifted = self.space.add(params.item(item), params.relation(relation))
        return float(np.exp(-self.space.distance(shifted, params.entity(tail))))

    def _require_neighbors(self, params: ModelParameters, item: int) -> np.ndarray:
        params.item(item)
        if self.neighbors.degree(item) == 0:
            raise NoNeighbors(f"Item {item} has no KG neighbours")
        return np.array([item])

    def neighborhood_representation(self, params: ModelParameters, item: int) -> np.ndarray:
        items = self._require_neighbors(params, item)
        relations, tails, mask = self.neighbors.padded(items)
        return self._neighborhood(params, items, relations, tails, mask)[-1][0]

    def attention_weights(self, params: ModelParameters, item: int) -> np.ndarray:
        """Normalized midpoint weights of N_v; in the ball ``alpha_i * gamma_i / sum``."""
        items = self._require_neighbors(params, item)
        relations, tails, mask = self.neighbors.padded(items)
        _, points, _, weights, _ = self._neighborhood(params, items, relations, tails, mask)
        return self.space.midpoint_weights(points, weights)[0]

    def kg_loss(self, params: ModelParameters, item: int) -> float:
        items = self._require_neighbors(params, item)
        return float(self.kg_batch(params, items).loss[0])

    def combined_loss(
        self,
        params: ModelParameters,
        user: int,
        pos: int,
        neg: int,
        mode: Regularization,
        beta: float = 0.0,
    ) -> float:
        """L_R + w * L_K, with ``w = beta`` (fixed) or ``sigmoid(beta_v)`` (adaptive)."""
        loss = self.bpr_loss(params, user, pos, neg)
        weight = float(self.kg_weights(params, np.array([pos]), mode, beta)[0])
        if weight == 0.0 or self.neighbors.degree(pos) == 0:
            return loss
        return loss + weight * self.kg_loss(params, pos)

    def kg_weights(
        self, params: ModelParameters, items: np.ndarray, mode: Regularization, beta: float
    ) -> np.ndarray:
        if mode == "adaptive":
            return sigmoid(params.beta_logits[items])
        return np.full(np.shape(items), float(beta))

    # --- batched losses with gradients ---

    def bpr_batch(
        self, params: ModelParameters, users: np.ndarray, pos: np.ndarray, neg: np.ndarray
    ) -> BprBatch:
        u = params.user_embeddings[users]
        v_pos = params.entity_embeddings[pos]
        v_neg = params.entity_embeddings[neg]
        d_pos = self.space.distance(u, v_pos)
        d_neg = self.space.distance(u, v_neg)
        margin = d_neg - d_pos
        loss = np.logaddexp(0.0, -margin)
        slope = sigmoid(-margin)  # -d loss / d margin
        gu_pos, g_pos = self.space.distance_vjp(u, v_pos, slope)
        gu_neg, g_neg = self.space.distance_vjp(u, v_neg, -slope)
        return BprBatch(loss=loss, grad_user=gu_pos + gu_neg, grad_pos=g_pos, grad_neg=g_neg)

    def _neighborhood(
        self,
        params: ModelParameters,
        items: np.ndarray,
        relations: np.ndarray,
        tails: np.ndarray,
        mask: np.ndarray,
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        v = params.entity_embeddings[items]
        r = params.relation_embeddings[relations]
        t = np.where(mask[..., None], params.entity_embeddings[tails], 0.0)
        if self.aggregation == "attention":
            shifted = self.space.add(np.broadcast_to(v[:, None, :], r.shape), r)
            weights = np.exp(-self.space.distance(shifted, t)) * mask
        else:
            weights = mask.astype(np.float64)
        return v, t, r, weights, self.space.midpoint(t, weights)

    def kg_batch(self, params: ModelParameters, items: np.ndarray) -> KgBatch:
        """L_K = d(v, n_v) per item, with full gradients through attention and midpoint."""
        self.kg_evaluations += 1
        items = np.asarray(items, dtype=np.int64)
        relations, tails, mask = self.neighbors.padded(items)
        if items.size and not np.all(mask.any(axis=1)):
            raise NoNeighbors("kg_batch received an item without neighbours")
        v, t, r, weights, rep = self._neighborhood(params, items, relations, tails, mask)
        loss = self.space.distance(v, rep)

        g_v, g_rep = self.space.distance_vjp(v, rep, np.ones_like(loss))
        g_t, g_w = self.space.midpoint_vjp(t, weights, g_rep)
        g_r = np.zeros_like(r)
        if self.aggregation == "attention":
            v_b = np.broadcast_to(v[:, None, :], r.shape)
            shifted = self.space.add(v_b, r)
            g_dist = -weights * g_w
            g_shift, g_t2 = self.space.distance_vjp(shifted, t, g_dist)
            g_vb, g_r = self.space.add_vjp(v_b, r, g_shift)
            g_t = g_t + g_t2
            g_v = g_v + np.sum(g_vb * mask[..., None], axis=1)
        keep = mask[..., None]
        return KgBatch(
            items=items,
            loss=loss,
            relations=relations,
            tails=tails,
            mask=mask,
            grad_item=g_v,
            grad_relations=np.where(keep, g_r, 0.0),
            grad_tails=np.where(keep, g_t, 0.0),
        )
