"""Bilevel training: Θ follows the σ(β)-weighted inner objective, β follows the outer BPR loss.

Per minibatch:

1. draw an independent proxy batch and outer batch and compute the β
   hypergradient through the one-step proxy ``Θ̃ = Θ - α ∇_Θ J_inner(Θ, β)``;
2. take one Adam step on Θ with β fixed (Riemannian-rescaled in the ball,
   then projected);
3. take one Adam step on β with the hypergradient from (1).

Step (1) only reads Θ^t and β^t, and step (2) only reads β^t. So computing
the hypergradient first gives the same result as the Θ-then-β order
without keeping a copy of Θ^t.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .domain import (
    Dataset,
    DegenerateDataset,
    EpochRecord,
    InteractionDataset,
    InvalidInput,
    TrainingConfig,
    TrainingDiverged,
)
from .evaluation import evaluate
from .geometry import ClampCounter, make_space
from .model import TABLES, Gradients, KgBatch, Model, ModelParameters, RowGrad, sigmoid

_logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """First/second moment accumulators per table and a shared step counter."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def apply(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update every array in ``params`` in place."""
        self.step += 1
        bias1 = 1.0 - self.beta1**self.step
        bias2 = 1.0 - self.beta2**self.step
        for name, grad in grads.items():
            param = params[name]
            m = self.m.setdefault(name, np.zeros_like(param))
            v = self.v.setdefault(name, np.zeros_like(param))
            if m.shape != param.shape:
                raise InvalidInput(f"moment shape {m.shape} does not match {name} {param.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            param -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


@dataclass(frozen=True)
class TripleBatch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __len__(self) -> int:
        return int(self.users.shape[0])


@dataclass(frozen=True)
class InnerGradient:
    value: float  # J_inner, weight decay included
    kg_value: float  # weighted L_K contribution, averaged over the batch
    grads: Gradients
    kg: KgBatch | None  # per-example L_K gradients, for the hypergradient


@dataclass(frozen=True)
class TrainResult:
    params: ModelParameters  # best-validation parameters
    history: list[EpochRecord]
    best_epoch: int
    stopped_early: bool


def inner_gradient(
    model: Model, params: ModelParameters, batch: TripleBatch, config: TrainingConfig
) -> InnerGradient:
    """J_inner = mean_b [L_R + w_b L_K] + λ Σ ||θ||² over the embedding rows the batch reads."""
    size = len(batch)
    dim = params.dim
    bpr = model.bpr_batch(params, batch.users, batch.pos, batch.neg)
    value = float(np.mean(bpr.loss))
    user_rows = [batch.users]
    user_grads = [bpr.grad_user / size]
    entity_rows = [batch.pos, batch.neg]
    entity_grads = [bpr.grad_pos / size, bpr.grad_neg / size]
    relation_rows: list[np.ndarray] = []
    relation_grads: list[np.ndarray] = []

    kg: KgBatch | None = None
    kg_value = 0.0
    if config.uses_kg:
        with_neighbors = model.neighbors.degree(batch.pos) > 0
        if np.any(with_neighbors):
            items = batch.pos[with_neighbors]
            kg = model.kg_batch(params, items)
            weights = model.kg_weights(params, items, config.regularization, config.beta)
            kg_value = float(np.sum(weights * kg.loss) / size)
            scale = weights / size
            entity_rows += [kg.items, kg.tails[kg.mask]]
            entity_grads += [
                scale[:, None] * kg.grad_item,
                (scale[:, None, None] * kg.grad_tails)[kg.mask],
            ]
            relation_rows.append(kg.relations[kg.mask])
            relation_grads.append((scale[:, None, None] * kg.grad_relations)[kg.mask])

    rows = {
        "user_embeddings": (user_rows, user_grads),
        "entity_embeddings": (entity_rows, entity_grads),
        "relation_embeddings": (relation_rows, relation_grads),
    }
    decay_value = 0.0
    grads: dict[str, RowGrad] = {}
    for name, (indices, values) in rows.items():
        if not indices:
            grads[name] = RowGrad.empty(dim)
            continue
        grad = RowGrad.scatter(np.concatenate(indices), np.concatenate(values), dim)
        if config.weight_decay > 0:
            touched = params.table(name)[grad.indices]
            decay_value += config.weight_decay * float(np.sum(touched * touched))
            grad = RowGrad(grad.indices, grad.values + 2.0 * config.weight_decay * touched)
        grads[name] = grad
    return InnerGradient(
        value=value + kg_value + decay_value,
        kg_value=kg_value,
        grads=Gradients(**grads),
        kg=kg,
    )


def inner_step(
    model: Model,
    params: ModelParameters,
    batch: TripleBatch,
    config: TrainingConfig,
    optimizer: AdamState,
) -> InnerGradient:
    """One Adam step on J_inner with β fixed; every table is projected afterwards."""
    result = inner_gradient(model, params, batch, config)
    if not result.grads.is_finite():
        raise TrainingDiverged("non-finite gradient in the inner step")
    dense: dict[str, np.ndarray] = {}
    for name in TABLES:
        table = params.table(name)
        grad = result.grads.table(name)
        rescaled = model.space.rescale(table[grad.indices], grad.values)
        dense[name] = RowGrad(grad.indices, rescaled).dense(table.shape[0])
    optimizer.apply({name: params.table(name) for name in TABLES}, dense)
    for name in TABLES:
        table = params.table(name)
        table[...] = model.space.project(table)
    return result


def _proxy_from(
    model: Model, params: ModelParameters, grads: Gradients, alpha: float
) -> ModelParameters:
    proxy = params.copy()
    for name in TABLES:
        grad = grads.table(name)
        if grad.indices.size:
            table = proxy.table(name)
            table[grad.indices] = model.space.project(table[grad.indices] - alpha * grad.values)
    return proxy


def proxy_parameters(
    model: Model, params: ModelParameters, batch: TripleBatch, config: TrainingConfig
) -> ModelParameters:
    """Θ̃(β) = Θ - α ∇_Θ J_inner(Θ, β): a plain gradient step on a copy, projected."""
    result = inner_gradient(model, params, batch, config)
    if not result.grads.is_finite():
        raise TrainingDiverged("non-finite gradient in the proxy step")
    return _proxy_from(model, params, result.grads, config.alpha)


def outer_objective(model: Model, params: ModelParameters, batch: TripleBatch) -> float:
    """J_outer: the mean BPR loss of ``batch``."""
    return float(np.mean(model.bpr_batch(params, batch.users, batch.pos, batch.neg).loss))


def hypergradient(
    model: Model,
    params: ModelParameters,
    proxy_batch: TripleBatch,
    outer_batch: TripleBatch,
    config: TrainingConfig,
) -> np.ndarray:
    """∂J_outer(Θ̃(β))/∂β for every item.

    β_v only enters J_inner through ``σ(β_v) L_K(v)``, so
    ``∂J_outer/∂β_v = -α σ'(β_v) Σ_b <∇_Θ L_K(v_b)/B, ∇_Θ̃ J_outer(Θ̃)>`` over the
    proxy examples whose positive item is v.
    """
    if not config.adaptive:
        raise InvalidInput("the hypergradient is only defined in adaptive mode")
    hyper = np.zeros(params.n_items)
    inner = inner_gradient(model, params, proxy_batch, config)
    if inner.kg is None or config.alpha == 0.0:
        return hyper
    if not inner.grads.is_finite():
        raise TrainingDiverged("non-finite gradient in the proxy step")
    proxy = _proxy_from(model, params, inner.grads, config.alpha)

    outer = model.bpr_batch(proxy, outer_batch.users, outer_batch.pos, outer_batch.neg)
    outer_size = len(outer_batch)
    # J_outer never reads relation rows, so only entity rows can pair up with ∇ L_K.
    g_entities = RowGrad.scatter(
        np.concatenate([outer_batch.pos, outer_batch.neg]),
        np.concatenate([outer.grad_pos, outer.grad_neg]) / outer_size,
        params.dim,
    )
    kg = inner.kg
    dots = np.sum(kg.grad_item * g_entities.take(kg.items), axis=1)
    dots += np.sum(kg.grad_tails * g_entities.take(kg.tails), axis=(1, 2))
    sig = sigmoid(params.beta_logits[kg.items])
    contrib = -config.alpha * sig * (1.0 - sig) * dots / len(proxy_batch)
    np.add.at(hyper, kg.items, contrib)
    return hyper


def apply_beta_step(params: ModelParameters, hyper: np.ndarray, optimizer: AdamState) -> None:
    if not np.all(np.isfinite(hyper)):
        raise TrainingDiverged("non-finite hypergradient")
    optimizer.apply({"beta_logits": params.beta_logits}, {"beta_logits": hyper})


def outer_step(
    model: Model,
    params: ModelParameters,
    proxy_batch: TripleBatch,
    outer_batch: TripleBatch,
    config: TrainingConfig,
    optimizer: AdamState,
) -> np.ndarray:
    """One Adam step on β with the proxy hypergradient; returns the hypergradient used."""
    hyper = hypergradient(model, params, proxy_batch, outer_batch, config)
    apply_beta_step(params, hyper, optimizer)
    return hyper


class NegativeSampler:
    """Uniform sampling over the items a user has not trained on."""

    def __init__(self, dataset: InteractionDataset):
        self.n_items = dataset.n_items
        self.dataset = dataset
        users, items = dataset.train_pairs()
        self._codes = np.sort(users * self.n_items + items)
        full = [u for u, s in enumerate(dataset.train) if len(s) >= self.n_items]
        self._saturated = frozenset(full)

    def _check(self, users: np.ndarray) -> None:
        if self._saturated and np.any(np.isin(users, list(self._saturated))):
            raise DegenerateDataset("a user has interacted with every item; no negative exists")

    def _seen(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        codes = users * self.n_items + items
        pos = np.clip(np.searchsorted(self._codes, codes), 0, max(self._codes.size - 1, 0))
        return self._codes[pos] == codes if self._codes.size else np.zeros(codes.shape, bool)

    def sample(self, rng: np.random.Generator, user: int) -> int:
        return int(self.sample_many(rng, np.array([user]))[0])

    def sample_many(self, rng: np.random.Generator, users: np.ndarray) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        self._check(users)
        out = rng.integers(self.n_items, size=users.shape[0])
        bad = self._seen(users, out)
        while np.any(bad):
            out[bad] = rng.integers(self.n_items, size=int(np.count_nonzero(bad)))
            bad[bad] = self._seen(users[bad], out[bad])
        return out


def sample_negative(rng: np.random.Generator, user: int, dataset: InteractionDataset) -> int:
    return NegativeSampler(dataset).sample(rng, user)


def _random_batch(
    rng: np.random.Generator, users: np.ndarray, pos: np.ndarray, neg: np.ndarray, size: int
) -> TripleBatch:
    idx = rng.integers(users.shape[0], size=min(size, users.shape[0]))
    return TripleBatch(users[idx], pos[idx], neg[idx])


def _mean_weight(params: ModelParameters, config: TrainingConfig) -> float:
    if config.adaptive:
        return float(np.mean(sigmoid(params.beta_logits))) if params.n_items else 0.0
    return float(config.beta)


def train(
    dataset: Dataset,
    config: TrainingConfig,
    *,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    interactions = dataset.interactions
    kg = dataset.kg
    space = make_space(config.space, config.curvature)
    model = Model(kg.neighbors, space, config.aggregation)
    init_rng, neg_rng, order_rng, bilevel_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(4)
    )
    params = ModelParameters.initialize(
        interactions.n_users,
        interactions.n_items,
        kg.n_entities,
        kg.n_relations,
        config.dim,
        space,
        init_rng,
    )
    sampler = NegativeSampler(interactions)
    theta_opt = AdamState(lr=config.lr)
    beta_opt = AdamState(lr=config.beta_lr)

    train_users, train_items = interactions.train_pairs()
    users = np.tile(train_users, config.negatives)
    pos = np.tile(train_items, config.negatives)
    n_examples = users.shape[0]

    has_valid = any(len(v) for v in interactions.valid)
    if not has_valid:
        _logger.warning("validation set is empty; early stopping is disabled")
    if config.uses_kg and kg.neighbors.indptr[-1] == 0:
        _logger.warning("no item has KG neighbours; training reduces to BPR")

    history: list[EpochRecord] = []
    best = params.copy()
    best_ndcg = -np.inf
    best_epoch = 0
    stale = 0
    stopped = False
    for epoch in range(1, config.epochs + 1):
        neg = sampler.sample_many(neg_rng, users)
        order = order_rng.permutation(n_examples)
        loss_sum = kg_sum = 0.0
        batches = 0
        with ClampCounter() as clamps:
            try:
                for start in range(0, n_examples, config.batch_size):
                    idx = order[start : start + config.batch_size]
                    batch = TripleBatch(users[idx], pos[idx], neg[idx])
                    hyper = None
                    if config.adaptive:
                        proxy = _random_batch(bilevel_rng, users, pos, neg, config.batch_size)
                        outer = _random_batch(bilevel_rng, users, pos, neg, config.batch_size)
                        hyper = hypergradient(model, params, proxy, outer, config)
                    stats = inner_step(model, params, batch, config, theta_opt)
                    if hyper is not None:
                        apply_beta_step(params, hyper, beta_opt)
                    loss_sum += stats.value
                    kg_sum += stats.kg_value
                    batches += 1
                    _logger.debug("epoch %d batch %d: J_inner=%.6f", epoch, batches, stats.value)
            except TrainingDiverged as e:
                raise TrainingDiverged(f"epoch {epoch}, batch {batches + 1}: {e}") from e
        if clamps.total:
            _logger.debug(
                "epoch %d: clamped %d atanh and %d Lorentz values",
                epoch,
                clamps.atanh,
                clamps.lorentz,
            )

        recall = ndcg = float("nan")
        if has_valid:
            report = evaluate(
                params, interactions, [config.eval_k], space, target="valid"
            )
            recall, ndcg = report.metrics[config.eval_k]
        record = EpochRecord(
            epoch=epoch,
            inner_loss=loss_sum / max(batches, 1),
            kg_loss=kg_sum / max(batches, 1),
            mean_sigma_beta=_mean_weight(params, config),
            recall=recall,
            ndcg=ndcg,
        )
        history.append(record)
        _logger.info(
            "epoch %d: loss=%.5f kg=%.5f weight=%.4f recall@%d=%.4f ndcg@%d=%.4f",
            epoch,
            record.inner_loss,
            record.kg_loss,
            record.mean_sigma_beta,
            config.eval_k,
            recall,
            config.eval_k,
            ndcg,
        )
        if on_epoch is not None:
            on_epoch(record)

        if has_valid:
            if ndcg > best_ndcg:
                best, best_ndcg, best_epoch, stale = params.copy(), ndcg, epoch, 0
            else:
                stale += 1
                if config.patience and stale >= config.patience:
                    _logger.info("no NDCG gain for %d epochs; stopping", stale)
                    stopped = True
                    break

    if not has_valid:
        best, best_epoch = params, len(history)
    return TrainResult(params=best, history=history, best_epoch=best_epoch, stopped_early=stopped)
