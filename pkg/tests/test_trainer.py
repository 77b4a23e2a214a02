from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from conftest import make_dataset, random_ball_points

from kgball.domain import Dataset, DegenerateDataset, InvalidInput, NeighborSet, TrainingConfig
from kgball.evaluation import evaluate
from kgball.geometry import EuclideanSpace, PoincareBall
from kgball.model import TABLES, Model, ModelParameters
from kgball.trainer import (
    AdamState,
    NegativeSampler,
    TripleBatch,
    hypergradient,
    inner_gradient,
    inner_step,
    outer_objective,
    outer_step,
    proxy_parameters,
    sample_negative,
    train,
)
from kgball.util.gradcheck import central_difference, relative_error

TRIPLES = [(0, 0, 5), (0, 1, 1), (1, 0, 5), (2, 1, 6), (3, 0, 6), (3, 1, 2)]
DIM = 4


def _setup(rng: np.random.Generator) -> tuple[Model, ModelParameters]:
    params = ModelParameters(
        user_embeddings=random_ball_points(rng, 3, DIM, 1.0, max_radius=0.5),
        entity_embeddings=random_ball_points(rng, 7, DIM, 1.0, max_radius=0.5),
        relation_embeddings=random_ball_points(rng, 2, DIM, 1.0, max_radius=0.3),
        beta_logits=rng.normal(size=5),
        n_items=5,
    )
    return Model(NeighborSet.from_pairs(5, TRIPLES), PoincareBall(1.0)), params


def _batch(users: list[int], pos: list[int], neg: list[int]) -> TripleBatch:
    return TripleBatch(np.array(users), np.array(pos), np.array(neg))


def test_adam_first_step_moves_by_lr() -> None:
    opt = AdamState(lr=0.1)
    param = np.zeros(3)
    opt.apply({"p": param}, {"p": np.array([2.0, -0.5, 0.0])})
    np.testing.assert_allclose(param, [-0.1, 0.1, 0.0], atol=1e-6)
    assert opt.step == 1


@pytest.mark.parametrize("regularization", ["adaptive", "fixed"])
def test_inner_gradient_matches_finite_differences(
    rng: np.random.Generator, regularization: str
) -> None:
    config = TrainingConfig(
        regularization=regularization,  # type: ignore[arg-type]
        beta=0.3,
        weight_decay=0.01,
    )
    batch = _batch([0, 1, 2, 0], [0, 3, 4, 2], [1, 1, 0, 4])
    for _ in range(5):
        model, params = _setup(rng)
        analytic = inner_gradient(model, params, batch, config)
        for name in TABLES:
            original = params.table(name).copy()

            def value(values: np.ndarray) -> float:
                setattr(params, name, values)
                return inner_gradient(model, params, batch, config).value

            numeric = central_difference(value, original)
            setattr(params, name, original)
            dense = analytic.grads.table(name).dense(original.shape[0])
            assert relative_error(dense, numeric) < 1e-4


def test_inner_value_is_mean_combined_loss(rng: np.random.Generator) -> None:
    model, params = _setup(rng)
    config = TrainingConfig(weight_decay=0.0)
    batch = _batch([0, 1], [0, 4], [2, 3])
    first = model.combined_loss(params, 0, 0, 2, "adaptive")
    second = model.combined_loss(params, 1, 4, 3, "adaptive")
    assert inner_gradient(model, params, batch, config).value == pytest.approx((first + second) / 2)


def test_fixed_zero_beta_never_evaluates_the_kg(rng: np.random.Generator) -> None:
    model, params = _setup(rng)
    config = TrainingConfig(regularization="fixed", beta=0.0)
    result = inner_step(model, params, _batch([0, 1], [0, 1], [2, 3]), config, AdamState(lr=0.01))
    assert model.kg_evaluations == 0
    assert result.kg is None and result.kg_value == 0.0
    assert result.grads.relation_embeddings.indices.size == 0


def test_inner_step_keeps_points_in_ball(rng: np.random.Generator) -> None:
    model, params = _setup(rng)
    before = params.copy()
    opt = AdamState(lr=0.5)
    for _ in range(20):
        inner_step(model, params, _batch([0, 1, 2], [0, 1, 3], [4, 2, 0]), TrainingConfig(), opt)
    for name in TABLES:
        assert np.all(np.linalg.norm(params.table(name), axis=1) < 1.0)
    assert not np.array_equal(before.user_embeddings, params.user_embeddings)
    # β is an outer variable
    np.testing.assert_array_equal(before.beta_logits, params.beta_logits)


def test_proxy_with_zero_step_is_identity(rng: np.random.Generator) -> None:
    model, params = _setup(rng)
    config = TrainingConfig(proxy_lr=0.0)
    proxy = proxy_parameters(model, params, _batch([0], [0], [1]), config)
    for name in TABLES:
        np.testing.assert_array_equal(proxy.table(name), params.table(name))


def test_hypergradient_matches_finite_differences(rng: np.random.Generator) -> None:
    config = TrainingConfig(proxy_lr=0.1, weight_decay=1e-3)
    proxy_batch = _batch([0, 1, 2], [0, 1, 2], [3, 4, 4])
    outer_batch = _batch([0, 1, 2], [1, 0, 3], [2, 4, 0])
    for _ in range(5):
        model, params = _setup(rng)
        analytic = hypergradient(model, params, proxy_batch, outer_batch, config)

        def outer(beta: np.ndarray) -> float:
            params.beta_logits = beta
            proxy = proxy_parameters(model, params, proxy_batch, config)
            return outer_objective(model, proxy, outer_batch)

        original = params.beta_logits.copy()
        numeric = central_difference(outer, original)
        params.beta_logits = original
        assert relative_error(analytic, numeric) < 1e-3
        # items 3 and 4 are never positives of the proxy batch
        assert analytic[3] == 0.0 and analytic[4] == 0.0
        np.testing.assert_allclose(numeric[3:], 0.0, atol=1e-12)


def test_hypergradient_requires_adaptive_mode(rng: np.random.Generator) -> None:
    model, params = _setup(rng)
    batch = _batch([0], [0], [1])
    with pytest.raises(InvalidInput):
        hypergradient(model, params, batch, batch, TrainingConfig(regularization="fixed"))


def test_outer_step_only_moves_beta(rng: np.random.Generator) -> None:
    model, params = _setup(rng)
    before = params.copy()
    hyper = outer_step(
        model,
        params,
        _batch([0, 1], [0, 1], [3, 4]),
        _batch([0, 1], [1, 0], [2, 3]),
        TrainingConfig(proxy_lr=0.1),
        AdamState(lr=0.01),
    )
    for name in TABLES:
        np.testing.assert_array_equal(before.table(name), params.table(name))
    moved = params.beta_logits != before.beta_logits
    np.testing.assert_array_equal(moved, hyper != 0.0)


def test_sample_negative_avoids_training_items() -> None:
    dataset = make_dataset([[0, 1, 2], [4]], n_items=5).interactions
    rng = np.random.default_rng(0)
    for _ in range(200):
        assert sample_negative(rng, 0, dataset) in (3, 4)
    sampler = NegativeSampler(dataset)
    negatives = sampler.sample_many(rng, np.array([0, 1] * 500))
    assert not np.any(np.isin(negatives[::2], [0, 1, 2]))
    assert not np.any(negatives[1::2] == 4)


def test_sample_negative_with_one_candidate() -> None:
    dataset = make_dataset([[0, 1, 2, 3]], n_items=5).interactions
    rng = np.random.default_rng(1)
    assert {sample_negative(rng, 0, dataset) for _ in range(20)} == {4}


def test_sample_negative_rejects_saturated_user() -> None:
    dataset = make_dataset([[0, 1, 2]], n_items=3).interactions
    with pytest.raises(DegenerateDataset):
        sample_negative(np.random.default_rng(0), 0, dataset)


def _small_dataset() -> Dataset:
    train = [[0, 1, 2], [1, 2, 3], [3, 4, 5], [4, 5, 0]]
    valid = [[3], [4], [0], [1]]
    test = [[4], [5], [1], [2]]
    triples = [(0, 0, 6), (1, 0, 6), (2, 0, 6), (3, 1, 7), (4, 1, 7), (5, 1, 7)]
    return make_dataset(train, 6, triples, n_entities=8, n_relations=2, valid=valid, test=test)


def test_train_is_deterministic() -> None:
    dataset = _small_dataset()
    config = TrainingConfig(dim=4, epochs=3, batch_size=4, lr=0.01)
    first = train(dataset, config)
    second = train(dataset, config)
    assert [r.to_line() for r in first.history] == [r.to_line() for r in second.history]
    for name in (*TABLES, "beta_logits"):
        np.testing.assert_array_equal(first.params.table(name), second.params.table(name))
    other = train(dataset, replace(config, seed=config.seed + 1))
    assert not np.array_equal(first.params.user_embeddings, other.params.user_embeddings)


def test_train_history_and_best_params() -> None:
    dataset = _small_dataset()
    config = TrainingConfig(dim=4, epochs=4, batch_size=5, lr=0.01)
    result = train(dataset, config)
    assert [r.epoch for r in result.history] == [1, 2, 3, 4]
    assert 1 <= result.best_epoch <= 4
    best = result.history[result.best_epoch - 1]
    report = evaluate(result.params, dataset.interactions, [20], PoincareBall(1.0), target="valid")
    assert report.ndcg(20) == pytest.approx(best.ndcg)
    assert all(0.0 < r.mean_sigma_beta < 1.0 for r in result.history)


def test_fixed_zero_beta_history_has_no_kg_loss() -> None:
    config = TrainingConfig(dim=4, epochs=2, batch_size=4, regularization="fixed", beta=0.0)
    result = train(_small_dataset(), config)
    assert all(r.kg_loss == 0.0 for r in result.history)
    assert all(r.mean_sigma_beta == 0.0 for r in result.history)


def test_early_stopping() -> None:
    config = TrainingConfig(dim=4, epochs=30, batch_size=4, lr=1e-9, patience=1)
    result = train(_small_dataset(), config)
    assert result.stopped_early
    assert len(result.history) == result.best_epoch + 1


def test_empty_validation_disables_early_stopping() -> None:
    dataset = make_dataset([[0, 1], [1, 2]], n_items=4, test=[[2], [3]])
    config = TrainingConfig(dim=4, epochs=3, batch_size=2, patience=1)
    result = train(dataset, config)
    assert len(result.history) == 3 and not result.stopped_early
    assert all(np.isnan(r.ndcg) for r in result.history)
    assert result.best_epoch == 3


@pytest.mark.slow
def test_overfits_clustered_training_data() -> None:
    """50 users, 100 items in 5 clusters of 20; each user's training set is one cluster."""
    train_sets = [[20 * (u % 5) + i for i in range(20)] for u in range(50)]
    dataset = make_dataset(train_sets, n_items=100)
    config = TrainingConfig(
        dim=16,
        epochs=200,
        batch_size=250,
        lr=0.02,
        weight_decay=0.0,
        regularization="fixed",
        beta=0.0,
    )
    result = train(dataset, config)
    report = evaluate(result.params, dataset.interactions, [20], PoincareBall(1.0), target="train")
    assert report.recall(20) > 0.9


def test_negative_sampling_is_uniform() -> None:
    dataset = make_dataset([[0, 1]], n_items=12).interactions
    draws = NegativeSampler(dataset).sample_many(np.random.default_rng(3), np.zeros(100_000, int))
    counts = np.bincount(draws, minlength=12)
    assert counts[0] == counts[1] == 0
    expected = 100_000 / 10
    sigma = np.sqrt(100_000 * 0.1 * 0.9)
    assert np.all(np.abs(counts[2:] - expected) < 4 * sigma)


def test_fixed_mode_never_moves_beta() -> None:
    config = TrainingConfig(dim=4, epochs=3, batch_size=4, regularization="fixed", beta=0.5)
    result = train(_small_dataset(), config)
    np.testing.assert_array_equal(result.params.beta_logits, np.zeros(6))


def _two_item_params(user: list[float], entities: list[list[float]]) -> ModelParameters:
    return ModelParameters(
        user_embeddings=np.array([user]),
        entity_embeddings=np.array(entities),
        relation_embeddings=np.zeros((1, 2)),
        beta_logits=np.zeros(2),
        n_items=2,
    )


def test_single_triple_loss_decreases_every_step() -> None:
    model = Model(NeighborSet.empty(2), PoincareBall(1.0))
    params = _two_item_params([0.0, 0.0], [[0.3, 0.0], [-0.3, 0.0]])
    config = TrainingConfig(dim=2, regularization="fixed", beta=0.0, weight_decay=0.0)
    opt = AdamState(lr=0.001)
    losses = [model.bpr_loss(params, 0, 0, 1)]
    for _ in range(100):
        inner_step(model, params, _batch([0], [0], [1]), config, opt)
        losses.append(model.bpr_loss(params, 0, 0, 1))
    assert np.all(np.diff(losses) < 0)


def test_weight_decay_shrinks_norms_without_data_gradient() -> None:
    # user, positive and negative coincide, so every distance gradient vanishes
    model = Model(NeighborSet.empty(2), EuclideanSpace())
    params = _two_item_params([0.3, -0.4], [[0.3, -0.4], [0.3, -0.4]])
    batch = _batch([0], [0], [1])
    data_only = inner_gradient(
        model, params, batch, TrainingConfig(regularization="fixed", beta=0.0, weight_decay=0.0)
    )
    for name in TABLES:
        np.testing.assert_array_equal(data_only.grads.table(name).values, 0.0)

    config = TrainingConfig(regularization="fixed", beta=0.0, weight_decay=0.01)
    opt = AdamState(lr=0.01)
    norms = [np.linalg.norm(params.user_embeddings[0])]
    for _ in range(10):
        inner_step(model, params, batch, config, opt)
        norms.append(np.linalg.norm(params.user_embeddings[0]))
        np.testing.assert_array_equal(params.entity_embeddings[0], params.user_embeddings[0])
    assert np.all(np.diff(norms) < 0)


def test_hypergradient_sign_when_the_neighbour_helps_ranking() -> None:
    # item 0's only neighbour sits next to the user, so a stronger KG pull on item 0
    # moves the positive toward the user and lowers the outer ranking loss
    model = Model(NeighborSet.from_pairs(2, [(0, 0, 2)]), PoincareBall(1.0))
    params = ModelParameters(
        user_embeddings=np.array([[0.4, 0.0]]),
        entity_embeddings=np.array([[-0.3, 0.0], [0.0, 0.5], [0.35, 0.05]]),
        relation_embeddings=np.zeros((1, 2)),
        beta_logits=np.zeros(2),
        n_items=2,
    )
    config = TrainingConfig(proxy_lr=0.1, weight_decay=0.0)
    batch = _batch([0], [0], [1])
    analytic = hypergradient(model, params, batch, batch, config)

    def outer(beta: np.ndarray) -> float:
        params.beta_logits = beta
        return outer_objective(model, proxy_parameters(model, params, batch, config), batch)

    numeric = central_difference(outer, np.zeros(2))
    assert numeric[0] < 0
    assert analytic[0] < 0
    assert relative_error(analytic, numeric) < 1e-3
