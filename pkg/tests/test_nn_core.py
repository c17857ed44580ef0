import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cirsim.nn_core import (
    SGD,
    MlpNetwork,
    SingleClassBatch,
    TrainConfig,
    TrainingError,
    augment,
    cross_entropy,
    dataset_from_features,
    distillation_loss,
    evaluate,
    forward,
    load_checkpoint,
    make_synthetic_dataset,
    mine_triplets,
    params_equal,
    save_checkpoint,
    sgd_step,
    softmax,
    train_supervised,
    triplet_contrastive_loss,
    triplet_loss_from_triplets,
    Triplets,
)
from oracles import gradient_check


# -- forward ---------------------------------------------------------------


def test_zero_weights_give_zero_logits_and_uniform_softmax():
    net = MlpNetwork([4, 6], 5)
    for v in net.params.values():
        v[...] = 0.0
    feats, logits = forward(net, np.ones((3, 4)))
    assert np.all(feats == 0) and np.all(logits == 0)
    assert np.allclose(softmax(logits), 0.2)


def test_single_layer_on_unit_input_is_bias_plus_row_sums():
    net = MlpNetwork([3, 2], 2)
    w = np.array([[0.5, 1.0], [0.25, 2.0], [0.25, -1.0]])
    net.params["W0"][...] = w
    net.params["b0"][...] = [0.1, 0.2]
    net.params["head.W"][...] = np.eye(2)
    feats, logits = forward(net, np.ones((1, 3)))
    expected = np.array([0.1, 0.2]) + w.sum(axis=0)
    assert np.allclose(feats[0], expected)
    assert np.allclose(logits[0], expected)


def test_forward_matches_loop_recomputation():
    rng = np.random.default_rng(3)
    net = MlpNetwork([5, 7, 4], 3, projection_dim=2, seed=4)
    for v in net.params.values():
        v += rng.normal(0, 0.1, v.shape)
    x = rng.standard_normal((6, 5))
    fwd = net.forward(x)

    def dense(v, w, b):
        return [sum(v[i] * w[i][j] for i in range(len(v))) + b[j] for j in range(len(b))]

    for r in range(len(x)):
        h = list(x[r])
        for layer in range(2):
            h = [max(0.0, z) for z in dense(h, net.params[f"W{layer}"], net.params[f"b{layer}"])]
        assert np.allclose(fwd.features[r], h, atol=1e-12)
        assert np.allclose(fwd.logits[r], dense(h, net.params["head.W"], net.params["head.b"]), atol=1e-12)
        assert np.allclose(fwd.projection[r], dense(h, net.params["proj.W"], net.params["proj.b"]), atol=1e-12)


def test_forward_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        MlpNetwork([4, 3], 2).forward(np.zeros((2, 5)))


def test_forward_is_deterministic():
    net = MlpNetwork([4, 8], 3, seed=1)
    x = np.random.default_rng(0).standard_normal((5, 4))
    assert np.array_equal(net.forward(x).logits, net.forward(x).logits)


# -- losses ----------------------------------------------------------------


@pytest.mark.parametrize("c", [2, 7, 100])
def test_uniform_logits_give_log_c(c):
    loss, _ = cross_entropy(np.zeros((4, c)), np.arange(4) % c)
    assert loss == pytest.approx(math.log(c), rel=1e-12)


def test_confident_correct_logit_gives_near_zero_loss():
    logits = np.zeros((2, 3))
    logits[0, 1] = logits[1, 2] = 1e3
    loss, _ = cross_entropy(logits, np.array([1, 2]))
    assert 0 <= loss < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_cross_entropy_gradient_rows_sum_to_zero(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(0, 5, (6, 4))
    loss, grad = cross_entropy(logits, rng.integers(4, size=6))
    assert loss >= 0
    assert np.allclose(grad.sum(axis=1), 0, atol=1e-12)


@pytest.mark.parametrize("kind", ["ce", "triplet", "lwf"])
def test_gradients_match_finite_differences(kind):
    for seed in range(10):
        assert gradient_check(kind, seed) < 1e-4, (kind, seed)


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def test_triplet_loss_equal_distances_is_n_times_margin():
    # anchor at e0, positive and negative both at 90 degrees
    emb = np.array([_unit([1, 0, 0]), _unit([0, 1, 0]), _unit([0, 0, 1])] * 2)
    trip = Triplets(np.array([0, 3]), np.array([1, 4]), np.array([2, 5]))
    loss, _ = triplet_loss_from_triplets(emb, trip, margin=0.3)
    assert loss == pytest.approx(2 * 0.3)


def test_triplet_loss_is_zero_when_negatives_are_far_enough():
    emb = np.array([[1.0, 0.0], [1.0, 0.01], [-1.0, 0.0], [-1.0, 0.01]])
    labels = np.array([0, 0, 1, 1])
    loss, grad = triplet_contrastive_loss(emb, labels, margin=0.5, mining="hard")
    assert loss == 0.0
    assert np.all(grad == 0)


def test_single_class_batch_is_rejected():
    with pytest.raises(SingleClassBatch):
        mine_triplets(np.ones((4, 2)), np.zeros(4, dtype=int))


def test_unknown_mining_is_rejected():
    with pytest.raises(ValueError):
        mine_triplets(np.eye(4), np.array([0, 0, 1, 1]), mining="semi")


def test_hard_negative_is_nearest_other_class_sample():
    rng = np.random.default_rng(11)
    emb = rng.standard_normal((12, 3))
    labels = rng.integers(3, size=12)
    trip = mine_triplets(emb, labels, "hard", rng)
    z = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    for a, p, n in zip(trip.anchor, trip.positive, trip.negative):
        assert labels[p] == labels[a] and p != a
        others = [j for j in range(12) if labels[j] != labels[a]]
        best = min(others, key=lambda j: float(((z[a] - z[j]) ** 2).sum()))
        assert n == best


def test_distillation_vanishes_when_student_matches_teacher():
    logits = np.random.default_rng(2).standard_normal((5, 4))
    loss, grad = distillation_loss(logits, logits.copy(), temperature=2.0)
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(grad, 0, atol=1e-15)


# -- optimization ----------------------------------------------------------


def test_zero_gradient_leaves_net_unchanged():
    net = MlpNetwork([3, 4], 2, seed=0)
    before = net.copy()
    grads = {k: np.zeros_like(v) for k, v in net.params.items()}
    sgd_step(net, grads, SGD(0.1, momentum=0.9))
    assert params_equal(net.params, before.params)


def test_quadratic_step_from_one():
    params = {"w": np.array([1.0])}
    SGD(0.1).step(params, {"w": 2 * params["w"]})  # d/dw w^2
    assert params["w"][0] == pytest.approx(0.8)


def test_momentum_accumulates_by_recurrence():
    params = {"w": np.array([0.0])}
    opt = SGD(0.1, momentum=0.9)
    g = np.array([1.0])
    opt.step(params, {"w": g})
    opt.step(params, {"w": g})
    # v1 = 1, v2 = 0.9 * 1 + 1 = 1.9; w = -0.1 * (1 + 1.9)
    assert opt.velocity["w"][0] == pytest.approx(1.9)
    assert params["w"][0] == pytest.approx(-0.29)


def test_non_finite_gradient_names_the_batch():
    params = {"w": np.zeros(3)}
    with pytest.raises(TrainingError, match="batch 17"):
        SGD(0.1).step(params, {"w": np.array([0.0, np.nan, 1.0])}, batch_index=17)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


# -- augmentation ----------------------------------------------------------


def test_strength_zero_is_identity():
    x = np.random.default_rng(0).standard_normal((4, 5))
    assert np.array_equal(augment(x, 0.0, np.random.default_rng(1)), x)


def test_augment_is_deterministic_for_a_seed():
    x = np.random.default_rng(0).standard_normal((4, 5))
    a = augment(x, 0.7, np.random.default_rng(9))
    b = augment(x, 0.7, np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_perturbation_scales_linearly_with_strength():
    x = np.random.default_rng(0).standard_normal((10_000, 4))

    def magnitude(strength, seed):
        return float(np.abs(augment(x, strength, np.random.default_rng(seed)) - x).mean())

    base = magnitude(0.2, 1)
    for k in (2, 3, 4):
        assert magnitude(0.2 * k, 1 + k) / base == pytest.approx(k, rel=0.03)


# -- evaluation and training -----------------------------------------------


def test_evaluate_reference_cases():
    y = np.repeat(np.arange(10), 1000)
    assert evaluate(lambda x: y, np.zeros((y.size, 1)), y) == 1.0
    assert evaluate(lambda x: np.zeros(len(x), int), np.zeros((y.size, 1)), y) == pytest.approx(0.1)
    rng = np.random.default_rng(5)
    acc = evaluate(lambda x: rng.integers(10, size=len(x)), np.zeros((y.size, 1)), y)
    assert abs(acc - 0.1) <= 0.01


def test_evaluate_rejects_empty_test_set():
    with pytest.raises(ValueError):
        evaluate(lambda x: x, np.zeros((0, 1)), np.zeros(0))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(0.1, 10))
def test_softmax_is_a_distribution(values, temperature):
    p = softmax(np.array([values]), temperature)
    assert np.all(p >= 0)
    assert p.sum() == pytest.approx(1.0)


def test_separable_two_class_problem_is_learned():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(-2, 0.5, (100, 2)), rng.normal(2, 0.5, (100, 2))])
    y = np.repeat([0, 1], 100)
    net = train_supervised(MlpNetwork([2, 8], 2, seed=0), x, y,
                           TrainConfig(learning_rate=0.05, epochs=50, augmentation_strength=0.0))
    assert evaluate(net, x, y) >= 0.99


def test_training_is_deterministic():
    ds = make_synthetic_dataset(n_classes=3, input_dim=4, train_per_class=20, test_per_class=5)
    x, y = ds.gather({c: tuple(range(20)) for c in range(3)})
    cfg = TrainConfig(epochs=2)
    a = train_supervised(MlpNetwork([4, 8], 3, seed=1), x, y, cfg)
    b = train_supervised(MlpNetwork([4, 8], 3, seed=1), x, y, cfg)
    assert params_equal(a.params, b.params)


# -- checkpoints and data --------------------------------------------------


def test_checkpoint_round_trip():
    net = MlpNetwork([5, 6, 4], 3, projection_dim=2, seed=8)
    clone = load_checkpoint(save_checkpoint(net))
    assert clone.layer_dims == net.layer_dims and clone.projection_dim == 2
    assert params_equal(net.params, clone.params)


def test_checkpoint_truncation_and_trailing_bytes_are_rejected():
    blob = save_checkpoint(MlpNetwork([3, 4], 2))
    for bad in (blob[:5], blob[:-1], blob + b"\0"):
        with pytest.raises(ValueError):
            load_checkpoint(bad)
    with pytest.raises(ValueError):
        load_checkpoint(b"NOTANET0" + blob[8:])


def test_synthetic_dataset_shapes_and_determinism():
    a = make_synthetic_dataset(n_classes=4, input_dim=3, train_per_class=7, test_per_class=2, seed=5)
    b = make_synthetic_dataset(n_classes=4, input_dim=3, train_per_class=7, test_per_class=2, seed=5)
    assert len(a.train_x) == 4 and a.train_x[0].shape == (7, 3)
    assert a.test_x.shape == (8, 3)
    assert np.array_equal(np.bincount(a.test_y), [2, 2, 2, 2])
    assert all(np.array_equal(p, q) for p, q in zip(a.train_x, b.train_x))


def test_gather_labels_follow_requested_ids():
    ds = make_synthetic_dataset(n_classes=3, input_dim=2, train_per_class=5, test_per_class=1)
    x, y = ds.gather({2: (0, 4), 0: (1,), 1: ()})
    assert list(y) == [2, 2, 0]
    assert np.array_equal(x[1], ds.train_x[2][4])


def test_dataset_from_features_splits_every_class():
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(3), [10, 12, 9])
    ds = dataset_from_features(rng.standard_normal((31, 4)), labels, test_fraction=0.2)
    assert set(ds.test_y) == {0, 1, 2}
    assert ds.samples_per_class == min(10 - 2, 12 - 2, 9 - 2)
    with pytest.raises(ValueError):
        dataset_from_features(np.zeros((3, 2)), np.array([0, 2, 2]))
