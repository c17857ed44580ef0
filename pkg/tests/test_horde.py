import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cirsim.harness import ExperimentConfig, run_job
from cirsim.nn_core import MlpNetwork, params_equal
from cirsim.strategies import build_strategy
from cirsim.strategies.horde import (
    SIGMA_FLOOR,
    ClassStats,
    FeatureExtractorEntry,
    UnifiedHead,
    adaptive_alpha,
    class_moments,
    horde_predict,
    pseudo_project,
    should_add_fe,
    train_fe,
    update_class_stats,
)
from oracles import should_add_fe_oracle
from support import FAST_TRAIN, SMALL_NET, easy_dataset, run_views, snapshot, view

# -- growth rule -------------------------------------------------------------


def test_first_experience_always_adds():
    assert should_add_fe([0, 1], set(), 0, 100, is_first=True)


def test_small_experience_is_skipped():
    assert not should_add_fe([0, 1, 2, 3], {9}, 1, 100, is_first=False)


def test_growth_stops_after_most_classes_are_seen():
    assert not should_add_fe(list(range(86, 96)), set(range(86)), 1, 100, is_first=False)


def test_ensemble_size_cap():
    assert not should_add_fe(list(range(10)), {50}, 3, 100, max_fes=3, is_first=False)


@settings(max_examples=300)
@given(
    st.integers(1, 200),
    st.data(),
    st.integers(0, 12),
    st.booleans(),
    st.integers(1, 12),
)
def test_growth_rule_matches_oracle(total, data, n_fes, is_first, max_fes):
    now = data.draw(st.integers(0, total))
    seen = data.draw(st.integers(0, total))
    got = should_add_fe(list(range(now)), set(range(seen)), n_fes, total, max_fes=max_fes, is_first=is_first)
    assert got == should_add_fe_oracle(now, seen, n_fes, total, is_first, max_fes=max_fes)


# -- loss balance ------------------------------------------------------------


def test_adaptive_alpha_is_metric_share():
    assert adaptive_alpha(2.0, 1.0) == pytest.approx(1 / 3)
    assert adaptive_alpha(0.0, 0.0) == 0.5


def _fe(ds, alpha_mode, seed=3):
    v = view(ds, 1, (0, 1, 2))
    x, y = v.x, v.y
    return train_fe(x, y, 0, [ds.input_dim, 16], 8, FAST_TRAIN, alpha_mode, seed=seed)


def test_alpha_zero_equals_cross_entropy_only_training():
    ds = easy_dataset()
    a = _fe(ds, "fixed:0")
    b = _fe(ds, "fixed:0.0")
    assert params_equal(a.net.params, b.net.params)
    assert set(a.alpha_history) == {0.0}


def test_alpha_one_trains_on_the_metric_loss_only():
    ds = easy_dataset()
    fe = _fe(ds, "fixed:1")
    assert set(fe.alpha_history) == {1.0}
    assert not params_equal(fe.net.params, _fe(ds, "fixed:0").net.params)


def test_adaptive_alpha_history_starts_at_half():
    fe = _fe(easy_dataset(), "adaptive")
    assert fe.alpha_history[0] == 0.5 and len(fe.alpha_history) == FAST_TRAIN.epochs
    assert all(0.0 <= a <= 1.0 for a in fe.alpha_history)


def test_unknown_alpha_mode_is_rejected():
    with pytest.raises(ValueError):
        _fe(easy_dataset(), "sometimes")


# -- class statistics ----------------------------------------------------------


def test_two_point_moments():
    mu, sigma = class_moments(np.array([[0.0, 0.0], [2.0, 2.0]]))
    assert np.allclose(mu, [1, 1]) and np.allclose(sigma, [np.sqrt(2), np.sqrt(2)])


def test_constant_features_floor_sigma():
    _, sigma = class_moments(np.ones((4, 3)))
    assert np.all(sigma == SIGMA_FLOOR)
    _, sigma = class_moments(np.ones((1, 3)))
    assert np.all(sigma == SIGMA_FLOOR)


class _Identity:
    feature_dim = 2

    def features(self, x):
        return np.asarray(x, dtype=float)


def test_absent_class_keeps_its_statistics_and_present_class_is_overwritten():
    stats = ClassStats(3)
    stats.add_extractor(2)
    update_class_stats(stats, [_Identity()], np.array([[0.0, 0.0], [2.0, 2.0], [5.0, 5.0]]), np.array([0, 0, 1]))
    kept = stats.mu[0][1].copy()
    update_class_stats(stats, [_Identity()], np.array([[4.0, 4.0], [6.0, 6.0]]), np.array([0, 0]))
    assert np.array_equal(stats.mu[0][1], kept)
    assert np.allclose(stats.mu[0][0], [5, 5])
    assert not stats.known[0][2]


# -- pseudo-feature projection ------------------------------------------------


def _stats_with(mu_sigma):
    stats = ClassStats(len(mu_sigma))
    stats.add_extractor(len(mu_sigma[0][0]))
    for c, (mu, sigma) in enumerate(mu_sigma):
        stats.set(c, 0, np.array(mu, float), np.array(sigma, float))
    return stats


def test_projection_hand_case():
    stats = _stats_with([((1, 2), (1, 2)), ((0, 0), (2, 1))])
    assert np.allclose(pseudo_project(np.array([2.0, 4.0]), 0, 1, stats, [2]), [2.0, 1.0])


def test_projection_from_standardized_class():
    stats = _stats_with([((0, 0), (1, 1)), ((3, -1), (2, 5))])
    a = np.array([0.5, -2.0])
    assert np.allclose(pseudo_project(a, 0, 1, stats, [2]), np.array([3, -1]) + a * np.array([2, 5]))


finite = st.floats(-100, 100, allow_nan=False)
positive = st.floats(0.01, 100)


@settings(max_examples=200)
@given(
    st.lists(st.tuples(finite, finite, positive, positive), min_size=4, max_size=4),
    st.tuples(finite, finite),
)
def test_projection_identity_and_round_trip(blocks, point):
    # two extractors of width 1, two classes
    stats = ClassStats(2)
    stats.add_extractor(1)
    stats.add_extractor(1)
    for e in range(2):
        mu_i, mu_j, sd_i, sd_j = blocks[2 * e]
        stats.set(0, e, np.array([mu_i]), np.array([sd_i]))
        stats.set(1, e, np.array([mu_j]), np.array([sd_j]))
    a = np.array(point)
    assert np.array_equal(pseudo_project(a, 0, 0, stats, [1, 1]), a)
    there = pseudo_project(a, 0, 1, stats, [1, 1])
    back = pseudo_project(there, 1, 0, stats, [1, 1])
    assert np.all(np.abs(back - a) <= 1e-9 * np.maximum(1.0, np.abs(a)))


@pytest.mark.parametrize("heuristic,expected", [("zeros", [0.0, 0.0]), ("original", [2.0, 4.0])])
def test_unknown_target_statistics(heuristic, expected):
    stats = ClassStats(2)
    stats.add_extractor(2)
    stats.set(0, 0, np.array([2.0, 4.0]), np.array([1.0, 1.0]))
    # a at the source mean: the projection lands on the estimated target mean
    got = pseudo_project(np.array([2.0, 4.0]), 0, 1, stats, [2], heuristic)
    assert np.allclose(got, expected)


def test_unknown_target_random_mean_uses_unit_sigma():
    stats = ClassStats(2)
    stats.add_extractor(2)
    stats.set(0, 0, np.zeros(2), np.ones(2))
    rng = np.random.default_rng(4)
    expected = np.random.default_rng(4).standard_normal(2)
    assert np.allclose(pseudo_project(np.zeros(2), 0, 1, stats, [2], "random", rng), expected)


# -- unified head and prediction ---------------------------------------------------


def test_head_grows_by_class_union():
    head = UnifiedHead()
    head.add_inputs(4)
    head.add_classes(range(10))
    head.W[...] = 1.0
    head.add_classes(range(5, 15))
    assert head.n_outputs == 15
    assert np.all(head.W[:, :10] == 1.0) and np.all(head.W[:, 10:] == 0.0)


def _frozen(seed, dims=(3, 4)):
    net = MlpNetwork(list(dims), 0, seed=seed)
    return FeatureExtractorEntry(seed, net, frozenset())


def test_identity_head_predicts_the_feature_argmax():
    fe = _frozen(1)
    head = UnifiedHead()
    head.add_inputs(4)
    head.add_classes([7, 8, 9, 10])
    head.W[...] = np.eye(4)
    x = np.random.default_rng(0).standard_normal((20, 3))
    feats = fe.features(x)
    assert np.array_equal(horde_predict([fe], head, x), np.array([7, 8, 9, 10])[feats.argmax(1)])


def test_block_permutation_leaves_predictions_unchanged():
    fes = [_frozen(1), _frozen(2, (3, 5))]
    rng = np.random.default_rng(0)
    head = UnifiedHead()
    head.add_inputs(4)
    head.add_inputs(5)
    head.add_classes(range(6))
    head.W[...] = rng.standard_normal(head.W.shape)
    head.b[...] = rng.standard_normal(6)
    swapped = UnifiedHead()
    swapped.add_inputs(5)
    swapped.add_inputs(4)
    swapped.add_classes(range(6))
    swapped.W[...] = np.vstack([head.W[4:], head.W[:4]])
    swapped.b[...] = head.b
    x = rng.standard_normal((30, 3))
    assert np.array_equal(horde_predict(fes, head, x), horde_predict(fes[::-1], swapped, x))


def test_untrained_head_refuses_to_predict():
    with pytest.raises(RuntimeError):
        horde_predict([_frozen(1)], UnifiedHead(), np.zeros((1, 3)))


# -- strategy ----------------------------------------------------------------------


def make(ds, **options):
    return build_strategy("horde", ds.n_classes, ds.input_dim, FAST_TRAIN, options, net_spec=SMALL_NET)


def test_frozen_extractors_never_change():
    ds = easy_dataset(n_classes=12)
    strat = make(ds, min_classes_for_fe=2)
    run_views(strat, ds, [(0, 1, 2)])
    before = snapshot(strat.fes[0].net.params)
    run_views(strat, ds, [(3, 4, 5), (0, 6, 7)])
    assert len(strat.fes) >= 2
    assert params_equal(before, strat.fes[0].net.params)


def test_strategy_follows_the_growth_rule():
    ds = easy_dataset(n_classes=12)
    strat = make(ds)
    run_views(strat, ds, [(0, 1), (2, 3, 4), tuple(range(5, 10)), (10, 11)])
    assert len(strat.fes) == 2  # first experience, then the five-class one
    assert strat.head.n_outputs == 12


def test_horde_learns_old_classes_from_statistics():
    ds = easy_dataset(n_classes=6, seed=1)
    strat = make(ds, min_classes_for_fe=2)
    run_views(strat, ds, [(0, 1, 2), (3, 4, 5)])
    assert np.mean(strat.predict(ds.test_x) == ds.test_y) > 0.8


def test_unknown_heuristic_is_rejected():
    with pytest.raises(ValueError):
        make(easy_dataset(), estimation_heuristic="guess")


@pytest.mark.slow
def test_original_feature_heuristic_is_not_worse(tmp_path):
    medians = {}
    for h in ("zeros", "random", "original"):
        cfg = ExperimentConfig(("horde",), ("S4",), tuple(range(5)),
                               strategy_options={"horde": {"estimation_heuristic": h}},
                               output_dir=str(tmp_path / h))
        medians[h] = statistics.median(run_job(cfg, "horde", "S4", s).final_accuracy for s in range(5))
    assert medians["original"] >= medians["zeros"]
    assert medians["original"] >= medians["random"]
