# tests/test_heads.py

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agrg.core.autodiff import Graph, gradients
from agrg.core.encoder import EncoderConfig
from agrg.core.heads import (
    FLAG_NO_NEGATIVES, FLAG_NO_POSITIVES, FLAG_OK, HeadsConfig, MultiTaskModel, calibrate_label,
    calibrate_thresholds, check_head_isolation, classify_per_label, f1_at, heads_epoch, multitask_scores,
    project_per_label, routed_backward, select_abnormal, threshold_candidates,
)
from agrg.core.optim import Adam
from agrg.errors import LabelError, SharedParameterError

ENCODER = EncoderConfig(patch=2, d_h=4, layers=1)


@pytest.fixture
def model(rng):
    return MultiTaskModel(ENCODER, HeadsConfig(d_i=3), 3, rng)


def _forward(model, volumes, labels):
    with Graph() as graph:
        h_list = project_per_label(model.encoder(volumes), model.projections)
        _, losses = classify_per_label(h_list, model.classifiers, labels)
    return graph, losses

# ==============================================================================
# 1. ROUTING
# ==============================================================================

class TestRouting:

    def test_each_head_receives_only_its_own_loss(self, model, rng):
        volumes = rng.uniform(-1, 1, size=(2, 4, 4, 4))
        labels = np.array([[1, 0, 1], [0, 1, 1]])
        graph, losses = _forward(model, volumes, labels)
        total = routed_backward(graph, losses, model, accumulate=False)

        for i, loss_i in enumerate(losses.per_label):
            own = gradients(graph, loss_i, accumulate=False)
            for _, param in model.head_parameters(i):
                np.testing.assert_allclose(total[param], own[param], rtol=1e-12, atol=1e-15)
            for j in range(model.k):
                if j != i:
                    assert all(param not in own for _, param in model.head_parameters(j))

    def test_trunk_receives_gradient_of_the_sum(self, model, rng):
        volumes = rng.uniform(-1, 1, size=(2, 4, 4, 4))
        labels = np.array([[1, 0, 0], [0, 1, 1]])
        graph, losses = _forward(model, volumes, labels)
        total = routed_backward(graph, losses, model, accumulate=False)
        summed = {}
        for loss_i in losses.per_label:
            for leaf, grad in gradients(graph, loss_i, accumulate=False).items():
                summed[leaf] = summed.get(leaf, 0.0) + grad
        for _, param in model.trunk_parameters():
            np.testing.assert_allclose(total[param], summed[param], rtol=1e-9, atol=1e-14)

    def test_total_is_sum_of_label_losses(self, model, rng):
        _, losses = _forward(model, rng.uniform(-1, 1, size=(3, 4, 4, 4)), np.eye(3, dtype=int))
        assert losses.total.item() == pytest.approx(losses.values().sum())

    def test_batch_losses_are_means_of_single_cases(self, model, rng):
        volumes = rng.uniform(-1, 1, size=(3, 4, 4, 4))
        labels = np.array([[1, 0, 1], [0, 1, 1], [0, 0, 0]])
        _, batched = _forward(model, volumes, labels)
        singles = [_forward(model, volumes[i:i + 1], labels[i:i + 1])[1] for i in range(3)]
        np.testing.assert_allclose(batched.total.item(), np.mean([single.total.item() for single in singles]),
                                   rtol=0, atol=1e-10)
        np.testing.assert_allclose(batched.values(), np.mean([single.values() for single in singles], axis=0),
                                   rtol=0, atol=1e-10)

    def test_shared_head_parameter_is_detected(self, model):
        model.projections[1] = model.projections[0]
        with pytest.raises(SharedParameterError):
            check_head_isolation(model)

    def test_label_count_must_match_heads(self, model, rng):
        with pytest.raises(LabelError):
            _forward(model, rng.uniform(-1, 1, size=(1, 4, 4, 4)), np.array([[1, 0]]))

    def test_fine_tuning_epoch(self, model, tiny_cases):
        trunk = Adam(model.trunk_parameters(), lr=1e-3)
        heads = Adam([item for i in range(model.k) for item in model.head_parameters(i)], lr=1e-2)
        loss = heads_epoch(tiny_cases, model, trunk, heads, batch_size=4, seed=0, epoch=0)
        assert np.isfinite(loss) and loss > 0
        assert trunk.state.t == heads.state.t == 2
        scores = multitask_scores(tiny_cases, model)
        assert scores.shape == (len(tiny_cases), model.k)

# ==============================================================================
# 2. THRESHOLD CALIBRATION
# ==============================================================================

def brute_force_best_f1(scores, labels):
    candidates = np.unique(np.concatenate([[0.0, 1.0], scores]))
    return max(f1_at(scores, labels, candidates))


class TestCalibration:

    def test_candidates_are_midpoints(self):
        np.testing.assert_allclose(threshold_candidates(np.array([0.2, 0.6, 0.6, 0.8])), [0.0, 0.4, 0.7, 1.0])

    def test_perfect_separation(self):
        tau, flag, f1 = calibrate_label(np.array([0.1, 0.2, 0.7, 0.9]), np.array([0, 0, 1, 1]))
        assert flag == FLAG_OK and f1 == 1.0
        assert tau == pytest.approx(0.45)

    def test_no_positives_pins_threshold_to_one(self):
        assert calibrate_label(np.array([0.3, 0.9]), np.array([0, 0])) == (1.0, FLAG_NO_POSITIVES, 0.0)

    def test_no_negatives_pins_threshold_to_zero(self):
        tau, flag, f1 = calibrate_label(np.array([0.3, 0.9]), np.array([1, 1]))
        assert (tau, flag, f1) == (0.0, FLAG_NO_NEGATIVES, 1.0)

    def test_ties_go_to_the_largest_threshold(self):
        # thresholds 0 (everything positive) and 0.75 (top score only) both reach F1 = 2/3
        scores = np.array([0.2, 0.5, 0.6, 0.9])
        labels = np.array([1, 0, 0, 1])
        np.testing.assert_allclose(f1_at(scores, labels, np.array([0.0, 0.75])), [2 / 3, 2 / 3])
        tau, _, f1 = calibrate_label(scores, labels)
        assert f1 == pytest.approx(2 / 3)
        assert tau == pytest.approx(0.75)

    @given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 1)), min_size=2, max_size=30))
    @settings(max_examples=100, deadline=None)
    def test_calibration_matches_brute_force(self, pairs):
        scores = np.array([s / 20 for s, _ in pairs])
        labels = np.array([y for _, y in pairs])
        tau, flag, f1 = calibrate_label(scores, labels)
        if flag == FLAG_OK:
            assert f1 == brute_force_best_f1(scores, labels)
            assert f1_at(scores, labels, np.array([tau]))[0] == f1

    def test_vector_flags(self):
        scores = np.array([[0.1, 0.2, 0.9], [0.8, 0.4, 0.7], [0.3, 0.6, 0.1]])
        labels = np.array([[0, 0, 1], [1, 0, 1], [0, 0, 1]])
        thresholds = calibrate_thresholds(scores, labels, names=["a", "b", "c"])
        assert thresholds.flags == [FLAG_OK, FLAG_NO_POSITIVES, FLAG_NO_NEGATIVES]
        np.testing.assert_allclose(thresholds.values, [0.55, 1.0, 0.0])
        assert len(thresholds) == 3

    def test_vector_rejects_bad_labels(self):
        with pytest.raises(LabelError):
            calibrate_thresholds(np.zeros((2, 2)), np.array([[0, 2], [1, 0]]))
        with pytest.raises(LabelError):
            calibrate_thresholds(np.zeros((2, 2)), np.zeros((2, 3)))

# ==============================================================================
# 3. SELECTION
# ==============================================================================

class TestSelection:

    def test_strict_inequality(self):
        assert select_abnormal([0.5, 0.51, 0.2], [0.5, 0.5, 0.1]) == [1, 2]

    def test_threshold_one_never_selects(self):
        assert select_abnormal([1.0, 0.99], [1.0, 1.0]) == []

    def test_training_mode_keeps_true_positives(self):
        assert select_abnormal([0.9, 0.9, 0.1], [0.5, 0.5, 0.5], mode="training", labels=[1, 0, 1]) == [0]

    def test_training_mode_needs_labels(self):
        with pytest.raises(LabelError):
            select_abnormal([0.9], [0.5], mode="training")

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            select_abnormal([0.9], [0.5], mode="sometimes")

    def test_length_mismatch(self):
        with pytest.raises(LabelError):
            select_abnormal([0.9, 0.1], [0.5])

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=8), st.floats(0, 1))
    def test_selection_is_monotone_in_threshold(self, scores, tau):
        low = set(select_abnormal(scores, [tau] * len(scores)))
        high = set(select_abnormal(scores, [min(1.0, tau + 0.1)] * len(scores)))
        assert high <= low
