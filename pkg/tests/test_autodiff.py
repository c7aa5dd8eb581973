# tests/test_autodiff.py

"""
Gradient correctness of every primitive and of composed stacks, plus the tape's
bookkeeping rules (scalar losses, recorded losses, no_grad, finiteness).
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from agrg.core.autodiff import (
    Graph, Node, Tensor, add, bce_loss, bias_add, concat, cross_entropy, embedding, finite_diff_check, gelu,
    gradients, layer_norm, matmul, mul, no_grad, relu, reshape, sigmoid, softmax, softmax_rows, sub, swapaxes,
    tensor_mean, tensor_sum,
)
from agrg.core.encoder import EncoderConfig
from agrg.core.heads import HeadsConfig, MultiTaskModel, classify_per_label, project_per_label
from agrg.core.textgen import PSAttention
from agrg.errors import GraphError, LabelError, NumericalError, ShapeError

TOLERANCE = 1e-4


def leaf(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)



def away_from_zero(rng, *shape):
    magnitude = rng.uniform(0.2, 1.0, size=shape)
    return Tensor(magnitude * rng.choice([-1.0, 1.0], size=shape), requires_grad=True)

# ==============================================================================
# 1. PRIMITIVE GRADIENTS
# ==============================================================================

class TestPrimitiveGradients:

    def test_elementwise_with_broadcasting(self, rng):
        a, b = leaf(rng, 3, 4), leaf(rng, 4)
        w = rng.uniform(0.5, 1.5, size=(3, 4))
        for op in (add, sub, mul):
            loss_fn = lambda: tensor_sum(mul(op(a, b), Tensor(w)))
            assert finite_diff_check(loss_fn, a) < TOLERANCE
            assert finite_diff_check(loss_fn, b) < TOLERANCE

    def test_batched_matmul_and_bias(self, rng):
        a, b, bias = leaf(rng, 2, 3, 4), leaf(rng, 4, 5), leaf(rng, 5)
        w = rng.uniform(0.5, 1.5, size=(2, 3, 5))
        loss_fn = lambda: tensor_sum(mul(bias_add(matmul(a, b), bias), Tensor(w)))
        for target in (a, b, bias):
            assert finite_diff_check(loss_fn, target) < TOLERANCE

    @pytest.mark.parametrize("activation", [relu, gelu, sigmoid])
    def test_activations(self, rng, activation):
        x = away_from_zero(rng, 4, 3)
        w = rng.uniform(0.5, 1.5, size=(4, 3))
        assert finite_diff_check(lambda: tensor_sum(mul(activation(x), Tensor(w))), x) < TOLERANCE

    def test_layer_norm(self, rng):
        x, gamma, beta = leaf(rng, 3, 6), leaf(rng, 6, low=0.5, high=1.5), leaf(rng, 6)
        w = rng.uniform(0.5, 1.5, size=(3, 6))
        loss_fn = lambda: tensor_sum(mul(layer_norm(x, gamma, beta), Tensor(w)))
        for target in (x, gamma, beta):
            assert finite_diff_check(loss_fn, target) < TOLERANCE

    def test_masked_softmax(self, rng):
        x = leaf(rng, 4, 5)
        mask = np.tril(np.ones((4, 5), dtype=bool), k=1)
        w = rng.uniform(0.5, 1.5, size=(4, 5))
        assert finite_diff_check(lambda: tensor_sum(mul(softmax(x, mask=mask), Tensor(w))), x) < TOLERANCE

    def test_embedding_concat_slice_reshape(self, rng):
        table = leaf(rng, 6, 3)
        ids = np.array([[0, 2, 2], [5, 1, 0]])
        other = leaf(rng, 2, 3, 3)
        w = rng.uniform(0.5, 1.5, size=(3, 6, 2))

        def loss_fn():
            joined = concat([embedding(table, ids), other], axis=2)          # (2, 3, 6)
            moved = swapaxes(reshape(joined, (2, 3, 6)), 0, 1)                # (3, 2, 6)
            return tensor_sum(mul(moved.transpose(0, 2, 1), Tensor(w))) + tensor_mean(joined[:, 1:, :2])

        assert finite_diff_check(loss_fn, table) < TOLERANCE
        assert finite_diff_check(loss_fn, other) < TOLERANCE

    def test_cross_entropy_ignores_padding(self, rng):
        logits = leaf(rng, 5, 4)
        targets = np.array([0, 3, 2, 2, 1])
        assert finite_diff_check(lambda: cross_entropy(logits, targets, ignore_index=2), logits) < TOLERANCE
        with Graph() as graph:
            loss = cross_entropy(logits, targets, ignore_index=2)
        grads = gradients(graph, loss, accumulate=False)[logits]
        assert np.all(grads[2] == 0.0) and np.all(grads[3] == 0.0)

    @pytest.mark.parametrize("reduction", ["mean", "sum"])
    def test_bce(self, rng, reduction):
        y_hat = leaf(rng, 3, 4, low=0.1, high=0.9)
        y = rng.integers(0, 2, size=(3, 4))
        assert finite_diff_check(lambda: bce_loss(y_hat, y, reduction=reduction), y_hat) < TOLERANCE

# ==============================================================================
# 2. COMPOSED STACKS
# ==============================================================================

class TestComposedGradients:

    def test_pseudo_self_attention_block(self, rng):
        layer = PSAttention(4, 2, rng)
        e = leaf(rng, 2, 4)
        y = leaf(rng, 2, 3, 4)
        w = rng.uniform(0.5, 1.5, size=(2, 3, 4))
        loss_fn = lambda: tensor_sum(mul(layer(e, y), Tensor(w)))
        for target in [e, y] + layer.parameters():
            assert finite_diff_check(loss_fn, target) < TOLERANCE

    def test_bce_through_heads_and_encoder(self, rng):
        model = MultiTaskModel(EncoderConfig(patch=2, d_h=4, layers=1), HeadsConfig(d_i=3), 2, rng)
        volumes = rng.uniform(-1, 1, size=(2, 2, 4, 4))
        labels = np.array([[1, 0], [0, 1]])

        def loss_fn():
            h_list = project_per_label(model.encoder(volumes), model.projections)
            return classify_per_label(h_list, model.classifiers, labels)[1].total

        for param in model.parameters():
            assert finite_diff_check(loss_fn, param) < TOLERANCE

# ==============================================================================
# 3. TAPE RULES
# ==============================================================================

class TestGraph:

    def test_non_scalar_loss_is_rejected(self, rng):
        x = leaf(rng, 3)
        with Graph() as graph:
            y = mul(x, 2.0)
        with pytest.raises(GraphError):
            gradients(graph, y)

    def test_loss_outside_graph_is_rejected(self, rng):
        x = leaf(rng, 3)
        with Graph():
            loss = tensor_sum(x)
        with pytest.raises(GraphError):
            gradients(Graph(), loss)

    def test_cycle_is_detected(self, rng):
        graph = Graph()
        graph.nodes.append(Node(0, "add", (0,), Tensor(1.0), None))
        with pytest.raises(GraphError, match="cycle"):
            graph.validate()

    def test_no_grad_records_nothing(self, rng):
        x = leaf(rng, 3)
        with Graph() as graph:
            with no_grad():
                y = tensor_sum(mul(x, x))
        assert len(graph) == 0
        assert not y.requires_grad

    def test_gradients_accumulate_into_leaves(self, rng):
        x = leaf(rng, 3)
        for _ in range(2):
            with Graph() as graph:
                loss = tensor_sum(mul(x, 3.0))
            gradients(graph, loss)
        np.testing.assert_allclose(x.grad, np.full(3, 6.0))

    def test_shared_subexpression_sums_gradients(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        with Graph() as graph:
            loss = tensor_sum(add(mul(x, x), x))
        grads = gradients(graph, loss, accumulate=False)
        np.testing.assert_allclose(grads[x], [5.0])

    def test_nan_input_raises_numerical_error(self):
        with pytest.raises(NumericalError):
            add(Tensor([1.0, np.nan]), Tensor([1.0, 1.0]))

    def test_finite_diff_check_leaves_grad_untouched(self, rng):
        x = leaf(rng, 3)
        finite_diff_check(lambda: tensor_sum(mul(x, x)), x)
        assert x.grad is None

# ==============================================================================
# 4. SOFTMAX & BCE EDGE CASES
# ==============================================================================

class TestSoftmaxAndBCE:

    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
    @settings(max_examples=50, deadline=None)
    def test_softmax_rows_are_distributions(self, values):
        out = softmax_rows(Tensor(values)).data
        assert np.all(out >= 0.0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_masked_entries_are_exactly_zero(self, rng):
        mask = np.array([[True, False, True], [False, False, True]])
        out = softmax(Tensor(rng.normal(size=(2, 3))), mask=mask).data
        assert np.all(out[~mask] == 0.0)
        assert out[1, 2] == 1.0

    def test_fully_masked_row_raises(self):
        with pytest.raises(ShapeError):
            softmax(Tensor(np.zeros((2, 2))), mask=np.array([[True, False], [False, False]]))

    def test_empty_softmax_raises(self):
        with pytest.raises(ShapeError):
            softmax(Tensor(np.zeros((0, 3))))

    def test_softmax_rows_needs_matrix(self):
        with pytest.raises(ShapeError):
            softmax_rows(Tensor(np.zeros(3)))

    def test_bce_rejects_soft_labels(self):
        with pytest.raises(LabelError):
            bce_loss(Tensor([0.5]), [0.3])

    def test_bce_gradient_vanishes_outside_clamp(self):
        y_hat = Tensor(np.array([0.0, 1.0, 0.5]), requires_grad=True)
        with Graph() as graph:
            loss = bce_loss(y_hat, [1, 0, 1], reduction="sum")
        grads = gradients(graph, loss, accumulate=False)[y_hat]
        assert grads[0] == 0.0 and grads[1] == 0.0
        assert grads[2] == pytest.approx(-2.0)
        assert np.isfinite(loss.item())

    def test_bce_reductions_agree(self, rng):
        y_hat = Tensor(rng.uniform(0.1, 0.9, size=(2, 3)))
        y = rng.integers(0, 2, size=(2, 3))
        per_element = bce_loss(y_hat, y, reduction="none").data
        assert bce_loss(y_hat, y, reduction="sum").item() == pytest.approx(per_element.sum())
        assert bce_loss(y_hat, y, reduction="mean").item() == pytest.approx(per_element.mean())
