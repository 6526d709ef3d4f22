"""
Tests for the tensor engine: ops, backward, gradient checks and Adam.
"""
import math

import numpy as np
import pytest

from src.engine import (
    Adam,
    AdamHyper,
    AdamState,
    BatchNormMode,
    BatchNormState,
    OpKind,
    Tensor,
    adam_step,
    apply,
    backward,
    batch_norm,
    causal_self_attention,
    cosine_lr,
    cosine_sim,
    grad_check,
    no_grad,
)
from src.exceptions import DegenerateBatchError, NotScalarError, ShapeError, UnknownOpError


def _weighted_sum(t: Tensor, weights: np.ndarray) -> Tensor:
    return apply(OpKind.SUM, [apply(OpKind.MUL, [t, Tensor(weights)])])


class TestApply:
    """Tests for forward op semantics."""

    def test_matmul_identity(self, rng):
        """Identity on the left returns the right operand."""
        a = rng.normal(size=(3, 2))
        out = apply(OpKind.MATMUL, [Tensor(np.eye(3)), Tensor(a)])
        np.testing.assert_array_equal(out.data, a)

    def test_matmul_hand_example(self):
        """[[1,2],[3,4]] @ [[5,6],[7,8]]."""
        out = apply("matmul", [Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]])])
        np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])

    def test_softmax_uniform(self):
        """Equal logits give equal probabilities."""
        out = apply(OpKind.SOFTMAX, [Tensor([[0.0, 0.0, 0.0]])])
        np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]])

    def test_shape_mismatch_names_op_and_shapes(self):
        """Mismatched matmul reports the op kind and both shapes."""
        with pytest.raises(ShapeError) as exc:
            apply(OpKind.MATMUL, [Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))])
        message = str(exc.value)
        assert "matmul" in message
        assert "(2, 3)" in message

    def test_unknown_op(self):
        """Unregistered op kinds are rejected."""
        with pytest.raises(UnknownOpError):
            apply("conv2d", [Tensor([1.0])])

    def test_zero_sized_tensor_rejected(self):
        """Every dimension must be positive."""
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)))

    def test_embedding_out_of_vocabulary(self):
        """Ids outside the table raise."""
        with pytest.raises(ShapeError):
            apply(OpKind.EMBEDDING, [Tensor(np.ones((4, 2)))], {"ids": np.array([0, 4])})

    def test_no_grad_records_nothing(self):
        """Ops under no_grad carry no backward record."""
        x = Tensor([1.0, 2.0], requires_grad=True)
        with no_grad():
            y = apply(OpKind.SCALE, [x], {"factor": 2.0})
        assert not y.requires_grad
        assert y.node is None


class TestBackward:
    """Tests for reverse-mode differentiation."""

    def test_sum_gives_ones(self, rng):
        """d sum(x) / dx is all ones."""
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        backward(apply(OpKind.SUM, [x]))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_constant_loss_writes_nothing(self):
        """A loss with no parents leaves grads untouched."""
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward(Tensor(3.0))
        assert x.grad is None

    def test_non_scalar_loss(self):
        """Backward needs a scalar seed."""
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(NotScalarError):
            backward(apply(OpKind.SCALE, [x], {"factor": 1.0}))

    def test_gradients_accumulate(self):
        """A tensor used twice receives both contributions."""
        x = Tensor([3.0], requires_grad=True)
        backward(apply(OpKind.SUM, [apply(OpKind.ADD, [x, x])]))
        np.testing.assert_array_equal(x.grad, [2.0])

    def test_mlp_matches_finite_differences(self, rng):
        """mean(gelu(W x)) agrees with central differences."""
        w = Tensor(rng.normal(size=(4, 3)))
        x = Tensor(rng.normal(size=(3, 1)))

        def f(params):
            return apply(OpKind.MEAN, [apply(OpKind.GELU, [apply(OpKind.MATMUL, params)])])

        assert grad_check(f, [w, x]) < 1e-4


class TestGradCheckPerOp:
    """Finite-difference check of every registered op kind."""

    @pytest.fixture
    def weights(self, rng):
        return lambda shape: rng.uniform(0.5, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)

    def test_matmul(self, rng, weights):
        a, b = Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(4, 2)))
        w = weights((2, 3, 2))
        assert grad_check(lambda p: _weighted_sum(apply(OpKind.MATMUL, p), w), [a, b]) < 1e-4

    def test_add_sub_mul_broadcast(self, rng, weights):
        a, b = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4,)))
        w = weights((3, 4))
        for kind in (OpKind.ADD, OpKind.SUB, OpKind.MUL):
            assert grad_check(lambda p: _weighted_sum(apply(kind, p), w), [a, b]) < 1e-4

    def test_scale(self, rng, weights):
        a = Tensor(rng.normal(size=(3, 2)))
        w = weights((3, 2))
        f = lambda p: _weighted_sum(apply(OpKind.SCALE, p, {"factor": -2.5}), w)  # noqa: E731
        assert grad_check(f, [a]) < 1e-4

    def test_mean_and_sum_over_axis(self, rng, weights):
        a = Tensor(rng.normal(size=(3, 4, 2)))
        w = weights((3, 2))
        for kind in (OpKind.MEAN, OpKind.SUM):
            f = lambda p: _weighted_sum(apply(kind, p, {"axis": 1}), w)  # noqa: E731
            assert grad_check(f, [a]) < 1e-4

    def test_transpose_and_reshape(self, rng, weights):
        a = Tensor(rng.normal(size=(2, 3, 4)))
        w_t = weights((4, 2, 3))
        w_r = weights((6, 4))
        t = lambda p: _weighted_sum(apply(OpKind.TRANSPOSE, p, {"axes": (2, 0, 1)}), w_t)  # noqa: E731
        r = lambda p: _weighted_sum(apply(OpKind.RESHAPE, p, {"shape": (6, -1)}), w_r)  # noqa: E731
        assert grad_check(t, [a]) < 1e-4
        assert grad_check(r, [a]) < 1e-4

    def test_concat_and_slice(self, rng, weights):
        a, b = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 2)))
        w_c = weights((2, 5))
        w_s = weights((2, 2))
        c = lambda p: _weighted_sum(apply(OpKind.CONCAT, p, {"axis": 1}), w_c)  # noqa: E731
        s = lambda p: _weighted_sum(  # noqa: E731
            apply(OpKind.SLICE, p[:1], {"axis": 1, "start": 1, "stop": 3}), w_s
        )
        assert grad_check(c, [a, b]) < 1e-4
        assert grad_check(s, [a]) < 1e-4

    def test_softmax_and_l2_normalize(self, rng, weights):
        a = Tensor(rng.normal(size=(3, 5)))
        w = weights((3, 5))
        for kind in (OpKind.SOFTMAX, OpKind.L2_NORMALIZE):
            assert grad_check(lambda p: _weighted_sum(apply(kind, p), w), [a]) < 1e-4

    def test_layer_norm(self, rng, weights):
        x = Tensor(rng.normal(size=(3, 6)))
        gamma, beta = Tensor(rng.normal(size=6)), Tensor(rng.normal(size=6))
        w = weights((3, 6))
        assert grad_check(lambda p: _weighted_sum(apply(OpKind.LAYER_NORM, p), w), [x, gamma, beta]) < 1e-4

    def test_activations(self, rng, weights):
        # Keep relu inputs away from its kink.
        values = rng.uniform(0.2, 2.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
        a = Tensor(values)
        w = weights((3, 4))
        for kind in (OpKind.GELU, OpKind.RELU):
            assert grad_check(lambda p: _weighted_sum(apply(kind, p), w), [a]) < 1e-4

    def test_embedding_lookup(self, rng, weights):
        table = Tensor(rng.normal(size=(5, 3)))
        ids = np.array([[0, 2], [2, 4]])
        w = weights((2, 2, 3))
        f = lambda p: _weighted_sum(apply(OpKind.EMBEDDING, p, {"ids": ids}), w)  # noqa: E731
        assert grad_check(f, [table]) < 1e-4

    def test_l1_loss(self, rng):
        pred = Tensor(rng.normal(size=(2, 3)))
        target = Tensor(pred.data + rng.uniform(0.1, 1.0, size=(2, 3)) * rng.choice([-1.0, 1.0], size=(2, 3)))
        assert grad_check(lambda p: apply(OpKind.L1_LOSS, p), [pred, target]) < 1e-4


class TestGradCheck:
    """Tests for the finite-difference oracle itself."""

    def test_square(self):
        """x^2 at 3: analytic 6 matches central difference."""
        x = Tensor(3.0)
        assert grad_check(lambda p: apply(OpKind.MUL, [p[0], p[0]]), [x]) < 1e-8

    def test_constant(self):
        """Both gradients are zero for a constant objective."""
        x = Tensor([1.0, 2.0])
        assert grad_check(lambda p: Tensor(4.0), [x]) == 0.0

    def test_non_scalar_objective(self):
        """Objectives must return a scalar tensor."""
        x = Tensor([1.0, 2.0])
        with pytest.raises(NotScalarError):
            grad_check(lambda p: apply(OpKind.SCALE, p, {"factor": 2.0}), [x])


class TestAdam:
    """Tests for the Adam optimizer."""

    def test_first_step(self):
        """Bias correction makes the first step equal to lr."""
        x = Tensor([1.0], requires_grad=True)
        state = AdamState.create([x], AdamHyper(lr=0.1))
        adam_step([x], [np.array([2.0])], state)
        assert x.data[0] == pytest.approx(0.9, abs=1e-7)
        assert state.step_count == 1

    def test_zero_gradient_leaves_params(self, rng):
        """Zero gradients on fresh state change nothing."""
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        before = x.data.copy()
        adam_step([x], [np.zeros(3)], AdamState.create([x]))
        np.testing.assert_array_equal(x.data, before)

    def test_square_decreases(self):
        """Two steps on x^2 from 1 decrease the objective monotonically."""
        x = Tensor([1.0], requires_grad=True)
        optimizer = Adam([x], lr=0.1)
        values = [float(x.data[0] ** 2)]
        for _ in range(2):
            optimizer.zero_grad()
            backward(apply(OpKind.SUM, [apply(OpKind.MUL, [x, x])]))
            optimizer.step()
            values.append(float(x.data[0] ** 2))
        assert values[0] > values[1] > values[2]

    def test_shape_mismatch(self):
        """Gradient shapes must match their parameters."""
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            adam_step([x], [np.zeros(3)], AdamState.create([x]))

    def test_cosine_lr(self):
        """Cosine schedule runs from the base rate to zero."""
        assert cosine_lr(1e-3, 0, 100) == pytest.approx(1e-3)
        assert cosine_lr(1e-3, 50, 100) == pytest.approx(5e-4)
        assert cosine_lr(1e-3, 100, 100) == pytest.approx(0.0, abs=1e-15)


class TestBatchNorm:
    """Tests for batch normalisation."""

    def test_symmetric_pair(self):
        """[[1], [-1]] is already normalised."""
        out = batch_norm(Tensor([[1.0], [-1.0]]), BatchNormState.create(1))
        np.testing.assert_allclose(out.data, [[1.0], [-1.0]], atol=1e-6)

    def test_constant_column(self):
        """Zero variance is epsilon guarded and maps to zero."""
        out = batch_norm(Tensor([[5.0], [5.0], [5.0]]), BatchNormState.create(1))
        np.testing.assert_allclose(out.data, np.zeros((3, 1)), atol=1e-6)

    def test_random_batch_statistics(self, rng):
        """Each feature comes out zero-mean and unit-variance."""
        out = batch_norm(Tensor(rng.normal(2.0, 3.0, size=(8, 4))), BatchNormState.create(4))
        assert np.all(np.abs(out.data.mean(axis=0)) < 1e-6)
        assert np.all(np.abs(out.data.var(axis=0) - 1.0) < 1e-4)

    def test_single_sample_training(self):
        """Batch statistics over one sample are degenerate."""
        with pytest.raises(DegenerateBatchError):
            batch_norm(Tensor([[1.0, 2.0]]), BatchNormState.create(2))

    def test_frozen_uses_running_statistics(self):
        """Frozen mode accepts a single sample and uses running stats."""
        state = BatchNormState.create(2)
        state.running_mean = np.array([1.0, -1.0])
        state.running_var = np.array([4.0, 1.0])
        state.mode = BatchNormMode.FROZEN
        out = batch_norm(Tensor([[3.0, -1.0]]), state)
        np.testing.assert_allclose(out.data, [[1.0, 0.0]], atol=1e-6)

    def test_running_statistics_update(self, rng):
        """Training mode moves the running mean toward the batch mean."""
        state = BatchNormState.create(3, momentum=0.5)
        x = rng.normal(4.0, 1.0, size=(6, 3))
        batch_norm(Tensor(x), state)
        np.testing.assert_allclose(state.running_mean, 0.5 * x.mean(axis=0))


class TestCosineSim:
    """Tests for cosine similarity."""

    def test_examples(self):
        """Identity, orthogonality and the 45 degree case."""
        v = Tensor([3.0, -4.0])
        assert cosine_sim(v, v).item() == pytest.approx(1.0)
        assert cosine_sim(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == pytest.approx(0.0)
        assert cosine_sim(Tensor([1.0, 0.0]), Tensor([1.0, 1.0])).item() == pytest.approx(0.70710678)

    def test_scale_invariance(self, rng):
        """Rescaling one side leaves the similarity unchanged."""
        a, b = rng.normal(size=5), rng.normal(size=5)
        reference = cosine_sim(Tensor(a), Tensor(b)).item()
        for c in (0.5, 2.0, 10.0):
            assert abs(cosine_sim(Tensor(c * a), Tensor(b)).item() - reference) < 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            cosine_sim(Tensor([1.0, 0.0]), Tensor([1.0, 0.0, 0.0]))


class TestCausalSelfAttention:
    """Tests for masked multi-head attention."""

    @pytest.fixture
    def attention_weights(self, rng):
        return {name: Tensor(rng.normal(size=(4, 4))) for name in ("wq", "wk", "wv", "wo")}

    def test_single_token(self, rng, attention_weights):
        """One key means the output is x Wv Wo."""
        x = rng.normal(size=(1, 4))
        out = causal_self_attention(Tensor(x), attention_weights, n_heads=2)
        expected = x @ attention_weights["wv"].data @ attention_weights["wo"].data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_causality(self, rng, attention_weights):
        """Changing the last token leaves earlier outputs bitwise identical."""
        x = rng.normal(size=(5, 4))
        before = causal_self_attention(Tensor(x), attention_weights, n_heads=2).data
        x[-1] += rng.normal(size=4)
        after = causal_self_attention(Tensor(x), attention_weights, n_heads=2).data
        assert before[:-1].tobytes() == after[:-1].tobytes()
        assert not np.array_equal(before[-1], after[-1])

    def test_two_tokens_identity_weights(self):
        """Position 1 mixes both value rows with softmax weights."""
        eye = {name: Tensor(np.eye(2)) for name in ("wq", "wk", "wv", "wo")}
        x = np.array([[1.0, 0.0], [0.0, 1.0]])
        out = causal_self_attention(Tensor(x), eye, n_heads=1).data
        s = 1.0 / math.sqrt(2.0)
        w0, w1 = 1.0 / (1.0 + math.exp(s)), math.exp(s) / (1.0 + math.exp(s))
        np.testing.assert_allclose(out[0], [1.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(out[1], [w0, w1], atol=1e-12)

    def test_heads_must_divide_width(self, attention_weights):
        with pytest.raises(ShapeError):
            causal_self_attention(Tensor(np.ones((2, 4))), attention_weights, n_heads=3)

    def test_batched_input(self, rng, attention_weights):
        """Batched rows equal separate unbatched calls."""
        x = rng.normal(size=(2, 3, 4))
        batched = causal_self_attention(Tensor(x), attention_weights, n_heads=2).data
        single = causal_self_attention(Tensor(x[1]), attention_weights, n_heads=2).data
        np.testing.assert_allclose(batched[1], single, atol=1e-12)
