"""Tests for the autodiff engine."""

import numpy as np
import pytest

from fedreg import numerics as nx
from fedreg.errors import ConfigurationError, ContractViolation
from fedreg.numerics import Tensor


def _check(fn, inputs, **kwargs):
    result = nx.gradient_check(fn, inputs, **kwargs)
    assert result.passed, result.failures
    return result


class TestTensor:
    """Tests for Tensor basics."""

    def test_float64_storage(self):
        """Values are stored as float64 arrays."""
        t = Tensor([1, 2, 3])
        assert t.data.dtype == np.float64
        assert t.shape == (3,)
        assert t.size == 3

    def test_item_requires_scalar(self):
        """item() on a vector is a contract violation."""
        with pytest.raises(ContractViolation):
            Tensor([1.0, 2.0]).item()

    def test_constant_inputs_build_no_graph(self):
        """Operations on constants produce constants."""
        out = Tensor([1.0]) + Tensor([2.0])
        assert out.requires_grad is False
        assert out.parents == ()

    def test_operators_match_numpy(self):
        """Arithmetic operators compute the numpy result."""
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[0.5, -1.0], [2.0, 1.0]])
        np.testing.assert_array_equal((a + b).data, a.data + b)
        np.testing.assert_array_equal((a - b).data, a.data - b)
        np.testing.assert_array_equal((a * b).data, a.data * b)
        np.testing.assert_array_equal((a / b).data, a.data / b)
        np.testing.assert_array_equal((a @ b).data, a.data @ b)
        np.testing.assert_array_equal((-a).data, -a.data)
        np.testing.assert_array_equal(a.T.data, a.data.T)


class TestBackward:
    """Tests for reverse-mode propagation."""

    def test_squared_norm_gradient(self):
        """d/dx ||x||^2 = 2x."""
        x = Tensor([1.0, 2.0], requires_grad=True)
        grads = nx.backward(nx.squared_l2_norm(x))
        np.testing.assert_array_equal(grads[x.id], [2.0, 4.0])

    def test_non_scalar_root_rejected(self):
        """Backward needs a scalar root."""
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractViolation):
            nx.backward(x * 2.0)

    def test_shared_subexpression_accumulates(self):
        """A node used twice receives both adjoints."""
        x = Tensor(3.0, requires_grad=True)
        y = x * x + x
        assert nx.backward(y)[x.id] == pytest.approx(7.0)

    def test_linearity(self, rng):
        """Gradient of a sum of losses is the sum of their gradients."""
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 2)))
        loss_a = nx.sum(nx.exp(nx.matmul(x, w)))
        loss_b = nx.mean(nx.log_softmax(x))
        together = nx.grad(loss_a + loss_b, {"x": x})["x"]
        separate = nx.grad(loss_a, {"x": x})["x"] + nx.grad(loss_b, {"x": x})["x"]
        np.testing.assert_allclose(together, separate, rtol=0, atol=1e-12)

    def test_unused_leaf_gets_zero(self):
        """grad() returns zeros for leaves the root does not depend on."""
        x = Tensor([1.0], requires_grad=True)
        z = Tensor([5.0, 6.0], requires_grad=True)
        grads = nx.grad(nx.sum(x * 4.0), {"x": x, "z": z})
        np.testing.assert_array_equal(grads["z"], [0.0, 0.0])
        np.testing.assert_array_equal(grads["x"], [4.0])

    def test_constant_stops_gradient(self):
        """constant() detaches its input."""
        x = Tensor([2.0], requires_grad=True)
        y = nx.sum(x * nx.constant(x))
        assert nx.grad(y, {"x": x})["x"] == pytest.approx([2.0])

    def test_broadcast_gradient_is_reduced(self):
        """Gradients of broadcast operands are summed back to their shape."""
        x = Tensor(np.ones((3, 2)), requires_grad=True)
        b = Tensor(np.zeros(2), requires_grad=True)
        grads = nx.grad(nx.sum(x + b), {"x": x, "b": b})
        np.testing.assert_array_equal(grads["b"], [3.0, 3.0])

    def test_incompatible_broadcast_raises(self):
        """Shape mismatches name both shapes."""
        with pytest.raises(ConfigurationError, match=r"\(2,\).*\(3,\)"):
            Tensor([1.0, 2.0]) + Tensor([1.0, 2.0, 3.0])

    def test_deep_chain_does_not_recurse(self):
        """Long graphs are handled without recursion limits."""
        x = Tensor(1.0, requires_grad=True)
        y = x
        for _ in range(5000):
            y = y + 0.0
        assert nx.backward(y)[x.id] == pytest.approx(1.0)


class TestLogsumexp:
    """Tests for log-sum-exp with -inf handling."""

    def test_matches_direct_formula(self):
        """Finite inputs agree with log(sum(exp(.)))."""
        a = np.array([[0.1, 2.0, -1.0], [3.0, 3.0, 3.0]])
        np.testing.assert_allclose(nx.logsumexp(a, axis=1).data, np.log(np.exp(a).sum(axis=1)))

    def test_all_neg_inf_slice(self):
        """A slice of only -inf gives -inf and zero gradient."""
        x = Tensor([-np.inf, -np.inf], requires_grad=True)
        out = nx.logsumexp(x, axis=0)
        assert out.data == -np.inf
        np.testing.assert_array_equal(nx.backward(out)[x.id], [0.0, 0.0])

    def test_partial_neg_inf(self):
        """-inf entries contribute nothing and get zero gradient."""
        x = Tensor([-np.inf, 0.0], requires_grad=True)
        out = nx.logsumexp(x, axis=0)
        assert out.item() == pytest.approx(0.0)
        np.testing.assert_allclose(nx.backward(out)[x.id], [0.0, 1.0])


class TestGradientCheck:
    """Finite-difference checks of individual operations."""

    @pytest.mark.parametrize(
        "op",
        [
            lambda a, b: nx.sum(a * b),
            lambda a, b: nx.sum(a / (b * b + 1.0)),
            lambda a, b: nx.sum(nx.exp(a) - b),
            lambda a, b: nx.sum(nx.log(b * b + 1.0) * a),
            lambda a, b: nx.sum(nx.gelu(a) * b),
            lambda a, b: nx.sum(nx.softmax(a, axis=1) * b),
            lambda a, b: nx.sum(nx.log_softmax(a, axis=1) * b),
            lambda a, b: nx.sum(nx.logsumexp(a, axis=0) * b[0]),
            lambda a, b: nx.sum((a @ nx.transpose(b)) * 0.5),
            lambda a, b: nx.sum(nx.concat([a, b], axis=0) * 2.0),
            lambda a, b: nx.sum(nx.stack([a, b], axis=0)[1] * a),
            lambda a, b: nx.mean(nx.reshape(a, (6,)) * nx.reshape(b, (6,))),
            lambda a, b: nx.squared_l2_norm(a[(slice(None), np.array([0, 2, 2]))] - b[0]),
        ],
    )
    def test_elementwise_and_shape_ops(self, op, rng):
        """Autodiff matches central differences."""
        inputs = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(2, 3))}
        _check(lambda t: op(t["a"], t["b"]), inputs)

    def test_layer_norm(self, rng):
        """Layer norm gradients for input, gain and bias."""
        inputs = {"x": rng.normal(size=(3, 5)), "g": rng.normal(size=5), "b": rng.normal(size=5)}
        weights = rng.normal(size=(3, 5))
        _check(lambda t: nx.sum(nx.layer_norm(t["x"], t["g"], t["b"]) * weights), inputs)

    def test_wrt_subset_only_checks_named(self, rng):
        """Only the requested inputs are differentiated."""
        inputs = {"a": rng.normal(size=3), "b": rng.normal(size=3)}
        result = nx.gradient_check(lambda t: nx.sum(t["a"] * t["b"]), inputs, wrt=["a"])
        assert result.passed

    def test_detects_wrong_gradient(self):
        """A broken backward rule is reported."""

        def bad_square(t):
            x = t["x"]
            wrong = nx._make(x.data**2, "bad_square", (x,), lambda g: (g * 3.0 * x.data,))
            return nx.sum(wrong)

        result = nx.gradient_check(bad_square, {"x": np.array([1.0, 2.0])})
        assert not result.passed
        assert result.failures
