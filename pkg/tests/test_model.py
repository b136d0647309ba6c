"""Tests for the transformer-encoder CTC model."""

import numpy as np
import pytest

from fedreg import numerics as nx
from fedreg.errors import ConfigurationError, DataError
from fedreg.model import (
    ModelConfig,
    ModelParams,
    forward,
    init_params,
    load_checkpoint,
    parameter_count,
    parameter_shapes,
    resume_from_tap,
    save_checkpoint,
)


class TestModelConfig:
    """Tests for ModelConfig validation."""

    def test_defaults(self):
        """Default encoder shape."""
        config = ModelConfig()
        assert config.n_blocks == 4
        assert config.d_model == 32
        assert config.tap_positions == (1, 2, 3, 4)
        assert config.head_dim == 16

    def test_heads_must_divide_width(self):
        """d_model must split evenly across heads."""
        with pytest.raises(ConfigurationError, match="divisible"):
            ModelConfig(d_model=10, n_heads=3)

    def test_taps_are_normalized(self):
        """Taps are deduplicated and sorted."""
        assert ModelConfig(n_blocks=3, tap_positions=(3, 1, 3)).tap_positions == (1, 3)

    def test_tap_out_of_range(self):
        """Taps outside 1..n_blocks are rejected."""
        with pytest.raises(ConfigurationError, match="outside"):
            ModelConfig(n_blocks=2, tap_positions=(3,))


class TestParameters:
    """Tests for parameter layout and initialisation."""

    def test_count_is_pure_function_of_shape(self):
        """Two blocks of width 8 over 5 symbols and 6 features hold 1301 parameters."""
        config = ModelConfig(n_blocks=2, d_model=8, n_heads=2, d_ff=16, vocab_size=5, input_dim=6,
                             tap_positions=(1, 2))
        assert parameter_count(config) == 1301
        assert init_params(config, 0).size == 1301

    def test_canonical_order(self, tiny_model):
        """Frontend first, blocks in order, head last."""
        names = [name for name, _ in parameter_shapes(tiny_model)]
        assert names[:2] == ["frontend.weight", "frontend.bias"]
        assert names[-2:] == ["head.weight", "head.bias"]
        assert names.index("blocks.1.ln2.bias") < names.index("blocks.2.attn.q.weight")

    def test_init_is_seeded(self, tiny_model):
        """Same seed, same parameters; different seed, different parameters."""
        a, b, c = init_params(tiny_model, 1), init_params(tiny_model, 1), init_params(tiny_model, 2)
        assert np.array_equal(a.flatten(), b.flatten())
        assert not np.array_equal(a.flatten(), c.flatten())

    def test_init_values(self, tiny_params):
        """Gains start at one, biases at zero."""
        assert np.all(tiny_params["blocks.1.ln1.gain"] == 1.0)
        assert np.all(tiny_params["blocks.2.ffn.b1"] == 0.0)
        assert tiny_params["frontend.weight"].std() < 0.1

    def test_flatten_unflatten(self, tiny_params):
        """unflatten inverts flatten exactly."""
        restored = ModelParams.unflatten(tiny_params.config, tiny_params.flatten())
        assert np.array_equal(restored.flatten(), tiny_params.flatten())

    def test_unflatten_wrong_length(self, tiny_model):
        """A flat vector of the wrong length is rejected."""
        with pytest.raises(ConfigurationError, match="parameter count"):
            ModelParams.unflatten(tiny_model, np.zeros(3))

    def test_sgd_step(self, tiny_params):
        """sgd_step subtracts lr times the gradient."""
        grads = {name: np.ones_like(value) for name, value in tiny_params.items()}
        stepped = tiny_params.sgd_step(grads, 0.5)
        np.testing.assert_array_equal(stepped.flatten(), tiny_params.flatten() - 0.5)


class TestForward:
    """Tests for the forward pass."""

    def test_output_shapes(self, tiny_params, rng):
        """Logits have one row per frame and one column per symbol."""
        trace = forward(tiny_params, rng.normal(size=(7, 4)), taps=(1, 2))
        assert trace.logits.shape == (7, 6)
        assert trace.n_frames == 7
        assert set(trace.embeddings) == {1, 2}
        assert trace.embeddings[1].shape == (7, 8)

    def test_log_probs_normalized(self, tiny_params, rng):
        """Each frame's probabilities sum to one."""
        trace = forward(tiny_params, rng.normal(size=(5, 4)))
        np.testing.assert_allclose(np.exp(trace.log_probs.data).sum(axis=1), 1.0)

    def test_empty_input(self, tiny_params):
        """Zero frames is a data error."""
        with pytest.raises(DataError):
            forward(tiny_params, np.zeros((0, 4)))

    def test_wrong_feature_width(self, tiny_params):
        """Feature width must match input_dim."""
        with pytest.raises(ConfigurationError, match="input_dim"):
            forward(tiny_params, np.zeros((3, 5)))

    def test_leaves_need_config(self, tiny_params, rng):
        """Raw graph leaves require an explicit config."""
        with pytest.raises(ConfigurationError):
            forward(tiny_params.as_leaves(), rng.normal(size=(3, 4)))

    def test_leaves_and_values_agree(self, tiny_params, rng):
        """Forward on graph leaves equals forward on values."""
        x = rng.normal(size=(4, 4))
        a = forward(tiny_params, x).logits.data
        b = forward(tiny_params.as_leaves(), x, config=tiny_params.config).logits.data
        np.testing.assert_array_equal(a, b)

    def test_single_frame(self, tiny_params, rng):
        """One frame is a valid input."""
        assert forward(tiny_params, rng.normal(size=(1, 4))).logits.shape == (1, 6)


class TestResumeFromTap:
    """Tests for continuing a forward pass from a tapped embedding."""

    @pytest.mark.parametrize("tap", [1, 2])
    def test_bitwise_consistency(self, tiny_params, rng, tap):
        """Resuming from a tap reproduces the full-pass logits exactly."""
        trace = forward(tiny_params, rng.normal(size=(6, 4)), taps=(tap,))
        resumed = resume_from_tap(tiny_params, trace.embeddings[tap], tap)
        assert np.array_equal(resumed.data, trace.logits.data)

    @pytest.mark.parametrize("seed", range(50))
    def test_consistency_over_seeds(self, tiny_model, seed):
        """Holds at every tap for random parameters and inputs."""
        params = init_params(tiny_model, seed)
        x = np.random.default_rng(seed).normal(size=(5, tiny_model.input_dim))
        trace = forward(params, x, taps=tiny_model.tap_positions)
        for tap in tiny_model.tap_positions:
            resumed = resume_from_tap(params, trace.embeddings[tap], tap)
            assert np.array_equal(resumed.data, trace.logits.data)

    def test_repeated_forward_is_bitwise_identical(self, tiny_params, rng):
        """No hidden state between passes."""
        x = rng.normal(size=(4, 4))
        assert np.array_equal(forward(tiny_params, x).logits.data, forward(tiny_params, x).logits.data)

    def test_utterances_are_independent(self, tiny_params, rng):
        """Processing order does not change an utterance's output."""
        a, b = rng.normal(size=(4, 4)), rng.normal(size=(6, 4))
        first = forward(tiny_params, a).logits.data
        forward(tiny_params, b)
        assert np.array_equal(forward(tiny_params, a).logits.data, first)

    def test_last_block_is_head_only(self, tiny_params, rng):
        """Resuming from the last block applies only the head."""
        h = rng.normal(size=(3, 8))
        out = resume_from_tap(tiny_params, h, 2)
        expected = h @ tiny_params["head.weight"] + tiny_params["head.bias"]
        np.testing.assert_allclose(out.data, expected)

    def test_wrong_width(self, tiny_params):
        """Embedding width must be d_model."""
        with pytest.raises(ConfigurationError, match="d_model"):
            resume_from_tap(tiny_params, np.zeros((3, 5)), 1)

    def test_frozen_params_get_no_gradient(self, tiny_params, rng):
        """Gradient flows to the embedding, not to frozen parameters."""
        h = nx.Tensor(rng.normal(size=(3, 8)), requires_grad=True)
        out = nx.sum(resume_from_tap(tiny_params, h, 1))
        grads = nx.backward(out)
        assert h.id in grads
        assert np.any(grads[h.id] != 0)


class TestCheckpoint:
    """Tests for the FRSM checkpoint format."""

    def test_round_trip_exact(self, tiny_params, tmp_path):
        """Loading restores config and every value bit for bit."""
        path = tmp_path / "model.frsm"
        save_checkpoint(tiny_params, path)
        loaded = load_checkpoint(path)
        assert loaded.config == tiny_params.config
        assert np.array_equal(loaded.flatten(), tiny_params.flatten())

    def test_magic_header(self, tiny_params, tmp_path):
        """Files start with the FRSM magic."""
        path = tmp_path / "model.frsm"
        save_checkpoint(tiny_params, path)
        assert path.read_bytes()[:4] == b"FRSM"

    def test_rejects_foreign_file(self, tmp_path):
        """Non-checkpoint files are data errors."""
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(DataError, match="FRSM"):
            load_checkpoint(path)
