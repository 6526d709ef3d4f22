"""
Tests for the VLA model: tokens, forward pass, losses and checkpoints.
"""
import numpy as np
import pytest

from src.config import ModelConfig
from src.engine import Tensor, backward
from src.exceptions import BadMagicError, NonFiniteError, ShapeError, UnexpectedEOFError
from src.model.checkpoint import load_checkpoint, save_checkpoint
from src.model.params import VLAParams, init_params
from src.model.vla import (
    Segment,
    action_chunk,
    action_loss,
    assemble,
    forward,
    patchify,
    predict_action,
    predict_actions,
)


@pytest.fixture
def params(tiny_model_config):
    return init_params(tiny_model_config, seed=0)


@pytest.fixture
def inputs(tiny_model_config, rng):
    views = [rng.uniform(size=(16, 16, 3)) for _ in range(tiny_model_config.n_views)]
    return views, [1, 2, 5, 3]


class TestPatchify:
    """Tests for patch extraction."""

    def test_default_config_shape(self):
        """Two 32x32 views give 32 rows of 192 pixels."""
        config = ModelConfig()
        views = [np.full((32, 32, 3), 0.5) for _ in range(2)]
        patches = patchify(views, config)
        assert patches.shape == (32, 192)
        assert np.all(patches == 0.5)

    def test_single_lit_pixel(self, tiny_model_config):
        """A pixel at (0, 0) of view 0 lands only in row 0."""
        views = [np.zeros((16, 16, 3)) for _ in range(2)]
        views[0][0, 0, 1] = 1.0
        patches = patchify(views, tiny_model_config)
        assert np.flatnonzero(patches.any(axis=1)).tolist() == [0]
        assert patches[0, 1] == 1.0

    def test_raster_then_view_order(self, tiny_model_config):
        """Row index is view * patches_per_view + grid_row * grid_cols + grid_col."""
        views = [np.zeros((16, 16, 3)) for _ in range(2)]
        views[1][8, 0, 0] = 1.0
        patches = patchify(views, tiny_model_config)
        assert np.flatnonzero(patches.any(axis=1)).tolist() == [4 + 2]

    def test_wrong_image_size(self, tiny_model_config):
        with pytest.raises(ShapeError):
            patchify([np.zeros((32, 32, 3))] * 2, tiny_model_config)

    def test_wrong_view_count(self, tiny_model_config):
        with pytest.raises(ShapeError):
            patchify([np.zeros((16, 16, 3))], tiny_model_config)


class TestAssemble:
    """Tests for token assembly."""

    def test_default_length(self):
        """N + M + K = 40 for the default architecture."""
        config = ModelConfig()
        params = init_params(config, seed=0)
        tokens = assemble(np.zeros((32, 192)), [1, 2, 4, 3], params)
        assert tokens.embeddings.shape == (1, 40, 64)
        assert tokens.span(Segment.VISION) == (0, 32)
        assert tokens.span(Segment.LANGUAGE) == (32, 36)
        assert tokens.span(Segment.ACTION) == (36, 40)

    def test_swapping_ids_changes_only_language_rows(self, params, tiny_model_config, inputs):
        views, ids = inputs
        patches = patchify(views, tiny_model_config)
        a = assemble(patches, ids, params).embeddings.data
        b = assemble(patches, [ids[1], ids[0]] + ids[2:], params).embeddings.data
        changed = np.flatnonzero(np.any(a != b, axis=-1)[0]).tolist()
        n = tiny_model_config.n_visual_tokens
        assert changed == [n, n + 1]

    def test_zero_inputs_leave_positions(self, tiny_model_config):
        """Zero patches and zero projection: visual rows equal position embeddings."""
        params = init_params(tiny_model_config, seed=0)
        params["patch_proj.w"].data[:] = 0.0
        tokens = assemble(np.zeros((8, 192)), [0, 0, 0, 0], params)
        n = tiny_model_config.n_visual_tokens
        np.testing.assert_array_equal(tokens.embeddings.data[0, :n], params["pos_embed"].data[:n])

    def test_id_outside_vocabulary(self, params, tiny_model_config, inputs):
        views, _ = inputs
        with pytest.raises(ShapeError):
            assemble(patchify(views, tiny_model_config), [1, 2, 16, 3], params)

    def test_wrong_instruction_length(self, params, tiny_model_config, inputs):
        views, _ = inputs
        with pytest.raises(ShapeError):
            assemble(patchify(views, tiny_model_config), [1, 2, 3], params)


class TestForward:
    """Tests for the causal transformer."""

    def test_output_shapes(self, params, tiny_model_config, inputs):
        views, ids = inputs
        out = forward(params, assemble(patchify(views, tiny_model_config), ids, params))
        assert out.actions_pred.shape == (4, 4)
        assert len(out.taps) == tiny_model_config.n_layers + 1
        assert all(tap.shape == (tiny_model_config.seq_len, 16) for tap in out.taps)

    def test_action_query_causality(self, params, tiny_model_config, inputs):
        """Perturbing query q2 leaves predictions of q0 and q1 bitwise identical."""
        views, ids = inputs
        patches = patchify(views, tiny_model_config)
        before = forward(params, assemble(patches, ids, params)).actions_pred.data.copy()
        params["action_queries"].data[2] += 1.0
        after = forward(params, assemble(patches, ids, params)).actions_pred.data
        assert before[:2].tobytes() == after[:2].tobytes()
        assert not np.array_equal(before[2], after[2])

    def test_language_never_reaches_vision(self, params, tiny_model_config, inputs):
        """Changing the instruction leaves every visual tap unchanged at every layer."""
        views, ids = inputs
        patches = patchify(views, tiny_model_config)
        n = tiny_model_config.n_visual_tokens
        a = forward(params, assemble(patches, ids, params)).taps
        b = forward(params, assemble(patches, [7, 7, 7, 7], params)).taps
        for tap_a, tap_b in zip(a, b):
            assert tap_a.data[:n].tobytes() == tap_b.data[:n].tobytes()

    def test_deterministic(self, tiny_model_config, inputs):
        views, ids = inputs
        outputs = []
        for _ in range(2):
            params = init_params(tiny_model_config, seed=3)
            outputs.append(forward(params, assemble(patchify(views, tiny_model_config), ids, params)))
        assert outputs[0].actions_pred.data.tobytes() == outputs[1].actions_pred.data.tobytes()

    def test_batched_matches_single(self, params, tiny_model_config, inputs, rng):
        views, ids = inputs
        other = [rng.uniform(size=(16, 16, 3)) for _ in range(2)]
        single = forward(params, assemble(patchify(views, tiny_model_config), ids, params))
        batch = np.stack([patchify(views, tiny_model_config), patchify(other, tiny_model_config)])
        batched = forward(params, assemble(batch, [ids, [1, 2, 6, 3]], params))
        np.testing.assert_allclose(batched.actions_pred.data[0], single.actions_pred.data, atol=1e-10)

    def test_non_finite_names_layer(self, params, tiny_model_config, inputs):
        views, ids = inputs
        params["blocks.1.mlp.b2"].data[:] = np.inf
        with pytest.raises(NonFiniteError) as exc:
            forward(params, assemble(patchify(views, tiny_model_config), ids, params))
        assert exc.value.layer == 2


class TestActionLoss:
    """Tests for the L1 action loss."""

    def test_zero_when_equal(self, rng):
        gt = rng.normal(size=(4, 4))
        assert action_loss(Tensor(gt), gt).item() == 0.0

    def test_constant_offset(self, rng):
        gt = rng.normal(size=(4, 4))
        assert action_loss(Tensor(gt + 0.1), gt).item() == pytest.approx(0.1)

    def test_matches_direct_computation(self, rng):
        pred, gt = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        assert abs(action_loss(Tensor(pred), gt).item() - np.mean(np.abs(pred - gt))) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            action_loss(Tensor(np.zeros((4, 4))), np.zeros((3, 4)))

    def test_chunk_pads_with_terminal_action(self, tiny_episodes):
        """Chunks past the end repeat the final expert action."""
        episode = tiny_episodes[0]
        last = len(episode.steps) - 1
        chunk = action_chunk(episode, last, 4)
        assert chunk.shape == (4, 4)
        for row in chunk:
            np.testing.assert_array_equal(row, episode.steps[last].expert_action)
        np.testing.assert_array_equal(action_chunk(episode, 0, 4)[0], episode.steps[0].expert_action)

    def test_gradient_reaches_patch_projection(self, params, tiny_model_config, tiny_episodes):
        """The action loss alone trains the pixel embedding."""
        episode = tiny_episodes[0]
        patches = patchify(episode.steps[0].views, tiny_model_config)
        out = forward(params, assemble(patches, episode.instruction_ids, params))
        backward(action_loss(out.actions_pred, action_chunk(episode, 0, tiny_model_config.horizon)))
        assert params["patch_proj.w"].grad is not None
        assert np.abs(params["patch_proj.w"].grad).max() > 0.0
        assert np.abs(params["patch_proj.b"].grad).max() > 0.0


class TestPredictAction:
    """Tests for inference."""

    def test_finite_smoke(self, params, inputs):
        views, ids = inputs
        action = predict_action(params, views, ids)
        assert action.shape == (4,)
        assert np.all(np.isfinite(action))

    def test_equals_first_query(self, params, tiny_model_config, inputs):
        views, ids = inputs
        out = forward(params, assemble(patchify(views, tiny_model_config), ids, params))
        assert predict_action(params, views, ids).tobytes() == out.actions_pred.data[0].tobytes()

    def test_batched_prediction(self, params, inputs):
        views, ids = inputs
        batched = predict_actions(params, [views, views], [ids, ids])
        assert batched.shape == (2, 4)
        np.testing.assert_allclose(batched[0], predict_action(params, views, ids), atol=1e-10)

    def test_leaves_no_gradients(self, params, inputs):
        views, ids = inputs
        predict_action(params, views, ids)
        assert all(p.grad is None for p in params.parameters())


class TestParams:
    """Tests for parameter initialisation."""

    def test_seeded(self, tiny_model_config):
        a, b = init_params(tiny_model_config, 1), init_params(tiny_model_config, 1)
        assert all(np.array_equal(a[n].data, b[n].data) for n in a)

    def test_block_view(self, params):
        block = params.block(1)
        assert set(block) >= {"attn.wq", "mlp.w1", "ln1.gamma"}

    def test_from_state_dict_rejects_wrong_shape(self, params, tiny_model_config):
        state = params.state_dict()
        state["head.b2"] = np.zeros(7)
        with pytest.raises(ValueError):
            VLAParams.from_state_dict(tiny_model_config, state)


class TestCheckpoint:
    """Tests for checkpoint files."""

    def test_round_trip(self, params, tiny_model_config, tmp_path):
        path = tmp_path / "model.ckpt"
        extras = {"sf/mlp.w1": np.arange(6.0).reshape(2, 3)}
        save_checkpoint(path, params, extras)
        checkpoint = load_checkpoint(path)
        assert checkpoint.config == tiny_model_config
        assert checkpoint.has_projector
        np.testing.assert_array_equal(checkpoint.extras["sf/mlp.w1"], extras["sf/mlp.w1"])
        for name in params:
            assert checkpoint.params[name].data.tobytes() == params[name].data.tobytes()

    def test_without_projector(self, params, tmp_path):
        save_checkpoint(tmp_path / "model.ckpt", params)
        assert not load_checkpoint(tmp_path / "model.ckpt").has_projector

    def test_extras_need_prefix(self, params, tmp_path):
        with pytest.raises(ValueError):
            save_checkpoint(tmp_path / "model.ckpt", params, {"projector.w1": np.zeros(2)})

    def test_corrupt_files(self, params, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params)
        data = path.read_bytes()
        path.write_bytes(b"JUNK" + data[4:])
        with pytest.raises(BadMagicError):
            load_checkpoint(path)
        path.write_bytes(data[:-10])
        with pytest.raises(UnexpectedEOFError):
            load_checkpoint(path)
