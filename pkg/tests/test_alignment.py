"""
Tests for teacher features, the projector and the alignment objective.
"""
import math

import numpy as np
import pytest

from src.alignment.losses import LossWeights, align_loss, total_loss
from src.alignment.projector import Projector, project
from src.alignment.teacher import (
    DEPTH_STAT,
    FOREGROUND_STAT,
    fourier_embed,
    geometry_stats,
    positional_embedding,
    teacher_calls,
    teacher_features,
)
from src.config import ModelConfig, TargetKind
from src.engine import Adam, BatchNormMode, Tensor, backward, grad_check, no_grad
from src.exceptions import DegenerateBatchError, NonFiniteError, ShapeError
from src.model.params import init_params
from src.model.vla import action_chunk, action_loss, assemble, forward, patchify, predict_action, visual_taps
from src.scene.generator import gen_episode, train_seeds
from src.scene.models import Camera, Difficulty, RenderOutput
from src.scene.renderer import render


def _flat_view(height: int, width: int, covered: bool) -> RenderOutput:
    if covered:
        depth = np.full((height, width), 0.9, dtype=np.float32)
        pointmap = np.zeros((height, width, 3), dtype=np.float32)
        pointmap[..., 2] = 0.6
    else:
        depth = np.full((height, width), 10.0, dtype=np.float32)
        pointmap = np.tile(np.array([0.0, 0.0, -1.0], dtype=np.float32), (height, width, 1))
    return RenderOutput(
        image=np.zeros((height, width, 3), dtype=np.float32),
        depth=depth,
        pointmap=pointmap,
        mask=np.full((height, width), covered),
    )


class TestPositionalEmbedding:
    """Tests for the fixed sinusoidal table."""

    def test_first_row(self):
        """sin(0) = 0 and cos(0) = 1, scaled by 0.1."""
        table = positional_embedding(32, 64)
        np.testing.assert_allclose(table[0], np.tile([0.0, 0.1], 32))

    def test_norm_bound(self):
        table = positional_embedding(32, 64)
        assert np.all(np.linalg.norm(table, axis=1) <= 0.1 * math.sqrt(64) + 1e-12)

    def test_rows_distinct(self):
        table = positional_embedding(32, 64)
        assert not np.array_equal(table[1], table[2])

    def test_odd_width_rejected(self):
        with pytest.raises(ValueError):
            positional_embedding(4, 7)


class TestTeacherFeatures:
    """Tests for per-patch geometric targets."""

    def test_covered_patch_fraction(self, tiny_model_config):
        """A fully covered patch has foreground fraction 1."""
        stats = geometry_stats(_flat_view(16, 16, covered=True), tiny_model_config)
        assert np.all(stats[:, FOREGROUND_STAT] == 1.0)
        np.testing.assert_allclose(stats[:, DEPTH_STAT], 0.9, atol=1e-6)

    def test_background_patches_identical(self, tiny_model_config):
        """All-background patches give zero stats and one shared embedding."""
        views = [_flat_view(16, 16, covered=False)] * 2
        features = teacher_features(views, tiny_model_config)
        assert np.all(features.raw_stats == 0.0)
        expected = fourier_embed(np.zeros((1, 8)), tiny_model_config.n_frequencies)
        expected /= np.linalg.norm(expected)
        for row in features.embedding:
            np.testing.assert_allclose(row, expected[0])

    def test_axis_sphere_center_depth(self, axis_scene):
        """Centre patch mean depth is within two pixel footprints of 0.9 m."""
        config = ModelConfig(image_height=24, image_width=24)
        camera = Camera(
            position=(0.5, 0.5, 1.5), look_at=(0.5, 0.5, 0.5), up=(0.0, 1.0, 0.0), height=24, width=24,
        )
        stats = geometry_stats(render(axis_scene, camera), config)
        footprint = 2.0 * math.tan(camera.vertical_fov / 2.0) / 24
        assert stats[4, FOREGROUND_STAT] > 0
        assert abs(stats[4, DEPTH_STAT] - 0.9) < 2 * footprint

    def test_shapes_and_unit_embedding(self, tiny_model_config, tiny_episodes):
        features = teacher_features(tiny_episodes[0].steps[0].views, tiny_model_config)
        assert features.targets.shape == (8, 16)
        assert features.raw_stats.shape == (8, 8)
        np.testing.assert_allclose(np.linalg.norm(features.embedding, axis=1), 1.0)
        np.testing.assert_allclose(
            features.targets - features.embedding,
            positional_embedding(8, 16, tiny_model_config.pe_scale),
            atol=1e-12,
        )

    def test_targets_read_only(self, tiny_model_config, tiny_episodes):
        features = teacher_features(tiny_episodes[0].steps[0].views, tiny_model_config)
        with pytest.raises(ValueError):
            features.targets[0, 0] = 1.0

    def test_target_kinds(self, tiny_model_config, tiny_episodes):
        views = tiny_episodes[0].steps[0].views
        geometry = teacher_features(views, tiny_model_config, TargetKind.GEOMETRY)
        no_pe = teacher_features(views, tiny_model_config, TargetKind.GEOMETRY_NO_PE)
        appearance = teacher_features(views, tiny_model_config, TargetKind.APPEARANCE)
        np.testing.assert_array_equal(no_pe.targets, geometry.embedding)
        assert not np.allclose(appearance.embedding, geometry.embedding)

    def test_view_count_mismatch(self, tiny_model_config, tiny_episodes):
        with pytest.raises(ShapeError):
            teacher_features(tiny_episodes[0].steps[0].views[:1], tiny_model_config)

    def test_call_counter(self, tiny_model_config, tiny_episodes):
        teacher_calls.reset()
        teacher_features(tiny_episodes[0].steps[0].views, tiny_model_config)
        assert teacher_calls.value == 1


class TestProjector:
    """Tests for the batch-norm plus MLP projector."""

    def test_output_shape(self, tiny_model_config, rng):
        projector = Projector.create(tiny_model_config, seed=0)
        out = project(Tensor(rng.normal(size=(2 * 8, 16))), projector)
        assert out.shape == (16, 16)

    def test_zero_gamma_collapses(self, tiny_model_config, rng):
        """With gamma = 0 every token maps to mlp(beta)."""
        projector = Projector.create(tiny_model_config, seed=0)
        projector.bn.gamma.data[:] = 0.0
        projector.bn.beta.data[:] = rng.normal(size=16)
        out = project(Tensor(rng.normal(size=(6, 16))), projector).data
        np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), atol=1e-12)

    def test_single_row_training(self, tiny_model_config):
        projector = Projector.create(tiny_model_config, seed=0)
        with pytest.raises(DegenerateBatchError):
            project(Tensor(np.ones((1, 16))), projector)

    def test_gradient_into_taps(self, tiny_model_config, rng):
        """Alignment gradients reaching the backbone taps pass the finite-difference check."""
        projector = Projector.create(tiny_model_config, seed=0)
        taps = Tensor(rng.normal(size=(6, 16)))
        targets = rng.normal(size=(6, 16))
        assert grad_check(lambda p: align_loss(project(p[0], projector), targets), [taps]) < 1e-4

    def test_state_dict_round_trip(self, tiny_model_config, rng):
        projector = Projector.create(tiny_model_config, seed=0)
        project(Tensor(rng.normal(size=(6, 16))), projector)
        state = projector.state_dict()
        assert all(name.startswith("sf/") for name in state)
        restored = Projector.from_state_dict(state)
        assert restored.bn.mode is BatchNormMode.FROZEN
        np.testing.assert_array_equal(restored.bn.running_mean, projector.bn.running_mean)
        np.testing.assert_array_equal(restored.w2.data, projector.w2.data)

    def test_fits_frozen_backbone_targets(self):
        """Align-only training on a frozen random backbone reaches mean cosine above 0.9."""
        config = ModelConfig()
        params = init_params(config, seed=0)
        episodes = [gen_episode(seed, Difficulty.TWO_VIEW) for seed in train_seeds(0, 2)]
        views = [e.steps[0].views for e in episodes]
        with no_grad():
            patches = np.stack([patchify(v, config) for v in views])
            ids = np.asarray([e.instruction_ids for e in episodes])
            out = forward(params, assemble(patches, ids, params))
            taps = Tensor(visual_taps(out.taps[config.aligned_layer], config).data.copy())
        targets = np.concatenate([teacher_features(v, config).targets for v in views])

        projector = Projector.create(config, seed=0)
        optimizer = Adam(projector.parameters(), lr=5e-3)
        for _ in range(500):
            optimizer.zero_grad()
            backward(align_loss(project(taps, projector), targets))
            optimizer.step()

        with no_grad():
            mean_cosine = -align_loss(project(taps, projector), targets).item()
        assert mean_cosine > 0.9


class TestAlignLoss:
    """Tests for the negative mean cosine objective."""

    def test_identical_rows(self, rng):
        x = rng.normal(size=(5, 16))
        assert align_loss(Tensor(x), x).item() == pytest.approx(-1.0)

    def test_orthogonal_rows(self):
        a = np.array([[1.0, 0.0], [0.0, 2.0]])
        b = np.array([[0.0, 3.0], [1.0, 0.0]])
        assert align_loss(Tensor(a), b).item() == pytest.approx(0.0)

    def test_half_negated(self, rng):
        x = rng.normal(size=(4, 8))
        targets = np.concatenate([x[:2], -x[2:]])
        assert align_loss(Tensor(x), targets).item() == pytest.approx(0.0, abs=1e-12)

    def test_bounded(self, rng):
        for _ in range(10):
            value = align_loss(Tensor(rng.normal(size=(7, 4))), rng.normal(size=(7, 4))).item()
            assert -1.0 <= value <= 1.0

    def test_rows_pair_by_patch_index(self, rng):
        """Shuffling both sides together keeps the loss; shuffling one side breaks the pairing."""
        projected = rng.normal(size=(6, 8))
        targets = projected + 0.3 * rng.normal(size=(6, 8))
        order = np.array([1, 2, 3, 4, 5, 0])
        base = align_loss(Tensor(projected), targets).item()
        assert align_loss(Tensor(projected[order]), targets[order]).item() == pytest.approx(base, abs=1e-12)
        assert align_loss(Tensor(projected[order]), targets).item() > base + 0.1

    def test_row_mismatch(self, rng):
        with pytest.raises(ShapeError):
            align_loss(Tensor(rng.normal(size=(4, 8))), rng.normal(size=(5, 8)))


class TestTotalLoss:
    """Tests for the weighted objective."""

    def test_alpha_zero_is_action_loss(self):
        l_action = Tensor(0.7)
        assert total_loss(l_action, Tensor(-0.9), LossWeights(alpha=0.0)) is l_action

    def test_missing_align_loss(self):
        l_action = Tensor(0.7)
        assert total_loss(l_action, None, LossWeights(alpha=0.5)) is l_action

    def test_weighted_sum(self):
        assert total_loss(Tensor(1.0), Tensor(-0.8), LossWeights(alpha=0.5)).item() == pytest.approx(0.6)
        assert total_loss(Tensor(1.0), Tensor(-1.0), LossWeights(alpha=12.5)).item() == pytest.approx(-11.5)

    def test_non_finite(self):
        with pytest.raises(NonFiniteError) as exc:
            total_loss(Tensor(float("nan")), None, LossWeights(), iteration=7)
        assert exc.value.iteration == 7

    def test_negative_alpha(self):
        with pytest.raises(ValueError):
            LossWeights(alpha=-0.1)


class TestSpatialForcingObjective:
    """End-to-end checks of the combined objective on a one-layer model."""

    @pytest.fixture
    def micro_config(self):
        return ModelConfig(
            d_model=8,
            n_layers=1,
            n_heads=2,
            patch_size=8,
            image_height=8,
            image_width=8,
            n_lang_tokens=4,
            n_action_queries=2,
            horizon=2,
            aligned_layer=1,
            d_teacher=16,
            projector_hidden=8,
            action_hidden=8,
        )

    @pytest.fixture
    def batch(self, micro_config):
        episodes = [gen_episode(seed, Difficulty.TWO_VIEW, 8, 8) for seed in (0, 1)]
        patches = np.stack([patchify(e.steps[0].views, micro_config) for e in episodes])
        ids = np.asarray([e.instruction_ids for e in episodes])
        chunks = np.stack([action_chunk(e, 0, micro_config.horizon) for e in episodes])
        targets = np.concatenate(
            [teacher_features(e.steps[0].views, micro_config).targets for e in episodes]
        )
        return patches, ids, chunks, targets

    def _loss(self, params, projector, batch, alpha=0.5, target_scale=1.0):
        patches, ids, chunks, targets = batch
        out = forward(params, assemble(patches, ids, params))
        l_action = action_loss(out.actions_pred, chunks)
        projected = project(visual_taps(out.taps[params.config.aligned_layer], params.config), projector)
        l_align = align_loss(projected, targets * target_scale)
        return total_loss(l_action, l_align, LossWeights(alpha=alpha))

    def test_grad_check(self, micro_config, batch):
        """The combined loss agrees with central differences."""
        params = init_params(micro_config, seed=0)
        projector = Projector.create(micro_config, seed=1)
        checked = [
            params["blocks.0.attn.wv"],
            params["blocks.0.ln1.gamma"],
            params["head.w2"],
            projector.w1,
        ]
        assert grad_check(lambda _: self._loss(params, projector, batch), checked) < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_grad_check_every_tensor(self, micro_config, batch, seed):
        """Every backbone, head and projector entry agrees with central differences."""
        patches, ids, _, targets = batch
        params = init_params(micro_config, seed=seed)
        projector = Projector.create(micro_config, seed=seed + 1)
        with no_grad():
            predicted = forward(params, assemble(patches, ids, params)).actions_pred.data
        # Every L1 residual is +0.5, far from the kink and with no sign cancellation in head.b2.
        shifted = (patches, ids, predicted - 0.5, targets)
        checked = [params[name] for name in params] + projector.parameters()
        assert grad_check(lambda _: self._loss(params, projector, shifted), checked) < 1e-4

    def test_target_scale_invariance(self, micro_config, batch):
        """Rescaling the targets leaves backbone gradients unchanged."""
        grads = []
        for scale in (1.0, 7.5):
            params = init_params(micro_config, seed=0)
            projector = Projector.create(micro_config, seed=1)
            backward(self._loss(params, projector, batch, target_scale=scale))
            grads.append({name: params[name].grad.copy() for name in params})
        for name in grads[0]:
            assert np.max(np.abs(grads[0][name] - grads[1][name])) < 1e-10

    def test_projector_off_inference_path(self, micro_config, batch, rng):
        """Mutating the projector never changes a prediction bit."""
        params = init_params(micro_config, seed=0)
        projector = Projector.create(micro_config, seed=1)
        patches, ids, _, _ = batch
        views = [patches[0][i].reshape(8, 8, 3) for i in range(2)]
        before = predict_action(params, views, ids[0])
        for tensor in projector.parameters():
            tensor.data[...] = rng.normal(size=tensor.shape)
        after = predict_action(params, views, ids[0])
        assert before.tobytes() == after.tobytes()

    def test_alpha_zero_matches_action_gradients(self, micro_config, batch):
        """With alpha = 0 the backbone sees only the action gradient."""
        patches, ids, chunks, _ = batch
        params = init_params(micro_config, seed=0)
        projector = Projector.create(micro_config, seed=1)
        backward(self._loss(params, projector, batch, alpha=0.0))
        with_zero = {name: params[name].grad.copy() for name in params}

        plain = init_params(micro_config, seed=0)
        out = forward(plain, assemble(patches, ids, plain))
        backward(action_loss(out.actions_pred, chunks))
        for name in plain:
            assert with_zero[name].tobytes() == plain[name].grad.tobytes()
