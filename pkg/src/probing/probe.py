"""
Spatial Forcing Lab - Depth Probing

Trains a small regressor on frozen visual-token activations to predict each
patch's mean foreground depth, and reports how well it generalises.
"""
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import structlog

from src.alignment.projector import Projector, project
from src.alignment.teacher import DEPTH_STAT, FOREGROUND_STAT, teacher_features
from src.config import TargetKind
from src.engine import Adam, BatchNormMode, OpKind, Tensor, apply, backward, linear, mse, no_grad
from src.exceptions import InsufficientSamplesError
from src.model.params import VLAParams
from src.model.vla import assemble, forward, patchify
from src.probing.diagnostics import centroid_distance, linear_cka, mean_cosine
from src.scene.models import Episode


logger = structlog.get_logger(__name__)


PROBE_HIDDEN = 64
PROBE_BATCH = 256
MIN_DIAGNOSTIC_SAMPLES = 100
TRAIN_SPLIT = 0.8
FORWARD_CHUNK = 32


@dataclass
class VisualSamples:
    """Per visual token: frozen tap, raw geometry statistics and alignment target."""
    taps: np.ndarray
    raw_stats: np.ndarray
    targets: np.ndarray

    @property
    def foreground(self) -> np.ndarray:
        return self.raw_stats[:, FOREGROUND_STAT] > 0

    @property
    def depths(self) -> np.ndarray:
        return self.raw_stats[:, DEPTH_STAT]

    def __len__(self) -> int:
        return self.taps.shape[0]


@dataclass
class ProbeHead:
    """Two-layer gelu MLP d_model -> 64 -> 1 on standardised inputs."""
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    feature_mean: np.ndarray
    feature_std: np.ndarray
    label_mean: float
    label_std: float

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def _forward(self, features: np.ndarray) -> Tensor:
        x = Tensor((features - self.feature_mean) / self.feature_std)
        hidden = apply(OpKind.GELU, [linear(x, self.w1, self.b1)])
        return linear(hidden, self.w2, self.b2)

    def predict(self, features: np.ndarray) -> np.ndarray:
        """Depth predictions in metres."""
        with no_grad():
            out = self._forward(np.asarray(features, dtype=np.float64))
        return out.data[:, 0] * self.label_std + self.label_mean


@dataclass(frozen=True)
class DiagnosticsReport:
    probe_rmse: float
    mean_cosine: Optional[float]
    linear_cka: float
    centroid_distance: Optional[float]
    n_samples: int


def split_episodes(episodes: Sequence[Episode]) -> tuple[list[Episode], list[Episode]]:
    """First 80% of episodes (file order) train the probe, the rest evaluate it."""
    episodes = list(episodes)
    cut = int(math.floor(TRAIN_SPLIT * len(episodes)))
    cut = min(max(cut, 1), len(episodes) - 1) if len(episodes) > 1 else len(episodes)
    return episodes[:cut], episodes[cut:]


def collect_visual_samples(
    params: VLAParams,
    episodes: Sequence[Episode],
    layer: int,
    kind: TargetKind = TargetKind.GEOMETRY,
) -> VisualSamples:
    """
    Run the frozen backbone over every step and gather visual-token rows.

    Geometry statistics always come from the geometric teacher; ``kind``
    only selects the alignment targets returned alongside.
    """
    config = params.config
    if not 0 <= layer <= config.n_layers:
        raise ValueError(f"layer must lie in [0, {config.n_layers}], got {layer}")

    steps = [(episode, step) for episode in episodes for step in episode.steps]
    taps, stats, targets = [], [], []
    with no_grad():
        for start in range(0, len(steps), FORWARD_CHUNK):
            chunk = steps[start:start + FORWARD_CHUNK]
            patches = np.stack([patchify(step.views, config) for _, step in chunk])
            ids = np.asarray([episode.instruction_ids for episode, _ in chunk])
            out = forward(params, assemble(patches, ids, params))
            visual = out.taps[layer].data[:, :config.n_visual_tokens]
            taps.append(visual.reshape(-1, config.d_model))
            for _, step in chunk:
                geometry = teacher_features(step.views, config, TargetKind.GEOMETRY)
                stats.append(geometry.raw_stats)
                if kind is TargetKind.GEOMETRY:
                    targets.append(geometry.targets)
                else:
                    targets.append(teacher_features(step.views, config, kind).targets)

    if not taps:
        empty = np.zeros((0, config.d_model))
        return VisualSamples(empty, np.zeros((0, 8)), np.zeros((0, config.d_teacher)))
    return VisualSamples(
        taps=np.concatenate(taps),
        raw_stats=np.concatenate(stats),
        targets=np.concatenate(targets),
    )


def fit_probe(
    features: np.ndarray,
    labels: np.ndarray,
    steps: int = 2000,
    lr: float = 1e-2,
    seed: int = 0,
) -> ProbeHead:
    """
    Adam-train a probe head with an L2 loss on standardised features and labels.

    Raises:
        InsufficientSamplesError: No samples
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if features.shape[0] == 0:
        raise InsufficientSamplesError("no foreground patches to train the depth probe on")

    rng = np.random.default_rng(seed)
    d = features.shape[1]
    head = ProbeHead(
        w1=Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, PROBE_HIDDEN)), requires_grad=True),
        b1=Tensor(np.zeros(PROBE_HIDDEN), requires_grad=True),
        w2=Tensor(rng.normal(0.0, 1.0 / np.sqrt(PROBE_HIDDEN), size=(PROBE_HIDDEN, 1)), requires_grad=True),
        b2=Tensor(np.zeros(1), requires_grad=True),
        feature_mean=features.mean(axis=0),
        feature_std=features.std(axis=0) + 1e-6,
        label_mean=float(labels.mean()),
        label_std=float(labels.std()) + 1e-6,
    )
    scaled = (labels - head.label_mean) / head.label_std
    optimizer = Adam(head.parameters(), lr=lr)
    batch = min(PROBE_BATCH, features.shape[0])

    for step in range(steps):
        index = rng.integers(0, features.shape[0], size=batch)
        loss = mse(head._forward(features[index]), Tensor(scaled[index, None]))
        optimizer.zero_grad()
        backward(loss)
        optimizer.step()
        if step % 500 == 0:
            logger.debug("Probe step", step=step, loss=loss.item())
    return head


def rmse(predictions: np.ndarray, labels: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.asarray(predictions) - np.asarray(labels)) ** 2)))


def train_probe(
    params: VLAParams,
    episodes: Sequence[Episode],
    layer: int,
    steps: int = 2000,
    lr: float = 1e-2,
    seed: int = 0,
) -> ProbeHead:
    """Fit a depth probe on the foreground patches of ``episodes``; ``params`` stay untouched."""
    samples = collect_visual_samples(params, episodes, layer)
    fg = samples.foreground
    return fit_probe(samples.taps[fg], samples.depths[fg], steps=steps, lr=lr, seed=seed)


def probe_rmse(
    probe: ProbeHead,
    params: VLAParams,
    episodes: Sequence[Episode],
    layer: int,
) -> float:
    """Root-mean-square depth error over foreground patches, in metres."""
    samples = collect_visual_samples(params, episodes, layer)
    fg = samples.foreground
    if not fg.any():
        raise InsufficientSamplesError("no foreground patches to evaluate the depth probe on")
    return rmse(probe.predict(samples.taps[fg]), samples.depths[fg])


def alignment_diagnostics(
    params: VLAParams,
    episodes: Sequence[Episode],
    layer: int,
    projector: Optional[Projector] = None,
    kind: TargetKind = TargetKind.GEOMETRY,
    probe_steps: int = 2000,
    probe_lr: float = 1e-2,
    seed: int = 0,
) -> DiagnosticsReport:
    """
    Depth-probe error plus distribution diagnostics on the evaluation split.

    ``mean_cosine`` and ``centroid_distance`` compare projected embeddings
    with targets and are None without a trained projector.

    Raises:
        InsufficientSamplesError: Fewer than 100 evaluation visual tokens
    """
    train_split, eval_split = split_episodes(episodes)
    train = collect_visual_samples(params, train_split, layer, kind)
    held_out = collect_visual_samples(params, eval_split, layer, kind)
    if len(held_out) < MIN_DIAGNOSTIC_SAMPLES:
        raise InsufficientSamplesError(
            f"diagnostics need at least {MIN_DIAGNOSTIC_SAMPLES} visual-token samples, got {len(held_out)}"
        )

    fg_train, fg_eval = train.foreground, held_out.foreground
    if not fg_eval.any():
        raise InsufficientSamplesError("evaluation split has no foreground patches")
    probe = fit_probe(train.taps[fg_train], train.depths[fg_train], steps=probe_steps, lr=probe_lr, seed=seed)
    probe_error = rmse(probe.predict(held_out.taps[fg_eval]), held_out.depths[fg_eval])

    cosine: Optional[float] = None
    centroid: Optional[float] = None
    if projector is not None:
        with no_grad():
            projected = project(Tensor(held_out.taps), projector, BatchNormMode.FROZEN).data
        cosine = mean_cosine(projected, held_out.targets)
        centroid = centroid_distance(projected, held_out.targets)

    report = DiagnosticsReport(
        probe_rmse=probe_error,
        mean_cosine=cosine,
        linear_cka=linear_cka(held_out.taps, held_out.targets),
        centroid_distance=centroid,
        n_samples=len(held_out),
    )
    logger.info(
        "Alignment diagnostics computed",
        layer=layer,
        probe_rmse=report.probe_rmse,
        linear_cka=report.linear_cka,
        mean_cosine=report.mean_cosine,
        samples=report.n_samples,
    )
    return report
