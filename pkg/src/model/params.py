"""
Spatial Forcing Lab - VLA Parameters

Named parameter store for the toy vision-language-action transformer.
"""
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from src.config import ModelConfig
from src.engine import Tensor


@dataclass
class VLAParams:
    """
    Backbone and action-head weights, keyed by dotted names.

    Names:
        patch_proj.{w,b}, lang_embed, pos_embed, action_queries,
        blocks.<i>.{ln1,ln2}.{gamma,beta}, blocks.<i>.attn.{wq,wk,wv,wo},
        blocks.<i>.mlp.{w1,b1,w2,b2}, ln_f.{gamma,beta}, head.{w1,b1,w2,b2}
    """
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def block(self, index: int) -> dict[str, Tensor]:
        prefix = f"blocks.{index}."
        return {
            name[len(prefix):]: t for name, t in self.tensors.items() if name.startswith(prefix)
        }

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.tensors.values())

    @classmethod
    def from_state_dict(cls, config: ModelConfig, state: dict[str, np.ndarray]) -> "VLAParams":
        expected = init_params(config, seed=0)
        missing = set(expected.tensors) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        tensors = {}
        for name, template in expected.tensors.items():
            array = np.asarray(state[name], dtype=np.float64)
            if array.shape != template.shape:
                raise ValueError(f"{name}: expected shape {template.shape}, got {array.shape}")
            tensors[name] = Tensor(array, requires_grad=True, name=name)
        return cls(config=config, tensors=tensors)


def _linear_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))


def init_params(config: ModelConfig, seed: int) -> VLAParams:
    """
    Initialise every backbone and head tensor from ``seed``.

    Linear weights are N(0, 1/fan_in); embeddings N(0, 0.02^2); biases zero;
    layer-norm gains one.
    """
    rng = np.random.default_rng(seed)
    d = config.d_model
    raw: dict[str, np.ndarray] = {
        "patch_proj.w": _linear_init(rng, config.patch_pixels, d),
        "patch_proj.b": np.zeros(d),
        "lang_embed": rng.normal(0.0, 0.02, size=(config.vocab_size, d)),
        "pos_embed": rng.normal(0.0, 0.02, size=(config.seq_len, d)),
        "action_queries": rng.normal(0.0, 0.02, size=(config.n_action_queries, d)),
    }
    for i in range(config.n_layers):
        p = f"blocks.{i}."
        raw[p + "ln1.gamma"] = np.ones(d)
        raw[p + "ln1.beta"] = np.zeros(d)
        for w in ("wq", "wk", "wv", "wo"):
            raw[p + f"attn.{w}"] = _linear_init(rng, d, d)
        raw[p + "ln2.gamma"] = np.ones(d)
        raw[p + "ln2.beta"] = np.zeros(d)
        raw[p + "mlp.w1"] = _linear_init(rng, d, 4 * d)
        raw[p + "mlp.b1"] = np.zeros(4 * d)
        raw[p + "mlp.w2"] = _linear_init(rng, 4 * d, d)
        raw[p + "mlp.b2"] = np.zeros(d)
    raw["ln_f.gamma"] = np.ones(d)
    raw["ln_f.beta"] = np.zeros(d)
    raw["head.w1"] = _linear_init(rng, d, config.action_hidden)
    raw["head.b1"] = np.zeros(config.action_hidden)
    raw["head.w2"] = _linear_init(rng, config.action_hidden, config.action_dim)
    raw["head.b2"] = np.zeros(config.action_dim)

    return VLAParams(
        config=config,
        tensors={name: Tensor(a, requires_grad=True, name=name) for name, a in raw.items()},
    )
