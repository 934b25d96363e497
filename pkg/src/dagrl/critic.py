"""State-value estimator used as the advantage baseline.

Node embeddings are mean-pooled (making the value invariant to node
relabeling) and passed through a two-layer ReLU network.  The critic owns
its parameters; feed it detached embeddings so its loss never backs into
the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class CriticConfig:
    hidden: int = 64

    def validate(self):
        if self.hidden < 1:
            raise ValueError("hidden width must be >= 1")


class Critic:
    def __init__(self, cfg: CriticConfig, embed_dim: int, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.params: dict[str, Tensor] = {
            "w1": ad.uniform_init(rng, (embed_dim, cfg.hidden), embed_dim),
            "b1": ad.uniform_init(rng, (cfg.hidden,), embed_dim),
            "w2": ad.uniform_init(rng, (cfg.hidden, 1), cfg.hidden),
            "b2": ad.uniform_init(rng, (1,), cfg.hidden),
        }

    def value(self, enc) -> Tensor:
        """Scalar value per batch element; accepts (n, d) or (batch, n, d)."""
        x = enc if isinstance(enc, Tensor) else Tensor(np.asarray(enc, dtype=np.float64))
        single = x.ndim == 2
        if single:
            x = x.reshape((1,) + x.shape)
        pooled = x.mean(axis=1)  # (batch, d)
        hidden = ad.relu(pooled @ self.params["w1"] + self.params["b1"])
        out = (hidden @ self.params["w2"] + self.params["b2"]).reshape((x.shape[0],))
        return out.reshape(()) if single else out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for name, p in self.params.items():
            p.data[...] = arrays[name]


def critic_loss(values: Tensor, rewards: np.ndarray, baseline: float) -> Tensor:
    """Mean squared error of (reward - baseline - value) over a batch.

    Rewards and the baseline are constants; only the value path carries
    gradient.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise ValueError("critic_loss on an empty batch")
    if values.shape != rewards.shape:
        raise ValueError(f"batch length mismatch: {values.shape} vs {rewards.shape}")
    target = rewards - baseline
    diff = values - target
    return (diff * diff).mean()
