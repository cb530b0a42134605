"""Adam settings shared by score training and variational fitting."""

from __future__ import annotations

from dataclasses import dataclass

import optax

from scoreprior.errors import ConfigError


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    decay_steps: int | None = None  # cosine decay to 1% of lr over this many steps

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")
        if self.decay_steps is not None and self.decay_steps < 1:
            raise ConfigError("decay_steps must be positive")

    def build(self) -> optax.GradientTransformation:
        lr = self.lr
        if self.decay_steps is not None:
            lr = optax.cosine_decay_schedule(self.lr, self.decay_steps, alpha=0.01)
        adam = optax.adam(lr, b1=self.beta1, b2=self.beta2, eps=self.eps)
        if self.clip_norm is None:
            return adam
        return optax.chain(optax.clip_by_global_norm(self.clip_norm), adam)
