from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

from ..errors import ConfigError

# Global theta used to stretch the encoder to 128k tokens.
LONG_CONTEXT_ROPE_THETA = 73_780_400.0


@dataclass(frozen=True)
class EncoderConfig:
    """Shape and positional settings of the toy encoder.

    Layers whose index is a multiple of ``global_layer_period`` attend over
    the whole sequence with ``global_rope_theta``; the rest use a band of
    ``local_window`` tokens and ``local_rope_theta``.

    ``local_value_identity`` adds ``c * I`` to the value and output
    projections of local layers at init, so each token starts out carrying
    its own embedding forward instead of a near-zero residual update.
    """

    num_layers: int = 4
    model_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    vocab_size: int = 512
    native_max_len: int = 128
    target_max_len: int = 1024
    global_rope_theta: float = 160_000.0
    local_rope_theta: float = 10_000.0
    local_window: int = 32
    global_layer_period: int = 3
    init_std: float = 0.02
    ln_eps: float = 1e-5
    local_value_identity: float = 0.0

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def is_global(self, layer_index: int) -> bool:
        return layer_index % self.global_layer_period == 0

    def validate(self) -> "EncoderConfig":
        for name in ("num_layers", "model_dim", "num_heads", "ffn_dim", "vocab_size", "native_max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.model_dim % self.num_heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim {self.head_dim} must be even for rotary pairs")
        if self.target_max_len < self.native_max_len:
            raise ConfigError(f"target_max_len {self.target_max_len} < native_max_len {self.native_max_len}")
        if self.local_window < 2:
            raise ConfigError(f"local_window must be >= 2, got {self.local_window}")
        if self.global_layer_period < 1:
            raise ConfigError(f"global_layer_period must be >= 1, got {self.global_layer_period}")
        if not (self.global_rope_theta > 0 and self.local_rope_theta > 0):
            raise ConfigError("rope thetas must be positive")
        if not (self.init_std > 0 and self.ln_eps > 0):
            raise ConfigError("init_std and ln_eps must be positive")
        if not math.isfinite(self.local_value_identity):
            raise ConfigError("local_value_identity must be finite")
        slowest = slowest_rope_period(self.global_rope_theta, self.head_dim)
        if slowest < self.target_max_len:
            raise ConfigError(
                f"global_rope_theta {self.global_rope_theta:g}: slowest rotary period {slowest:.1f} "
                f"is shorter than target_max_len {self.target_max_len}"
            )
        if slowest_rope_period(self.local_rope_theta, self.head_dim) < self.local_window:
            raise ConfigError(f"local_rope_theta {self.local_rope_theta:g} aliases within local_window")
        return self


# Settings for the 512-document distillation run: a narrow band (the
# long-context encoders use a window of 1/64 of native length), tiny random
# weights, and identity value paths in local layers.
TOY_DISTILL = EncoderConfig(local_window=4, init_std=1e-4, local_value_identity=0.1)


def slowest_rope_period(theta: float, head_dim: int) -> float:
    """Period, in positions, of the lowest-frequency rotary pair."""
    i = head_dim // 2 - 1
    return 2.0 * math.pi * theta ** (2.0 * i / head_dim)


def scale_rope_theta(config: EncoderConfig, new_theta: float) -> EncoderConfig:
    """Swap in a new global rotary base; local layers and weights are untouched."""
    if not new_theta > 0:
        raise ConfigError(f"rope theta must be positive, got {new_theta}")
    if new_theta == config.global_rope_theta:
        return config
    return dataclasses.replace(config, global_rope_theta=float(new_theta)).validate()


def config_fields() -> list[dataclasses.Field]:
    return list(dataclasses.fields(EncoderConfig))
