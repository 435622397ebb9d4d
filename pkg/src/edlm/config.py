"""Architecture hyperparameters and named presets."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .attention import GLOBAL, LayerKind, RopeConfig
from .errors import ConfigError

TOKENS_PER_IMAGE = 256


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    d_head: int
    n_q_heads: int
    n_kv_heads: int
    n_layers: int  # per stack
    d_ffn: int
    local_per_global: int = 5  # layer pattern: this many local layers, then one global
    local_window: int = 512
    rope_local_base: float = 10_000.0
    rope_global_base: float = 1_000_000.0
    pi_scale: float = 1.0
    tied_embeddings: bool = True
    merged_attention: bool = True
    cross_attention_layers: str = "all"  # all | global_only
    encoder_full_visibility: bool = False
    position_scheme: str = "continued"  # continued | restart
    d_vision: int = 1152
    tokens_per_image: int = TOKENS_PER_IMAGE
    freeze_vision: bool = True
    max_seq: int = 16_384
    num_sentinels: int = 100
    norm_eps: float = 1e-6
    allow_partial_pattern: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "d_head", "n_q_heads", "n_kv_heads", "n_layers",
                     "d_ffn", "local_window", "d_vision", "max_seq"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_head % 2:
            raise ConfigError(f"d_head must be even for rotary embeddings, got {self.d_head}")
        if self.n_q_heads % self.n_kv_heads:
            raise ConfigError(f"n_q_heads={self.n_q_heads} not divisible by n_kv_heads={self.n_kv_heads}")
        if self.local_per_global < 0:
            raise ConfigError("local_per_global must be >= 0")
        period = self.local_per_global + 1
        if self.n_layers % period and not self.allow_partial_pattern:
            raise ConfigError(f"n_layers={self.n_layers} is not a multiple of the layer pattern "
                              f"period {period} (set allow_partial_pattern to truncate)")
        if self.tokens_per_image != TOKENS_PER_IMAGE:
            raise ConfigError(f"tokens_per_image is fixed at {TOKENS_PER_IMAGE}")
        if self.cross_attention_layers not in ("all", "global_only"):
            raise ConfigError(f"cross_attention_layers must be 'all' or 'global_only', "
                              f"got {self.cross_attention_layers!r}")
        if self.position_scheme not in ("continued", "restart"):
            raise ConfigError(f"position_scheme must be 'continued' or 'restart', got {self.position_scheme!r}")
        if self.pi_scale < 1:
            raise ConfigError(f"pi_scale must be >= 1, got {self.pi_scale}")
        if self.num_sentinels < 1 or self.num_sentinels + 3 >= self.vocab_size:
            raise ConfigError(f"num_sentinels={self.num_sentinels} does not fit vocab {self.vocab_size}")

    # layer pattern -------------------------------------------------------

    def layer_kind(self, i: int) -> LayerKind:
        if (i + 1) % (self.local_per_global + 1) == 0:
            return GLOBAL
        return LayerKind.local(self.local_window)

    def layer_kinds(self) -> list[LayerKind]:
        return [self.layer_kind(i) for i in range(self.n_layers)]

    def n_global_layers(self) -> int:
        return self.n_layers // (self.local_per_global + 1)

    def rope(self, kind: LayerKind) -> RopeConfig:
        base = self.rope_global_base if kind.is_global else self.rope_local_base
        return RopeConfig(base, self.pi_scale)

    def has_cross(self, i: int) -> bool:
        """Whether decoder layer ``i`` sees the encoder output."""
        return self.cross_attention_layers == "all" or self.layer_kind(i).is_global

    # special tokens: sentinels, then EOS, BOS, PAD at the top of the vocab

    @property
    def pad_id(self) -> int:
        return self.vocab_size - 1

    @property
    def bos_id(self) -> int:
        return self.vocab_size - 2

    @property
    def eos_id(self) -> int:
        return self.vocab_size - 3

    @property
    def first_special(self) -> int:
        return self.vocab_size - 3 - self.num_sentinels

    def sentinel(self, k: int) -> int:
        if not 0 <= k < self.num_sentinels:
            raise ConfigError(f"sentinel {k} out of range (have {self.num_sentinels})")
        return self.first_special + k

    def sentinel_ids(self) -> list[int]:
        return [self.first_special + k for k in range(self.num_sentinels)]

    # serialisation -------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


# Public dimensions of the decoder-only families the presets mirror. The
# vocabulary of 262 144 reproduces the 168M / 302M embedding counts.
PRESETS: dict[str, ModelConfig] = {
    "270m": ModelConfig(vocab_size=262_144, d_model=640, d_head=256, n_q_heads=4, n_kv_heads=1,
                        n_layers=18, d_ffn=2048),
    "1b": ModelConfig(vocab_size=262_144, d_model=1152, d_head=256, n_q_heads=4, n_kv_heads=1,
                      n_layers=26, d_ffn=6912, allow_partial_pattern=True),
    "4b": ModelConfig(vocab_size=262_144, d_model=2560, d_head=256, n_q_heads=8, n_kv_heads=4,
                      n_layers=34, d_ffn=10_240, local_window=1024, allow_partial_pattern=True),
    # 2B decoder with 1:1 local/global interleaving; baseline of the ablations
    # is untied and unmerged.
    "2b-ablation": ModelConfig(vocab_size=256_000, d_model=2304, d_head=256, n_q_heads=8, n_kv_heads=4,
                               n_layers=26, d_ffn=9216, local_per_global=1, local_window=4096,
                               tied_embeddings=False, merged_attention=False),
    "toy": ModelConfig(vocab_size=64, d_model=32, d_head=8, n_q_heads=4, n_kv_heads=2, n_layers=2,
                       d_ffn=64, local_per_global=1, local_window=4, d_vision=8, num_sentinels=8,
                       max_seq=1024),
    "copy": ModelConfig(vocab_size=64, d_model=64, d_head=16, n_q_heads=4, n_kv_heads=2, n_layers=2,
                        d_ffn=128, local_per_global=1, local_window=8, d_vision=8, num_sentinels=8,
                        max_seq=1024),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return cfg.replace(**overrides) if overrides else cfg
