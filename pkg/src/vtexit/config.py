"""Model configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the decoder-only multimodal transformer.

    The input layout is always [visual | text]: ``num_visual`` rows of
    precomputed visual embeddings followed by up to ``max_text`` token
    positions. ``cross_attn_zero_from`` structurally masks text-to-visual
    attention (pre-softmax) for every layer index >= that value; it is the
    switch behind the forced-mask model construction.
    """

    num_layers: int = 8
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 32
    num_visual: int = 16
    max_text: int = 16
    cross_attn_zero_from: int | None = None

    def __post_init__(self):
        if self.num_layers < 2:
            raise ValueError("num_layers must be >= 2")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.num_visual < 0:
            raise ValueError("num_visual must be >= 0")
        if self.max_text < 1:
            raise ValueError("max_text must be >= 1")
        if self.cross_attn_zero_from is not None and not (
            0 <= self.cross_attn_zero_from <= self.num_layers
        ):
            raise ValueError("cross_attn_zero_from must lie in [0, num_layers]")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def max_seq(self) -> int:
        return self.num_visual + self.max_text

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def with_cross_mask(self, onset: int | None) -> "ModelConfig":
        return replace(self, cross_attn_zero_from=onset)
