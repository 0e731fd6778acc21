"""Analytic floating-point-operation accounting for prefill, with and
without visual-token exit.

Convention (documented, checked against an instrumented forward):
multiply-add counts as 2 ops; per layer over n live tokens the counted
terms are QKVO projections (8·n·d²), dense attention scores + value mix
(4·n²·d), and the two FFN matmuls (4·n·d·d_ff). Norms, activations,
softmax, embeddings, and the LM head are excluded by default; an optional
flag adds documented estimates for the elementwise terms so sensitivity
to the convention can be inspected. Counts are exact integers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .config import ModelConfig


@dataclass(frozen=True)
class FlopsReport:
    per_layer: list[int]
    total_baseline: int
    total_with_exit: int
    reduction_pct: float
    exit_layer: int | None

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "per_layer": self.per_layer,
            "total_baseline": self.total_baseline,
            "total_with_exit": self.total_with_exit,
            "reduction_pct": self.reduction_pct,
            "exit_layer": self.exit_layer,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def layer_flops(config: ModelConfig, n: int, include_elementwise: bool = False) -> int:
    """Ops for one layer's prefill over n live tokens."""
    if n < 1:
        raise ValueError("n must be >= 1")
    d, dff = config.hidden_dim, config.ffn_dim
    total = 8 * n * d * d + 4 * n * n * d + 4 * n * d * dff
    if include_elementwise:
        # two layer norms (~6 ops/element), GELU (~10), softmax (~5/score)
        total += 12 * n * d + 10 * n * dff + 5 * n * n
    return total


def decode_flops_per_token(config: ModelConfig, n_ctx: int) -> int:
    """Ops for one decode step attending to n_ctx cached rows (per layer sum)."""
    d, dff = config.hidden_dim, config.ffn_dim
    per_layer = 8 * d * d + 4 * n_ctx * d + 4 * d * dff
    return config.num_layers * per_layer


def total_flops(config: ModelConfig, exit_layer: int | None, t: int,
                include_elementwise: bool = False) -> FlopsReport:
    """Prefill cost with visual rows removed on entry to ``exit_layer``.

    Layers below the exit process n_visual + t tokens, layers at or above
    it process t; ``exit_layer=None`` (or num_layers) is the no-exit cost.
    """
    if t < 1:
        raise ValueError("t must be >= 1")
    if exit_layer is not None and not (0 <= exit_layer <= config.num_layers):
        raise ValueError("exit_layer out of range")
    n_full = config.num_visual + t
    full = layer_flops(config, n_full, include_elementwise)
    text_only = layer_flops(config, t, include_elementwise)
    cut = config.num_layers if exit_layer is None else exit_layer
    per_layer = [full if k < cut else text_only for k in range(config.num_layers)]
    baseline = full * config.num_layers
    with_exit = sum(per_layer)
    reduction = 100.0 * (1.0 - with_exit / baseline)
    return FlopsReport(per_layer=per_layer, total_baseline=baseline,
                       total_with_exit=with_exit, reduction_pct=reduction,
                       exit_layer=exit_layer)


def flops_from_live_counts(config: ModelConfig, live_counts: list[int],
                           include_elementwise: bool = False) -> int:
    """Exact prefill cost from the per-layer live-token counts an actual
    run reports; covers pruning schedules total_flops cannot express."""
    if len(live_counts) != config.num_layers:
        raise ValueError("need one live count per layer")
    return sum(layer_flops(config, n, include_elementwise) for n in live_counts)


class MatmulCounter:
    """op_hook that accumulates 2·m·k·n over the counted matmul categories;
    the independent side of the FLOPs oracle check."""

    COUNTED = ("proj", "scores", "mix", "ffn")

    def __init__(self):
        self.total = 0
        self.by_name: dict[str, int] = {}

    def __call__(self, name: str, m: int, k: int, n: int) -> None:
        ops = 2 * m * k * n
        self.by_name[name] = self.by_name.get(name, 0) + ops
        if name in self.COUNTED:
            self.total += ops
