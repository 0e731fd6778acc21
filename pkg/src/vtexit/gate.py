"""Exit gates: per-layer hyper-networks that read token status and decide
when all visual tokens may be removed.

Each gated layer owns an unshared two-layer MLP (no biases by default):
p = softmax(GELU(feature @ W1) @ W2), a binary keep/exit prediction. The
feature is a concatenation of selected token-status parts; the default
selector is {mean_text, last_text}, the mean of all-but-last text states
joined with the last text state. Gates are evaluated during prefill only,
on each gated layer's output, and the first firing removes the visual
rows — at most one exit per sequence, enforced structurally by the
forward loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .ckpt import read_checkpoint, write_checkpoint
from .config import ModelConfig
from .flopcount import flops_from_live_counts
from .model import PrefillResult, greedy_decode, prefill

STATE_PARTS = ("mean_visual", "last_visual", "mean_text", "last_text")
ATTN_PARTS = ("visual_self_attn", "cross_attn", "text_self_attn")
PART_ORDER = STATE_PARTS + ATTN_PARTS

DEFAULT_ATTN_FEATURE_DIM = 576  # full-scale visual-token count


@dataclass(frozen=True)
class StatusSelector:
    """Which token-status parts feed the gate, in canonical order."""

    parts: tuple[str, ...] = ("mean_text", "last_text")
    attn_feature_dim: int = DEFAULT_ATTN_FEATURE_DIM

    def __post_init__(self):
        if not self.parts:
            raise ValueError("selector needs at least one part")
        for p in self.parts:
            if p not in PART_ORDER:
                raise ValueError(f"unknown status part {p!r}")
        ordered = tuple(p for p in PART_ORDER if p in self.parts)
        if ordered != self.parts:
            object.__setattr__(self, "parts", ordered)
        if self.attn_feature_dim < 1:
            raise ValueError("attn_feature_dim must be >= 1")

    def feature_dim(self, hidden_dim: int) -> int:
        return sum(hidden_dim if p in STATE_PARTS else self.attn_feature_dim
                   for p in self.parts)

    def uses_visual_states(self) -> bool:
        return bool({"mean_visual", "last_visual"} & set(self.parts))

    def uses_attention(self) -> bool:
        return bool(set(ATTN_PARTS) & set(self.parts))

    @classmethod
    def parse(cls, text: str, attn_feature_dim: int = DEFAULT_ATTN_FEATURE_DIM
              ) -> "StatusSelector":
        parts = tuple(p.strip() for p in text.split(",") if p.strip())
        return cls(parts=parts, attn_feature_dim=attn_feature_dim)

    def spec_string(self) -> str:
        return ",".join(self.parts)


def interp_linear(v: np.ndarray, target_dim: int) -> np.ndarray:
    """Piecewise-linear resample of a vector to target_dim entries."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or len(v) == 0:
        raise ValueError("need a non-empty 1-D vector")
    if len(v) == 1:
        return np.full(target_dim, v[0])
    xs = np.linspace(0.0, len(v) - 1.0, target_dim)
    return np.interp(xs, np.arange(len(v), dtype=np.float64), v)


def received_attention(attn: np.ndarray, n_visual: int, block: str) -> np.ndarray:
    """Mean attention each key receives from its causal-valid queries
    within a block: 'visual_self' and 'cross' index visual keys,
    'text_self' indexes text keys."""
    n = attn.shape[0]
    if block in ("visual_self", "cross") and n_visual < 1:
        raise ValueError(f"{block} feature requires live visual tokens")
    if block == "visual_self":
        return np.array([attn[j:n_visual, j].mean() for j in range(n_visual)])
    if block == "cross":
        if n - n_visual < 1:
            raise ValueError("cross feature requires text rows")
        return attn[n_visual:, :n_visual].mean(axis=0)
    if block == "text_self":
        return np.array([attn[n_visual + j:, n_visual + j].mean()
                         for j in range(n - n_visual)])
    raise ValueError(f"unknown block {block!r}")


def token_status(selector: StatusSelector, text_states: np.ndarray,
                 visual_states: np.ndarray | None = None,
                 attn_mean: np.ndarray | None = None,
                 n_visual: int | None = None) -> np.ndarray:
    """Concatenated status feature in the selector's declared order."""
    t = text_states.shape[0]
    if t < 1:
        raise ValueError("token_status requires at least one text token")
    pieces = []
    for part in selector.parts:
        if part == "mean_text":
            # average over all-but-last; a single token falls back to itself
            pieces.append(text_states[:-1].mean(axis=0) if t >= 2 else text_states[0])
        elif part == "last_text":
            pieces.append(text_states[-1])
        elif part in ("mean_visual", "last_visual"):
            if visual_states is None or visual_states.shape[0] < 1:
                raise ValueError(f"{part} requires live visual tokens")
            pieces.append(visual_states.mean(axis=0) if part == "mean_visual"
                          else visual_states[-1])
        else:
            if attn_mean is None or n_visual is None:
                raise ValueError(f"{part} requires the layer's attention matrix")
            block = {"visual_self_attn": "visual_self", "cross_attn": "cross",
                     "text_self_attn": "text_self"}[part]
            vec = received_attention(attn_mean, n_visual, block)
            pieces.append(interp_linear(vec, selector.attn_feature_dim))
    return np.concatenate(pieces)


def gate_forward(w1: np.ndarray, w2: np.ndarray, feature: np.ndarray,
                 b1: np.ndarray | None = None,
                 b2: np.ndarray | None = None) -> np.ndarray:
    """p = softmax(GELU(feature @ W1) @ W2); exactly one GELU, bias-free
    unless the ablation flag supplied bias vectors."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.ndim != 1 or feature.shape[0] != w1.shape[0]:
        raise ValueError(f"feature dim {feature.shape} does not match W1 {w1.shape}")
    u = kernels.matmul(feature.reshape(1, -1), w1)
    if b1 is not None:
        u = u + b1
    g = kernels.gelu_mat(u)
    z = kernels.matmul(g, w2)
    if b2 is not None:
        z = z + b2
    return kernels.softmax_rows(z)[0]


@dataclass
class GateSet:
    """Per-layer gate weights keyed by the joint-prefix length they trigger
    (gate j reads layer j-1's output and removes visual rows before layer
    j runs). No parameter sharing across layers."""

    selector: StatusSelector
    hidden_dim: int
    layer_range: tuple[int, int]  # inclusive joint-count range
    w1: dict[int, np.ndarray] = field(default_factory=dict)
    w2: dict[int, np.ndarray] = field(default_factory=dict)
    b1: dict[int, np.ndarray] = field(default_factory=dict)
    b2: dict[int, np.ndarray] = field(default_factory=dict)
    use_bias: bool = False
    threshold: float = 0.5

    def gated_layers(self) -> list[int]:
        return list(range(self.layer_range[0], self.layer_range[1] + 1))

    def forward(self, joint_count: int, feature: np.ndarray) -> np.ndarray:
        return gate_forward(self.w1[joint_count], self.w2[joint_count], feature,
                            self.b1.get(joint_count) if self.use_bias else None,
                            self.b2.get(joint_count) if self.use_bias else None)

    def decide(self, p: np.ndarray) -> bool:
        return bool(p[1] > self.threshold)


def default_layer_range(config: ModelConfig) -> tuple[int, int]:
    # all joint counts but the embedding-adjacent 0 and the no-op L
    return (1, config.num_layers - 1)


def init_gates(config: ModelConfig, selector: StatusSelector, hidden_dim: int,
               rng, layer_range: tuple[int, int] | None = None,
               use_bias: bool = False, threshold: float = 0.5) -> GateSet:
    if layer_range is None:
        layer_range = default_layer_range(config)
    lo, hi = layer_range
    if not (0 <= lo <= hi <= config.num_layers):
        raise ValueError(f"gate layer range {layer_range} invalid for L={config.num_layers}")
    f = selector.feature_dim(config.hidden_dim)
    gates = GateSet(selector=selector, hidden_dim=hidden_dim,
                    layer_range=layer_range, use_bias=use_bias,
                    threshold=threshold)
    for j in range(lo, hi + 1):
        gates.w1[j] = rng.normal_matrix(f, hidden_dim, scale=1.0 / math.sqrt(f))
        gates.w2[j] = rng.normal_matrix(hidden_dim, 2, scale=1.0 / math.sqrt(hidden_dim))
        if use_bias:
            gates.b1[j] = np.zeros(hidden_dim)
            gates.b2[j] = np.zeros(2)
    return gates


def save_gates(path, gates: GateSet) -> None:
    meta = {
        "selector": gates.selector.spec_string(),
        "attn_feature_dim": gates.selector.attn_feature_dim,
        "hidden_dim": gates.hidden_dim,
        "layer_range": list(gates.layer_range),
        "use_bias": gates.use_bias,
        "threshold": gates.threshold,
    }
    arrays = []
    for j in gates.gated_layers():
        arrays.append((f"gate.{j}.w1", gates.w1[j]))
        arrays.append((f"gate.{j}.w2", gates.w2[j]))
        if gates.use_bias:
            arrays.append((f"gate.{j}.b1", gates.b1[j]))
            arrays.append((f"gate.{j}.b2", gates.b2[j]))
    write_checkpoint(path, "gates", meta, arrays)


def load_gates(path) -> GateSet:
    header, arrays = read_checkpoint(path, expect_kind="gates")
    meta = header["meta"]
    selector = StatusSelector.parse(meta["selector"],
                                    attn_feature_dim=meta["attn_feature_dim"])
    gates = GateSet(selector=selector, hidden_dim=meta["hidden_dim"],
                    layer_range=tuple(meta["layer_range"]),
                    use_bias=meta["use_bias"], threshold=meta["threshold"])
    for j in gates.gated_layers():
        gates.w1[j] = arrays[f"gate.{j}.w1"]
        gates.w2[j] = arrays[f"gate.{j}.w2"]
        if gates.use_bias:
            gates.b1[j] = arrays[f"gate.{j}.b1"]
            gates.b2[j] = arrays[f"gate.{j}.b2"]
    return gates


def gate_policy(gates: GateSet):
    """Adapter turning a GateSet into a prefill exit policy."""
    lo, hi = gates.layer_range

    def policy(joint_count: int, text_states: np.ndarray,
               visual_states: np.ndarray, attn_mean: np.ndarray,
               n_visual: int) -> bool:
        if not (lo <= joint_count <= hi):
            return False
        feature = token_status(gates.selector, text_states, visual_states,
                               attn_mean, n_visual)
        return gates.decide(gates.forward(joint_count, feature))

    return policy


@dataclass
class GatedRunResult:
    answer_ids: list[int]
    answer_nlls: list[float]
    exit_layer: int | None
    prefill_flops: int
    live_counts: list[int]
    prefill: PrefillResult


def run_with_gates(config: ModelConfig, weights: dict[str, np.ndarray],
                   gates: GateSet | None, visual_embeds: np.ndarray, text_ids,
                   *, n_answer_tokens: int = 1, exit_at: int | None = None,
                   visual_keep_hook=None, collect_trace: bool = False
                   ) -> GatedRunResult:
    """Prefill under the gate policy (or a manual exit), then greedy decode.

    A no-fire run is a valid outcome and simply pays the full prefill cost.
    """
    policy = gate_policy(gates) if gates is not None and exit_at is None else None
    res = prefill(config, weights, visual_embeds, text_ids, exit_at=exit_at,
                  exit_policy=policy, visual_keep_hook=visual_keep_hook,
                  collect_trace=collect_trace)
    ids, nlls = greedy_decode(config, weights, res, n_answer_tokens)
    return GatedRunResult(
        answer_ids=ids, answer_nlls=nlls, exit_layer=res.exit_layer,
        prefill_flops=flops_from_live_counts(config, res.live_counts),
        live_counts=res.live_counts, prefill=res)


def prediction_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) in bits between two vocabulary distributions; the
    declared distance between exited and non-exited predictions."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError("need two equal-length probability vectors")
    for name, v in (("p", p), ("q", q)):
        if np.any(v < 0) or abs(float(v.sum()) - 1.0) > 1e-6:
            raise ValueError(f"{name} is not a probability vector")
    mask = p > 0
    if np.any(q[mask] == 0):
        return float("inf")
    return float(np.sum(p[mask] * np.log2(p[mask] / q[mask])))
