"""Fixed-layer exit sweeps, attention-rank visual-token pruning, and the
pruning + gated-exit combination.

The pruning baseline scores each live visual token at a chosen layer by
the mean attention it receives from later-position queries and keeps the
top ceil(r * n_v); ties break toward the lower token index so runs are
reproducible. It is a FastV-style rule, not a replication of any specific
release.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .flopcount import flops_from_live_counts
from .gate import GatedRunResult, GateSet, run_with_gates
from .synthdata import SynthSample


def manual_exit(config: ModelConfig, weights, visual_embeds, text_ids, l: int,
                *, n_answer_tokens: int = 1, collect_trace: bool = False
                ) -> GatedRunResult:
    """Remove all visual rows at joint-prefix length ``l`` (0 = before any
    layer, num_layers = never). Identical code path to a gate forced to
    fire at ``l``."""
    return run_with_gates(config, weights, None, visual_embeds, text_ids,
                          n_answer_tokens=n_answer_tokens, exit_at=l,
                          collect_trace=collect_trace)


def prune_scores(attn_mean: np.ndarray, n_visual: int) -> np.ndarray:
    """Mean attention received by each live visual token from all
    later-position queries at this layer."""
    n = attn_mean.shape[0]
    return np.array([attn_mean[j + 1:, j].mean() if j + 1 < n else 0.0
                     for j in range(n_visual)])


def prune_keep_indices(attn_mean: np.ndarray, n_visual: int,
                       keep_ratio: float) -> np.ndarray:
    """Top ceil(r * n_v) visual rows by received attention; lower index
    wins ties; original row order preserved."""
    keep_n = math.ceil(keep_ratio * n_visual)
    if keep_n >= n_visual:
        return np.arange(n_visual, dtype=np.int64)
    scores = prune_scores(attn_mean, n_visual)
    ranked = np.argsort(-scores, kind="stable")  # stable sort = index tie-break
    return np.sort(ranked[:keep_n])


def prune_hook(prune_layer: int, keep_ratio: float):
    def hook(layer: int, attn_mean: np.ndarray, n_visual: int):
        if layer != prune_layer:
            return None
        return prune_keep_indices(attn_mean, n_visual, keep_ratio)

    return hook


def attn_rank_prune(config: ModelConfig, weights, visual_embeds, text_ids,
                    prune_layer: int, keep_ratio: float, *,
                    n_answer_tokens: int = 1) -> GatedRunResult:
    """Drop low-attention visual tokens after ``prune_layer``'s output."""
    if not (0.0 <= keep_ratio <= 1.0):
        raise ValueError("keep_ratio must lie in [0, 1]")
    if not (0 <= prune_layer < config.num_layers):
        raise ValueError("prune_layer out of range")
    return run_with_gates(config, weights, None, visual_embeds, text_ids,
                          n_answer_tokens=n_answer_tokens,
                          visual_keep_hook=prune_hook(prune_layer, keep_ratio))


def combined(config: ModelConfig, weights, gates: GateSet, visual_embeds,
             text_ids, prune_layer: int, keep_ratio: float, *,
             n_answer_tokens: int = 1) -> GatedRunResult:
    """Pruning at ``prune_layer`` first; the gates keep evaluating at every
    later layer and may remove the surviving visual rows entirely. If the
    gates fire before the prune layer, pruning is a no-op."""
    if not (0.0 <= keep_ratio <= 1.0):
        raise ValueError("keep_ratio must lie in [0, 1]")
    return run_with_gates(config, weights, gates, visual_embeds, text_ids,
                          n_answer_tokens=n_answer_tokens,
                          visual_keep_hook=prune_hook(prune_layer, keep_ratio))


@dataclass(frozen=True)
class SweepPoint:
    layer_or_ratio: float
    accuracy: float
    flops: int


def manual_exit_sweep(config: ModelConfig, weights,
                      samples: list[SynthSample], embed_table: np.ndarray,
                      layers: list[int]) -> list[SweepPoint]:
    """Accuracy and prefill FLOPs for fixed exits; feeds the sweep CSV."""
    from . import toytrain
    from .flopcount import total_flops

    batch = toytrain.batch_from_samples(samples, embed_table)
    t = batch.ids.shape[1]
    points = []
    for l in layers:
        exit_at = None if l >= config.num_layers else l
        logits = toytrain.batched_logits(config, weights, batch.vis, batch.ids,
                                         exit_at=exit_at)
        acc = float(np.mean(np.argmax(logits, axis=-1) == batch.answers))
        flops = total_flops(config, l, t).total_with_exit
        points.append(SweepPoint(layer_or_ratio=float(l), accuracy=acc,
                                 flops=flops))
    return points


def write_sweep_csv(points: list[SweepPoint], path) -> None:
    with open(path, "w") as f:
        f.write("# schema: vtexit.sweep.v1\n")
        f.write("layer_or_ratio,accuracy,flops\n")
        for pt in points:
            f.write(f"{pt.layer_or_ratio!r},{pt.accuracy!r},{pt.flops}\n")
