"""Block-wise attention statistics, entropy profiles, and the three-stage
segmentation of the per-layer cross-attention curve.

Blocks are defined on the causal [visual | text] layout: visual self
(visual queries onto visual keys), cross (text queries onto visual keys),
and text self (text queries onto text keys). Only causal-valid cells enter
any statistic; masked cells are structurally zero and would bias means.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import Trace

MASS_FLOOR = 1e-12


@dataclass(frozen=True)
class AttentionBlockStats:
    layer: int
    vis_self_mean: float | None
    vis_self_var: float | None
    cross_mean: float | None
    cross_var: float | None
    text_self_mean: float | None
    text_self_var: float | None


@dataclass(frozen=True)
class EntropyProfile:
    layer: int
    cross_entropy_bits: float
    text_self_entropy_bits: float


@dataclass(frozen=True)
class StageSegmentation:
    boundary_1: int  # last layer of early fusion is boundary_1 - 1
    boundary_2: int  # multimodal reasoning resumes here
    degenerate: bool


def _mean_var(cells: np.ndarray) -> tuple[float, float]:
    # population variance over the block's causal-valid cells
    return float(cells.mean()), float(cells.var())


def block_stats(trace: Trace, n_v: int) -> list[AttentionBlockStats]:
    """Per-layer mean/variance of each attention block.

    Blocks with no live cells at a layer (no visual rows, or n_v == 0)
    are reported as absent (None)."""
    out = []
    for layer, (attn, pos, live_vis) in enumerate(
            zip(trace.attn, trace.positions, trace.n_visual)):
        n = attn.shape[0]
        n_text = n - live_vis
        if n_text < 1:
            raise ValueError(f"layer {layer}: trace has no text rows")
        vis_mean = vis_var = cross_mean = cross_var = None
        if live_vis > 0:
            vis_cells = attn[:live_vis, :live_vis][
                np.tril_indices(live_vis)]
            vis_mean, vis_var = _mean_var(vis_cells)
            cross_mean, cross_var = _mean_var(attn[live_vis:, :live_vis])
        tt = attn[live_vis:, live_vis:]
        text_cells = tt[np.tril_indices(n_text)]
        text_mean, text_var = _mean_var(text_cells)
        out.append(AttentionBlockStats(
            layer=layer, vis_self_mean=vis_mean, vis_self_var=vis_var,
            cross_mean=cross_mean, cross_var=cross_var,
            text_self_mean=text_mean, text_self_var=text_var))
    return out


def _row_entropy_bits(row: np.ndarray) -> float:
    mass = float(row.sum())
    if mass < MASS_FLOOR:
        return 0.0
    p = row / mass
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def entropy_profile(trace: Trace, n_v: int) -> list[EntropyProfile]:
    """Mean per-text-query entropy of the renormalized cross and text-self
    sub-distributions, in bits. Queries whose sub-block mass is below
    1e-12 contribute zero; with no visual keys alive the cross term is 0."""
    out = []
    for layer, (attn, live_vis) in enumerate(zip(trace.attn, trace.n_visual)):
        n = attn.shape[0]
        n_text = n - live_vis
        if n_text < 1:
            raise ValueError(f"layer {layer}: trace has no text rows")
        cross_ent = 0.0
        text_ent = 0.0
        for qi in range(live_vis, n):
            if live_vis > 0:
                cross_ent += _row_entropy_bits(attn[qi, :live_vis])
            text_ent += _row_entropy_bits(attn[qi, live_vis:qi + 1])
        out.append(EntropyProfile(
            layer=layer,
            cross_entropy_bits=cross_ent / n_text,
            text_self_entropy_bits=text_ent / n_text))
    return out


def segment_stages(stats: list[AttentionBlockStats], theta1: float = 0.5,
                   theta2: float = 2.0) -> StageSegmentation:
    """Threshold rule on the cross-attention mean: stage 1 ends at the
    first layer falling below theta1 x the running maximum; stage 2 ends
    at the first later layer rebounding above theta2 x the stage-2
    minimum. Undetectable boundaries degrade to (1, L-1) with a flag."""
    L = len(stats)
    if L < 4:
        raise ValueError("need at least 4 layers to segment")
    cross = []
    for s in stats:
        if s.cross_mean is None:
            raise ValueError(f"layer {s.layer}: cross block absent; cannot segment")
        cross.append(s.cross_mean)

    degenerate = False
    boundary_1 = None
    run_max = cross[0]
    for k in range(1, L):
        if cross[k] < theta1 * run_max:
            boundary_1 = k
            break
        run_max = max(run_max, cross[k])
    if boundary_1 is None:
        boundary_1 = 1
        degenerate = True

    boundary_2 = None
    stage_min = cross[boundary_1]
    for k in range(boundary_1 + 1, L):
        if cross[k] > theta2 * stage_min:
            boundary_2 = k
            break
        stage_min = min(stage_min, cross[k])
    if boundary_2 is None:
        boundary_2 = L - 1
        degenerate = True
    if boundary_1 >= boundary_2:  # keep 0 < b1 < b2 < L even when flat
        boundary_1 = max(1, boundary_2 - 1)
        degenerate = True
    return StageSegmentation(boundary_1, boundary_2, degenerate)


def write_stats_csv(stats: list[AttentionBlockStats], path) -> None:
    with open(path, "w") as f:
        f.write("# schema: vtexit.stats.v1\n")
        f.write("layer,block,mean,var\n")
        for s in stats:
            for block, mean, var in (
                    ("visual_self", s.vis_self_mean, s.vis_self_var),
                    ("cross", s.cross_mean, s.cross_var),
                    ("text_self", s.text_self_mean, s.text_self_var)):
                if mean is not None:
                    f.write(f"{s.layer},{block},{mean!r},{var!r}\n")


def write_entropy_csv(rows: list[tuple[EntropyProfile, bool]], path) -> None:
    """Rows are (profile, exited) pairs so with/without-exit runs can share
    one file."""
    with open(path, "w") as f:
        f.write("# schema: vtexit.entropy.v1\n")
        f.write("layer,metric,value,exited\n")
        for prof, exited in rows:
            flag = "true" if exited else "false"
            f.write(f"{prof.layer},cross,{prof.cross_entropy_bits!r},{flag}\n")
            f.write(f"{prof.layer},text_self,{prof.text_self_entropy_bits!r},{flag}\n")


def mean_stats(per_sample: list[list[AttentionBlockStats]]) -> list[AttentionBlockStats]:
    """Average block statistics across samples (layer-aligned); blocks
    absent in any sample stay absent."""
    if not per_sample:
        raise ValueError("no samples")
    L = len(per_sample[0])
    out = []
    for k in range(L):
        fields = {}
        for name in ("vis_self_mean", "vis_self_var", "cross_mean",
                     "cross_var", "text_self_mean", "text_self_var"):
            vals = [getattr(s[k], name) for s in per_sample]
            fields[name] = None if any(v is None for v in vals) else float(np.mean(vals))
        out.append(AttentionBlockStats(layer=k, **fields))
    return out


def mean_entropy(per_sample: list[list[EntropyProfile]]) -> list[EntropyProfile]:
    if not per_sample:
        raise ValueError("no samples")
    L = len(per_sample[0])
    return [EntropyProfile(
        layer=k,
        cross_entropy_bits=float(np.mean([s[k].cross_entropy_bits for s in per_sample])),
        text_self_entropy_bits=float(np.mean([s[k].text_self_entropy_bits for s in per_sample])),
    ) for k in range(L)]
