"""Block statistics, entropy, and stage segmentation oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtexit.attnstats import (AttentionBlockStats, block_stats,
                              entropy_profile, segment_stages,
                              write_entropy_csv, write_stats_csv)
from vtexit.config import ModelConfig
from vtexit.model import Trace, init_weights, prefill
from vtexit.rng import SeededRng


def trace_from(matrices, n_visual):
    return Trace(attn=[np.asarray(m, dtype=np.float64) for m in matrices],
                 positions=[np.arange(len(m)) for m in matrices],
                 n_visual=[n_visual] * len(matrices))


def causal_uniform(n):
    m = np.zeros((n, n))
    for i in range(n):
        m[i, : i + 1] = 1.0 / (i + 1)
    return m


def stats_with_cross(values):
    return [AttentionBlockStats(layer=i, vis_self_mean=0.0, vis_self_var=0.0,
                                cross_mean=v, cross_var=0.0,
                                text_self_mean=0.0, text_self_var=0.0)
            for i, v in enumerate(values)]


def test_hand_built_4_token_stats():
    # 2 visual + 2 text tokens, hand-filled causal attention
    attn = np.array([
        [1.0, 0.0, 0.0, 0.0],
        [0.3, 0.7, 0.0, 0.0],
        [0.2, 0.3, 0.5, 0.0],
        [0.1, 0.1, 0.4, 0.4],
    ])
    s = block_stats(trace_from([attn], 2), 2)[0]
    vis_cells = [1.0, 0.3, 0.7]
    cross_cells = [0.2, 0.3, 0.1, 0.1]
    text_cells = [0.5, 0.4, 0.4]
    assert s.vis_self_mean == pytest.approx(np.mean(vis_cells))
    assert s.vis_self_var == pytest.approx(np.var(vis_cells))
    assert s.cross_mean == pytest.approx(np.mean(cross_cells))
    assert s.cross_var == pytest.approx(np.var(cross_cells))
    assert s.text_self_mean == pytest.approx(np.mean(text_cells))
    assert s.text_self_var == pytest.approx(np.var(text_cells))


def test_uniform_prefix_cross_mean():
    n_v, t = 4, 3
    n = n_v + t
    attn = np.zeros((n, n))
    attn[:n_v] = causal_uniform(n)[:n_v]
    for i in range(n_v, n):
        attn[i, :n_v] = 1.0 / n_v  # uniform over the n_v visual keys
        attn[i, n_v: i + 1] = 0.0
    s = block_stats(trace_from([attn], n_v), n_v)[0]
    assert s.cross_mean == pytest.approx(1.0 / n_v)
    assert s.cross_var == pytest.approx(0.0, abs=1e-15)


def test_block_masses_sum_to_row_mass():
    config = ModelConfig(num_layers=3, hidden_dim=16, num_heads=2, ffn_dim=32,
                         vocab_size=9, num_visual=5, max_text=6)
    weights = init_weights(config, SeededRng(0))
    r = SeededRng(1)
    vis = r.normal_matrix(5, 16, 0.4)
    res = prefill(config, weights, vis, [1, 2, 3, 4])
    for attn, nv in zip(res.trace.attn, res.trace.n_visual):
        for qi in range(nv, attn.shape[0]):
            total = attn[qi, :nv].sum() + attn[qi, nv:].sum()
            assert total == pytest.approx(1.0, abs=1e-6)


def test_absent_blocks_when_no_visual():
    attn = causal_uniform(3)
    s = block_stats(trace_from([attn], 0), 0)[0]
    assert s.vis_self_mean is None and s.cross_mean is None
    assert s.text_self_mean is not None


def test_entropy_one_hot_and_uniform():
    n_v, t = 4, 2
    n = n_v + t
    one_hot = np.zeros((n, n))
    for i in range(n):
        one_hot[i, max(0, i - 1)] = 1.0  # one-hot rows
    prof = entropy_profile(trace_from([one_hot], n_v), n_v)[0]
    assert prof.cross_entropy_bits == pytest.approx(0.0)
    assert prof.text_self_entropy_bits == pytest.approx(0.0)

    uni = np.zeros((n, n))
    for i in range(n_v, n):
        uni[i, :n_v] = 0.5 / n_v
        uni[i, n_v:i + 1] = 0.5 / (i + 1 - n_v)
    uni[:n_v] = causal_uniform(n)[:n_v]
    prof = entropy_profile(trace_from([uni], n_v), n_v)[0]
    assert prof.cross_entropy_bits == pytest.approx(math.log2(n_v))
    # text queries attend 1 resp. 2 text keys uniformly
    assert prof.text_self_entropy_bits == pytest.approx((0.0 + 1.0) / 2)


def test_entropy_matches_direct_formula():
    r = SeededRng(7)
    n_v, t = 5, 4
    n = n_v + t
    raw = np.abs(r.normal_matrix(n, n)) + 0.01
    attn = np.tril(raw)
    attn /= attn.sum(axis=1, keepdims=True)
    prof = entropy_profile(trace_from([attn], n_v), n_v)[0]
    cross_vals, text_vals = [], []
    for qi in range(n_v, n):
        sub = attn[qi, :n_v]
        p = sub / sub.sum()
        cross_vals.append(-(p * np.log2(p)).sum())
        sub = attn[qi, n_v:qi + 1]
        p = sub / sub.sum()
        text_vals.append(-(p * np.log2(p)).sum())
    assert prof.cross_entropy_bits == pytest.approx(np.mean(cross_vals), abs=1e-9)
    assert prof.text_self_entropy_bits == pytest.approx(np.mean(text_vals), abs=1e-9)


def test_entropy_zero_mass_query_contributes_zero():
    n_v, t = 3, 2
    n = n_v + t
    attn = np.zeros((n, n))
    attn[:n_v] = causal_uniform(n)[:n_v]
    attn[n_v, n_v] = 1.0  # text query with zero visual mass
    attn[n_v + 1, :n_v] = 1.0 / n_v
    prof = entropy_profile(trace_from([attn], n_v), n_v)[0]
    assert prof.cross_entropy_bits == pytest.approx(math.log2(n_v) / 2)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10**9))
def test_entropy_permutation_invariant_over_keys(seed):
    r = SeededRng(seed)
    n_v, t = 6, 3
    n = n_v + t
    raw = np.abs(r.normal_matrix(n, n)) + 0.01
    attn = np.tril(raw)
    attn /= attn.sum(axis=1, keepdims=True)
    perm = np.array(SeededRng(seed + 1).permutation(n_v))
    shuffled = attn.copy()
    shuffled[:, :n_v] = attn[:, perm]
    a = entropy_profile(trace_from([attn], n_v), n_v)[0]
    b = entropy_profile(trace_from([shuffled], n_v), n_v)[0]
    assert a.cross_entropy_bits == pytest.approx(b.cross_entropy_bits, abs=1e-12)


def test_segmentation_hand_trace():
    seg = segment_stages(stats_with_cross([0.9, 0.8, 0.1, 0.1, 0.3, 0.4]),
                         theta1=0.5, theta2=2.0)
    assert (seg.boundary_1, seg.boundary_2) == (2, 4)
    assert not seg.degenerate


def test_segmentation_monotone_decreasing_is_degenerate():
    seg = segment_stages(stats_with_cross([0.9, 0.5, 0.3, 0.2, 0.15, 0.1]))
    assert seg.boundary_1 == 2
    assert seg.boundary_2 == 5
    assert seg.degenerate


def test_segmentation_constant_profile():
    seg = segment_stages(stats_with_cross([0.4] * 6))
    assert (seg.boundary_1, seg.boundary_2) == (1, 5)
    assert seg.degenerate


def test_segmentation_orders_boundaries():
    for seed in range(30):
        r = SeededRng(seed)
        vals = [r.uniform() for _ in range(8)]
        seg = segment_stages(stats_with_cross(vals))
        assert 0 < seg.boundary_1 < seg.boundary_2 < 8
    with pytest.raises(ValueError):
        segment_stages(stats_with_cross([0.1, 0.2, 0.3]))


def test_csv_outputs_carry_schema(tmp_path):
    attn = causal_uniform(4)
    stats = block_stats(trace_from([attn], 2), 2)
    prof = entropy_profile(trace_from([attn], 2), 2)
    spath, epath = tmp_path / "stats.csv", tmp_path / "entropy.csv"
    write_stats_csv(stats, spath)
    write_entropy_csv([(prof[0], False), (prof[0], True)], epath)
    assert spath.read_text().startswith("# schema: vtexit.stats.v1")
    lines = epath.read_text().splitlines()
    assert lines[0] == "# schema: vtexit.entropy.v1"
    assert any(line.endswith(",true") for line in lines)
