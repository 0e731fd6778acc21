"""Minimal decoder-only multimodal transformer.

Sequence layout is always [visual | text] under causal self-attention.
Pre-norm residual blocks: x += Attn(LN1(x)); x += FFN(LN2(x)). Positions
are learned absolute embeddings added once at input, so token identity
survives any later row removal.

Visual-token exit is parameterised by the *joint-prefix length* ``l``:
layers ``0 .. l-1`` process the full [visual | text] sequence and visual
rows are deleted as the sequence enters layer ``l`` (``l = 0`` means the
text rows never see visual ones, ``l = num_layers`` means no exit). KV
rows cached by layers below ``l`` keep their visual entries — that is what
physically deleting rows at layer ``l`` leaves behind — so decode steps
attend visual keys below the exit layer and never at or above it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels
from .ckpt import read_checkpoint, write_checkpoint
from .config import ModelConfig

NEG_INF = float("-inf")

ExitPolicy = Callable[..., bool]
VisualKeepHook = Callable[[int, np.ndarray, int], "np.ndarray | None"]
OpHook = Callable[[str, int, int, int], None]


@dataclass
class Trace:
    """Per-layer attention record from one prefill.

    ``attn[k]`` is the heads-averaged attention matrix over the rows that
    were alive at layer ``k``; ``positions[k]`` maps live row index to the
    original sequence position; ``n_visual[k]`` counts live visual rows.
    """

    attn: list[np.ndarray]
    positions: list[np.ndarray]
    n_visual: list[int]

    def num_layers(self) -> int:
        return len(self.attn)


@dataclass
class KvCache:
    """Per-layer key/value rows over the live token set (single-owner)."""

    config: ModelConfig
    k: list[np.ndarray]
    v: list[np.ndarray]
    n_visual: list[int]
    next_pos: int
    exited_at: int | None


@dataclass
class PrefillResult:
    text_logits: np.ndarray  # (t, vocab) final logits at every text position
    logits: np.ndarray  # (vocab,) last position
    trace: Trace | None
    cache: KvCache
    exit_layer: int | None  # joint-prefix length when visual rows were removed
    live_counts: list[int]  # rows processed by each layer (FLOPs accounting)
    text_states: list[np.ndarray] | None  # per-layer output text states (t, d)
    visual_states: list[np.ndarray] | None  # per-layer output visual states


def param_specs(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Canonical parameter order: (name, shape, init) with init in
    {normal/<scale>, ones, zeros}. Serialization and optimizers follow
    this order exactly."""
    d, dff, v = config.hidden_dim, config.ffn_dim, config.vocab_size
    s_d = f"normal/{1.0 / math.sqrt(d)}"
    s_ff = f"normal/{1.0 / math.sqrt(dff)}"
    specs: list[tuple[str, tuple[int, ...], str]] = [
        ("tok_emb", (v, d), "normal/0.1"),
        ("pos_emb", (config.max_seq, d), "normal/0.1"),
    ]
    for i in range(config.num_layers):
        p = f"layers.{i}."
        specs += [
            (p + "ln1_g", (d,), "ones"),
            (p + "ln1_b", (d,), "zeros"),
            (p + "wq", (d, d), s_d),
            (p + "wk", (d, d), s_d),
            (p + "wv", (d, d), s_d),
            (p + "wo", (d, d), s_d),
            (p + "ln2_g", (d,), "ones"),
            (p + "ln2_b", (d,), "zeros"),
            (p + "w_ff1", (d, dff), s_d),
            (p + "w_ff2", (dff, d), s_ff),
        ]
    specs += [
        ("ln_f_g", (d,), "ones"),
        ("ln_f_b", (d,), "zeros"),
        ("w_out", (d, v), s_d),
    ]
    return specs


def init_weights(config: ModelConfig, rng) -> dict[str, np.ndarray]:
    """Fresh weights drawn from a single seeded stream in canonical order."""
    weights: dict[str, np.ndarray] = {}
    for name, shape, init in param_specs(config):
        if init == "ones":
            weights[name] = np.ones(shape, dtype=np.float64)
        elif init == "zeros":
            weights[name] = np.zeros(shape, dtype=np.float64)
        else:
            scale = float(init.split("/")[1])
            rows, cols = shape if len(shape) == 2 else (1, shape[0])
            m = rng.normal_matrix(rows, cols, scale)
            weights[name] = m.reshape(shape)
    return weights


def save_model(path, config: ModelConfig, weights: dict[str, np.ndarray]) -> None:
    arrays = [(name, weights[name]) for name, _, _ in param_specs(config)]
    write_checkpoint(path, "model", {"config": config.to_dict()}, arrays)


def load_model(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    header, arrays = read_checkpoint(path, expect_kind="model")
    config = ModelConfig.from_dict(header["meta"]["config"])
    for name, shape, _ in param_specs(config):
        if name not in arrays or arrays[name].shape != shape:
            raise ValueError(f"checkpoint missing or misshaped parameter {name!r}")
    return config, arrays


def _split_heads(m: np.ndarray, num_heads: int) -> np.ndarray:
    n, d = m.shape
    hd = d // num_heads
    return np.ascontiguousarray(m.reshape(n, num_heads, hd).transpose(1, 0, 2))


def _layer_step(x: np.ndarray, w: dict[str, np.ndarray], prefix: str,
                config: ModelConfig, addmask: np.ndarray | None,
                op_hook: OpHook | None):
    """One pre-norm block over all live rows.

    Returns (new_x, heads-averaged attention, full-width K, full-width V).
    ``addmask`` is added to every head's scores before the softmax; causal
    and cross-modal masking both enter through it.
    """
    n = x.shape[0]
    h = kernels.layer_norm_rows(x, w[prefix + "ln1_g"], w[prefix + "ln1_b"])
    q = kernels.matmul(h, w[prefix + "wq"])
    k = kernels.matmul(h, w[prefix + "wk"])
    v = kernels.matmul(h, w[prefix + "wv"])
    if op_hook:
        d = config.hidden_dim
        for _ in range(3):
            op_hook("proj", n, d, d)
    hd = config.head_dim
    scale = 1.0 / math.sqrt(hd)
    qh = _split_heads(q, config.num_heads)
    kh = _split_heads(k, config.num_heads)
    vh = _split_heads(v, config.num_heads)
    ctx = np.empty_like(q)
    attn_sum = np.zeros((n, n), dtype=np.float64)
    for head in range(config.num_heads):
        scores = kernels.matmul_nt(qh[head] * scale, kh[head])
        if op_hook:
            op_hook("scores", n, hd, n)
        if addmask is not None:
            scores = scores + addmask
        probs = kernels.softmax_rows(scores)
        attn_sum += probs
        ctx[:, head * hd:(head + 1) * hd] = kernels.matmul(probs, vh[head])
        if op_hook:
            op_hook("mix", n, n, hd)
    out = kernels.matmul(ctx, w[prefix + "wo"])
    if op_hook:
        op_hook("proj", n, config.hidden_dim, config.hidden_dim)
    x = x + out
    h2 = kernels.layer_norm_rows(x, w[prefix + "ln2_g"], w[prefix + "ln2_b"])
    f = kernels.gelu_mat(kernels.matmul(h2, w[prefix + "w_ff1"]))
    x = x + kernels.matmul(f, w[prefix + "w_ff2"])
    if op_hook:
        op_hook("ffn", n, config.hidden_dim, config.ffn_dim)
        op_hook("ffn", n, config.ffn_dim, config.hidden_dim)
    return x, attn_sum / config.num_heads, k, v


def _build_mask(n: int, n_visual: int, cross_masked: bool) -> np.ndarray:
    """Additive pre-softmax mask: causal, plus text->visual block when the
    layer is structurally cross-masked. Masking before the softmax is what
    makes removed visual keys carry exactly zero probability mass."""
    mask = np.zeros((n, n), dtype=np.float64)
    iu = np.triu_indices(n, k=1)
    mask[iu] = NEG_INF
    if cross_masked and n_visual > 0:
        mask[n_visual:, :n_visual] = NEG_INF
    return mask


def _validate_inputs(config: ModelConfig, visual_embeds: np.ndarray,
                     text_ids) -> np.ndarray:
    text_ids = np.asarray(text_ids, dtype=np.int64)
    if visual_embeds.shape != (config.num_visual, config.hidden_dim):
        raise ValueError(
            f"visual_embeds must be {(config.num_visual, config.hidden_dim)}, "
            f"got {visual_embeds.shape}")
    if not np.all(np.isfinite(visual_embeds)):
        raise ValueError("visual_embeds must be finite")
    if text_ids.ndim != 1 or len(text_ids) < 1:
        raise ValueError("text_ids must be a non-empty 1-D sequence")
    if len(text_ids) > config.max_text:
        raise ValueError(f"text length {len(text_ids)} exceeds max_text {config.max_text}")
    if np.any(text_ids < 0) or np.any(text_ids >= config.vocab_size):
        raise ValueError("text_ids out of vocabulary range")
    return text_ids


def prefill(config: ModelConfig, weights: dict[str, np.ndarray],
            visual_embeds: np.ndarray, text_ids, *,
            exit_at: int | None = None,
            exit_policy: ExitPolicy | None = None,
            visual_keep_hook: VisualKeepHook | None = None,
            collect_trace: bool = True,
            collect_states: bool = False,
            op_hook: OpHook | None = None) -> PrefillResult:
    """Full causal forward over [visual | text].

    ``exit_at`` removes all visual rows as the sequence enters that layer
    index. ``exit_policy`` is consulted after each layer's output while
    visual rows are alive; the first firing triggers the same removal.
    Providing both is rejected: an exit happens at most once per sequence.
    """
    if exit_at is not None:
        if exit_policy is not None:
            raise ValueError("exit already scheduled; a sequence exits at most once")
        if not (0 <= exit_at <= config.num_layers):
            raise ValueError(f"exit_at must lie in [0, {config.num_layers}]")
    text_ids = _validate_inputs(config, visual_embeds, text_ids)
    n_vis = config.num_visual
    t = len(text_ids)
    n = n_vis + t
    w = weights

    x = np.empty((n, config.hidden_dim), dtype=np.float64)
    x[:n_vis] = visual_embeds
    x[n_vis:] = w["tok_emb"][text_ids]
    x += w["pos_emb"][:n]
    positions = np.arange(n, dtype=np.int64)

    live_vis = n_vis
    exited: int | None = None
    cache = KvCache(config=config, k=[], v=[], n_visual=[], next_pos=n,
                    exited_at=None)
    trace = Trace(attn=[], positions=[], n_visual=[]) if collect_trace else None
    text_states: list[np.ndarray] | None = [] if collect_states else None
    visual_states: list[np.ndarray] | None = [] if collect_states else None
    live_counts: list[int] = []
    onset = config.cross_attn_zero_from

    for layer in range(config.num_layers):
        if exited is None and exit_at == layer:
            x = np.ascontiguousarray(x[live_vis:])
            positions = positions[live_vis:]
            live_vis = 0
            exited = layer
        rows = x.shape[0]
        live_counts.append(rows)
        mask = _build_mask(rows, live_vis, onset is not None and layer >= onset)
        prefix = f"layers.{layer}."
        x, attn_mean, k_full, v_full = _layer_step(x, w, prefix, config, mask, op_hook)
        cache.k.append(k_full)
        cache.v.append(v_full)
        cache.n_visual.append(live_vis)
        if trace is not None:
            trace.attn.append(attn_mean)
            trace.positions.append(positions.copy())
            trace.n_visual.append(live_vis)
        if text_states is not None:
            text_states.append(x[live_vis:].copy())
            visual_states.append(x[:live_vis].copy())

        if visual_keep_hook is not None and live_vis > 0:
            keep = visual_keep_hook(layer, attn_mean, live_vis)
            if keep is not None:
                keep = np.asarray(keep, dtype=np.int64)
                sel = np.concatenate([keep, np.arange(live_vis, x.shape[0])])
                x = np.ascontiguousarray(x[sel])
                positions = positions[sel]
                live_vis = len(keep)
        if exited is None and exit_policy is not None:
            fired = exit_policy(joint_count=layer + 1, text_states=x[live_vis:],
                                visual_states=x[:live_vis], attn_mean=attn_mean,
                                n_visual=live_vis)
            if fired:
                exited = layer + 1
                x = np.ascontiguousarray(x[live_vis:])
                positions = positions[live_vis:]
                live_vis = 0

    if exited is None and exit_at == config.num_layers:
        exited = config.num_layers  # removal after the last layer changes nothing
    cache.exited_at = exited

    xf = kernels.layer_norm_rows(x, w["ln_f_g"], w["ln_f_b"])
    text_logits = kernels.matmul(np.ascontiguousarray(xf[live_vis:]), w["w_out"])
    if op_hook:
        op_hook("lm_head", t, config.hidden_dim, config.vocab_size)
    return PrefillResult(
        text_logits=text_logits, logits=text_logits[-1], trace=trace,
        cache=cache, exit_layer=exited, live_counts=live_counts,
        text_states=text_states, visual_states=visual_states)


def decode_step(config: ModelConfig, weights: dict[str, np.ndarray],
                cache: KvCache, token_id: int, *,
                op_hook: OpHook | None = None) -> tuple[np.ndarray, KvCache]:
    """Append one text token, reusing cached keys/values."""
    if cache.config != config:
        raise ValueError("cache was built for a different config")
    if not (0 <= token_id < config.vocab_size):
        raise ValueError("token_id out of vocabulary range")
    pos = cache.next_pos
    if pos >= config.max_seq:
        raise ValueError("sequence exceeds max positions")
    w = weights
    d, hd = config.hidden_dim, config.head_dim
    scale = 1.0 / math.sqrt(hd)
    onset = config.cross_attn_zero_from

    x = (w["tok_emb"][token_id] + w["pos_emb"][pos]).reshape(1, d)
    for layer in range(config.num_layers):
        prefix = f"layers.{layer}."
        h = kernels.layer_norm_rows(x, w[prefix + "ln1_g"], w[prefix + "ln1_b"])
        q = kernels.matmul(h, w[prefix + "wq"])
        k_new = kernels.matmul(h, w[prefix + "wk"])
        v_new = kernels.matmul(h, w[prefix + "wv"])
        if op_hook:
            for _ in range(3):
                op_hook("proj", 1, d, d)
        k_all = np.concatenate([cache.k[layer], k_new])
        v_all = np.concatenate([cache.v[layer], v_new])
        cache.k[layer] = k_all
        cache.v[layer] = v_all
        n_live = k_all.shape[0]
        n_vis = cache.n_visual[layer]
        ctx = np.empty((1, d), dtype=np.float64)
        for head in range(config.num_heads):
            sl = slice(head * hd, (head + 1) * hd)
            qh = np.ascontiguousarray(q[:, sl])
            kh = np.ascontiguousarray(k_all[:, sl])
            vh = np.ascontiguousarray(v_all[:, sl])
            scores = kernels.matmul_nt(qh * scale, kh)
            if op_hook:
                op_hook("scores", 1, hd, n_live)
            if onset is not None and layer >= onset and n_vis > 0:
                scores[0, :n_vis] = NEG_INF
            probs = kernels.softmax_rows(scores)
            ctx[:, sl] = kernels.matmul(probs, vh)
            if op_hook:
                op_hook("mix", 1, n_live, hd)
        out = kernels.matmul(ctx, w[prefix + "wo"])
        if op_hook:
            op_hook("proj", 1, d, d)
        x = x + out
        h2 = kernels.layer_norm_rows(x, w[prefix + "ln2_g"], w[prefix + "ln2_b"])
        f = kernels.gelu_mat(kernels.matmul(h2, w[prefix + "w_ff1"]))
        x = x + kernels.matmul(f, w[prefix + "w_ff2"])
        if op_hook:
            op_hook("ffn", 1, d, config.ffn_dim)
            op_hook("ffn", 1, config.ffn_dim, d)
    cache.next_pos = pos + 1
    xf = kernels.layer_norm_rows(x, w["ln_f_g"], w["ln_f_b"])
    logits = kernels.matmul(xf, w["w_out"])[0]
    if op_hook:
        op_hook("lm_head", 1, d, config.vocab_size)
    return logits, cache


def greedy_decode(config: ModelConfig, weights: dict[str, np.ndarray],
                  result: PrefillResult, n_tokens: int
                  ) -> tuple[list[int], list[float]]:
    """Greedy continuation; returns token ids and their per-step NLL (nats)."""
    ids: list[int] = []
    nlls: list[float] = []
    logits = result.logits
    cache = result.cache
    for step in range(n_tokens):
        shifted = logits - np.max(logits)
        probs = np.exp(shifted)
        probs /= probs.sum()
        tok = int(np.argmax(logits))
        ids.append(tok)
        nlls.append(float(-np.log(probs[tok])))
        if step + 1 < n_tokens:
            logits, cache = decode_step(config, weights, cache, tok)
    return ids, nlls


def masked_forward(config: ModelConfig, weights: dict[str, np.ndarray],
                   visual_embeds: np.ndarray, text_ids, l: int) -> np.ndarray:
    """Reference oracle for exit semantics: keeps every row but, for layers
    >= ``l``, masks text->visual attention before the softmax and freezes
    the visual rows. Returns final logits at all text positions; equals the
    row-removal path on text positions because a pre-softmax mask gives
    removed keys exactly zero probability mass."""
    if not (0 <= l <= config.num_layers):
        raise ValueError(f"l must lie in [0, {config.num_layers}]")
    text_ids = _validate_inputs(config, visual_embeds, text_ids)
    n_vis = config.num_visual
    n = n_vis + len(text_ids)
    w = weights
    x = np.empty((n, config.hidden_dim), dtype=np.float64)
    x[:n_vis] = visual_embeds
    x[n_vis:] = w["tok_emb"][text_ids]
    x += w["pos_emb"][:n]
    onset = config.cross_attn_zero_from
    for layer in range(config.num_layers):
        masked = layer >= l or (onset is not None and layer >= onset)
        mask = _build_mask(n, n_vis, masked)
        frozen = x[:n_vis].copy() if layer >= l else None
        x, _, _, _ = _layer_step(x, w, f"layers.{layer}.", config, mask, None)
        if frozen is not None:
            x[:n_vis] = frozen  # visual rows stop transforming after exit
    xf = kernels.layer_norm_rows(x, w["ln_f_g"], w["ln_f_b"])
    return kernels.matmul(np.ascontiguousarray(xf[n_vis:]), w["w_out"])


def export_trace_csv(trace: Trace, path) -> None:
    """Per-layer attention dump: layer, query position, key position, weight."""
    with open(path, "w") as f:
        f.write("# schema: vtexit.trace.v1\n")
        f.write("layer,query_index,key_index,weight\n")
        for layer, (attn, pos) in enumerate(zip(trace.attn, trace.positions)):
            for i in range(attn.shape[0]):
                for j in range(i + 1):
                    f.write(f"{layer},{pos[i]},{pos[j]},{attn[i, j]!r}\n")
