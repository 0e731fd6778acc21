"""Batched training and bulk-evaluation path for the desk-scale model.

The per-sample inference path (model.py) routes tiny matrices through the
kernel backend; training and label generation instead batch across samples
so the heavy lifting lands in BLAS. Both paths implement the same
architecture and are cross-checked to 1e-9 in the tests.

Gradients are derived by hand and verified against central finite
differences; the optimizer is a plain deterministic Adam.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .kernels import GELU_CUBIC, GELU_SCALE, LN_EPS
from .model import param_specs
from .rng import SeededRng
from .synthdata import Dataset, SynthSample, symbol_embeddings

NEG_INF = float("-inf")


# ---------------------------------------------------------------- primitives

def _gelu(x):
    inner = GELU_SCALE * (x + GELU_CUBIC * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def _gelu_grad(x):
    inner = GELU_SCALE * (x + GELU_CUBIC * x**3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x**2)


def _ln_forward(x, g, b):
    first = x[..., :1]
    mu = first + np.mean(x - first, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _ln_backward(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    m1 = np.mean(dxhat, axis=-1, keepdims=True)
    m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    axes = tuple(range(dy.ndim - 1))
    return dx, np.sum(dy * xhat, axis=axes), np.sum(dy, axis=axes)


def _softmax_last(x):
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def _log_softmax(x):
    z = x - np.max(x, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def _heads(x, num_heads):
    b, n, d = x.shape
    return x.reshape(b, n, num_heads, d // num_heads).transpose(0, 2, 1, 3)


def _merge(x):
    b, h, n, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * hd)


def _mask(n: int, n_visual: int, cross_masked: bool) -> np.ndarray:
    m = np.zeros((n, n))
    m[np.triu_indices(n, k=1)] = NEG_INF
    if cross_masked and n_visual > 0:
        m[n_visual:, :n_visual] = NEG_INF
    return m


# ------------------------------------------------------------ batched arrays

@dataclass
class Batch:
    vis: np.ndarray  # (B, n_v, d)
    ids: np.ndarray  # (B, t)
    answers: np.ndarray  # (B,)
    tasks: list[str]


def batch_from_samples(samples: list[SynthSample], table: np.ndarray) -> Batch:
    grids = np.array([s.grid for s in samples], dtype=np.int64)
    return Batch(
        vis=table[grids],
        ids=np.array([s.question for s in samples], dtype=np.int64),
        answers=np.array([s.answer for s in samples], dtype=np.int64),
        tasks=[s.task for s in samples])


def embed_table_for(dataset: Dataset, config: ModelConfig) -> np.ndarray:
    return symbol_embeddings(dataset.embed_seed, dataset.spec.num_symbols,
                             config.hidden_dim, dataset.spec.embed_scale)


# ------------------------------------------------------------ forward passes

def batched_logits(config: ModelConfig, weights: dict[str, np.ndarray],
                   vis: np.ndarray, ids: np.ndarray,
                   exit_at: int | None = None) -> np.ndarray:
    """Last-position logits for a batch, optionally with a visual exit at
    the given joint-prefix length."""
    w = weights
    b, t = ids.shape
    n_vis = vis.shape[1]
    n = n_vis + t
    x = np.concatenate([vis, w["tok_emb"][ids]], axis=1) + w["pos_emb"][:n]
    live_vis = n_vis
    onset = config.cross_attn_zero_from
    hd = config.head_dim
    scale = 1.0 / math.sqrt(hd)
    for layer in range(config.num_layers):
        if exit_at == layer and live_vis > 0:
            x = x[:, live_vis:]
            live_vis = 0
        mask = _mask(x.shape[1], live_vis, onset is not None and layer >= onset)
        p = f"layers.{layer}."
        h, _ = _ln_forward(x, w[p + "ln1_g"], w[p + "ln1_b"])
        q, k, v = (_heads(h @ w[p + nm], config.num_heads)
                   for nm in ("wq", "wk", "wv"))
        probs = _softmax_last(q @ k.transpose(0, 1, 3, 2) * scale + mask)
        x = x + _merge(probs @ v) @ w[p + "wo"]
        h2, _ = _ln_forward(x, w[p + "ln2_g"], w[p + "ln2_b"])
        x = x + _gelu(h2 @ w[p + "w_ff1"]) @ w[p + "w_ff2"]
    xf, _ = _ln_forward(x[:, -1], w["ln_f_g"], w["ln_f_b"])
    return xf @ w["w_out"]


def answers_and_uncertainty(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Greedy answer ids and their negative log-likelihood in nats."""
    logp = _log_softmax(logits)
    ans = np.argmax(logits, axis=-1)
    return ans, -logp[np.arange(len(ans)), ans]


def accuracy(config: ModelConfig, weights, batch: Batch,
             exit_at: int | None = None) -> float:
    logits = batched_logits(config, weights, batch.vis, batch.ids, exit_at)
    return float(np.mean(np.argmax(logits, axis=-1) == batch.answers))


# --------------------------------------------------------- loss and backward

def loss_and_grads(config: ModelConfig, weights: dict[str, np.ndarray],
                   batch: Batch) -> tuple[float, dict[str, np.ndarray]]:
    """Answer-position cross-entropy and gradients for every parameter."""
    w = weights
    b, t = batch.ids.shape
    n_vis = batch.vis.shape[1]
    n = n_vis + t
    d, dff = config.hidden_dim, config.ffn_dim
    hd = config.head_dim
    scale = 1.0 / math.sqrt(hd)
    mask = _mask(n, n_vis, False)

    x = np.concatenate([batch.vis, w["tok_emb"][batch.ids]], axis=1) + w["pos_emb"][:n]
    caches = []
    for layer in range(config.num_layers):
        p = f"layers.{layer}."
        h, c1 = _ln_forward(x, w[p + "ln1_g"], w[p + "ln1_b"])
        q = _heads(h @ w[p + "wq"], config.num_heads)
        k = _heads(h @ w[p + "wk"], config.num_heads)
        v = _heads(h @ w[p + "wv"], config.num_heads)
        probs = _softmax_last(q @ k.transpose(0, 1, 3, 2) * scale + mask)
        ctx = _merge(probs @ v)
        x1 = x + ctx @ w[p + "wo"]
        h2, c2 = _ln_forward(x1, w[p + "ln2_g"], w[p + "ln2_b"])
        u = h2 @ w[p + "w_ff1"]
        f = _gelu(u)
        x2 = x1 + f @ w[p + "w_ff2"]
        caches.append((x, h, c1, q, k, v, probs, ctx, x1, h2, c2, u, f))
        x = x2

    xl = x[:, -1]
    xf, cf = _ln_forward(xl, w["ln_f_g"], w["ln_f_b"])
    logits = xf @ w["w_out"]
    logp = _log_softmax(logits)
    loss = float(-np.mean(logp[np.arange(b), batch.answers]))

    grads = {name: np.zeros(shape) for name, shape, _ in param_specs(config)}
    dlogits = _softmax_last(logits)
    dlogits[np.arange(b), batch.answers] -= 1.0
    dlogits /= b
    grads["w_out"] = xf.T @ dlogits
    dxf = dlogits @ w["w_out"].T
    dxl, grads["ln_f_g"], grads["ln_f_b"] = _ln_backward(dxf, w["ln_f_g"], cf)
    dx = np.zeros((b, n, d))
    dx[:, -1] = dxl

    for layer in reversed(range(config.num_layers)):
        p = f"layers.{layer}."
        x0, h, c1, q, k, v, probs, ctx, x1, h2, c2, u, f = caches[layer]
        # ffn branch
        df = dx @ w[p + "w_ff2"].T
        grads[p + "w_ff2"] = f.reshape(-1, dff).T @ dx.reshape(-1, d)
        du = df * _gelu_grad(u)
        grads[p + "w_ff1"] = h2.reshape(-1, d).T @ du.reshape(-1, dff)
        dh2 = du @ w[p + "w_ff1"].T
        dln2, grads[p + "ln2_g"], grads[p + "ln2_b"] = _ln_backward(dh2, w[p + "ln2_g"], c2)
        dx1 = dx + dln2
        # attention branch
        grads[p + "wo"] = ctx.reshape(-1, d).T @ dx1.reshape(-1, d)
        dctx = _heads(dx1 @ w[p + "wo"].T, config.num_heads)
        dprobs = dctx @ v.transpose(0, 1, 3, 2)
        dv = probs.transpose(0, 1, 3, 2) @ dctx
        dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
        dq = dscores @ k * scale
        dk = dscores.transpose(0, 1, 3, 2) @ q * scale
        dq, dk, dv = _merge(dq), _merge(dk), _merge(dv)
        hf = h.reshape(-1, d)
        grads[p + "wq"] = hf.T @ dq.reshape(-1, d)
        grads[p + "wk"] = hf.T @ dk.reshape(-1, d)
        grads[p + "wv"] = hf.T @ dv.reshape(-1, d)
        dh = dq @ w[p + "wq"].T + dk @ w[p + "wk"].T + dv @ w[p + "wv"].T
        dln1, grads[p + "ln1_g"], grads[p + "ln1_b"] = _ln_backward(dh, w[p + "ln1_g"], c1)
        dx = dx1 + dln1

    np.add.at(grads["tok_emb"], batch.ids.reshape(-1), dx[:, n_vis:].reshape(-1, d))
    grads["pos_emb"][:n] = dx.sum(axis=0)
    return loss, grads


# -------------------------------------------------------------------- optim

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def adam_init(config: ModelConfig) -> AdamState:
    zeros = {name: np.zeros(shape) for name, shape, _ in param_specs(config)}
    return AdamState(m=zeros, v={k: a.copy() for k, a in zeros.items()})


def adam_step(weights, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name in weights:
        g = grads[name]
        state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1 - beta2) * g * g
        weights[name] -= lr * (state.m[name] / bc1) / (np.sqrt(state.v[name] / bc2) + eps)


# ----------------------------------------------------------------- training

@dataclass
class ToyTrainConfig:
    batch_size: int = 32
    max_steps: int = 6000
    lr: float = 1.5e-3
    eval_interval: int = 250
    targets: tuple[tuple[str, float], ...] = (("lookup", 0.95), ("two_hop", 0.90))
    fail_below: float = 0.80
    seed: int = 0


@dataclass
class ToyTrainResult:
    weights: dict[str, np.ndarray]
    steps: int
    val_acc: dict[str, float]
    reached_target: bool
    failed: bool
    history: list[dict] = field(default_factory=list)


def _per_task_accuracy(config, weights, batches: dict[str, Batch]) -> dict[str, float]:
    return {task: accuracy(config, weights, b) for task, b in batches.items()}


def train_toy_model(config: ModelConfig, dataset: Dataset,
                    cfg: ToyTrainConfig) -> ToyTrainResult:
    """Next-token cross-entropy training of the frozen-architecture model
    until per-task validation targets are met or the step budget runs out.
    Deterministic in (config, dataset, cfg)."""
    rng = SeededRng(cfg.seed)
    weights = init_weights_seeded(config, cfg.seed)
    table = embed_table_for(dataset, config)
    train = dataset.splits["train"]
    val = dataset.splits.get("val", [])
    val_batches = {
        task: batch_from_samples([s for s in val if s.task == task], table)
        for task in sorted({s.task for s in val})}
    targets = dict(cfg.targets)

    history: list[dict] = []
    val_acc: dict[str, float] = {}
    reached = False
    steps_run = 0
    if cfg.max_steps > 0:
        n = len(train)
        state = adam_init(config)
        for step in range(1, cfg.max_steps + 1):
            idx = [rng.randint(n) for _ in range(cfg.batch_size)]
            batch = batch_from_samples([train[i] for i in idx], table)
            loss, grads = loss_and_grads(config, weights, batch)
            adam_step(weights, grads, state, cfg.lr)
            steps_run = step
            if step % cfg.eval_interval == 0 or step == cfg.max_steps:
                val_acc = _per_task_accuracy(config, weights, val_batches)
                history.append({"step": step, "loss": loss, **{
                    f"val_{t}": a for t, a in val_acc.items()}})
                if all(val_acc.get(t, 1.0) >= a for t, a in targets.items()
                       if t in val_batches):
                    reached = True
                    break
    else:
        val_acc = _per_task_accuracy(config, weights, val_batches)
    lookup_acc = val_acc.get("lookup", 0.0)
    failed = (not reached) and lookup_acc < cfg.fail_below and cfg.max_steps > 0
    return ToyTrainResult(weights=weights, steps=steps_run, val_acc=val_acc,
                          reached_target=reached, failed=failed, history=history)


def init_weights_seeded(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    from .model import init_weights

    return init_weights(config, SeededRng(seed))


def weight_hash(weights: dict[str, np.ndarray], config: ModelConfig) -> str:
    h = hashlib.sha256()
    for name, _, _ in param_specs(config):
        h.update(weights[name].tobytes())
    return h.hexdigest()


# -------------------------------------------------------- feature extraction

def _interp_matrix(source_dim: int, target_dim: int) -> np.ndarray:
    """Linear map equal to piecewise-linear resampling of a source_dim
    vector onto target_dim points."""
    m = np.zeros((source_dim, target_dim))
    if source_dim == 1:
        m[0, :] = 1.0
        return m
    xs = np.linspace(0.0, source_dim - 1.0, target_dim)
    lo = np.floor(xs).astype(int)
    lo = np.minimum(lo, source_dim - 2)
    wgt = xs - lo
    for tcol, (i, ww) in enumerate(zip(lo, wgt)):
        m[i, tcol] += 1.0 - ww
        m[i + 1, tcol] += ww
    return m


def extract_feature_pack(config: ModelConfig, weights: dict[str, np.ndarray],
                         vis: np.ndarray, ids: np.ndarray,
                         attn_feature_dim: int) -> dict[str, np.ndarray]:
    """Per-layer token-status parts for a batch: arrays of shape
    (B, num_layers, dim). Gate j consumes the entries at layer j-1."""
    w = weights
    b, t = ids.shape
    n_vis = vis.shape[1]
    n = n_vis + t
    if n_vis < 1:
        raise ValueError("feature extraction requires visual tokens")
    hd = config.head_dim
    scale = 1.0 / math.sqrt(hd)
    mask = _mask(n, n_vis, False)
    x = np.concatenate([vis, w["tok_emb"][ids]], axis=1) + w["pos_emb"][:n]

    L, d, afd = config.num_layers, config.hidden_dim, attn_feature_dim
    pack = {
        "mean_visual": np.empty((b, L, d)), "last_visual": np.empty((b, L, d)),
        "mean_text": np.empty((b, L, d)), "last_text": np.empty((b, L, d)),
        "visual_self_attn": np.empty((b, L, afd)),
        "cross_attn": np.empty((b, L, afd)),
        "text_self_attn": np.empty((b, L, afd)),
    }
    m_vis = _interp_matrix(n_vis, afd)
    m_text = _interp_matrix(t, afd)
    for layer in range(L):
        p = f"layers.{layer}."
        h, _ = _ln_forward(x, w[p + "ln1_g"], w[p + "ln1_b"])
        q, k, v = (_heads(h @ w[p + nm], config.num_heads)
                   for nm in ("wq", "wk", "wv"))
        probs = _softmax_last(q @ k.transpose(0, 1, 3, 2) * scale + mask)
        x = x + _merge(probs @ v) @ w[p + "wo"]
        h2, _ = _ln_forward(x, w[p + "ln2_g"], w[p + "ln2_b"])
        x = x + _gelu(h2 @ w[p + "w_ff1"]) @ w[p + "w_ff2"]

        attn = probs.mean(axis=1)  # heads-averaged, (B, n, n)
        text = x[:, n_vis:]
        pack["mean_text"][:, layer] = text[:, :-1].mean(axis=1) if t >= 2 else text[:, 0]
        pack["last_text"][:, layer] = text[:, -1]
        pack["mean_visual"][:, layer] = x[:, :n_vis].mean(axis=1)
        pack["last_visual"][:, layer] = x[:, n_vis - 1]
        vis_recv = np.stack([attn[:, j:n_vis, j].mean(axis=1) for j in range(n_vis)], axis=1)
        cross_recv = attn[:, n_vis:, :n_vis].mean(axis=1)
        text_recv = np.stack([attn[:, n_vis + j:, n_vis + j].mean(axis=1) for j in range(t)], axis=1)
        pack["visual_self_attn"][:, layer] = vis_recv @ m_vis
        pack["cross_attn"][:, layer] = cross_recv @ m_vis
        pack["text_self_attn"][:, layer] = text_recv @ m_text
    return pack


def assemble_features(pack: dict[str, np.ndarray], selector,
                      joint_count: int) -> np.ndarray:
    """Features for the gate keyed by joint_count (layer j-1 output)."""
    layer = joint_count - 1
    return np.concatenate([pack[p][:, layer] for p in selector.parts], axis=1)
