"""Transformer encoder with analytic gradients, written in numpy.

Architecture
------------
Pre-norm encoder layers (x + Attn(LN(x)), then x + FFN(LN(x))) with learned
positional embeddings and a final LayerNorm. Three output paths share the
trunk:

* masked-LM head: hidden states projected through the transposed token
  embedding (weight tied) plus a bias, softmaxed over the vocabulary;
* sentence classifier: a two-layer MLP over the hidden state at position 0,
  which callers fill with the reserved CLS id (the last vocab row);
* context-augmentation head: two extra pre-norm layers applied on top of the
  encoder output, feeding the same tied masked-LM projection. With their
  output projections zeroed the head is an exact identity, so its predictions
  start equal to the plain masked-LM path.

Parameters are stored as float32 (matching the checkpoint format); all
arithmetic runs in float64, so a saved-and-reloaded model reproduces logits
bit for bit and finite-difference oracles see a smooth function.

Backward passes are hand-derived. Each forward records the activations needed
for the chain rule in a ForwardTrace; the drivers below turn a trace plus a
loss into parameter gradients, and backward_step applies one Adam update.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import erf

from .errors import CheckpointError, InputError, InvariantError, TrainingDiverged

_LN_EPS = 1e-5
_NEG_INF = -1e30
_ENC_PARAM_NAMES = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv",
                    "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    max_len: int = 128
    n_aug_layers: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        if self.vocab_size < 2:
            raise InvariantError("vocab_size must be at least 2")
        if self.d_model % self.n_heads != 0:
            raise InvariantError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_aug_layers != 2:
            raise InvariantError("the augmentation head has exactly two layers")
        if not 0.0 <= self.dropout < 1.0:
            raise InvariantError(f"dropout must be in [0, 1), got {self.dropout}")
        if min(self.n_layers, self.max_len) < 1:
            raise InvariantError("n_layers and max_len must be >= 1")

    @property
    def cls_id(self) -> int:
        """Reserved classifier token; the final vocab row, never a real term."""
        return self.vocab_size - 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def config_for_vocab(vocab, **overrides) -> ModelConfig:
    """Model config sized for a Vocabulary, with one extra row for CLS."""
    return ModelConfig(vocab_size=vocab.size + 1, **overrides)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Tensor shapes in checkpoint order. Insertion order is the contract."""
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d),
        "pos_emb": (config.max_len, d),
    }

    def layer(prefix: str) -> None:
        shapes.update({
            f"{prefix}.ln1_g": (d,), f"{prefix}.ln1_b": (d,),
            f"{prefix}.wq": (d, d), f"{prefix}.bq": (d,),
            f"{prefix}.wk": (d, d), f"{prefix}.bk": (d,),
            f"{prefix}.wv": (d, d), f"{prefix}.bv": (d,),
            f"{prefix}.wo": (d, d), f"{prefix}.bo": (d,),
            f"{prefix}.ln2_g": (d,), f"{prefix}.ln2_b": (d,),
            f"{prefix}.w1": (d, f), f"{prefix}.b1": (f,),
            f"{prefix}.w2": (f, d), f"{prefix}.b2": (d,),
        })

    for i in range(config.n_layers):
        layer(f"enc{i}")
    shapes["lnf_g"] = (d,)
    shapes["lnf_b"] = (d,)
    shapes["mlm_b"] = (v,)
    for i in range(config.n_aug_layers):
        layer(f"aug{i}")
    shapes["cls_w1"] = (d, d)
    shapes["cls_b1"] = (d,)
    shapes["cls_w2"] = (d, 2)
    shapes["cls_b2"] = (2,)
    return shapes


def param_order(config: ModelConfig) -> list[str]:
    return list(param_shapes(config))


def init_params(config: ModelConfig, rng: np.random.Generator | int,
                scale: float = 0.02, dtype=np.float32) -> dict[str, np.ndarray]:
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        base = name.rsplit(".", 1)[-1]
        if base.endswith("_g"):
            arr = np.ones(shape)
        elif base.startswith(("b", "ln")) or base.endswith("_b") or len(shape) == 1:
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, scale, size=shape)
        params[name] = arr.astype(dtype)
    return params


# ---------------------------------------------------------------------------
# primitives

def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def _gelu_prime(x: np.ndarray) -> np.ndarray:
    return (0.5 * (1.0 + erf(x / math.sqrt(2.0)))
            + x * np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi))


def _softmax(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def _ln_forward(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _ln_backward(dy: np.ndarray, cache, grads: dict, params: dict,
                 gname: str, bname: str) -> np.ndarray:
    xhat, inv, g = cache
    axes = tuple(range(dy.ndim - 1))
    _grad(grads, params, gname)[...] += (dy * xhat).sum(axis=axes)
    _grad(grads, params, bname)[...] += dy.sum(axis=axes)
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return inv * (dxhat - m1 - xhat * m2)


def _grad(grads: dict, params: dict, name: str) -> np.ndarray:
    if name not in grads:
        grads[name] = np.zeros(params[name].shape, dtype=np.float64)
    return grads[name]


def _dropout_mask(rng: np.random.Generator, shape, p_drop: float) -> np.ndarray:
    keep = 1.0 - p_drop
    return (rng.random(shape) < keep).astype(np.float64) / keep


def pad_batch(id_lists: Sequence[Sequence[int]], pad_id: int):
    """Right-pad to the longest sequence; returns (ids, lengths) arrays."""
    if not id_lists:
        raise InvariantError("empty batch")
    lengths = np.array([len(s) for s in id_lists], dtype=np.int64)
    t = int(lengths.max())
    ids = np.full((len(id_lists), t), pad_id, dtype=np.int64)
    for i, s in enumerate(id_lists):
        ids[i, : len(s)] = s
    return ids, lengths


# ---------------------------------------------------------------------------
# forward

@dataclass
class ForwardTrace:
    """Hidden states plus every activation the backward pass needs."""

    kind: str
    hidden: np.ndarray
    lengths: np.ndarray
    attn_bias: np.ndarray
    layer_caches: list[dict]
    token_ids: np.ndarray | None = None
    lnf_cache: tuple | None = None
    emb_mask: np.ndarray | None = None
    train: bool = False
    parent: "ForwardTrace | None" = None


def _layer_forward(params: dict, prefix: str, x: np.ndarray,
                   attn_bias: np.ndarray, n_heads: int,
                   train: bool, rng, p_drop: float):
    b, t, d = x.shape
    dh = d // n_heads
    cache: dict = {}
    a, cache["ln1"] = _ln_forward(x, params[f"{prefix}.ln1_g"],
                                  params[f"{prefix}.ln1_b"])
    cache["a"] = a
    af = a.reshape(b * t, d)

    def heads(m: np.ndarray) -> np.ndarray:
        return m.reshape(b, t, n_heads, dh).transpose(0, 2, 1, 3)

    q = heads(af @ params[f"{prefix}.wq"] + params[f"{prefix}.bq"])
    k = heads(af @ params[f"{prefix}.wk"] + params[f"{prefix}.bk"])
    v = heads(af @ params[f"{prefix}.wv"] + params[f"{prefix}.bv"])
    scale = 1.0 / math.sqrt(dh)
    scores = q @ k.transpose(0, 1, 3, 2) * scale + attn_bias
    attn = _softmax(scores)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    cache.update(q=q, k=k, v=v, attn=attn, ctx=ctx, scale=scale)
    out = ctx.reshape(b * t, d) @ params[f"{prefix}.wo"] + params[f"{prefix}.bo"]
    out = out.reshape(b, t, d)
    if train and p_drop > 0.0:
        cache["drop1"] = _dropout_mask(rng, out.shape, p_drop)
        out = out * cache["drop1"]
    x2 = x + out
    h, cache["ln2"] = _ln_forward(x2, params[f"{prefix}.ln2_g"],
                                  params[f"{prefix}.ln2_b"])
    cache["h"] = h
    f1 = h.reshape(b * t, d) @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"]
    g = _gelu(f1)
    cache["f1"] = f1
    cache["g"] = g
    f2 = (g @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]).reshape(b, t, d)
    if train and p_drop > 0.0:
        cache["drop2"] = _dropout_mask(rng, f2.shape, p_drop)
        f2 = f2 * cache["drop2"]
    return x2 + f2, cache


def _layer_backward(params: dict, prefix: str, dy: np.ndarray, cache: dict,
                    grads: dict, n_heads: int) -> np.ndarray:
    b, t, d = dy.shape
    dh = d // n_heads
    df2 = dy * cache["drop2"] if "drop2" in cache else dy
    df2f = df2.reshape(b * t, d)
    gf = cache["g"]
    _grad(grads, params, f"{prefix}.w2")[...] += gf.T @ df2f
    _grad(grads, params, f"{prefix}.b2")[...] += df2f.sum(axis=0)
    dg = df2f @ params[f"{prefix}.w2"].T.astype(np.float64)
    df1 = dg * _gelu_prime(cache["f1"])
    hf = cache["h"].reshape(b * t, d)
    _grad(grads, params, f"{prefix}.w1")[...] += hf.T @ df1
    _grad(grads, params, f"{prefix}.b1")[...] += df1.sum(axis=0)
    dhid = (df1 @ params[f"{prefix}.w1"].T.astype(np.float64)).reshape(b, t, d)
    dx2 = dy + _ln_backward(dhid, cache["ln2"], grads, params,
                            f"{prefix}.ln2_g", f"{prefix}.ln2_b")
    dout = dx2 * cache["drop1"] if "drop1" in cache else dx2
    doutf = dout.reshape(b * t, d)
    ctxf = cache["ctx"].reshape(b * t, d)
    _grad(grads, params, f"{prefix}.wo")[...] += ctxf.T @ doutf
    _grad(grads, params, f"{prefix}.bo")[...] += doutf.sum(axis=0)
    dctx = (doutf @ params[f"{prefix}.wo"].T.astype(np.float64)
            ).reshape(b, t, n_heads, dh).transpose(0, 2, 1, 3)
    attn, q, k, v = cache["attn"], cache["q"], cache["k"], cache["v"]
    dattn = dctx @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ dctx
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dq = dscores @ k * cache["scale"]
    dk = dscores.transpose(0, 1, 3, 2) @ q * cache["scale"]

    def merge(m: np.ndarray) -> np.ndarray:
        return m.transpose(0, 2, 1, 3).reshape(b * t, d)

    dqf, dkf, dvf = merge(dq), merge(dk), merge(dv)
    af = cache["a"].reshape(b * t, d)
    da = np.zeros((b * t, d), dtype=np.float64)
    for w, bias, dm in ((f"{prefix}.wq", f"{prefix}.bq", dqf),
                        (f"{prefix}.wk", f"{prefix}.bk", dkf),
                        (f"{prefix}.wv", f"{prefix}.bv", dvf)):
        _grad(grads, params, w)[...] += af.T @ dm
        _grad(grads, params, bias)[...] += dm.sum(axis=0)
        da += dm @ params[w].T.astype(np.float64)
    dx2 += _ln_backward(da.reshape(b, t, d), cache["ln1"], grads, params,
                        f"{prefix}.ln1_g", f"{prefix}.ln1_b")
    return dx2


def encode(params: dict, config: ModelConfig, token_ids, lengths=None,
           train: bool = False, rng: np.random.Generator | None = None
           ) -> ForwardTrace:
    """Run the encoder trunk; hidden states come out after the final norm.

    `token_ids` is a (batch, time) int array; positions at or beyond a row's
    length are padding and are excluded from attention. Sentences longer than
    max_len are an error, never silently truncated.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 2:
        raise InvariantError(f"token ids must be 2-d, got shape {ids.shape}")
    b, t = ids.shape
    if t > config.max_len:
        raise InvariantError(
            f"sentence length {t} exceeds max_len {config.max_len}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise InvariantError("token id outside the model vocabulary")
    if lengths is None:
        lengths = np.full(b, t, dtype=np.int64)
    else:
        lengths = np.asarray(lengths, dtype=np.int64)
        if lengths.shape != (b,) or lengths.min() < 1 or lengths.max() > t:
            raise InvariantError("lengths must be in [1, T] with one entry per row")
    p_drop = config.dropout if train else 0.0
    if p_drop > 0.0 and rng is None:
        raise InputError("training forward with dropout needs an rng")
    x = params["tok_emb"][ids].astype(np.float64) \
        + params["pos_emb"][:t].astype(np.float64)[None, :, :]
    emb_mask = None
    if p_drop > 0.0:
        emb_mask = _dropout_mask(rng, x.shape, p_drop)
        x = x * emb_mask
    attn_bias = np.where(np.arange(t)[None, :] < lengths[:, None], 0.0, _NEG_INF)
    attn_bias = attn_bias[:, None, None, :]
    caches = []
    for i in range(config.n_layers):
        x, cache = _layer_forward(params, f"enc{i}", x, attn_bias,
                                  config.n_heads, train, rng, p_drop)
        caches.append(cache)
    hidden, lnf_cache = _ln_forward(x, params["lnf_g"], params["lnf_b"])
    return ForwardTrace(kind="enc", hidden=hidden, lengths=lengths,
                        attn_bias=attn_bias, layer_caches=caches,
                        token_ids=ids, lnf_cache=lnf_cache, emb_mask=emb_mask,
                        train=train)


def aug_encode(params: dict, config: ModelConfig, trace: ForwardTrace,
               rng: np.random.Generator | None = None) -> ForwardTrace:
    """Apply the two context-augmentation layers on top of an encoder trace."""
    if trace.kind != "enc":
        raise InvariantError("aug_encode expects an encoder trace")
    p_drop = config.dropout if trace.train else 0.0
    if p_drop > 0.0 and rng is None:
        raise InputError("training forward with dropout needs an rng")
    x = trace.hidden
    caches = []
    for i in range(config.n_aug_layers):
        x, cache = _layer_forward(params, f"aug{i}", x, trace.attn_bias,
                                  config.n_heads, trace.train, rng, p_drop)
        caches.append(cache)
    return ForwardTrace(kind="aug", hidden=x, lengths=trace.lengths,
                        attn_bias=trace.attn_bias, layer_caches=caches,
                        train=trace.train, parent=trace)


def _check_positions(trace: ForwardTrace, b_idx: np.ndarray, t_idx: np.ndarray):
    if b_idx.shape != t_idx.shape or b_idx.ndim != 1:
        raise InvariantError("positions must be parallel 1-d index arrays")
    if (t_idx >= trace.lengths[b_idx]).any() or (t_idx < 0).any():
        raise InvariantError("masked position outside the sentence")


def _mlm_forward(params: dict, trace: ForwardTrace,
                 b_idx: np.ndarray, t_idx: np.ndarray):
    h_sel = trace.hidden[b_idx, t_idx]
    logits = h_sel @ params["tok_emb"].T.astype(np.float64) \
        + params["mlm_b"].astype(np.float64)
    return _log_softmax(logits), h_sel


def mlm_probs(params: dict, config: ModelConfig, trace: ForwardTrace,
              positions) -> np.ndarray:
    """Vocabulary distributions at the given (row, position) pairs.

    Works on encoder traces (plain masked-LM path) and on augmentation traces
    (context-augmented path); each output row sums to one.
    """
    pos = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
    b_idx, t_idx = pos[:, 0], pos[:, 1]
    _check_positions(trace, b_idx, t_idx)
    logp, _ = _mlm_forward(params, trace, b_idx, t_idx)
    return np.exp(logp)


def _mlm_backward(params: dict, grads: dict, trace: ForwardTrace,
                  b_idx, t_idx, h_sel, dlogits, d_hidden) -> None:
    _grad(grads, params, "mlm_b")[...] += dlogits.sum(axis=0)
    _grad(grads, params, "tok_emb")[...] += dlogits.T @ h_sel
    np.add.at(d_hidden, (b_idx, t_idx),
              dlogits @ params["tok_emb"].astype(np.float64))


def classify(params: dict, config: ModelConfig, trace: ForwardTrace) -> np.ndarray:
    """Two-class softmax over the hidden state at position 0 (the CLS slot)."""
    p, _ = _classify_forward(params, trace)
    return p


def _classify_forward(params: dict, trace: ForwardTrace):
    h0 = trace.hidden[:, 0]
    z1 = h0 @ params["cls_w1"].astype(np.float64) + params["cls_b1"]
    a1 = _gelu(z1)
    z2 = a1 @ params["cls_w2"].astype(np.float64) + params["cls_b2"]
    return _softmax(z2), (h0, z1, a1)


def _classify_backward(params: dict, grads: dict, cache, dz2: np.ndarray):
    h0, z1, a1 = cache
    _grad(grads, params, "cls_w2")[...] += a1.T @ dz2
    _grad(grads, params, "cls_b2")[...] += dz2.sum(axis=0)
    da1 = dz2 @ params["cls_w2"].T.astype(np.float64)
    dz1 = da1 * _gelu_prime(z1)
    _grad(grads, params, "cls_w1")[...] += h0.T @ dz1
    _grad(grads, params, "cls_b1")[...] += dz1.sum(axis=0)
    return dz1 @ params["cls_w1"].T.astype(np.float64)


def _trace_backward(params: dict, config: ModelConfig, trace: ForwardTrace,
                    d_hidden: np.ndarray, grads: dict) -> None:
    dx = d_hidden
    if trace.kind == "aug":
        for i in reversed(range(config.n_aug_layers)):
            dx = _layer_backward(params, f"aug{i}", dx, trace.layer_caches[i],
                                 grads, config.n_heads)
        _trace_backward(params, config, trace.parent, dx, grads)
        return
    dx = _ln_backward(dx, trace.lnf_cache, grads, params, "lnf_g", "lnf_b")
    for i in reversed(range(config.n_layers)):
        dx = _layer_backward(params, f"enc{i}", dx, trace.layer_caches[i],
                             grads, config.n_heads)
    if trace.emb_mask is not None:
        dx = dx * trace.emb_mask
    t = dx.shape[1]
    np.add.at(_grad(grads, params, "tok_emb"), trace.token_ids, dx)
    _grad(grads, params, "pos_emb")[:t] += dx.sum(axis=0)


# ---------------------------------------------------------------------------
# losses

def loss_coarse(p: np.ndarray, labels) -> float:
    """Mean negative log-likelihood of the gold class under a (B, 2) softmax."""
    p = np.asarray(p, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if p.ndim != 2 or p.shape[1] != 2 or labels.shape != (p.shape[0],):
        raise InvariantError("loss_coarse expects (B, 2) probabilities and B labels")
    if p.shape[0] == 0:
        raise InvariantError("loss_coarse on an empty batch")
    picked = np.clip(p[np.arange(p.shape[0]), labels], 1e-300, None)
    return float(-np.log(picked).mean())


def loss_fine(mlm_dist: np.ndarray, mlm_target: int,
              cam_dists: np.ndarray, cam_targets) -> float:
    """Single-sample fine loss: masked-LM term plus the CAM average.

    cross-entropy of the plain masked-LM distribution at its one target, plus
    the cross-entropy of the context-augmented distributions averaged over the
    N masked positions. Equal weights.
    """
    cam_dists = np.asarray(cam_dists, dtype=np.float64)
    cam_targets = np.asarray(cam_targets, dtype=np.int64)
    if cam_dists.ndim != 2 or cam_dists.shape[0] < 1:
        raise InvariantError("loss_fine needs at least one CAM position")
    if cam_targets.shape != (cam_dists.shape[0],):
        raise InvariantError("one CAM target per CAM distribution")
    mlm_dist = np.asarray(mlm_dist, dtype=np.float64)
    mlm_ce = -math.log(max(float(mlm_dist[mlm_target]), 1e-300))
    picked = np.clip(cam_dists[np.arange(cam_dists.shape[0]), cam_targets],
                     1e-300, None)
    return float(mlm_ce - np.log(picked).mean())


def coarse_loss_and_grads(params: dict, config: ModelConfig, ids, lengths,
                          labels, train: bool = False, rng=None):
    trace = encode(params, config, ids, lengths, train=train, rng=rng)
    p, cache = _classify_forward(params, trace)
    labels = np.asarray(labels, dtype=np.int64)
    loss = loss_coarse(p, labels)
    b = p.shape[0]
    dz2 = p.copy()
    dz2[np.arange(b), labels] -= 1.0
    dz2 /= b
    grads: dict[str, np.ndarray] = {}
    dh0 = _classify_backward(params, grads, cache, dz2)
    d_hidden = np.zeros_like(trace.hidden)
    d_hidden[:, 0] = dh0
    _trace_backward(params, config, trace, d_hidden, grads)
    return loss, grads


def fine_loss_and_grads(params: dict, config: ModelConfig, mlm_batch: dict,
                        cam_batch: dict | None, train: bool = False, rng=None):
    """Fine loss over a batch; cam_batch None trains the pure masked-LM path.

    mlm_batch: ids (B,T), lengths (B,), pos (B,), target (B,)
    cam_batch: ids (B,T'), lengths (B,), b_idx (M,), t_pos (M,), target (M,)
               with b_idx grouping the flattened masked positions by row.
    """
    grads: dict[str, np.ndarray] = {}
    ids = np.asarray(mlm_batch["ids"])
    b = ids.shape[0]
    trace = encode(params, config, ids, mlm_batch["lengths"], train=train, rng=rng)
    pos = np.asarray(mlm_batch["pos"], dtype=np.int64)
    tgt = np.asarray(mlm_batch["target"], dtype=np.int64)
    b_idx = np.arange(b)
    _check_positions(trace, b_idx, pos)
    logp, h_sel = _mlm_forward(params, trace, b_idx, pos)
    loss = float(-logp[b_idx, tgt].mean())
    dlogits = np.exp(logp)
    dlogits[b_idx, tgt] -= 1.0
    dlogits /= b
    d_hidden = np.zeros_like(trace.hidden)
    _mlm_backward(params, grads, trace, b_idx, pos, h_sel, dlogits, d_hidden)
    _trace_backward(params, config, trace, d_hidden, grads)

    if cam_batch is not None:
        cids = np.asarray(cam_batch["ids"])
        ctrace = encode(params, config, cids, cam_batch["lengths"],
                        train=train, rng=rng)
        atrace = aug_encode(params, config, ctrace, rng=rng)
        cb = np.asarray(cam_batch["b_idx"], dtype=np.int64)
        cp = np.asarray(cam_batch["t_pos"], dtype=np.int64)
        ct = np.asarray(cam_batch["target"], dtype=np.int64)
        _check_positions(atrace, cb, cp)
        counts = np.bincount(cb, minlength=cids.shape[0]).astype(np.float64)
        if (counts[np.unique(cb)] < 1).any() or cb.shape[0] == 0:
            raise InvariantError("every CAM row needs at least one masked position")
        w = 1.0 / (cids.shape[0] * counts[cb])
        clogp, ch_sel = _mlm_forward(params, atrace, cb, cp)
        m = cb.shape[0]
        loss += float(-(w * clogp[np.arange(m), ct]).sum())
        cdl = np.exp(clogp)
        cdl[np.arange(m), ct] -= 1.0
        cdl *= w[:, None]
        cd_hidden = np.zeros_like(atrace.hidden)
        _mlm_backward(params, grads, atrace, cb, cp, ch_sel, cdl, cd_hidden)
        _trace_backward(params, config, atrace, cd_hidden, grads)
    return loss, grads


# ---------------------------------------------------------------------------
# optimization

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = np.zeros(g.shape, dtype=np.float64)
                self.m[name] = m
                self.v[name] = np.zeros(g.shape, dtype=np.float64)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            upd = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            params[name] = (params[name].astype(np.float64) - upd
                            ).astype(params[name].dtype)


def backward_step(params: dict, config: ModelConfig, batch: dict,
                  loss_kind: str, opt: AdamState, train: bool = True,
                  rng=None) -> float:
    """One training step; returns the pre-update loss.

    A non-finite loss raises TrainingDiverged before any parameter is touched.
    """
    if loss_kind == "coarse":
        loss, grads = coarse_loss_and_grads(
            params, config, batch["ids"], batch["lengths"], batch["labels"],
            train=train, rng=rng)
    elif loss_kind == "fine":
        loss, grads = fine_loss_and_grads(
            params, config, batch["mlm"], batch.get("cam"), train=train, rng=rng)
    else:
        raise InputError(f"unknown loss kind {loss_kind!r}")
    if not math.isfinite(loss):
        raise TrainingDiverged(f"non-finite {loss_kind} loss: {loss}")
    opt.step(params, grads)
    return loss


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"EUPHCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: dict, config: ModelConfig, path: str | Path,
                    extra: dict | None = None) -> None:
    """Binary layout: magic, u32 version, u32 header length, JSON header,
    then every tensor as raw little-endian float32 in param_order."""
    order = param_order(config)
    header = {"config": config.to_dict(), "extra": extra or {}, "order": order}
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hb)))
        fh.write(hb)
        for name in order:
            fh.write(np.ascontiguousarray(params[name], dtype="<f4").tobytes())


def load_checkpoint(path: str | Path, expect_config: ModelConfig | None = None):
    """Returns (params, config, extra). Corruption or a config mismatch is an
    error, never a crash or a silently misshapen model."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < len(_MAGIC) + 8 or not data.startswith(_MAGIC):
        raise CheckpointError(f"{path} is not a model checkpoint")
    version, hlen = struct.unpack_from("<II", data, len(_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = len(_MAGIC) + 8
    try:
        header = json.loads(data[off: off + hlen].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"corrupted checkpoint header in {path}: {e}") from e
    if header.get("order") != param_order(config):
        raise CheckpointError(f"tensor order in {path} does not match its config")
    off += hlen
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = 4 * count
        if off + nbytes > len(data):
            raise CheckpointError(f"truncated checkpoint: {path}")
        params[name] = np.frombuffer(data, dtype="<f4", count=count,
                                     offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(data):
        raise CheckpointError(f"trailing bytes in checkpoint: {path}")
    if expect_config is not None and config != expect_config:
        raise CheckpointError(
            f"checkpoint {path} was written for a different model config")
    return params, config, header.get("extra", {})
