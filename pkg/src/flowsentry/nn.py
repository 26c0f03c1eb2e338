"""Neural-network primitives in float64 numpy with exact reverse-mode gradients.

Everything here is batched over (B, T, d) arrays and written as paired
forward/backward functions so the chain rule composes explicitly. The
transformer block is pre-norm:

    x = x + Attention(LayerNorm(x))
    x = x + FeedForward(LayerNorm(x))

Attention is multi-head scaled dot-product with scale 1/sqrt(d_model /
n_heads). Key positions excluded by the validity or causal mask get a
-inf score; a query row whose keys are all excluded yields a zero
attention output instead of NaN (and contributes zero gradient).
Parameters live in small dataclasses; `iter_arrays` walks them in a
stable order for the optimizer, finite-difference checks and checkpoints.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .errors import SequenceTooLong

LN_EPS = 1e-5


# --- parameter containers ----------------------------------------------------

@dataclass
class TokenizerParams:
    """Learnable affine projection from feature space into model space."""

    projection: np.ndarray  # (F, d_model)
    bias: np.ndarray        # (d_model,)


@dataclass
class LayerParams:
    ln1_gain: np.ndarray    # (d,)
    ln1_bias: np.ndarray
    w_query: np.ndarray     # (d, d)
    w_key: np.ndarray
    w_value: np.ndarray
    w_out: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    ff_w1: np.ndarray       # (d, d_ff)
    ff_b1: np.ndarray       # (d_ff,)
    ff_w2: np.ndarray       # (d_ff, d)
    ff_b2: np.ndarray       # (d,)


@dataclass
class EncoderParams:
    pos: np.ndarray             # (T_max, d) learned positional embeddings
    layers: list[LayerParams]


@dataclass
class HeadParams:
    """One-hidden-layer MLP producing a scalar logit per position."""

    w1: np.ndarray  # (d_in, d_hidden)
    b1: np.ndarray  # (d_hidden,)
    w2: np.ndarray  # (d_hidden,)
    b2: np.ndarray  # (1,)


@dataclass
class TokenHeadParams:
    """Token embedding table plus output projection for token prediction."""

    embed: np.ndarray       # (V, d)
    mask_embed: np.ndarray  # (d,) reserved mask-token embedding
    out_proj: np.ndarray    # (d, V)


def iter_arrays(obj, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
    """Yield (dotted-name, array) pairs of a parameter tree in field order."""
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from iter_arrays(getattr(obj, f.name), name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from iter_arrays(item, f"{prefix}[{i}]")
    elif obj is None:
        return
    else:
        raise TypeError(f"cannot iterate parameters of {type(obj)!r} at {prefix!r}")


def map_arrays(obj, fn: Callable[[np.ndarray], np.ndarray]):
    """Rebuild a parameter tree applying ``fn`` to every array leaf."""
    if isinstance(obj, np.ndarray):
        return fn(obj)
    if dataclasses.is_dataclass(obj):
        return type(obj)(**{
            f.name: map_arrays(getattr(obj, f.name), fn)
            for f in dataclasses.fields(obj)})
    if isinstance(obj, list):
        return [map_arrays(x, fn) for x in obj]
    if isinstance(obj, tuple):
        return tuple(map_arrays(x, fn) for x in obj)
    if obj is None:
        return None
    raise TypeError(f"cannot map over {type(obj)!r}")


def zeros_like_tree(obj):
    return map_arrays(obj, np.zeros_like)


def clone_tree(obj):
    return map_arrays(obj, np.copy)


# --- initialization ------------------------------------------------------------

def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_tokenizer(rng: np.random.Generator, n_features: int, d_model: int) -> TokenizerParams:
    return TokenizerParams(projection=glorot(rng, n_features, d_model),
                           bias=np.zeros(d_model))


def init_layer(rng: np.random.Generator, d_model: int, d_ff: int) -> LayerParams:
    return LayerParams(
        ln1_gain=np.ones(d_model), ln1_bias=np.zeros(d_model),
        w_query=glorot(rng, d_model, d_model),
        w_key=glorot(rng, d_model, d_model),
        w_value=glorot(rng, d_model, d_model),
        w_out=glorot(rng, d_model, d_model),
        ln2_gain=np.ones(d_model), ln2_bias=np.zeros(d_model),
        ff_w1=glorot(rng, d_model, d_ff), ff_b1=np.zeros(d_ff),
        ff_w2=glorot(rng, d_ff, d_model), ff_b2=np.zeros(d_model))


def init_encoder(rng: np.random.Generator, d_model: int, d_ff: int,
                 n_layers: int, t_max: int) -> EncoderParams:
    pos = rng.normal(0.0, 0.02, size=(t_max, d_model))
    return EncoderParams(pos=pos,
                         layers=[init_layer(rng, d_model, d_ff) for _ in range(n_layers)])


def init_head(rng: np.random.Generator, d_in: int, d_hidden: int) -> HeadParams:
    return HeadParams(w1=glorot(rng, d_in, d_hidden), b1=np.zeros(d_hidden),
                      w2=glorot(rng, d_hidden, 1)[:, 0], b2=np.zeros(1))


def init_token_head(rng: np.random.Generator, vocab: int, d_model: int) -> TokenHeadParams:
    return TokenHeadParams(embed=rng.normal(0.0, 0.02, size=(vocab, d_model)),
                           mask_embed=rng.normal(0.0, 0.02, size=d_model),
                           out_proj=glorot(rng, d_model, vocab))


# --- layer norm -----------------------------------------------------------------

def layer_norm_forward(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return gain * xhat + bias, (xhat, inv)


def layer_norm_backward(dy, gain, cache):
    xhat, inv = cache
    dgain = (dy * xhat).sum(axis=(0, 1))
    dbias = dy.sum(axis=(0, 1))
    dxhat = dy * gain
    dx = inv * (dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


# --- attention ------------------------------------------------------------------

def build_allowed(valid: np.ndarray, causal: bool) -> np.ndarray:
    """(B, T) validity -> (B, Tq, Tk) boolean attention permission."""
    B, T = valid.shape
    allowed = np.repeat(valid[:, None, :], T, axis=1)
    if causal:
        allowed &= np.tril(np.ones((T, T), dtype=bool))
    return allowed


def masked_softmax(scores: np.ndarray) -> np.ndarray:
    """Row softmax where excluded entries are -inf; dead rows give zeros."""
    m = scores.max(axis=-1, keepdims=True)
    shift = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(scores - shift)
    denom = e.sum(axis=-1, keepdims=True)
    return e / np.where(denom == 0.0, 1.0, denom)


def _split_heads(x, n_heads):
    B, T, d = x.shape
    return x.reshape(B, T, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def attention_forward(lp: LayerParams, x: np.ndarray, allowed: np.ndarray,
                      n_heads: int):
    B, T, d = x.shape
    scale = 1.0 / np.sqrt(d / n_heads)
    q = _split_heads(x @ lp.w_query, n_heads)
    k = _split_heads(x @ lp.w_key, n_heads)
    v = _split_heads(x @ lp.w_value, n_heads)
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    scores = np.where(allowed[:, None, :, :], scores, -np.inf)
    attn = masked_softmax(scores)
    ctx = _merge_heads(attn @ v)
    out = ctx @ lp.w_out
    return out, (x, q, k, v, attn, ctx, scale)


def attention_backward(lp: LayerParams, cache, dout: np.ndarray, n_heads: int):
    x, q, k, v, attn, ctx, scale = cache
    B, T, d = x.shape
    x2 = x.reshape(B * T, d)

    dw_out = ctx.reshape(B * T, d).T @ dout.reshape(B * T, d)
    dctx = _split_heads(dout @ lp.w_out.T, n_heads)

    dattn = dctx @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ dctx
    # softmax backward; rows that were fully masked have attn == 0 -> dscores == 0
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dscores *= scale

    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q

    dq_m = _merge_heads(dq).reshape(B * T, d)
    dk_m = _merge_heads(dk).reshape(B * T, d)
    dv_m = _merge_heads(dv).reshape(B * T, d)

    dw_query = x2.T @ dq_m
    dw_key = x2.T @ dk_m
    dw_value = x2.T @ dv_m
    dx = (dq_m @ lp.w_query.T + dk_m @ lp.w_key.T + dv_m @ lp.w_value.T)
    return dx.reshape(B, T, d), dw_query, dw_key, dw_value, dw_out


def attention_maps(lp: LayerParams, x: np.ndarray, allowed: np.ndarray,
                   n_heads: int) -> np.ndarray:
    """(B, H, T, T) attention weights, for inspection and tests."""
    _, cache = attention_forward(lp, x, allowed, n_heads)
    return cache[4]


# --- feed-forward ----------------------------------------------------------------

def ffn_forward(lp: LayerParams, x: np.ndarray):
    h1 = x @ lp.ff_w1 + lp.ff_b1
    a = np.maximum(h1, 0.0)
    return a @ lp.ff_w2 + lp.ff_b2, (x, h1 > 0, a)


def ffn_backward(lp: LayerParams, cache, dy: np.ndarray):
    x, relu_mask, a = cache
    B, T, d = x.shape
    d_ff = a.shape[-1]
    a2 = a.reshape(B * T, d_ff)
    dy2 = dy.reshape(B * T, d)
    dw2 = a2.T @ dy2
    db2 = dy2.sum(axis=0)
    dh1 = (dy @ lp.ff_w2.T) * relu_mask
    dh1_2 = dh1.reshape(B * T, d_ff)
    dw1 = x.reshape(B * T, d).T @ dh1_2
    db1 = dh1_2.sum(axis=0)
    dx = dh1 @ lp.ff_w1.T
    return dx, dw1, db1, dw2, db2


# --- dropout ----------------------------------------------------------------------

def dropout_forward(x: np.ndarray, rate: float, rng: np.random.Generator):
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep, keep


# --- encoder ----------------------------------------------------------------------

def encoder_forward(params: EncoderParams, tokens: np.ndarray, valid: np.ndarray,
                    n_heads: int, causal: bool, dropout_rate: float = 0.0,
                    dropout_rng: np.random.Generator | None = None):
    """tokens (B, T, d) + validity (B, T) -> contextual embeddings (B, T, d).

    Returns (h, cache); pass the cache to :func:`encoder_backward`.
    """
    B, T, d = tokens.shape
    if T > params.pos.shape[0]:
        raise SequenceTooLong(
            f"sequence length {T} exceeds positional capacity {params.pos.shape[0]}")
    allowed = build_allowed(valid, causal)
    x = tokens + params.pos[:T]
    layer_caches = []
    use_dropout = dropout_rate > 0.0 and dropout_rng is not None
    for lp in params.layers:
        n1, ln1_cache = layer_norm_forward(x, lp.ln1_gain, lp.ln1_bias)
        attn_out, attn_cache = attention_forward(lp, n1, allowed, n_heads)
        attn_keep = None
        if use_dropout:
            attn_out, attn_keep = dropout_forward(attn_out, dropout_rate, dropout_rng)
        x1 = x + attn_out
        n2, ln2_cache = layer_norm_forward(x1, lp.ln2_gain, lp.ln2_bias)
        ff_out, ff_cache = ffn_forward(lp, n2)
        ff_keep = None
        if use_dropout:
            ff_out, ff_keep = dropout_forward(ff_out, dropout_rate, dropout_rng)
        x = x1 + ff_out
        layer_caches.append((ln1_cache, attn_cache, attn_keep,
                             ln2_cache, ff_cache, ff_keep))
    return x, (T, layer_caches)


def encoder_backward(params: EncoderParams, cache, dh: np.ndarray, n_heads: int):
    """Gradient of a scalar loss through the encoder.

    Returns (EncoderParams-shaped gradients, gradient w.r.t. the input tokens).
    """
    T, layer_caches = cache
    grads = EncoderParams(pos=np.zeros_like(params.pos), layers=[])
    dx = dh
    layer_grads: list[LayerParams] = []
    for lp, (ln1_cache, attn_cache, attn_keep, ln2_cache, ff_cache, ff_keep) in zip(
            reversed(params.layers), reversed(layer_caches)):
        dff_out = dx if ff_keep is None else dx * ff_keep
        dn2, dw1, db1, dw2, db2 = ffn_backward(lp, ff_cache, dff_out)
        dx1, dg2, db_ln2 = layer_norm_backward(dn2, lp.ln2_gain, ln2_cache)
        dx1 = dx1 + dx
        dattn_out = dx1 if attn_keep is None else dx1 * attn_keep
        dn1, dwq, dwk, dwv, dwo = attention_backward(lp, attn_cache, dattn_out, n_heads)
        dx0, dg1, db_ln1 = layer_norm_backward(dn1, lp.ln1_gain, ln1_cache)
        dx = dx0 + dx1
        layer_grads.append(LayerParams(
            ln1_gain=dg1, ln1_bias=db_ln1,
            w_query=dwq, w_key=dwk, w_value=dwv, w_out=dwo,
            ln2_gain=dg2, ln2_bias=db_ln2,
            ff_w1=dw1, ff_b1=db1, ff_w2=dw2, ff_b2=db2))
    grads.layers = list(reversed(layer_grads))
    grads.pos[:T] = dx.sum(axis=0)
    return grads, dx


# --- heads ------------------------------------------------------------------------

def head_forward(hp: HeadParams, h: np.ndarray):
    """(B, T, d_in) -> per-position scalar logits (B, T)."""
    z1 = h @ hp.w1 + hp.b1
    a = np.maximum(z1, 0.0)
    logits = a @ hp.w2 + hp.b2[0]
    return logits, (h, z1 > 0, a)


def head_backward(hp: HeadParams, cache, dlogits: np.ndarray):
    h, relu_mask, a = cache
    lead = h.shape[:-1]
    d_in, d_hidden = hp.w1.shape
    a2 = a.reshape(-1, d_hidden)
    dl = dlogits.reshape(-1)
    dw2 = a2.T @ dl
    db2 = np.array([dl.sum()])
    da = dlogits[..., None] * hp.w2
    dz1 = da * relu_mask
    dz1_2 = dz1.reshape(-1, d_hidden)
    dw1 = h.reshape(-1, d_in).T @ dz1_2
    db1 = dz1_2.sum(axis=0)
    dh = dz1 @ hp.w1.T
    return HeadParams(w1=dw1, b1=db1, w2=dw2, b2=db2), dh.reshape(*lead, d_in)


def embed_forward(tp: TokenHeadParams, token_ids: np.ndarray,
                  mask_positions: np.ndarray | None = None) -> np.ndarray:
    """(B, T) int tokens -> (B, T, d); masked positions get the mask embedding."""
    e = tp.embed[token_ids]
    if mask_positions is not None and mask_positions.any():
        e = np.where(mask_positions[..., None], tp.mask_embed, e)
    return e


def embed_backward(tp: TokenHeadParams, token_ids: np.ndarray, de: np.ndarray,
                   mask_positions: np.ndarray | None = None):
    dembed = np.zeros_like(tp.embed)
    dmask = np.zeros_like(tp.mask_embed)
    if mask_positions is not None and mask_positions.any():
        dmask = de[mask_positions].sum(axis=0)
        de = np.where(mask_positions[..., None], 0.0, de)
    np.add.at(dembed, token_ids.reshape(-1), de.reshape(-1, de.shape[-1]))
    return dembed, dmask


def token_logits_forward(tp: TokenHeadParams, h: np.ndarray):
    return h @ tp.out_proj, h


def token_logits_backward(tp: TokenHeadParams, h: np.ndarray, dlogits: np.ndarray):
    d = h.shape[-1]
    V = tp.out_proj.shape[1]
    dout_proj = h.reshape(-1, d).T @ dlogits.reshape(-1, V)
    dh = dlogits @ tp.out_proj.T
    return dout_proj, dh


# --- losses -----------------------------------------------------------------------

def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray):
    """Mean binary cross-entropy over masked-in positions plus its gradient."""
    m = int(mask.sum())
    if m == 0:
        raise ValueError("empty loss mask")
    z = logits
    per = np.logaddexp(0.0, z) - targets * z
    loss = float(per[mask].sum() / m)
    dlogits = np.where(mask, (sigmoid(z) - targets) / m, 0.0)
    return loss, dlogits


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shift = logits - logits.max(axis=-1, keepdims=True)
    return shift - np.log(np.exp(shift).sum(axis=-1, keepdims=True))


def softmax_xent_with_logits(logits: np.ndarray, targets: np.ndarray,
                             mask: np.ndarray):
    """Mean cross-entropy of integer targets over masked-in positions.

    logits (B, T, V); targets (B, T) ints; mask (B, T) bool.
    Returns (loss, dlogits).
    """
    m = int(mask.sum())
    if m == 0:
        raise ValueError("empty loss mask")
    logp = log_softmax(logits)
    B, T, V = logits.shape
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = float(-picked[mask].sum() / m)
    p = np.exp(logp)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    dlogits = np.where(mask[..., None], (p - onehot) / m, 0.0)
    return loss, dlogits


# --- optimizer --------------------------------------------------------------------

class Adam:
    """Adam with bias correction; state keyed by parameter name."""

    def __init__(self, params, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(a) for name, a in iter_arrays(params)}
        self.v = {name: np.zeros_like(a) for name, a in iter_arrays(params)}

    def step(self, params, grads) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for (name, p), (gname, g) in zip(iter_arrays(params), iter_arrays(grads)):
            assert name == gname, f"parameter/gradient tree mismatch: {name} vs {gname}"
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
