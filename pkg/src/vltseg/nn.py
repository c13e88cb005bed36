"""Reusable neural layers on top of the tensor engine.

Layers are pure functions over parameter dataclasses: linear projection,
multi-head attention, post-norm transformer encoder/decoder layers, a GRU
recurrence, the fixed 2-D sinusoidal positional embedding, and Glorot-style
initialization.  Attention functions also hand back their weight matrices
as plain arrays so callers can inspect or visualize them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, is_dataclass

import numpy as np

from .prng import Prng
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    gather_rows,
    layer_norm,
    matmul,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax_masked,
    swap_last2,
    tanh,
    transpose,
)

# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass
class LinearParams:
    weight: Tensor  # [n_in, n_out]
    bias: Tensor    # [n_out]


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class ConvParams:
    kernel: Tensor  # [c_out, c_in, k, k]
    bias: Tensor    # [c_out]


@dataclass
class MhaParams:
    heads: int
    model_dim: int
    query: LinearParams
    key: LinearParams
    value: LinearParams
    out: LinearParams


@dataclass
class EncoderLayerParams:
    self_attn: MhaParams
    ffn_in: LinearParams
    ffn_out: LinearParams
    norm_attn: LayerNormParams
    norm_ffn: LayerNormParams


@dataclass
class DecoderLayerParams:
    self_attn: MhaParams
    cross_attn: MhaParams
    ffn_in: LinearParams
    ffn_out: LinearParams
    norm_self: LayerNormParams
    norm_cross: LayerNormParams
    norm_ffn: LayerNormParams


@dataclass
class GruParams:
    """Gate weights for a GRU: x projections, hidden projections, biases."""
    w_update: Tensor
    u_update: Tensor
    b_update: Tensor
    w_reset: Tensor
    u_reset: Tensor
    b_reset: Tensor
    w_cand: Tensor
    u_cand: Tensor
    b_cand: Tensor


def named_tensors(obj, prefix: str = ""):
    """Yield (dotted name, Tensor) pairs in deterministic field order."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif is_dataclass(obj):
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, (Tensor, list, tuple)) or is_dataclass(v):
                sub = f"{prefix}.{f.name}" if prefix else f.name
                yield from named_tensors(v, sub)
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            yield from named_tensors(v, f"{prefix}.{i}" if prefix else str(i))


def map_tensors(obj, fn):
    """Rebuild a parameter structure with every Tensor passed through fn."""
    if isinstance(obj, Tensor):
        return fn(obj)
    if is_dataclass(obj):
        kwargs = {}
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, (Tensor, list, tuple)) or is_dataclass(v):
                kwargs[f.name] = map_tensors(v, fn)
            else:
                kwargs[f.name] = v
        return type(obj)(**kwargs)
    if isinstance(obj, (list, tuple)):
        return type(obj)(map_tensors(v, fn) for v in obj)
    return obj


def parameter_count(obj) -> int:
    return sum(t.size for _, t in named_tensors(obj))


# ---------------------------------------------------------------------------
# Forward functions
# ---------------------------------------------------------------------------


def linear(p: LinearParams, x: Tensor) -> Tensor:
    """x @ weight + bias over the last axis."""
    if x.shape[-1] != p.weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {p.weight.shape}")
    if x.data.ndim == 1:
        out = matmul(reshape(x, (1, x.shape[0])), p.weight)
        return add(reshape(out, (p.weight.shape[1],)), p.bias)
    return add(matmul(x, p.weight), p.bias)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         mask: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """softmax(q k^T / sqrt(d)) v, with the weight matrix returned as array.

    Operands are [n, d] or head-stacked [h, n, d]; the optional boolean
    mask marks valid key positions.
    """
    d = q.shape[-1]
    logits = scale(matmul(q, swap_last2(k)), 1.0 / math.sqrt(d))
    weights = softmax_masked(logits, mask)
    return matmul(weights, v), weights.data.copy()


def mha(p: MhaParams, q: Tensor, k: Tensor, v: Tensor,
        mask: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Multi-head attention; returns output and [heads, n_q, n_k] weights."""
    h, dm = p.heads, p.model_dim
    if dm % h != 0:
        raise ShapeError(f"mha: model_dim {dm} not divisible by {h} heads")
    dh = dm // h
    n_q, n_k = q.shape[0], k.shape[0]

    def split(t: Tensor, n: int) -> Tensor:
        return transpose(reshape(t, (n, h, dh)), (1, 0, 2))

    qh = split(linear(p.query, q), n_q)
    kh = split(linear(p.key, k), n_k)
    vh = split(linear(p.value, v), n_k)
    ctx, weights = scaled_dot_attention(qh, kh, vh, mask)
    merged = reshape(transpose(ctx, (1, 0, 2)), (n_q, dm))
    return linear(p.out, merged), weights


def _ffn(p_in: LinearParams, p_out: LinearParams, x: Tensor) -> Tensor:
    return linear(p_out, relu(linear(p_in, x)))


def encoder_layer(p: EncoderLayerParams, x: Tensor) -> tuple[Tensor, np.ndarray]:
    """Post-norm residual encoder layer: LN(x + SelfAttn(x)), LN(x + FFN(x))."""
    attn_out, weights = mha(p.self_attn, x, x, x)
    x = layer_norm(add(x, attn_out), p.norm_attn.gamma, p.norm_attn.beta)
    x = layer_norm(add(x, _ffn(p.ffn_in, p.ffn_out, x)), p.norm_ffn.gamma, p.norm_ffn.beta)
    return x, weights


def decoder_layer(p: DecoderLayerParams, queries: Tensor,
                  memory: Tensor) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Post-norm decoder layer: self-attention, cross-attention, FFN."""
    self_out, self_w = mha(p.self_attn, queries, queries, queries)
    x = layer_norm(add(queries, self_out), p.norm_self.gamma, p.norm_self.beta)
    cross_out, cross_w = mha(p.cross_attn, x, memory, memory)
    x = layer_norm(add(x, cross_out), p.norm_cross.gamma, p.norm_cross.beta)
    x = layer_norm(add(x, _ffn(p.ffn_in, p.ffn_out, x)), p.norm_ffn.gamma, p.norm_ffn.beta)
    return x, self_w, cross_w


def gru(p: GruParams, tokens: Tensor) -> tuple[Tensor, Tensor]:
    """Run the GRU over [t, d_in] rows from a zero initial state.

    Returns the stacked hidden states [t, d_hidden] and the final state
    [d_hidden].  Update convention: h <- (1 - z) * h + z * candidate.
    """
    t = tokens.shape[0]
    hidden = p.u_update.shape[0]
    # Input projections for all steps at once; recurrence stays sequential.
    xz = add(matmul(tokens, p.w_update), p.b_update)
    xr = add(matmul(tokens, p.w_reset), p.b_reset)
    xc = add(matmul(tokens, p.w_cand), p.b_cand)
    h = Tensor(np.zeros((1, hidden)))
    steps = []
    for i in range(t):
        idx = [i]
        z = sigmoid(add(gather_rows(xz, idx), matmul(h, p.u_update)))
        r = sigmoid(add(gather_rows(xr, idx), matmul(h, p.u_reset)))
        cand = tanh(add(gather_rows(xc, idx), matmul(mul(r, h), p.u_cand)))
        h = add(mul(scale(z, -1.0) + 1.0, h), mul(z, cand))
        steps.append(h)
    per_step = concat(steps, axis=0)
    final = reshape(h, (hidden,))
    return per_step, final


def sine_pos_embed_2d(h: int, w: int, c: int) -> np.ndarray:
    """Fixed 2-D sinusoidal position code of shape [h, w, c].

    The first c/2 channels encode the row index, the last c/2 the column
    index, each as interleaved sin/cos pairs at geometric frequencies
    10000^(-4i/c).  Parameter-free and deterministic.
    """
    if c % 4 != 0:
        raise ShapeError(f"sine_pos_embed_2d: channels must be divisible by 4, got {c}")
    quarter = c // 4
    freqs = 10000.0 ** (-4.0 * np.arange(quarter) / c)  # [quarter]
    out = np.zeros((h, w, c))
    rows = np.arange(h)[:, None] * freqs[None, :]  # [h, quarter]
    cols = np.arange(w)[:, None] * freqs[None, :]  # [w, quarter]
    out[:, :, 0:c // 2:2] = np.sin(rows)[:, None, :]
    out[:, :, 1:c // 2:2] = np.cos(rows)[:, None, :]
    out[:, :, c // 2::2] = np.sin(cols)[None, :, :]
    out[:, :, c // 2 + 1::2] = np.cos(cols)[None, :, :]
    return out


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _glorot(prng: Prng, shape: tuple[int, ...], fan_in: int, fan_out: int) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(prng.uniform(-bound, bound, shape), requires_grad=True)


def init_linear(prng: Prng, n_in: int, n_out: int) -> LinearParams:
    return LinearParams(
        weight=_glorot(prng, (n_in, n_out), n_in, n_out),
        bias=Tensor(np.zeros(n_out), requires_grad=True),
    )


def init_conv(prng: Prng, c_out: int, c_in: int, k: int) -> ConvParams:
    return ConvParams(
        kernel=_glorot(prng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k),
        bias=Tensor(np.zeros(c_out), requires_grad=True),
    )


def init_layer_norm(c: int) -> LayerNormParams:
    return LayerNormParams(
        gamma=Tensor(np.ones(c), requires_grad=True),
        beta=Tensor(np.zeros(c), requires_grad=True),
    )


def init_embedding(prng: Prng, vocab: int, dim: int) -> Tensor:
    return Tensor(prng.normal(0.0, 0.02, (vocab, dim)), requires_grad=True)


def init_mha(prng: Prng, heads: int, model_dim: int) -> MhaParams:
    return MhaParams(
        heads=heads,
        model_dim=model_dim,
        query=init_linear(prng, model_dim, model_dim),
        key=init_linear(prng, model_dim, model_dim),
        value=init_linear(prng, model_dim, model_dim),
        out=init_linear(prng, model_dim, model_dim),
    )


def init_encoder_layer(prng: Prng, heads: int, model_dim: int, ffn_dim: int) -> EncoderLayerParams:
    return EncoderLayerParams(
        self_attn=init_mha(prng, heads, model_dim),
        ffn_in=init_linear(prng, model_dim, ffn_dim),
        ffn_out=init_linear(prng, ffn_dim, model_dim),
        norm_attn=init_layer_norm(model_dim),
        norm_ffn=init_layer_norm(model_dim),
    )


def init_decoder_layer(prng: Prng, heads: int, model_dim: int, ffn_dim: int) -> DecoderLayerParams:
    return DecoderLayerParams(
        self_attn=init_mha(prng, heads, model_dim),
        cross_attn=init_mha(prng, heads, model_dim),
        ffn_in=init_linear(prng, model_dim, ffn_dim),
        ffn_out=init_linear(prng, ffn_dim, model_dim),
        norm_self=init_layer_norm(model_dim),
        norm_cross=init_layer_norm(model_dim),
        norm_ffn=init_layer_norm(model_dim),
    )


def init_gru(prng: Prng, d_in: int, d_hidden: int) -> GruParams:
    def gate_w():
        return _glorot(prng, (d_in, d_hidden), d_in, d_hidden)

    def gate_u():
        return _glorot(prng, (d_hidden, d_hidden), d_hidden, d_hidden)

    def gate_b():
        return Tensor(np.zeros(d_hidden), requires_grad=True)

    return GruParams(
        w_update=gate_w(), u_update=gate_u(), b_update=gate_b(),
        w_reset=gate_w(), u_reset=gate_u(), b_reset=gate_b(),
        w_cand=gate_w(), u_cand=gate_u(), b_cand=gate_b(),
    )
