"""Transformer sublayers: masked multi-head attention and feed-forward.

Every sublayer follows the same composition: the sublayer body, then
dropout, then a residual add of the input, then layer normalization.
Attention masks are boolean arrays where True marks a permitted
memory entry; rows with no permitted entry produce an all-zero
attention output rather than NaN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .tensor import (
    MASK_FILL_VALUE,
    GradRecord,
    ShapeError,
    Tensor,
    add,
    default_dtype,
    dropout,
    layernorm,
    masked_fill,
    matmul,
    mul,
    relu,
    reshape,
    scale,
    softmax,
    transpose,
)

__all__ = [
    "AttentionParams",
    "FfnParams",
    "LayerNormParams",
    "LayerParams",
    "glorot_uniform",
    "take_param",
    "init_attention_params",
    "init_ffn_params",
    "init_layernorm_params",
    "init_layer_params",
    "scaled_dot_attention",
    "multi_head_attention",
    "self_attn_sublayer",
    "cross_attn_sublayer",
    "ffn_sublayer",
]


@dataclass(frozen=True)
class AttentionParams:
    """Projection weights for one multi-head attention module.

    The query/key/value matrices are stored stacked as [d, d] with the
    columns of head h occupying the contiguous slice h*dh:(h+1)*dh,
    where dh = d // heads.
    """

    heads: int
    w_query: Tensor
    w_key: Tensor
    w_value: Tensor
    w_out: Tensor

    def __post_init__(self):
        d = self.w_query.shape[0]
        if self.heads < 1:
            raise ValueError(f"heads must be >= 1, got {self.heads}")
        if d % self.heads != 0:
            raise ValueError(f"width {d} not divisible by {self.heads} heads")
        for name in ("w_query", "w_key", "w_value", "w_out"):
            w = getattr(self, name)
            if w.shape != (d, d):
                raise ShapeError(f"{name} must be ({d}, {d}), got {w.shape}")

    @property
    def width(self) -> int:
        return self.w_query.shape[0]

    @property
    def head_width(self) -> int:
        return self.width // self.heads


@dataclass(frozen=True)
class FfnParams:
    """Position-wise feed-forward weights: expand to d_ff, ReLU, contract."""

    w_expand: Tensor
    b_expand: Tensor
    w_contract: Tensor
    b_contract: Tensor

    def __post_init__(self):
        d, d_ff = self.w_expand.shape
        if self.b_expand.shape != (d_ff,):
            raise ShapeError(
                f"b_expand must be ({d_ff},), got {self.b_expand.shape}")
        if self.w_contract.shape != (d_ff, d):
            raise ShapeError(
                f"w_contract must be ({d_ff}, {d}), got {self.w_contract.shape}")
        if self.b_contract.shape != (d,):
            raise ShapeError(
                f"b_contract must be ({d},), got {self.b_contract.shape}")

    @property
    def width(self) -> int:
        return self.w_expand.shape[0]

    @property
    def hidden_width(self) -> int:
        return self.w_expand.shape[1]


@dataclass(frozen=True)
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.gain.shape != self.bias.shape or len(self.gain.shape) != 1:
            raise ShapeError(
                f"gain/bias must be matching vectors, got "
                f"{self.gain.shape} and {self.bias.shape}")


@dataclass(frozen=True)
class LayerParams:
    """One transformer layer: self-attention, optional cross-attention
    over an encoder output, and the feed-forward block, each with its own
    layer-norm pair and a shared dropout rate."""

    self_attn: AttentionParams
    ffn: FfnParams
    norm_self: LayerNormParams
    norm_ffn: LayerNormParams
    dropout: float
    cross_attn: AttentionParams | None = None
    norm_cross: LayerNormParams | None = None

    def __post_init__(self):
        if (self.cross_attn is None) != (self.norm_cross is None):
            raise ValueError(
                "cross_attn and norm_cross must be provided together")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def has_cross(self) -> bool:
        return self.cross_attn is not None


# ---------------------------------------------------------------------------
# Initialization


def glorot_uniform(rng: Rng, fan_in: int, fan_out: int, shape) -> np.ndarray:
    """Uniform samples in +-sqrt(6 / (fan_in + fan_out))."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    u = rng.uniform(shape, dtype=np.float64)
    return ((2.0 * u - 1.0) * limit).astype(default_dtype())


def take_param(record: GradRecord, values, name: str, make) -> Tensor:
    """Supply a named parameter: freshly initialized when values is None,
    rebound from values[name] (e.g. a checkpoint) when it is an array,
    and passed through as-is when values holds already-bound Tensors
    (gradient checking runs forward passes over such dicts)."""
    if values is None:
        return record.parameter(make(), name)
    try:
        arr = values[name]
    except KeyError:
        raise ValueError(f"missing stored parameter {name!r}") from None
    if isinstance(arr, Tensor):
        return arr
    return record.parameter(arr, name)


def init_attention_params(record: GradRecord, prefix: str, d: int, heads: int,
                          rng: Rng, values=None) -> AttentionParams:
    """Glorot-initialized projections; q/k/v use the per-head fan-out."""
    if d % heads != 0:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    dh = d // heads

    def w(name, fan_out):
        return take_param(record, values, f"{prefix}.{name}",
                          lambda: glorot_uniform(rng, d, fan_out, (d, d)))

    return AttentionParams(
        heads=heads,
        w_query=w("w_query", dh),
        w_key=w("w_key", dh),
        w_value=w("w_value", dh),
        w_out=w("w_out", d),
    )


def init_ffn_params(record: GradRecord, prefix: str, d: int, d_ff: int,
                    rng: Rng, values=None) -> FfnParams:
    return FfnParams(
        w_expand=take_param(record, values, f"{prefix}.w_expand",
                            lambda: glorot_uniform(rng, d, d_ff, (d, d_ff))),
        b_expand=take_param(record, values, f"{prefix}.b_expand",
                            lambda: np.zeros(d_ff)),
        w_contract=take_param(record, values, f"{prefix}.w_contract",
                              lambda: glorot_uniform(rng, d_ff, d, (d_ff, d))),
        b_contract=take_param(record, values, f"{prefix}.b_contract",
                              lambda: np.zeros(d)),
    )


def init_layernorm_params(record: GradRecord, prefix: str, d: int,
                          values=None) -> LayerNormParams:
    return LayerNormParams(
        gain=take_param(record, values, f"{prefix}.gain", lambda: np.ones(d)),
        bias=take_param(record, values, f"{prefix}.bias", lambda: np.zeros(d)),
    )


def init_layer_params(record: GradRecord, prefix: str, d: int, heads: int,
                      d_ff: int, dropout_rate: float, rng: Rng,
                      cross: bool = False, values=None) -> LayerParams:
    cross_attn = norm_cross = None
    if cross:
        cross_attn = init_attention_params(
            record, f"{prefix}.cross_attn", d, heads, rng, values)
        norm_cross = init_layernorm_params(
            record, f"{prefix}.norm_cross", d, values)
    return LayerParams(
        self_attn=init_attention_params(
            record, f"{prefix}.self_attn", d, heads, rng, values),
        ffn=init_ffn_params(record, f"{prefix}.ffn", d, d_ff, rng, values),
        norm_self=init_layernorm_params(
            record, f"{prefix}.norm_self", d, values),
        norm_ffn=init_layernorm_params(record, f"{prefix}.norm_ffn", d, values),
        dropout=dropout_rate,
        cross_attn=cross_attn,
        norm_cross=norm_cross,
    )


# ---------------------------------------------------------------------------
# Attention


def _swap_last_axes(t: Tensor) -> Tensor:
    nd = len(t.shape)
    axes = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    return transpose(t, axes)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         mask=None) -> Tensor:
    """softmax(q k^T / sqrt(head width)) v with optional boolean mask.

    q is [..., lq, dh]; k and v are [..., lm, dh]; mask broadcasts to
    [..., lq, lm] with True marking permitted entries.  Masked entries
    carry exactly zero weight, and a query row whose mask permits
    nothing yields an all-zero output row.
    """
    dh = q.shape[-1]
    scores = scale(matmul(q, _swap_last_axes(k)), 1.0 / math.sqrt(dh))
    if mask is None:
        weights = softmax(scores)
    else:
        m = np.asarray(mask, dtype=bool)
        try:
            mb = np.broadcast_to(m, scores.shape)
        except ValueError as e:
            raise ShapeError(
                f"mask shape {m.shape} does not broadcast to scores "
                f"{scores.shape}") from e
        weights = softmax(masked_fill(scores, ~mb, MASK_FILL_VALUE))
        # Keep-mask multiply: a no-op for rows with any permitted entry
        # (masked weights already underflow to exactly zero), but it
        # zeroes rows that permit nothing instead of leaving them at the
        # uniform distribution softmax produces for a constant row.
        weights = mul(weights, mb.astype(weights.data.dtype))
    return matmul(weights, v)


def multi_head_attention(x_q: Tensor, x_m: Tensor, params: AttentionParams,
                         mask=None) -> Tensor:
    """Project, attend per head, concatenate, and project back.

    x_q is [..., lq, d] and x_m is [..., lm, d] with identical leading
    dims; mask is None or broadcasts to [..., lq, lm] and is shared by
    all heads.
    """
    d = params.width
    heads = params.heads
    dh = params.head_width
    lead = x_q.shape[:-2]
    lq = x_q.shape[-2]
    lm = x_m.shape[-2]
    if x_q.shape[-1] != d or x_m.shape[-1] != d:
        raise ShapeError(
            f"inputs must have width {d}, got {x_q.shape} and {x_m.shape}")

    def split_heads(t: Tensor, length: int) -> Tensor:
        t = reshape(t, (*lead, length, heads, dh))
        nd = len(lead) + 3
        axes = (*range(len(lead)), nd - 2, nd - 3, nd - 1)
        return transpose(t, axes)

    q = split_heads(matmul(x_q, params.w_query), lq)
    k = split_heads(matmul(x_m, params.w_key), lm)
    v = split_heads(matmul(x_m, params.w_value), lm)

    head_mask = None
    if mask is not None:
        head_mask = np.expand_dims(np.asarray(mask, dtype=bool), -3)

    ctx = scaled_dot_attention(q, k, v, head_mask)
    nd = len(lead) + 3
    axes = (*range(len(lead)), nd - 2, nd - 3, nd - 1)
    ctx = reshape(transpose(ctx, axes), (*lead, lq, d))
    return matmul(ctx, params.w_out)


# ---------------------------------------------------------------------------
# Sublayers


def self_attn_sublayer(x_q: Tensor, x_m: Tensor, layer: LayerParams, mask,
                       rng: Rng | None, training: bool) -> Tensor:
    """layernorm(q + dropout(attention(q, memory))), in that order."""
    attended = multi_head_attention(x_q, x_m, layer.self_attn, mask)
    dropped = dropout(attended, layer.dropout, rng, training)
    return layernorm(add(x_q, dropped),
                     layer.norm_self.gain, layer.norm_self.bias)


def cross_attn_sublayer(x: Tensor, encoder_out: Tensor, layer: LayerParams,
                        rng: Rng | None, training: bool) -> Tensor:
    """Same residual scheme with the encoder output as unmasked memory."""
    if layer.cross_attn is None:
        raise ValueError("layer has no cross-attention parameters")
    attended = multi_head_attention(x, encoder_out, layer.cross_attn, None)
    dropped = dropout(attended, layer.dropout, rng, training)
    return layernorm(add(x, dropped),
                     layer.norm_cross.gain, layer.norm_cross.bias)


def ffn_sublayer(x: Tensor, layer: LayerParams, rng: Rng | None,
                 training: bool) -> Tensor:
    """layernorm(x + dropout(contract(relu(expand(x))))) position-wise."""
    f = layer.ffn
    hidden = relu(add(matmul(x, f.w_expand), f.b_expand))
    projected = add(matmul(hidden, f.w_contract), f.b_contract)
    dropped = dropout(projected, layer.dropout, rng, training)
    return layernorm(add(x, dropped),
                     layer.norm_ffn.gain, layer.norm_ffn.bias)
