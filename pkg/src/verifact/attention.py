"""Scaled dot-product attention, multi-head wrappers and gated variants.

All attention here is softmax(Q K^T / scale) V with scale = sqrt(width / heads).
The gated forms modulate per-head keys or values with a per-row score vector
(or add it to the logits) before the attention product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Iterator

import numpy as np

from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    add_row,
    concat,
    dropout,
    matmul,
    row_gate,
    softmax,
)

MASK_OFF = -1e30  # logit for excluded keys


class GateStrategy(Enum):
    """How the per-sentence score vector enters the attention."""

    VALUE_ONLY = "value"
    KEY_ONLY = "key"
    KEY_AND_VALUE = "key_and_value"
    DOT_PRODUCT_BIAS = "dot_product"
    NO_GATE = "none"


def attention_scale(width: int, n_heads: int) -> float:
    """Logit divisor sqrt(width / n_heads)."""
    if width <= 0 or n_heads <= 0:
        raise ContractError(f"attention_scale({width}, {n_heads})")
    return math.sqrt(width / n_heads)


@lru_cache(maxsize=64)
def sinusoidal_encoding(length: int, width: int) -> np.ndarray:
    """Static positional table: even columns sin, odd columns cos, wavelengths
    10000^(2i/width). Row 0 is [0, 1, 0, 1, ...]."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    pairs = np.arange((width + 1) // 2, dtype=np.float64)
    angles = pos / np.power(10000.0, 2.0 * pairs / width)[None, :]
    table = np.empty((length, 2 * pairs.size), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    table = table[:, :width]
    table.setflags(write=False)
    return table


def _mask_bias(key_mask: np.ndarray, n_queries: int) -> Tensor:
    bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, MASK_OFF)
    return Tensor(np.tile(bias[None, :], (n_queries, 1)))


def _head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    scale: float,
    key_mask: np.ndarray | None = None,
    logit_bias: Tensor | None = None,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> Tensor:
    logits = matmul(q, k.T) * (1.0 / scale)
    if logit_bias is not None:
        logits = add_row(logits, logit_bias)
    if key_mask is not None:
        if len(key_mask) != k.shape[0]:
            raise DimensionError(f"key mask length {len(key_mask)} vs {k.shape[0]} keys")
        logits = logits + _mask_bias(key_mask, q.shape[0])
    weights = softmax(logits)
    weights = dropout(weights, dropout_p, rng, train)
    return matmul(weights, v)


def attn(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    scale: float,
    key_mask: np.ndarray | None = None,
) -> Tensor:
    """Single-head attention over row-stacked queries, keys and values."""
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise DimensionError("attn operands must be rank 2")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"attn: {k.shape[0]} keys vs {v.shape[0]} values")
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"attn: query width {q.shape[1]} vs key width {k.shape[1]}")
    if k.shape[0] == 0 and q.shape[0] > 0:
        raise ContractError("attn over an empty key set")
    if scale <= 0.0:
        raise ContractError(f"attn scale must be positive, got {scale}")
    return _head_attention(q, k, v, scale, key_mask=key_mask)


@dataclass
class MhaParams:
    """Per-head projection matrices plus the shared output projection.

    Every instance owns its tensors; two instances never alias parameters.
    """

    width: int
    n_heads: int
    w_q: list[Tensor]
    w_k: list[Tensor]
    w_v: list[Tensor]
    w_o: Tensor

    @classmethod
    def create(cls, width: int, n_heads: int, rng: np.random.Generator,
               std: float = 0.02, identity_gain: float = 0.0,
               copy_gain: float = 0.0) -> "MhaParams":
        """Normal(0, std) projections; identity_gain > 0 adds the head's
        identity slice to its query and key maps so same-token attention
        starts favored instead of uniform, and copy_gain > 0 does the same
        to the value map so attended tokens pass through their own
        representation (both useful without layer norm)."""
        if width % n_heads != 0:
            raise DimensionError(f"width {width} not divisible by {n_heads} heads")
        head = width // n_heads
        def w(rows, cols, bias=None):
            data = rng.normal(0.0, std, size=(rows, cols))
            if bias is not None:
                data = data + bias
            return Tensor(data, requires_grad=True)
        def slices(gain):
            out = []
            for i in range(n_heads):
                s = np.zeros((width, head))
                s[i * head:(i + 1) * head, :] = np.eye(head) * gain
                out.append(s if gain else None)
            return out
        qk, vv = slices(identity_gain), slices(copy_gain)
        return cls(
            width=width,
            n_heads=n_heads,
            w_q=[w(width, head, qk[i]) for i in range(n_heads)],
            w_k=[w(width, head, qk[i]) for i in range(n_heads)],
            w_v=[w(width, head, vv[i]) for i in range(n_heads)],
            w_o=w(width, width),
        )

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for i in range(self.n_heads):
            yield f"{prefix}.q{i}", self.w_q[i]
            yield f"{prefix}.k{i}", self.w_k[i]
            yield f"{prefix}.v{i}", self.w_v[i]
        yield f"{prefix}.o", self.w_o


def mha(
    query: Tensor,
    keys: Tensor,
    values: Tensor,
    params: MhaParams,
    key_mask: np.ndarray | None = None,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> Tensor:
    """Multi-head attention: project per head, attend, concat, project out.

    Dropout (train mode) hits the post-softmax weights and the output
    projection.
    """
    if query.shape[1] != params.width or keys.shape[1] != params.width:
        raise DimensionError(
            f"mha width {params.width} vs query {query.shape} / keys {keys.shape}"
        )
    if keys.shape[0] != values.shape[0]:
        raise DimensionError(f"mha: {keys.shape[0]} keys vs {values.shape[0]} values")
    if keys.shape[0] == 0:
        raise ContractError("mha over an empty key set")
    scale = attention_scale(params.width, params.n_heads)
    heads = [
        _head_attention(
            matmul(query, params.w_q[i]),
            matmul(keys, params.w_k[i]),
            matmul(values, params.w_v[i]),
            scale,
            key_mask=key_mask,
            dropout_p=dropout_p,
            rng=rng,
            train=train,
        )
        for i in range(params.n_heads)
    ]
    out = matmul(concat(heads, axis=1), params.w_o)
    return dropout(out, dropout_p, rng, train)


def self_mha(
    hidden: Tensor,
    params: MhaParams,
    use_pe: bool,
    key_mask: np.ndarray | None = None,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> Tensor:
    """Self-attention of a row sequence, optionally with sinusoid positions
    added to the shared Q/K/V input. No residual here; callers add it."""
    x = hidden
    if use_pe:
        x = hidden + Tensor(sinusoidal_encoding(hidden.shape[0], hidden.shape[1]))
    return mha(x, x, x, params, key_mask=key_mask, dropout_p=dropout_p, rng=rng, train=train)


def gated_mha(
    query: Tensor,
    keys: Tensor,
    values: Tensor,
    gate: Tensor,
    params: MhaParams,
    strategy: GateStrategy,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> Tensor:
    """Multi-head attention with a per-key score vector folded in.

    The gate residual (v_hat + dropout(gate * v_hat), likewise for keys) is
    applied to the projected per-head copies before the attention product;
    DOT_PRODUCT_BIAS instead adds the scores to every query's logits.
    """
    if gate.data.ndim != 1:
        raise DimensionError(f"gate must be rank 1, got shape {gate.shape}")
    if gate.shape[0] != keys.shape[0]:
        raise DimensionError(f"gate length {gate.shape[0]} vs {keys.shape[0]} keys")
    if keys.shape[0] == 0:
        raise ContractError("gated_mha over an empty key set")
    if np.any(gate.data < 0.0) or np.any(gate.data > 1.0):
        raise ContractError("gate scores must lie in [0, 1]")
    if keys.shape[0] != values.shape[0]:
        raise DimensionError(f"gated_mha: {keys.shape[0]} keys vs {values.shape[0]} values")
    scale = attention_scale(params.width, params.n_heads)
    heads = []
    for i in range(params.n_heads):
        q_h = matmul(query, params.w_q[i])
        k_h = matmul(keys, params.w_k[i])
        v_h = matmul(values, params.w_v[i])
        if strategy in (GateStrategy.VALUE_ONLY, GateStrategy.KEY_AND_VALUE):
            v_h = v_h + dropout(row_gate(v_h, gate), dropout_p, rng, train)
        if strategy in (GateStrategy.KEY_ONLY, GateStrategy.KEY_AND_VALUE):
            k_h = k_h + dropout(row_gate(k_h, gate), dropout_p, rng, train)
        bias = gate if strategy is GateStrategy.DOT_PRODUCT_BIAS else None
        heads.append(
            _head_attention(
                q_h, k_h, v_h, scale,
                logit_bias=bias, dropout_p=dropout_p, rng=rng, train=train,
            )
        )
    out = matmul(concat(heads, axis=1), params.w_o)
    return dropout(out, dropout_p, rng, train)
