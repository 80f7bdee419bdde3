"""Attention and mixer blocks operating on the batch as the token sequence.

Every block here treats the rows of a [B, d] latent batch as tokens, so
"attention over the batch" lets each sample's update draw on the other
samples.  There are no positional embeddings anywhere: all blocks are
equivariant (self-attention) or invariant (cross-attention keys/values,
pool mixing) to row permutations, which the tests pin down numerically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from .errors import BatchTooSmallError, ConfigurationError, ShapeMismatchError
from .tensor import (
    Parameter,
    ParameterRegistry,
    Tensor,
    add,
    concat_cols,
    dropout,
    gelu,
    layer_norm,
    matmul,
    scale,
    slice_cols,
    softmax_rows,
    transpose,
)


class NormPlacement(Enum):
    """Where layer norm sits relative to the residual branches."""

    POST = "post"
    PRE = "pre"


class MixerKind(Enum):
    """How a degraded view mixes information across the batch."""

    SELF_ATTENTION = "sa"
    POOL_SUBSET = "pool"


@dataclass
class AttentionWeights:
    """Multi-head projection matrices: inputs [B, d] -> heads*d_head -> back to d."""

    W_Q: Parameter
    W_K: Parameter
    W_V: Parameter
    W_out: Parameter
    heads: int
    d_head: int

    def params(self) -> list[Parameter]:
        return [self.W_Q, self.W_K, self.W_V, self.W_out]


@dataclass
class FeedForward:
    """Two-layer GELU MLP applied row-wise: d -> d_ff -> d."""

    W1: Parameter
    b1: Parameter
    W2: Parameter
    b2: Parameter

    def params(self) -> list[Parameter]:
        return [self.W1, self.b1, self.W2, self.b2]


@dataclass
class LayerNormParams:
    gain: Parameter
    bias: Parameter

    def params(self) -> list[Parameter]:
        return [self.gain, self.bias]


def _uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_attention_weights(
    prefix: str,
    d: int,
    d_head: int,
    heads: int,
    registry: ParameterRegistry,
    rng: np.random.Generator,
) -> AttentionWeights:
    if d_head < 1 or heads < 1:
        raise ConfigurationError(f"attention needs d_head >= 1 and heads >= 1, got {d_head}/{heads}")
    p = heads * d_head
    w = AttentionWeights(
        W_Q=registry.add(Parameter(f"{prefix}.W_Q", _uniform_init(rng, (d, p), d))),
        W_K=registry.add(Parameter(f"{prefix}.W_K", _uniform_init(rng, (d, p), d))),
        W_V=registry.add(Parameter(f"{prefix}.W_V", _uniform_init(rng, (d, p), d))),
        W_out=registry.add(Parameter(f"{prefix}.W_out", _uniform_init(rng, (p, d), p))),
        heads=heads,
        d_head=d_head,
    )
    return w


def init_feed_forward(
    prefix: str,
    d: int,
    d_ff: int,
    registry: ParameterRegistry,
    rng: np.random.Generator,
) -> FeedForward:
    if d_ff < 1:
        raise ConfigurationError(f"feed-forward width must be >= 1, got {d_ff}")
    return FeedForward(
        W1=registry.add(Parameter(f"{prefix}.W1", _uniform_init(rng, (d, d_ff), d))),
        b1=registry.add(Parameter(f"{prefix}.b1", np.zeros(d_ff))),
        W2=registry.add(Parameter(f"{prefix}.W2", _uniform_init(rng, (d_ff, d), d_ff))),
        b2=registry.add(Parameter(f"{prefix}.b2", np.zeros(d))),
    )


def init_layer_norm(prefix: str, d: int, registry: ParameterRegistry) -> LayerNormParams:
    return LayerNormParams(
        gain=registry.add(Parameter(f"{prefix}.gain", np.ones(d))),
        bias=registry.add(Parameter(f"{prefix}.bias", np.zeros(d))),
    )


def feed_forward(z: Tensor, ff: FeedForward) -> Tensor:
    h = add(matmul(z, ff.W1), ff.b1)
    return add(matmul(gelu(h), ff.W2), ff.b2)


def cross_attention(
    queries: Tensor,
    keys_values: Tensor,
    w: AttentionWeights,
    dropout_rate: float,
    training: bool,
    rng: np.random.Generator,
) -> Tensor:
    """Scaled dot-product attention: queries from one batch, keys/values from
    another.  Per head: softmax(Q Kᵀ / sqrt(d_head)) V; heads are concatenated
    and projected by W_out, with dropout on the projected output.

    The keys/values batch is treated as an unordered set — permuting its rows
    leaves the output unchanged up to float round-off.
    """
    if queries.data.ndim != 2 or keys_values.data.ndim != 2:
        raise ShapeMismatchError(
            f"attention expects 2-D batches, got {queries.data.shape} / {keys_values.data.shape}"
        )
    if queries.data.shape[1] != keys_values.data.shape[1]:
        raise ShapeMismatchError(
            f"attention width mismatch: {queries.data.shape} vs {keys_values.data.shape}"
        )
    q_all = matmul(queries, w.W_Q)
    k_all = matmul(keys_values, w.W_K)
    v_all = matmul(keys_values, w.W_V)
    inv_sqrt = 1.0 / math.sqrt(w.d_head)
    head_outs = []
    for h in range(w.heads):
        lo, hi = h * w.d_head, (h + 1) * w.d_head
        qh = slice_cols(q_all, lo, hi)
        kh = slice_cols(k_all, lo, hi)
        vh = slice_cols(v_all, lo, hi)
        weights = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt))
        head_outs.append(matmul(weights, vh))
    mixed = head_outs[0] if len(head_outs) == 1 else concat_cols(head_outs)
    out = matmul(mixed, w.W_out)
    return dropout(out, dropout_rate, training, rng)


def self_attention(
    z: Tensor,
    w: AttentionWeights,
    dropout_rate: float,
    training: bool,
    rng: np.random.Generator,
) -> Tensor:
    """Attention of a batch over itself (queries = keys = values source)."""
    return cross_attention(z, z, w, dropout_rate, training, rng)


def pool_mix(
    z: Tensor,
    subset_fraction: float,
    rng: np.random.Generator,
) -> tuple[Tensor, np.ndarray]:
    """Zero-parameter mixer: each row is replaced by the mean of a fresh
    uniform random subset of ceil(subset_fraction * B) batch rows.

    Returns the mixed batch and the drawn index matrix [B, m] so callers
    (and tests) can replay the exact draw.
    """
    if not (0.0 < subset_fraction <= 1.0):
        raise ConfigurationError(
            f"subset_fraction must be in (0, 1], got {subset_fraction}"
        )
    b = z.data.shape[0]
    m = math.ceil(subset_fraction * b)
    # a fresh permutation per query row, truncated to m -> uniform m-subsets
    idx = rng.permuted(np.tile(np.arange(b), (b, 1)), axis=1)[:, :m]
    mix = np.zeros((b, b))
    np.add.at(mix, (np.repeat(np.arange(b), m), idx.ravel()), 1.0 / m)
    return matmul(Tensor(mix), z), idx


def transformer_layer(
    z_in: Tensor,
    mixer: Callable[[Tensor], Tensor],
    ff: FeedForward,
    placement: NormPlacement,
    ln1: LayerNormParams,
    ln2: LayerNormParams,
    pre_mixes_raw_input: bool = False,
) -> Tensor:
    """One token-mixing layer with a residual mixer branch and a residual MLP.

    POST:  Z' = LN(Z + mixer(Z));       out = LN(Z' + FF(Z'))
    PRE:   Z' = LN(Z) + mixer(LN(Z));   out = LN(Z') + FF(Z')

    ``pre_mixes_raw_input=True`` switches PRE to the literal reading
    Z' = LN(Z) + mixer(Z), i.e. the mixer sees the un-normalized input.
    """
    if placement is NormPlacement.POST:
        z1 = layer_norm(add(z_in, mixer(z_in)), ln1.gain, ln1.bias)
        return layer_norm(add(z1, feed_forward(z1, ff)), ln2.gain, ln2.bias)
    normed = layer_norm(z_in, ln1.gain, ln1.bias)
    mixer_in = z_in if pre_mixes_raw_input else normed
    z1 = add(normed, mixer(mixer_in))
    return add(layer_norm(z1, ln2.gain, ln2.bias), feed_forward(z1, ff))


def require_batch(z: Tensor, minimum: int, what: str) -> None:
    if z.data.shape[0] < minimum:
        raise BatchTooSmallError(
            f"{what} needs a batch of at least {minimum} rows, got {z.data.shape[0]}"
        )
