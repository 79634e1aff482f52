"""Descriptor heads: global average pooling, spatial-mixing (SMD), and local.

All heads map a token matrix (..., P, C) to an L2-normalized descriptor. GAP
is permutation-invariant over tokens; SMD deliberately is not, since its
fully-connected layers mix along the spatial axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    gelu,
    l2_normalize,
    matmul,
    reshape,
    tensor_mean,
    transpose,
)
from .errors import ShapeError


def gap_head(tokens):
    """Mean over the token axis followed by L2 normalization."""
    pooled = tensor_mean(tokens, axis=-2)
    return l2_normalize(pooled)


@dataclass
class SmdParams:
    """Spatial-mixing head weights; all spatial extents are tied to P tokens.

    w1: (P, 4P) expansion, w2: (4P, P) reduction, w3: (P, K) projection to K
    spatial slots. Biases are included; the head is a stack of ordinary
    fully-connected layers applied along the spatial axis.
    """

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor

    @property
    def token_count(self):
        return self.w1.shape[0]

    @property
    def k(self):
        return self.w3.shape[1]


def init_smd_params(token_count, k, rng, std=0.02, dtype=np.float32):
    """Truncated-normal weights, zero biases, deterministic given ``rng``."""
    from .model import truncated_normal  # shared initializer

    p = token_count

    def w(shape):
        return Tensor(truncated_normal(rng, shape, std), requires_grad=True, dtype=dtype)

    def b(n):
        return Tensor(np.zeros(n), requires_grad=True, dtype=dtype)

    return SmdParams(
        w1=w((p, 4 * p)), b1=b(4 * p),
        w2=w((4 * p, p)), b2=b(p),
        w3=w((p, k)), b3=b(k),
    )


def smd_head(tokens, params):
    """Spatial-mixing descriptor: expand/mix/reduce along the token axis,
    project to K spatial slots, unfold slot-major, L2-normalize.

    tokens (..., P, C) -> descriptor (..., K*C). The unfold order is a wire
    commitment: slot k contributes the contiguous block [k*C, (k+1)*C).
    """
    p = tokens.shape[-2]
    if p != params.token_count:
        raise ShapeError(
            f"smd_head token count {p} does not match parameters ({params.token_count})"
        )
    c = tokens.shape[-1]
    k = params.k

    # (..., C, P): mixing acts strictly along the spatial axis
    axes = tuple(range(tokens.ndim - 2)) + (tokens.ndim - 1, tokens.ndim - 2)
    xt = transpose(tokens, axes)
    h = gelu(matmul(xt, params.w1) + params.b1)
    mixed = matmul(h, params.w2) + params.b2  # (..., C, P)
    slots = matmul(mixed, params.w3) + params.b3  # (..., C, K)
    unfolded = transpose(slots, axes)  # (..., K, C)
    flat = reshape(unfolded, unfolded.shape[:-2] + (k * c,))
    return l2_normalize(flat)


@dataclass
class LocalHeadParams:
    """Per-position linear projection applied after pooling the token grid."""

    weight: Tensor  # (C, proj_dim)
    bias: Tensor  # (proj_dim,)


def init_local_head_params(channels, proj_dim, rng, std=0.02, dtype=np.float32):
    from .model import truncated_normal

    return LocalHeadParams(
        weight=Tensor(truncated_normal(rng, (channels, proj_dim), std), requires_grad=True, dtype=dtype),
        bias=Tensor(np.zeros(proj_dim), requires_grad=True, dtype=dtype),
    )


def local_head(tokens, grid_hw, pool_hw, params):
    """Average-pool the token grid to ``pool_hw``, project each position,
    then unfold position-major into one descriptor.

    tokens (P, C) with P == grid_h * grid_w (row-major grid). The grid must
    be divisible by the pooling target.
    """
    gh, gw = grid_hw
    ph, pw = pool_hw
    if tokens.ndim != 2 or tokens.shape[0] != gh * gw:
        raise ShapeError(f"local_head expects ({gh * gw}, C) tokens for grid {gh}x{gw}")
    if gh % ph or gw % pw:
        raise ShapeError(f"grid {gh}x{gw} not divisible by pool target {ph}x{pw}")
    c = tokens.shape[1]
    bh, bw = gh // ph, gw // pw

    grid = reshape(tokens, (ph, bh, pw, bw, c))
    pooled = tensor_mean(tensor_mean(grid, axis=3), axis=1)  # (ph, pw, C)
    flat = reshape(pooled, (ph * pw, c))
    projected = matmul(flat, params.weight) + params.bias
    out = reshape(projected, (ph * pw * params.weight.shape[1],))
    return l2_normalize(out)
