"""Retrieval losses over batched descriptors.

All batch losses assume the diagonal-positive convention: descriptor i of one
view is matched with descriptor i of the other, every off-diagonal entry is a
candidate negative. An optional boolean ``exclude_mask`` (entry [i, j] true
when aerial j is a semi-positive for ground i) removes entries from negative
duty in every loss; such samples are never positives either.

Each loss returns a scalar Tensor so it can sit at the end of a gradient
tape; call ``.item()`` for the plain float.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    apply_op,
    clamp_min,
    gather_pairs,
    matmul,
    mul,
    softplus,
    sqrt,
    tensor_sum,
    transpose,
)
from .errors import ContractError, ShapeError

STRATEGIES = ("exhaustive", "semi_hard", "info_nce")


@dataclass
class LossConfig:
    alpha: float = 10.0
    tau: float = 0.02
    strategy: str = "exhaustive"

    def __post_init__(self):
        if self.alpha <= 0:
            raise ContractError("alpha must be positive")
        if self.tau <= 0:
            raise ContractError("tau must be positive")
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown loss strategy {self.strategy!r}")


def soft_margin_triplet(d_pos, d_neg, alpha):
    """log(1 + exp(alpha * (d_pos - d_neg))) in the overflow-safe form."""
    if alpha <= 0:
        raise ContractError("alpha must be positive")
    z = alpha * (float(d_pos) - float(d_neg))
    return float(max(z, 0.0) + np.log1p(np.exp(-abs(z))))


def pairwise_l2(a, b):
    """L2 distance matrix between row vectors of a (N, d) and b (M, d).

    The squared distances are floored at 1e-12 before the square root so the
    gradient stays finite if two descriptors coincide.
    """
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"descriptor dims differ: {a.shape} vs {b.shape}")
    sa = tensor_sum(mul(a, a), axis=1, keepdims=True)  # (N, 1)
    sb = tensor_sum(mul(b, b), axis=1, keepdims=True)  # (M, 1)
    cross = matmul(a, transpose(b))
    sq = sa + transpose(sb) - mul(cross, 2.0)
    return sqrt(clamp_min(sq, 1e-12))


def _as_square_tensor(d):
    if isinstance(d, Tensor):
        t = d
    else:
        arr = np.asarray(d)
        dtype = arr.dtype if arr.dtype == np.float64 else np.float32
        t = Tensor(arr, dtype=dtype)
    if t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise ShapeError(f"expected a square matrix, got {t.shape}")
    return t


def _neg_masks(n, exclude_mask):
    """Valid-negative masks for the ground->aerial and aerial->ground sweeps."""
    off_diag = ~np.eye(n, dtype=bool)
    if exclude_mask is None:
        return off_diag, off_diag
    excl = np.asarray(exclude_mask, dtype=bool)
    if excl.shape != (n, n):
        raise ShapeError(f"exclude_mask shape {excl.shape} != ({n}, {n})")
    if excl.diagonal().any():
        raise ContractError("diagonal entries cannot be excluded (they are positives)")
    return off_diag & ~excl, off_diag & ~excl.T


def batch_triplet_exhaustive(dist, alpha=10.0, exclude_mask=None):
    """Mean soft-margin triplet over all ordered in-batch triplets.

    Both retrieval directions contribute: ground anchor i against every
    aerial j != i, and aerial anchor i against every ground j != i, for
    2*N*(N-1) triplets when nothing is excluded.
    """
    d = _as_square_tensor(dist)
    n = d.shape[0]
    if n < 2:
        raise ContractError("batch losses need at least 2 pairs")
    idx = np.arange(n)
    diag = gather_pairs(d, idx, idx).reshape(n, 1)

    mask_g, mask_a = _neg_masks(n, exclude_mask)
    total = int(mask_g.sum() + mask_a.sum())
    if total == 0:
        raise ContractError("every candidate negative is excluded")

    margins_g = softplus(mul(diag - d, alpha))
    margins_a = softplus(mul(diag - transpose(d), alpha))
    s = tensor_sum(mul(margins_g, Tensor(mask_g, dtype=d.dtype))) + tensor_sum(
        mul(margins_a, Tensor(mask_a, dtype=d.dtype))
    )
    return mul(s, 1.0 / total)


def semi_hard_select(d_pos, negatives):
    """Closest negative still farther than the positive; hardest as fallback."""
    if len(negatives) == 0:
        raise ContractError("semi_hard_select needs at least one negative")
    harder = [d for d in negatives if d > d_pos]
    return float(min(harder)) if harder else float(max(negatives))


def batch_triplet_semi_hard(dist, alpha=10.0, exclude_mask=None):
    """Per-anchor semi-hard mining in both directions, then Eq.-style mean.

    Selection runs on detached values (it is piecewise constant); the loss
    itself is differentiable through the selected entries.
    """
    d = _as_square_tensor(dist)
    n = d.shape[0]
    if n < 2:
        raise ContractError("batch losses need at least 2 pairs")
    mask_g, mask_a = _neg_masks(n, exclude_mask)
    dv = d.data

    pos_rows, pos_cols, neg_rows, neg_cols = [], [], [], []
    for i in range(n):  # ground anchors: negatives along row i
        cand = np.flatnonzero(mask_g[i])
        if cand.size == 0:
            continue
        j = _select_index(dv[i, i], dv[i, cand], cand)
        pos_rows.append(i)
        pos_cols.append(i)
        neg_rows.append(i)
        neg_cols.append(j)
    for i in range(n):  # aerial anchors: negatives along column i
        cand = np.flatnonzero(mask_a[i])
        if cand.size == 0:
            continue
        j = _select_index(dv[i, i], dv[cand, i], cand)
        pos_rows.append(i)
        pos_cols.append(i)
        neg_rows.append(j)
        neg_cols.append(i)

    if not pos_rows:
        raise ContractError("every candidate negative is excluded")
    d_pos = gather_pairs(d, np.array(pos_rows), np.array(pos_cols))
    d_neg = gather_pairs(d, np.array(neg_rows), np.array(neg_cols))
    margins = softplus(mul(d_pos - d_neg, alpha))
    return tensor_sum(margins) * (1.0 / len(pos_rows))


def _select_index(d_pos, values, cand):
    harder = values > d_pos
    if harder.any():
        sub = np.where(harder, values, np.inf)
        return int(cand[int(np.argmin(sub))])
    return int(cand[int(np.argmax(values))])


def _nll_diagonal(x):
    """Per-row negative log softmax probability of the diagonal entry.

    Computed as (rowmax - diag) + log1p(sum of non-max exp terms), which is
    exact even when the diagonal dominates the row by tens of units.
    """
    v = x.data
    n = v.shape[0]
    rows = np.arange(n)
    m = v.max(axis=1)
    z = np.exp(v - m[:, None])
    am = v.argmax(axis=1)
    rest = z.copy()
    rest[rows, am] = 0.0
    r = rest.sum(axis=1)
    out = (m - v[rows, rows]) + np.log1p(r)

    def bwd(g):
        p = z / z.sum(axis=1, keepdims=True)
        gx = p * g[:, None]
        gx[rows, rows] -= g
        return (gx,)

    return apply_op(out, (x,), bwd)


def info_nce(similarity, tau=0.02, exclude_mask=None):
    """Temperature-scaled contrastive loss over a similarity matrix.

    ``similarity`` holds cosine similarities of unit descriptors (diagonal =
    positive pairs). Both retrieval directions are averaged. Excluded entries
    are dropped from the denominators by an additive -inf-like offset.
    """
    if tau <= 0:
        raise ContractError("tau must be positive")
    s = _as_square_tensor(similarity)
    n = s.shape[0]
    x = mul(s, 1.0 / tau)
    if exclude_mask is not None:
        excl = np.asarray(exclude_mask, dtype=bool)
        if excl.shape != (n, n):
            raise ShapeError(f"exclude_mask shape {excl.shape} != ({n}, {n})")
        if excl.diagonal().any():
            raise ContractError("diagonal entries cannot be excluded (they are positives)")
        offset = np.where(excl, -1e30, 0.0)
        x = x + Tensor(offset, dtype=s.dtype)
    loss_g = tensor_sum(_nll_diagonal(x)) * (1.0 / n)
    loss_a = tensor_sum(_nll_diagonal(transpose(x))) * (1.0 / n)
    return (loss_g + loss_a) * 0.5


def pair_loss(ground_desc, aerial_desc, config, exclude_mask=None):
    """Dispatch on LossConfig.strategy for unit descriptor batches."""
    if config.strategy == "info_nce":
        sim = matmul(ground_desc, transpose(aerial_desc))
        return info_nce(sim, tau=config.tau, exclude_mask=exclude_mask)
    dist = pairwise_l2(ground_desc, aerial_desc)
    if config.strategy == "semi_hard":
        return batch_triplet_semi_hard(dist, alpha=config.alpha, exclude_mask=exclude_mask)
    return batch_triplet_exhaustive(dist, alpha=config.alpha, exclude_mask=exclude_mask)
