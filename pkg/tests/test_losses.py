import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import brute_triplet_exhaustive
from crossview.autodiff import Tensor, l2_normalize
from crossview.errors import ContractError
from crossview.losses import (
    LossConfig,
    batch_triplet_exhaustive,
    batch_triplet_semi_hard,
    info_nce,
    pair_loss,
    pairwise_l2,
    semi_hard_select,
    soft_margin_triplet,
)


def _rand_dist_matrix(rng, n):
    """Distance-like square matrix with distinct off-diagonal entries."""
    d = rng.uniform(0.1, 1.9, (n, n))
    np.fill_diagonal(d, rng.uniform(0.05, 0.6, n))
    return d


# ---------------------------------------------------------------------------
# scalar soft-margin triplet
# ---------------------------------------------------------------------------


def test_zero_margin_is_ln2():
    assert soft_margin_triplet(0.5, 0.5, 10.0) == pytest.approx(math.log(2.0), abs=1e-12)


def test_scalar_oracle():
    assert soft_margin_triplet(0.5, 0.6, 10.0) == pytest.approx(
        math.log(1 + math.exp(-1.0)), abs=1e-12
    )


def test_large_margin_no_overflow():
    val = soft_margin_triplet(5.5, 0.5, 10.0)  # z = 50
    assert val == pytest.approx(50.0, abs=1e-12)
    assert math.isfinite(val)


def test_stable_matches_naive_where_safe():
    rng = np.random.default_rng(0)
    for _ in range(200):
        d_pos, d_neg = rng.uniform(0.0, 2.0, 2)
        alpha = rng.uniform(0.5, 20.0)
        z = alpha * (d_pos - d_neg)
        if abs(z) > 500:
            continue
        naive = math.log(1.0 + math.exp(z))
        assert soft_margin_triplet(d_pos, d_neg, alpha) == pytest.approx(naive, abs=1e-6)


def test_alpha_must_be_positive():
    with pytest.raises(ContractError):
        soft_margin_triplet(0.5, 0.6, 0.0)


# ---------------------------------------------------------------------------
# exhaustive batch loss
# ---------------------------------------------------------------------------


def test_batch_exhaustive_n2_all_equal():
    d = np.full((2, 2), 0.7)
    assert batch_triplet_exhaustive(d, 10.0).item() == pytest.approx(math.log(2.0), abs=1e-6)


def test_batch_exhaustive_n2_enumeration():
    d = np.array([[0.2, 0.9], [0.8, 0.3]])
    expected = brute_triplet_exhaustive(d, 10.0)
    assert batch_triplet_exhaustive(d, 10.0).item() == pytest.approx(expected, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(0, 10_000))
def test_batch_exhaustive_matches_enumeration(n, seed):
    d = _rand_dist_matrix(np.random.default_rng(seed), n)
    expected = brute_triplet_exhaustive(d, 10.0)
    assert batch_triplet_exhaustive(d, 10.0).item() == pytest.approx(expected, abs=1e-6)


def test_batch_exhaustive_permutation_invariant():
    rng = np.random.default_rng(1)
    d = _rand_dist_matrix(rng, 5)
    perm = rng.permutation(5)
    base = batch_triplet_exhaustive(d, 10.0).item()
    permuted = batch_triplet_exhaustive(d[np.ix_(perm, perm)], 10.0).item()
    assert permuted == pytest.approx(base, abs=1e-9)


def test_batch_exhaustive_needs_two_pairs():
    with pytest.raises(ContractError):
        batch_triplet_exhaustive(np.array([[0.3]]), 10.0)


def test_batch_exhaustive_excludes_semi_positives():
    d = np.array([[0.2, 0.5, 0.9], [0.5, 0.3, 0.8], [0.7, 0.6, 0.1]])
    excl = np.zeros((3, 3), dtype=bool)
    excl[0, 1] = True  # aerial 1 is semi-positive for ground 0
    got = batch_triplet_exhaustive(d, 10.0, exclude_mask=excl).item()
    terms = []
    for i in range(3):
        for j in range(3):
            if i == j:
                continue
            if not excl[i, j]:
                terms.append(soft_margin_triplet(d[i][i], d[i][j], 10.0))
            if not excl[j, i]:
                terms.append(soft_margin_triplet(d[i][i], d[j][i], 10.0))
    assert got == pytest.approx(float(np.mean(terms)), abs=1e-6)


# ---------------------------------------------------------------------------
# semi-hard mining
# ---------------------------------------------------------------------------


def test_semi_hard_select_examples():
    assert semi_hard_select(0.5, [0.3, 0.55, 0.9]) == 0.55
    assert semi_hard_select(0.1, [0.3, 0.55, 0.9]) == 0.3  # all harder: min
    assert semi_hard_select(1.0, [0.3, 0.55, 0.9]) == 0.9  # none harder: max fallback
    with pytest.raises(ContractError):
        semi_hard_select(0.5, [])


def _brute_semi_hard(d, alpha):
    n = len(d)
    losses = []
    for i in range(n):
        negs = [d[i][j] for j in range(n) if j != i]
        losses.append(soft_margin_triplet(d[i][i], semi_hard_select(d[i][i], negs), alpha))
    for i in range(n):
        negs = [d[j][i] for j in range(n) if j != i]
        losses.append(soft_margin_triplet(d[i][i], semi_hard_select(d[i][i], negs), alpha))
    return float(np.mean(losses))


def test_batch_semi_hard_n2_symmetric_equals_exhaustive():
    d = np.array([[0.2, 0.8], [0.8, 0.4]])
    a = batch_triplet_semi_hard(d, 10.0).item()
    b = batch_triplet_exhaustive(d, 10.0).item()
    assert a == pytest.approx(b, abs=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_batch_semi_hard_matches_per_anchor_enumeration(n, seed):
    d = _rand_dist_matrix(np.random.default_rng(seed), n)
    got = batch_triplet_semi_hard(d, 10.0).item()
    assert got == pytest.approx(_brute_semi_hard(d, 10.0), abs=1e-6)


def test_batch_semi_hard_permutation_invariant():
    rng = np.random.default_rng(8)
    d = _rand_dist_matrix(rng, 6)
    perm = rng.permutation(6)
    base = batch_triplet_semi_hard(d, 10.0).item()
    permuted = batch_triplet_semi_hard(d[np.ix_(perm, perm)], 10.0).item()
    assert permuted == pytest.approx(base, abs=1e-9)


def test_batch_semi_hard_monotone_for_small_delta():
    """Pushing every negative out by a small delta cannot raise the loss.

    Small means below the least margin by which a selection could flip
    (a large delta can pull a previously-easy negative into semi-hard range,
    which legitimately raises the mined loss).
    """
    rng = np.random.default_rng(2)
    for _ in range(20):
        d = _rand_dist_matrix(rng, 5)
        gaps = []
        for i in range(5):
            for j in range(5):
                if i != j:
                    gaps.append(abs(d[i, j] - d[i, i]))
                    gaps.append(abs(d[j, i] - d[i, i]))
        delta = 0.49 * min(gaps)
        if delta <= 0:
            continue
        bumped = d + delta * (1 - np.eye(5))
        base = batch_triplet_semi_hard(d, 10.0).item()
        moved = batch_triplet_semi_hard(bumped, 10.0).item()
        assert moved <= base + 1e-9


def test_exhaustive_monotone_for_any_delta():
    rng = np.random.default_rng(3)
    d = _rand_dist_matrix(rng, 5)
    for delta in (1e-3, 0.1, 0.5):
        bumped = d + delta * (1 - np.eye(5))
        assert (
            batch_triplet_exhaustive(bumped, 10.0).item()
            <= batch_triplet_exhaustive(d, 10.0).item() + 1e-9
        )


# ---------------------------------------------------------------------------
# InfoNCE
# ---------------------------------------------------------------------------


def test_info_nce_uniform_is_ln_n():
    s = np.full((4, 4), 0.3)
    loss = info_nce(Tensor(s, dtype=np.float64), tau=0.02).item()
    assert loss == pytest.approx(math.log(4.0), rel=1e-15, abs=0.0)


def test_info_nce_dominant_diagonal_approaches_zero():
    s = np.full((3, 3), -1.0)
    np.fill_diagonal(s, 1.0)
    loss = info_nce(Tensor(s, dtype=np.float64), tau=0.02).item()
    assert 0.0 <= loss < 1e-12


def test_info_nce_identity_n2_tiny_but_exact():
    loss = info_nce(Tensor(np.eye(2), dtype=np.float64), tau=0.02).item()
    # each row: log(1 + e^-50); resolved exactly by the log1p form
    assert loss == pytest.approx(math.log1p(math.exp(-50.0)), rel=1e-12)
    assert loss > 0.0


def test_info_nce_permutation_invariant():
    rng = np.random.default_rng(4)
    s = rng.uniform(-1, 1, (5, 5))
    perm = rng.permutation(5)
    a = info_nce(Tensor(s, dtype=np.float64), tau=0.1).item()
    b = info_nce(Tensor(s[np.ix_(perm, perm)], dtype=np.float64), tau=0.1).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_info_nce_excludes_semi_positives_from_denominator():
    s = np.array([[0.9, 0.95, -0.5], [0.1, 0.8, 0.0], [-0.2, 0.3, 0.7]])
    excl = np.zeros((3, 3), dtype=bool)
    excl[0, 1] = True  # a near-duplicate that must not act as a negative
    with_excl = info_nce(Tensor(s, dtype=np.float64), tau=0.1, exclude_mask=excl).item()
    without = info_nce(Tensor(s, dtype=np.float64), tau=0.1).item()
    assert with_excl < without  # removing a hard negative lowers the loss


def test_loss_config_validation():
    with pytest.raises(ContractError):
        LossConfig(alpha=-1.0)
    with pytest.raises(ContractError):
        LossConfig(tau=0.0)
    with pytest.raises(ContractError):
        LossConfig(strategy="hardest")


def test_pair_loss_dispatch():
    rng = np.random.default_rng(5)
    g = l2_normalize(Tensor(rng.standard_normal((4, 8)) + 0.2, dtype=np.float64))
    a = l2_normalize(Tensor(rng.standard_normal((4, 8)) + 0.2, dtype=np.float64))
    for strategy in ("exhaustive", "semi_hard", "info_nce"):
        val = pair_loss(g, a, LossConfig(strategy=strategy)).item()
        assert math.isfinite(val) and val >= 0.0


def test_pairwise_l2_matches_numpy():
    rng = np.random.default_rng(6)
    a = rng.standard_normal((4, 6))
    b = rng.standard_normal((5, 6))
    d = pairwise_l2(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
    expected = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    np.testing.assert_allclose(d, expected, atol=1e-6)


def test_pairwise_l2_unit_descriptor_range():
    rng = np.random.default_rng(7)
    g = rng.standard_normal((6, 16))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    a = rng.standard_normal((6, 16))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    d = pairwise_l2(Tensor(g, dtype=np.float64), Tensor(a, dtype=np.float64)).data
    assert d.min() >= 0.0 and d.max() <= 2.0 + 1e-9
