import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossview.errors import ContractError, ShapeError
from crossview.evaluate import (
    LabelSet,
    average_precision,
    build_index,
    evaluate_retrieval,
    hit_rate,
    mean_average_precision,
    one_percent_k,
    rank_all,
    recall_at_k,
    report_json,
    self_match_labels,
)


def _unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _ranking_from_positive_ranks(pos_ranks, n_ref):
    """One query ranking per requested positive rank; positive id is 0."""
    rankings, labels = [], []
    for r in pos_ranks:
        others = list(range(1, n_ref))
        ranking = others[: r - 1] + [0] + others[r - 1 :]
        rankings.append(ranking)
        labels.append(LabelSet(positives={0}))
    return np.array(rankings), labels


# ---------------------------------------------------------------------------
# index + ranking
# ---------------------------------------------------------------------------


def test_build_index_validates():
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError):
        build_index(rng.standard_normal((3, 4)) * 3.0)  # not unit norm
    v = _unit_rows(rng, 3, 4)
    with pytest.raises(ContractError):
        build_index(v, ids=[1, 1, 2])


def test_rank_all_self_query_first():
    rng = np.random.default_rng(1)
    refs = _unit_rows(rng, 10, 8)
    index = build_index(refs)
    rankings = rank_all(refs[3:4], index)
    assert rankings[0, 0] == 3


def test_rank_all_brute_force_order():
    # distances 0.2 / 0.1 / 0.3 from the query -> order [1, 0, 2]
    q = np.array([[1.0, 0.0]])
    angles = [0.2, 0.1, 0.3]
    refs = np.array([[math.cos(a), math.sin(a)] for a in angles])
    rankings = rank_all(q, build_index(refs))
    np.testing.assert_array_equal(rankings[0], [1, 0, 2])


def test_rank_all_tie_broken_by_id():
    v = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    index = build_index(v, ids=[7, 2, 5])
    rankings = rank_all(np.array([[1.0, 0.0]]), index)
    np.testing.assert_array_equal(rankings[0], [2, 7, 5])


def test_rank_all_dim_mismatch():
    index = build_index(_unit_rows(np.random.default_rng(2), 4, 8))
    with pytest.raises(ShapeError):
        rank_all(np.ones((2, 4)), index)


def test_cosine_and_l2_orderings_agree_on_unit_vectors():
    rng = np.random.default_rng(3)
    refs = _unit_rows(rng, 30, 6)
    queries = _unit_rows(rng, 5, 6)
    index = build_index(refs)
    by_l2 = rank_all(queries, index)
    for qi in range(len(queries)):
        cos = queries[qi] @ refs.T
        order = np.lexsort((index.ids, -cos))
        np.testing.assert_array_equal(by_l2[qi], index.ids[order])


# ---------------------------------------------------------------------------
# recall
# ---------------------------------------------------------------------------


def test_recall_perfect_rank_one():
    rankings, labels = _ranking_from_positive_ranks([1, 1, 1], 10)
    assert recall_at_k(rankings, labels, 1) == 1.0


def test_recall_enumeration_instance():
    """Positive ranks {1, 2, 11, 200} in a 1000-item gallery, recomputed by
    direct enumeration: r@1 = 1/4, r@10 = 2/4, and r@1% (K = ceil(1000/100)
    = 10) = 2/4 as well since rank 11 just misses the cutoff."""
    rankings, labels = _ranking_from_positive_ranks([1, 2, 11, 200], 1000)
    assert recall_at_k(rankings, labels, 1) == 0.25
    assert recall_at_k(rankings, labels, 10) == 0.5
    assert one_percent_k(1000) == 10
    assert recall_at_k(rankings, labels, one_percent_k(1000)) == 0.5
    # a case where the 1% cutoff actually differs from r@10
    assert one_percent_k(1050) == 11
    assert recall_at_k(rankings, labels, 11) == 0.75


def test_recall_total_at_full_gallery():
    rankings, labels = _ranking_from_positive_ranks([4, 9, 2], 9)
    assert recall_at_k(rankings, labels, 9) == 1.0


# ---------------------------------------------------------------------------
# hit rate
# ---------------------------------------------------------------------------


def test_hit_rate_semi_positive_counts():
    rankings = np.array([[5, 0, 1]])
    labels = [LabelSet(positives={0}, semi_positives={5})]
    assert hit_rate(rankings, labels) == 1.0
    assert recall_at_k(rankings, labels, 1) == 0.0


def test_hit_rate_negative_then_positive_is_miss():
    rankings = np.array([[7, 0, 1]])
    labels = [LabelSet(positives={0})]
    assert hit_rate(rankings, labels) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 5000))
def test_hit_rate_never_below_r1(seed):
    rng = np.random.default_rng(seed)
    n_ref = int(rng.integers(3, 30))
    n_q = int(rng.integers(1, 10))
    rankings = np.stack([rng.permutation(n_ref) for _ in range(n_q)])
    labels = []
    for _ in range(n_q):
        pos = set(rng.choice(n_ref, rng.integers(1, 3), replace=False).tolist())
        semi = set(rng.choice(n_ref, rng.integers(0, 3), replace=False).tolist()) - pos
        labels.append(LabelSet(positives=pos, semi_positives=semi))
    assert hit_rate(rankings, labels) >= recall_at_k(rankings, labels, 1)


# ---------------------------------------------------------------------------
# mAP
# ---------------------------------------------------------------------------


def test_ap_single_positive_rank_one():
    assert average_precision(np.array([0, 1, 2]), LabelSet(positives={0})) == 1.0


def test_ap_two_positives_enumeration():
    # positives at ranks 1 and 3 of 4: AP = (1/1 + 2/3) / 2 = 5/6
    ap = average_precision(np.array([0, 9, 1, 8]), LabelSet(positives={0, 1}))
    assert ap == pytest.approx(5 / 6)


def test_ap_skips_semi_positives():
    # semi-positive at rank 1 is removed from the list entirely
    ap = average_precision(np.array([5, 0, 1]), LabelSet(positives={0}, semi_positives={5}))
    assert ap == 1.0


def test_ap_reversal_never_better_when_positives_lead():
    rng = np.random.default_rng(4)
    for _ in range(20):
        n = int(rng.integers(3, 12))
        n_pos = int(rng.integers(1, n))
        ranking = np.arange(n)
        label = LabelSet(positives=set(range(n_pos)))
        assert average_precision(ranking, label) == 1.0
        assert average_precision(ranking[::-1], label) <= 1.0


def test_map_excludes_and_counts_unpositve_queries():
    rankings = np.array([[0, 1], [1, 0]])
    labels = [LabelSet(positives={0}), LabelSet()]
    mapv, skipped = mean_average_precision(rankings, labels)
    assert mapv == 1.0
    assert skipped == 1


# ---------------------------------------------------------------------------
# exhaustive recomputation oracle
# ---------------------------------------------------------------------------


def _brute_metrics(queries, refs, ids, labels, k):
    """Recompute recall@k and hit rate from raw distances, independently."""
    hits_k, hits_rank1 = 0, 0
    for qi in range(len(queries)):
        dists = [
            (float(np.linalg.norm(queries[qi] - refs[ri])), int(ids[ri]))
            for ri in range(len(refs))
        ]
        dists.sort()
        ordered = [i for _, i in dists]
        if any(i in labels[qi].positives for i in ordered[:k]):
            hits_k += 1
        top = ordered[0]
        if top in labels[qi].positives or top in labels[qi].semi_positives:
            hits_rank1 += 1
    return hits_k / len(queries), hits_rank1 / len(queries)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 5000))
def test_metrics_match_bruteforce_recomputation(seed):
    rng = np.random.default_rng(seed)
    n_ref = int(rng.integers(5, 100))
    n_q = int(rng.integers(1, 12))
    dim = 6
    refs = _unit_rows(rng, n_ref, dim)
    queries = _unit_rows(rng, n_q, dim)
    ids = rng.permutation(n_ref * 2)[:n_ref]
    labels = []
    for _ in range(n_q):
        pos = set(int(ids[i]) for i in rng.choice(n_ref, rng.integers(1, 3), replace=False))
        semi = (
            set(int(ids[i]) for i in rng.choice(n_ref, rng.integers(0, 3), replace=False))
            - pos
        )
        labels.append(LabelSet(positives=pos, semi_positives=semi))
    index = build_index(refs, ids)
    rankings = rank_all(queries, index)
    for k in (1, 5, one_percent_k(n_ref)):
        got = recall_at_k(rankings, labels, k)
        want, want_hit = _brute_metrics(queries, refs, ids, labels, k)
        assert got == want
    assert hit_rate(rankings, labels) == _brute_metrics(queries, refs, ids, labels, 1)[1]


def test_metrics_invariant_under_relabeling():
    rng = np.random.default_rng(7)
    refs = _unit_rows(rng, 20, 5)
    queries = _unit_rows(rng, 6, 5)
    ids_a = np.arange(20)
    # strictly monotone relabeling keeps tie-break order identical
    ids_b = ids_a * 7 + 3
    labels_a = [LabelSet(positives={int(rng.integers(0, 20))}) for _ in range(6)]
    labels_b = [
        LabelSet(positives={int(next(iter(l.positives)) * 7 + 3)}) for l in labels_a
    ]
    ra = rank_all(queries, build_index(refs, ids_a))
    rb = rank_all(queries, build_index(refs, ids_b))
    for k in (1, 3, 10):
        assert recall_at_k(ra, labels_a, k) == recall_at_k(rb, labels_b, k)
    assert hit_rate(ra, labels_a) == hit_rate(rb, labels_b)
    assert mean_average_precision(ra, labels_a) == mean_average_precision(rb, labels_b)


def test_report_shape_and_json():
    rng = np.random.default_rng(8)
    refs = _unit_rows(rng, 25, 5)
    queries = refs[:10].copy()
    index = build_index(refs)
    report = evaluate_retrieval(queries, index, self_match_labels(range(10)))
    assert report.r_at[1] == 1.0
    assert report.n_queries == 10
    assert 0.0 <= report.map <= 1.0
    ks = sorted(report.r_at)
    assert all(report.r_at[a] <= report.r_at[b] for a, b in zip(ks, ks[1:]))
    doc = json.loads(report_json(report, config_hash="c", checkpoint_hash="k"))
    assert doc["config_hash"] == "c" and doc["checkpoint_hash"] == "k"
    assert doc["n_queries"] == 10


def test_label_set_disjointness():
    with pytest.raises(ContractError):
        LabelSet(positives={1}, semi_positives={1})


def test_index_persistence_roundtrip(tmp_path):
    from crossview.evaluate import load_index, save_index

    rng = np.random.default_rng(9)
    index = build_index(_unit_rows(rng, 12, 8).astype(np.float32), ids=np.arange(12) * 3)
    path = tmp_path / "index.ckpt"
    save_index(index, path)
    loaded = load_index(path)
    np.testing.assert_array_equal(loaded.ids, index.ids)
    # float32 storage; vectors built from float32 rows round-trip exactly
    np.testing.assert_array_equal(
        loaded.vectors.astype(np.float32), index.vectors.astype(np.float32)
    )
    # rankings from the reloaded index are identical
    q = _unit_rows(rng, 3, 8)
    np.testing.assert_array_equal(rank_all(q, loaded), rank_all(q, index))
