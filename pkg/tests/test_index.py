from __future__ import annotations

import io
import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import average_precision_score, roc_auc_score

from ttcloud.index import (
    AnnIndex,
    BucketIndex,
    OodScorer,
    build_index,
    coreset_radius,
    detection_metrics,
    empty_bucket_count,
    expected_bucket_size,
    greedy_coreset,
    ivf_flat_baseline,
    load_index,
    ood_score,
    ood_scores,
    query_index,
    recall_at_r,
    save_index,
    write_metrics_csv,
)
from ttcloud.search import NNSearcher, exhaustive_knn
from ttcloud.tt import TTShape, init_tt, marginal_cores, materialize


@pytest.fixture
def small():
    tt = init_tt(TTShape([4, 5, 3], 3, [3, 2, 1]), seed=1)
    db = np.random.default_rng(2).standard_normal((400, 3))
    return tt, marginal_cores(tt), db


def test_own_leaves_fill_own_buckets():
    tt = init_tt(TTShape([4, 6], 2, 3), seed=0)
    idx = build_index(tt, marginal_cores(tt), materialize(tt), assign_beam=tt.n_leaves)
    np.testing.assert_array_equal(idx.assignment, np.arange(tt.n_leaves))
    assert empty_bucket_count(idx) == 0
    assert expected_bucket_size(idx, exact=True) == 1


def test_empty_db():
    tt = init_tt(TTShape([3, 3], 2, 2))
    idx = build_index(tt, marginal_cores(tt), np.zeros((0, 2)))
    assert empty_bucket_count(idx) == 9
    assert expected_bucket_size(idx) == 0.0
    assert query_index(idx, np.zeros(2), 9)[1] is None


def test_dim_mismatch(small):
    tt, mc, _ = small
    with pytest.raises(ValueError):
        build_index(tt, mc, np.zeros((5, 4)))


def test_exact_assignment_equals_nearest_leaf(small):
    tt, mc, db = small
    idx = build_index(tt, mc, db, assign_beam=tt.n_leaves)
    Y = materialize(tt)
    ref = [exhaustive_knn(Y, x, 1)[0][0] for x in db]
    np.testing.assert_array_equal(idx.assignment, ref)


def test_partition_property(small):
    tt, mc, db = small
    idx = build_index(tt, mc, db, assign_beam=4)
    ids = np.concatenate([np.asarray(v) for v in idx.buckets.values()])
    assert sorted(ids.tolist()) == list(range(len(db)))
    assert all(0 <= b < tt.n_leaves for b in idx.buckets)
    assert all(v == sorted(v) for v in idx.buckets.values())
    assert empty_bucket_count(idx) + len(idx.buckets) == tt.n_leaves


def test_full_probe_is_global_nn(small):
    tt, mc, db = small
    idx = build_index(tt, mc, db)
    for q in np.random.default_rng(3).standard_normal((30, 3)):
        shortlist, best = query_index(idx, q, tt.n_leaves)
        assert len(shortlist) == len(db)
        ref = exhaustive_knn(db, q, 1)[0]
        assert best[0] == ref[0] and best[1] == pytest.approx(ref[1], rel=1e-12)


def test_query_db_vector_and_shortlist_length(small):
    tt, mc, db = small
    idx = build_index(tt, mc, db)
    q = db[17]
    shortlist, best = query_index(idx, q, 6)
    leaves = idx.probe(q, 6)
    assert len(shortlist) == sum(len(idx.bucket(b)) for b in leaves)
    if idx.assignment[17] in leaves:
        assert best == (17, 0.0)
    with pytest.raises(ValueError):
        query_index(idx, q, 0)


def test_shortlist_order_is_probe_then_id(small):
    tt, mc, db = small
    idx = build_index(tt, mc, db)
    q = np.ones(3)
    shortlist, _ = query_index(idx, q, 5)
    expected = [i for b in idx.probe(q, 5) for i in sorted(np.flatnonzero(idx.assignment == b))]
    assert shortlist.tolist() == expected


def test_recall_against_shortlist_scan(small):
    tt, mc, db = small
    idx = build_index(tt, mc, db)
    Q = np.random.default_rng(4).standard_normal((40, 3))
    gt, _ = NNSearcher(db, use_tree=False).query(Q)
    Rs = [1, 3, 10, 30, 100, 400]
    got = recall_at_r(idx, Q, gt, Rs, 7)
    ref = [np.mean([g in query_index(idx, q, 7)[0][:R].tolist() for q, g in zip(Q, gt)]) for R in Rs]
    assert got == pytest.approx(ref, abs=0)
    assert got == sorted(got)
    assert recall_at_r(idx, Q, gt, [len(db)], tt.n_leaves) == [1.0]
    with pytest.raises(ValueError):
        recall_at_r(idx, Q, gt, [0], 3)


def test_recall_single_point_db():
    tt = init_tt(TTShape([2, 2], 2, 2), seed=5)
    idx = build_index(tt, marginal_cores(tt), np.array([[0.3, 0.1]]))
    assert recall_at_r(idx, np.zeros((3, 2)), [0, 0, 0], [1, 5], 4) == [1.0, 1.0]


def _bucket_index(sizes):
    assignment = np.repeat(np.arange(len(sizes)), sizes)
    return BucketIndex(np.zeros((len(assignment), 1)), assignment, len(sizes))


def test_expected_bucket_size_examples():
    assert expected_bucket_size(_bucket_index([3, 1]), exact=True) == Fraction(5, 2)
    assert expected_bucket_size(_bucket_index([0, 7, 0]), exact=True) == 7
    assert expected_bucket_size(_bucket_index([4, 4, 4]), exact=True) == 4


@given(st.lists(st.integers(0, 30), min_size=1, max_size=12).filter(lambda s: sum(s) > 0))
@settings(max_examples=60, deadline=None)
def test_bucket_size_cauchy_schwarz(sizes):
    idx = _bucket_index(sizes)
    n, m = sum(sizes), len(sizes)
    ebs = expected_bucket_size(idx, exact=True)
    assert ebs >= Fraction(n, m)
    assert (ebs == Fraction(n, m)) == (len(set(sizes)) == 1)
    assert empty_bucket_count(idx) == sizes.count(0)


def test_greedy_coreset_examples():
    line = np.array([[0.0], [1.0], [2.0], [10.0]])
    # the point at 10 is row 3
    assert greedy_coreset(line, 2, start=0).tolist() == [0, 3]
    cloud = np.random.default_rng(6).standard_normal((20, 2))
    assert sorted(greedy_coreset(cloud, 20, seed=1).tolist()) == list(range(20))
    first = int(np.random.default_rng(3).integers(20))
    assert greedy_coreset(cloud, 1, seed=3).tolist() == [first]
    with pytest.raises(ValueError):
        greedy_coreset(cloud, 0)
    with pytest.raises(ValueError):
        greedy_coreset(cloud, 21)


@pytest.mark.parametrize("seed", range(5))
def test_greedy_coreset_two_approximation(seed):
    rng = np.random.default_rng(seed)
    cloud = rng.standard_normal((11, 2))
    for m in (1, 2, 3):
        best = min(coreset_radius(cloud, c) for c in itertools.combinations(range(11), m))
        assert coreset_radius(cloud, greedy_coreset(cloud, m, seed=seed)) <= 2 * best + 1e-12


def test_ood_score_examples():
    s = OodScorer(np.array([[0.0]]))
    assert ood_score(s, np.array([3.0])) == 3.0
    bank = np.random.default_rng(7).standard_normal((50, 4))
    s = OodScorer(bank)
    assert ood_score(s, bank[9]) == 0.0
    Q = np.random.default_rng(8).standard_normal((10, 4))
    ref = [np.sqrt(exhaustive_knn(bank, q, 1)[0][1]) for q in Q]
    np.testing.assert_allclose(ood_scores(s, Q), ref, rtol=1e-12)
    with pytest.raises(ValueError):
        ood_score(s, np.zeros(3))
    with pytest.raises(ValueError):
        OodScorer(np.zeros((0, 4)))


def test_detection_metric_examples():
    m = detection_metrics([5, 6], [1, 2])
    assert (m.auroc, m.auprc, m.precision_at_recall90) == (1.0, 1.0, 1.0)
    assert detection_metrics([0.3] * 4, [0.3] * 6).auroc == 0.5
    assert detection_metrics([0.9, 0.8], [0.7, 0.1]).auroc == 1.0
    with pytest.raises(ValueError):
        detection_metrics([], [1.0])
    with pytest.raises(ValueError):
        detection_metrics([np.nan], [1.0])


def test_auroc_is_pairwise_probability():
    rng = np.random.default_rng(9)
    pos = np.round(rng.standard_normal(80) + 0.7, 1)
    neg = np.round(rng.standard_normal(120), 1)
    pairs = [(p > n) + 0.5 * (p == n) for p in pos for n in neg]
    assert detection_metrics(pos, neg).auroc == pytest.approx(np.mean(pairs), rel=1e-12)


def test_metrics_match_sklearn_with_ties():
    rng = np.random.default_rng(10)
    pos = np.round(rng.standard_normal(150) + 1, 1)
    neg = np.round(rng.standard_normal(300), 1)
    y = np.r_[np.ones(150), np.zeros(300)]
    s = np.r_[pos, neg]
    m = detection_metrics(pos, neg)
    assert m.auroc == pytest.approx(roc_auc_score(y, s), rel=1e-12)
    assert m.auprc == pytest.approx(average_precision_score(y, s), rel=1e-12)


def test_precision_at_recall90_hand_case():
    # descending: p p n p n p p p p p p n n p; the 9th positive is the 11th entry
    pos = [10, 9, 7, 5, 4, 3.5, 3, 2.5, 2.2, 0.5]
    neg = [8, 6, 2.1, 1]
    assert detection_metrics(pos, neg).precision_at_recall90 == pytest.approx(9 / 11)


def test_ivf_examples():
    db = np.random.default_rng(11).standard_normal((60, 3))
    assert expected_bucket_size(ivf_flat_baseline(db, 60)) == 1.0
    assert expected_bucket_size(ivf_flat_baseline(db, 1)) == 60.0
    with pytest.raises(ValueError):
        ivf_flat_baseline(db, 61)


def test_ivf_objective_non_increasing():
    db = np.random.default_rng(12).standard_normal((500, 4))
    ivf = ivf_flat_baseline(db, 12, seed=3)
    assert len(ivf.objective) == 26
    assert all(b <= a * (1 + 1e-12) for a, b in zip(ivf.objective, ivf.objective[1:]))


def test_ivf_supports_same_queries():
    db = np.random.default_rng(13).standard_normal((300, 3))
    ivf = ivf_flat_baseline(db, 10)
    Q = np.random.default_rng(14).standard_normal((20, 3))
    gt, _ = NNSearcher(db, use_tree=False).query(Q)
    assert recall_at_r(ivf, Q, gt, [300], 10) == [1.0]
    for q in Q[:5]:
        assert query_index(ivf, q, 10)[1][0] == exhaustive_knn(db, q, 1)[0][0]


def test_index_file_roundtrip(tmp_path, small):
    tt, mc, db = small
    idx = build_index(tt, mc, db)
    save_index(idx, tmp_path / "a.ttix")
    back = load_index(tmp_path / "a.ttix", db)
    assert isinstance(back, AnnIndex)
    np.testing.assert_array_equal(back.assignment, idx.assignment)
    np.testing.assert_array_equal(back.tt.flat_params(), tt.flat_params())
    save_index(back, tmp_path / "b.ttix")
    assert (tmp_path / "a.ttix").read_bytes() == (tmp_path / "b.ttix").read_bytes()
    with pytest.raises(ValueError):
        load_index(tmp_path / "a.ttix", db[:10])


def test_metrics_csv_format():
    buf = io.StringIO()
    write_metrics_csv([("tt_recall", 10, 0.5), ("empty_buckets", "", 3)], buf)
    assert buf.getvalue() == "metric,parameter,value\ntt_recall,10,0.5\nempty_buckets,,3.0\n"
