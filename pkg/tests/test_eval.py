import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptcrs.evaluation import EvalReport, distinct_n, evaluate, recall_at_k
from promptcrs.training import StagingError


def test_recall_rank_thresholds():
    ranked = [list(range(100))] * 3
    targets = [{0}, {10}, {50}]  # hit ranks 1, 11, 51
    assert recall_at_k(ranked, targets, 1) == pytest.approx(1 / 3)
    assert recall_at_k(ranked, targets, 10) == pytest.approx(1 / 3)
    assert recall_at_k(ranked, targets, 11) == pytest.approx(2 / 3)
    assert recall_at_k(ranked, targets, 50) == pytest.approx(2 / 3)
    assert recall_at_k(ranked, targets, 51) == pytest.approx(1.0)


def test_recall_any_target_counts():
    assert recall_at_k([[5, 6]], [{6, 99}], 2) == 1.0
    assert recall_at_k([[5, 6]], [{99}], 2) == 0.0
    assert recall_at_k([], [], 10) == 0.0


def test_recall_errors():
    with pytest.raises(ValueError):
        recall_at_k([[1]], [{1}], 0)
    with pytest.raises(ValueError):
        recall_at_k([[1], [2]], [{1}], 1)
    with pytest.raises(ValueError):
        recall_at_k([[1]], [set()], 1)


def _brute_recall(ranked_lists, target_sets, k):
    hits = [bool(set(r[:k]) & t) for r, t in zip(ranked_lists, target_sets)]
    return sum(hits) / len(hits)


@given(st.data())
@settings(max_examples=30, deadline=None)
def test_recall_agrees_with_brute_force(data):
    n = data.draw(st.integers(1, 6))
    ranked_lists = [
        data.draw(st.lists(st.integers(0, 20), min_size=1, max_size=15, unique=True))
        for _ in range(n)
    ]
    target_sets = [
        set(data.draw(st.lists(st.integers(0, 20), min_size=1, max_size=4)))
        for _ in range(n)
    ]
    k = data.draw(st.integers(1, 20))
    assert recall_at_k(ranked_lists, target_sets, k) == pytest.approx(
        _brute_recall(ranked_lists, target_sets, k)
    )


@given(st.data())
@settings(max_examples=20, deadline=None)
def test_recall_monotone_in_k(data):
    n = data.draw(st.integers(1, 5))
    ranked = [
        data.draw(st.lists(st.integers(0, 15), min_size=1, max_size=10, unique=True))
        for _ in range(n)
    ]
    targets = [{data.draw(st.integers(0, 15))} for _ in range(n)]
    values = [recall_at_k(ranked, targets, k) for k in range(1, 12)]
    assert all(a <= b + 1e-12 for a, b in zip(values, values[1:]))


def test_distinct_pooled_examples():
    # two responses share the bigram "a b": 3 distinct bigrams over 2 responses
    assert distinct_n([["a", "b", "a", "b"], ["a", "b", "c"]], 2) == pytest.approx(1.5)
    # a single repetitive response has one distinct bigram
    assert distinct_n([["a", "a", "a"]], 2) == pytest.approx(1.0)
    assert distinct_n([["a", "a", "a"]], 1) == pytest.approx(1.0)
    assert distinct_n([["x", "y"], ["y", "x"]], 1) == pytest.approx(1.0)
    # n longer than every response: zero n-grams
    assert distinct_n([["a"]], 3) == pytest.approx(0.0)
    assert distinct_n([], 2) == 0.0


def test_distinct_errors():
    with pytest.raises(ValueError):
        distinct_n([["a"]], 0)


def _brute_distinct(responses, n):
    grams = {tuple(r[i : i + n]) for r in responses for i in range(len(r) - n + 1)}
    return len(grams) / len(responses) if responses else 0.0


@given(
    st.lists(st.lists(st.sampled_from("abcd"), max_size=6), min_size=1, max_size=5),
    st.integers(1, 3),
)
@settings(max_examples=30, deadline=None)
def test_distinct_agrees_with_brute_force(responses, n):
    assert distinct_n(responses, n) == pytest.approx(_brute_distinct(responses, n))


def test_distinct_order_invariance():
    a = [["a", "b"], ["c", "d"], ["a", "b"]]
    assert distinct_n(a, 2) == distinct_n(list(reversed(a)), 2)


def test_eval_report_validation():
    ok = EvalReport(recall={1: 0.2, 10: 0.5}, distinct={2: 1.5}, n_instances=4,
                    n_rec_instances=3)
    d = ok.to_dict()
    assert d["recall@1"] == 0.2 and d["recall@10"] == 0.5 and d["dist-2"] == 1.5
    with pytest.raises(ValueError, match="nondecreasing"):
        EvalReport(recall={1: 0.5, 10: 0.2}, distinct={}, n_instances=1,
                   n_rec_instances=1)
    with pytest.raises(ValueError, match="out of"):
        EvalReport(recall={1: 1.5}, distinct={}, n_instances=1, n_rec_instances=1)


def test_evaluate_requires_all_stages(tmp_path):
    with pytest.raises(StagingError):
        evaluate(tmp_path)


def test_evaluate_full_pipeline(tiny_ckpt):
    report = evaluate(tiny_ckpt.ckpt_dir, tiny_ckpt.data.corpus, tiny_ckpt.data.dir)
    assert report.n_instances > 0
    assert 0 < report.n_rec_instances <= report.n_instances
    ks = sorted(report.recall)
    assert ks == [1, 10, 50]
    for lo, hi in zip(ks, ks[1:]):
        assert report.recall[lo] <= report.recall[hi] + 1e-12
    for v in report.distinct.values():
        assert v >= 0 and math.isfinite(v)
    assert report.config_digest


def test_evaluate_deterministic(tiny_ckpt):
    a = evaluate(tiny_ckpt.ckpt_dir, tiny_ckpt.data.corpus, tiny_ckpt.data.dir)
    b = evaluate(tiny_ckpt.ckpt_dir, tiny_ckpt.data.corpus, tiny_ckpt.data.dir)
    assert a == b
