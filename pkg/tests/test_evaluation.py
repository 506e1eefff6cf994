import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgpoison.evaluation import (EvalReport, delta_mrr, evaluate, metrics_from_ranks, rank,
                                 rank_from_scores, rank_triples, read_metrics, read_ranks,
                                 select_targets, write_metrics, write_ranks)
from kgpoison.graph import Triple
from kgpoison.models import DistMult, init_model
from conftest import random_graph
from oracles import naive_rank


def test_rank_one_for_dominant_true_entity():
    assert rank_from_scores(np.array([[0.1, 5.0, 0.3]]), [1])[0] == 1.0


def test_all_tied_average_rank():
    assert rank_from_scores(np.zeros((1, 9)), [4])[0] == 5.0


def test_tie_policies_order():
    s = np.array([[1.0, 2.0, 2.0, 2.0, 0.0]])
    assert rank_from_scores(s, [1], tie_policy="optimistic")[0] == 1
    assert rank_from_scores(s, [1], tie_policy="average")[0] == 2
    assert rank_from_scores(s, [1], tie_policy="pessimistic")[0] == 3


def test_filtered_rank_matches_naive_oracle_on_fixture():
    kg = random_graph()
    model = init_model("distmult", 4, kg.n_entities, kg.n_relations, seed=0)
    # coarse rounding of the embeddings creates exact score ties
    model = DistMult(np.round(model.ent * 2) / 2, np.round(model.rel * 2) / 2, 4)
    known = set(kg.existing)
    for filtered in (True, False):
        for tie in ("average", "optimistic", "pessimistic"):
            for side in ("subject", "object"):
                got = rank_triples(model, kg, kg.test, side, filtered, tie)
                want = [naive_rank(model.score, kg.n_entities, tuple(t), side, known, filtered, tie)
                        for t in kg.test.tolist()]
                assert got.tolist() == want


def test_metric_arithmetic():
    m = metrics_from_ranks([1, 2, 4])
    assert m["mrr"] == pytest.approx(7 / 12, abs=1e-15)
    assert m["hits1"] == pytest.approx(1 / 3) and m["mr"] == pytest.approx(7 / 3)


def test_perfect_model_metrics():
    m = metrics_from_ranks([1.0] * 6)
    assert m["mrr"] == 1.0 and m["hits1"] == 1.0


def test_evaluate_counts_both_sides(graph30):
    model = init_model("complex", 4, graph30.n_entities, graph30.n_relations, seed=1)
    rep = evaluate(model, graph30, graph30.test)
    assert len(rep.ranks) == 2 * len(graph30.test)
    assert rep.metrics == metrics_from_ranks(np.concatenate([rep.subject_ranks, rep.object_ranks]))


def test_evaluate_empty_rejected(graph30):
    model = init_model("distmult", 4, graph30.n_entities, graph30.n_relations, seed=1)
    with pytest.raises(ValueError):
        evaluate(model, graph30, np.zeros((0, 3)))


def test_singleton_evaluate_equals_rank(graph30):
    model = init_model("transe", 4, graph30.n_entities, graph30.n_relations, seed=1)
    t = tuple(graph30.test[0])
    rep = evaluate(model, graph30, [t])
    assert rep.subject_ranks[0] == rank(model, t, graph30, "subject")
    assert rep.object_ranks[0] == rank(model, t, graph30, "object")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1000), st.sampled_from(["distmult", "complex", "transe"]))
def test_rank_invariants(seed, kind):
    kg = random_graph(n_entities=15, n_train=50, n_valid=5, n_test=5, seed=seed % 10)
    model = init_model(kind, 3, kg.n_entities, kg.n_relations, seed=seed)
    for side in ("subject", "object"):
        filt = rank_triples(model, kg, kg.test, side, True)
        raw = rank_triples(model, kg, kg.test, side, False)
        assert np.all(filt <= raw) and np.all(filt >= 1) and np.all(raw <= kg.n_entities)
        lo = rank_triples(model, kg, kg.test, side, True, "optimistic")
        hi = rank_triples(model, kg, kg.test, side, True, "pessimistic")
        assert np.all(lo <= filt) and np.all(filt <= hi)
    rep = evaluate(model, kg, kg.test)
    m = rep.metrics
    assert 0 < m["mrr"] <= 1 and m["hits1"] <= m["hits3"] <= m["hits10"] <= 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.sampled_from(["exp", "cube", "affine"]))
def test_rank_invariant_under_monotone_transform(seed, transform):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.normal(size=(4, 12)), 1)
    mask = rng.random((4, 12)) < 0.3
    true = rng.integers(12, size=4)
    f = {"exp": np.exp, "cube": lambda x: x ** 3, "affine": lambda x: 3 * x - 7}[transform]
    for tie in ("average", "optimistic", "pessimistic"):
        np.testing.assert_array_equal(rank_from_scores(scores, true, mask, tie),
                                      rank_from_scores(f(scores), true, mask, tie))


def _report(sub, obj):
    n = len(sub)
    return EvalReport(np.arange(3 * n).reshape(n, 3), np.asarray(sub, float), np.asarray(obj, float))


def test_select_targets_threshold_one():
    rep = _report([1, 1, 2, 1, 1], [1, 1, 1, 3, 1])
    assert select_targets(rep, 1, cap=100) == [Triple(0, 1, 2), Triple(3, 4, 5), Triple(12, 13, 14)]


def test_select_targets_cap_is_deterministic():
    rep = _report([1, 2, 3, 4, 5, 50], [1, 2, 3, 4, 5, 1])
    a = select_targets(rep, 10, cap=2, seed=3)
    assert len(a) == 2 and a == select_targets(rep, 10, cap=2, seed=3)


def test_select_targets_none_qualify():
    with pytest.raises(ValueError):
        select_targets(_report([5], [5]), 1)


def test_delta_mrr_examples():
    d = delta_mrr(1.0, 0.25)
    assert d.change == pytest.approx(-75.0) and d.reduction == pytest.approx(75.0)
    assert delta_mrr(0.9, 0.9).change == 0.0
    assert delta_mrr(0.90, 0.57).change == pytest.approx(-36.6667, abs=1e-4)
    with pytest.raises(ZeroDivisionError):
        delta_mrr(0.0, 0.5)


def test_ranks_and_metrics_files(tmp_path):
    rep = _report([1, 2.5], [3, 1])
    write_ranks(rep, tmp_path / "ranks.tsv")
    lines = (tmp_path / "ranks.tsv").read_text().splitlines()
    assert lines[0] == "s\tr\to\tsubject_rank\tobject_rank" and lines[2] == "3\t4\t5\t2.5\t1"
    back = read_ranks(tmp_path / "ranks.tsv")
    assert back.mrr == rep.mrr
    write_metrics(rep.metrics, tmp_path / "metrics.txt")
    assert read_metrics(tmp_path / "metrics.txt") == rep.metrics
    assert set(read_metrics(tmp_path / "metrics.txt")) == {"mr", "mrr", "hits1", "hits3", "hits10"}
