import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgpoison.graph import (DatasetFormatError, EditError, KnowledgeGraph, Triple, apply_edits,
                            load_dataset, neighbourhood, read_edits, write_edits, write_graph)
from conftest import random_graph, write_tsv


def test_load_fixture_dedups_and_filters(tmp_path):
    write_tsv(tmp_path / "train.txt", [("a", "p", "b"), ("b", "p", "c"), ("a", "p", "b"),
                                       ("c", "q", "d"), ("d", "p", "a")])
    write_tsv(tmp_path / "valid.txt", [("a", "p", "zz")])
    write_tsv(tmp_path / "test.txt", [("a", "q", "c")])
    kg = load_dataset(tmp_path)
    assert len(kg.train) == 4 and len(kg.valid) == 0 and len(kg.test) == 1
    assert kg.entities == ("a", "b", "c", "d") and kg.relations == ("p", "q")
    assert kg.info["duplicate_train"] == 1


def test_load_empty_train(tmp_path):
    for name in ("train", "valid", "test"):
        (tmp_path / f"{name}.txt").write_text("")
    write_tsv(tmp_path / "test.txt", [("a", "p", "b")])
    kg = load_dataset(tmp_path)
    assert kg.n_entities == 0 and len(kg.train) == 0 and len(kg.valid) == 0 and len(kg.test) == 0


def test_load_missing_file(tmp_path):
    write_tsv(tmp_path / "train.txt", [("a", "p", "b")])
    with pytest.raises(DatasetFormatError, match="missing"):
        load_dataset(tmp_path)


def test_load_malformed_line_names_file_and_line(tmp_path):
    (tmp_path / "train.txt").write_text("a\tp\tb\nbad line\n")
    (tmp_path / "valid.txt").write_text("")
    (tmp_path / "test.txt").write_text("")
    with pytest.raises(DatasetFormatError, match=r"train.txt:2"):
        load_dataset(tmp_path)


def test_indexes_consistent(graph30):
    subj, obj = {}, {}
    for t in graph30.triples():
        subj.setdefault(t.s, set()).add(t)
        obj.setdefault(t.o, set()).add(t)
    assert {k: set(v) for k, v in graph30.by_subject.items()} == subj
    assert {k: set(v) for k, v in graph30.by_object.items()} == obj


def test_no_duplicate_train_rows():
    kg = KnowledgeGraph(("a", "b"), ("p",), np.array([[0, 0, 1], [0, 0, 1], [1, 0, 0]]))
    assert len(kg.train) == 2


def test_bad_ids_rejected():
    with pytest.raises(ValueError):
        KnowledgeGraph(("a",), ("p",), np.array([[0, 0, 3]]))


def test_neighbourhood_chain(tiny_chain):
    nb = neighbourhood(tiny_chain, Triple(0, 0, 1))
    assert set(nb.members) == {Triple(1, 0, 2)}


def test_neighbourhood_isolated_target():
    kg = KnowledgeGraph(("a", "b", "c", "d"), ("p",), np.array([[0, 0, 1]]))
    assert neighbourhood(kg, Triple(2, 0, 3)).members == ()


def test_neighbourhood_unknown_entity(tiny_chain):
    with pytest.raises(EditError):
        neighbourhood(tiny_chain, Triple(0, 0, 9))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_neighbourhood_equals_brute_force(seed):
    kg = random_graph(n_entities=12, n_train=40, n_valid=0, n_test=5, seed=seed % 50)
    rng = np.random.default_rng(seed)
    t = Triple(int(rng.integers(12)), 0, int(rng.integers(12)))
    want = {x for x in kg.triples() if x != t and ({x.s, x.o} & {t.s, t.o})}
    assert set(neighbourhood(kg, t).members) == want


def test_apply_edits_identity(graph30):
    new, n = apply_edits(graph30)
    assert n == 0 and new.same_triples(graph30)


def test_apply_edits_existing_addition_is_noop(graph30):
    new, n = apply_edits(graph30, [], [graph30.triples()[0]])
    assert n == 0 and new.same_triples(graph30)


def test_apply_edits_delete_one_add_two(tiny_chain):
    new, n = apply_edits(tiny_chain, [(0, 0, 1)], [(3, 0, 0), (2, 0, 0)])
    assert n == 2 and len(new.train) == len(tiny_chain.train) + 1
    assert Triple(0, 0, 1) not in new.train_set and Triple(3, 0, 0) in new.train_set
    assert Triple(3, 0, 0) in new.by_subject[3] and Triple(2, 0, 0) in new.by_object[0]


def test_apply_edits_rejects_missing_deletion(tiny_chain):
    with pytest.raises(EditError, match=r"\(3, 0, 3\)"):
        apply_edits(tiny_chain, [(3, 0, 3)])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_apply_edits_composes(seed):
    kg = random_graph(n_entities=10, n_train=30, n_valid=0, n_test=0, seed=seed % 20)
    rng = np.random.default_rng(seed)
    train = kg.triples()
    idx = rng.permutation(len(train))
    d1, d2 = {train[i] for i in idx[:3]}, {train[i] for i in idx[3:5]}
    fresh = [Triple(int(a), 0, int(b)) for a, b in rng.integers(10, size=(6, 2))]
    fresh = [t for t in fresh if t not in kg.train_set]
    a1, a2 = set(fresh[:3]), set(fresh[3:])
    step, _ = apply_edits(kg, d1, a1)
    step, _ = apply_edits(step, d2, a2)
    once, _ = apply_edits(kg, d1 | d2, (a1 - d2) | a2)
    assert set(step.triples()) == set(once.triples())


def test_write_load_round_trip(graph30, tmp_path):
    write_graph(graph30, tmp_path)
    back = load_dataset(tmp_path)
    assert back.same_triples(graph30)
    assert back.vocab_hash() == graph30.vocab_hash()


def test_edits_file(tiny_chain, tmp_path):
    path = tmp_path / "edits.tsv"
    write_edits(tiny_chain, [Triple(0, 0, 1)], [Triple(3, 0, 0)], path)
    lines = path.read_text().splitlines()
    assert lines == ["del\ta\tp\tb", "add\td\tp\ta"]
    assert read_edits(tiny_chain, path) == ([Triple(0, 0, 1)], [Triple(3, 0, 0)])


def test_perturbed_reload_matches(graph30, tmp_path):
    new, _ = apply_edits(graph30, graph30.triples()[:2], [(0, 1, 0)])
    write_graph(new, tmp_path)
    assert load_dataset(tmp_path).same_triples(new)
