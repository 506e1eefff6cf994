import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kgpoison.attribution import (METHODS, LissaConfig, LissaDivergedError, LossConfig,
                                  attribution_attack, dissimilar_addition, exact_hessian, hvp,
                                  influence_scores, lissa_inverse_hvp, objective, select_addition,
                                  select_deletion, similarity, triple_loss_grad)
from kgpoison.graph import KnowledgeGraph, Triple, neighbourhood
from kgpoison.models import DistMult, init_model
from kgpoison.training import ModelConfig, TrainConfig, train
from conftest import random_graph
from oracles import fd_grad, max_rel_err


@pytest.fixture(scope="module")
def trained():
    kg = random_graph(n_entities=12, n_relations=2, n_train=30, n_valid=0, n_test=6, seed=5)
    cfg = TrainConfig(strategy="1vsall", loss="ce", optimizer="lbfgs", epochs=300,
                      regularizer="l2", reg_weight=1e-2)
    model = train(kg, ModelConfig("distmult", 4), cfg).model
    return kg, model, LossConfig.from_train(cfg)


def _target_with_neighbours(kg):
    for t in kg.triples("test"):
        if len(neighbourhood(kg, t)) >= 3:
            return t
    raise AssertionError("fixture has no usable target")


def test_cos_self_similarity_is_top(trained):
    kg, model, _ = trained
    z = _target_with_neighbours(kg)
    cands = list(neighbourhood(kg, z).members) + [z]
    top = influence_scores("cos", model, z, cands)[0]
    assert top.candidate == z and top.value == pytest.approx(1.0)


def test_orthogonal_vectors_have_zero_dot():
    assert similarity("dot", np.array([1.0, 0.0]), np.array([[0.0, 3.0]]))[0] == 0.0


def test_value_ranges(trained):
    kg, model, lc = trained
    z = _target_with_neighbours(kg)
    cands = neighbourhood(kg, z).members
    for m in ("l2", "gl"):
        assert all(s.value <= 0 for s in influence_scores(m, model, z, cands, lc))
    for m in ("cos", "gc"):
        assert all(-1 <= s.value <= 1 for s in influence_scores(m, model, z, cands, lc))


def test_all_methods_rank_the_same_candidates(trained):
    kg, model, lc = trained
    z = _target_with_neighbours(kg)
    cands = set(neighbourhood(kg, z).members)
    lissa = LissaConfig(damping=0.01, scale=50, depth=50)
    for m in METHODS:
        ranked = influence_scores(m, model, z, cands, lc, kg, lissa)
        assert {s.candidate for s in ranked} == cands and len(ranked) == len(cands)
        values = [s.value for s in ranked]
        assert values == sorted(values, reverse=True)


def test_feature_scores_match_exhaustive_oracle(trained):
    kg, model, _ = trained
    z = _target_with_neighbours(kg)
    fz = model.ent[z.s] * model.rel[z.r] * model.ent[z.o]
    best = {}
    for x in neighbourhood(kg, z).members:
        fx = model.ent[x.s] * model.rel[x.r] * model.ent[x.o]
        best.setdefault("dot", []).append((float(fz @ fx), x))
        best.setdefault("l2", []).append((-float(np.linalg.norm(fz - fx)), x))
        best.setdefault("cos", []).append((float(fz @ fx / np.linalg.norm(fz) / np.linalg.norm(fx)), x))
    for m, vals in best.items():
        want = max(vals, key=lambda p: (p[0], tuple(-np.array(p[1]))))
        got = select_deletion(m, model, kg, z)
        assert got.candidate == want[1] and got.value == pytest.approx(want[0])


def test_single_member_neighbourhood_any_method():
    kg = KnowledgeGraph(("a", "b", "c"), ("p",), np.array([[0, 0, 1]]), test=np.array([[1, 0, 2]]))
    model = init_model("distmult", 3, 3, 1, seed=0)
    for m in ("dot", "l2", "cos", "gd", "gl", "gc"):
        assert select_deletion(m, model, kg, (1, 0, 2)).candidate == Triple(0, 0, 1)


def test_empty_neighbourhood_raises():
    kg = KnowledgeGraph(("a", "b", "c", "d"), ("p",), np.array([[0, 0, 1]]))
    model = init_model("distmult", 3, 4, 1, seed=0)
    with pytest.raises(ValueError, match="empty neighbourhood"):
        select_deletion("cos", model, kg, (2, 0, 3))


def test_lexicographic_tie_break():
    # identical feature vectors for two candidates
    ent = np.ones((4, 2))
    model = DistMult(ent, np.ones((1, 2)), 2)
    ranked = influence_scores("dot", model, (0, 0, 1), [(1, 0, 3), (0, 0, 2)])
    assert [s.candidate for s in ranked] == [Triple(0, 0, 2), Triple(1, 0, 3)]


vecs = arrays(np.float64, (5, 4), elements=st.floats(-5, 5, allow_nan=False))


@settings(max_examples=50, deadline=None)
@given(vecs, st.integers(0, 4), st.floats(0.1, 10))
def test_cos_invariant_to_rescaling_candidate(X, i, c):
    z = X[0]
    Y = X[1:].copy()
    j = i % 4
    Y2 = Y.copy()
    Y2[j] *= c
    np.testing.assert_allclose(similarity("cos", z, Y), similarity("cos", z, Y2), atol=1e-9)


def test_dot_is_not_scale_invariant():
    z = np.array([1.0, 0.0])
    X = np.array([[1.0, 1.0], [0.9, 0.0]])
    assert np.argmax(similarity("dot", z, X)) == 0
    assert np.argmax(similarity("cos", z, X)) == 1
    X[0] *= 0.1
    assert np.argmax(similarity("dot", z, X)) == 1


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000))
def test_feature_scores_ignore_unrelated_entity_rows(seed):
    kg = random_graph(n_entities=12, n_train=30, n_valid=0, n_test=4, seed=seed % 7)
    model = init_model("complex", 3, 12, kg.n_relations, seed=seed)
    z = kg.triples("test")[0]
    cands = neighbourhood(kg, z).members
    if not cands:
        return
    used = {z.s, z.o} | {e for c in cands for e in (c.s, c.o)}
    free = [e for e in range(12) if e not in used]
    other = model.copy()
    rng = np.random.default_rng(seed)
    other.ent[free] = other.ent[rng.permutation(free)] * 3.0 if free else other.ent[free]
    for m in ("dot", "l2", "cos"):
        assert influence_scores(m, model, z, cands) == influence_scores(m, other, z, cands)


def test_if_with_identity_hessian_matches_gd(trained):
    kg, model, lc = trained
    z = _target_with_neighbours(kg)
    cands = neighbourhood(kg, z).members
    gd = [s.candidate for s in influence_scores("gd", model, z, cands, lc)]
    ident = [s.candidate for s in influence_scores("if", model, z, cands, lc, inverse_hvp=lambda v: v)]
    assert gd == ident


@pytest.mark.parametrize("kind", ["distmult", "complex", "transe"])
@pytest.mark.parametrize("loss", ["bce", "ce", "margin"])
def test_triple_loss_gradient_matches_finite_differences(kind, loss):
    kg = random_graph(n_entities=6, n_relations=2, n_train=8, n_valid=0, n_test=0, seed=2)
    model = init_model(kind, 2, 6, 2, seed=1)
    lc = LossConfig(loss=loss, margin=1.0)
    t = tuple(kg.train[0])
    g = triple_loss_grad(model, t, lc)
    num = fd_grad(lambda th: objective(model.with_flat(th), [t], lc, with_reg=False)[0], model.flat())
    assert max_rel_err(g, num, floor=1e-5) < 1e-4


def test_hvp_matches_dense_hessian_and_is_symmetric(trained):
    kg, model, lc = trained
    H = exact_hessian(model, kg, lc)
    assert np.allclose(H, H.T, atol=1e-6)
    v = np.random.default_rng(0).normal(size=model.n_params)
    np.testing.assert_allclose(hvp(model, kg.train, v, lc), H @ v, rtol=1e-5, atol=1e-7)


def test_lissa_full_batch_matches_damped_solve(trained):
    kg, model, lc = trained
    H = exact_hessian(model, kg, lc)
    v = triple_loss_grad(model, kg.triples("test")[0], lc)
    cfg = LissaConfig(damping=0.01, scale=10.0, depth=4000, batch_size=len(kg.train))
    est = lissa_inverse_hvp(model, kg, v, lc, cfg)
    want = np.linalg.solve(H + cfg.damping * cfg.scale * np.eye(len(H)), v)
    assert np.linalg.norm(est - want) / np.linalg.norm(want) < 1e-3


def test_lissa_divergence_is_reported(trained):
    kg, model, lc = trained
    v = triple_loss_grad(model, kg.triples("test")[0], lc)
    with pytest.raises(LissaDivergedError, match="damping or scale"):
        lissa_inverse_hvp(model, kg, v, lc, LissaConfig(damping=0.0, scale=1e-3, depth=200,
                                                         batch_size=len(kg.train)))


def test_dissimilar_addition_forced_choice():
    kg = KnowledgeGraph(("a", "b"), ("p",), np.array([[0, 0, 1]]), test=np.array([[1, 0, 1]]))
    model = init_model("distmult", 2, 2, 1, seed=0)
    # influential (a,p,b); the target shares b, so the subject a is replaced; only b remains
    assert dissimilar_addition(model, kg, (1, 0, 1), (0, 0, 1)) == Triple(1, 0, 1)


def test_dissimilar_addition_degenerate():
    kg = KnowledgeGraph(("a", "b"), ("p",), np.array([[0, 0, 1], [0, 0, 0]]))
    model = init_model("distmult", 2, 2, 1, seed=0)
    with pytest.raises(ValueError):
        dissimilar_addition(model, kg, (0, 0, 0), (0, 0, 1))


@pytest.mark.parametrize("kind", ["distmult", "complex", "transe"])
def test_dissimilar_addition_matches_linear_scan(kind):
    kg = random_graph(n_entities=15, n_train=40, n_valid=0, n_test=5, seed=4)
    model = init_model(kind, 4, 15, kg.n_relations, seed=3)
    z = kg.triples("test")[0]
    x = sorted(neighbourhood(kg, z).members)[0]
    old = x.o if x.s in (z.s, z.o) else x.s
    best, best_d = None, -np.inf
    for e in range(15):
        cand = (x.s, x.r, e) if x.s in (z.s, z.o) else (e, x.r, x.o)
        if e == old or cand in kg.train_set:
            continue
        a, b = model.ent[e], model.ent[old]
        d = (1 - a @ b / np.linalg.norm(a) / np.linalg.norm(b)) if kind != "transe" else np.linalg.norm(a - b)
        if d > best_d:
            best, best_d = cand, d
    assert dissimilar_addition(model, kg, z, x) == Triple(*best)


def test_select_addition_budget(trained):
    kg, model, lc = trained
    z = _target_with_neighbours(kg)
    adds = select_addition("cos", model, kg, z, n=2)
    assert 1 <= len(adds) <= 2 and all(a not in kg.train_set for a in adds)
    assert all({a.s, a.o} & {z.s, z.o} for a in adds)


def test_attack_results(trained):
    kg, model, lc = trained
    targets = [t for t in kg.triples("test") if len(neighbourhood(kg, t))][:3]
    res = attribution_attack("l2", model, kg, targets, "del")
    assert [r.target for r in res] == targets
    assert all(len(r.deletions) == 1 and r.deletions[0] in kg.train_set for r in res)
    res = attribution_attack("gc", model, kg, targets, "add", loss_cfg=lc)
    assert all(len(r.additions) == 1 and r.additions[0] not in kg.train_set for r in res)
