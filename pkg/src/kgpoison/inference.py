"""Additions that exploit symmetry, inversion and composition.

For a target ``(s, r, o)`` the attack picks a decoy ``(s, r, o')`` (object
side) and ``(s', r, o)`` (subject side) and adds the body atoms of a rule
grounding whose head is the decoy, so that a model able to learn the rule
promotes the decoy above the target:

* symmetry    ``(o', r, s)        => (s, r, o')``
* inversion   ``(o', r_i, s)      => (s, r, o')``
* composition ``(s, r1, m), (m, r2, o') => (s, r, o')``

Truth values of atoms are ``sigmoid(score)`` and clauses use the product
t-norm, so a grounding scores ``1 - phi(body) * (1 - phi(head))``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from sklearn.cluster import KMeans

from .edits import AttackResult
from .graph import KnowledgeGraph, Triple
from .models import EmbeddingModel

PATTERNS = ("symmetry", "inversion", "composition")
HEURISTICS = ("soft_truth", "kge_rank", "cos_distance")
ELBOW_GRID = (5, 20, 50, 100, 150, 200, 250, 300, 350, 400, 450, 500)


# --- fuzzy logic ----------------------------------------------------------------

def t_and(a, b):
    return a * b


def t_or(a, b):
    return a + b - a * b


def t_not(a):
    return 1.0 - a


def implies(body, head):
    """Product t-norm implication ``body => head`` = ``not(body and not head)``."""
    return 1.0 - body * (1.0 - head)


def soft_truth(model: EmbeddingModel, s, r, o):
    return expit(model.score(s, r, o))


@dataclass(frozen=True)
class Grounding:
    pattern: str
    head: Triple
    body: tuple[Triple, ...]
    soft_truth: float


def grounding_score(model: EmbeddingModel, pattern: str, head, body) -> Grounding:
    head = Triple(*map(int, head))
    body = tuple(Triple(*map(int, b)) for b in body)
    phi_body = 1.0
    for b in body:
        phi_body *= float(soft_truth(model, *b))
    return Grounding(pattern, head, body, float(implies(phi_body, soft_truth(model, *head))))


# --- relation algebra -----------------------------------------------------------

def _as_complex(model: EmbeddingModel, x: np.ndarray) -> np.ndarray:
    if model.kind == "complex":
        return x[..., : model.k] + 1j * x[..., model.k:]
    return x


def inverse_residuals(model: EmbeddingModel, r: int) -> np.ndarray:
    """Residual of every relation as the inverse of ``r`` (``inf`` at ``r``).

    Additive: ``||e_ri + e_r||``. Multiplicative: ``||e_r * e_ri - 1||`` with the
    elementwise product taken in complex arithmetic for ComplEx.
    """
    R = _as_complex(model, model.rel)
    if model.multiplicative:
        res = np.linalg.norm(R * R[r][None, :] - 1.0, axis=1)
    else:
        res = np.linalg.norm(R + R[r][None, :], axis=1)
    res = res.astype(np.float64)
    res[r] = np.inf
    return res


def composition_distances(model: EmbeddingModel, r: int) -> np.ndarray:
    """``D[r1, r2] = ||compose(e_r1, e_r2) - e_r||`` over all ordered pairs."""
    R = _as_complex(model, model.rel)
    comp = R[:, None, :] * R[None, :, :] if model.multiplicative else R[:, None, :] + R[None, :, :]
    return np.linalg.norm(comp - R[r][None, None, :], axis=2).astype(np.float64)


def _argmin_first(values: np.ndarray):
    """Index of the minimum; ties go to the lexicographically first index."""
    return np.unravel_index(int(np.argmin(values)), values.shape)


def find_inverse_relation(model: EmbeddingModel, r: int) -> int:
    if model.n_relations < 2:
        raise ValueError("need at least two relations")
    return int(_argmin_first(inverse_residuals(model, r))[0])


def inverse_candidates(model: EmbeddingModel, r: int, k: int = 3) -> list[int]:
    res = inverse_residuals(model, r)
    return sorted(range(len(res)), key=lambda i: (res[i], i))[:k]


def find_composition_pair(model: EmbeddingModel, r: int) -> tuple[int, int]:
    i, j = _argmin_first(composition_distances(model, r))
    return int(i), int(j)


class RelationAlgebra:
    """Per-model cache of inverse relations and composition pairs."""

    def __init__(self, model: EmbeddingModel):
        self.model = model
        self._inverse: dict[int, int] = {}
        self._composition: dict[int, tuple[int, int]] = {}

    def inverse(self, r: int) -> int:
        if r not in self._inverse:
            self._inverse[r] = find_inverse_relation(self.model, r)
        return self._inverse[r]

    def composition(self, r: int) -> tuple[int, int]:
        if r not in self._composition:
            self._composition[r] = find_composition_pair(self.model, r)
        return self._composition[r]


# --- clustering -------------------------------------------------------------------

@dataclass
class Clustering:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float


def kmeans_entities(model: EmbeddingModel, k: int, seed: int = 0, max_iter: int = 100) -> Clustering:
    """Lloyd's k-means on entity embedding rows (k-means++ seeding)."""
    if not 1 <= k <= model.n_entities:
        raise ValueError(f"k must be in [1, {model.n_entities}]")
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=max_iter, tol=0.0,
                random_state=seed, algorithm="lloyd").fit(model.ent)
    return Clustering(km.labels_.astype(np.int64), km.cluster_centers_, float(km.inertia_))


def elbow_k(model: EmbeddingModel, grid=ELBOW_GRID, seed: int = 0) -> int:
    """Grid point with the largest second difference of within-cluster sum of squares."""
    grid = [k for k in grid if k <= model.n_entities]
    if not grid:
        raise ValueError("no grid point fits the number of entities")
    if len(grid) < 3:
        return grid[-1]
    wcss = np.array([kmeans_entities(model, k, seed).inertia for k in grid])
    second = wcss[:-2] - 2 * wcss[1:-1] + wcss[2:]
    return int(grid[1 + int(np.argmax(second))])


# --- decoys -------------------------------------------------------------------------

@dataclass
class DecoyChoice:
    target: Triple
    side: str
    decoy: Triple
    heuristic: str
    score: float = float("nan")


def _head(target: Triple, side: str, e):
    return (target.s, target.r, e) if side == "object" else (e, target.r, target.o)


def _bodies(pattern: str, head, rel: tuple[int, ...], middle=None) -> list[tuple]:
    hs, _, ho = head
    if pattern == "symmetry":
        return [(ho, rel[0], hs)]
    if pattern == "inversion":
        return [(ho, rel[0], hs)]
    return [(hs, rel[0], middle), (middle, rel[1], ho)]


def _pattern_relations(pattern: str, r: int, algebra: RelationAlgebra) -> tuple[int, ...]:
    if pattern == "symmetry":
        return (r,)
    if pattern == "inversion":
        return (algebra.inverse(r),)
    if pattern == "composition":
        return algebra.composition(r)
    raise ValueError(f"unknown pattern {pattern!r}; expected one of {PATTERNS}")


def candidate_pool(kg: KnowledgeGraph, target: Triple, side: str, pattern: str,
                   rel: tuple[int, ...]) -> np.ndarray:
    """Decoy entities: substitutions that are not train triples, not the target,
    and (for one-atom bodies) whose body is not the decoy itself."""
    true = target.o if side == "object" else target.s
    out = []
    for e in range(kg.n_entities):
        if e == true:
            continue
        head = Triple(*_head(target, side, e))
        if head in kg.train_set:
            continue
        if pattern != "composition" and Triple(*_bodies(pattern, head, rel)[0]) == head:
            continue
        out.append(e)
    if not out:
        raise ValueError(f"no decoy candidate for {target} on the {side} side")
    return np.array(out, dtype=np.int64)


def _pair_scores(model, es, er, eo):
    return expit(model.score_emb(es, er, eo))


def soft_truth_grid(model: EmbeddingModel, target: Triple, side: str, pattern: str,
                    rel: tuple[int, ...], cands: np.ndarray,
                    middles: np.ndarray | None = None) -> np.ndarray:
    """Grounding scores for decoy entities ``cands``.

    One-atom patterns return shape ``(len(cands),)``; composition returns
    ``(len(cands), len(middles))`` where ``middles`` are embedding rows.
    """
    E, R = model.ent, model.rel
    if side == "object":
        hs, ho = np.broadcast_to(E[target.s], (len(cands), E.shape[1])), E[cands]
    else:
        hs, ho = E[cands], np.broadcast_to(E[target.o], (len(cands), E.shape[1]))
    phi_head = _pair_scores(model, hs, R[target.r], ho)
    if pattern != "composition":
        phi_body = _pair_scores(model, ho, R[rel[0]], hs)
        return implies(phi_body, phi_head)
    M = middles[None, :, :]
    phi_b1 = _pair_scores(model, hs[:, None, :], R[rel[0]], M)
    phi_b2 = _pair_scores(model, M, R[rel[1]], ho[:, None, :])
    return implies(phi_b1 * phi_b2, phi_head[:, None])


def select_decoy(model: EmbeddingModel, kg: KnowledgeGraph, target, side: str, pattern: str,
                 heuristic: str, algebra: RelationAlgebra | None = None,
                 clustering: Clustering | None = None) -> DecoyChoice:
    target = Triple(*map(int, target))
    if side not in ("object", "subject"):
        raise ValueError("side must be 'object' or 'subject'")
    if heuristic not in HEURISTICS:
        raise ValueError(f"unknown heuristic {heuristic!r}; expected one of {HEURISTICS}")
    algebra = algebra or RelationAlgebra(model)
    rel = _pattern_relations(pattern, target.r, algebra)
    cands = candidate_pool(kg, target, side, pattern, rel)

    if heuristic == "soft_truth":
        if pattern == "composition":
            if clustering is None:
                raise ValueError("composition soft-truth decoys need an entity clustering")
            grid = soft_truth_grid(model, target, side, pattern, rel, cands, clustering.centroids)
            # per-cluster minimum over candidates, then the minimum over clusters
            per_cluster = grid.min(axis=0)
            c = int(np.argmin(per_cluster))
            values = grid[:, c]
        else:
            values = soft_truth_grid(model, target, side, pattern, rel, cands)
        i = int(np.argmin(values))
        return DecoyChoice(target, side, Triple(*_head(target, side, int(cands[i]))), heuristic,
                           float(values[i]))

    if heuristic == "kge_rank":
        true = target.o if side == "object" else target.s
        if side == "object":
            scores = model.candidate_scores([target.s], [target.r], "object")[0]
            known = set(kg.known_objects(target.s, target.r).tolist())
        else:
            scores = model.candidate_scores([target.o], [target.r], "subject")[0]
            known = set(kg.known_subjects(target.r, target.o).tolist())
        allowed = set(cands.tolist())
        order = sorted((e for e in range(kg.n_entities) if e == true or e not in known),
                       key=lambda e: (-scores[e], e))
        pos = order.index(true)
        after = [e for e in order[pos + 1:] if e in allowed]
        before = [e for e in order[:pos] if e in allowed]
        if after:
            e = after[0]
        elif before:
            e = before[-1]
        else:
            raise ValueError(f"no filtered decoy candidate for {target} on the {side} side")
        return DecoyChoice(target, side, Triple(*_head(target, side, e)), heuristic, float(scores[e]))

    ref = target.o if side == "object" else target.s
    dist = 1.0 - _cosine(model.ent[cands], model.ent[ref])
    i = int(np.argmax(dist))
    return DecoyChoice(target, side, Triple(*_head(target, side, int(cands[i]))), heuristic, float(dist[i]))


def _cosine(X: np.ndarray, v: np.ndarray) -> np.ndarray:
    denom = np.linalg.norm(X, axis=1) * np.linalg.norm(v)
    return np.divide(X @ v, denom, out=np.zeros(len(X)), where=denom > 0)


def select_adversarial_entity(model: EmbeddingModel, kg: KnowledgeGraph, decoy: DecoyChoice,
                              r1: int, r2: int) -> tuple[int, float]:
    """Middle entity maximising the composition grounding score for ``decoy``.

    Entities whose two body atoms are both already in train, or whose body
    contains the decoy itself, are skipped.
    """
    hs, r, ho = decoy.decoy
    E, R = model.ent, model.rel
    phi_head = float(expit(model.score(hs, r, ho)))
    body = expit(model.score_emb(E[hs], R[r1], E)) * expit(model.score_emb(E, R[r2], E[ho]))
    values = implies(body, phi_head)
    best, best_val = -1, -np.inf
    for m in range(kg.n_entities):
        b1, b2 = Triple(hs, r1, m), Triple(m, r2, ho)
        if (b1 in kg.train_set and b2 in kg.train_set) or decoy.decoy in (b1, b2):
            continue
        if values[m] > best_val:
            best, best_val = m, float(values[m])
    if best < 0:
        raise ValueError(f"every middle entity for decoy {decoy.decoy} is saturated")
    return best, best_val


def inference_attack(model: EmbeddingModel, kg: KnowledgeGraph, target, pattern: str,
                     heuristic: str, algebra: RelationAlgebra | None = None,
                     clustering: Clustering | None = None) -> AttackResult:
    """Additions for both sides of ``target``: at most 2 (symmetry, inversion) or 4 (composition)."""
    target = Triple(*map(int, target))
    t0 = time.perf_counter()
    algebra = algebra or RelationAlgebra(model)
    rel = _pattern_relations(pattern, target.r, algebra)
    additions: list[Triple] = []
    extra: dict = {"pattern": pattern, "heuristic": heuristic}
    scores = []
    for side in ("object", "subject"):
        choice = select_decoy(model, kg, target, side, pattern, heuristic, algebra, clustering)
        if pattern == "composition":
            m, _ = select_adversarial_entity(model, kg, choice, *rel)
            body = _bodies(pattern, choice.decoy, rel, m)
        else:
            body = _bodies(pattern, choice.decoy, rel)
        g = grounding_score(model, pattern, choice.decoy, body)
        scores.append(g.soft_truth)
        extra[f"{side}_decoy"] = choice.decoy
        extra[f"{side}_grounding"] = g.soft_truth
        for b in g.body:
            if b not in kg.train_set and b != choice.decoy and b not in additions:
                additions.append(b)
    decoys = {extra["object_decoy"], extra["subject_decoy"]}
    additions = [b for b in additions if b not in decoys]
    res = AttackResult(target, f"{pattern}_{heuristic}", additions=additions,
                       score=float(np.mean(scores)), extra=extra)
    res.elapsed_ms = (time.perf_counter() - t0) * 1000.0
    return res
