"""Random and gradient-direct baseline attacks, plus retraining oracles."""
from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .evaluation import rank_triples
from .graph import KnowledgeGraph, Triple, apply_edits, neighbourhood
from .models import EmbeddingModel
from .training import ModelConfig, TrainConfig, train

MAX_ORACLE_POOL = 500


# --- random edits ---------------------------------------------------------------

def _sample_additions(kg: KnowledgeGraph, rng, count: int, make, space: int) -> list[Triple]:
    out: list[Triple] = []
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > 1000 * count + 10 * space:
            raise ValueError("candidate space exhausted: no more non-train additions")
        t = Triple(*make(rng))
        if t not in kg.train_set and t not in out:
            out.append(t)
    return out


def random_edit(kg: KnowledgeGraph, target, mode: str = "neighbourhood", op: str = "del",
                count: int = 1, seed: int = 0) -> list[Triple]:
    """Uniformly random deletions or additions, in the target's neighbourhood or globally.

    Neighbourhood additions keep one of the target's entities; all additions
    avoid train triples.
    """
    if mode not in ("neighbourhood", "global") or op not in ("del", "add"):
        raise ValueError("mode must be neighbourhood/global and op del/add")
    target = Triple(*map(int, target))
    rng = np.random.default_rng(seed)
    nE, nR = kg.n_entities, kg.n_relations
    if op == "del":
        pool = sorted(neighbourhood(kg, target).members) if mode == "neighbourhood" else sorted(kg.train_set)
        if len(pool) < count:
            raise ValueError(f"only {len(pool)} candidate deletions for {target}")
        return [pool[i] for i in sorted(rng.choice(len(pool), size=count, replace=False))]
    if mode == "global":
        return _sample_additions(kg, rng, count, lambda g: (g.integers(nE), g.integers(nR), g.integers(nE)),
                                 nE * nR * nE)

    def near(g):
        e = (target.s, target.o)[g.integers(2)]
        x, r = g.integers(nE), g.integers(nR)
        return (e, r, x) if g.integers(2) == 0 else (x, r, e)
    return _sample_additions(kg, rng, count, near, 4 * nE * nR)


# --- direct attacks -------------------------------------------------------------

def perturb_target_entities(model: EmbeddingModel, target, epsilon: float,
                            normalize: bool = True) -> EmbeddingModel:
    """Move the target's subject and object embeddings against the target score gradient."""
    g = model.grad_score(target)
    dE, _ = g.dense(model.n_entities, model.n_relations)
    pert = model.copy()
    entities = sorted({g.s, g.o})
    if all(np.linalg.norm(dE[e]) == 0 for e in entities):
        raise ValueError(f"target {tuple(target)} has a zero score gradient")
    for e in entities:
        step = dE[e]
        n = np.linalg.norm(step)
        if normalize and n > 0:
            step = step / n
        pert.ent[e] = model.ent[e] - epsilon * step
    return pert


def _argmax_lex(cands: list[Triple], values: np.ndarray) -> tuple[Triple, float]:
    i = min(range(len(cands)), key=lambda j: (-values[j], cands[j]))
    return cands[i], float(values[i])


def direct_del(model: EmbeddingModel, kg: KnowledgeGraph, target, epsilon: float = 1.0,
               normalize: bool = True) -> tuple[Triple, float]:
    """Neighbour whose score drops most when the target entities move against the gradient."""
    target = Triple(*map(int, target))
    cands = sorted(neighbourhood(kg, target).members)
    if not cands:
        raise ValueError(f"target {target} has an empty neighbourhood")
    pert = perturb_target_entities(model, target, epsilon, normalize)
    arr = np.asarray(cands)
    diff = model.score(arr[:, 0], arr[:, 1], arr[:, 2]) - pert.score(arr[:, 0], arr[:, 1], arr[:, 2])
    return _argmax_lex(cands, np.atleast_1d(diff))


def direct_add_candidates(kg: KnowledgeGraph, target, downsample_pct: float = 5.0,
                          seed: int = 0) -> list[Triple]:
    """``(e, r', x)`` and ``(x, r', e)`` for ``e`` in the target entities, minus train and
    the target, randomly down-sampled to ``downsample_pct`` percent (at least one)."""
    target = Triple(*map(int, target))
    cands = set()
    for e in {target.s, target.o}:
        for r in range(kg.n_relations):
            for x in range(kg.n_entities):
                cands.add(Triple(e, r, x))
                cands.add(Triple(x, r, e))
    cands = sorted(c for c in cands if c not in kg.train_set and c != target)
    if not cands:
        raise ValueError(f"no addition candidates for {target}")
    keep = max(1, int(round(len(cands) * downsample_pct / 100.0)))
    idx = np.sort(np.random.default_rng(seed).choice(len(cands), size=min(keep, len(cands)), replace=False))
    return [cands[i] for i in idx]


def direct_add(model: EmbeddingModel, kg: KnowledgeGraph, target, epsilon: float = 1.0,
               downsample_pct: float = 5.0, seed: int = 0,
               normalize: bool = True) -> tuple[Triple, float]:
    """Candidate whose score rises most under the perturbation that lowers the target score.

    Training on such a triple pulls the shared entity along the perturbation.
    """
    cands = direct_add_candidates(kg, target, downsample_pct, seed)
    pert = perturb_target_entities(model, target, epsilon, normalize)
    arr = np.asarray(cands)
    diff = pert.score(arr[:, 0], arr[:, 1], arr[:, 2]) - model.score(arr[:, 0], arr[:, 1], arr[:, 2])
    return _argmax_lex(cands, np.atleast_1d(diff))


# --- retraining oracles -----------------------------------------------------------

@dataclass
class OracleRow:
    candidate: Triple
    delta_score: float
    delta_rank: float
    seconds: float


def target_rank(model: EmbeddingModel, kg: KnowledgeGraph, target) -> float:
    """Mean filtered rank of the target over both sides."""
    t = [tuple(target)]
    return float((rank_triples(model, kg, t, "subject")[0] + rank_triples(model, kg, t, "object")[0]) / 2)


def _retrain_delta(kg, model_config, train_config, target, deletions, additions, orig_score, orig_rank):
    t0 = time.perf_counter()
    new_kg, _ = apply_edits(kg, deletions, additions)
    model = train(new_kg, model_config, train_config).model
    return (float(model.score(*target)) - orig_score,
            target_rank(model, new_kg, target) - orig_rank,
            time.perf_counter() - t0)


def original_model(kg, model_config, train_config) -> EmbeddingModel:
    return train(kg, model_config, train_config).model


def loo_oracle(kg: KnowledgeGraph, model_config: ModelConfig, train_config: TrainConfig,
               target, candidate, original: EmbeddingModel | None = None) -> OracleRow:
    """Retrain on ``train \\ {candidate}`` with the same seed; report the change in the
    target's score and mean filtered rank (new minus original)."""
    target, candidate = Triple(*map(int, target)), Triple(*map(int, candidate))
    if candidate not in kg.train_set:
        raise ValueError(f"{candidate} is not a train triple")
    original = original or original_model(kg, model_config, train_config)
    d_score, d_rank, secs = _retrain_delta(kg, model_config, train_config, target, [candidate], [],
                                           float(original.score(*target)), target_rank(original, kg, target))
    return OracleRow(candidate, d_score, d_rank, secs)


def _oracle_job(args):
    return _retrain_delta(*args)


def brute_force_addition_oracle(kg: KnowledgeGraph, model_config: ModelConfig,
                                train_config: TrainConfig, target, candidate_pool,
                                original: EmbeddingModel | None = None,
                                workers: int = 1) -> list[OracleRow]:
    """Retrain once per candidate addition; rows sorted by achieved rank degradation."""
    target = Triple(*map(int, target))
    pool = [Triple(*map(int, c)) for c in candidate_pool]
    if len(pool) > MAX_ORACLE_POOL:
        raise ValueError(f"candidate pool of {len(pool)} exceeds the limit of {MAX_ORACLE_POOL}")
    if not pool:
        return []
    original = original or original_model(kg, model_config, train_config)
    o_score, o_rank = float(original.score(*target)), target_rank(original, kg, target)
    fresh = [c for c in pool if c not in kg.train_set]
    jobs = [(kg, model_config, train_config, target, [], [c], o_score, o_rank) for c in fresh]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_oracle_job, jobs))
    else:
        results = [_oracle_job(j) for j in jobs]
    by_cand = dict(zip(fresh, results))
    rows = [OracleRow(c, *by_cand.get(c, (0.0, 0.0, 0.0))) for c in pool]
    return sorted(rows, key=lambda row: (-row.delta_rank, row.candidate))


def write_oracle_csv(rows: list[OracleRow], path: str | Path, kg: KnowledgeGraph | None = None,
                     timing: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["candidate", "delta_score", "delta_rank", "seconds"])
        for row in rows:
            cand = " ".join(kg.label(row.candidate)) if kg is not None else " ".join(map(str, row.candidate))
            w.writerow([cand, repr(row.delta_score), repr(row.delta_rank),
                        f"{row.seconds:.3f}" if timing else ""])
