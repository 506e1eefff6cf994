"""Instance-attribution attacks.

A candidate training triple ``x`` from the target's neighbourhood gets an
influence score ``phi(z, x)`` for target ``z``:

* ``dot``/``l2``/``cos``: similarity of triple feature vectors,
* ``gd``/``gl``/``gc``: the same similarities on per-triple loss gradients,
* ``if``: ``<g(z), H^-1 g(x)>`` with the inverse-Hessian product from LiSSA.

Higher scores mean more influential. Deleting the top triple is the deletion
attack; replacing its non-shared entity by the most dissimilar entity gives
the addition attack.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .edits import AttackResult
from .graph import KnowledgeGraph, Triple, neighbourhood
from .models import EmbeddingModel
from .training import SideBatch, TrainConfig, _one_hot, regularizer, sides_objective

METHODS = ("dot", "l2", "cos", "gd", "gl", "gc", "if")
FEATURE_METHODS = ("dot", "l2", "cos")
GRADIENT_METHODS = ("gd", "gl", "gc")


class LissaDivergedError(RuntimeError):
    pass


@dataclass
class LossConfig:
    """Per-triple loss used for attribution gradients and Hessians.

    A triple's loss scores it against every entity on both sides with a
    one-hot label (the triple itself), summing the two side losses.
    """
    loss: str = "bce"
    margin: float = 9.0
    margin_sign: str = "standard"
    label_smoothing: float = 0.0
    regularizer: str = "none"
    reg_weight: float = 0.0

    @classmethod
    def from_train(cls, cfg: TrainConfig) -> "LossConfig":
        return cls(cfg.loss, cfg.margin, cfg.margin_sign, cfg.label_smoothing,
                   cfg.regularizer, cfg.reg_weight)


@dataclass
class LissaConfig:
    damping: float = 0.01
    scale: float = 25.0
    depth: int | None = None      # None: min(|train|, 5000)
    repeats: int = 1
    batch_size: int = 1
    sample_seed: int = 0
    fd_step: float = 1e-4

    def resolved_depth(self, n_train: int) -> int:
        return self.depth if self.depth is not None else min(n_train, 5000)


class InfluenceScore(NamedTuple):
    target: Triple
    candidate: Triple
    method: str
    value: float


# --- per-triple losses and gradients ------------------------------------------

def _triple_sides(model: EmbeddingModel, triples: np.ndarray) -> list[SideBatch]:
    s, r, o = triples.T
    n = model.n_entities
    return [SideBatch(s, r, "object", _one_hot(o, n)), SideBatch(o, r, "subject", _one_hot(s, n))]


def objective(model: EmbeddingModel, triples, loss_cfg: LossConfig,
              with_reg: bool = True) -> tuple[float, np.ndarray]:
    """Mean per-triple loss over ``triples`` (+ regulariser) and its flat gradient."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    value, dE, dR = sides_objective(model, _triple_sides(model, triples), loss_cfg)
    if with_reg and loss_cfg.regularizer != "none":
        rv, rE, rR = regularizer(model, loss_cfg, np.concatenate([triples[:, 0], triples[:, 2]]),
                                 triples[:, 1], len(triples))
        value, dE, dR = value + rv, dE + rE, dR + rR
    return value, np.concatenate([dE.ravel(), dR.ravel()])


def triple_loss_grad(model: EmbeddingModel, triple, loss_cfg: LossConfig) -> np.ndarray:
    """Flat gradient of one triple's loss (no regulariser)."""
    return objective(model, [tuple(triple)], loss_cfg, with_reg=False)[1]


def hvp(model: EmbeddingModel, triples, v: np.ndarray, loss_cfg: LossConfig,
        step: float = 1e-4) -> np.ndarray:
    """Hessian-vector product of :func:`objective` by central differences of the exact gradient."""
    nv = np.linalg.norm(v)
    if nv == 0:
        return np.zeros_like(v)
    eps = step / nv
    theta = model.flat()
    gp = objective(model.with_flat(theta + eps * v), triples, loss_cfg)[1]
    gm = objective(model.with_flat(theta - eps * v), triples, loss_cfg)[1]
    return (gp - gm) / (2 * eps)


def lissa_inverse_hvp(model: EmbeddingModel, kg: KnowledgeGraph, v: np.ndarray,
                      loss_cfg: LossConfig, cfg: LissaConfig | None = None,
                      trace: list | None = None) -> np.ndarray:
    """Stochastic estimate of ``(H + damping * scale * I)^-1 v`` by LiSSA.

    Recursion ``h <- v + (1 - damping) h - H_j h / scale`` with ``H_j`` the
    Hessian on a sampled train mini-batch; the result is ``h / scale``.
    """
    cfg = cfg or LissaConfig()
    if cfg.scale <= 0 or cfg.damping < 0:
        raise ValueError("LiSSA needs scale > 0 and damping >= 0")
    depth = cfg.resolved_depth(len(kg.train))
    rng = np.random.default_rng(cfg.sample_seed)
    bound = (10.0 / cfg.damping if cfg.damping > 0 else 1e8) * max(np.linalg.norm(v), 1e-300)
    estimates = []
    for _ in range(cfg.repeats):
        h = v.copy()
        for j in range(depth):
            idx = rng.choice(len(kg.train), size=min(cfg.batch_size, len(kg.train)), replace=False)
            hv = hvp(model, kg.train[idx], h, loss_cfg, cfg.fd_step)
            h = v + (1 - cfg.damping) * h - hv / cfg.scale
            norm = np.linalg.norm(h)
            if trace is not None:
                trace.append(norm)
            if not np.isfinite(norm) or norm > bound:
                raise LissaDivergedError(
                    f"LiSSA estimate diverged at step {j} (norm {norm:.3g}); "
                    "increase damping or scale")
        estimates.append(h / cfg.scale)
    return np.mean(estimates, axis=0)


def exact_hessian(model: EmbeddingModel, kg: KnowledgeGraph, loss_cfg: LossConfig,
                  step: float = 1e-4) -> np.ndarray:
    """Dense Hessian of the mean train objective; only for tiny models."""
    n = model.n_params
    if n > 5000:
        raise ValueError(f"refusing to build a dense {n}x{n} Hessian")
    H = np.empty((n, n))
    eye = np.eye(n)
    for i in range(n):
        H[:, i] = hvp(model, kg.train, eye[i], loss_cfg, step)
    return (H + H.T) / 2


def exact_inverse_hvp(model, kg, v, loss_cfg, damping: float = 0.0, hessian=None) -> np.ndarray:
    H = exact_hessian(model, kg, loss_cfg) if hessian is None else hessian
    return np.linalg.solve(H + damping * np.eye(len(H)), v)


# --- similarity scores --------------------------------------------------------

def similarity(kind: str, zv: np.ndarray, X: np.ndarray) -> np.ndarray:
    if kind == "dot":
        return X @ zv
    if kind == "l2":
        return -np.linalg.norm(X - zv[None, :], axis=1)
    if kind == "cos":
        denom = np.linalg.norm(X, axis=1) * np.linalg.norm(zv)
        cos = np.divide(X @ zv, denom, out=np.zeros(len(X)), where=denom > 0)
        return np.clip(cos, -1.0, 1.0)
    raise ValueError(kind)


def _rank(target: Triple, cands: list[Triple], values: np.ndarray, method: str) -> list[InfluenceScore]:
    order = sorted(range(len(cands)), key=lambda i: (-values[i], tuple(cands[i])))
    return [InfluenceScore(target, cands[i], method, float(values[i])) for i in order]


def influence_scores(method: str, model: EmbeddingModel, target, candidates,
                     loss_cfg: LossConfig | None = None, kg: KnowledgeGraph | None = None,
                     lissa_cfg: LissaConfig | None = None,
                     inverse_hvp: Callable[[np.ndarray], np.ndarray] | None = None
                     ) -> list[InfluenceScore]:
    """Influence of every candidate on ``target``, sorted descending.

    Ties are broken by lexicographic ``(s, r, o)`` order. For ``if``, pass
    ``kg`` (LiSSA samples its train set) or a custom ``inverse_hvp`` callable.
    """
    method = method.lower()
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    target = Triple(*map(int, target))
    cands = [Triple(*map(int, c)) for c in candidates]
    if not cands:
        raise ValueError(f"target {target} has no candidates (empty neighbourhood)")
    arr = np.asarray(cands, dtype=np.int64)
    if method in FEATURE_METHODS:
        zv = model.feature_vector(*target)
        X = model.feature_vector(arr[:, 0], arr[:, 1], arr[:, 2])
        return _rank(target, cands, similarity(method, zv, X), method)
    loss_cfg = loss_cfg or LossConfig()
    gz = triple_loss_grad(model, target, loss_cfg)
    G = np.stack([triple_loss_grad(model, c, loss_cfg) for c in cands])
    if method in GRADIENT_METHODS:
        return _rank(target, cands, similarity({"gd": "dot", "gl": "l2", "gc": "cos"}[method], gz, G), method)
    if inverse_hvp is None:
        if kg is None:
            raise ValueError("influence function scores need the graph or an inverse_hvp")
        ihvp_z = lissa_inverse_hvp(model, kg, gz, loss_cfg, lissa_cfg)
    else:
        ihvp_z = inverse_hvp(gz)
    # H is symmetric, so <g(z), H^-1 g(x)> = <H^-1 g(z), g(x)>
    return _rank(target, cands, G @ ihvp_z, method)


def select_deletion(method: str, model: EmbeddingModel, kg: KnowledgeGraph, target,
                    loss_cfg: LossConfig | None = None, lissa_cfg: LissaConfig | None = None,
                    **kw) -> InfluenceScore:
    """Most influential neighbourhood triple of ``target``."""
    nb = neighbourhood(kg, Triple(*map(int, target)))
    if not nb.members:
        raise ValueError(f"target {tuple(target)} has an empty neighbourhood")
    return influence_scores(method, model, target, sorted(nb.members), loss_cfg, kg, lissa_cfg, **kw)[0]


# --- additions ----------------------------------------------------------------

def entity_dissimilarity(model: EmbeddingModel, e: int) -> np.ndarray:
    """Distance of every entity from ``e``: cosine distance for multiplicative models,
    Euclidean for TransE (ComplEx rows are used as their 2k real vectors)."""
    E = model.ent
    if model.multiplicative:
        norms = np.linalg.norm(E, axis=1) * np.linalg.norm(E[e])
        cos = np.divide(E @ E[e], norms, out=np.zeros(len(E)), where=norms > 0)
        return 1.0 - cos
    return np.linalg.norm(E - E[e][None, :], axis=1)


def dissimilar_addition(model: EmbeddingModel, kg: KnowledgeGraph, target, influential) -> Triple:
    """Copy ``influential`` and swap its entity not shared with ``target`` for the
    entity most dissimilar to it, skipping swaps that recreate a train triple."""
    z, x = Triple(*map(int, target)), Triple(*map(int, influential))
    replace_object = x.s in (z.s, z.o)
    old = x.o if replace_object else x.s
    dist = entity_dissimilarity(model, old)
    for e in sorted(range(model.n_entities), key=lambda i: (-dist[i], i)):
        if e == old:
            continue
        cand = Triple(x.s, x.r, e) if replace_object else Triple(e, x.r, x.o)
        if cand not in kg.train_set:
            return cand
    raise ValueError(f"every replacement of {x} already exists in train")


def select_addition(method: str, model: EmbeddingModel, kg: KnowledgeGraph, target,
                    n: int = 1, loss_cfg: LossConfig | None = None,
                    lissa_cfg: LissaConfig | None = None, **kw) -> list[Triple]:
    """Additions derived from the ``n`` most influential neighbourhood triples."""
    nb = neighbourhood(kg, Triple(*map(int, target)))
    if not nb.members:
        raise ValueError(f"target {tuple(target)} has an empty neighbourhood")
    ranked = influence_scores(method, model, target, sorted(nb.members), loss_cfg, kg, lissa_cfg, **kw)
    out: list[Triple] = []
    for sc in ranked[:n]:
        add = dissimilar_addition(model, kg, target, sc.candidate)
        if add not in out:
            out.append(add)
    return out


def attribution_attack(method: str, model: EmbeddingModel, kg: KnowledgeGraph, targets,
                       op: str = "del", budget: int = 1, loss_cfg: LossConfig | None = None,
                       lissa_cfg: LissaConfig | None = None) -> list[AttackResult]:
    """Run the deletion (``op="del"``) or addition (``op="add"``) attack per target."""
    if op not in ("del", "add"):
        raise ValueError("op must be 'del' or 'add'")
    results = []
    for target in targets:
        target = Triple(*map(int, target))
        t0 = time.perf_counter()
        nb = neighbourhood(kg, target)
        if not nb.members:
            raise ValueError(f"target {target} has an empty neighbourhood")
        ranked = influence_scores(method, model, target, sorted(nb.members), loss_cfg, kg, lissa_cfg)
        top = ranked[:budget]
        if op == "del":
            res = AttackResult(target, method, deletions=[s.candidate for s in top], score=top[0].value)
        else:
            adds = []
            for sc in top:
                a = dissimilar_addition(model, kg, target, sc.candidate)
                if a not in adds:
                    adds.append(a)
            res = AttackResult(target, method, additions=adds, score=top[0].value)
        res.elapsed_ms = (time.perf_counter() - t0) * 1000.0
        results.append(res)
    return results
