"""Training loop for the shallow KGE models.

Supports negative sampling, 1vsAll (without reciprocal relations: both the
``(s, r) -> o`` and ``(o, r) -> s`` queries are trained) and KvsAll, with BCE,
cross-entropy and margin-ranking losses. Everything is seeded; serial runs are
bit-reproducible.
"""
from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .graph import KnowledgeGraph
from .models import EmbeddingModel, init_model

logger = logging.getLogger(__name__)

STRATEGIES = ("negsamp", "1vsall", "kvsall")
LOSSES = ("bce", "ce", "margin")
REGULARIZERS = ("none", "l2", "n3")
_ALLOWED = {"margin": {"negsamp"}, "ce": {"negsamp", "1vsall"}, "bce": set(STRATEGIES)}


class NonFiniteScoreError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss or parameters at epoch {epoch}")
        self.epoch = epoch


@dataclass
class ModelConfig:
    kind: str = "distmult"
    dim: int = 200
    p: int = 2


@dataclass
class TrainConfig:
    strategy: str = "1vsall"
    loss: str = "ce"
    n_neg: int = 1
    margin: float = 9.0
    # "standard": max(0, margin - f_pos + f_neg); "literal": max(0, margin + f_pos - f_neg)
    margin_sign: str = "standard"
    optimizer: str = "adam"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 100
    batch_size: int = 128
    regularizer: str = "none"
    reg_weight: float = 0.0
    label_smoothing: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.validate()

    def validate(self) -> None:
        errors = []
        if self.strategy not in STRATEGIES:
            errors.append(f"strategy: {self.strategy!r} not in {STRATEGIES}")
        if self.loss not in LOSSES:
            errors.append(f"loss: {self.loss!r} not in {LOSSES}")
        elif self.strategy in STRATEGIES and self.strategy not in _ALLOWED[self.loss]:
            errors.append(f"loss: {self.loss!r} cannot be used with strategy {self.strategy!r}")
        if self.regularizer not in REGULARIZERS:
            errors.append(f"regularizer: {self.regularizer!r} not in {REGULARIZERS}")
        if self.optimizer not in ("adam", "sgd", "lbfgs"):
            errors.append(f"optimizer: {self.optimizer!r} not in ('adam', 'sgd', 'lbfgs')")
        elif self.optimizer == "lbfgs" and self.strategy == "negsamp":
            errors.append("optimizer: 'lbfgs' needs a deterministic objective (1vsall or kvsall)")
        if self.margin_sign not in ("standard", "literal"):
            errors.append("margin_sign: must be 'standard' or 'literal'")
        if not 0.0 <= self.label_smoothing < 1.0:
            errors.append("label_smoothing: must be in [0, 1)")
        if self.n_neg < 1:
            errors.append("n_neg: must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            errors.append("epochs/batch_size: must be non-negative/positive")
        if errors:
            raise ValueError("invalid TrainConfig: " + "; ".join(errors))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class SideBatch:
    """Labelled scoring problem for one query side.

    ``side`` names the slot being predicted: for ``"object"`` the anchors are
    subjects. ``candidates=None`` means every entity is a candidate.
    """
    anchor: np.ndarray
    rel: np.ndarray
    side: str
    labels: np.ndarray
    candidates: np.ndarray | None = None

    @property
    def n_scores(self) -> int:
        return self.labels.size


def _one_hot(idx: np.ndarray, n: int) -> np.ndarray:
    y = np.zeros((len(idx), n))
    y[np.arange(len(idx)), idx] = 1.0
    return y


def kvsall_index(kg: KnowledgeGraph) -> tuple[dict, dict]:
    """Observed train completions per ``(s, r)`` and per ``(o, r)`` key."""
    objects, subjects = defaultdict(list), defaultdict(list)
    for s, r, o in kg.train.tolist():
        objects[(s, r)].append(o)
        subjects[(o, r)].append(s)
    return dict(objects), dict(subjects)


def kvsall_batch(keys: list[tuple[int, int]], completions: dict, side: str,
                 n_entities: int) -> SideBatch:
    labels = np.zeros((len(keys), n_entities))
    for i, key in enumerate(keys):
        labels[i, completions[key]] = 1.0
    anchor = np.array([k[0] for k in keys], dtype=np.int64)
    rel = np.array([k[1] for k in keys], dtype=np.int64)
    return SideBatch(anchor, rel, side, labels)


def generate_negatives(kg: KnowledgeGraph, batch: np.ndarray, strategy: str,
                       rng: np.random.Generator | int | None = None,
                       n_neg: int = 1) -> list[SideBatch]:
    """Labelled examples for a batch of positive train triples.

    NegSamp draws ``n_neg`` uniform corruptions per side without filtering
    false negatives; 1vsAll scores every entity per side; KvsAll builds label
    vectors over all entities for the batch's ``(s, r)`` and ``(o, r)`` keys.
    """
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 3)
    s, r, o = batch.T
    n = kg.n_entities
    if strategy == "negsamp":
        rng = np.random.default_rng(rng)
        out = []
        for side, anchor, true in (("object", s, o), ("subject", o, s)):
            neg = rng.integers(0, n, size=(len(batch), n_neg))
            cands = np.concatenate([true[:, None], neg], axis=1)
            labels = np.zeros(cands.shape)
            labels[:, 0] = 1.0
            out.append(SideBatch(anchor, r, side, labels, cands))
        return out
    if strategy == "1vsall":
        return [SideBatch(s, r, "object", _one_hot(o, n)),
                SideBatch(o, r, "subject", _one_hot(s, n))]
    if strategy == "kvsall":
        objects, subjects = kvsall_index(kg)
        sr = sorted({(a, b) for a, b in zip(s.tolist(), r.tolist())})
        orr = sorted({(a, b) for a, b in zip(o.tolist(), r.tolist())})
        return [kvsall_batch(sr, objects, "object", n), kvsall_batch(orr, subjects, "subject", n)]
    raise ValueError(f"unknown strategy {strategy!r}")


def loss_value(loss: str, scores: np.ndarray, labels: np.ndarray, margin: float = 9.0,
               margin_sign: str = "standard") -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. ``scores`` (both arrays shaped ``(B, C)``).

    BCE averages over all entries; CE averages over rows of the softmax cross
    entropy against row-normalised labels; margin averages the hinge over every
    (positive, negative) pair within a row.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    if not np.all(np.isfinite(scores)):
        raise NonFiniteScoreError("non-finite scores")
    if scores.ndim == 1:
        scores, labels = scores[None], labels[None]
    if loss == "bce":
        value = np.mean(labels * np.logaddexp(0.0, -scores) + (1 - labels) * np.logaddexp(0.0, scores))
        grad = (expit(scores) - labels) / scores.size
        return float(value), grad
    if loss == "ce":
        mass = labels.sum(axis=1, keepdims=True)
        if np.any(mass <= 0):
            raise ValueError("cross entropy needs at least one positive label per row")
        target = labels / mass
        value = -np.sum(target * log_softmax(scores, axis=1)) / len(scores)
        grad = (softmax(scores, axis=1) - target) / len(scores)
        return float(value), grad
    if loss == "margin":
        pos = labels > 0.5
        sign = 1.0 if margin_sign == "standard" else -1.0
        f_pos = np.where(pos, scores, 0.0).sum(axis=1, keepdims=True) / np.maximum(pos.sum(1, keepdims=True), 1)
        # one positive per row; pair it with every negative in the row
        diff = margin - sign * (f_pos - scores)
        active = (~pos) & (diff > 0)
        n_pairs = max(int((~pos).sum()), 1)
        value = np.sum(np.where(active, diff, 0.0)) / n_pairs
        grad = np.zeros_like(scores)
        grad += np.where(active, sign, 0.0) / n_pairs
        grad -= pos * (np.sum(active, axis=1, keepdims=True) * sign / n_pairs)
        return float(value), grad
    raise ValueError(f"unknown loss {loss!r}")


def side_scores(model: EmbeddingModel, sb: SideBatch) -> np.ndarray:
    if sb.candidates is None:
        return model.candidate_scores(sb.anchor, sb.rel, sb.side)
    ea = model.ent[sb.anchor][:, None, :]
    er = model.rel[sb.rel][:, None, :]
    ec = model.ent[sb.candidates]
    if sb.side == "object":
        return model.score_emb(ea, er, ec)
    return model.score_emb(ec, er, ea)


def side_backward(model: EmbeddingModel, sb: SideBatch, dscores: np.ndarray):
    if sb.candidates is None:
        return model.candidate_backward(sb.anchor, sb.rel, sb.side, dscores)
    anchor = np.broadcast_to(sb.anchor[:, None], sb.candidates.shape)
    rel = np.broadcast_to(sb.rel[:, None], sb.candidates.shape)
    if sb.side == "object":
        return model.triple_backward(anchor, rel, sb.candidates, dscores)
    return model.triple_backward(sb.candidates, rel, anchor, dscores)


def sides_objective(model: EmbeddingModel, sides: list[SideBatch], cfg: TrainConfig,
                    smooth: bool = True) -> tuple[float, np.ndarray, np.ndarray]:
    """Summed side losses (each side averaged over its rows) and dense gradients."""
    total = 0.0
    dE = np.zeros_like(model.ent)
    dR = np.zeros_like(model.rel)
    for sb in sides:
        labels = sb.labels
        if smooth and cfg.label_smoothing > 0 and cfg.loss != "margin":
            labels = (1.0 - cfg.label_smoothing) * labels + cfg.label_smoothing / labels.shape[1]
        value, g = loss_value(cfg.loss, side_scores(model, sb), labels, cfg.margin, cfg.margin_sign)
        gE, gR = side_backward(model, sb, g)
        total += value
        dE += gE
        dR += gR
    return total, dE, dR


def _n3_rows(model: EmbeddingModel, rows: np.ndarray, matrix: np.ndarray, weight: float):
    x = matrix[rows]
    if model.kind == "complex":
        re, im = x[:, : model.k], x[:, model.k:]
        mod = np.sqrt(re ** 2 + im ** 2)
        value = np.sum(mod ** 3)
        g = 3.0 * np.concatenate([mod * re, mod * im], axis=1)
    else:
        value = np.sum(np.abs(x) ** 3)
        g = 3.0 * x * np.abs(x)
    grad = np.zeros_like(matrix)
    np.add.at(grad, rows, g)
    return weight * value, weight * grad


def regularizer(model: EmbeddingModel, cfg: TrainConfig, ent_rows=None, rel_rows=None,
                batch_size: int = 1) -> tuple[float, np.ndarray, np.ndarray]:
    """L2 on all parameters, or N3 on the embedding rows used by the batch."""
    if cfg.regularizer == "none" or cfg.reg_weight == 0.0:
        return 0.0, np.zeros_like(model.ent), np.zeros_like(model.rel)
    w = cfg.reg_weight
    if cfg.regularizer == "l2":
        value = w * (np.sum(model.ent ** 2) + np.sum(model.rel ** 2))
        return float(value), 2 * w * model.ent, 2 * w * model.rel
    ve, gE = _n3_rows(model, np.asarray(ent_rows).ravel(), model.ent, w / batch_size)
    vr, gR = _n3_rows(model, np.asarray(rel_rows).ravel(), model.rel, w / batch_size)
    return float(ve + vr), gE, gR


class Adam:
    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.lr * g


@dataclass
class TrainResult:
    model: EmbeddingModel
    trace: list[float] = field(default_factory=list)


def _triple_batches(kg, cfg, rng):
    order = rng.permutation(len(kg.train))
    for lo in range(0, len(order), cfg.batch_size):
        yield kg.train[order[lo: lo + cfg.batch_size]]


def train(kg: KnowledgeGraph, model_config: ModelConfig, cfg: TrainConfig,
          model: EmbeddingModel | None = None) -> TrainResult:
    """Minimise the configured objective; returns the model and per-epoch mean loss."""
    cfg.validate()
    if len(kg.train) == 0:
        raise ValueError("cannot train on an empty train set")
    init_seq, shuffle_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    if model is None:
        model = init_model(model_config.kind, model_config.dim, kg.n_entities, kg.n_relations,
                           seed=int(init_seq.generate_state(1)[0]), p=model_config.p)
    else:
        model = model.copy()
    if cfg.optimizer == "lbfgs":
        return _train_lbfgs(kg, model, cfg)
    rng = np.random.default_rng(shuffle_seq)
    opt = Adam(cfg.lr, cfg.betas, cfg.eps) if cfg.optimizer == "adam" else SGD(cfg.lr)
    if cfg.strategy == "kvsall":
        objects, subjects = kvsall_index(kg)
        sr_keys, or_keys = sorted(objects), sorted(subjects)

    trace = []
    for epoch in range(cfg.epochs):
        losses = []
        if cfg.strategy == "kvsall":
            batches = []
            sr = [sr_keys[i] for i in rng.permutation(len(sr_keys))]
            orr = [or_keys[i] for i in rng.permutation(len(or_keys))]
            sr_b = [sr[i: i + cfg.batch_size] for i in range(0, len(sr), cfg.batch_size)]
            or_b = [orr[i: i + cfg.batch_size] for i in range(0, len(orr), cfg.batch_size)]
            for i in range(max(len(sr_b), len(or_b))):
                if i < len(sr_b):
                    batches.append(kvsall_batch(sr_b[i], objects, "object", kg.n_entities))
                if i < len(or_b):
                    batches.append(kvsall_batch(or_b[i], subjects, "subject", kg.n_entities))
            steps = ([sb] for sb in batches)
        else:
            steps = (generate_negatives(kg, b, cfg.strategy, rng, cfg.n_neg)
                     for b in _triple_batches(kg, cfg, rng))
        for sides in steps:
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    value, dE, dR = sides_objective(model, sides, cfg)
            except NonFiniteScoreError:
                raise TrainingDivergedError(epoch) from None
            if cfg.regularizer == "n3":
                if cfg.strategy == "kvsall":
                    ent_rows, rel_rows = sides[0].anchor, sides[0].rel
                else:
                    # sides[0] anchors are subjects, sides[1] anchors are objects
                    ent_rows = np.concatenate([sides[0].anchor, sides[1].anchor])
                    rel_rows = sides[0].rel
                rv, rE, rR = regularizer(model, cfg, ent_rows, rel_rows, len(sides[0].anchor))
            else:
                rv, rE, rR = regularizer(model, cfg)
            value += rv
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch)
            opt.step([model.ent, model.rel], [dE + rE, dR + rR])
            losses.append(value)
        if not (np.all(np.isfinite(model.ent)) and np.all(np.isfinite(model.rel))):
            raise TrainingDivergedError(epoch)
        trace.append(float(np.mean(losses)))
        logger.debug("epoch %d loss %.6f", epoch, trace[-1])
    return TrainResult(model, trace)


def full_batch_sides(kg: KnowledgeGraph, strategy: str) -> list[SideBatch]:
    if strategy == "kvsall":
        objects, subjects = kvsall_index(kg)
        return [kvsall_batch(sorted(objects), objects, "object", kg.n_entities),
                kvsall_batch(sorted(subjects), subjects, "subject", kg.n_entities)]
    return generate_negatives(kg, kg.train, strategy)


def _train_lbfgs(kg: KnowledgeGraph, model: EmbeddingModel, cfg: TrainConfig) -> TrainResult:
    """Deterministic full-batch L-BFGS; ``epochs`` caps the iterations.

    Used where tight convergence matters (retraining oracles, influence checks).
    """
    from scipy.optimize import minimize

    sides = full_batch_sides(kg, cfg.strategy)
    ent_rows = np.concatenate([kg.train[:, 0], kg.train[:, 2]])

    def fun(theta):
        m = model.with_flat(theta)
        value, dE, dR = sides_objective(m, sides, cfg)
        rv, rE, rR = regularizer(m, cfg, ent_rows, kg.train[:, 1], len(kg.train))
        return value + rv, np.concatenate([(dE + rE).ravel(), (dR + rR).ravel()])

    trace: list[float] = []
    if cfg.epochs == 0:
        return TrainResult(model, trace)
    res = minimize(fun, model.flat(), jac=True, method="L-BFGS-B",
                   callback=lambda th: trace.append(float(fun(th)[0])),
                   options={"maxiter": cfg.epochs, "gtol": 1e-10, "ftol": 1e-15, "maxcor": 20})
    if not np.all(np.isfinite(res.x)) or not np.isfinite(res.fun):
        raise TrainingDivergedError(len(trace))
    return TrainResult(model.with_flat(res.x), trace)


def write_loss_trace(trace: list[float], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(v)])
