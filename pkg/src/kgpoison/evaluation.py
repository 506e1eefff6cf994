"""Filtered entity-ranking evaluation, metrics, target selection and ΔMRR."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .graph import KnowledgeGraph, Triple
from .models import EmbeddingModel

TIE_POLICIES = ("average", "optimistic", "pessimistic")
SIDES = ("subject", "object")
HITS = (1, 3, 10)


def rank_from_scores(scores: np.ndarray, true_idx, mask: np.ndarray | None = None,
                     tie_policy: str = "average") -> np.ndarray:
    """Rank of ``scores[i, true_idx[i]]`` among the unmasked entries of row ``i``.

    ``mask`` marks candidates to drop (filtered corruptions); the true entry is
    never dropped. Ties with other candidates are resolved by ``tie_policy``.
    """
    if tie_policy not in TIE_POLICIES:
        raise ValueError(f"unknown tie policy {tie_policy!r}")
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    true_idx = np.atleast_1d(np.asarray(true_idx))
    rows = np.arange(len(scores))
    true = scores[rows, true_idx][:, None]
    keep = np.ones(scores.shape, dtype=bool) if mask is None else ~np.atleast_2d(mask)
    keep[rows, true_idx] = False
    greater = np.sum((scores > true) & keep, axis=1)
    equal = np.sum((scores == true) & keep, axis=1)
    if tie_policy == "optimistic":
        return 1.0 + greater
    if tie_policy == "pessimistic":
        return 1.0 + greater + equal
    return 1.0 + greater + equal / 2.0


def _filter_mask(kg: KnowledgeGraph, triples: np.ndarray, side: str) -> np.ndarray:
    mask = np.zeros((len(triples), kg.n_entities), dtype=bool)
    for i, (s, r, o) in enumerate(triples.tolist()):
        known = kg.known_objects(s, r) if side == "object" else kg.known_subjects(r, o)
        mask[i, known] = True
    return mask


def rank_triples(model: EmbeddingModel, kg: KnowledgeGraph, triples, side: str,
                 filtered: bool = True, tie_policy: str = "average",
                 batch_size: int = 256) -> np.ndarray:
    """Ranks of the true entity on ``side`` for each triple."""
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}")
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    model.check_ids(triples[:, 0], triples[:, 1], triples[:, 2])
    out = np.empty(len(triples))
    for lo in range(0, len(triples), batch_size):
        t = triples[lo: lo + batch_size]
        if side == "object":
            scores = model.candidate_scores(t[:, 0], t[:, 1], "object")
            true = t[:, 2]
        else:
            scores = model.candidate_scores(t[:, 2], t[:, 1], "subject")
            true = t[:, 0]
        mask = _filter_mask(kg, t, side) if filtered else None
        out[lo: lo + batch_size] = rank_from_scores(scores, true, mask, tie_policy)
    return out


def rank(model: EmbeddingModel, triple, kg: KnowledgeGraph, side: str,
         filtered: bool = True, tie_policy: str = "average") -> float:
    return float(rank_triples(model, kg, [tuple(triple)], side, filtered, tie_policy)[0])


def metrics_from_ranks(ranks) -> dict[str, float]:
    ranks = np.asarray(ranks, dtype=np.float64).ravel()
    if ranks.size == 0:
        raise ValueError("no ranks to aggregate")
    out = {"mr": float(np.mean(ranks)), "mrr": float(np.mean(1.0 / ranks))}
    for n in HITS:
        out[f"hits{n}"] = float(np.mean(ranks <= n))
    return out


@dataclass(frozen=True)
class EvalReport:
    """Per-triple subject/object ranks plus aggregates over both sides."""
    triples: np.ndarray
    subject_ranks: np.ndarray
    object_ranks: np.ndarray

    @property
    def ranks(self) -> np.ndarray:
        return np.concatenate([self.subject_ranks, self.object_ranks])

    @property
    def metrics(self) -> dict[str, float]:
        return metrics_from_ranks(self.ranks)

    @property
    def mr(self) -> float:
        return self.metrics["mr"]

    @property
    def mrr(self) -> float:
        return self.metrics["mrr"]

    def hits(self, n: int) -> float:
        return float(np.mean(self.ranks <= n))

    def __len__(self) -> int:
        return len(self.triples)

    def mean_ranks(self) -> np.ndarray:
        """Mean of subject and object rank per triple."""
        return (self.subject_ranks + self.object_ranks) / 2.0


def evaluate(model: EmbeddingModel, kg: KnowledgeGraph, triples, filtered: bool = True,
             tie_policy: str = "average") -> EvalReport:
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    if len(triples) == 0:
        raise ValueError("evaluate needs at least one triple")
    return EvalReport(triples,
                      rank_triples(model, kg, triples, "subject", filtered, tie_policy),
                      rank_triples(model, kg, triples, "object", filtered, tie_policy))


def select_targets(report: EvalReport, rank_threshold: float, cap: int | None = None,
                   seed: int = 0, side: str = "both") -> list[Triple]:
    """Triples ranked at most ``rank_threshold`` on ``side`` ("both", "subject" or "object").

    Qualifiers keep report order; above ``cap`` a seeded uniform sample is
    taken and returned in report order.
    """
    if side == "both":
        ok = (report.subject_ranks <= rank_threshold) & (report.object_ranks <= rank_threshold)
    elif side == "subject":
        ok = report.subject_ranks <= rank_threshold
    elif side == "object":
        ok = report.object_ranks <= rank_threshold
    else:
        raise ValueError("side must be 'both', 'subject' or 'object'")
    idx = np.flatnonzero(ok)
    if len(idx) == 0:
        raise ValueError(f"no triple ranked <= {rank_threshold}")
    if cap is not None and len(idx) > cap:
        idx = np.sort(np.random.default_rng(seed).choice(idx, size=cap, replace=False))
    return [Triple(*map(int, report.triples[i])) for i in idx]


class DeltaMRR(NamedTuple):
    """Relative MRR change in percent, in both sign conventions.

    ``reduction`` = (original - poisoned) / original * 100 (positive = attack worked);
    ``change`` = (poisoned - original) / original * 100 (negative = attack worked).
    """
    reduction: float
    change: float


def delta_mrr(original, poisoned) -> DeltaMRR:
    mo = original.mrr if isinstance(original, EvalReport) else float(original)
    mp = poisoned.mrr if isinstance(poisoned, EvalReport) else float(poisoned)
    if mo == 0:
        raise ZeroDivisionError("original MRR is zero")
    return DeltaMRR((mo - mp) / mo * 100.0, (mp - mo) / mo * 100.0)


def _fmt_rank(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def write_ranks(report: EvalReport, path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write("s\tr\to\tsubject_rank\tobject_rank\n")
        for (s, r, o), a, b in zip(report.triples.tolist(), report.subject_ranks, report.object_ranks):
            fh.write(f"{s}\t{r}\t{o}\t{_fmt_rank(a)}\t{_fmt_rank(b)}\n")


def read_ranks(path: str | Path) -> EvalReport:
    rows = [line.rstrip("\n").split("\t") for line in open(path)][1:]
    triples = np.array([[int(x) for x in row[:3]] for row in rows], dtype=np.int64).reshape(-1, 3)
    return EvalReport(triples, np.array([float(row[3]) for row in rows]),
                      np.array([float(row[4]) for row in rows]))


def write_metrics(metrics: dict[str, float], path: str | Path) -> None:
    with open(path, "w") as fh:
        for key, value in metrics.items():
            fh.write(f"{key}={value!r}\n")


def read_metrics(path: str | Path) -> dict[str, float]:
    out = {}
    for line in open(path):
        if "=" in line:
            k, v = line.strip().split("=", 1)
            out[k] = float(v)
    return out
