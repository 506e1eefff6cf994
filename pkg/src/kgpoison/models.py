"""Shallow KGE scoring functions: DistMult, ComplEx and TransE.

All models store one entity matrix and one relation matrix of real numbers.
ComplEx rows hold the ``k`` real parts followed by the ``k`` imaginary parts,
so every complex product is expanded into real arithmetic here.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import NamedTuple

import numpy as np

CHECKPOINT_VERSION = 1
KINDS = ("distmult", "complex", "transe")

# Max elements materialised at once when TransE scores against all entities.
_CHUNK_ELEMENTS = 1 << 22


class ScoreGrad(NamedTuple):
    """Partial derivatives of one triple's score w.r.t. its three embedding rows."""
    s: int
    r: int
    o: int
    ds: np.ndarray
    dr: np.ndarray
    do: np.ndarray

    def dense(self, n_entities: int, n_relations: int) -> tuple[np.ndarray, np.ndarray]:
        d = len(self.ds)
        dE = np.zeros((n_entities, d))
        dR = np.zeros((n_relations, d))
        dE[self.s] += self.ds
        dE[self.o] += self.do
        dR[self.r] += self.dr
        return dE, dR


class EmbeddingModel:
    kind: str = ""
    multiplicative: bool = True

    def __init__(self, ent: np.ndarray, rel: np.ndarray, k: int, p: int = 2):
        self.ent = np.asarray(ent, dtype=np.float64)
        self.rel = np.asarray(rel, dtype=np.float64)
        self.k = int(k)
        self.p = int(p)
        if self.ent.shape[1] != self.width or self.rel.shape[1] != self.width:
            raise ValueError(f"{self.kind} with k={k} needs rows of width {self.width}")

    @property
    def width(self) -> int:
        return self.k

    @property
    def n_entities(self) -> int:
        return self.ent.shape[0]

    @property
    def n_relations(self) -> int:
        return self.rel.shape[0]

    def copy(self) -> "EmbeddingModel":
        return type(self)(self.ent.copy(), self.rel.copy(), self.k, self.p)

    def __repr__(self):
        return f"{type(self).__name__}(k={self.k}, |E|={self.n_entities}, |R|={self.n_relations})"

    # flat parameter view, entity rows first
    @property
    def n_params(self) -> int:
        return self.ent.size + self.rel.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.ent.ravel(), self.rel.ravel()])

    def with_flat(self, theta: np.ndarray) -> "EmbeddingModel":
        n = self.ent.size
        return type(self)(theta[:n].reshape(self.ent.shape).copy(),
                          theta[n:].reshape(self.rel.shape).copy(), self.k, self.p)

    def check_ids(self, s, r, o) -> None:
        s, r, o = (np.asarray(x) for x in (s, r, o))
        if (np.any(s < 0) or np.any(s >= self.n_entities) or np.any(o < 0)
                or np.any(o >= self.n_entities) or np.any(r < 0) or np.any(r >= self.n_relations)):
            raise IndexError("triple ids out of range for this model")

    # --- per-triple scoring -------------------------------------------------
    def score_emb(self, es, er, eo) -> np.ndarray:
        raise NotImplementedError

    def features_emb(self, es, er, eo) -> np.ndarray:
        raise NotImplementedError

    def grad_emb(self, es, er, eo) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        raise NotImplementedError

    def score(self, s, r, o):
        """Score of ``(s, r, o)``; broadcasts over integer arrays."""
        self.check_ids(s, r, o)
        out = self.score_emb(self.ent[s], self.rel[r], self.ent[o])
        return float(out) if np.ndim(out) == 0 else out

    def feature_vector(self, s, r, o) -> np.ndarray:
        self.check_ids(s, r, o)
        return self.features_emb(self.ent[s], self.rel[r], self.ent[o])

    def grad_score(self, triple) -> ScoreGrad:
        s, r, o = (int(x) for x in triple)
        self.check_ids(s, r, o)
        ds, dr, do = self.grad_emb(self.ent[s], self.rel[r], self.ent[o])
        return ScoreGrad(s, r, o, ds, dr, do)

    def triple_backward(self, s, r, o, dscores) -> tuple[np.ndarray, np.ndarray]:
        """Accumulate ``sum_i dscores[i] * grad score(s_i, r_i, o_i)`` into dense arrays."""
        s, r, o = (np.asarray(x).ravel() for x in (s, r, o))
        g = np.asarray(dscores, dtype=np.float64).ravel()[:, None]
        ds, dr, do = self.grad_emb(self.ent[s], self.rel[r], self.ent[o])
        dE = np.zeros_like(self.ent)
        dR = np.zeros_like(self.rel)
        np.add.at(dE, s, g * ds)
        np.add.at(dE, o, g * do)
        np.add.at(dR, r, g * dr)
        return dE, dR

    # --- scoring against every entity ---------------------------------------
    def candidate_scores(self, anchor, r, side: str) -> np.ndarray:
        """Scores of all entities as the ``side`` slot; returns shape ``(B, |E|)``.

        ``side="object"`` scores ``(anchor, r, e)``; ``side="subject"`` scores
        ``(e, r, anchor)``.
        """
        anchor, r = np.atleast_1d(anchor), np.atleast_1d(r)
        q = self._query(self.ent[anchor], self.rel[r], side)
        return q @ self.ent.T

    def candidate_backward(self, anchor, r, side: str, dscores) -> tuple[np.ndarray, np.ndarray]:
        anchor, r = np.atleast_1d(anchor), np.atleast_1d(r)
        ea, er = self.ent[anchor], self.rel[r]
        q = self._query(ea, er, side)
        dE = dscores.T @ q
        dq = dscores @ self.ent
        da, dr = self._query_backward(ea, er, side, dq)
        np.add.at(dE, anchor, da)
        dR = np.zeros_like(self.rel)
        np.add.at(dR, r, dr)
        return dE, dR

    def _query(self, ea, er, side):
        raise NotImplementedError

    def _query_backward(self, ea, er, side, dq):
        raise NotImplementedError


class DistMult(EmbeddingModel):
    kind = "distmult"

    def score_emb(self, es, er, eo):
        return np.sum(es * er * eo, axis=-1)

    def features_emb(self, es, er, eo):
        return es * er * eo

    def grad_emb(self, es, er, eo):
        return er * eo, es * eo, es * er

    def _query(self, ea, er, side):
        return ea * er

    def _query_backward(self, ea, er, side, dq):
        return dq * er, dq * ea


def _split(x):
    k = x.shape[-1] // 2
    return x[..., :k], x[..., k:]


class ComplEx(EmbeddingModel):
    kind = "complex"

    @property
    def width(self) -> int:
        return 2 * self.k

    def features_emb(self, es, er, eo):
        sr, si = _split(es)
        rr, ri = _split(er)
        or_, oi = _split(eo)
        return sr * rr * or_ + sr * ri * oi + si * rr * oi - si * ri * or_

    def score_emb(self, es, er, eo):
        return np.sum(self.features_emb(es, er, eo), axis=-1)

    def grad_emb(self, es, er, eo):
        sr, si = _split(es)
        rr, ri = _split(er)
        or_, oi = _split(eo)
        ds = np.concatenate([rr * or_ + ri * oi, rr * oi - ri * or_], axis=-1)
        dr = np.concatenate([sr * or_ + si * oi, sr * oi - si * or_], axis=-1)
        do = np.concatenate([sr * rr - si * ri, sr * ri + si * rr], axis=-1)
        return ds, dr, do

    def _query(self, ea, er, side):
        ar, ai = _split(ea)
        rr, ri = _split(er)
        if side == "object":
            # Re(s r conj(o)) = <[Re(sr), Im(sr)], [o_re, o_im]>
            return np.concatenate([ar * rr - ai * ri, ar * ri + ai * rr], axis=-1)
        # Re(s * r conj(o)) = <[Re(b), -Im(b)], [s_re, s_im]> with b = r conj(o)
        return np.concatenate([rr * ar + ri * ai, rr * ai - ri * ar], axis=-1)

    def _query_backward(self, ea, er, side, dq):
        ar, ai = _split(ea)
        rr, ri = _split(er)
        g1, g2 = _split(dq)
        if side == "object":
            da = np.concatenate([g1 * rr + g2 * ri, -g1 * ri + g2 * rr], axis=-1)
            dr = np.concatenate([g1 * ar + g2 * ai, -g1 * ai + g2 * ar], axis=-1)
        else:
            da = np.concatenate([g1 * rr - g2 * ri, g1 * ri + g2 * rr], axis=-1)
            dr = np.concatenate([g1 * ar + g2 * ai, g1 * ai - g2 * ar], axis=-1)
        return da, dr


class TransE(EmbeddingModel):
    kind = "transe"
    multiplicative = False

    def __init__(self, ent, rel, k, p=2):
        if p not in (1, 2):
            raise ValueError("TransE norm order must be 1 or 2")
        super().__init__(ent, rel, k, p)

    def _norm(self, x):
        return np.linalg.norm(x, ord=self.p, axis=-1)

    def _dnorm(self, x):
        """d(-||x||_p)/dx; zero at the singular point x = 0."""
        if self.p == 1:
            return -np.sign(x)
        n = np.linalg.norm(x, axis=-1, keepdims=True)
        return np.divide(-x, n, out=np.zeros_like(x), where=n > 0)

    def features_emb(self, es, er, eo):
        return -(es + er - eo)

    def score_emb(self, es, er, eo):
        return -self._norm(es + er - eo)

    def grad_emb(self, es, er, eo):
        g = self._dnorm(es + er - eo)
        return g, g, -g

    def _query(self, ea, er, side):
        # both sides reduce to -||q - e||: object q = s + r, subject q = o - r
        return ea + er if side == "object" else ea - er

    def _chunks(self, batch):
        step = max(1, _CHUNK_ELEMENTS // max(1, batch * self.width))
        for lo in range(0, self.n_entities, step):
            yield slice(lo, min(lo + step, self.n_entities))

    def candidate_scores(self, anchor, r, side):
        anchor, r = np.atleast_1d(anchor), np.atleast_1d(r)
        q = self._query(self.ent[anchor], self.rel[r], side)
        out = np.empty((len(q), self.n_entities))
        for sl in self._chunks(len(q)):
            out[:, sl] = -self._norm(q[:, None, :] - self.ent[None, sl, :])
        return out

    def candidate_backward(self, anchor, r, side, dscores):
        anchor, r = np.atleast_1d(anchor), np.atleast_1d(r)
        q = self._query(self.ent[anchor], self.rel[r], side)
        dq = np.zeros_like(q)
        dE = np.zeros_like(self.ent)
        for sl in self._chunks(len(q)):
            g = self._dnorm(q[:, None, :] - self.ent[None, sl, :]) * dscores[:, sl, None]
            dq += g.sum(axis=1)
            dE[sl] -= g.sum(axis=0)
        np.add.at(dE, anchor, dq)
        dR = np.zeros_like(self.rel)
        np.add.at(dR, r, dq if side == "object" else -dq)
        return dE, dR


MODEL_CLASSES = {cls.kind: cls for cls in (DistMult, ComplEx, TransE)}


def init_model(kind: str, k: int, n_entities: int, n_relations: int, seed: int,
               p: int = 2) -> EmbeddingModel:
    """Uniform ``(-6/sqrt(d), 6/sqrt(d))`` initialisation, fully determined by ``seed``."""
    kind = kind.lower()
    if kind not in MODEL_CLASSES:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")
    if k < 1:
        raise ValueError("embedding dimension must be >= 1")
    if n_entities < 1 or n_relations < 1:
        raise ValueError("cannot initialise a model over an empty vocabulary")
    d = 2 * k if kind == "complex" else k
    bound = 6.0 / np.sqrt(d)
    rng = np.random.default_rng(seed)
    ent = rng.uniform(-bound, bound, size=(n_entities, d))
    rel = rng.uniform(-bound, bound, size=(n_relations, d))
    return MODEL_CLASSES[kind](ent, rel, k, p)


def save_checkpoint(model: EmbeddingModel, path: str | Path, **meta) -> None:
    header = {"version": CHECKPOINT_VERSION, "kind": model.kind, "k": model.k, "p": model.p,
              "n_entities": model.n_entities, "n_relations": model.n_relations, **meta}
    with open(path, "wb") as fh:
        np.savez(fh, ent=model.ent, rel=model.rel,
                 header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8))


def load_checkpoint(path: str | Path) -> tuple[EmbeddingModel, dict]:
    with np.load(path) as data:
        header = json.loads(data["header"].tobytes().decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        model = MODEL_CLASSES[header["kind"]](data["ent"], data["rel"], header["k"], header["p"])
    return model, header
