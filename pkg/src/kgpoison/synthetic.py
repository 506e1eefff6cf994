"""Synthetic knowledge graphs with planted relation patterns.

Each relation group declares its semantics:

* ``symmetric``: ``(a, r, b)`` implies ``(b, r, a)``,
* ``inverse_pair``: relations ``r`` and ``r_inv`` with ``(a, r, b)`` implying ``(b, r_inv, a)``,
* ``composition``: relations ``r1``, ``r2``, ``r`` with ``(a, r1, c), (c, r2, b)`` implying ``(a, r, b)``,
* ``random``: uniformly random edges.

``density`` is the expected number of base edges per entity. ``noise`` is the
fraction of implied triples dropped. Valid/test only receive triples whose
premise stays in train, so the pattern can still be inferred from train.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .graph import KnowledgeGraph

KINDS = ("symmetric", "inverse_pair", "composition", "random")


@dataclass
class RelationSpec:
    kind: str
    density: float = 2.0


@dataclass
class SyntheticKgConfig:
    n_entities: int = 60
    relations: list[RelationSpec] = field(default_factory=lambda: [RelationSpec("symmetric")])
    noise: float = 0.0
    seed: int = 0
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        self.relations = [r if isinstance(r, RelationSpec) else RelationSpec(**r) for r in self.relations]
        self.split = tuple(self.split)
        errors = []
        if self.n_entities < 2:
            errors.append("n_entities must be >= 2")
        for i, r in enumerate(self.relations):
            if r.kind not in KINDS:
                errors.append(f"relations[{i}].kind: {r.kind!r} not in {KINDS}")
            if r.density <= 0:
                errors.append(f"relations[{i}].density must be > 0")
        if not 0 <= self.noise < 1:
            errors.append("noise must be in [0, 1)")
        if not self.relations:
            errors.append("at least one relation group is required")
        if abs(sum(self.split) - 1.0) > 1e-9:
            errors.append("split fractions must sum to 1")
        if errors:
            raise ValueError("invalid SyntheticKgConfig: " + "; ".join(errors))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d


def _random_pairs(rng, n_entities: int, n_edges: int, symmetric: bool = False) -> list[tuple[int, int]]:
    """Distinct ordered pairs ``a != b`` (unordered when ``symmetric``), sorted."""
    max_pairs = n_entities * (n_entities - 1) // (2 if symmetric else 1)
    n_edges = min(n_edges, max_pairs)
    chosen: set[tuple[int, int]] = set()
    while len(chosen) < n_edges:
        a, b = (int(x) for x in rng.integers(0, n_entities, size=2))
        if a == b:
            continue
        chosen.add((min(a, b), max(a, b)) if symmetric else (a, b))
    return sorted(chosen)


def generate_synthetic_kg(config: SyntheticKgConfig) -> KnowledgeGraph:
    """Generate the graph deterministically from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    n = config.n_entities
    names: list[str] = []
    patterns: list[dict] = []
    # per relation id: list of (triple, premises) where premises are alternatives,
    # each a tuple of triples that must all stay in train for the triple to be held out
    groups: list[list[tuple[tuple, list[tuple]]]] = []
    counts = {k: 0 for k in KINDS}

    def new_relation(name):
        names.append(name)
        groups.append([])
        return len(names) - 1

    for spec in config.relations:
        idx = counts[spec.kind]
        counts[spec.kind] += 1
        n_edges = max(1, int(round(spec.density * n)))
        if spec.kind == "symmetric":
            r = new_relation(f"sym{idx}")
            patterns.append({"kind": "symmetric", "relations": [r]})
            for a, b in _random_pairs(rng, n, max(1, n_edges // 2), symmetric=True):
                first, second = ((a, r, b), (b, r, a)) if rng.random() < 0.5 else ((b, r, a), (a, r, b))
                groups[r].append((first, [(second,)]))
                if rng.random() >= config.noise:
                    groups[r].append((second, [(first,)]))
        elif spec.kind == "inverse_pair":
            r = new_relation(f"inv{idx}")
            ri = new_relation(f"inv{idx}_rev")
            patterns.append({"kind": "inverse_pair", "relations": [r, ri]})
            for a, b in _random_pairs(rng, n, n_edges):
                groups[r].append(((a, r, b), [((b, ri, a),)]))
                if rng.random() >= config.noise:
                    groups[ri].append(((b, ri, a), [((a, r, b),)]))
        elif spec.kind == "composition":
            r1 = new_relation(f"comp{idx}_a")
            r2 = new_relation(f"comp{idx}_b")
            r = new_relation(f"comp{idx}")
            patterns.append({"kind": "composition", "relations": [r1, r2, r]})
            e1 = _random_pairs(rng, n, n_edges)
            e2 = _random_pairs(rng, n, n_edges)
            groups[r1].extend(((a, r1, c), []) for a, c in e1)
            groups[r2].extend(((c, r2, b), []) for c, b in e2)
            by_mid: dict[int, list[int]] = {}
            for c, b in e2:
                by_mid.setdefault(c, []).append(b)
            paths: dict[tuple[int, int], list[tuple]] = {}
            for a, c in e1:
                for b in by_mid.get(c, []):
                    paths.setdefault((a, b), []).append(((a, r1, c), (c, r2, b)))
            for (a, b), prem in sorted(paths.items()):
                if rng.random() >= config.noise:
                    groups[r].append(((a, r, b), prem))
        else:
            r = new_relation(f"rand{idx}")
            patterns.append({"kind": "random", "relations": [r]})
            groups[r].extend(((a, r, b), []) for a, b in _random_pairs(rng, n, n_edges))

    all_triples = [t for g in groups for t, _ in g]
    if any(not g for g in groups):
        raise ValueError("configuration produced a relation without triples")
    present = set(all_triples)
    held: dict[tuple, str] = {}
    pinned: set[tuple] = set()  # premises of held-out triples stay in train
    _, f_valid, f_test = config.split
    for g in groups:
        want = {"test": int(round(f_test * len(g))), "valid": int(round(f_valid * len(g)))}
        for i in rng.permutation(len(g)):
            split = "test" if want["test"] > 0 else "valid" if want["valid"] > 0 else None
            if split is None:
                break
            t, prem = g[i]
            if t in pinned:
                continue
            if prem:
                alive = [alt for alt in prem
                         if all(p in present and p not in held for p in alt)]
                if not alive:
                    continue
                pinned.update(alive[0])
            held[t] = split
            want[split] -= 1

    train = [t for t in all_triples if t not in held]
    seen = {e for s, _, o in train for e in (s, o)}
    for t in list(held):
        if t[0] not in seen or t[2] not in seen:
            del held[t]
    train = [t for t in all_triples if t not in held]
    valid = [t for t in all_triples if held.get(t) == "valid"]
    test = [t for t in all_triples if held.get(t) == "test"]
    return KnowledgeGraph(tuple(f"e{i}" for i in range(n)), tuple(names),
                          np.array(train, np.int64).reshape(-1, 3),
                          np.array(valid, np.int64).reshape(-1, 3),
                          np.array(test, np.int64).reshape(-1, 3),
                          info={"patterns": patterns, "config": config.to_dict()})


def check_patterns(kg: KnowledgeGraph, splits=("train", "valid", "test")) -> dict[str, float]:
    """Fraction of premises whose implied triple is present, per planted group."""
    triples = set()
    for sp in splits:
        triples.update(map(tuple, getattr(kg, sp).tolist()))
    out = {}
    for i, p in enumerate(kg.info.get("patterns", [])):
        rels = p["relations"]
        if p["kind"] == "symmetric":
            (r,) = rels
            prem = [(s, o) for s, rr, o in triples if rr == r]
            ok = sum((o, r, s) in triples for s, o in prem)
        elif p["kind"] == "inverse_pair":
            r, ri = rels
            prem = [(s, o) for s, rr, o in triples if rr == r]
            ok = sum((o, ri, s) in triples for s, o in prem)
        elif p["kind"] == "composition":
            r1, r2, r = rels
            second: dict[int, list[int]] = {}
            for s, rr, o in triples:
                if rr == r2:
                    second.setdefault(s, []).append(o)
            prem = [(s, b) for s, rr, c in triples if rr == r1 for b in second.get(c, [])]
            ok = sum((s, r, b) in triples for s, b in prem)
        else:
            continue
        out[f"{p['kind']}{i}"] = ok / len(prem) if prem else 1.0
    return out
