"""Knowledge graph storage: loading, indexing, neighbourhoods and edits.

Triples are integer ``(s, r, o)`` tuples indexing into the entity and relation
vocabularies. A :class:`KnowledgeGraph` is immutable; edits build a new graph.
"""
from __future__ import annotations

import hashlib
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
ENTITY_VOCAB_FILE = "entities.dict"
RELATION_VOCAB_FILE = "relations.dict"


class DatasetFormatError(ValueError):
    """Malformed or missing dataset file."""


class EditError(ValueError):
    """An edit refers to triples or ids the graph does not contain."""


class Triple(NamedTuple):
    s: int
    r: int
    o: int


def _as_triple_array(triples: Iterable) -> np.ndarray:
    arr = np.asarray(list(triples), dtype=np.int64)
    return arr.reshape(-1, 3)


def _dedup(arr: np.ndarray) -> tuple[np.ndarray, int]:
    """Drop repeated rows keeping first occurrences in order."""
    seen: set[tuple[int, int, int]] = set()
    keep = []
    for i, row in enumerate(map(tuple, arr.tolist())):
        if row not in seen:
            seen.add(row)
            keep.append(i)
    return arr[keep], len(arr) - len(keep)


@dataclass(frozen=True, eq=False)
class KnowledgeGraph:
    """Entity/relation vocabularies with train/valid/test triple arrays.

    Triple arrays are ``(n, 3)`` int64 in ``(s, r, o)`` column order and are
    treated as sets: construction drops duplicate rows.
    """

    entities: tuple[str, ...]
    relations: tuple[str, ...]
    train: np.ndarray
    valid: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.int64))
    test: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.int64))
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in SPLITS:
            arr, _ = _dedup(np.asarray(getattr(self, name), dtype=np.int64).reshape(-1, 3))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        ne, nr = len(self.entities), len(self.relations)
        for name in SPLITS:
            arr = getattr(self, name)
            if len(arr) and (arr[:, [0, 2]].max() >= ne or arr[:, 1].max() >= nr or arr.min() < 0):
                raise EditError(f"{name} contains ids outside the vocabularies")

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def triples(self, split: str = "train") -> list[Triple]:
        return [Triple(*t) for t in getattr(self, split).tolist()]

    @cached_property
    def train_set(self) -> frozenset[Triple]:
        return frozenset(self.triples("train"))

    @cached_property
    def existing(self) -> frozenset[Triple]:
        """Membership index over train, valid and test."""
        return frozenset(self.triples("train") + self.triples("valid") + self.triples("test"))

    @cached_property
    def by_subject(self) -> dict[int, frozenset[Triple]]:
        index = defaultdict(set)
        for t in self.triples("train"):
            index[t.s].add(t)
        return {k: frozenset(v) for k, v in index.items()}

    @cached_property
    def by_object(self) -> dict[int, frozenset[Triple]]:
        index = defaultdict(set)
        for t in self.triples("train"):
            index[t.o].add(t)
        return {k: frozenset(v) for k, v in index.items()}

    @cached_property
    def _known(self) -> tuple[dict, dict]:
        objects, subjects = defaultdict(list), defaultdict(list)
        for s, r, o in self.existing:
            objects[(s, r)].append(o)
            subjects[(r, o)].append(s)
        return ({k: np.array(sorted(v)) for k, v in objects.items()},
                {k: np.array(sorted(v)) for k, v in subjects.items()})

    def known_objects(self, s: int, r: int) -> np.ndarray:
        """Objects ``o`` with ``(s, r, o)`` in train, valid or test."""
        return self._known[0].get((s, r), np.zeros(0, np.int64))

    def known_subjects(self, r: int, o: int) -> np.ndarray:
        return self._known[1].get((r, o), np.zeros(0, np.int64))

    def vocab_hash(self) -> str:
        h = hashlib.sha256()
        h.update("\n".join(self.entities).encode())
        h.update(b"\x00")
        h.update("\n".join(self.relations).encode())
        return h.hexdigest()

    def train_hash(self) -> str:
        rows = np.array(sorted(self.train.tolist()), dtype=np.int64).reshape(-1, 3)
        return hashlib.sha256(rows.tobytes()).hexdigest()

    def check_triple(self, t: Triple) -> None:
        s, r, o = t
        if not (0 <= s < self.n_entities and 0 <= o < self.n_entities):
            raise EditError(f"unknown entity id in {tuple(t)}")
        if not 0 <= r < self.n_relations:
            raise EditError(f"unknown relation id in {tuple(t)}")

    def label(self, t: Triple) -> tuple[str, str, str]:
        return self.entities[t[0]], self.relations[t[1]], self.entities[t[2]]

    def same_triples(self, other: "KnowledgeGraph") -> bool:
        """Equal vocabularies and equal triple sets in every split."""
        if self.entities != other.entities or self.relations != other.relations:
            return False
        return all(set(self.triples(n)) == set(other.triples(n)) for n in SPLITS)

    def summary(self) -> dict[str, int]:
        return {"entities": self.n_entities, "relations": self.n_relations,
                "train": len(self.train), "valid": len(self.valid), "test": len(self.test)}


@dataclass(frozen=True)
class Neighbourhood:
    target: Triple
    members: tuple[Triple, ...]

    def __len__(self) -> int:
        return len(self.members)


def neighbourhood(kg: KnowledgeGraph, target: Triple) -> Neighbourhood:
    """Train triples that share the subject or object of ``target``."""
    target = Triple(*target)
    kg.check_triple(target)
    members: set[Triple] = set()
    for e in {target.s, target.o}:
        members |= kg.by_subject.get(e, frozenset())
        members |= kg.by_object.get(e, frozenset())
    members.discard(target)
    return Neighbourhood(target, tuple(sorted(members)))


def apply_edits(kg: KnowledgeGraph, deletions: Iterable = (),
                additions: Iterable = ()) -> tuple[KnowledgeGraph, int]:
    """Return the perturbed graph and the number of additions actually applied.

    Additions already in train are skipped silently; deleting a triple that is
    not in train raises :class:`EditError`.
    """
    deletions = {Triple(*t) for t in deletions}
    additions = [Triple(*t) for t in additions]
    missing = sorted(deletions - kg.train_set)
    if missing:
        raise EditError(f"cannot delete triples not in train: {[tuple(t) for t in missing]}")
    for t in additions:
        kg.check_triple(t)

    kept = [t for t in kg.triples("train") if t not in deletions]
    kept_set = set(kept)
    added = []
    for t in additions:
        if t not in kept_set:
            kept_set.add(t)
            added.append(t)
    train = _as_triple_array(kept + added)
    new = KnowledgeGraph(kg.entities, kg.relations, train, kg.valid, kg.test,
                         info={**kg.info, "deleted": len(deletions), "added": len(added)})
    return new, len(added)


def _read_tsv(path: Path) -> list[tuple[str, str, str]]:
    if not path.exists():
        raise DatasetFormatError(f"missing file: {path}")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DatasetFormatError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            rows.append((parts[0], parts[1], parts[2]))
    return rows


def _read_vocab(path: Path) -> list[str]:
    labels = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2 or int(parts[0]) != lineno - 1:
                raise DatasetFormatError(f"{path}:{lineno}: expected '<id>\\t<label>' in id order")
            labels.append(parts[1])
    return labels


def load_dataset(directory: str | Path) -> KnowledgeGraph:
    """Load ``train.txt``/``valid.txt``/``test.txt`` (or extensionless) TSV files.

    Ids follow first appearance in the train file unless ``entities.dict`` and
    ``relations.dict`` are present (as written by :func:`write_graph`), in which
    case those fix the id order. Valid/test triples mentioning entities or
    relations that never occur in train are dropped.
    """
    directory = Path(directory)
    raw = {}
    for name in SPLITS:
        candidates = [directory / f"{name}.txt", directory / name, directory / f"{name}.tsv"]
        path = next((p for p in candidates if p.exists()), candidates[0])
        raw[name] = _read_tsv(path)

    ent_vocab = directory / ENTITY_VOCAB_FILE
    rel_vocab = directory / RELATION_VOCAB_FILE
    if ent_vocab.exists() and rel_vocab.exists():
        entities, relations = _read_vocab(ent_vocab), _read_vocab(rel_vocab)
        ent_id = {e: i for i, e in enumerate(entities)}
        rel_id = {r: i for i, r in enumerate(relations)}
        unknown = [row for row in raw["train"]
                   if row[0] not in ent_id or row[2] not in ent_id or row[1] not in rel_id]
        if unknown:
            raise DatasetFormatError(f"train triple {unknown[0]} not in vocabulary files")
    else:
        ent_id, rel_id = {}, {}
        for s, r, o in raw["train"]:
            ent_id.setdefault(s, len(ent_id))
            rel_id.setdefault(r, len(rel_id))
            ent_id.setdefault(o, len(ent_id))
        entities, relations = list(ent_id), list(rel_id)

    seen_ent = {e for s, _, o in raw["train"] for e in (s, o)}
    seen_rel = {r for _, r, _ in raw["train"]}
    arrays, dropped = {}, {}
    for name in SPLITS:
        rows = [(ent_id[s], rel_id[r], ent_id[o]) for s, r, o in raw[name]
                if s in seen_ent and o in seen_ent and r in seen_rel]
        dropped[name] = len(raw[name]) - len(rows)
        arrays[name] = _as_triple_array(rows)

    train, n_dup = _dedup(arrays["train"])
    if n_dup:
        logger.warning("collapsed %d duplicate train lines", n_dup)
    if dropped["valid"] or dropped["test"]:
        logger.info("dropped %d valid and %d test triples with unseen entities/relations",
                    dropped["valid"], dropped["test"])
    kg = KnowledgeGraph(tuple(entities), tuple(relations), train, arrays["valid"], arrays["test"],
                        info={"source": str(directory), "duplicate_train": n_dup,
                              "dropped_valid": dropped["valid"], "dropped_test": dropped["test"]})
    logger.info("loaded %s: %s", directory, kg.summary())
    return kg


def _write_triples(kg: KnowledgeGraph, arr: np.ndarray, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s, r, o in arr.tolist():
            fh.write(f"{kg.entities[s]}\t{kg.relations[r]}\t{kg.entities[o]}\n")


def write_graph(kg: KnowledgeGraph, directory: str | Path) -> None:
    """Write the three split files plus id-ordered vocabulary files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        _write_triples(kg, getattr(kg, name), directory / f"{name}.txt")
    for fname, labels in ((ENTITY_VOCAB_FILE, kg.entities), (RELATION_VOCAB_FILE, kg.relations)):
        with open(directory / fname, "w", encoding="utf-8", newline="\n") as fh:
            for i, label in enumerate(labels):
                fh.write(f"{i}\t{label}\n")


def write_edits(kg: KnowledgeGraph, deletions: Iterable, additions: Iterable,
                path: str | Path) -> None:
    """Edits TSV: one ``op<TAB>s<TAB>r<TAB>o`` line per edit, op in {del, add}."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for op, triples in (("del", deletions), ("add", additions)):
            for t in triples:
                s, r, o = kg.label(Triple(*t))
                fh.write(f"{op}\t{s}\t{r}\t{o}\n")


def read_edits(kg: KnowledgeGraph, path: str | Path) -> tuple[list[Triple], list[Triple]]:
    ent_id = {e: i for i, e in enumerate(kg.entities)}
    rel_id = {r: i for i, r in enumerate(kg.relations)}
    deletions, additions = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4 or parts[0] not in ("del", "add"):
                raise DatasetFormatError(f"{path}:{lineno}: expected 'del|add<TAB>s<TAB>r<TAB>o'")
            try:
                t = Triple(ent_id[parts[1]], rel_id[parts[2]], ent_id[parts[3]])
            except KeyError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: unknown label {exc}") from None
            (deletions if parts[0] == "del" else additions).append(t)
    return deletions, additions
