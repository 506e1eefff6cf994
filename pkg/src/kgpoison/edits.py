"""Attack result records shared by all attack families."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .graph import KnowledgeGraph, Triple

PROVENANCE_FIELDS = ("target", "method", "chosen_edit", "score", "elapsed_ms")


@dataclass
class AttackResult:
    """Edits proposed for one target, with the score that picked them and timing."""
    target: Triple
    method: str
    deletions: list[Triple] = field(default_factory=list)
    additions: list[Triple] = field(default_factory=list)
    score: float = float("nan")
    elapsed_ms: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def edits(self) -> list[tuple[str, Triple]]:
        return [("del", t) for t in self.deletions] + [("add", t) for t in self.additions]


def merge_edits(results: Iterable[AttackResult]) -> tuple[list[Triple], list[Triple]]:
    """Union of all deletions and additions, first-seen order, duplicates dropped."""
    dels: dict[Triple, None] = {}
    adds: dict[Triple, None] = {}
    for res in results:
        dels.update(dict.fromkeys(res.deletions))
        adds.update(dict.fromkeys(res.additions))
    return list(dels), [t for t in adds if t not in dels]


def _fmt_triple(kg: KnowledgeGraph | None, t: Triple) -> str:
    if t is None:
        return ""
    if kg is None:
        return f"{t[0]} {t[1]} {t[2]}"
    return " ".join(kg.label(Triple(*t)))


def write_provenance(results: Iterable[AttackResult], path: str | Path,
                     kg: KnowledgeGraph | None = None, timing: bool = True) -> None:
    """Per-target CSV. ``timing=False`` blanks the elapsed column so output is reproducible."""
    results = list(results)
    extra_keys: list[str] = []
    for res in results:
        for k in res.extra:
            if k not in extra_keys:
                extra_keys.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(PROVENANCE_FIELDS) + extra_keys)
        for res in results:
            chosen = ";".join(f"{op}:{_fmt_triple(kg, t)}" for op, t in res.edits)
            elapsed = f"{res.elapsed_ms:.3f}" if timing else ""
            row = [_fmt_triple(kg, res.target), res.method, chosen, repr(float(res.score)), elapsed]
            for k in extra_keys:
                v = res.extra.get(k, "")
                if isinstance(v, tuple) and len(v) == 3:
                    v = _fmt_triple(kg, Triple(*v))
                elif isinstance(v, float):
                    v = repr(v)
                row.append(v)
            w.writerow(row)
