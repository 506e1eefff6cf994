import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from kgpoison.graph import KnowledgeGraph  # noqa: E402
from kgpoison.synthetic import RelationSpec, SyntheticKgConfig, generate_synthetic_kg  # noqa: E402


def random_graph(n_entities=30, n_relations=4, n_train=160, n_valid=20, n_test=20, seed=0):
    """Random graph with every valid/test entity present in train."""
    rng = np.random.default_rng(seed)
    triples = set()
    while len(triples) < n_train + n_valid + n_test:
        s, o = rng.integers(n_entities, size=2)
        triples.add((int(s), int(rng.integers(n_relations)), int(o)))
    triples = sorted(triples)
    rng.shuffle(triples)
    train = triples[:n_train]
    # make sure all entities occur in train
    for e in range(n_entities):
        train.append((e, 0, (e + 1) % n_entities))
    rest = [t for t in triples[n_train:] if t not in set(train)]
    return KnowledgeGraph(tuple(f"e{i}" for i in range(n_entities)),
                          tuple(f"r{i}" for i in range(n_relations)),
                          np.array(train), np.array(rest[:n_valid]).reshape(-1, 3),
                          np.array(rest[n_valid:n_valid + n_test]).reshape(-1, 3))


@pytest.fixture
def graph30():
    return random_graph()


@pytest.fixture
def tiny_chain():
    # train = {(a,p,b), (b,p,c), (c,p,d)}
    return KnowledgeGraph(("a", "b", "c", "d"), ("p",), np.array([[0, 0, 1], [1, 0, 2], [2, 0, 3]]))


def symmetric_kg(seed=0, n_entities=40):
    return generate_synthetic_kg(SyntheticKgConfig(
        n_entities, [RelationSpec("symmetric", 2.5), RelationSpec("random", 1.0)], seed=seed))


def write_tsv(path: Path, rows):
    path.write_text("".join("\t".join(r) + "\n" for r in rows))


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line; the terminal summary lists them all."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(criterion: str, ok: bool, detail: str) -> bool:
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
