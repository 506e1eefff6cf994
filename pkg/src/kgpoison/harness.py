"""Experiment configuration and the train -> attack -> poison -> retrain pipeline."""
from __future__ import annotations

import dataclasses
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from . import attribution, baselines, inference
from .edits import AttackResult, merge_edits, write_provenance
from .evaluation import EvalReport, delta_mrr, evaluate, select_targets, write_metrics, write_ranks
from .graph import KnowledgeGraph, Triple, apply_edits, load_dataset, neighbourhood, write_edits, write_graph
from .models import EmbeddingModel, save_checkpoint
from .synthetic import SyntheticKgConfig, generate_synthetic_kg
from .training import ModelConfig, TrainConfig, train, write_loss_trace

logger = logging.getLogger(__name__)

ENV_OUT = "KGPOISON_OUT"
ENV_WORKERS = "KGPOISON_WORKERS"
FAMILIES = ("none", "attribution", "inference", "random", "direct")
TARGET_PRESETS = {"attribution": {"rank_threshold": 1, "cap": 100},
                  "inference": {"rank_threshold": 10, "cap": None}}


class ConfigError(ValueError):
    pass


class IncompatibleCheckpointError(RuntimeError):
    pass


@dataclass
class DatasetSection:
    path: str | None = None
    synthetic: dict | None = None


@dataclass
class TargetSection:
    preset: str | None = "attribution"
    rank_threshold: float | None = None
    cap: int | None = -1          # -1: take the preset's value
    side: str = "both"
    split: str = "test"

    def resolved(self) -> tuple[float, int | None]:
        preset = TARGET_PRESETS.get(self.preset or "", {"rank_threshold": 1, "cap": None})
        thr = self.rank_threshold if self.rank_threshold is not None else preset["rank_threshold"]
        cap = preset["cap"] if self.cap == -1 else self.cap
        return thr, cap


@dataclass
class AttackSection:
    family: str = "none"
    method: str = "cos"           # attribution method, or direct del/add
    op: str = "del"
    budget: int = 1
    pattern: str = "symmetry"
    heuristic: str = "soft_truth"
    n_clusters: int | None = None
    mode: str = "neighbourhood"   # random baseline scope
    count: int = 1
    epsilon: float = 1.0
    downsample_pct: float = 5.0
    normalize: bool = True
    loss: dict = field(default_factory=dict)
    lissa: dict = field(default_factory=dict)


@dataclass
class OracleSection:
    kind: str = "loo"             # loo | addition
    max_targets: int = 5


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    targets: TargetSection = field(default_factory=TargetSection)
    attack: AttackSection = field(default_factory=AttackSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    seed: int = 0
    workers: int = 1
    out: str = "runs/default"
    record_timing: bool = True

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"] = self.train.to_dict()
        return d


_SECTIONS = {"dataset": DatasetSection, "model": ModelConfig, "train": TrainConfig,
             "targets": TargetSection, "attack": AttackSection, "oracle": OracleSection}


def config_from_dict(raw: dict | None) -> ExperimentConfig:
    """Build and validate a config; errors name the offending field."""
    raw = dict(raw or {})
    errors: list[str] = []
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in raw:
        if key not in top:
            errors.append(f"{key}: unknown key")
    kwargs: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        section = raw.get(name) or {}
        if not isinstance(section, dict):
            errors.append(f"{name}: expected a mapping")
            continue
        known = {f.name for f in dataclasses.fields(cls)}
        for key in section:
            if key not in known:
                errors.append(f"{name}.{key}: unknown key")
        try:
            kwargs[name] = cls(**{k: v for k, v in section.items() if k in known})
        except (TypeError, ValueError) as exc:
            errors.append(f"{name}: {exc}")
    for key in ("seed", "workers", "out", "record_timing"):
        if key in raw:
            kwargs[key] = raw[key]
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
    cfg = ExperimentConfig(**kwargs)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    errors = []
    ds = cfg.dataset
    if (ds.path is None) == (ds.synthetic is None):
        errors.append("dataset: set exactly one of 'path' or 'synthetic'")
    if cfg.model.kind not in ("distmult", "complex", "transe"):
        errors.append(f"model.kind: {cfg.model.kind!r} is not distmult/complex/transe")
    if cfg.model.dim < 1:
        errors.append("model.dim: must be >= 1")
    a = cfg.attack
    if a.family not in FAMILIES:
        errors.append(f"attack.family: {a.family!r} not in {FAMILIES}")
    if a.op not in ("del", "add"):
        errors.append("attack.op: must be 'del' or 'add'")
    if a.family == "attribution" and a.method not in attribution.METHODS:
        errors.append(f"attack.method: {a.method!r} not in {attribution.METHODS}")
    if a.family == "inference":
        if a.pattern not in inference.PATTERNS:
            errors.append(f"attack.pattern: {a.pattern!r} not in {inference.PATTERNS}")
        if a.heuristic not in inference.HEURISTICS:
            errors.append(f"attack.heuristic: {a.heuristic!r} not in {inference.HEURISTICS}")
    if a.family == "random" and a.mode not in ("neighbourhood", "global"):
        errors.append("attack.mode: must be 'neighbourhood' or 'global'")
    if a.budget < 1 or a.count < 1:
        errors.append("attack.budget/attack.count: must be >= 1")
    if cfg.targets.side not in ("both", "subject", "object"):
        errors.append("targets.side: must be both/subject/object")
    if cfg.targets.split not in ("valid", "test"):
        errors.append("targets.split: must be valid or test")
    if cfg.oracle.kind not in ("loo", "addition"):
        errors.append("oracle.kind: must be 'loo' or 'addition'")
    if int(cfg.workers) < 1:
        errors.append("workers: must be >= 1")
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))


def load_config(path: str | Path | None, overrides: dict | None = None) -> ExperimentConfig:
    raw = {}
    if path is not None:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        # relative dataset paths resolve against the config file
        ds = raw.get("dataset") or {}
        if isinstance(ds, dict) and ds.get("path") and not os.path.isabs(ds["path"]):
            ds["path"] = str((Path(path).parent / ds["path"]).resolve())
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value
    if os.environ.get(ENV_OUT) and not (overrides or {}).get("out"):
        raw["out"] = os.environ[ENV_OUT]
    if os.environ.get(ENV_WORKERS) and not (overrides or {}).get("workers"):
        raw["workers"] = int(os.environ[ENV_WORKERS])
    return config_from_dict(raw)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)


# --- stages -----------------------------------------------------------------------

class Timer:
    """Monotonic per-stage wall clock, written as ``stage seconds`` lines."""

    def __init__(self):
        self.stages: dict[str, float] = {}

    def run(self, name, fn, *args, **kw):
        t0 = time.perf_counter()
        out = fn(*args, **kw)
        elapsed = time.perf_counter() - t0
        self.stages[name] = self.stages.get(name, 0.0) + elapsed
        logger.info("%s done in %.2fs", name, elapsed)
        return out

    def write(self, path):
        with open(path, "w") as fh:
            for k, v in self.stages.items():
                fh.write(f"{k}\t{v:.3f}\n")


def train_config_for(cfg: ExperimentConfig) -> TrainConfig:
    return dataclasses.replace(cfg.train, seed=int(cfg.seed))


def build_dataset(cfg: ExperimentConfig) -> KnowledgeGraph:
    if cfg.dataset.path is not None:
        return load_dataset(cfg.dataset.path)
    syn = SyntheticKgConfig(**cfg.dataset.synthetic)
    return generate_synthetic_kg(syn)


def train_stage(kg: KnowledgeGraph, cfg: ExperimentConfig, out: Path) -> EmbeddingModel:
    out.mkdir(parents=True, exist_ok=True)
    result = train(kg, cfg.model, train_config_for(cfg))
    save_checkpoint(result.model, out / "model.npz", vocab_hash=kg.vocab_hash(),
                    train_hash=kg.train_hash())
    write_loss_trace(result.trace, out / "loss.csv")
    return result.model


def check_compatible(header: dict, kg: KnowledgeGraph, require_train: bool = False) -> None:
    if header.get("vocab_hash") != kg.vocab_hash():
        raise IncompatibleCheckpointError("checkpoint vocabulary does not match the dataset")
    if require_train and header.get("train_hash") != kg.train_hash():
        raise IncompatibleCheckpointError("checkpoint was trained on a different train set")


def eval_stage(model: EmbeddingModel, kg: KnowledgeGraph, triples, out: Path, prefix: str = "") -> EvalReport:
    report = evaluate(model, kg, triples)
    write_ranks(report, out / f"{prefix}ranks.tsv")
    write_metrics(report.metrics, out / f"{prefix}metrics.txt")
    return report


def pick_targets(model: EmbeddingModel, kg: KnowledgeGraph, cfg: ExperimentConfig) -> list[Triple]:
    split = getattr(kg, cfg.targets.split)
    report = evaluate(model, kg, split)
    thr, cap = cfg.targets.resolved()
    return select_targets(report, thr, cap, seed=int(cfg.seed), side=cfg.targets.side)


def run_attack(model: EmbeddingModel, kg: KnowledgeGraph, targets: list[Triple],
               cfg: ExperimentConfig) -> list[AttackResult]:
    a = cfg.attack
    seed = int(cfg.seed)
    if a.family == "none":
        return [AttackResult(t, "none") for t in targets]
    if a.family == "attribution":
        loss_cfg = attribution.LossConfig(**a.loss) if a.loss else attribution.LossConfig.from_train(cfg.train)
        lissa_cfg = attribution.LissaConfig(**{"sample_seed": seed, **a.lissa})
        return attribution.attribution_attack(a.method, model, kg, targets, a.op, a.budget,
                                              loss_cfg, lissa_cfg)
    results = []
    if a.family == "inference":
        algebra = inference.RelationAlgebra(model)
        clustering = None
        if a.pattern == "composition" and a.heuristic == "soft_truth":
            k = a.n_clusters or inference.elbow_k(model, seed=seed)
            clustering = inference.kmeans_entities(model, k, seed)
        for t in targets:
            results.append(inference.inference_attack(model, kg, t, a.pattern, a.heuristic,
                                                      algebra, clustering))
        return results
    for i, t in enumerate(targets):
        t0 = time.perf_counter()
        if a.family == "random":
            edits = baselines.random_edit(kg, t, a.mode, a.op, a.count, seed=seed * 100003 + i)
            res = AttackResult(t, f"random_{a.mode}", **({"deletions": edits} if a.op == "del"
                                                          else {"additions": edits}))
        elif a.op == "del":
            edit, score = baselines.direct_del(model, kg, t, a.epsilon, a.normalize)
            res = AttackResult(t, "direct", deletions=[edit], score=score)
        else:
            edit, score = baselines.direct_add(model, kg, t, a.epsilon, a.downsample_pct,
                                               seed * 100003 + i, a.normalize)
            res = AttackResult(t, "direct", additions=[edit], score=score)
        res.elapsed_ms = (time.perf_counter() - t0) * 1000.0
        results.append(res)
    return results


def write_targets(kg: KnowledgeGraph, targets: list[Triple], path: Path) -> None:
    with open(path, "w") as fh:
        for t in targets:
            fh.write("\t".join(kg.label(t)) + "\n")


@dataclass
class RunReport:
    original: EvalReport
    poisoned: EvalReport
    delta: Any
    timing: dict[str, float]
    n_deletions: int
    n_additions: int
    n_applied_additions: int

    def summary(self) -> dict[str, float]:
        return {"original_mrr": self.original.mrr, "poisoned_mrr": self.poisoned.mrr,
                "delta_mrr_reduction": self.delta.reduction, "delta_mrr_change": self.delta.change,
                "n_deletions": self.n_deletions, "n_additions": self.n_additions,
                "n_applied_additions": self.n_applied_additions}


def run_pipeline(cfg: ExperimentConfig, out: str | Path | None = None) -> RunReport:
    """Train, select targets, attack, apply edits, retrain and compare target metrics."""
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    timer = Timer()
    kg = timer.run("load", build_dataset, cfg)
    if cfg.dataset.synthetic is not None:
        write_graph(kg, out / "dataset")
    model = timer.run("train_original", train_stage, kg, cfg, out / "original")
    targets = timer.run("select_targets", pick_targets, model, kg, cfg)
    write_targets(kg, targets, out / "targets.tsv")
    orig = timer.run("eval_original", eval_stage, model, kg, targets, out / "original")
    results = timer.run("attack", run_attack, model, kg, targets, cfg)
    deletions, additions = merge_edits(results)
    write_edits(kg, deletions, additions, out / "edits.tsv")
    write_provenance(results, out / "provenance.csv", kg, timing=cfg.record_timing)
    poisoned_kg, n_applied = apply_edits(kg, deletions, additions)
    write_graph(poisoned_kg, out / "poisoned_dataset")
    pmodel = timer.run("train_poisoned", train_stage, poisoned_kg, cfg, out / "poisoned")
    pois = timer.run("eval_poisoned", eval_stage, pmodel, poisoned_kg, targets, out / "poisoned")
    delta = delta_mrr(orig, pois)
    report = RunReport(orig, pois, delta, dict(timer.stages), len(deletions), len(additions), n_applied)
    write_metrics(report.summary(), out / "report.txt")
    timer.write(out / "timing.log")
    return report


def run_oracle(cfg: ExperimentConfig, out: str | Path | None = None) -> list[Path]:
    """LOO retraining over each target's neighbourhood, or the brute-force addition
    oracle over the attack's proposals; one CSV per target."""
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    kg = build_dataset(cfg)
    tc = train_config_for(cfg)
    model = train_stage(kg, cfg, out / "original")
    targets = pick_targets(model, kg, cfg)[: cfg.oracle.max_targets]
    write_targets(kg, targets, out / "targets.tsv")
    paths = []
    for i, t in enumerate(targets):
        if cfg.oracle.kind == "loo":
            rows = [baselines.loo_oracle(kg, cfg.model, tc, t, c, original=model)
                    for c in sorted(neighbourhood(kg, t).members)]
        else:
            pool = run_attack(model, kg, [t], cfg)[0].additions
            rows = baselines.brute_force_addition_oracle(kg, cfg.model, tc, t, pool, original=model,
                                               workers=int(cfg.workers))
        path = out / f"oracle_{i:03d}.csv"
        baselines.write_oracle_csv(rows, path, kg, timing=cfg.record_timing)
        paths.append(path)
    return paths
