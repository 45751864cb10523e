"""Experiment configuration: a versioned JSON document.

The config names the dataset, the grid (learners x strategies x seeds),
the schedule, and the evaluation specs. Everything downstream derives its
randomness from the seeds recorded here.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from fewbal.data import (
    DatasetImbalanceSpec,
    MetaDataset,
    SyntheticSpec,
    apply_dataset_imbalance,
    generate_synthetic,
    load_features,
    reduce_dataset,
)
from fewbal.errors import InvalidSpecError
from fewbal.learners import LEARNER_KINDS, AdaptationConfig, default_adaptation
from fewbal.nn import EncoderConfig
from fewbal.protocol import TrainSchedule
from fewbal.rebalance import PRESETS
from fewbal.seeding import mix64
from fewbal.tasks import ImbalanceSpec

SCHEMA_VERSION = 1

_NAME_RE = re.compile(r"^[A-Za-z0-9._-]+$")


def spec_from_dict(d: dict) -> ImbalanceSpec:
    known = {
        "kind", "k_min", "k_max", "way", "n_min",
        "query_kind", "m_min", "m_max", "m_n_min",
    }
    extra = set(d) - known - {"name"}
    if extra:
        raise InvalidSpecError(f"unknown task spec fields: {sorted(extra)}")
    args = {k: v for k, v in d.items() if k in known}
    return ImbalanceSpec(**args)


@dataclass
class EvalSettings:
    n_tasks: int
    seed: int
    specs: list[tuple[str, ImbalanceSpec]]

    def __post_init__(self) -> None:
        if self.n_tasks < 1:
            raise InvalidSpecError("eval n_tasks must be positive")
        names = [name for name, _ in self.specs]
        if len(set(names)) != len(names):
            raise InvalidSpecError(f"duplicate eval spec names: {names}")
        for name in names:
            if not _NAME_RE.match(name):
                raise InvalidSpecError(f"eval spec name {name!r} is not file-safe")

    def spec_named(self, name: str) -> ImbalanceSpec:
        for n, spec in self.specs:
            if n == name:
                return spec
        raise InvalidSpecError(f"no eval spec named {name!r}")

    def balanced_name(self) -> str:
        for name, spec in self.specs:
            if spec.kind == "balanced":
                return name
        raise InvalidSpecError("eval specs include no balanced reference")


@dataclass
class ExperimentConfig:
    output_dir: str
    synthetic: SyntheticSpec | None
    csv_path: str | None
    imbalance: DatasetImbalanceSpec | None
    reduce: tuple[int, int] | None
    encoder_hidden: tuple[int, ...]
    embed_dim: int
    learners: list[tuple[str, AdaptationConfig]]
    strategies: list[str]
    schedule: TrainSchedule
    sigma_aug: float
    seeds: list[int]
    eval: EvalSettings
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def dataset_seed(self) -> int:
        return self.synthetic.seed if self.synthetic is not None else 0


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise InvalidSpecError("config root must be an object")
    version = doc.get("version")
    if version != SCHEMA_VERSION:
        raise InvalidSpecError(
            f"config schema version {version!r} unsupported, expected {SCHEMA_VERSION}"
        )
    ds = doc.get("dataset", {})
    synthetic = None
    if ds.get("synthetic") is not None:
        syn = dict(ds["synthetic"])
        if "classes_per_split" in syn:
            syn["classes_per_split"] = tuple(syn["classes_per_split"])
        synthetic = SyntheticSpec(**syn)
    csv_path = ds.get("csv_path")
    if (synthetic is None) == (csv_path is None):
        raise InvalidSpecError("dataset needs exactly one of synthetic or csv_path")
    imbalance = None
    if ds.get("imbalance") is not None:
        imbalance = DatasetImbalanceSpec(**ds["imbalance"])
    reduce_cfg = None
    if ds.get("reduce") is not None:
        red = ds["reduce"]
        reduce_cfg = (int(red["total_budget"]), int(red["n_classes"]))

    enc = doc.get("encoder", {})
    encoder_hidden = tuple(enc.get("hidden", (64,)))
    embed_dim = int(enc.get("embed_dim", 32))

    learners: list[tuple[str, AdaptationConfig]] = []
    for entry in doc.get("learners", []):
        kind = entry.get("kind")
        if kind not in LEARNER_KINDS:
            raise InvalidSpecError(
                f"unknown learner kind {kind!r}; known: {', '.join(LEARNER_KINDS)}"
            )
        base = default_adaptation(kind)
        overrides = entry.get("adaptation", {})
        unknown = set(overrides) - set(base.__dataclass_fields__)
        if unknown:
            raise InvalidSpecError(f"unknown adaptation fields for {kind}: {sorted(unknown)}")
        cfg = AdaptationConfig(**{**base.__dict__, **overrides})
        learners.append((kind, cfg))
    if not learners:
        raise InvalidSpecError("config lists no learners")

    strategies = list(doc.get("strategies", []))
    if not strategies:
        raise InvalidSpecError("config lists no strategies")
    for name in strategies:
        if name not in PRESETS:
            raise InvalidSpecError(
                f"unknown strategy {name!r}; known: {', '.join(sorted(PRESETS))}"
            )

    schedule = TrainSchedule(**doc.get("schedule", {}))
    sigma_aug = float(doc.get("sigma_aug", 0.1))
    seeds = [int(s) for s in doc.get("seeds", [0])]
    if not seeds:
        raise InvalidSpecError("config lists no seeds")

    eval_doc = doc.get("eval")
    if not eval_doc:
        raise InvalidSpecError("config needs an eval section")
    specs: list[tuple[str, ImbalanceSpec]] = []
    for spec_doc in eval_doc.get("specs", []):
        name = spec_doc.get("name")
        if not name:
            raise InvalidSpecError("every eval spec needs a name")
        specs.append((name, spec_from_dict(spec_doc)))
    if not specs:
        raise InvalidSpecError("eval section lists no specs")
    eval_settings = EvalSettings(
        n_tasks=int(eval_doc.get("n_tasks", 600)),
        seed=int(eval_doc.get("seed", 0)),
        specs=specs,
    )

    return ExperimentConfig(
        output_dir=str(doc.get("output_dir", "runs")),
        synthetic=synthetic,
        csv_path=csv_path,
        imbalance=imbalance,
        reduce=reduce_cfg,
        encoder_hidden=encoder_hidden,
        embed_dim=embed_dim,
        learners=learners,
        strategies=strategies,
        schedule=schedule,
        sigma_aug=sigma_aug,
        seeds=seeds,
        eval=eval_settings,
        raw=doc,
    )


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InvalidSpecError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(doc)


def build_dataset(cfg: ExperimentConfig, root_seed: int) -> MetaDataset:
    """Materialize the dataset for one grid seed.

    The base data is fixed by its own seed (or the CSV contents); class
    reduction and dataset-level imbalance redraw their random choices per
    root seed.
    """
    if cfg.synthetic is not None:
        ds = generate_synthetic(cfg.synthetic)
    else:
        ds = load_features(cfg.csv_path)
    if cfg.reduce is not None:
        total_budget, n_classes = cfg.reduce
        rng = np.random.default_rng(mix64(root_seed, "reduce"))
        ds = reduce_dataset(ds, total_budget, n_classes, rng)
    if cfg.imbalance is not None:
        rng = np.random.default_rng(mix64(root_seed, "dataset-imbalance"))
        ds = apply_dataset_imbalance(ds, cfg.imbalance, rng)
    return ds


def encoder_config(cfg: ExperimentConfig, feature_dim: int) -> EncoderConfig:
    return EncoderConfig(
        input_dim=feature_dim, hidden=cfg.encoder_hidden, embed_dim=cfg.embed_dim
    )


def adaptation_for(cfg: ExperimentConfig, kind: str) -> AdaptationConfig:
    for k, adapt in cfg.learners:
        if k == kind:
            return adapt
    raise InvalidSpecError(f"learner {kind!r} is not in the config grid")


def cell_seed(root_seed: int, kind: str, strategy: str) -> int:
    """Seed of one grid cell, stable under grid reordering."""
    return mix64(root_seed, kind, strategy)
