"""Few-shot learners: registry and construction."""

from __future__ import annotations

import dataclasses

import numpy as np

from fewbal.errors import InvalidSpecError
from fewbal.learners.base import AdaptationConfig, Learner
from fewbal.learners.maml import FomamlLearner, ProtoMamlLearner
from fewbal.learners.metric import (
    MatchingLearner,
    NN1Learner,
    ProtoNetLearner,
    RelationLearner,
    SimpleShotLearner,
)
from fewbal.learners.transfer import BaselinePPLearner, FinetuneLearner
from fewbal.nn import EncoderConfig

LEARNER_CLASSES: dict[str, type[Learner]] = {
    cls.kind: cls
    for cls in (
        NN1Learner,
        FinetuneLearner,
        BaselinePPLearner,
        ProtoNetLearner,
        MatchingLearner,
        SimpleShotLearner,
        RelationLearner,
        FomamlLearner,
        ProtoMamlLearner,
    )
}

LEARNER_KINDS = tuple(LEARNER_CLASSES)

# Gradient-based meta-learners average four tasks per meta-update by
# default; everything else updates on single episodes, and the
# prototype-initialized variant meta-updates per task by design.
_META_BATCH_DEFAULTS = {"fomaml": 4, "protomaml": 1}


def default_adaptation(kind: str) -> AdaptationConfig:
    if kind not in LEARNER_CLASSES:
        raise InvalidSpecError(f"unknown learner kind {kind!r}")
    return AdaptationConfig(meta_batch=_META_BATCH_DEFAULTS.get(kind, 1))


def build_learner(
    kind: str,
    enc_cfg: EncoderConfig,
    rng: np.random.Generator,
    adapt_cfg: AdaptationConfig | None = None,
) -> Learner:
    """Construct a freshly initialized learner of the given kind."""
    if kind not in LEARNER_CLASSES:
        raise InvalidSpecError(
            f"unknown learner kind {kind!r}; known: {', '.join(LEARNER_KINDS)}"
        )
    if adapt_cfg is None:
        adapt_cfg = default_adaptation(kind)
    return LEARNER_CLASSES[kind].create(enc_cfg, adapt_cfg, rng)


def adaptation_to_dict(cfg: AdaptationConfig) -> dict:
    return dataclasses.asdict(cfg)


def adaptation_from_dict(d: dict) -> AdaptationConfig:
    return AdaptationConfig(**d)


__all__ = [
    "AdaptationConfig",
    "Learner",
    "LEARNER_KINDS",
    "LEARNER_CLASSES",
    "build_learner",
    "default_adaptation",
    "adaptation_to_dict",
    "adaptation_from_dict",
    "BaselinePPLearner",
    "FinetuneLearner",
    "FomamlLearner",
    "MatchingLearner",
    "NN1Learner",
    "ProtoMamlLearner",
    "ProtoNetLearner",
    "RelationLearner",
    "SimpleShotLearner",
]
