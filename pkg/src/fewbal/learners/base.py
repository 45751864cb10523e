"""Shared learner interface and adaptation settings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import ClassVar, Literal

import numpy as np

from fewbal.errors import InvalidSpecError, UnsupportedStrategyError, UsageError
from fewbal.nn import Adam, Encoder, EncoderConfig, LinearHead, LossConfig, ParamTensor
from fewbal.tasks import Task


@dataclass(frozen=True)
class AdaptationConfig:
    """Inner-loop and meta-training knobs.

    inner_lr/inner_steps drive gradient-based task adaptation; zero values
    are allowed so the unadapted model is reachable as a degenerate case.
    finetune_steps/finetune_lr drive the head-only baselines.
    """

    inner_lr: float = 0.1
    inner_steps: int = 10
    meta_batch: int = 4
    train_way: int = 5
    train_query_per_class: int | None = None
    adapt_scope: Literal["full", "head"] = "full"
    finetune_steps: int = 100
    finetune_lr: float = 0.01

    def __post_init__(self) -> None:
        if self.inner_lr < 0 or self.finetune_lr <= 0:
            raise InvalidSpecError("learning rates must be non-negative (inner) / positive")
        if self.inner_steps < 0 or self.finetune_steps < 1:
            raise InvalidSpecError("step counts out of range")
        if self.meta_batch < 1:
            raise InvalidSpecError("meta_batch must be at least 1")
        if self.train_way < 2:
            raise InvalidSpecError("train_way must be at least 2")
        if self.adapt_scope not in ("full", "head"):
            raise InvalidSpecError(f"unknown adapt scope {self.adapt_scope!r}")


class Learner:
    """Base class: a learner owns an encoder plus kind-specific pieces.

    Subclasses either meta-train on episodes (meta_train_step) or rely on
    supervised pretraining (needs_pretrain); both paths converge on
    adapt_and_predict for evaluation.
    """

    kind: ClassVar[str] = ""
    needs_pretrain: ClassVar[bool] = False
    supports_episodic: ClassVar[bool] = True

    def __init__(self, encoder: Encoder, cfg: AdaptationConfig):
        self.encoder = encoder
        self.cfg = cfg
        self._adam: Adam | None = None

    @classmethod
    def create(
        cls, enc_cfg: EncoderConfig, cfg: AdaptationConfig, rng: np.random.Generator
    ) -> "Learner":
        return cls(Encoder(enc_cfg, rng), cfg)

    # -- parameter plumbing -------------------------------------------------

    def params(self) -> list[ParamTensor]:
        return self.encoder.params()

    def extra_arrays(self) -> dict[str, np.ndarray]:
        """Non-parameter state that belongs in checkpoints."""
        return {}

    def set_extra_arrays(self, extras: dict[str, np.ndarray]) -> None:
        if extras:
            raise UsageError(f"{self.kind} has no extra checkpoint arrays")

    def snapshot(self) -> list[np.ndarray]:
        return [p.values.copy() for p in self.params()]

    def restore(self, snapshot: list[np.ndarray]) -> None:
        for p, values in zip(self.params(), snapshot, strict=True):
            p.values[...] = values

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def optimizer(self) -> Adam:
        if self._adam is None:
            self._adam = Adam(self.params())
        return self._adam

    # -- training / inference ----------------------------------------------

    def make_pretrain_head(self, n_classes: int, rng: np.random.Generator) -> LinearHead:
        """Classification head for supervised pretraining over the corpus."""
        if not self.needs_pretrain:
            raise UsageError(f"{self.kind} does not pretrain")
        return LinearHead.create(self.encoder.cfg.embed_dim, n_classes, rng)

    def meta_train_step(self, tasks: list[Task], lr: float) -> float:
        raise UnsupportedStrategyError(f"{self.kind} does not meta-train on episodes")

    def adapt_and_predict(
        self,
        task: Task,
        loss_cfg: LossConfig | None = None,
        rng: np.random.Generator | None = None,
    ) -> np.ndarray:
        raise NotImplementedError

    def clone(self) -> "Learner":
        raise NotImplementedError


def require_plain_loss(kind: str, loss_cfg: LossConfig | None) -> None:
    """Metric learners have no loss to reweight at adaptation time."""
    if loss_cfg is not None and loss_cfg.kind != "ce":
        raise UnsupportedStrategyError(
            f"{kind} has no adaptation loss, cannot apply {loss_cfg.kind}"
        )


def class_means(embeddings: np.ndarray, labels: np.ndarray, way: int) -> np.ndarray:
    """Per-slot mean embedding (prototype) matrix, shape [way, dim]."""
    mu = np.zeros((way, embeddings.shape[1]))
    np.add.at(mu, labels, embeddings)
    counts = np.bincount(labels, minlength=way).astype(np.float64)
    if np.any(counts == 0):
        raise InvalidSpecError("every class slot needs at least one support row")
    return mu / counts[:, None]


def squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances between rows of a and b."""
    return (
        (a**2).sum(axis=1)[:, None]
        + (b**2).sum(axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
