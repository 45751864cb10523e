"""First-order gradient-based meta-learners."""

from __future__ import annotations

from typing import ClassVar

import numpy as np

from fewbal.errors import InvalidSpecError
from fewbal.learners.base import AdaptationConfig, Learner, class_means
from fewbal.nn import (
    Encoder,
    EncoderConfig,
    LinearHead,
    LossConfig,
    ParamTensor,
    batch_loss,
    sgd_step,
)
from fewbal.tasks import Task


def inner_adapt(
    encoder: Encoder,
    head: LinearHead,
    task: Task,
    steps: int,
    lr: float,
    loss_cfg: LossConfig | None,
    scope: str = "full",
) -> list[float]:
    """Gradient-descend encoder and head (or head only) on the support set.

    Mutates the given encoder/head in place; callers adapt clones. Returns
    the support-loss value observed before each step.
    """
    xs, ys = task.support_matrix()
    adapted = head.params() if scope == "head" else encoder.params() + head.params()
    trajectory: list[float] = []
    for _ in range(steps):
        e = encoder.forward(xs)
        logits = head.forward(e)
        loss, dlogits = batch_loss(logits, ys, loss_cfg, task.shot_counts)
        trajectory.append(loss)
        for p in encoder.params() + head.params():
            p.zero_grad()
        d_embed = head.backward(dlogits)
        if scope == "full":
            encoder.backward(d_embed)
        sgd_step(adapted, lr)
    return trajectory


def _query_backward(encoder: Encoder, head: LinearHead, task: Task) -> float:
    """Plain-CE query loss and gradients on the adapted model."""
    xq, yq = task.query_matrix()
    logits = head.forward(encoder.forward(xq))
    loss, dlogits = batch_loss(logits, yq)
    for p in encoder.params() + head.params():
        p.zero_grad()
    d_embed = head.backward(dlogits)
    encoder.backward(d_embed)
    return loss


class FomamlLearner(Learner):
    """First-order MAML over the whole network with a fixed-way head."""

    kind: ClassVar[str] = "fomaml"

    def __init__(self, encoder: Encoder, cfg: AdaptationConfig, head: LinearHead):
        super().__init__(encoder, cfg)
        self.head = head

    @classmethod
    def create(cls, enc_cfg: EncoderConfig, cfg: AdaptationConfig,
               rng: np.random.Generator) -> "FomamlLearner":
        encoder = Encoder(enc_cfg, rng)
        head = LinearHead.create(enc_cfg.embed_dim, cfg.train_way, rng)
        return cls(encoder, cfg, head)

    def params(self) -> list[ParamTensor]:
        return self.encoder.params() + self.head.params()

    def _check_way(self, task: Task) -> None:
        if task.way != self.cfg.train_way:
            raise InvalidSpecError(
                f"{self.kind} head is {self.cfg.train_way}-way, task is {task.way}-way"
            )

    def adapt(
        self, task: Task, loss_cfg: LossConfig | None = None
    ) -> tuple[Encoder, LinearHead, list[float]]:
        """Clone the meta-model and run the inner loop on the support set."""
        self._check_way(task)
        encoder = self.encoder.clone()
        head = self.head.clone()
        trajectory = inner_adapt(
            encoder, head, task, self.cfg.inner_steps, self.cfg.inner_lr,
            loss_cfg, self.cfg.adapt_scope,
        )
        return encoder, head, trajectory

    def adapt_and_predict(self, task, loss_cfg=None, rng=None):
        encoder, head, _ = self.adapt(task, loss_cfg)
        xq, _ = task.query_matrix()
        return head.forward(encoder.forward(xq)).argmax(axis=1)

    def meta_train_step(self, tasks: list[Task], lr: float) -> float:
        """First-order meta-update: average the query-loss gradients taken
        at the adapted parameters, then one Adam step on the meta-model."""
        meta_params = self.params()
        buffers = [np.zeros_like(p.values) for p in meta_params]
        total = 0.0
        for task in tasks:
            encoder, head, _ = self.adapt(task)
            total += _query_backward(encoder, head, task)
            for buf, p in zip(buffers, encoder.params() + head.params()):
                buf += p.grad
        for p, buf in zip(meta_params, buffers):
            p.grad[...] = buf / len(tasks)
        self.optimizer().step(lr)
        return total / len(tasks)

    def clone(self) -> "FomamlLearner":
        return FomamlLearner(self.encoder.clone(), self.cfg, self.head.clone())


class ProtoMamlLearner(Learner):
    """First-order MAML whose head is re-built from prototypes per task.

    Head row c starts at twice the class prototype with bias minus the
    prototype's squared norm, so with zero inner steps the argmax matches
    nearest-prototype classification exactly.
    """

    kind: ClassVar[str] = "protomaml"

    def _build_head(self, encoder: Encoder, task: Task) -> LinearHead:
        xs, ys = task.support_matrix()
        mu = class_means(encoder.forward(xs), ys, task.way)
        return LinearHead.from_values(2.0 * mu.T, -(mu**2).sum(axis=1))

    def adapt(
        self, task: Task, loss_cfg: LossConfig | None = None
    ) -> tuple[Encoder, LinearHead, list[float]]:
        encoder = self.encoder.clone()
        head = self._build_head(encoder, task)
        trajectory = inner_adapt(
            encoder, head, task, self.cfg.inner_steps, self.cfg.inner_lr,
            loss_cfg, self.cfg.adapt_scope,
        )
        return encoder, head, trajectory

    def adapt_and_predict(self, task, loss_cfg=None, rng=None):
        encoder, head, _ = self.adapt(task, loss_cfg)
        xq, _ = task.query_matrix()
        return head.forward(encoder.forward(xq)).argmax(axis=1)

    def meta_train_step(self, tasks: list[Task], lr: float) -> float:
        """Meta-update touches only the encoder; the head is task-local."""
        meta_params = self.params()
        buffers = [np.zeros_like(p.values) for p in meta_params]
        total = 0.0
        for task in tasks:
            encoder, head, _ = self.adapt(task)
            total += _query_backward(encoder, head, task)
            for buf, p in zip(buffers, encoder.params()):
                buf += p.grad
        for p, buf in zip(meta_params, buffers):
            p.grad[...] = buf / len(tasks)
        self.optimizer().step(lr)
        return total / len(tasks)

    def clone(self) -> "ProtoMamlLearner":
        return ProtoMamlLearner(self.encoder.clone(), self.cfg)
