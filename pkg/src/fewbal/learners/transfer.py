"""Transfer baselines: frozen encoder, freshly fitted classification head."""

from __future__ import annotations

from typing import ClassVar

import numpy as np

from fewbal.learners.base import Learner
from fewbal.nn import CosineHead, LinearHead, LossConfig, batch_loss, sgd_step


def fit_head_on_support(
    head: LinearHead | CosineHead,
    e_support: np.ndarray,
    ys: np.ndarray,
    counts: tuple[int, ...],
    loss_cfg: LossConfig | None,
    steps: int,
    lr: float,
    normalize_rows: bool = False,
) -> list[float]:
    """Full-batch gradient descent of a head on fixed support embeddings.

    Returns the per-step loss trajectory. normalize_rows re-projects each
    class row to unit norm after every update (cosine-head discipline).
    """
    trajectory: list[float] = []
    for _ in range(steps):
        logits = head.forward(e_support)
        loss, dlogits = batch_loss(logits, ys, loss_cfg, counts)
        trajectory.append(loss)
        head.zero_grad()
        head.backward(dlogits)
        sgd_step(head.params(), lr)
        if normalize_rows:
            head.normalize_rows()
    return trajectory


class FinetuneLearner(Learner):
    """Pretrained encoder kept frozen; a new linear head fits each task."""

    kind: ClassVar[str] = "finetune"
    needs_pretrain: ClassVar[bool] = True
    supports_episodic: ClassVar[bool] = False

    cosine_head = False

    def adapt_and_predict(self, task, loss_cfg=None, rng=None):
        rng = rng or np.random.default_rng(0)
        xs, ys = task.support_matrix()
        xq, _ = task.query_matrix()
        es = self.encoder.forward(xs)
        eq = self.encoder.forward(xq)
        head = self._new_head(task.way, rng)
        fit_head_on_support(
            head, es, ys, task.shot_counts, loss_cfg,
            self.cfg.finetune_steps, self.cfg.finetune_lr,
            normalize_rows=self.cosine_head,
        )
        return head.forward(eq).argmax(axis=1)

    def _new_head(self, way: int, rng: np.random.Generator):
        return LinearHead.create(self.encoder.cfg.embed_dim, way, rng)

    def clone(self):
        return type(self)(self.encoder.clone(), self.cfg)


class BaselinePPLearner(FinetuneLearner):
    """Cosine-similarity head in both phases, class rows kept unit norm."""

    kind: ClassVar[str] = "baseline_pp"

    cosine_head = True

    def _new_head(self, way: int, rng: np.random.Generator):
        head = CosineHead.create(self.encoder.cfg.embed_dim, way, rng)
        head.normalize_rows()
        return head

    def make_pretrain_head(self, n_classes: int, rng: np.random.Generator):
        head = CosineHead.create(self.encoder.cfg.embed_dim, n_classes, rng)
        head.normalize_rows()
        return head
