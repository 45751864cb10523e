"""Metric-space learners: prototypes, attention, nearest neighbors, relation.

These learners classify queries by comparing embeddings; adaptation never
touches the loss, so weighted or focal inference configs are rejected.
"""

from __future__ import annotations

from typing import ClassVar, Literal

import numpy as np

from fewbal.errors import UsageError
from fewbal.learners.base import (
    AdaptationConfig,
    Learner,
    class_means,
    require_plain_loss,
    squared_distances,
)
from fewbal.nn import (
    COSINE_SCALE,
    Dense,
    Encoder,
    EncoderConfig,
    LossConfig,
    ParamTensor,
    batch_loss,
    cosine_logits,
    cosine_logits_backward,
)
from fewbal.tasks import Task


def predict_protonet(encoder: Encoder, task: Task) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-prototype classification; logits are negative squared distances."""
    xs, ys = task.support_matrix()
    xq, _ = task.query_matrix()
    es = encoder.forward(xs)
    eq = encoder.forward(xq)
    mu = class_means(es, ys, task.way)
    logits = -squared_distances(eq, mu)
    return logits.argmax(axis=1), logits


def predict_matching(
    encoder: Encoder, task: Task, scale: float = COSINE_SCALE
) -> tuple[np.ndarray, np.ndarray]:
    """Attention over supports by scaled cosine, summed per class.

    Each query softmaxes its cosine scores over all support rows; a class
    scores the total attention mass of its supports, so duplicated rows
    genuinely count twice.
    """
    xs, ys = task.support_matrix()
    xq, _ = task.query_matrix()
    es = encoder.forward(xs)
    eq = encoder.forward(xq)
    z = cosine_logits(eq, es, scale)
    z = z - z.max(axis=1, keepdims=True)
    a = np.exp(z)
    a /= a.sum(axis=1, keepdims=True)
    onehot = np.zeros((len(ys), task.way))
    onehot[np.arange(len(ys)), ys] = 1.0
    probs = a @ onehot
    return probs.argmax(axis=1), probs


def predict_simpleshot(
    encoder: Encoder, task: Task, base_mean: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Center by the base-corpus mean, L2-normalize, nearest prototype."""
    xs, ys = task.support_matrix()
    xq, _ = task.query_matrix()
    es = _center_normalize(encoder.forward(xs), base_mean)
    eq = _center_normalize(encoder.forward(xq), base_mean)
    mu = class_means(es, ys, task.way)
    logits = -squared_distances(eq, mu)
    return logits.argmax(axis=1), logits


def _center_normalize(e: np.ndarray, base_mean: np.ndarray) -> np.ndarray:
    centered = e - base_mean
    norms = np.maximum(np.linalg.norm(centered, axis=1, keepdims=True), 1e-12)
    return centered / norms


def predict_nn1(encoder: Encoder, task: Task) -> np.ndarray:
    """Label of the single nearest support row (Euclidean, first-row ties)."""
    xs, ys = task.support_matrix()
    xq, _ = task.query_matrix()
    es = encoder.forward(xs)
    eq = encoder.forward(xq)
    nearest = squared_distances(eq, es).argmin(axis=1)
    return ys[nearest]


class ProtoNetLearner(Learner):
    kind: ClassVar[str] = "protonet"

    def adapt_and_predict(self, task, loss_cfg=None, rng=None):
        require_plain_loss(self.kind, loss_cfg)
        preds, _ = predict_protonet(self.encoder, task)
        return preds

    def meta_train_step(self, tasks: list[Task], lr: float) -> float:
        self.zero_grad()
        total = 0.0
        for task in tasks:
            total += self._episode_backward(task)
        for p in self.params():
            p.grad /= len(tasks)
        self.optimizer().step(lr)
        return total / len(tasks)

    def _episode_backward(self, task: Task) -> float:
        xs, ys = task.support_matrix()
        xq, yq = task.query_matrix()
        n_support = len(ys)
        e = self.encoder.forward(np.concatenate([xs, xq], axis=0))
        es, eq = e[:n_support], e[n_support:]
        counts = np.bincount(ys, minlength=task.way).astype(np.float64)
        mu = class_means(es, ys, task.way)
        logits = -squared_distances(eq, mu)
        loss, dlogits = batch_loss(logits, yq)
        dd = -dlogits
        deq = 2.0 * (dd.sum(axis=1)[:, None] * eq - dd @ mu)
        dmu = 2.0 * (dd.sum(axis=0)[:, None] * mu - dd.T @ eq)
        des = dmu[ys] / counts[ys][:, None]
        self.encoder.backward(np.concatenate([des, deq], axis=0))
        return loss

    def clone(self) -> "ProtoNetLearner":
        return ProtoNetLearner(self.encoder.clone(), self.cfg)


class MatchingLearner(Learner):
    kind: ClassVar[str] = "matching"

    def __init__(self, encoder, cfg, scale: float = COSINE_SCALE):
        super().__init__(encoder, cfg)
        self.scale = scale

    def adapt_and_predict(self, task, loss_cfg=None, rng=None):
        require_plain_loss(self.kind, loss_cfg)
        preds, _ = predict_matching(self.encoder, task, self.scale)
        return preds

    def meta_train_step(self, tasks: list[Task], lr: float) -> float:
        self.zero_grad()
        total = 0.0
        for task in tasks:
            total += self._episode_backward(task)
        for p in self.params():
            p.grad /= len(tasks)
        self.optimizer().step(lr)
        return total / len(tasks)

    def _episode_backward(self, task: Task) -> float:
        xs, ys = task.support_matrix()
        xq, yq = task.query_matrix()
        n_support = len(ys)
        e = self.encoder.forward(np.concatenate([xs, xq], axis=0))
        es, eq = e[:n_support], e[n_support:]
        z = cosine_logits(eq, es, self.scale)
        zs = z - z.max(axis=1, keepdims=True)
        a = np.exp(zs)
        a /= a.sum(axis=1, keepdims=True)
        onehot = np.zeros((n_support, task.way))
        onehot[np.arange(n_support), ys] = 1.0
        probs = a @ onehot
        n_query = len(yq)
        p_true = probs[np.arange(n_query), yq]
        loss = float(-np.log(p_true).mean())
        dprobs = np.zeros_like(probs)
        dprobs[np.arange(n_query), yq] = -1.0 / (n_query * p_true)
        da = dprobs @ onehot.T
        dz = a * (da - (a * da).sum(axis=1, keepdims=True))
        deq, des = cosine_logits_backward(eq, es, dz, self.scale)
        self.encoder.backward(np.concatenate([des, deq], axis=0))
        return loss

    def clone(self) -> "MatchingLearner":
        return MatchingLearner(self.encoder.clone(), self.cfg, self.scale)


class SimpleShotLearner(Learner):
    kind: ClassVar[str] = "simpleshot"
    needs_pretrain: ClassVar[bool] = True
    supports_episodic: ClassVar[bool] = False

    def __init__(self, encoder, cfg):
        super().__init__(encoder, cfg)
        self.base_mean: np.ndarray | None = None

    def adapt_and_predict(self, task, loss_cfg=None, rng=None):
        require_plain_loss(self.kind, loss_cfg)
        if self.base_mean is None:
            raise UsageError("simpleshot needs a pretrained base mean")
        preds, _ = predict_simpleshot(self.encoder, task, self.base_mean)
        return preds

    def extra_arrays(self) -> dict[str, np.ndarray]:
        if self.base_mean is None:
            return {}
        return {"base_mean": self.base_mean}

    def set_extra_arrays(self, extras: dict[str, np.ndarray]) -> None:
        if "base_mean" in extras:
            self.base_mean = np.asarray(extras["base_mean"], dtype=np.float64)

    def clone(self) -> "SimpleShotLearner":
        out = SimpleShotLearner(self.encoder.clone(), self.cfg)
        if self.base_mean is not None:
            out.base_mean = self.base_mean.copy()
        return out


class NN1Learner(Learner):
    kind: ClassVar[str] = "nn1"
    needs_pretrain: ClassVar[bool] = True
    supports_episodic: ClassVar[bool] = False

    def adapt_and_predict(self, task, loss_cfg=None, rng=None):
        require_plain_loss(self.kind, loss_cfg)
        return predict_nn1(self.encoder, task)

    def clone(self) -> "NN1Learner":
        return NN1Learner(self.encoder.clone(), self.cfg)


class Square:
    """Elementwise square activation; the relation tests exploit it to
    express exact squared distances, training uses relu."""

    def __init__(self) -> None:
        self._x: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x * x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise UsageError("Square.backward called before forward")
        return 2.0 * self._x * dy


class ReluAct:
    def __init__(self) -> None:
        self._mask: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise UsageError("ReluAct.backward called before forward")
        return np.where(self._mask, dy, 0.0)


class RelationModule:
    """Two dense layers scoring a (prototype, query) pair with one scalar."""

    def __init__(self, l1: Dense, l2: Dense, activation: Literal["relu", "square"] = "relu"):
        self.l1 = l1
        self.l2 = l2
        self.activation = activation
        self._act = Square() if activation == "square" else ReluAct()

    @classmethod
    def create(cls, embed_dim: int, hidden: int, rng: np.random.Generator,
               activation: Literal["relu", "square"] = "relu") -> "RelationModule":
        return cls(
            Dense.create("rel0", 2 * embed_dim, hidden, rng),
            Dense.create("rel1", hidden, 1, rng),
            activation,
        )

    def forward(self, pairs: np.ndarray) -> np.ndarray:
        return self.l2.forward(self._act.forward(self.l1.forward(pairs)))

    def backward(self, dscore: np.ndarray) -> np.ndarray:
        return self.l1.backward(self._act.backward(self.l2.backward(dscore)))

    def params(self) -> list[ParamTensor]:
        return self.l1.params() + self.l2.params()

    def clone(self) -> "RelationModule":
        return RelationModule(self.l1.clone(), self.l2.clone(), self.activation)


def relation_scores(
    encoder: Encoder, module: RelationModule, task: Task
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Scores for every (query, class) pair plus the cached pieces."""
    xs, ys = task.support_matrix()
    xq, yq = task.query_matrix()
    n_support = len(ys)
    e = encoder.forward(np.concatenate([xs, xq], axis=0))
    es, eq = e[:n_support], e[n_support:]
    mu = class_means(es, ys, task.way)
    n_query, dim = eq.shape
    left = np.broadcast_to(mu[None, :, :], (n_query, task.way, dim)).reshape(-1, dim)
    right = np.repeat(eq, task.way, axis=0)
    pairs = np.concatenate([left, right], axis=1)
    scores = module.forward(pairs).reshape(n_query, task.way)
    return scores, es, eq, mu


def predict_relation(
    encoder: Encoder, module: RelationModule, task: Task
) -> tuple[np.ndarray, np.ndarray]:
    scores, _, _, _ = relation_scores(encoder, module, task)
    return scores.argmax(axis=1), scores


class RelationLearner(Learner):
    kind: ClassVar[str] = "relation"

    def __init__(self, encoder, cfg, module: RelationModule):
        super().__init__(encoder, cfg)
        self.module = module

    @classmethod
    def create(cls, enc_cfg: EncoderConfig, cfg: AdaptationConfig,
               rng: np.random.Generator) -> "RelationLearner":
        encoder = Encoder(enc_cfg, rng)
        module = RelationModule.create(enc_cfg.embed_dim, 2 * enc_cfg.embed_dim, rng)
        return cls(encoder, cfg, module)

    def params(self) -> list[ParamTensor]:
        return self.encoder.params() + self.module.params()

    def adapt_and_predict(self, task, loss_cfg=None, rng=None):
        require_plain_loss(self.kind, loss_cfg)
        preds, _ = predict_relation(self.encoder, self.module, task)
        return preds

    def meta_train_step(self, tasks: list[Task], lr: float) -> float:
        self.zero_grad()
        total = 0.0
        for task in tasks:
            total += self._episode_backward(task)
        for p in self.params():
            p.grad /= len(tasks)
        self.optimizer().step(lr)
        return total / len(tasks)

    def _episode_backward(self, task: Task) -> float:
        xs, ys = task.support_matrix()
        _, yq = task.query_matrix()
        scores, es, eq, mu = relation_scores(self.encoder, self.module, task)
        loss, dscores = batch_loss(scores, yq)
        dpairs = self.module.backward(dscores.reshape(-1, 1))
        dim = eq.shape[1]
        n_query = len(yq)
        dmu = dpairs[:, :dim].reshape(n_query, task.way, dim).sum(axis=0)
        deq = dpairs[:, dim:].reshape(n_query, task.way, dim).sum(axis=1)
        counts = np.bincount(ys, minlength=task.way).astype(np.float64)
        des = dmu[ys] / counts[ys][:, None]
        self.encoder.backward(np.concatenate([des, deq], axis=0))
        return loss

    def clone(self) -> "RelationLearner":
        return RelationLearner(self.encoder.clone(), self.cfg, self.module.clone())
