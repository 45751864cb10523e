"""Training and evaluation protocol at desk scale.

Episodic learners meta-train on sampled tasks with a halved learning rate
after the first half of the episode budget; baselines pretrain with
mini-batch cross entropy on the merged train+val corpus. Both select the
checkpoint with the best validation accuracy. Evaluation replays a task
stream derived purely from (seed, spec index, task index), so different
learners see identical tasks.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from fewbal.data import MetaDataset, Split, split_as_matrices
from fewbal.errors import InvalidSpecError, UsageError
from fewbal.learners import AdaptationConfig, Learner, build_learner
from fewbal.metrics import TaskScores, accuracy_from_cm, confusion, precision_recall_f1
from fewbal.nn import (
    Adam,
    CosineHead,
    EncoderConfig,
    ParamTensor,
    batch_loss,
    load_params,
    save_params,
)
from fewbal.rebalance import (
    DEFAULT_BALANCED_SPEC,
    DEFAULT_RANDOM_SPEC,
    Strategy,
    rebalance_task,
    training_spec,
)
from fewbal.seeding import mix64
from fewbal.tasks import ImbalanceSpec, sample_task


@dataclass(frozen=True)
class TrainSchedule:
    """Episode/batch budget and validation cadence."""

    total_episodes: int = 2000
    lr_first_half: float = 1e-3
    lr_second_half: float = 1e-4
    val_every: int = 50
    val_tasks: int = 50
    pretrain_batch: int = 128
    query_per_class: int = 16

    def __post_init__(self) -> None:
        if self.total_episodes < 1 or self.val_every < 1 or self.val_tasks < 1:
            raise InvalidSpecError("episode and validation counts must be positive")
        if self.pretrain_batch < 1 or self.query_per_class < 1:
            raise InvalidSpecError("batch sizes must be positive")
        if self.lr_first_half <= 0 or self.lr_second_half <= 0:
            raise InvalidSpecError("learning rates must be positive")

    def lr_at(self, episode: int) -> float:
        """Learning rate for a 1-based episode; halves after episode E//2."""
        return self.lr_first_half if episode <= self.total_episodes // 2 else self.lr_second_half


@dataclass
class RunHandle:
    """A trained learner plus the bookkeeping of how it got there."""

    learner: Learner
    kind: str
    strategy: Strategy
    schedule: TrainSchedule
    seed: int
    best_val_acc: float
    best_point: int
    log: list[tuple[int, str, float]] = field(default_factory=list)


def meta_train(
    learner: Learner,
    ds: MetaDataset,
    strategy: Strategy,
    schedule: TrainSchedule,
    seed: int,
    balanced_spec: ImbalanceSpec = DEFAULT_BALANCED_SPEC,
    random_spec: ImbalanceSpec = DEFAULT_RANDOM_SPEC,
    val_spec: ImbalanceSpec | None = None,
) -> RunHandle:
    """Episodic meta-training with best-validation checkpoint selection.

    The training task distribution follows the strategy (balanced or
    random shots), re-shaped to the learner's train_way and query budget.
    Validation tasks mirror the training distribution and rebalance but
    stay at the base way, so wide-way training still validates on
    evaluation-shaped tasks.
    """
    if not learner.supports_episodic:
        raise UsageError(f"{learner.kind} pretrains on batches, not episodes")
    base = training_spec(strategy, balanced_spec, random_spec)
    qpc = learner.cfg.train_query_per_class or schedule.query_per_class
    train_task_spec = dataclasses.replace(
        base, way=learner.cfg.train_way, m_min=qpc, m_max=qpc
    )
    if val_spec is None:
        val_spec = base

    log: list[tuple[int, str, float]] = []
    best_acc = -1.0
    best_point = 0
    best_snapshot: list[np.ndarray] | None = None
    buffer = []
    for episode in range(1, schedule.total_episodes + 1):
        rng = np.random.default_rng(mix64(seed, "episode", episode))
        task = sample_task(ds.splits["train"], train_task_spec, rng)
        task = rebalance_task(task, strategy.train_rebalance, strategy.sigma_aug, rng)
        buffer.append(task)
        if len(buffer) == learner.cfg.meta_batch:
            learner.meta_train_step(buffer, schedule.lr_at(episode))
            buffer = []
        if episode % schedule.val_every == 0:
            acc = _validation_accuracy(learner, ds, val_spec, strategy, schedule, seed, episode)
            log.append((episode, "val", acc))
            if acc > best_acc:
                best_acc = acc
                best_point = episode
                best_snapshot = learner.snapshot()
    if buffer:
        learner.meta_train_step(buffer, schedule.lr_at(schedule.total_episodes))
    if best_snapshot is not None:
        learner.restore(best_snapshot)
    return RunHandle(
        learner=learner,
        kind=learner.kind,
        strategy=strategy,
        schedule=schedule,
        seed=seed,
        best_val_acc=best_acc,
        best_point=best_point,
        log=log,
    )


def _validation_accuracy(
    learner: Learner,
    ds: MetaDataset,
    val_spec: ImbalanceSpec,
    strategy: Strategy,
    schedule: TrainSchedule,
    seed: int,
    point: int,
) -> float:
    accs = []
    for i in range(schedule.val_tasks):
        rng = np.random.default_rng(mix64(seed, "val", point, i))
        task = sample_task(ds.splits["val"], val_spec, rng)
        task = rebalance_task(task, strategy.train_rebalance, strategy.sigma_aug, rng)
        preds = learner.adapt_and_predict(task, rng=rng)
        _, yq = task.query_matrix()
        accs.append(float((preds == yq).mean()))
    return float(np.mean(accs))


def pretrain(
    learner: Learner,
    pretrain_split: Split,
    holdout_split: Split,
    schedule: TrainSchedule,
    seed: int,
) -> RunHandle:
    """Supervised mini-batch pretraining over the merged class corpus.

    Checkpoint selection uses holdout accuracy. SimpleShot additionally
    stores the mean embedding of the pretraining corpus under the selected
    encoder.
    """
    if not learner.needs_pretrain:
        raise UsageError(f"{learner.kind} meta-trains on episodes, not batches")
    x, y, class_ids = split_as_matrices(pretrain_split)
    xh, yh, holdout_ids = split_as_matrices(holdout_split)
    if class_ids != holdout_ids:
        raise InvalidSpecError("pretrain and holdout must cover the same classes")
    head = learner.make_pretrain_head(len(class_ids), np.random.default_rng(mix64(seed, "head")))
    params = learner.encoder.params() + head.params()
    adam = Adam(params)
    keep_rows_normal = isinstance(head, CosineHead)

    log: list[tuple[int, str, float]] = []
    best_acc = -1.0
    best_point = 0
    best_snapshot: list[np.ndarray] | None = None
    batch = min(schedule.pretrain_batch, len(x))
    for step in range(1, schedule.total_episodes + 1):
        rng = np.random.default_rng(mix64(seed, "batch", step))
        idx = rng.choice(len(x), size=batch, replace=False)
        logits = head.forward(learner.encoder.forward(x[idx]))
        _, dlogits = batch_loss(logits, y[idx])
        for p in params:
            p.zero_grad()
        d_embed = head.backward(dlogits)
        learner.encoder.backward(d_embed)
        adam.step(schedule.lr_at(step))
        if keep_rows_normal:
            head.normalize_rows()
        if step % schedule.val_every == 0:
            preds = head.forward(learner.encoder.forward(xh)).argmax(axis=1)
            acc = float((preds == yh).mean())
            log.append((step, "holdout", acc))
            if acc > best_acc:
                best_acc = acc
                best_point = step
                best_snapshot = [p.values.copy() for p in params]
    if best_snapshot is not None:
        for p, values in zip(params, best_snapshot, strict=True):
            p.values[...] = values
    if learner.kind == "simpleshot":
        learner.set_extra_arrays({"base_mean": learner.encoder.forward(x).mean(axis=0)})
    return RunHandle(
        learner=learner,
        kind=learner.kind,
        strategy=Strategy(name="standard"),
        schedule=schedule,
        seed=seed,
        best_val_acc=best_acc,
        best_point=best_point,
        log=log,
    )


def eval_task_seed(seed: int, spec_index: int, task_index: int) -> int:
    """Seed of one evaluation task; independent of the learner under test."""
    return mix64(seed, "eval", spec_index, task_index)


def evaluate(
    learner: Learner,
    ds: MetaDataset,
    strategy: Strategy,
    eval_specs: list[tuple[str, ImbalanceSpec]],
    n_tasks: int,
    seed: int,
) -> list[TaskScores]:
    """Evaluate on the test split, one TaskScores per spec.

    Per-slot precision/recall is recorded only for specs whose support
    counts are the same in every task (slot identity is meaningless under
    random shot draws). Slot statistics describe the original class slots
    even when inference-time rebalancing pads the support.
    """
    results: list[TaskScores] = []
    for spec_index, (name, spec) in enumerate(eval_specs):
        deterministic = spec.deterministic_support
        counts = spec.support_shots(np.random.default_rng(0)).counts if deterministic else None
        accs: list[float] = []
        f1s: list[float] = []
        slot_p: list[np.ndarray] = []
        slot_r: list[np.ndarray] = []
        seeds: list[int] = []
        for t in range(n_tasks):
            tseed = eval_task_seed(seed, spec_index, t)
            rng = np.random.default_rng(tseed)
            task = sample_task(ds.splits["test"], spec, rng)
            task = rebalance_task(task, strategy.infer_rebalance, strategy.sigma_aug, rng)
            preds = learner.adapt_and_predict(task, loss_cfg=strategy.infer_loss, rng=rng)
            _, yq = task.query_matrix()
            cm = confusion(preds, yq, task.way)
            accs.append(accuracy_from_cm(cm))
            precision, recall, _, macro = precision_recall_f1(cm)
            f1s.append(macro)
            if deterministic:
                slot_p.append(precision)
                slot_r.append(recall)
            seeds.append(tseed)
        results.append(
            TaskScores(
                spec_name=name,
                rho=spec.rho,
                shot_counts=counts,
                accuracies=np.array(accs),
                macro_f1s=np.array(f1s),
                slot_precision=np.stack(slot_p) if slot_p else None,
                slot_recall=np.stack(slot_r) if slot_r else None,
                task_seeds=seeds,
            )
        )
    return results


# ---------------------------------------------------------------------------
# Learner checkpoints: network weights plus kind and config echo.


def save_learner_checkpoint(path: str, learner: Learner) -> None:
    meta = {
        "kind": learner.kind,
        "encoder": dataclasses.asdict(learner.encoder.cfg),
        "adaptation": dataclasses.asdict(learner.cfg),
    }
    tensors = list(learner.params())
    for name, arr in sorted(learner.extra_arrays().items()):
        tensors.append(ParamTensor(f"extra.{name}", arr))
    save_params(path, tensors, meta)


def load_learner_checkpoint(path: str) -> Learner:
    meta, arrays = load_params(path)
    enc_meta = dict(meta["encoder"])
    enc_meta["hidden"] = tuple(enc_meta["hidden"])
    enc_cfg = EncoderConfig(**enc_meta)
    adapt_cfg = AdaptationConfig(**meta["adaptation"])
    learner = build_learner(meta["kind"], enc_cfg, np.random.default_rng(0), adapt_cfg)
    for p in learner.params():
        if p.name not in arrays:
            raise InvalidSpecError(f"checkpoint {path} is missing tensor {p.name}")
        p.values[...] = arrays[p.name]
    extras = {
        name[len("extra."):]: arr for name, arr in arrays.items() if name.startswith("extra.")
    }
    if extras:
        learner.set_extra_arrays(extras)
    return learner
