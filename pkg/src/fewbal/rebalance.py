"""Support-set rebalancing and experiment strategy presets.

Random oversampling (ros) pads every class up to the majority count by
resampling its own support rows with replacement. ros_plus does the same
but perturbs only the appended duplicates with small Gaussian noise, so
the original rows always survive untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

from fewbal.errors import InvalidSpecError
from fewbal.nn import LossConfig
from fewbal.tasks import ImbalanceSpec, Task

RebalanceMode = Literal["none", "ros", "ros_plus"]
TrainMode = Literal["standard", "random_shot"]

# Noise scale for ros_plus duplicates, as a fraction of the within-class
# spread the synthetic data uses by default.
DEFAULT_SIGMA_AUG = 0.1

DEFAULT_BALANCED_SPEC = ImbalanceSpec(kind="balanced", k_min=5, k_max=5, way=5)
DEFAULT_RANDOM_SPEC = ImbalanceSpec(kind="random", k_min=1, k_max=9, way=5)


def _duplicate_indices(
    support: list[np.ndarray], rng: np.random.Generator
) -> list[np.ndarray]:
    """Indices of the rows each class will append to reach the majority count.

    Drawn for every class before any other randomness, so ros and ros_plus
    consume the stream identically up to the noise draws.
    """
    k_max = max(len(rows) for rows in support)
    return [rng.integers(0, len(rows), size=k_max - len(rows)) for rows in support]


def ros(support: list[np.ndarray], rng: np.random.Generator) -> list[np.ndarray]:
    """Random oversampling: pad every class to the majority count."""
    if not support or any(len(rows) == 0 for rows in support):
        raise InvalidSpecError("ros needs at least one row per class")
    picks = _duplicate_indices(support, rng)
    return [
        np.concatenate([rows, rows[idx]], axis=0) if len(idx) else rows.copy()
        for rows, idx in zip(support, picks)
    ]


def ros_plus(
    support: list[np.ndarray], sigma_aug: float, rng: np.random.Generator
) -> list[np.ndarray]:
    """ROS with Gaussian perturbation applied to the appended duplicates only.

    sigma_aug = 0 reproduces plain ros exactly (noise draws still happen,
    but scale zero makes them hard zeros).
    """
    if sigma_aug < 0:
        raise InvalidSpecError(f"sigma_aug must be non-negative, got {sigma_aug}")
    if not support or any(len(rows) == 0 for rows in support):
        raise InvalidSpecError("ros_plus needs at least one row per class")
    picks = _duplicate_indices(support, rng)
    out: list[np.ndarray] = []
    for rows, idx in zip(support, picks):
        if len(idx) == 0:
            out.append(rows.copy())
            continue
        noise = rng.normal(0.0, sigma_aug, size=(len(idx), rows.shape[1]))
        out.append(np.concatenate([rows, rows[idx] + noise], axis=0))
    return out


def rebalance_task(
    task: Task, mode: RebalanceMode, sigma_aug: float, rng: np.random.Generator
) -> Task:
    """Apply a rebalance mode to a task's support set."""
    if mode == "none":
        return task
    if mode == "ros":
        return task.replace_support(ros(task.support, rng))
    if mode == "ros_plus":
        return task.replace_support(ros_plus(task.support, sigma_aug, rng))
    raise InvalidSpecError(f"unknown rebalance mode {mode!r}")


@dataclass(frozen=True)
class Strategy:
    """One training/inference recipe from the comparison grid."""

    name: str
    train_mode: TrainMode = "standard"
    train_rebalance: RebalanceMode = "none"
    infer_rebalance: RebalanceMode = "none"
    infer_loss: LossConfig = LossConfig()
    sigma_aug: float = DEFAULT_SIGMA_AUG

    def __post_init__(self) -> None:
        if self.train_mode not in ("standard", "random_shot"):
            raise InvalidSpecError(f"unknown train mode {self.train_mode!r}")
        for mode in (self.train_rebalance, self.infer_rebalance):
            if mode not in ("none", "ros", "ros_plus"):
                raise InvalidSpecError(f"unknown rebalance mode {mode!r}")
        if self.sigma_aug < 0:
            raise InvalidSpecError("sigma_aug must be non-negative")


PRESETS: dict[str, Strategy] = {
    s.name: s
    for s in (
        Strategy(name="standard"),
        Strategy(name="standard-rosplus-infer", infer_rebalance="ros_plus"),
        Strategy(name="random-shot", train_mode="random_shot"),
        Strategy(name="random-shot-ros", train_mode="random_shot", train_rebalance="ros"),
        Strategy(name="random-shot-rosplus", train_mode="random_shot",
                 train_rebalance="ros_plus"),
        Strategy(name="random-shot-ros-rosplus-infer", train_mode="random_shot",
                 train_rebalance="ros", infer_rebalance="ros_plus"),
    )
}


def get_strategy(name: str, sigma_aug: float | None = None) -> Strategy:
    if name not in PRESETS:
        raise InvalidSpecError(
            f"unknown strategy {name!r}; known: {', '.join(sorted(PRESETS))}"
        )
    strat = PRESETS[name]
    if sigma_aug is not None:
        strat = replace(strat, sigma_aug=sigma_aug)
    return strat


def training_spec(
    strategy: Strategy,
    balanced: ImbalanceSpec = DEFAULT_BALANCED_SPEC,
    random: ImbalanceSpec = DEFAULT_RANDOM_SPEC,
) -> ImbalanceSpec:
    """Task distribution used for meta-training under this strategy."""
    return balanced if strategy.train_mode == "standard" else random
