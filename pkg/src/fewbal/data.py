"""Meta-datasets: synthetic generation, dataset-level imbalance, CSV io.

A meta-dataset is three disjoint class splits (train/val/test); each split
maps a global class id to a matrix of feature rows. Tasks are sampled from
one split at a time.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from fewbal.errors import DataFormatError, InvalidSpecError
from fewbal.seeding import mix64
from fewbal.tasks import Kind, linear_shots, random_shots, step_shots

SPLIT_NAMES = ("train", "val", "test")

Split = dict[int, np.ndarray]


@dataclass
class MetaDataset:
    """Three class-disjoint splits over a shared feature space."""

    splits: dict[str, Split]
    feature_dim: int

    def __post_init__(self) -> None:
        for name in SPLIT_NAMES:
            if name not in self.splits:
                raise InvalidSpecError(f"missing split {name!r}")
        seen: dict[int, str] = {}
        for name in SPLIT_NAMES:
            for cls, rows in self.splits[name].items():
                if cls in seen:
                    raise InvalidSpecError(
                        f"class {cls} appears in splits {seen[cls]!r} and {name!r}"
                    )
                seen[cls] = name
                if rows.ndim != 2 or rows.shape[1] != self.feature_dim:
                    raise InvalidSpecError(
                        f"class {cls} has shape {rows.shape}, expected (*, {self.feature_dim})"
                    )
                if len(rows) == 0:
                    raise InvalidSpecError(f"class {cls} has no samples")

    def split_sizes(self) -> dict[str, dict[int, int]]:
        return {
            name: {cls: len(rows) for cls, rows in split.items()}
            for name, split in self.splits.items()
        }


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian blob generator settings.

    Class means are drawn from N(mean_offset, class_mean_scale^2 I); samples
    scatter around their mean with within_class_std. The defaults leave a
    linear probe around 90% on balanced 5-shot tasks, so imbalance effects
    have room to show.

    mean_offset shifts every class mean by the same constant in all
    coordinates. A large offset gives all features a shared positive
    background component, the signature of rectified feature extractors,
    which is what makes freshly fitted linear heads sensitive to class
    counts. Leave it at 0 for plain centered blobs.
    """

    classes_per_split: tuple[int, int, int] = (64, 16, 20)
    samples_per_class: int = 600
    feature_dim: int = 16
    class_mean_scale: float = 3.0
    within_class_std: float = 1.0
    mean_offset: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if any(c < 1 for c in self.classes_per_split):
            raise InvalidSpecError(f"all split sizes must be positive: {self.classes_per_split}")
        if self.samples_per_class < 1:
            raise InvalidSpecError("samples_per_class must be positive")
        if self.feature_dim < 1:
            raise InvalidSpecError("feature_dim must be positive")
        if self.within_class_std <= 0:
            raise InvalidSpecError("within_class_std must be positive")


def generate_synthetic(spec: SyntheticSpec) -> MetaDataset:
    """Deterministically generate a Gaussian-blob meta-dataset."""
    rng = np.random.default_rng(spec.seed)
    splits: dict[str, Split] = {}
    next_cls = 0
    for name, n_classes in zip(SPLIT_NAMES, spec.classes_per_split):
        split: Split = {}
        for _ in range(n_classes):
            mean = spec.mean_offset + rng.normal(
                0.0, spec.class_mean_scale, size=spec.feature_dim
            )
            rows = mean + rng.normal(
                0.0, spec.within_class_std, size=(spec.samples_per_class, spec.feature_dim)
            )
            split[next_cls] = rows
            next_cls += 1
        splits[name] = split
    return MetaDataset(splits=splits, feature_dim=spec.feature_dim)


@dataclass(frozen=True)
class DatasetImbalanceSpec:
    """Class-imbalance applied to a whole split rather than to tasks.

    Reuses the task-level generators at dataset scale: class i of the
    target split retains counts[i] samples, where counts comes from the
    same linear/step/random code path used for shot vectors.
    """

    kind: Kind
    dk_min: int
    dk_max: int
    dn: int
    dn_min: int | None = None
    target_split: str = "train"

    def __post_init__(self) -> None:
        if self.target_split not in SPLIT_NAMES:
            raise InvalidSpecError(f"unknown split {self.target_split!r}")
        if self.kind == "balanced" and self.dk_min != self.dk_max:
            raise InvalidSpecError("balanced dataset imbalance needs dk_min == dk_max")
        # Bounds are validated by the generator itself on application.

    def retained_counts(self, rng: np.random.Generator) -> tuple[int, ...]:
        if self.kind == "balanced":
            return (self.dk_min,) * self.dn
        if self.kind == "linear":
            return linear_shots(self.dk_min, self.dk_max, self.dn).counts
        if self.kind == "step":
            if self.dn_min is None:
                raise InvalidSpecError("step dataset imbalance needs dn_min")
            return step_shots(self.dk_min, self.dk_max, self.dn, self.dn_min).counts
        if self.kind == "random":
            return random_shots(self.dk_min, self.dk_max, self.dn, rng).counts
        raise InvalidSpecError(f"unknown dataset imbalance kind {self.kind!r}")

    @property
    def rho(self) -> float:
        return self.dk_max / self.dk_min


def apply_dataset_imbalance(
    ds: MetaDataset, spec: DatasetImbalanceSpec, rng: np.random.Generator
) -> MetaDataset:
    """Discard samples from one split to impose the given imbalance shape.

    Classes are matched to retained counts in a random order, and the
    retained samples of each class are a uniform subset without
    replacement. Other splits are passed through untouched.
    """
    split = ds.splits[spec.target_split]
    class_ids = sorted(split.keys())
    if len(class_ids) != spec.dn:
        raise InvalidSpecError(
            f"split {spec.target_split!r} has {len(class_ids)} classes, spec covers {spec.dn}"
        )
    counts = spec.retained_counts(rng)
    order = rng.permutation(len(class_ids))
    new_split: Split = {}
    for pos, count in zip(order, counts):
        cls = class_ids[int(pos)]
        rows = split[cls]
        if len(rows) < count:
            raise InvalidSpecError(
                f"class {cls} has {len(rows)} samples, imbalance spec keeps {count}"
            )
        keep = rng.choice(len(rows), size=count, replace=False)
        new_split[cls] = rows[np.sort(keep)]
    splits = dict(ds.splits)
    splits[spec.target_split] = new_split
    return MetaDataset(splits=splits, feature_dim=ds.feature_dim)


def reduce_dataset(
    ds: MetaDataset, total_budget: int, n_classes: int, rng: np.random.Generator
) -> MetaDataset:
    """Shrink the train split to n_classes classes sharing total_budget samples.

    The budget must divide evenly; each kept class retains
    total_budget / n_classes uniformly chosen samples.
    """
    if n_classes < 1:
        raise InvalidSpecError("n_classes must be positive")
    if total_budget % n_classes != 0:
        raise InvalidSpecError(
            f"total budget {total_budget} does not divide evenly over {n_classes} classes"
        )
    per_class = total_budget // n_classes
    train = ds.splits["train"]
    class_ids = sorted(train.keys())
    if len(class_ids) < n_classes:
        raise InvalidSpecError(
            f"train split has {len(class_ids)} classes, cannot keep {n_classes}"
        )
    kept = rng.choice(np.asarray(class_ids), size=n_classes, replace=False)
    new_train: Split = {}
    for cls in (int(c) for c in kept):
        rows = train[cls]
        if len(rows) < per_class:
            raise InvalidSpecError(
                f"class {cls} has {len(rows)} samples, budget keeps {per_class}"
            )
        keep = rng.choice(len(rows), size=per_class, replace=False)
        new_train[cls] = rows[np.sort(keep)]
    splits = dict(ds.splits)
    splits["train"] = new_train
    return MetaDataset(splits=splits, feature_dim=ds.feature_dim)


def baseline_pretrain_split(
    ds: MetaDataset, seed: int = 0
) -> tuple[Split, Split]:
    """Merge train and val classes into a supervised corpus and hold out 20%.

    Each class is shuffled with a seed derived from (seed, class id), then
    the first 80% of its rows go to the pretraining set and the rest to
    the holdout used for checkpoint selection. Both outputs cover the same
    classes.
    """
    merged: Split = {}
    for name in ("train", "val"):
        merged.update(ds.splits[name])
    pretrain: Split = {}
    holdout: Split = {}
    for cls in sorted(merged.keys()):
        rows = merged[cls]
        if len(rows) < 5:
            raise InvalidSpecError(
                f"class {cls} has {len(rows)} samples, need at least 5 for a holdout"
            )
        order = np.random.default_rng(mix64(seed, "pretrain-split", cls)).permutation(len(rows))
        cut = int(len(rows) * 0.8)
        pretrain[cls] = rows[order[:cut]]
        holdout[cls] = rows[order[cut:]]
    return pretrain, holdout


def save_features(ds: MetaDataset, path: str) -> None:
    """Write the dataset as CSV rows: split, class_id, then feature values."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "class_id"] + [f"f_{i + 1}" for i in range(ds.feature_dim)])
        for name in SPLIT_NAMES:
            for cls in sorted(ds.splits[name].keys()):
                for row in ds.splits[name][cls]:
                    writer.writerow([name, cls] + [repr(float(v)) for v in row])


def load_features(path: str) -> MetaDataset:
    """Read a dataset saved by save_features, validating as it goes."""
    rows_by_class: dict[tuple[str, int], list[np.ndarray]] = {}
    feature_dim: int | None = None
    class_split: dict[int, str] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1:
                if len(row) < 3 or row[0] != "split" or row[1] != "class_id":
                    raise DataFormatError(f"{path}:1: bad header {row!r}")
                feature_dim = len(row) - 2
                continue
            if not row:
                continue
            if feature_dim is None or len(row) != feature_dim + 2:
                raise DataFormatError(
                    f"{path}:{lineno}: expected {feature_dim or '?'} feature values, "
                    f"got {len(row) - 2}"
                )
            split = row[0]
            if split not in SPLIT_NAMES:
                raise DataFormatError(f"{path}:{lineno}: unknown split {split!r}")
            try:
                cls = int(row[1])
                values = np.array([float(v) for v in row[2:]], dtype=np.float64)
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
            prior = class_split.setdefault(cls, split)
            if prior != split:
                raise DataFormatError(
                    f"{path}:{lineno}: class {cls} appears in both {prior!r} and {split!r}"
                )
            rows_by_class.setdefault((split, cls), []).append(values)
    if feature_dim is None:
        raise DataFormatError(f"{path}: empty file")
    splits: dict[str, Split] = {name: {} for name in SPLIT_NAMES}
    for (split, cls), rows in rows_by_class.items():
        splits[split][cls] = np.stack(rows)
    return MetaDataset(splits=splits, feature_dim=feature_dim)


def split_as_matrices(split: Mapping[int, np.ndarray]) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Stack a split into (rows, integer labels, sorted class ids).

    Labels index into the sorted class id list, which is what supervised
    pretraining feeds a classification head.
    """
    class_ids = sorted(split.keys())
    x = np.concatenate([split[c] for c in class_ids], axis=0)
    y = np.repeat(np.arange(len(class_ids)), [len(split[c]) for c in class_ids])
    return x, y, class_ids
