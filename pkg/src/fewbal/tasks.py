"""Shot-vector generators and imbalanced task sampling.

A task is a small classification problem: ``way`` classes, a support set
with ``counts[i]`` examples for class slot ``i``, and a query set. The
generators here control how unevenly the support (or query) examples are
spread over the class slots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Mapping, Sequence, TextIO

import numpy as np

from fewbal.errors import DataFormatError, InvalidSpecError, TaskSamplingError

Kind = Literal["balanced", "linear", "step", "random"]

# Offset subtracted before rounding in the linear generator. Chosen just
# under one half so interior slots round to evenly spaced integers while
# both endpoints stay exactly at k_min and k_max.
LINEAR_ROUND_OFFSET = 0.499


def _round_half_away(x: float) -> int:
    """Round positive x to the nearest integer, halves away from zero."""
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class ShotVector:
    """Per-class-slot example counts for one side of a task."""

    counts: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.counts) < 2:
            raise InvalidSpecError(f"need at least 2 class slots, got {len(self.counts)}")
        if any(c < 1 for c in self.counts):
            raise InvalidSpecError(f"every slot needs at least 1 example, got {self.counts}")

    @property
    def way(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return sum(self.counts)


def linear_shots(k_min: int, k_max: int, way: int) -> ShotVector:
    """Linearly interpolated counts from k_min (slot 0) to k_max (last slot).

    Interior slots are rounded to the nearest integer after shifting by
    LINEAR_ROUND_OFFSET, which keeps the endpoints exact and the spacing
    as even as integers allow.
    """
    _check_range(k_min, k_max, way)
    span = k_max + 2.0 * LINEAR_ROUND_OFFSET - k_min
    counts = tuple(
        _round_half_away(k_min - LINEAR_ROUND_OFFSET + i * span / (way - 1))
        for i in range(way)
    )
    return ShotVector(counts)


def step_shots(k_min: int, k_max: int, way: int, n_min: int) -> ShotVector:
    """n_min minority slots at k_min, the remaining slots at k_max."""
    _check_range(k_min, k_max, way)
    if k_min == k_max:
        raise InvalidSpecError("step distribution needs k_min < k_max; use balanced instead")
    if not 1 <= n_min <= way - 1:
        raise InvalidSpecError(f"n_min must be in [1, way-1], got {n_min} for way={way}")
    return ShotVector((k_min,) * n_min + (k_max,) * (way - n_min))


def random_shots(k_min: int, k_max: int, way: int, rng: np.random.Generator) -> ShotVector:
    """Each slot count drawn independently, uniform on [k_min, k_max]."""
    _check_range(k_min, k_max, way)
    counts = tuple(int(c) for c in rng.integers(k_min, k_max + 1, size=way))
    return ShotVector(counts)


def balanced_shots(k: int, way: int) -> ShotVector:
    _check_range(k, k, way)
    return ShotVector((k,) * way)


def imbalance_ratio(shots: ShotVector | Sequence[int]) -> float:
    """Largest slot count divided by smallest slot count."""
    counts = shots.counts if isinstance(shots, ShotVector) else tuple(shots)
    if not counts:
        raise InvalidSpecError("empty shot vector")
    return max(counts) / min(counts)


def _check_range(k_min: int, k_max: int, way: int) -> None:
    if way < 2:
        raise InvalidSpecError(f"way must be at least 2, got {way}")
    if k_min < 1:
        raise InvalidSpecError(f"k_min must be at least 1, got {k_min}")
    if k_max < k_min:
        raise InvalidSpecError(f"k_max must be >= k_min, got [{k_min}, {k_max}]")


@dataclass(frozen=True)
class ImbalanceSpec:
    """How to draw the support and query shot vectors of a task.

    The support side is controlled by ``kind``/``k_min``/``k_max`` (plus
    ``n_min`` for step). The query side has its own generator, balanced at
    ``m_min`` per class unless configured otherwise.
    """

    kind: Kind
    k_min: int
    k_max: int
    way: int = 5
    n_min: int | None = None
    query_kind: Kind = "balanced"
    m_min: int = 16
    m_max: int = 16
    m_n_min: int | None = None

    def __post_init__(self) -> None:
        _validate_side(self.kind, self.k_min, self.k_max, self.way, self.n_min, "support")
        _validate_side(self.query_kind, self.m_min, self.m_max, self.way, self.m_n_min, "query")

    @property
    def rho(self) -> float:
        """Nominal imbalance ratio of the support side."""
        return self.k_max / self.k_min

    def support_shots(self, rng: np.random.Generator) -> ShotVector:
        return _generate(self.kind, self.k_min, self.k_max, self.way, self.n_min, rng)

    def query_shots(self, rng: np.random.Generator) -> ShotVector:
        return _generate(self.query_kind, self.m_min, self.m_max, self.way, self.m_n_min, rng)

    @property
    def deterministic_support(self) -> bool:
        """True when every task from this spec has the same support counts."""
        return self.kind != "random"


def _validate_side(kind: str, lo: int, hi: int, way: int, n_min: int | None, side: str) -> None:
    if kind not in ("balanced", "linear", "step", "random"):
        raise InvalidSpecError(f"unknown {side} distribution kind: {kind!r}")
    _check_range(lo, hi, way)
    if kind == "balanced" and lo != hi:
        raise InvalidSpecError(f"balanced {side} side needs equal bounds, got [{lo}, {hi}]")
    if kind == "step":
        if lo == hi:
            raise InvalidSpecError(f"step {side} side needs distinct bounds, got [{lo}, {hi}]")
        if n_min is None or not 1 <= n_min <= way - 1:
            raise InvalidSpecError(f"step {side} side needs n_min in [1, way-1], got {n_min}")


def _generate(
    kind: str, lo: int, hi: int, way: int, n_min: int | None, rng: np.random.Generator
) -> ShotVector:
    if kind == "balanced":
        return balanced_shots(lo, way)
    if kind == "linear":
        return linear_shots(lo, hi, way)
    if kind == "step":
        assert n_min is not None
        return step_shots(lo, hi, way, n_min)
    return random_shots(lo, hi, way, rng)


@dataclass
class Task:
    """One sampled few-shot task.

    ``support[i]`` and ``query[i]`` hold the feature rows of class slot
    ``i``; ``class_map[i]`` is the global class id behind that slot. Slot
    order follows the shot generator, so slot 0 carries the smallest
    support count for linear and step distributions.
    """

    support: list[np.ndarray]
    query: list[np.ndarray]
    class_map: tuple[int, ...]
    feature_dim: int

    @property
    def way(self) -> int:
        return len(self.class_map)

    @property
    def shot_counts(self) -> tuple[int, ...]:
        return tuple(len(x) for x in self.support)

    @property
    def query_counts(self) -> tuple[int, ...]:
        return tuple(len(x) for x in self.query)

    def support_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked support rows and their slot labels, slot-major order."""
        x = np.concatenate(self.support, axis=0)
        y = np.repeat(np.arange(self.way), self.shot_counts)
        return x, y

    def query_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked query rows and their slot labels, slot-major order."""
        x = np.concatenate(self.query, axis=0)
        y = np.repeat(np.arange(self.way), self.query_counts)
        return x, y

    def replace_support(self, support: list[np.ndarray]) -> "Task":
        """New task with the same queries and classes but different support."""
        return Task(
            support=[np.asarray(s, dtype=np.float64) for s in support],
            query=self.query,
            class_map=self.class_map,
            feature_dim=self.feature_dim,
        )


def sample_task(
    split: Mapping[int, np.ndarray], spec: ImbalanceSpec, rng: np.random.Generator
) -> Task:
    """Draw one task from a split (mapping of class id to feature rows).

    Classes are chosen uniformly without replacement; within each chosen
    class, support and query rows are drawn uniformly without replacement
    so the two sets never share an example. Slot i of the shot vector
    binds to the i-th chosen class.
    """
    class_ids = sorted(split.keys())
    if len(class_ids) < spec.way:
        raise TaskSamplingError(
            f"split has {len(class_ids)} classes, need {spec.way}"
        )
    chosen = rng.choice(np.asarray(class_ids), size=spec.way, replace=False)
    shots = spec.support_shots(rng)
    queries = spec.query_shots(rng)

    support: list[np.ndarray] = []
    query: list[np.ndarray] = []
    for slot, cls in enumerate(int(c) for c in chosen):
        rows = split[cls]
        need = shots.counts[slot] + queries.counts[slot]
        if len(rows) < need:
            raise TaskSamplingError(
                f"class {cls} has {len(rows)} samples, task needs {need}"
            )
        picked = rng.choice(len(rows), size=need, replace=False)
        support.append(np.asarray(rows[picked[: shots.counts[slot]]], dtype=np.float64))
        query.append(np.asarray(rows[picked[shots.counts[slot] :]], dtype=np.float64))

    feature_dim = support[0].shape[1]
    return Task(support=support, query=query, class_map=tuple(int(c) for c in chosen),
                feature_dim=feature_dim)


def dump_task(task: Task, out: TextIO) -> None:
    """Write one task in the line format used by the dump-tasks command.

    Header line: ``way <n> feature_dim <d>``. Then one line per example:
    ``S(<slot>)`` or ``Q(<slot>)``, the global class id, and the feature
    values (repr floats, so parsing recovers them exactly).
    """
    out.write(f"way {task.way} feature_dim {task.feature_dim}\n")
    for role, sets in (("S", task.support), ("Q", task.query)):
        for slot, rows in enumerate(sets):
            cls = task.class_map[slot]
            for row in rows:
                values = " ".join(repr(float(v)) for v in row)
                out.write(f"{role}({slot}) {cls} {values}\n")


def parse_tasks(lines: Sequence[str]) -> list[Task]:
    """Parse the dump-tasks line format back into Task objects."""
    tasks: list[Task] = []
    i = 0
    n = len(lines)
    while i < n:
        line = lines[i].strip()
        if not line:
            i += 1
            continue
        head = line.split()
        if len(head) != 4 or head[0] != "way" or head[2] != "feature_dim":
            raise DataFormatError(f"line {i + 1}: expected task header, got {line!r}")
        way, dim = int(head[1]), int(head[3])
        i += 1
        support: dict[int, list[np.ndarray]] = {s: [] for s in range(way)}
        query: dict[int, list[np.ndarray]] = {s: [] for s in range(way)}
        class_map: dict[int, int] = {}
        while i < n:
            row = lines[i].strip()
            if not row or row.startswith("way "):
                break
            parts = row.split()
            role = parts[0]
            if not (role.startswith(("S(", "Q(")) and role.endswith(")")):
                raise DataFormatError(f"line {i + 1}: bad role field {role!r}")
            slot = int(role[2:-1])
            if slot >= way:
                raise DataFormatError(f"line {i + 1}: slot {slot} out of range for way {way}")
            cls = int(parts[1])
            values = np.array([float(v) for v in parts[2:]], dtype=np.float64)
            if len(values) != dim:
                raise DataFormatError(
                    f"line {i + 1}: expected {dim} feature values, got {len(values)}"
                )
            if class_map.setdefault(slot, cls) != cls:
                raise DataFormatError(f"line {i + 1}: slot {slot} maps to two class ids")
            (support if role[0] == "S" else query)[slot].append(values)
            i += 1
        missing = [s for s in range(way) if not support[s] or not query[s]]
        if missing:
            raise DataFormatError(f"task ending at line {i}: empty slots {missing}")
        tasks.append(
            Task(
                support=[np.stack(support[s]) for s in range(way)],
                query=[np.stack(query[s]) for s in range(way)],
                class_map=tuple(class_map[s] for s in range(way)),
                feature_dim=dim,
            )
        )
    return tasks
