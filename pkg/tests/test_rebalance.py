import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewbal.errors import InvalidSpecError
from fewbal.nn import LossConfig
from fewbal.rebalance import (
    DEFAULT_SIGMA_AUG,
    PRESETS,
    Strategy,
    get_strategy,
    rebalance_task,
    ros,
    ros_plus,
    training_spec,
)
from fewbal.tasks import ImbalanceSpec, sample_task


def _support(rng, sizes, dim=3):
    return [rng.normal(size=(n, dim)) for n in sizes]


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000),
       sizes=st.lists(st.integers(1, 12), min_size=2, max_size=8))
def test_ros_invariants(seed, sizes):
    rng = np.random.default_rng(seed)
    support = _support(rng, sizes)
    out = ros(support, rng)
    k_max = max(sizes)
    for rows, padded in zip(support, out):
        assert len(padded) == k_max
        # originals survive untouched as the prefix
        np.testing.assert_array_equal(padded[: len(rows)], rows)
        # appended rows are copies of rows from the same class
        pool = {tuple(r) for r in rows}
        for r in padded[len(rows):]:
            assert tuple(r) in pool


def test_ros_majority_class_is_copied_not_aliased():
    rng = np.random.default_rng(0)
    support = _support(rng, [2, 5])
    out = ros(support, rng)
    out[1][0, 0] = 999.0
    assert support[1][0, 0] != 999.0


def test_ros_plus_noise_only_on_duplicates():
    rng = np.random.default_rng(1)
    support = _support(rng, [2, 6], dim=4)
    out = ros_plus(support, 0.5, np.random.default_rng(2))
    np.testing.assert_array_equal(out[0][:2], support[0])
    np.testing.assert_array_equal(out[1], support[1])
    # the four appended rows differ from every original by the noise
    originals = {tuple(r) for r in support[0]}
    for r in out[0][2:]:
        assert tuple(r) not in originals


def test_ros_plus_sigma_zero_equals_ros_exactly():
    rng = np.random.default_rng(3)
    for sizes in ([1, 9], [3, 3, 7], [2, 5, 5, 8]):
        support = _support(rng, sizes)
        a = ros_plus(support, 0.0, np.random.default_rng(42))
        b = ros(support, np.random.default_rng(42))
        for x, y in zip(a, b):
            assert np.array_equal(x, y)


def test_ros_plus_noise_magnitude():
    rng = np.random.default_rng(4)
    support = _support(rng, [1, 400], dim=2)
    out = ros_plus(support, 0.25, np.random.default_rng(5))
    noise = out[0][1:] - support[0][0]
    assert abs(noise.std() - 0.25) < 0.02


def test_ros_rejects_empty_class():
    with pytest.raises(InvalidSpecError):
        ros([np.zeros((0, 3)), np.ones((2, 3))], np.random.default_rng(0))
    with pytest.raises(InvalidSpecError):
        ros_plus([], 0.1, np.random.default_rng(0))
    with pytest.raises(InvalidSpecError):
        ros_plus([np.ones((2, 3))], -0.1, np.random.default_rng(0))


def test_rebalance_task_modes(small_dataset):
    spec = ImbalanceSpec(kind="linear", k_min=1, k_max=9, way=5)
    task = sample_task(small_dataset.splits["test"], spec, np.random.default_rng(6))
    same = rebalance_task(task, "none", 0.1, np.random.default_rng(0))
    assert same is task
    padded = rebalance_task(task, "ros", 0.1, np.random.default_rng(0))
    assert padded.shot_counts == (9, 9, 9, 9, 9)
    assert padded.class_map == task.class_map
    for a, b in zip(padded.query, task.query):
        np.testing.assert_array_equal(a, b)
    noisy = rebalance_task(task, "ros_plus", 0.1, np.random.default_rng(0))
    assert noisy.shot_counts == (9, 9, 9, 9, 9)
    with pytest.raises(InvalidSpecError):
        rebalance_task(task, "smote", 0.1, np.random.default_rng(0))


def test_preset_table():
    assert set(PRESETS) == {
        "standard",
        "standard-rosplus-infer",
        "random-shot",
        "random-shot-ros",
        "random-shot-rosplus",
        "random-shot-ros-rosplus-infer",
    }
    std = PRESETS["standard"]
    assert (std.train_mode, std.train_rebalance, std.infer_rebalance) == (
        "standard", "none", "none")
    assert std.infer_loss == LossConfig()
    assert std.sigma_aug == DEFAULT_SIGMA_AUG

    infer = PRESETS["standard-rosplus-infer"]
    assert (infer.train_mode, infer.train_rebalance, infer.infer_rebalance) == (
        "standard", "none", "ros_plus")

    full = PRESETS["random-shot-ros-rosplus-infer"]
    assert (full.train_mode, full.train_rebalance, full.infer_rebalance) == (
        "random_shot", "ros", "ros_plus")


def test_get_strategy_sigma_override():
    s = get_strategy("random-shot-rosplus", sigma_aug=0.3)
    assert s.sigma_aug == 0.3
    assert PRESETS["random-shot-rosplus"].sigma_aug == DEFAULT_SIGMA_AUG
    with pytest.raises(InvalidSpecError, match="unknown strategy"):
        get_strategy("mystery")


def test_strategy_validation():
    with pytest.raises(InvalidSpecError):
        Strategy(name="x", train_mode="sometimes")
    with pytest.raises(InvalidSpecError):
        Strategy(name="x", infer_rebalance="smote")
    with pytest.raises(InvalidSpecError):
        Strategy(name="x", sigma_aug=-1.0)


def test_training_spec_follows_mode():
    balanced = training_spec(PRESETS["standard"])
    assert balanced.kind == "balanced" and balanced.k_min == 5
    random = training_spec(PRESETS["random-shot-ros"])
    assert random.kind == "random" and (random.k_min, random.k_max) == (1, 9)
