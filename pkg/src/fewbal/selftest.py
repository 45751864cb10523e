"""Quick built-in consistency checks, runnable via `fewbal selftest`.

Each check returns (name, ok, detail). These are fast spot checks, not the
full test suite; they cover the invariants that matter most when the package
is dropped onto a new machine.
"""

from __future__ import annotations

import numpy as np

from fewbal.data import SyntheticSpec, generate_synthetic
from fewbal.gradcheck import max_rel_grad_error
from fewbal.learners.metric import predict_protonet
from fewbal.metrics import balanced_vs_imbalanced_delta, ci95
from fewbal.nn import (
    Encoder,
    EncoderConfig,
    LossConfig,
    batch_loss,
    ce_loss,
    focal_loss,
    weighted_ce_loss,
)
from fewbal.rebalance import ros, ros_plus
from fewbal.tasks import ImbalanceSpec, imbalance_ratio, linear_shots, sample_task, step_shots

Check = tuple[str, bool, str]


def _check_shots() -> Check:
    cases = [
        ((1, 9, 5), (1, 3, 5, 7, 9)),
        ((4, 6, 5), (4, 4, 5, 6, 6)),
        ((5, 5, 5), (5, 5, 5, 5, 5)),
        ((1, 5, 3), (1, 3, 5)),
    ]
    for (k_min, k_max, way), want in cases:
        got = linear_shots(k_min, k_max, way).counts
        if got != want:
            return ("shot-exactness", False, f"linear{(k_min, k_max, way)} gave {got}")
    got = step_shots(1, 9, 5, 1).counts
    if got != (1, 9, 9, 9, 9):
        return ("shot-exactness", False, f"step(1,9,5,1) gave {got}")
    ratios = (imbalance_ratio(linear_shots(1, 9, 5)), imbalance_ratio(linear_shots(4, 6, 5)))
    if ratios != (9.0, 1.5):
        return ("shot-exactness", False, f"ratios {ratios}")
    return ("shot-exactness", True, "linear/step counts and ratios match")


def _check_gradients() -> Check:
    rng = np.random.default_rng(7)
    cfg = EncoderConfig(input_dim=6, hidden=(8,), embed_dim=5)
    enc = Encoder(cfg, rng)
    x = rng.normal(size=(4, 6))
    labels = np.array([0, 1, 2, 0])
    worst = 0.0
    for loss_cfg in (LossConfig("ce"), LossConfig("focal", focal_gamma=2.0)):
        def loss_fn() -> float:
            e = enc.forward(x)
            return batch_loss(e[:, :3], labels, loss_cfg)[0]

        def backward_fn() -> None:
            e = enc.forward(x)
            _, dlogits = batch_loss(e[:, :3], labels, loss_cfg)
            de = np.zeros_like(e)
            de[:, :3] = dlogits
            enc.backward(de)

        worst = max(worst, max_rel_grad_error(loss_fn, backward_fn, enc.params()))
    ok = worst < 1e-4
    return ("gradient-check", ok, f"max rel err {worst:.2e}")


def _check_oracle_equivalence() -> Check:
    ds = generate_synthetic(SyntheticSpec(classes_per_split=(12, 6, 8),
                                          samples_per_class=40, feature_dim=8, seed=3))
    spec = ImbalanceSpec(kind="linear", k_min=1, k_max=9, way=5)
    enc = Encoder(EncoderConfig(input_dim=8, hidden=(10,), embed_dim=6),
                  np.random.default_rng(11))
    for t in range(200):
        rng = np.random.default_rng(1000 + t)
        task = sample_task(ds.splits["test"], spec, rng)
        fast, _ = predict_protonet(enc, task)
        # Oracle: per-query loop over explicit class means.
        xs, ys = task.support_matrix()
        xq, _ = task.query_matrix()
        es = enc.forward(xs)
        eq = enc.forward(xq)
        slow = np.empty(len(eq), dtype=int)
        means = np.stack([es[ys == c].mean(axis=0) for c in range(task.way)])
        for i, q in enumerate(eq):
            slow[i] = int(np.argmin(((means - q) ** 2).sum(axis=1)))
        if not np.array_equal(fast, slow):
            return ("oracle-equivalence", False, f"mismatch at task {t}")
    return ("oracle-equivalence", True, "prototype argmax matches loop oracle on 200 tasks")


def _check_trivial_reductions() -> Check:
    rng = np.random.default_rng(5)
    logits = rng.normal(size=7)
    l_ce, g_ce = ce_loss(logits, 3)
    l_f, g_f = focal_loss(logits, 3, gamma=0.0, alpha=1.0)
    if l_f != l_ce or not np.array_equal(g_f, g_ce):
        return ("trivial-reductions", False, "focal(0,1) != ce")
    counts = np.array([4, 4, 4, 4, 4, 4, 4])
    l_w, g_w = weighted_ce_loss(logits, 3, counts)
    if l_w != l_ce or not np.array_equal(g_w, g_ce):
        return ("trivial-reductions", False, "balanced weighted ce != ce")
    support = [rng.normal(size=(2, 4)), rng.normal(size=(5, 4))]
    a = ros_plus(support, 0.0, np.random.default_rng(21))
    b = ros(support, np.random.default_rng(21))
    if not all(np.array_equal(x, y) for x, y in zip(a, b)):
        return ("trivial-reductions", False, "ros_plus(sigma=0) != ros")
    return ("trivial-reductions", True, "focal/weighted/ros_plus reductions exact")


def _check_ros_invariants() -> Check:
    rng = np.random.default_rng(9)
    for trial in range(200):
        sizes = rng.integers(1, 10, size=4)
        support = [rng.normal(size=(int(n), 3)) for n in sizes]
        out = ros(support, rng)
        k_max = max(int(n) for n in sizes)
        for c, rows in enumerate(support):
            got = out[c]
            if len(got) != k_max:
                return ("ros-invariants", False, f"trial {trial}: class {c} size {len(got)}")
            if not np.array_equal(got[: len(rows)], rows):
                return ("ros-invariants", False, f"trial {trial}: originals not preserved")
            pool = {tuple(r) for r in rows}
            if any(tuple(r) not in pool for r in got[len(rows):]):
                return ("ros-invariants", False, f"trial {trial}: resample left the class")
    return ("ros-invariants", True, "sizes, prefixes and membership hold on 200 trials")


def _check_metrics() -> Check:
    rng = np.random.default_rng(13)
    values = rng.normal(loc=0.6, scale=0.05, size=400)
    mean, half = ci95(values)
    if not (abs(mean - values.mean()) < 1e-12 and 0.0 < half < 0.02):
        return ("metrics", False, f"ci95 gave ({mean}, {half})")
    abs_d, rel_d = balanced_vs_imbalanced_delta(60.59, 58.30)
    if abs(abs_d - (-2.29)) > 1e-3 or abs(rel_d - (-0.03779)) > 1e-3:
        return ("metrics", False, f"delta gave ({abs_d}, {rel_d})")
    return ("metrics", True, "ci95 and delta arithmetic verified")


def run_selftest() -> list[Check]:
    return [
        _check_shots(),
        _check_gradients(),
        _check_oracle_equivalence(),
        _check_trivial_reductions(),
        _check_ros_invariants(),
        _check_metrics(),
    ]
