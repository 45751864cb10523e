"""Command-line front end: data generation, grid runs, reports."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from fewbal.config import (
    ExperimentConfig,
    adaptation_for,
    build_dataset,
    cell_seed,
    config_from_dict,
    encoder_config,
    load_config,
)
from fewbal.data import baseline_pretrain_split, generate_synthetic, save_features
from fewbal.errors import DataFormatError, InvalidSpecError
from fewbal.learners import build_learner
from fewbal.metrics import (
    TaskScores,
    aggregate_runs,
    balanced_vs_imbalanced_delta,
    record_to_json,
    summarize,
)
from fewbal.protocol import (
    evaluate,
    load_learner_checkpoint,
    meta_train,
    pretrain,
    save_learner_checkpoint,
)
from fewbal.rebalance import get_strategy
from fewbal.seeding import mix64
from fewbal.tasks import dump_task, sample_task


def _atomic_write(path: Path, text: str) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _cell_dir(cfg: ExperimentConfig, kind: str, strategy: str, seed: int) -> Path:
    return Path(cfg.output_dir) / f"{kind}__{strategy}__s{seed}"


def _train_cell(cfg: ExperimentConfig, kind: str, strategy_name: str, seed: int,
                force: bool) -> str:
    out = _cell_dir(cfg, kind, strategy_name, seed)
    ckpt = out / "best.ckpt"
    if ckpt.exists() and not force:
        return "kept"
    ds = build_dataset(cfg, seed)
    cseed = cell_seed(seed, kind, strategy_name)
    strategy = get_strategy(strategy_name, cfg.sigma_aug)
    learner = build_learner(
        kind,
        encoder_config(cfg, ds.feature_dim),
        np.random.default_rng(mix64(cseed, "init")),
        adaptation_for(cfg, kind),
    )
    if learner.needs_pretrain:
        pre, hold = baseline_pretrain_split(ds, seed=cfg.dataset_seed)
        run = pretrain(learner, pre, hold, cfg.schedule, seed=cseed)
    else:
        run = meta_train(learner, ds, strategy, cfg.schedule, seed=cseed)

    echo = {
        "experiment": cfg.raw,
        "cell": {"learner": kind, "strategy": strategy_name, "seed": seed,
                 "cell_seed": cseed},
    }
    _atomic_write(out / "config.json", json.dumps(echo, indent=2, sort_keys=True) + "\n")
    log_lines = ["point,split,accuracy"]
    log_lines += [f"{point},{split},{acc!r}" for point, split, acc in run.log]
    _atomic_write(out / "log.csv", "\n".join(log_lines) + "\n")
    tmp_ckpt = out / ".best.ckpt.tmp"
    save_learner_checkpoint(str(tmp_ckpt), run.learner)
    os.replace(tmp_ckpt, ckpt)
    return "trained"


def _scores_to_csv(scores: TaskScores) -> str:
    header = ["task_index", "task_seed", "accuracy", "macro_f1"]
    way = 0
    if scores.slot_precision is not None:
        way = scores.slot_precision.shape[1]
        for slot in range(way):
            k = scores.shot_counts[slot]
            header += [f"slot{slot}_k{k}_precision", f"slot{slot}_k{k}_recall"]
    lines = [",".join(header)]
    for i in range(scores.n_tasks):
        row = [str(i), str(scores.task_seeds[i]),
               repr(float(scores.accuracies[i])), repr(float(scores.macro_f1s[i]))]
        for slot in range(way):
            row.append(repr(float(scores.slot_precision[i, slot])))
            row.append(repr(float(scores.slot_recall[i, slot])))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def _evaluate_cell(cfg: ExperimentConfig, kind: str, strategy_name: str, seed: int,
                   force: bool) -> str:
    out = _cell_dir(cfg, kind, strategy_name, seed)
    summary_path = out / "summary.json"
    if summary_path.exists() and not force:
        return "kept"
    ckpt = out / "best.ckpt"
    if not ckpt.exists():
        raise InvalidSpecError(f"{out} has no best.ckpt; train it first")
    learner = load_learner_checkpoint(str(ckpt))
    ds = build_dataset(cfg, seed)
    strategy = get_strategy(strategy_name, cfg.sigma_aug)
    scores = evaluate(learner, ds, strategy, cfg.eval.specs, cfg.eval.n_tasks, cfg.eval.seed)
    for s in scores:
        _atomic_write(out / "results" / f"{s.spec_name}.csv", _scores_to_csv(s))
    summary = {
        "learner": kind,
        "strategy": strategy_name,
        "seed": seed,
        "n_eval_tasks": cfg.eval.n_tasks,
        "specs": [record_to_json(summarize(s)) for s in scores],
    }
    _atomic_write(summary_path, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return "evaluated"


def run_cell(cfg_doc: dict, kind: str, strategy_name: str, seed: int,
             force: bool, train_only: bool = False) -> dict:
    """One grid cell, safe to run in a worker process."""
    name = f"{kind}__{strategy_name}__s{seed}"
    try:
        cfg = config_from_dict(cfg_doc)
        trained = _train_cell(cfg, kind, strategy_name, seed, force)
        status = {"cell": name, "train": trained}
        if not train_only:
            status["eval"] = _evaluate_cell(cfg, kind, strategy_name, seed, force)
        return status
    except Exception as exc:  # reported per cell, never aborts the grid
        return {"cell": name, "error": f"{type(exc).__name__}: {exc}"}


def _grid(cfg: ExperimentConfig) -> list[tuple[str, str, int]]:
    return [
        (kind, strategy, seed)
        for kind, _ in cfg.learners
        for strategy in cfg.strategies
        for seed in cfg.seeds
    ]


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seeds[:] = [args.seed]
        cfg.raw["seeds"] = [args.seed]
    cells = _grid(cfg)
    results = []
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            futures = [
                pool.submit(run_cell, cfg.raw, kind, strategy, seed, args.force)
                for kind, strategy, seed in cells
            ]
            results = [f.result() for f in futures]
    else:
        for kind, strategy, seed in cells:
            results.append(run_cell(cfg.raw, kind, strategy, seed, args.force))
    failed = 0
    for res in results:
        if "error" in res:
            failed += 1
            print(f"[fail] {res['cell']}: {res['error']}")
        else:
            print(f"[ok]   {res['cell']}: train={res['train']} eval={res.get('eval', '-')}")
    print(f"{len(results) - failed}/{len(results)} cells complete")
    return 2 if failed else 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    failed = 0
    for kind, strategy, seed in _grid(cfg):
        name = f"{kind}__{strategy}__s{seed}"
        try:
            status = _evaluate_cell(cfg, kind, strategy, seed, args.force)
            print(f"[ok]   {name}: {status}")
        except Exception as exc:
            failed += 1
            print(f"[fail] {name}: {type(exc).__name__}: {exc}")
    return 2 if failed else 0


def _read_scores_csv(path: Path, spec_name: str, rho: float,
                     counts: tuple[int, ...] | None) -> TaskScores:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    if not rows:
        raise DataFormatError(f"{path}: no task rows")
    slot_cols = [c for c in rows[0] if c.endswith("_precision")]
    accs = np.array([float(r["accuracy"]) for r in rows])
    f1s = np.array([float(r["macro_f1"]) for r in rows])
    seeds = [int(r["task_seed"]) for r in rows]
    slot_p = slot_r = None
    if slot_cols:
        slot_p = np.array(
            [[float(r[c]) for c in slot_cols] for r in rows]
        )
        slot_r = np.array(
            [[float(r[c.replace("_precision", "_recall")]) for c in slot_cols] for r in rows]
        )
    return TaskScores(
        spec_name=spec_name, rho=rho, shot_counts=counts,
        accuracies=accs, macro_f1s=f1s,
        slot_precision=slot_p, slot_recall=slot_r, task_seeds=seeds,
    )


def cmd_report(args: argparse.Namespace) -> int:
    """Aggregate task-level CSVs across seeds; deltas come from pooled
    task accuracies, never from rounded summaries."""
    cfg = load_config(args.config)
    report_dir = Path(cfg.output_dir) / "report"
    balanced_name = cfg.eval.balanced_name()
    rows = []
    per_slot_rows: dict[str, list[dict]] = {}
    pooled_means: dict[tuple[str, str, str], float] = {}
    for kind, _ in cfg.learners:
        for strategy in cfg.strategies:
            for spec_name, spec in cfg.eval.specs:
                runs = []
                for seed in cfg.seeds:
                    path = _cell_dir(cfg, kind, strategy, seed) / "results" / f"{spec_name}.csv"
                    if not path.exists():
                        continue
                    counts = (
                        spec.support_shots(np.random.default_rng(0)).counts
                        if spec.deterministic_support else None
                    )
                    runs.append(_read_scores_csv(path, spec_name, spec.rho, counts))
                if not runs:
                    continue
                record = aggregate_runs(runs)
                pooled_means[(kind, strategy, spec_name)] = record.accuracy_mean
                rows.append({
                    "learner": kind, "strategy": strategy, "spec": spec_name,
                    "rho": record.rho, "n_tasks": record.n_tasks,
                    "accuracy_mean": record.accuracy_mean,
                    "accuracy_ci95": record.accuracy_ci95,
                    "macro_f1_mean": record.macro_f1_mean,
                    "macro_f1_ci95": record.macro_f1_ci95,
                })
                for slot_index, slot in enumerate(record.per_slot):
                    per_slot_rows.setdefault(spec_name, []).append({
                        "learner": kind, "strategy": strategy, "slot": slot_index,
                        "k": slot.k,
                        "precision_mean": slot.precision_mean,
                        "precision_ci95": slot.precision_ci95,
                        "recall_mean": slot.recall_mean,
                        "recall_ci95": slot.recall_ci95,
                    })
    if not rows:
        print("no evaluated cells found; run the grid first")
        return 2

    delta_rows = []
    for (kind, strategy, spec_name), mean in sorted(pooled_means.items()):
        if spec_name == balanced_name:
            continue
        key = (kind, strategy, balanced_name)
        if key not in pooled_means:
            continue
        abs_delta, rel_delta = balanced_vs_imbalanced_delta(pooled_means[key], mean)
        delta_rows.append({
            "learner": kind, "strategy": strategy, "spec": spec_name,
            "balanced_spec": balanced_name,
            "abs_delta": abs_delta, "rel_delta": rel_delta,
        })

    _atomic_write(report_dir / "accuracy.csv", _dicts_to_csv(rows))
    _atomic_write(report_dir / "deltas.csv", _dicts_to_csv(delta_rows))
    for spec_name, slot_rows in per_slot_rows.items():
        _atomic_write(report_dir / f"per_slot_{spec_name}.csv", _dicts_to_csv(slot_rows))
    _atomic_write(
        report_dir / "report.json",
        json.dumps(
            {"accuracy": rows, "deltas": delta_rows, "per_slot": per_slot_rows},
            indent=2, sort_keys=True,
        ) + "\n",
    )
    _atomic_write(report_dir / "report.txt", _render_text_report(rows, delta_rows))
    print(f"report written to {report_dir}")
    return 0


def _dicts_to_csv(rows: list[dict]) -> str:
    if not rows:
        return "\n"
    header = list(rows[0])
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_csv_value(row[k]) for k in header))
    return "\n".join(lines) + "\n"


def _csv_value(v: object) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _render_text_report(rows: list[dict], delta_rows: list[dict]) -> str:
    out = ["accuracy (mean +- ci95 over pooled tasks)", ""]
    for row in rows:
        out.append(
            f"  {row['learner']:<12} {row['strategy']:<28} {row['spec']:<20} "
            f"{100 * row['accuracy_mean']:6.2f} +- {100 * row['accuracy_ci95']:4.2f}"
        )
    out += ["", "deltas vs balanced reference", ""]
    for row in delta_rows:
        out.append(
            f"  {row['learner']:<12} {row['strategy']:<28} {row['spec']:<20} "
            f"abs {100 * row['abs_delta']:+6.2f}  rel {100 * row['rel_delta']:+6.2f}%"
        )
    return "\n".join(out) + "\n"


def cmd_generate_data(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if cfg.synthetic is None:
        raise InvalidSpecError("config uses csv_path; nothing to generate")
    spec = cfg.synthetic
    if args.seed is not None:
        spec = type(spec)(**{**spec.__dict__, "seed": args.seed})
    ds = generate_synthetic(spec)
    save_features(ds, args.out)
    n = sum(len(rows) for split in ds.splits.values() for rows in split.values())
    print(f"wrote {n} rows to {args.out}")
    return 0


def cmd_dump_tasks(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    spec_name = args.spec or cfg.eval.specs[0][0]
    spec = cfg.eval.spec_named(spec_name)
    ds = build_dataset(cfg, args.seed)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for index in range(args.n):
            rng = np.random.default_rng(mix64(args.seed, "dump", spec_name, index))
            dump_task(sample_task(ds.splits[args.split], spec, rng), out)
    finally:
        if args.out:
            out.close()
    return 0


def cmd_selftest(_args: argparse.Namespace) -> int:
    from fewbal.selftest import run_selftest

    checks = run_selftest()
    failed = 0
    for name, ok, detail in checks:
        mark = "PASS" if ok else "FAIL"
        failed += 0 if ok else 1
        print(f"[{mark}] {name}: {detail}")
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 2 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewbal",
        description="class-imbalanced few-shot learning experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write the configured synthetic dataset to CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the dataset seed")
    p.set_defaults(fn=cmd_generate_data)

    p = sub.add_parser("run", help="train and evaluate the full grid")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--force", action="store_true", help="retrain finished cells")
    p.add_argument("--seed", type=int, default=None, help="replace the seed list")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("evaluate", help="evaluate trained cells")
    p.add_argument("--config", required=True)
    p.add_argument("--force", action="store_true", help="re-evaluate finished cells")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("report", help="aggregate task-level results across seeds")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("dump-tasks", help="print sampled tasks in the text format")
    p.add_argument("--config", required=True)
    p.add_argument("--spec", default=None, help="eval spec name (default: first)")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_dump_tasks)

    p = sub.add_parser("selftest", help="run built-in consistency checks")
    p.set_defaults(fn=cmd_selftest)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (InvalidSpecError, DataFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
