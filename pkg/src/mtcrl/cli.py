"""Command-line entry points: dataset generation, training, the table-2 /
task-sweep / ablation experiment drivers, oracle checking, and model
diagnostics.  All subcommands take --config (JSON), --seed, and --out.

Exit codes: 0 success, 1 failed run (diagnostic JSON written), 2 usage or
configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, harness, oracles
from .data import (MnistPairSpec, SemSpec, gen_multisem, compose_multimnist,
                   write_batch_csv, write_container)
from .model import load_checkpoint, save_checkpoint


class UsageError(Exception):
    pass


def _load_json(path) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config_from_args(args) -> harness.TrainConfig:
    payload = _load_json(args.config)
    try:
        cfg = harness.config_from_dict(payload)
    except Exception as exc:
        raise UsageError(f"bad config: {exc}") from exc
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _write_rows_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def _dataset_spec_from_dict(payload: dict):
    payload = dict(payload)
    kind = payload.pop("kind", "multisem")
    if kind == "multisem":
        return SemSpec(**payload)
    if kind == "multimnist":
        if "ratios" in payload:
            payload["ratios"] = tuple(payload["ratios"])
        return MnistPairSpec(**payload)
    raise UsageError(f"unknown dataset kind '{kind}'")


def cmd_gen_data(args) -> int:
    payload = _load_json(args.config)
    spec = _dataset_spec_from_dict(payload.get("dataset", payload))
    if args.seed is not None:
        key = "seed" if isinstance(spec, SemSpec) else "split_seed"
        spec = replace(spec, **{key: args.seed})
    out = _out_dir(args)
    if isinstance(spec, SemSpec):
        batches = gen_multisem(spec)
    else:
        batches = compose_multimnist(spec)
    for batch in batches:
        write_container(out / f"{batch.env_id}.mtcrl", batch)
        write_batch_csv(out / f"{batch.env_id}.csv", batch)
    print(f"wrote {len(batches)} splits to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    out = _out_dir(args)
    report, bundle = harness.train(cfg, return_model=True)
    (out / "report.json").write_text(report.json())
    if bundle["kind"] == "mtl":
        save_checkpoint(out / "checkpoint.json", bundle["model"],
                        report.config_hash)
    else:
        for t, m in enumerate(bundle["models"]):
            save_checkpoint(out / f"checkpoint_task{t}.json", m,
                            report.config_hash)
    analysis.write_matrix_csv(out / "routing.csv", np.array(report.routing))
    print(f"acc_val={np.mean(report.acc_val):.4f} "
          f"rho_spur={np.mean(report.rho_spur):.4f} -> {out}")
    return 0


TABLE2_COLUMNS = ("method", "dataset", "acc_train", "acc_val", "rho_spur")


def cmd_table2(args) -> int:
    payload = _load_json(args.config)
    base = harness.config_from_dict(payload.get("base", {}))
    if args.seed is not None:
        base = replace(base, seed=args.seed)
    datasets = []
    for i, entry in enumerate(payload.get("datasets", [])):
        name = entry.pop("name", f"dataset{i}")
        datasets.append((name, _dataset_spec_from_dict(entry)))
    if not datasets:
        datasets = [("multisem", base.dataset)]
    out = _out_dir(args)
    result = harness.run_table2(base, datasets)
    _write_rows_csv(out / "table2.csv", result["rows"], TABLE2_COLUMNS)
    for row, rep in zip(result["rows"], result["reports"]):
        tag = f"{row['method']}_{row['dataset']}"
        analysis.write_matrix_csv(out / f"saliency_{tag}.csv",
                                  np.array(rep["saliency"]))
    print(f"wrote table2.csv with {len(result['rows'])} rows to {out}")
    return 0


def cmd_sweep_tasks(args) -> int:
    payload = _load_json(args.config)
    base = harness.config_from_dict(payload.get("base", {}))
    if args.seed is not None:
        base = replace(base, seed=args.seed)
    task_counts = payload.get("tasks", [2, 4, 6, 8])
    out = _out_dir(args)
    result = harness.run_task_sweep(task_counts, base)
    _write_rows_csv(out / "task_sweep.csv", result["rows"],
                    ("tasks", "mtl_acc_val", "mtl_rho_spur",
                     "stl_acc_val", "stl_rho_spur"))
    (out / "task_sweep_verdicts.json").write_text(
        json.dumps({"verdicts": result["verdicts"],
                    "spearman": result["spearman"]}, indent=1, sort_keys=True))
    print(f"verdicts: {result['verdicts']}")
    return 0


def cmd_ablate(args) -> int:
    payload = _load_json(args.config)
    base = harness.config_from_dict(payload.get("base", {}))
    seeds = payload.get("seeds", [0, 1, 2, 3, 4])
    variants = payload.get("variants")
    out = _out_dir(args)
    result = harness.run_ablation(base, seeds=seeds, variants=variants)
    rows = [{**r, "per_seed": json.dumps(r["per_seed"])}
            for r in result["rows"]]
    _write_rows_csv(out / "ablation.csv", rows,
                    ("variant", "acc_val_mean", "acc_val_std", "per_seed"))
    (out / "ablation_orderings.json").write_text(
        json.dumps(result["orderings"], indent=1, sort_keys=True))
    for row in result["rows"]:
        print(f"{row['variant']:14s} {row['acc_val_mean']:.4f} "
              f"+/- {row['acc_val_std']:.4f}")
    return 0


def cmd_oracle_check(args) -> int:
    out = _out_dir(args)
    rows = oracles.oracle_check(n_seeds=args.seeds)
    _write_rows_csv(out / "oracle_check.csv", rows,
                    ("check", "max_err", "tol", "passed"))
    all_pass = all(r["passed"] for r in rows)
    for r in rows:
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['check']:35s} "
              f"max_err={r['max_err']:.3e} tol={r['tol']:g}")
    return 0 if all_pass else 1


def cmd_analyze(args) -> int:
    cfg = _config_from_args(args)
    out = _out_dir(args)
    train_b, valid_b, test_b, tasks, kinds, head_out = harness._dataset_bundle(cfg)
    from .data import split_environments
    envs = split_environments(train_b, valid_b)
    model = harness._build_model(cfg, train_b.input_dim, tasks, kinds,
                                 head_out, seed_key=100)
    if args.checkpoint:
        if not os.path.exists(args.checkpoint):
            raise UsageError(f"checkpoint not found: {args.checkpoint}")
        load_checkpoint(args.checkpoint, model)
    saliency = np.array([analysis.factor_gradient(model, t, valid_b)
                         for t in range(tasks)])
    analysis.write_matrix_csv(out / "saliency.csv", saliency,
                              row_labels=[f"task{t}" for t in range(tasks)])
    rho = {t: analysis.spurious_score(saliency[t], valid_b.causal_masks[t])
           for t in range(tasks)}
    grads = analysis.task_module_gradients(model, envs)
    for env_id, table in grads.per_env.items():
        analysis.write_matrix_csv(out / f"task_module_grad_{env_id}.csv", table)
    analysis.write_matrix_csv(out / "task_module_grad_diff.csv", grads.diff)
    heat = analysis.module_corr_heatmap(model, valid_b)
    analysis.write_matrix_csv(out / "module_corr.csv", heat.matrix)
    sim = analysis.task_similarity(model.routing.matrix(),
                                   threshold=args.threshold)
    analysis.write_matrix_csv(out / "similarity.csv", sim.matrix)
    if args.svg:
        analysis.svg_heatmap(out / "module_corr.svg", heat.matrix,
                             boundaries=heat.block_boundaries)
        analysis.svg_heatmap(out / "saliency.svg", saliency)
    (out / "analyze_summary.json").write_text(json.dumps({
        "rho_spur": {str(t): rho[t] for t in rho},
        "max_cross_module_corr": heat.max_cross_block(),
        "diff_envs": list(grads.diff_envs),
    }, indent=1, sort_keys=True))
    print(f"rho_spur={ {t: round(v, 4) for t, v in rho.items()} } -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtcrl",
        description="Disentangled multi-task learning with invariant "
                    "task-to-module routing: experiments and diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required,
                       help="JSON config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default="results",
                       help="output directory (created if missing)")

    common(sub.add_parser("gen-data", help="generate and export a dataset"),
           config_required=True)
    common(sub.add_parser("train", help="run one training config"),
           config_required=True)
    common(sub.add_parser("table2", help="STL vs vanilla-MTL comparison"))
    common(sub.add_parser("sweep-tasks", help="task-count scaling trends"))
    common(sub.add_parser("ablate", help="regularizer ablation table"))

    p = sub.add_parser("oracle-check",
                       help="closed-form vs numerical oracle equivalences")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--out", default="results")

    p = sub.add_parser("analyze", help="diagnostics for a trained model")
    common(p, config_required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--threshold", type=float, default=0.1,
                   help="similarity-graph edge threshold")
    p.add_argument("--svg", action="store_true", help="also write SVG heatmaps")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "table2": cmd_table2,
    "sweep-tasks": cmd_sweep_tasks,
    "ablate": cmd_ablate,
    "oracle-check": cmd_oracle_check,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # failed run: diagnostic JSON, exit 1
        diag = {
            "error": str(exc),
            "type": type(exc).__name__,
            "traceback": traceback.format_exc(),
        }
        try:
            out = _out_dir(args)
            (out / "diagnostic.json").write_text(json.dumps(diag, indent=1))
        except OSError:
            pass
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
