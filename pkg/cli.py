#!/usr/bin/env python3
"""
Command line entry point.

    meda generate --config exp.json --out data.tsv
    meda train --config exp.json [--seed N] [--out DIR] [--k K] [--resume CKPT]
    meda train --grid a.json b.json [--workers N]
    meda eval --config exp.json --checkpoint DIR [--bank R]
    meda diff-params CKPT_A CKPT_B [--source mlp|bank:R]
    meda report runs/*/metrics.csv [--out summary.csv] [--by-variant]

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd

from config import LOG_LEVEL, load_experiment_config
from data import add_random_negatives, generate_synthetic, write_log_tsv
from errors import ConfigError, MedaError
from main import ExperimentRunner, aggregate_by_variant, build_report, diff_checkpoints, run_batch_jobs

logger = logging.getLogger(__name__)


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {
        "run.base_seed": getattr(args, "seed", None),
        "run.output_dir": getattr(args, "out", None),
        "run.k": getattr(args, "k", None),
        "data.neg_per_pos": getattr(args, "neg_per_pos", None),
        "run.progress": True if getattr(args, "progress", False) else None,
    }


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = load_experiment_config(args.config, {"data.synthetic.seed": args.seed})
    if cfg.data.source != "synthetic":
        raise ConfigError("generate needs data.source = 'synthetic'")
    ds = generate_synthetic(cfg.data.synthetic)
    if cfg.data.neg_per_pos:
        ds = add_random_negatives(ds, cfg.data.neg_per_pos, cfg.data.subsample_seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_log_tsv(ds, out)
    print(f"Wrote {len(ds)} samples (positive rate {ds.positive_rate():.4f}) to {out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    overrides = _overrides(args)
    if args.grid:
        results = run_batch_jobs(args.grid, overrides, max_workers=args.workers)
        failed = [r for r in results if "error" in r]
        for r in results:
            status = f"FAILED ({r['error']})" if "error" in r else f"best AUC {r['best_auc']}"
            print(f"{r.get('config')}: {status}")
        return max((r["exit_code"] for r in failed), default=0)
    if not args.config:
        raise ConfigError("train needs --config (or --grid)")
    runner = ExperimentRunner.from_file(args.config, overrides)
    summary = runner.run(resume_from=args.resume)
    runner.export_results(summary)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    runner = ExperimentRunner.from_file(args.config, _overrides(args))
    result = runner.evaluate_checkpoint(args.checkpoint, bank_id=args.bank)
    print(json.dumps(result, indent=2))
    return 0


def cmd_diff_params(args: argparse.Namespace) -> int:
    result = diff_checkpoints(args.ckpt_a, args.ckpt_b, args.source)
    print(f"source {result['source']}: cosine {result['cosine']:.6f}, l2 {result['l2']:.6f}")
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2) + "\n")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    table = build_report(args.csv)
    if args.by_variant:
        table = aggregate_by_variant(table)
    with pd.option_context("display.width", 160, "display.max_columns", None):
        print(table.to_string(index=False, float_format=lambda v: f"{v:.6f}"))
    if args.out:
        table.to_csv(args.out, index=False, float_format="%.6f", lineterminator="\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meda", description="Multi-epoch CTR training with per-epoch embedding reinitialization")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("generate", help="write a synthetic CTR log as TSV")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True, help="output TSV path")
    g.add_argument("--seed", type=int, default=None, help="override data.synthetic.seed")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run one experiment config (or a grid of them)")
    t.add_argument("--config")
    t.add_argument("--seed", type=int, default=None, help="override run.base_seed")
    t.add_argument("--out", default=None, help="override run.output_dir")
    t.add_argument("--k", type=int, default=None, help="override run.k")
    t.add_argument("--neg-per-pos", dest="neg_per_pos", type=int, default=None)
    t.add_argument("--resume", default=None, help="pass checkpoint to resume from")
    t.add_argument("--grid", nargs="+", default=None, help="config files run as separate processes")
    t.add_argument("--workers", type=int, default=4)
    t.add_argument("--progress", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on the configured test split")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--bank", type=int, default=None)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("diff-params", help="cosine similarity and l2 distance between two checkpoints")
    d.add_argument("ckpt_a")
    d.add_argument("ckpt_b")
    d.add_argument("--source", default="mlp", help="mlp or bank:<r>")
    d.add_argument("--out", default=None, help="also write the result as JSON")
    d.set_defaults(func=cmd_diff_params)

    r = sub.add_parser("report", help="aggregate metrics CSVs")
    r.add_argument("csv", nargs="+")
    r.add_argument("--out", default=None, help="write the table as CSV")
    r.add_argument("--by-variant", dest="by_variant", action="store_true", help="one row per variant (mean and std over runs)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(
        level=getattr(logging, LOG_LEVEL.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MedaError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
