#!/usr/bin/env python3
"""
Experiment runner: loads data per an ExperimentConfig, dispatches to the
training schedules, writes metrics, loss curves and checkpoints, and prints
the run summary.
"""

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd

from config import (
    ExperimentConfig,
    get_config,
    load_experiment_config,
    validate_config,
)
from data import (
    Dataset,
    add_random_negatives,
    cached_synthetic,
    read_log_tsv,
    split_chronological,
    split_continual,
    subsample,
)
from errors import ConfigError, MedaError, MetricError
from meda import (
    RunResult,
    RunState,
    Schedule,
    TrainSettings,
    build_plan,
    evaluate,
    run_direct,
    run_meda_c,
    run_meda_nc,
    run_variant,
    uses_continual_data,
)
from metrics import MetricRecord, ParamSnapshot, param_cosine, param_l2
from persist import (
    load_checkpoint,
    load_run_state,
    read_manifest,
    read_metrics_csv,
    save_checkpoint,
    save_run_state,
    write_loss_curve_csv,
    write_metrics_csv,
)

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
LOSS_CURVE_FILE = "loss_curve.csv"
CONFIG_ECHO_FILE = "config.json"
SUMMARY_FILE = "summary.json"
FINAL_CHECKPOINT = "checkpoint"


class ExperimentRunner:
    def __init__(self, cfg: ExperimentConfig, cache_dir: Optional[str] = None):
        self.env = get_config()
        if not validate_config():
            raise ConfigError("Invalid environment configuration. Please check the MEDA_* variables.")
        self.cfg = cfg
        self.cache_dir = cache_dir or self.env["cache_dir"]
        self.output_dir = Path(cfg.run.output_dir)

    @classmethod
    def from_file(cls, path: str, overrides: Optional[Dict[str, Any]] = None) -> "ExperimentRunner":
        return cls(load_experiment_config(path, overrides))

    # ------------------------------------------------------------------ #
    # Data
    # ------------------------------------------------------------------ #
    def load_dataset(self) -> Dataset:
        data = self.cfg.data
        if data.source == "synthetic":
            ds = cached_synthetic(data.synthetic, self.cache_dir)
        else:
            ds = read_log_tsv(data.train_path, max_seq_len=data.max_seq_len)
        if data.neg_per_pos:
            ds = add_random_negatives(ds, data.neg_per_pos, data.subsample_seed)
        return ds

    def load_data(self) -> Tuple[List[Dataset], Dataset]:
        """Train sub-datasets (one, or T for continual methods) and the test set."""
        data = self.cfg.data
        ds = self.load_dataset()
        if data.test_path:
            train = ds
            test = read_log_tsv(data.test_path, max_seq_len=data.max_seq_len)
            if data.neg_per_pos:
                test = add_random_negatives(test, data.neg_per_pos, data.subsample_seed + 1)
        else:
            train, test = split_chronological(ds, data.test_fraction)
        if data.rho < 1.0:
            train = subsample(train, data.rho, data.subsample_seed)
        if uses_continual_data(self.cfg):
            train_sets = split_continual(train, data.T, data.boundaries)
        else:
            train_sets = [train]
        logger.info(
            "Data: %d train samples in %d part(s), %d test samples, positive rate %.4f",
            sum(len(t) for t in train_sets), len(train_sets), len(test), test.positive_rate(),
        )
        return train_sets, test

    # ------------------------------------------------------------------ #
    # Training
    # ------------------------------------------------------------------ #
    def _dispatch(self, train_sets: Sequence[Dataset], test: Dataset, settings: TrainSettings, resume: Optional[RunState]) -> RunResult:
        run = self.cfg.run
        if run.method == "direct":
            return run_direct(run.k, train_sets[0], test, settings, resume)
        if run.method == "meda_nc":
            return run_meda_nc(run.k, train_sets[0], test, settings, resume)
        if run.method == "meda_c":
            T = len(train_sets)
            if run.schedule:
                schedule = Schedule(run.k, T, tuple(tuple(p) for p in run.schedule))
            else:
                schedule = Schedule.full(run.k, T)
            return run_meda_c(schedule, train_sets, test, settings, resume)
        return run_variant(run.variant, run.k, train_sets, test, settings, resume)

    def run(self, resume_from: Optional[str] = None) -> Dict[str, Any]:
        """Train per the config; writes CSVs, config echo and the final checkpoint."""
        start_time = time.time()
        run = self.cfg.run
        run_id = self.cfg.resolved_run_id()
        self.output_dir.mkdir(parents=True, exist_ok=True)
        echo = self.cfg.effective()
        echo["run"]["resume_from"] = None
        (self.output_dir / CONFIG_ECHO_FILE).write_text(json.dumps(echo, sort_keys=True, indent=2) + "\n")

        print("=" * 60)
        print(f"Run {run_id}: method {run.method}, k={run.k}, seed {run.base_seed}")
        print("=" * 60)

        train_sets, test = self.load_data()
        plan = build_plan(self.cfg)
        meta = {"run_id": run_id, "config": self.cfg.effective()}

        def checkpoint_pass(state: RunState, plan_) -> None:
            target = self.output_dir / "checkpoints" / f"pass_{state.next_pass:03d}"
            save_run_state(target, state, plan_, meta)

        settings = TrainSettings.from_experiment(
            self.cfg, on_pass_end=checkpoint_pass if run.checkpoint_every_pass else None
        )
        resume_path = resume_from or run.resume_from
        resume = load_run_state(resume_path, plan) if resume_path else None

        result = self._dispatch(train_sets, test, settings, resume)

        metrics_path = self.output_dir / METRICS_FILE
        write_metrics_csv(metrics_path, result.records)
        outputs = {"metrics": str(metrics_path)}
        if result.loss_curve:
            write_loss_curve_csv(self.output_dir / LOSS_CURVE_FILE, result.loss_curve)
            outputs["loss_curve"] = str(self.output_dir / LOSS_CURVE_FILE)
        final_meta = dict(meta, variant=result.variant, current_bank=result.bank.bank_id if result.bank else None)
        report = save_checkpoint(
            self.output_dir / FINAL_CHECKPOINT, result.mlp, result.banks, result.optimizer, final_meta
        )
        outputs["checkpoint"] = str(self.output_dir / FINAL_CHECKPOINT)

        summary = summarize_records(result.records)
        summary.update(
            run_id=run_id,
            method=run.method,
            variant=result.variant,
            k=run.k,
            records=[r.to_dict() for r in result.records],
            storage=report.to_dict(),
            outputs=outputs,
            processing_time=round(time.time() - start_time, 2),
        )
        self._print_summary(summary)
        return summary

    def _print_summary(self, summary: Dict[str, Any]):
        print("\n" + "=" * 60)
        print("RUN SUMMARY")
        print("=" * 60)
        print(f"Run: {summary['run_id']} ({summary['variant']})")
        print(f"Processing Time: {summary['processing_time']} seconds")
        print(f"{'pass':>4}  {'t':>2}  {'epoch':>5}  {'bank':>4}  {'train loss':>10}  {'test AUC':>9}  {'logloss':>8}")
        for i, rec in enumerate(summary["records"], 1):
            print(
                f"{i:>4}  {rec['dataset_index']:>2}  {rec['epoch']:>5}  {rec['bank_id']:>4}  "
                f"{rec['train_mean_loss']:>10.6f}  {rec['test_auc']:>9.6f}  {rec['test_logloss']:>8.6f}"
            )
        if summary["best_pass"] is not None:
            print(f"\nBest pass: {summary['best_pass']} (AUC {summary['best_auc']:.6f})")
            print(f"Delta vs first pass: {summary['delta_vs_first']:+.6f}")
        storage = summary["storage"]
        print(f"Embedding storage: {storage['embedding_rows']} rows, {storage['embedding_bytes']} bytes")
        print("=" * 60)

    def export_results(self, result: Dict[str, Any], filename: Optional[str] = None) -> str:
        """Export the run summary to JSON."""
        path = Path(filename) if filename else self.output_dir / SUMMARY_FILE
        try:
            path.write_text(json.dumps(result, indent=2, default=str) + "\n")
        except OSError as e:
            logger.error("Failed to export results: %s", e)
            return ""
        logger.info("Results exported to %s", path)
        return str(path)

    # ------------------------------------------------------------------ #
    # Checkpoint scoring
    # ------------------------------------------------------------------ #
    def evaluate_checkpoint(self, path: str, bank_id: Optional[int] = None) -> Dict[str, Any]:
        mlp, banks, _ = load_checkpoint(path)
        if not banks:
            raise ConfigError(f"{path} holds no embedding bank to score with")
        if bank_id is None:
            bank_id = read_manifest(path).meta.get("current_bank")
            if bank_id is None:
                bank_id = max(banks)
        if bank_id not in banks:
            raise ConfigError(f"{path} has no bank {bank_id}; available: {sorted(banks)}")
        _, test = self.load_data()
        test_auc, test_logloss = evaluate(mlp, banks[bank_id], test, workers=self.cfg.run.eval_workers)
        return {"checkpoint": str(path), "bank_id": bank_id, "n_test": len(test), "test_auc": test_auc, "test_logloss": test_logloss}


# --------------------------------------------------------------------------- #
# Summaries and reports
# --------------------------------------------------------------------------- #
def summarize_records(records: Sequence[MetricRecord]) -> Dict[str, Any]:
    aucs = [r.test_auc for r in records]
    valid = [(i, a) for i, a in enumerate(aucs) if not math.isnan(a)]
    if not valid:
        return {"best_pass": None, "best_auc": None, "delta_vs_first": None}
    best_i, best = max(valid, key=lambda p: p[1])
    return {"best_pass": best_i + 1, "best_auc": best, "delta_vs_first": best - aucs[0]}


def build_report(csv_paths: Sequence[str]) -> pd.DataFrame:
    """
    One row per run: best/final AUC and the improvement over the single-epoch
    model, sorted by variant. The single-epoch reference is the first pass of a
    ``direct`` run when one is present, otherwise each run's own first pass.
    See :func:`aggregate_by_variant` for one row per variant.
    """
    if not csv_paths:
        raise ConfigError("report needs at least one metrics CSV")
    frames = [pd.DataFrame([r.to_dict() for r in read_metrics_csv(p)]) for p in csv_paths]
    df = pd.concat(frames, ignore_index=True)
    if df.empty:
        return pd.DataFrame(columns=["run_id", "variant", "passes", "best_auc", "best_pass", "final_auc", "single_epoch_auc", "delta_best", "delta_final"])
    df["pass"] = df.groupby("run_id").cumcount() + 1

    direct = df[df["variant"] == "direct"]
    reference = float(direct.sort_values(["run_id", "pass"]).iloc[0]["test_auc"]) if not direct.empty else None

    rows = []
    for run_id, group in df.groupby("run_id", sort=False):
        best_idx = group["test_auc"].idxmax() if group["test_auc"].notna().any() else group.index[0]
        single = reference if reference is not None else float(group.iloc[0]["test_auc"])
        best = float(group.loc[best_idx, "test_auc"])
        final = float(group.iloc[-1]["test_auc"])
        rows.append(
            {
                "run_id": run_id,
                "variant": group.iloc[0]["variant"],
                "passes": len(group),
                "best_auc": best,
                "best_pass": int(group.loc[best_idx, "pass"]),
                "final_auc": final,
                "single_epoch_auc": single,
                "delta_best": best - single,
                "delta_final": final - single,
            }
        )
    return pd.DataFrame(rows).sort_values(["variant", "run_id"], kind="mergesort").reset_index(drop=True)


VARIANT_COLUMNS = ["best_auc", "final_auc", "delta_best", "delta_final"]


def aggregate_by_variant(table: pd.DataFrame) -> pd.DataFrame:
    """Mean and sample std over the runs of each variant (std is NaN for a single run)."""
    named = {"runs": ("run_id", "size")}
    for col in VARIANT_COLUMNS:
        named[f"{col}_mean"] = (col, "mean")
        named[f"{col}_std"] = (col, "std")
    if table.empty:
        return pd.DataFrame(columns=["variant", *named])
    return table.groupby("variant", sort=True).agg(**named).reset_index()


def parse_param_source(source: str) -> Tuple[str, Optional[int]]:
    """``mlp`` or ``bank:<r>`` (``bank <r>`` and ``bank<r>`` accepted)."""
    text = source.strip().lower()
    if text == "mlp":
        return "mlp", None
    if text.startswith("bank"):
        rest = text[4:].lstrip(": ")
        try:
            return "bank", int(rest)
        except ValueError:
            pass
    raise ConfigError(f"parameter source must be 'mlp' or 'bank:<r>', got {source!r}")


def diff_checkpoints(ckpt_a: str, ckpt_b: str, source: str = "mlp") -> Dict[str, Any]:
    kind, bank_id = parse_param_source(source)
    snaps = []
    for path in (ckpt_a, ckpt_b):
        mlp, banks, _ = load_checkpoint(path)
        if kind == "mlp":
            snaps.append(ParamSnapshot.from_mlp(mlp))
        else:
            if bank_id not in banks:
                raise MetricError(f"{path} has no bank {bank_id}; available: {sorted(banks)}")
            snaps.append(ParamSnapshot.from_bank(banks[bank_id]))
    return {
        "a": str(ckpt_a),
        "b": str(ckpt_b),
        "source": source,
        "cosine": param_cosine(*snaps),
        "l2": param_l2(*snaps),
    }


# --------------------------------------------------------------------------- #
# Grid runs
# --------------------------------------------------------------------------- #
def _run_config_file(path: str, overrides: Dict[str, Any]) -> Dict[str, Any]:
    runner = ExperimentRunner.from_file(path, overrides)
    summary = runner.run()
    summary["config"] = path
    runner.export_results(summary)
    return summary


def run_batch_jobs(config_paths: Sequence[str], overrides: Optional[Dict[str, Any]] = None, max_workers: int = 4) -> List[Dict[str, Any]]:
    """
    Run several config files in separate worker processes. Each run writes to
    its own directory ``<output_dir>/<config stem>``.
    """
    overrides = dict(overrides or {})
    jobs = {}
    for path in config_paths:
        base = overrides.get("run.output_dir") or load_experiment_config(path).run.output_dir
        jobs[path] = dict(overrides, **{"run.output_dir": str(Path(base) / Path(path).stem)})

    results = []
    with ProcessPoolExecutor(max_workers=max(1, min(max_workers, len(jobs)))) as executor:
        future_to_path = {executor.submit(_run_config_file, p, o): p for p, o in jobs.items()}
        for future in as_completed(future_to_path):
            path = future_to_path[future]
            try:
                results.append(future.result())
            except MedaError as e:
                logger.error("%s failed: %s", path, e)
                results.append({"error": str(e), "config": path, "exit_code": e.exit_code})
            except Exception as e:
                logger.error("%s failed: %s", path, e)
                results.append({"error": str(e), "config": path, "exit_code": 1})
    order = {p: i for i, p in enumerate(config_paths)}
    return sorted(results, key=lambda r: order.get(r.get("config"), -1))


def main():
    import cli

    raise SystemExit(cli.main())


if __name__ == "__main__":
    main()
