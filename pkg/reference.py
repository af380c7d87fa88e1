#!/usr/bin/env python3
"""
Record a reference run of a benchmark config as a JSON fixture.

    python reference.py configs/benchmark.json --out fixtures/benchmark_reference.json

The fixture pins what a fixed seed must reproduce: the generator's per-ID
frequency histograms, MEDA-NC test AUCs with the cosine between successive
MLP snapshots, the single-epoch direct AUC, and the MEDA-NC AUCs on half of
the training data. The slow test suite compares fresh runs against it.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from config import load_experiment_config
from data import Dataset, id_frequency_histogram
from errors import FormatError, MedaError
from main import ExperimentRunner
from meda import RunResult, RunState, TrainSettings, run_direct, run_meda_nc
from metrics import ParamSnapshot, param_cosine

logger = logging.getLogger(__name__)

REFERENCE_VERSION = 1
DEFAULT_FIXTURE = Path("fixtures") / "benchmark_reference.json"


def mlp_cosine_sequence(k: int, train: Dataset, test: Dataset, settings: TrainSettings) -> Tuple[RunResult, List[float]]:
    """MEDA-NC for k epochs; cosine between the MLP after epoch e and after epoch e+1."""
    snapshots: List[ParamSnapshot] = []

    def snapshot(state: RunState, plan) -> None:
        snapshots.append(ParamSnapshot.from_mlp(state.mlp))

    result = run_meda_nc(k, train, test, replace(settings, on_pass_end=snapshot))
    cosines = [param_cosine(a, b) for a, b in zip(snapshots, snapshots[1:])]
    return result, cosines


def first_epoch_reaching(aucs: List[float], target: float) -> Optional[int]:
    for epoch, value in enumerate(aucs, start=1):
        if value >= target:
            return epoch
    return None


def collect_reference(config_path: str, k: int = 8, rho: float = 0.5) -> Dict[str, Any]:
    cfg = load_experiment_config(config_path, {"run.method": "meda_nc", "run.k": k})
    runner = ExperimentRunner(cfg)
    settings = TrainSettings.from_experiment(cfg)

    full = runner.load_dataset()
    logger.info("Reference: %d samples from %s", len(full), config_path)
    train_sets, test = runner.load_data()
    train = train_sets[0]

    nc, cosines = mlp_cosine_sequence(k, train, test, settings)
    direct = run_direct(1, train, test, settings)

    half_cfg = load_experiment_config(config_path, {"run.method": "meda_nc", "run.k": k, "data.rho": rho})
    half_train, half_test = ExperimentRunner(half_cfg).load_data()
    half = run_meda_nc(k, half_train[0], half_test, TrainSettings.from_experiment(half_cfg))

    return {
        "version": REFERENCE_VERSION,
        "config": str(config_path),
        "config_hash": cfg.config_hash(),
        "generator": {
            "samples": len(full),
            "positive_rate": full.positive_rate(),
            "user": id_frequency_histogram(full.user_ids),
            "item": id_frequency_histogram(full.item_ids),
        },
        "meda_nc": {"k": k, "aucs": nc.aucs, "mlp_cosines": cosines},
        "direct_single_epoch_auc": direct.aucs[0],
        "rho": {
            "rho": rho,
            "meda_nc_aucs": half.aucs,
            "first_epoch_reaching_direct": first_epoch_reaching(half.aucs, direct.aucs[0]),
        },
    }


def write_reference(path, payload: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def load_reference(path) -> Dict[str, Any]:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from e
    if payload.get("version") != REFERENCE_VERSION:
        raise FormatError(f"{path}: reference version {payload.get('version')} != {REFERENCE_VERSION}")
    return payload


def main(argv: Optional[List[str]] = None) -> int:
    p = argparse.ArgumentParser(description="Record a reference run as a JSON fixture")
    p.add_argument("config")
    p.add_argument("--out", default=str(DEFAULT_FIXTURE))
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--rho", type=float, default=0.5)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        path = write_reference(args.out, collect_reference(args.config, args.k, args.rho))
    except MedaError as e:
        logger.error("%s", e)
        return e.exit_code
    print(f"Wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
