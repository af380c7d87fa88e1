#!/usr/bin/env python3
"""
Render metric CSVs written by ``meda train``.

    python plot_results.py auc runs/*/metrics.csv --out auc.png
    python plot_results.py loss runs/meda_nc/loss_curve.csv --out loss.png
"""

import argparse
import sys
from typing import List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from errors import FormatError  # noqa: E402
from persist import LOSS_CURVE_COLUMNS, read_metrics_csv  # noqa: E402


def plot_auc(csv_paths: Sequence[str], out: str, title: str = "Test AUC per pass") -> str:
    """One line per run: test AUC against pass number."""
    df = pd.DataFrame([r.to_dict() for p in csv_paths for r in read_metrics_csv(p)])
    fig, ax = plt.subplots(figsize=(7, 4))
    for run_id, group in df.groupby("run_id", sort=False):
        ax.plot(range(1, len(group) + 1), group["test_auc"], marker="o", label=f"{group.iloc[0]['variant']} ({run_id})")
    ax.set_xlabel("pass")
    ax.set_ylabel("test AUC")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    if not df.empty:
        ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def plot_loss_curve(csv_path: str, out: str) -> str:
    """Windowed training loss, passes laid end to end, with pass boundaries marked."""
    df = pd.read_csv(csv_path)
    if tuple(df.columns) != LOSS_CURVE_COLUMNS:
        raise FormatError(f"{csv_path}: expected columns {','.join(LOSS_CURVE_COLUMNS)}")
    fig, ax = plt.subplots(figsize=(8, 4))
    for run_id, group in df.groupby("run_id", sort=False):
        group = group.reset_index(drop=True)
        ax.plot(range(len(group)), group["window_mean_loss"], label=f"{group.loc[0, 'variant']} ({run_id})")
        starts = group.index[group["batch"].diff().fillna(-1) < 0]
        for x in starts[1:]:
            ax.axvline(x, color="grey", linewidth=0.5, linestyle=":")
    ax.set_xlabel("window")
    ax.set_ylabel("training loss")
    ax.grid(alpha=0.3)
    if not df.empty:
        ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def main(argv: Optional[List[str]] = None) -> int:
    p = argparse.ArgumentParser(description="Plot metric CSVs")
    sub = p.add_subparsers(dest="kind", required=True)
    a = sub.add_parser("auc")
    a.add_argument("csv", nargs="+")
    a.add_argument("--out", default="auc.png")
    a.add_argument("--title", default="Test AUC per pass")
    loss = sub.add_parser("loss")
    loss.add_argument("csv")
    loss.add_argument("--out", default="loss.png")
    args = p.parse_args(argv)
    if args.kind == "auc":
        path = plot_auc(args.csv, args.out, args.title)
    else:
        path = plot_loss_curve(args.csv, args.out)
    print(f"Wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
