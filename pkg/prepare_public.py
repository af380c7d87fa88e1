#!/usr/bin/env python3
"""
Convert public interaction logs into the TSV log format.

    python prepare_public.py amazon Books_5.json out/amazon.tsv [--meta meta_Books.json]
    python prepare_public.py taobao UserBehavior.csv out/taobao.tsv
    python prepare_public.py taobao UserBehavior.csv out/taobao.tsv --url https://...

Every logged interaction becomes a positive sample; ``--neg-per-pos`` adds
random-item negatives. Behaviour sequences hold the user's earlier
interactions, most recent first. String IDs are mapped to integers in order
of first appearance.
"""

import argparse
import logging
import sys
from collections import deque
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd
import requests
from tqdm import tqdm

from config import LOG_LEVEL, MAX_SEQ_LEN
from data import Dataset, SparseSample, add_random_negatives, write_log_tsv
from errors import DataError, MedaError

logger = logging.getLogger(__name__)

TAOBAO_COLUMNS = ["user", "item", "category", "behavior", "timestamp"]
DOWNLOAD_CHUNK = 1 << 20


def download(url: str, dest: Path, timeout: int = 60) -> Path:
    """Stream ``url`` to ``dest`` unless it already exists."""
    if dest.exists():
        logger.info("Using existing raw file %s", dest)
        return dest
    dest.parent.mkdir(parents=True, exist_ok=True)
    tmp = dest.with_suffix(dest.suffix + ".part")
    try:
        with requests.get(url, stream=True, timeout=timeout) as response:
            response.raise_for_status()
            total = int(response.headers.get("content-length", 0)) or None
            with open(tmp, "wb") as fh, tqdm(total=total, unit="B", unit_scale=True, desc=dest.name) as bar:
                for chunk in response.iter_content(chunk_size=DOWNLOAD_CHUNK):
                    fh.write(chunk)
                    bar.update(len(chunk))
    except requests.RequestException as e:
        tmp.unlink(missing_ok=True)
        raise DataError(f"download of {url} failed: {e}") from e
    tmp.replace(dest)
    return dest


def load_amazon(path: Path, meta_path: Optional[Path] = None) -> pd.DataFrame:
    try:
        reviews = pd.read_json(path, lines=True)
    except ValueError as e:
        raise DataError(f"{path}: not a JSON-lines review file ({e})") from e
    missing = {"reviewerID", "asin", "unixReviewTime"} - set(reviews.columns)
    if missing:
        raise DataError(f"{path}: missing fields {sorted(missing)}")
    events = pd.DataFrame(
        {"user": reviews["reviewerID"], "item": reviews["asin"], "timestamp": reviews["unixReviewTime"]}
    )
    if meta_path is not None:
        meta = pd.read_json(meta_path, lines=True)
        # last listed category is the most specific one
        leaf = meta.set_index("asin")["category"].map(lambda c: c[-1] if isinstance(c, list) and c else "")
        events["category"] = events["item"].map(leaf).fillna("")
    else:
        events["category"] = ""
    return events


def load_taobao(path: Path, behaviors: List[str]) -> pd.DataFrame:
    try:
        raw = pd.read_csv(path, header=None, names=TAOBAO_COLUMNS)
    except (ValueError, pd.errors.ParserError) as e:
        raise DataError(f"{path}: not a UserBehavior CSV ({e})") from e
    kept = raw[raw["behavior"].isin(behaviors)]
    logger.info("%s: kept %d of %d events with behaviour in %s", path, len(kept), len(raw), behaviors)
    return kept[["user", "item", "category", "timestamp"]].reset_index(drop=True)


def events_to_dataset(events: pd.DataFrame, max_seq_len: int = MAX_SEQ_LEN) -> Dataset:
    """Chronological positives with per-user behaviour sequences; IDs start at 1."""
    events = events.sort_values("timestamp", kind="mergesort").reset_index(drop=True)
    codes = {col: pd.factorize(events[col])[0] + 1 for col in ("user", "item", "category")}
    history: Dict[int, deque] = {}
    samples = []
    for ts, user, item, cat in zip(events["timestamp"].tolist(), codes["user"].tolist(), codes["item"].tolist(), codes["category"].tolist()):
        past = history.get(user)
        seq = tuple(reversed(past)) if past else ()
        samples.append(SparseSample(user, item, cat, seq, 1, int(ts)))
        if max_seq_len > 0:
            if past is None:
                past = history[user] = deque(maxlen=max_seq_len)
            past.append((item, cat))
    return Dataset.from_samples(samples, max_seq_len=max_seq_len)


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=getattr(logging, LOG_LEVEL.upper(), logging.INFO))
    p = argparse.ArgumentParser(description="Convert Amazon / Taobao logs to the TSV log format")
    p.add_argument("source", choices=["amazon", "taobao"])
    p.add_argument("raw", help="raw input file (downloaded here when --url is given)")
    p.add_argument("out", help="output TSV")
    p.add_argument("--url", default=None)
    p.add_argument("--meta", default=None, help="Amazon metadata JSON-lines for categories")
    p.add_argument("--behaviors", default="pv", help="comma-separated Taobao behaviour types kept as positives")
    p.add_argument("--neg-per-pos", dest="neg_per_pos", type=int, default=1)
    p.add_argument("--max-seq-len", dest="max_seq_len", type=int, default=MAX_SEQ_LEN)
    p.add_argument("--seed", type=int, default=2024)
    args = p.parse_args(argv)

    try:
        raw = Path(args.raw)
        if args.url:
            download(args.url, raw)
        if args.source == "amazon":
            events = load_amazon(raw, Path(args.meta) if args.meta else None)
        else:
            events = load_taobao(raw, args.behaviors.split(","))
        ds = events_to_dataset(events, args.max_seq_len)
        ds = add_random_negatives(ds, args.neg_per_pos, args.seed)
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_log_tsv(ds, out)
    except MedaError as e:
        logger.error("%s", e)
        return e.exit_code
    print(f"Wrote {len(ds)} samples ({int(ds.labels.sum())} positives) to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
