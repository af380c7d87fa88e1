"""
Sparse CTR datasets: synthetic generation, TSV log ingestion, chronological
and continual splitting, and rho-subsampling.

Datasets are stored column-wise (one numpy array per field, behaviour
sequences padded to ``max_seq_len``) and are immutable after construction.
"""

import hashlib
import json
import logging
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from config import CACHE_DIR, CALIBRATION_STEPS, MALFORMED_LINE_LIMIT, MAX_SEQ_LEN, GenConfig
from errors import ConfigError, DataError, FormatError, OrderingError

logger = logging.getLogger(__name__)

SCALAR_FIELDS = ("user", "item", "category")
FIELD_SCHEMA = (("user", "scalar"), ("item", "scalar"), ("category", "scalar"), ("behavior_seq", "sequence"))
TSV_COLUMNS = ("timestamp", "user_id", "item_id", "category_id", "behavior_seq", "label")

_UINT64_MAX = (1 << 64) - 1


@dataclass(frozen=True)
class SparseSample:
    user_id: int
    item_id: int
    category_id: int
    behavior_seq: Tuple[Tuple[int, int], ...]
    label: int
    timestamp: int


@dataclass(frozen=True, eq=False)
class Dataset:
    timestamps: np.ndarray
    user_ids: np.ndarray
    item_ids: np.ndarray
    category_ids: np.ndarray
    seq_items: np.ndarray
    seq_cats: np.ndarray
    seq_lens: np.ndarray
    labels: np.ndarray
    field_schema: Tuple[Tuple[str, str], ...] = FIELD_SCHEMA

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def max_seq_len(self) -> int:
        return int(self.seq_items.shape[1])

    @property
    def seq_mask(self) -> np.ndarray:
        return np.arange(self.max_seq_len)[None, :] < self.seq_lens[:, None]

    def __getitem__(self, i: int) -> SparseSample:
        n = int(self.seq_lens[i])
        seq = tuple(zip(self.seq_items[i, :n].tolist(), self.seq_cats[i, :n].tolist()))
        return SparseSample(
            user_id=int(self.user_ids[i]),
            item_id=int(self.item_ids[i]),
            category_id=int(self.category_ids[i]),
            behavior_seq=seq,
            label=int(self.labels[i]),
            timestamp=int(self.timestamps[i]),
        )

    def samples(self) -> Iterator[SparseSample]:
        for i in range(len(self)):
            yield self[i]

    def take(self, idx: Sequence[int]) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            timestamps=self.timestamps[idx],
            user_ids=self.user_ids[idx],
            item_ids=self.item_ids[idx],
            category_ids=self.category_ids[idx],
            seq_items=self.seq_items[idx],
            seq_cats=self.seq_cats[idx],
            seq_lens=self.seq_lens[idx],
            labels=self.labels[idx],
            field_schema=self.field_schema,
        )

    def slice(self, start: int, stop: int) -> "Dataset":
        return self.take(np.arange(start, stop))

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.timestamps) >= 0))

    def positive_rate(self) -> float:
        return float(self.labels.mean()) if len(self) else 0.0

    @classmethod
    def from_samples(cls, samples: Sequence[SparseSample], max_seq_len: int = MAX_SEQ_LEN) -> "Dataset":
        n = len(samples)
        seq_items = np.zeros((n, max_seq_len), dtype=np.uint64)
        seq_cats = np.zeros((n, max_seq_len), dtype=np.uint64)
        seq_lens = np.zeros(n, dtype=np.int32)
        for i, s in enumerate(samples):
            if s.label not in (0, 1):
                raise DataError(f"sample {i}: label must be 0 or 1, got {s.label}")
            seq = s.behavior_seq[:max_seq_len]
            seq_lens[i] = len(seq)
            for j, (item, cat) in enumerate(seq):
                seq_items[i, j] = item
                seq_cats[i, j] = cat
        return cls(
            timestamps=np.array([s.timestamp for s in samples], dtype=np.int64),
            user_ids=np.array([s.user_id for s in samples], dtype=np.uint64),
            item_ids=np.array([s.item_id for s in samples], dtype=np.uint64),
            category_ids=np.array([s.category_id for s in samples], dtype=np.uint64),
            seq_items=seq_items,
            seq_cats=seq_cats,
            seq_lens=seq_lens,
            labels=np.array([s.label for s in samples], dtype=np.int8),
        )

    @classmethod
    def concat(cls, parts: Sequence["Dataset"]) -> "Dataset":
        if not parts:
            raise DataError("cannot concatenate zero datasets")
        width = max(p.max_seq_len for p in parts)

        def pad(a: np.ndarray) -> np.ndarray:
            return np.pad(a, ((0, 0), (0, width - a.shape[1])))

        return cls(
            timestamps=np.concatenate([p.timestamps for p in parts]),
            user_ids=np.concatenate([p.user_ids for p in parts]),
            item_ids=np.concatenate([p.item_ids for p in parts]),
            category_ids=np.concatenate([p.category_ids for p in parts]),
            seq_items=np.concatenate([pad(p.seq_items) for p in parts]),
            seq_cats=np.concatenate([pad(p.seq_cats) for p in parts]),
            seq_lens=np.concatenate([p.seq_lens for p in parts]),
            labels=np.concatenate([p.labels for p in parts]),
            field_schema=parts[0].field_schema,
        )

    def to_tsv_lines(self) -> Iterator[str]:
        ts = self.timestamps.tolist()
        users, items, cats = self.user_ids.tolist(), self.item_ids.tolist(), self.category_ids.tolist()
        labels = self.labels.tolist()
        for i in range(len(self)):
            n = int(self.seq_lens[i])
            seq = "|".join(f"{a}:{b}" for a, b in zip(self.seq_items[i, :n].tolist(), self.seq_cats[i, :n].tolist()))
            yield f"{ts[i]}\t{users[i]}\t{items[i]}\t{cats[i]}\t{seq}\t{labels[i]}\n"

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for line in self.to_tsv_lines():
            digest.update(line.encode())
        return digest.hexdigest()


# --------------------------------------------------------------------------- #
# Synthetic generation
# --------------------------------------------------------------------------- #
def _sigmoid64(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def calibrate_bias(logits: np.ndarray, target_rate: float, steps: int = CALIBRATION_STEPS, tol: float = 1e-6) -> float:
    """Bisection for b such that mean(sigmoid(logits + b)) == target_rate."""
    lo, hi = -60.0, 60.0
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        rate = float(_sigmoid64(logits + mid).mean())
        if abs(rate - target_rate) < tol:
            return mid
        if rate < target_rate:
            lo = mid
        else:
            hi = mid
    raise ConfigError(
        f"could not calibrate positive rate {target_rate} within {steps} bisection steps "
        f"(last rate {rate:.6f}); lower alpha or adjust target_positive_rate"
    )


def zipf_weights(n_items: int, exponent: float) -> np.ndarray:
    ranks = np.arange(1, n_items + 1, dtype=np.float64)
    w = ranks ** (-exponent)
    return w / w.sum()


def generate_synthetic(cfg: GenConfig) -> Dataset:
    """
    Draw a CTR dataset from a latent-factor model.

    Users are uniform, items follow a finite Zipf law over popularity rank, and
    each label is Bernoulli(sigmoid(alpha * <u, v> + b)) with b calibrated to
    the target positive rate. A sample's behaviour sequence holds that user's
    earlier positive (item, category) pairs, most recent first.
    """
    rng = np.random.default_rng(cfg.seed)
    user_vecs = rng.standard_normal((cfg.n_users, cfg.latent_dim))
    item_vecs = rng.standard_normal((cfg.n_items, cfg.latent_dim))
    item_cats = rng.integers(0, cfg.n_categories, size=cfg.n_items)

    users = rng.integers(0, cfg.n_users, size=cfg.n_samples)
    items = rng.choice(cfg.n_items, size=cfg.n_samples, p=zipf_weights(cfg.n_items, cfg.zipf_exponent))
    affinity = cfg.alpha * (user_vecs[users] * item_vecs[items]).sum(axis=1)
    bias = calibrate_bias(affinity, cfg.target_positive_rate)
    labels = (rng.random(cfg.n_samples) < _sigmoid64(affinity + bias)).astype(np.int8)
    logger.info(
        "Generated %d samples: bias %.4f, positive rate %.4f", cfg.n_samples, bias, float(labels.mean())
    )

    width = cfg.max_seq_len
    seq_items = np.zeros((cfg.n_samples, width), dtype=np.uint64)
    seq_cats = np.zeros((cfg.n_samples, width), dtype=np.uint64)
    seq_lens = np.zeros(cfg.n_samples, dtype=np.int32)
    history: Dict[int, deque] = {}
    for i, (u, v, y) in enumerate(zip(users.tolist(), items.tolist(), labels.tolist())):
        past = history.get(u)
        if past:
            recent = list(reversed(past))
            seq_lens[i] = len(recent)
            seq_items[i, : len(recent)] = [p[0] for p in recent]
            seq_cats[i, : len(recent)] = [p[1] for p in recent]
        if y == 1 and width > 0:
            if past is None:
                past = history[u] = deque(maxlen=width)
            past.append((v, int(item_cats[v])))

    return Dataset(
        timestamps=np.arange(cfg.n_samples, dtype=np.int64),
        user_ids=users.astype(np.uint64),
        item_ids=items.astype(np.uint64),
        category_ids=item_cats[items].astype(np.uint64),
        seq_items=seq_items,
        seq_cats=seq_cats,
        seq_lens=seq_lens,
        labels=labels,
    )


def _gen_cache_key(cfg: GenConfig) -> str:
    return hashlib.md5(json.dumps(cfg.model_dump(), sort_keys=True).encode()).hexdigest()


def cached_synthetic(cfg: GenConfig, cache_dir: Optional[str] = None) -> Dataset:
    """generate_synthetic with an on-disk TSV cache keyed by the config hash."""
    root = Path(cache_dir or CACHE_DIR)
    path = root / f"synthetic_{_gen_cache_key(cfg)}.tsv"
    if path.exists():
        logger.info("Loading cached synthetic dataset %s", path)
        return read_log_tsv(path, max_seq_len=cfg.max_seq_len)
    ds = generate_synthetic(cfg)
    try:
        root.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        write_log_tsv(ds, tmp)
        tmp.replace(path)
    except OSError as e:
        logger.warning("Failed to cache synthetic dataset: %s", e)
    return ds


def add_random_negatives(ds: Dataset, neg_per_pos: int, seed: int) -> Dataset:
    """
    For positives-only logs: after each positive, insert ``neg_per_pos``
    copies with a uniformly drawn observed item (and its category) and label 0.
    """
    if neg_per_pos < 0:
        raise ConfigError(f"neg_per_pos must be >= 0, got {neg_per_pos}")
    if neg_per_pos == 0 or len(ds) == 0:
        return ds
    vocab, first = np.unique(ds.item_ids, return_index=True)
    vocab_cats = ds.category_ids[first]
    rng = np.random.default_rng(seed)
    pos = np.flatnonzero(ds.labels == 1)
    draws = rng.integers(0, vocab.size, size=(pos.size, neg_per_pos))

    source, items, cats, labels = [], [], [], []
    draw_row = 0
    for i in range(len(ds)):
        source.append(i)
        items.append(ds.item_ids[i])
        cats.append(ds.category_ids[i])
        labels.append(ds.labels[i])
        if ds.labels[i] == 1:
            for d in draws[draw_row]:
                source.append(i)
                items.append(vocab[d])
                cats.append(vocab_cats[d])
                labels.append(0)
            draw_row += 1
    base = ds.take(source)
    return Dataset(
        timestamps=base.timestamps,
        user_ids=base.user_ids,
        item_ids=np.array(items, dtype=np.uint64),
        category_ids=np.array(cats, dtype=np.uint64),
        seq_items=base.seq_items,
        seq_cats=base.seq_cats,
        seq_lens=base.seq_lens,
        labels=np.array(labels, dtype=np.int8),
    )


# --------------------------------------------------------------------------- #
# TSV log format
# --------------------------------------------------------------------------- #
def _parse_id(token: str) -> int:
    value = int(token)
    if not 0 <= value <= _UINT64_MAX:
        raise ValueError(f"id {token} outside unsigned 64-bit range")
    return value


def _parse_line(line: str) -> Tuple[int, int, int, int, List[Tuple[int, int]], int]:
    parts = line.rstrip("\r\n").split("\t")
    if len(parts) != len(TSV_COLUMNS):
        raise ValueError(f"expected {len(TSV_COLUMNS)} columns, got {len(parts)}")
    ts, user, item, cat, seq, label = parts
    pairs = []
    if seq:
        for token in seq.split("|"):
            a, b = token.split(":")
            pairs.append((_parse_id(a), _parse_id(b)))
    if label not in ("0", "1"):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    return int(ts), _parse_id(user), _parse_id(item), _parse_id(cat), pairs, int(label)


def read_log_tsv(path, max_seq_len: int = MAX_SEQ_LEN) -> Dataset:
    """Read a TSV log in file order. Raises FormatError above 1% malformed lines."""
    samples: List[SparseSample] = []
    malformed = 0
    total = 0
    truncated = 0
    try:
        with open(path, "rb") as f:
            for lineno, raw in enumerate(f, 1):
                if not raw.strip():
                    continue
                total += 1
                try:
                    # undecodable bytes count as a malformed line
                    ts, user, item, cat, pairs, label = _parse_line(raw.decode("utf-8"))
                except ValueError as e:
                    malformed += 1
                    if malformed <= 5:
                        logger.warning("%s:%d malformed line skipped (%s)", path, lineno, e)
                    continue
                if len(pairs) > max_seq_len:
                    truncated += 1
                samples.append(SparseSample(user, item, cat, tuple(pairs[:max_seq_len]), label, ts))
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e

    if malformed:
        logger.warning("%s: %d of %d lines malformed", path, malformed, total)
    if total and malformed / total > MALFORMED_LINE_LIMIT:
        raise FormatError(f"{path}: {malformed}/{total} malformed lines exceeds {MALFORMED_LINE_LIMIT:.0%}")
    if truncated:
        logger.info("%s: truncated %d behaviour sequences to %d", path, truncated, max_seq_len)
    ds = Dataset.from_samples(samples, max_seq_len=max_seq_len)
    if not ds.is_sorted():
        logger.warning("%s: timestamps are not ascending", path)
    return ds


def write_log_tsv(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.writelines(ds.to_tsv_lines())


# --------------------------------------------------------------------------- #
# Splitting and subsampling
# --------------------------------------------------------------------------- #
def split_chronological(ds: Dataset, test_fraction: float) -> Tuple[Dataset, Dataset]:
    """The last ceil(n * test_fraction) samples become the test set; no shuffling."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    if not ds.is_sorted():
        raise OrderingError("dataset is not sorted by timestamp")
    n = len(ds)
    n_test = math.ceil(round(n * test_fraction, 9))
    if n_test == 0 or n_test >= n:
        raise DataError(f"split of {n} samples at fraction {test_fraction} leaves an empty side")
    return ds.slice(0, n - n_test), ds.slice(n - n_test, n)


def default_boundaries(T: int) -> List[float]:
    return [t / T for t in range(1, T)]


def split_continual(train: Dataset, T: int, boundaries: Optional[Sequence[float]] = None) -> List[Dataset]:
    """Contiguous chronological sub-datasets D_1..D_T; default cut points are equal fractions."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    bounds = list(default_boundaries(T) if boundaries is None else boundaries)
    if len(bounds) != T - 1:
        raise ConfigError(f"boundaries must have {T - 1} entries, got {len(bounds)}")
    if any(not 0.0 < b < 1.0 for b in bounds) or any(a >= b for a, b in zip(bounds, bounds[1:])):
        raise ConfigError(f"boundaries must be strictly increasing in (0, 1): {bounds}")
    n = len(train)
    cuts = [0] + [int(math.floor(round(b * n, 9))) for b in bounds] + [n]
    parts = [train.slice(a, b) for a, b in zip(cuts, cuts[1:])]
    if any(len(p) == 0 for p in parts):
        raise DataError(f"continual split of {n} samples at {bounds} yields an empty sub-dataset")
    return parts


def subsample(ds: Dataset, rho: float, seed: int) -> Dataset:
    """Keep each sample independently with probability rho; order preserved."""
    if not 0.0 < rho <= 1.0:
        raise ConfigError(f"rho must be in (0, 1], got {rho}")
    keep = np.random.default_rng(seed).random(len(ds)) < rho
    return ds.take(np.flatnonzero(keep))


def id_frequency_histogram(ids: np.ndarray, top: int = 10) -> Dict[str, object]:
    """
    How often each distinct ID occurs, summarised for pinning a generator run:
    ``buckets[b]`` counts IDs seen between 2**b and 2**(b+1) - 1 times, and
    ``top`` lists the largest per-ID counts.
    """
    _, counts = np.unique(np.asarray(ids), return_counts=True)
    if counts.size == 0:
        return {"distinct": 0, "buckets": [], "top": []}
    exponents = np.floor(np.log2(counts)).astype(np.int64)
    buckets = np.bincount(exponents)
    return {
        "distinct": int(counts.size),
        "buckets": [int(b) for b in buckets],
        "top": [int(c) for c in np.sort(counts)[::-1][:top]],
    }
