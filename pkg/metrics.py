"""Evaluation scores and parameter-convergence diagnostics."""

import math
from dataclasses import asdict, dataclass
from typing import Dict, Sequence, Tuple

import numpy as np

from errors import MetricError
from model import FIELD_CODES, EmbeddingBank, MlpParams

LOGLOSS_CLAMP = 1e-7


@dataclass(frozen=True)
class MetricRecord:
    run_id: str
    variant: str
    dataset_index: int
    epoch: int
    bank_id: int
    train_mean_loss: float
    test_auc: float
    test_logloss: float
    wall_ms: float

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


def midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    n = values.size
    boundaries = np.flatnonzero(np.diff(sorted_vals)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [n]])
    group_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.repeat(group_rank, ends - starts)
    return ranks


def mann_whitney_u(scores: Sequence[float], labels: Sequence[int]) -> Tuple[float, int, int]:
    """U statistic of the positives, plus the positive and negative counts."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise MetricError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    if np.isnan(scores).any():
        raise MetricError("scores contain NaN")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricError(f"AUC needs both classes (positives={n_pos}, negatives={n_neg})")
    rank_sum = float(midranks(scores)[pos].sum())
    return rank_sum - n_pos * (n_pos + 1) / 2.0, n_pos, n_neg


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank-based AUC, ties counting one half."""
    u, n_pos, n_neg = mann_whitney_u(scores, labels)
    return u / (n_pos * n_neg)


def logloss(probs: Sequence[float], labels: Sequence[int]) -> float:
    p = np.clip(np.asarray(probs, dtype=np.float64), LOGLOSS_CLAMP, 1.0 - LOGLOSS_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(-y * np.log(p) - (1.0 - y) * np.log(1.0 - p)))


# --------------------------------------------------------------------------- #
# Parameter snapshots
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class ParamSnapshot:
    """
    Canonical flat view of a parameter group.

    MLP: tensors in definition order, each row-major. Embedding bank: rows
    sorted by (field code, id), keys kept so two banks can be compared over
    their common IDs.
    """

    source: str
    vector: np.ndarray
    keys: Tuple[Tuple[int, int], ...] = ()

    @classmethod
    def from_mlp(cls, mlp: MlpParams) -> "ParamSnapshot":
        return cls(source="mlp", vector=mlp.flat().astype(np.float64))

    @classmethod
    def from_bank(cls, bank: EmbeddingBank) -> "ParamSnapshot":
        keys, rows = [], []
        for name in sorted(bank.fields(), key=FIELD_CODES.get):
            ids, mat = bank.sorted_items(name)
            keys.extend((FIELD_CODES[name], int(i)) for i in ids.tolist())
            rows.append(mat.astype(np.float64))
        vector = np.concatenate([r.reshape(-1) for r in rows]) if rows else np.zeros(0)
        return cls(source="embedding", vector=vector, keys=tuple(keys))

    @property
    def width(self) -> int:
        return self.vector.size // len(self.keys) if self.keys else 0


def _aligned(a: ParamSnapshot, b: ParamSnapshot) -> Tuple[np.ndarray, np.ndarray]:
    if a.source != b.source:
        raise MetricError(f"cannot compare {a.source} with {b.source}")
    if a.source == "mlp":
        if a.vector.size != b.vector.size:
            raise MetricError(f"MLP snapshots differ in size ({a.vector.size} vs {b.vector.size})")
        return a.vector, b.vector
    if a.width != b.width:
        raise MetricError(f"embedding widths differ ({a.width} vs {b.width})")
    index_b = {key: i for i, key in enumerate(b.keys)}
    pairs = [(i, index_b[key]) for i, key in enumerate(a.keys) if key in index_b]
    if not pairs:
        raise MetricError("embedding snapshots share no (field, id) keys")
    ia = np.array([p[0] for p in pairs])
    ib = np.array([p[1] for p in pairs])
    va = a.vector.reshape(-1, a.width)[ia].reshape(-1)
    vb = b.vector.reshape(-1, b.width)[ib].reshape(-1)
    return va, vb


def param_cosine(a: ParamSnapshot, b: ParamSnapshot) -> float:
    va, vb = _aligned(a, b)
    na, nb = float(np.linalg.norm(va)), float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise MetricError("cosine undefined for a zero-norm parameter vector")
    return float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0))


def param_l2(a: ParamSnapshot, b: ParamSnapshot) -> float:
    va, vb = _aligned(a, b)
    return float(np.linalg.norm(va - vb))


def is_valid_auc(value: float) -> bool:
    return not math.isnan(value) and 0.0 <= value <= 1.0
