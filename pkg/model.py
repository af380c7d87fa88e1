"""
Embedding banks, pooling (mean and DIN-style attention), MLP forward and
analytic backward, and the BCE loss head.

Input layout per sample: [user | item | category | pooled behaviour], where
the pooled part is 2*embed_dim wide (item and category sub-embeddings of the
behaviour sequence). Behaviour items and categories share the candidate's
item and category tables.
"""

import copy
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

import numerics
from config import ModelConfig
from data import SCALAR_FIELDS, Dataset, SparseSample
from errors import NumericError, ShapeError

logger = logging.getLogger(__name__)

FIELD_CODES = {"user": 1, "item": 2, "category": 3}
INPUT_BLOCKS = len(SCALAR_FIELDS) + 2


def input_dim(embed_dim: int) -> int:
    return INPUT_BLOCKS * embed_dim


# --------------------------------------------------------------------------- #
# Embedding banks
# --------------------------------------------------------------------------- #
class _FieldTable:
    """Growable ID -> row table for one field."""

    __slots__ = ("id_to_row", "ids", "matrix", "n")

    def __init__(self, dim: int, dtype: np.dtype, capacity: int = 1024):
        self.id_to_row: Dict[int, int] = {}
        self.ids = np.zeros(capacity, dtype=np.uint64)
        self.matrix = np.zeros((capacity, dim), dtype=dtype)
        self.n = 0

    def _grow(self, needed: int) -> None:
        cap = self.matrix.shape[0]
        if needed <= cap:
            return
        while cap < needed:
            cap *= 2
        ids = np.zeros(cap, dtype=np.uint64)
        ids[: self.n] = self.ids[: self.n]
        mat = np.zeros((cap, self.matrix.shape[1]), dtype=self.matrix.dtype)
        mat[: self.n] = self.matrix[: self.n]
        self.ids, self.matrix = ids, mat

    def append(self, ids: np.ndarray, vectors: np.ndarray) -> np.ndarray:
        start = self.n
        self._grow(start + ids.size)
        self.ids[start : start + ids.size] = ids
        self.matrix[start : start + ids.size] = vectors
        for offset, key in enumerate(ids.tolist()):
            self.id_to_row[key] = start + offset
        self.n += ids.size
        return np.arange(start, self.n, dtype=np.int64)


class EmbeddingBank:
    """
    One independently seeded set of per-field embedding tables.

    Rows are created lazily on first lookup. A row's initial value is a
    function of (init_seed, field, id) only, so lookup order never changes
    what a given ID starts from, and reinitializing a bank is a table reset
    plus a new seed.
    """

    def __init__(
        self,
        bank_id: int,
        init_seed: int,
        embed_dim: int,
        init_kind: str = "glorot_uniform",
        init_range: float = 0.01,
        dtype: Optional[np.dtype] = None,
    ):
        if init_kind not in ("glorot_uniform", "uniform"):
            raise ValueError(f"unknown init_kind {init_kind!r}")
        self.bank_id = bank_id
        self.init_seed = init_seed
        self.embed_dim = embed_dim
        self.init_kind = init_kind
        self.init_range = init_range
        self.dtype = np.dtype(dtype) if dtype is not None else numerics.float_dtype()
        self.tables: Dict[str, _FieldTable] = {}

    @classmethod
    def from_config(cls, bank_id: int, init_seed: int, cfg: ModelConfig) -> "EmbeddingBank":
        return cls(bank_id, init_seed, cfg.embed_dim, cfg.init_kind, cfg.init_range)

    @property
    def bound(self) -> float:
        if self.init_kind == "glorot_uniform":
            return numerics.glorot_bound(self.embed_dim, self.embed_dim)
        return float(self.init_range)

    def _table(self, field_name: str) -> _FieldTable:
        table = self.tables.get(field_name)
        if table is None:
            if field_name not in FIELD_CODES:
                raise KeyError(f"unknown field {field_name!r}")
            table = self.tables[field_name] = _FieldTable(self.embed_dim, self.dtype)
        return table

    def init_vectors(self, field_name: str, ids: np.ndarray) -> np.ndarray:
        u = numerics.keyed_uniform(self.init_seed, FIELD_CODES[field_name], ids, self.embed_dim)
        return ((2.0 * u - 1.0) * self.bound).astype(self.dtype)

    def init_embedding_row(self, field_name: str, id_: int) -> np.ndarray:
        table = self._table(field_name)
        if id_ in table.id_to_row:
            raise NumericError(f"{field_name}:{id_} already initialized in bank {self.bank_id}")
        ids = np.array([id_], dtype=np.uint64)
        row = table.append(ids, self.init_vectors(field_name, ids))[0]
        return table.matrix[row].copy()

    def lookup(self, field_name: str, ids: np.ndarray, create: bool = True) -> np.ndarray:
        """Row index per ID; -1 for absent IDs when ``create`` is False."""
        ids = np.asarray(ids, dtype=np.uint64).reshape(-1)
        if ids.size == 0:
            return np.zeros(0, dtype=np.int64)
        if not create and field_name not in self.tables:
            return np.full(ids.size, -1, dtype=np.int64)
        table = self._table(field_name)
        uniq, inverse = np.unique(ids, return_inverse=True)
        get = table.id_to_row.get
        rows = np.fromiter((get(i, -1) for i in uniq.tolist()), dtype=np.int64, count=uniq.size)
        missing = rows < 0
        if create and missing.any():
            new_ids = uniq[missing]
            rows[missing] = table.append(new_ids, self.init_vectors(field_name, new_ids))
        return rows[inverse.reshape(-1)]

    def vectors(self, field_name: str, ids: np.ndarray, create: bool = True) -> Tuple[np.ndarray, np.ndarray]:
        """Embeddings for ``ids`` plus their rows. Absent IDs read their init value."""
        ids = np.asarray(ids, dtype=np.uint64).reshape(-1)
        rows = self.lookup(field_name, ids, create=create)
        table = self.tables.get(field_name)
        if table is not None and table.n:
            out = numerics.gather_rows(table.matrix[: table.n], np.maximum(rows, 0))
        else:
            out = np.zeros((ids.size, self.embed_dim), dtype=self.dtype)
        absent = rows < 0
        if absent.any():
            out[absent] = self.init_vectors(field_name, ids[absent])
        return out, rows

    def matrix(self, field_name: str) -> np.ndarray:
        table = self._table(field_name)
        return table.matrix[: table.n]

    def ids(self, field_name: str) -> np.ndarray:
        table = self._table(field_name)
        return table.ids[: table.n]

    def ids_of_rows(self, field_name: str, rows: np.ndarray) -> np.ndarray:
        return numerics.gather_rows(self.ids(field_name)[:, None], rows)[:, 0]

    def fields(self) -> List[str]:
        return sorted(self.tables)

    def row_count(self, field_name: Optional[str] = None) -> int:
        if field_name is not None:
            table = self.tables.get(field_name)
            return table.n if table else 0
        return sum(t.n for t in self.tables.values())

    def nbytes(self) -> int:
        return self.row_count() * self.embed_dim * self.dtype.itemsize

    def restore_field(self, field_name: str, ids: np.ndarray, matrix: np.ndarray) -> None:
        table = _FieldTable(self.embed_dim, self.dtype, capacity=max(1024, ids.size))
        table.append(np.asarray(ids, dtype=np.uint64), matrix.astype(self.dtype))
        self.tables[field_name] = table

    def reinitialize(self, init_seed: Optional[int] = None) -> None:
        if init_seed is not None:
            self.init_seed = init_seed
        self.tables = {}

    def copy(self, bank_id: Optional[int] = None) -> "EmbeddingBank":
        clone = copy.deepcopy(self)
        if bank_id is not None:
            clone.bank_id = bank_id
        return clone

    def sorted_items(self, field_name: str) -> Tuple[np.ndarray, np.ndarray]:
        ids = self.ids(field_name)
        order = np.argsort(ids, kind="stable")
        return ids[order], self.matrix(field_name)[order]

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name in self.fields():
            ids, mat = self.sorted_items(name)
            digest.update(name.encode())
            digest.update(ids.tobytes())
            digest.update(np.ascontiguousarray(mat).tobytes())
        return digest.hexdigest()


# --------------------------------------------------------------------------- #
# MLP parameters
# --------------------------------------------------------------------------- #
class MlpParams:
    """
    Dense tower (input -> hidden... -> 1) plus, in attention mode, the
    attention unit (4*2D -> attention_hidden... -> 1). Tensors live in an
    ordered dict in definition order, which is also the canonical flattening
    order.
    """

    def __init__(self, tensors: Dict[str, np.ndarray], dense_names: List[str], attention_names: List[str]):
        self.tensors = tensors
        self.dense_names = dense_names
        self.attention_names = attention_names

    @property
    def pooling(self) -> str:
        return "attention" if self.attention_names else "mean"

    @staticmethod
    def _layout(in_dim: int, hidden: Sequence[int], prefix: str, last: str) -> List[Tuple[str, int, int]]:
        dims = [in_dim] + list(hidden) + [1]
        names = [f"{prefix}_{i}" for i in range(len(hidden))] + [last]
        return [(n, a, b) for n, a, b in zip(names, dims, dims[1:])]

    @classmethod
    def build(
        cls,
        in_dim: int,
        hidden: Sequence[int],
        attention_in_dim: int = 0,
        attention_hidden: Sequence[int] = (),
        rng: Optional[np.random.Generator] = None,
    ) -> "MlpParams":
        """Glorot-uniform weights and zero biases; all zeros when ``rng`` is None."""
        dtype = numerics.float_dtype()
        tensors: Dict[str, np.ndarray] = {}
        dense_names: List[str] = []
        attention_names: List[str] = []
        layouts = [(cls._layout(in_dim, hidden, "dense", "output"), dense_names)]
        if attention_in_dim:
            layouts.append((cls._layout(attention_in_dim, attention_hidden, "attention", "attention_out"), attention_names))
        for layout, names in layouts:
            for name, fan_in, fan_out in layout:
                if rng is None:
                    weight = np.zeros((fan_in, fan_out), dtype=dtype)
                else:
                    bound = numerics.glorot_bound(fan_in, fan_out)
                    weight = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
                tensors[f"{name}.weight"] = weight
                tensors[f"{name}.bias"] = np.zeros(fan_out, dtype=dtype)
                names.append(name)
        return cls(tensors, dense_names, attention_names)

    @classmethod
    def init(cls, cfg: ModelConfig, rng: Optional[np.random.Generator]) -> "MlpParams":
        att_in = 4 * 2 * cfg.embed_dim if cfg.pooling == "attention" else 0
        return cls.build(input_dim(cfg.embed_dim), cfg.hidden, att_in, cfg.attention_hidden, rng)

    def layers(self, names: List[str]) -> Iterator[Tuple[str, np.ndarray, np.ndarray]]:
        for name in names:
            yield name, self.tensors[f"{name}.weight"], self.tensors[f"{name}.bias"]

    @property
    def input_dim(self) -> int:
        return self.tensors[f"{self.dense_names[0]}.weight"].shape[0]

    def copy(self) -> "MlpParams":
        return MlpParams({k: v.copy() for k, v in self.tensors.items()}, list(self.dense_names), list(self.attention_names))

    def flat(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.tensors.values()])

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, value in self.tensors.items():
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(value).tobytes())
        return digest.hexdigest()


# --------------------------------------------------------------------------- #
# Forward
# --------------------------------------------------------------------------- #
@dataclass
class MlpTrace:
    inputs: List[np.ndarray]
    preacts: List[np.ndarray]


@dataclass
class AttentionTrace:
    candidate: np.ndarray
    behaviors: np.ndarray
    mask: np.ndarray
    weights: np.ndarray
    mlp: MlpTrace


@dataclass
class EmbedTrace:
    rows: Dict[str, np.ndarray]
    seq_rows: Dict[str, np.ndarray]
    mask: np.ndarray
    seq_lens: np.ndarray
    behaviors: np.ndarray
    attention: Optional[AttentionTrace] = None
    touched: List[Tuple[str, int, int]] = field(default_factory=list)


def relu_tower(mlp: MlpParams, names: List[str], x: np.ndarray) -> Tuple[np.ndarray, MlpTrace]:
    trace = MlpTrace(inputs=[], preacts=[])
    h = x
    last = len(names) - 1
    for i, (_, weight, bias) in enumerate(mlp.layers(names)):
        if h.shape[1] != weight.shape[0]:
            raise ShapeError(f"layer {i} expects {weight.shape[0]} inputs, got {h.shape[1]}")
        trace.inputs.append(h)
        a = numerics.matmul(h, weight) + bias
        if i < last:
            trace.preacts.append(a)
            h = numerics.relu(a)
        else:
            h = a
    return h[:, 0], trace


def mlp_forward(mlp: MlpParams, x: np.ndarray) -> Tuple[np.ndarray, MlpTrace]:
    """Affine -> ReLU chain with a final scalar logit per row of ``x``."""
    single = x.ndim == 1
    logits, trace = relu_tower(mlp, mlp.dense_names, x[None, :] if single else x)
    return (logits[0] if single else logits), trace


def _attention_forward(
    mlp: MlpParams, candidate: np.ndarray, behaviors: np.ndarray, mask: np.ndarray
) -> Tuple[np.ndarray, AttentionTrace]:
    b, length, width = behaviors.shape
    cand = np.broadcast_to(candidate[:, None, :], behaviors.shape)
    z = np.concatenate([cand, behaviors, cand - behaviors, cand * behaviors], axis=-1).reshape(b * length, 4 * width)
    scores, trace = relu_tower(mlp, mlp.attention_names, z)
    weights = numerics.masked_softmax(scores.reshape(b, length), mask)
    pooled = (weights[..., None] * behaviors).sum(axis=1)
    return pooled, AttentionTrace(candidate, behaviors, mask, weights, trace)


def attention_pool(candidate_emb: np.ndarray, behavior_embs: np.ndarray, mlp: MlpParams) -> np.ndarray:
    """Softmax-weighted sum of behaviours scored against the candidate; zeros when empty."""
    behavior_embs = np.asarray(behavior_embs).reshape(-1, candidate_emb.shape[0])
    mask = np.ones((1, behavior_embs.shape[0]), dtype=bool)
    pooled, _ = _attention_forward(mlp, candidate_emb[None, :], behavior_embs[None, :, :], mask)
    return pooled[0]


def embed_batch(
    bank: EmbeddingBank, batch: Dataset, mlp: MlpParams, create: bool = True
) -> Tuple[np.ndarray, EmbedTrace]:
    dim = bank.embed_dim
    user, user_rows = bank.vectors("user", batch.user_ids, create)
    item, item_rows = bank.vectors("item", batch.item_ids, create)
    cat, cat_rows = bank.vectors("category", batch.category_ids, create)

    mask = batch.seq_mask
    seq_item, seq_item_rows = bank.vectors("item", batch.seq_items[mask], create)
    seq_cat, seq_cat_rows = bank.vectors("category", batch.seq_cats[mask], create)
    behaviors = np.zeros((len(batch), batch.max_seq_len, 2 * dim), dtype=bank.dtype)
    behaviors[mask] = np.concatenate([seq_item, seq_cat], axis=1)

    trace = EmbedTrace(
        rows={"user": user_rows, "item": item_rows, "category": cat_rows},
        seq_rows={"item": seq_item_rows, "category": seq_cat_rows},
        mask=mask,
        seq_lens=batch.seq_lens,
        behaviors=behaviors,
    )
    if mlp.pooling == "attention":
        pooled, trace.attention = _attention_forward(mlp, np.concatenate([item, cat], axis=1), behaviors, mask)
    else:
        denom = np.maximum(batch.seq_lens, 1).astype(bank.dtype)[:, None]
        pooled = behaviors.sum(axis=1) / denom
    return np.concatenate([user, item, cat, pooled], axis=1), trace


def embed_forward(
    bank: EmbeddingBank, sample: SparseSample, pooling: Optional[str], mlp: MlpParams
) -> Tuple[np.ndarray, EmbedTrace]:
    if pooling is not None and pooling != mlp.pooling:
        raise ShapeError(f"pooling {pooling!r} does not match MLP built for {mlp.pooling!r}")
    batch = Dataset.from_samples([sample], max_seq_len=max(1, len(sample.behavior_seq)))
    x, trace = embed_batch(bank, batch, mlp)
    scalar_ids = {"user": sample.user_id, "item": sample.item_id, "category": sample.category_id}
    for name, rows in trace.rows.items():
        trace.touched.append((name, scalar_ids[name], int(rows[0])))
    for (item, cat), irow, crow in zip(sample.behavior_seq, trace.seq_rows["item"], trace.seq_rows["category"]):
        trace.touched.append(("item", item, int(irow)))
        trace.touched.append(("category", cat, int(crow)))
    return x[0], trace


def loss_bce(logit, label):
    """max(z, 0) - z*y + log(1 + exp(-|z|))"""
    z = np.asarray(logit)
    return np.maximum(z, 0) - z * label + np.log1p(np.exp(-np.abs(z)))


def predict_batch(mlp: MlpParams, bank: EmbeddingBank, batch: Dataset) -> np.ndarray:
    """Click probabilities without creating rows; unseen IDs read their init value."""
    x, _ = embed_batch(bank, batch, mlp, create=False)
    logits, _ = mlp_forward(mlp, x)
    return numerics.sigmoid(logits)


# --------------------------------------------------------------------------- #
# Backward
# --------------------------------------------------------------------------- #
@dataclass
class RowGrads:
    rows: np.ndarray
    grads: np.ndarray


@dataclass
class Gradients:
    mlp: Dict[str, np.ndarray]
    rows: Dict[str, RowGrads]
    loss: float
    loss_sum: float
    count: int


def _tower_backward(
    mlp: MlpParams, names: List[str], trace: MlpTrace, d_out: np.ndarray, grads: Dict[str, np.ndarray]
) -> np.ndarray:
    d = d_out[:, None]
    layers = list(mlp.layers(names))
    for i in range(len(layers) - 1, -1, -1):
        name, weight, _ = layers[i]
        if i < len(layers) - 1:
            d = d * (trace.preacts[i] > 0)
        grads[f"{name}.weight"] = numerics.matmul(trace.inputs[i].T, d)
        grads[f"{name}.bias"] = d.sum(axis=0)
        d = numerics.matmul(d, weight.T)
    return d


def _attention_backward(
    mlp: MlpParams, trace: AttentionTrace, d_pooled: np.ndarray, grads: Dict[str, np.ndarray]
) -> Tuple[np.ndarray, np.ndarray]:
    w, beh, cand = trace.weights, trace.behaviors, trace.candidate
    b, length, width = beh.shape
    d_beh = w[..., None] * d_pooled[:, None, :]
    d_w = (d_pooled[:, None, :] * beh).sum(axis=-1)
    d_scores = w * (d_w - (w * d_w).sum(axis=-1, keepdims=True))
    dz = _tower_backward(mlp, mlp.attention_names, trace.mlp, d_scores.reshape(-1), grads).reshape(b, length, 4 * width)
    dz_c, dz_b, dz_d, dz_p = np.split(dz, 4, axis=-1)
    d_cand = (dz_c + dz_d + dz_p * beh).sum(axis=1)
    d_beh = d_beh + dz_b - dz_d + dz_p * cand[:, None, :]
    return d_cand, d_beh


def _aggregate(rows: np.ndarray, grads: np.ndarray) -> RowGrads:
    uniq, inverse = np.unique(rows, return_inverse=True)
    agg = numerics.zeros(uniq.size, grads.shape[1]).astype(grads.dtype, copy=False)
    numerics.scatter_add_rows(agg, inverse.reshape(-1), grads, inplace=True)
    return RowGrads(rows=uniq, grads=agg)


def backward_batch(mlp: MlpParams, bank: EmbeddingBank, batch: Dataset) -> Gradients:
    """
    Mean BCE over the batch and its exact gradients w.r.t. every MLP and
    attention tensor and every embedding row the batch touched. Duplicate rows
    are summed in lookup order.
    """
    dim = bank.embed_dim
    x, etrace = embed_batch(bank, batch, mlp)
    logits, mtrace = mlp_forward(mlp, x)
    y = batch.labels.astype(x.dtype)
    losses = loss_bce(logits, y)
    n = len(batch)
    loss_sum = float(losses.sum(dtype=np.float64))

    grads: Dict[str, np.ndarray] = {}
    d_logit = (numerics.sigmoid(logits) - y) / n
    dx = _tower_backward(mlp, mlp.dense_names, mtrace, d_logit, grads)
    d_user, d_item, d_cat = dx[:, :dim], dx[:, dim : 2 * dim], dx[:, 2 * dim : 3 * dim]
    d_pooled = dx[:, 3 * dim :]

    if etrace.attention is not None:
        d_cand, d_beh = _attention_backward(mlp, etrace.attention, d_pooled, grads)
        d_item = d_item + d_cand[:, :dim]
        d_cat = d_cat + d_cand[:, dim:]
    else:
        denom = np.maximum(etrace.seq_lens, 1).astype(dx.dtype)[:, None, None]
        d_beh = np.broadcast_to(d_pooled[:, None, :], etrace.behaviors.shape) / denom
    d_beh = d_beh[etrace.mask]

    row_grads = {
        "user": _aggregate(etrace.rows["user"], d_user),
        "item": _aggregate(
            np.concatenate([etrace.rows["item"], etrace.seq_rows["item"]]),
            np.concatenate([d_item, d_beh[:, :dim]]),
        ),
        "category": _aggregate(
            np.concatenate([etrace.rows["category"], etrace.seq_rows["category"]]),
            np.concatenate([d_cat, d_beh[:, dim:]]),
        ),
    }

    if not np.isfinite(loss_sum):
        raise NumericError(f"non-finite loss {loss_sum} over {n} samples")
    for name, g in grads.items():
        numerics.assert_finite(f"gradient of {name}", g)
    for name, rg in row_grads.items():
        numerics.assert_finite(f"gradient of {name} embedding rows", rg.grads)
    # reorder MLP grads to definition order
    ordered = {name: grads[name] for name in mlp.tensors}
    return Gradients(mlp=ordered, rows=row_grads, loss=loss_sum / n, loss_sum=loss_sum, count=n)


def backward(mlp: MlpParams, bank: EmbeddingBank, sample: SparseSample, label: Optional[int] = None) -> Gradients:
    """Single-sample gradients; ``label`` overrides the sample's own label."""
    if label is not None and label != sample.label:
        sample = SparseSample(sample.user_id, sample.item_id, sample.category_id, sample.behavior_seq, label, sample.timestamp)
    batch = Dataset.from_samples([sample], max_seq_len=max(1, len(sample.behavior_seq)))
    return backward_batch(mlp, bank, batch)


def sample_loss(mlp: MlpParams, bank: EmbeddingBank, sample: SparseSample) -> float:
    batch = Dataset.from_samples([sample], max_seq_len=max(1, len(sample.behavior_seq)))
    x, _ = embed_batch(bank, batch, mlp)
    logits, _ = mlp_forward(mlp, x)
    return float(loss_bce(logits, batch.labels.astype(x.dtype)).mean())
