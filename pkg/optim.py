"""
SGD, Adagrad and Adam with dense slots for MLP tensors and lazy sparse slots
for embedding rows.

Sparse slots are keyed by (slot key, field, id) rather than by bank row, so
they survive bank reinitialization only when the caller asks for it
(``keep_embed_slots``); by default a reinitialized bank has its slots dropped
with :meth:`OptimState.reset_embedding_slots`.
"""

import logging
from typing import Dict, Optional, Tuple

import numpy as np

from config import ADAM_BETA1, ADAM_BETA2, OPTIM_EPSILON, OptimConfig
from errors import RowIndexError, ShapeError
from model import EmbeddingBank, MlpParams, RowGrads

logger = logging.getLogger(__name__)

SLOT_NAMES = {"sgd": (), "adagrad": ("acc",), "adam": ("m", "v")}


class SlotTable:
    """Per-(field, id) optimizer slots plus per-row step counters."""

    def __init__(self, dim: int, dtype: np.dtype, slot_names: Tuple[str, ...], initial: float = 0.0, capacity: int = 1024):
        self.dim = dim
        self.dtype = np.dtype(dtype)
        self.initial = initial
        self.id_to_slot: Dict[int, int] = {}
        self.n = 0
        self._ids = np.zeros(capacity, dtype=np.uint64)
        self._steps = np.zeros(capacity, dtype=np.int64)
        self._slots = {name: np.full((capacity, dim), self._fill(name), dtype=self.dtype) for name in slot_names}

    def __len__(self) -> int:
        return self.n

    @property
    def capacity(self) -> int:
        return self._ids.shape[0]

    # views over the filled prefix; writes go through to the buffers
    @property
    def ids(self) -> np.ndarray:
        return self._ids[: self.n]

    @property
    def steps(self) -> np.ndarray:
        return self._steps[: self.n]

    @property
    def slots(self) -> Dict[str, np.ndarray]:
        return {name: arr[: self.n] for name, arr in self._slots.items()}

    def _fill(self, name: str) -> float:
        return self.initial if name == "acc" else 0.0

    def _grow(self, needed: int) -> None:
        cap = max(self.capacity, 1)
        if needed <= self.capacity:
            return
        while cap < needed:
            cap *= 2
        ids = np.zeros(cap, dtype=np.uint64)
        ids[: self.n] = self._ids[: self.n]
        steps = np.zeros(cap, dtype=np.int64)
        steps[: self.n] = self._steps[: self.n]
        for name, arr in self._slots.items():
            grown = np.full((cap, self.dim), self._fill(name), dtype=self.dtype)
            grown[: self.n] = arr[: self.n]
            self._slots[name] = grown
        self._ids, self._steps = ids, steps

    def locate(self, ids: np.ndarray) -> np.ndarray:
        get = self.id_to_slot.get
        idx = np.fromiter((get(i, -1) for i in ids.tolist()), dtype=np.int64, count=ids.size)
        missing = idx < 0
        if missing.any():
            new_ids = ids[missing]
            start = self.n
            self._grow(start + new_ids.size)
            idx[missing] = np.arange(start, start + new_ids.size)
            for offset, key in enumerate(new_ids.tolist()):
                self.id_to_slot[key] = start + offset
            self._ids[start : start + new_ids.size] = new_ids
            self.n += new_ids.size
        return idx

    @classmethod
    def restore(cls, dim, dtype, slot_names, initial, ids, steps, slots) -> "SlotTable":
        ids = np.asarray(ids, dtype=np.uint64)
        table = cls(dim, dtype, slot_names, initial, capacity=max(1024, ids.size))
        table.n = ids.size
        table._ids[: ids.size] = ids
        table._steps[: ids.size] = np.asarray(steps, dtype=np.int64)
        for name in slot_names:
            table._slots[name][: ids.size] = np.asarray(slots[name], dtype=table.dtype)
        table.id_to_slot = {key: i for i, key in enumerate(ids.tolist())}
        return table


class OptimState:
    def __init__(
        self,
        kind: str = "adam",
        learning_rate: float = 0.001,
        beta1: float = ADAM_BETA1,
        beta2: float = ADAM_BETA2,
        epsilon: float = OPTIM_EPSILON,
        initial_accumulator: float = 0.0,
    ):
        if kind not in SLOT_NAMES:
            raise ValueError(f"unknown optimizer kind {kind!r}")
        self.kind = kind
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.initial_accumulator = initial_accumulator
        self.dense: Dict[str, Dict[str, np.ndarray]] = {}
        self.dense_steps: Dict[str, int] = {}
        self.sparse: Dict[Tuple[int, str], SlotTable] = {}

    @classmethod
    def from_config(cls, cfg: OptimConfig) -> "OptimState":
        return cls(cfg.kind, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.initial_accumulator)

    def hyperparams(self) -> Dict[str, float]:
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "initial_accumulator": self.initial_accumulator,
        }

    # ------------------------------------------------------------------ #
    # Update rules, shared by dense tensors and sparse row blocks
    # ------------------------------------------------------------------ #
    def _delta(self, grad: np.ndarray, slots: Dict[str, np.ndarray], steps) -> np.ndarray:
        lr = self.learning_rate
        if self.kind == "sgd":
            return lr * grad
        if self.kind == "adagrad":
            slots["acc"] += grad * grad
            return lr * grad / (np.sqrt(slots["acc"]) + self.epsilon)
        slots["m"] *= self.beta1
        slots["m"] += (1.0 - self.beta1) * grad
        slots["v"] *= self.beta2
        slots["v"] += (1.0 - self.beta2) * grad * grad
        steps = np.asarray(steps, dtype=np.float64)
        bc1 = (1.0 - self.beta1**steps).astype(grad.dtype)
        bc2 = (1.0 - self.beta2**steps).astype(grad.dtype)
        if bc1.ndim:
            bc1, bc2 = bc1[:, None], bc2[:, None]
        m_hat = slots["m"] / bc1
        v_hat = slots["v"] / bc2
        return lr * m_hat / (np.sqrt(v_hat) + self.epsilon)

    def step_dense(self, params: MlpParams, grads: Dict[str, np.ndarray]) -> MlpParams:
        """Update every MLP tensor present in ``grads``; step counters are per tensor."""
        for name, grad in grads.items():
            param = params.tensors.get(name)
            if param is None or param.shape != grad.shape:
                raise ShapeError(f"gradient for {name} has shape {grad.shape}, parameter {None if param is None else param.shape}")
            slots = self.dense.get(name)
            if slots is None:
                fill = {"acc": self.initial_accumulator}
                slots = self.dense[name] = {
                    s: np.full(param.shape, fill.get(s, 0.0), dtype=param.dtype) for s in SLOT_NAMES[self.kind]
                }
            step = self.dense_steps.get(name, 0) + 1
            self.dense_steps[name] = step
            param -= self._delta(grad.astype(param.dtype, copy=False), slots, step)
        return params

    def step_sparse(self, bank: EmbeddingBank, row_grads: Dict[str, RowGrads], slot_key: Optional[int] = None) -> EmbeddingBank:
        """
        Lazy update: only rows listed in ``row_grads`` change, and only their
        slots and step counters advance. Rows within one field must be unique
        (pre-aggregated).
        """
        key = bank.bank_id if slot_key is None else slot_key
        for field_name, rg in row_grads.items():
            if rg.rows.size == 0:
                continue
            matrix = bank.matrix(field_name)
            if rg.rows.min() < 0 or rg.rows.max() >= matrix.shape[0]:
                raise RowIndexError(f"row outside bank {bank.bank_id} field {field_name} ({matrix.shape[0]} rows)")
            table = self.sparse.get((key, field_name))
            if table is None:
                table = self.sparse[(key, field_name)] = SlotTable(
                    bank.embed_dim, bank.dtype, SLOT_NAMES[self.kind], self.initial_accumulator
                )
            idx = table.locate(bank.ids_of_rows(field_name, rg.rows))
            table.steps[idx] += 1
            slots = {name: arr[idx] for name, arr in table.slots.items()}
            delta = self._delta(rg.grads.astype(bank.dtype, copy=False), slots, table.steps[idx])
            for name, arr in table.slots.items():
                arr[idx] = slots[name]
            matrix[rg.rows] = matrix[rg.rows] - delta
        return bank

    def reset_embedding_slots(self, bank_id: int) -> "OptimState":
        """Drop sparse slots and row counters for one bank; dense slots untouched."""
        for key in [k for k in self.sparse if k[0] == bank_id]:
            del self.sparse[key]
        return self

    def reset_dense_slots(self) -> "OptimState":
        self.dense = {}
        self.dense_steps = {}
        return self

    def sparse_slot_count(self, bank_id: Optional[int] = None) -> int:
        return sum(len(t) for k, t in self.sparse.items() if bank_id is None or k[0] == bank_id)
