"""
Checkpoints and result files.

A checkpoint is a directory::

    manifest.json                 format version, model/optimizer config, tensor index
    tensors/<name>.bin            little-endian row-major blobs, one per tensor
    vocab/<bank>_<field>.tsv      field<TAB>id<TAB>row, ordered by row

Every blob is listed in the manifest with its byte length and sha256.
Directories are written under a temporary name and renamed into place.
"""

import csv
import hashlib
import json
import logging
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from errors import CorruptionError, DataError, FormatError
from meda import LossPoint, Plan, RunState
from metrics import MetricRecord
from model import EmbeddingBank, MlpParams
from optim import SLOT_NAMES, OptimState, SlotTable

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
METRIC_COLUMNS = (
    "run_id", "variant", "dataset_index", "epoch", "bank_id",
    "train_mean_loss", "test_auc", "test_logloss", "wall_ms",
)
LOSS_CURVE_COLUMNS = ("run_id", "variant", "dataset_index", "epoch", "bank_id", "batch", "window_mean_loss")


# --------------------------------------------------------------------------- #
# Manifest models
# --------------------------------------------------------------------------- #
class TensorEntry(BaseModel):
    name: str
    file: str
    dtype: str
    shape: List[int]
    bytes: int
    sha256: str


class BankEntry(BaseModel):
    bank_id: int
    init_seed: int
    embed_dim: int
    init_kind: str
    init_range: float
    fields: Dict[str, int] = Field(default_factory=dict, description="rows per field")


class SparseSlotEntry(BaseModel):
    slot_key: int
    field: str
    rows: int
    dim: int


class OptimizerEntry(BaseModel):
    kind: str
    hyperparams: Dict[str, float]
    dense_steps: Dict[str, int] = Field(default_factory=dict)
    sparse: List[SparseSlotEntry] = Field(default_factory=list)


class Manifest(BaseModel):
    format_version: int
    dtype: str
    mlp_dense: List[str]
    mlp_attention: List[str]
    mlp_tensors: List[str]
    banks: List[BankEntry]
    optimizer: OptimizerEntry
    tensors: List[TensorEntry]
    meta: Dict[str, Any] = Field(default_factory=dict)


@dataclass
class BankUsage:
    bank_id: int
    rows: int
    bytes: int


@dataclass
class StorageReport:
    """Byte accounting of a saved checkpoint; embedding bytes = sum(rows) * D * itemsize."""

    banks: List[BankUsage] = field(default_factory=list)
    mlp_bytes: int = 0
    optimizer_bytes: int = 0

    @property
    def embedding_bytes(self) -> int:
        return sum(b.bytes for b in self.banks)

    @property
    def embedding_rows(self) -> int:
        return sum(b.rows for b in self.banks)

    @property
    def total_bytes(self) -> int:
        return self.embedding_bytes + self.mlp_bytes + self.optimizer_bytes

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out.update(embedding_bytes=self.embedding_bytes, embedding_rows=self.embedding_rows, total_bytes=self.total_bytes)
        return out


# --------------------------------------------------------------------------- #
# Blob helpers
# --------------------------------------------------------------------------- #
def _le(dtype: np.dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<")


class _BlobWriter:
    def __init__(self, root: Path):
        self.root = root
        self.entries: List[TensorEntry] = []
        (root / "tensors").mkdir(parents=True)

    def add(self, name: str, array: np.ndarray) -> int:
        array = np.ascontiguousarray(array, dtype=_le(array.dtype))
        payload = array.tobytes()
        rel = f"tensors/{name}.bin"
        (self.root / rel).write_bytes(payload)
        self.entries.append(
            TensorEntry(
                name=name,
                file=rel,
                dtype=array.dtype.str,
                shape=list(array.shape),
                bytes=len(payload),
                sha256=hashlib.sha256(payload).hexdigest(),
            )
        )
        return len(payload)


def _read_blob(root: Path, entry: TensorEntry) -> np.ndarray:
    path = root / entry.file
    try:
        payload = path.read_bytes()
    except FileNotFoundError as e:
        raise CorruptionError(f"missing tensor blob {entry.file}") from e
    if len(payload) != entry.bytes:
        raise CorruptionError(f"{entry.file}: expected {entry.bytes} bytes, found {len(payload)}")
    if hashlib.sha256(payload).hexdigest() != entry.sha256:
        raise CorruptionError(f"{entry.file}: checksum mismatch")
    return np.frombuffer(payload, dtype=np.dtype(entry.dtype)).reshape(entry.shape).copy()


def _write_vocab(root: Path, bank: EmbeddingBank, field_name: str) -> None:
    vocab_dir = root / "vocab"
    vocab_dir.mkdir(exist_ok=True)
    ids = bank.ids(field_name)
    lines = [f"{field_name}\t{i}\t{row}\n" for row, i in enumerate(ids.tolist())]
    (vocab_dir / f"{bank.bank_id}_{field_name}.tsv").write_text("".join(lines))


def _read_vocab(root: Path, bank_id: int, field_name: str, expected_rows: int) -> np.ndarray:
    path = root / "vocab" / f"{bank_id}_{field_name}.tsv"
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError as e:
        raise CorruptionError(f"missing vocab map {path.name}") from e
    if len(lines) != expected_rows:
        raise CorruptionError(f"{path.name}: expected {expected_rows} rows, found {len(lines)}")
    ids = np.zeros(expected_rows, dtype=np.uint64)
    for n, line in enumerate(lines):
        parts = line.split("\t")
        if len(parts) != 3 or parts[0] != field_name or parts[2] != str(n):
            raise CorruptionError(f"{path.name}:{n + 1}: malformed vocab line")
        ids[n] = int(parts[1])
    return ids


# --------------------------------------------------------------------------- #
# Checkpoints
# --------------------------------------------------------------------------- #
def save_checkpoint(
    path,
    mlp: MlpParams,
    banks: Dict[int, EmbeddingBank],
    optim_state: OptimState,
    manifest_meta: Optional[Dict[str, Any]] = None,
) -> StorageReport:
    """Write a checkpoint directory atomically; returns its storage accounting."""
    path = Path(path)
    tmp = path.parent / f".{path.name}.tmp-{os.getpid()}"
    report = StorageReport()
    try:
        if tmp.exists():
            shutil.rmtree(tmp)
        path.parent.mkdir(parents=True, exist_ok=True)
        blobs = _BlobWriter(tmp)

        for name, tensor in mlp.tensors.items():
            report.mlp_bytes += blobs.add(f"mlp.{name}", tensor)

        bank_entries = []
        for bank_id in sorted(banks):
            bank = banks[bank_id]
            entry = BankEntry(
                bank_id=bank_id,
                init_seed=bank.init_seed,
                embed_dim=bank.embed_dim,
                init_kind=bank.init_kind,
                init_range=bank.init_range,
            )
            used = 0
            for field_name in bank.fields():
                entry.fields[field_name] = bank.row_count(field_name)
                used += blobs.add(f"bank_{bank_id}.{field_name}", bank.matrix(field_name))
                _write_vocab(tmp, bank, field_name)
            bank_entries.append(entry)
            report.banks.append(BankUsage(bank_id, bank.row_count(), used))

        optimizer = OptimizerEntry(
            kind=optim_state.kind,
            hyperparams=optim_state.hyperparams(),
            dense_steps=dict(optim_state.dense_steps),
        )
        for name in sorted(optim_state.dense):
            for slot, value in optim_state.dense[name].items():
                report.optimizer_bytes += blobs.add(f"optim.dense.{name}.{slot}", value)
        for (slot_key, field_name) in sorted(optim_state.sparse):
            table = optim_state.sparse[(slot_key, field_name)]
            prefix = f"optim.sparse.{slot_key}.{field_name}"
            report.optimizer_bytes += blobs.add(f"{prefix}.ids", table.ids)
            report.optimizer_bytes += blobs.add(f"{prefix}.steps", table.steps)
            for slot, value in table.slots.items():
                report.optimizer_bytes += blobs.add(f"{prefix}.{slot}", value)
            optimizer.sparse.append(SparseSlotEntry(slot_key=slot_key, field=field_name, rows=len(table), dim=table.dim))

        dtype = next(iter(mlp.tensors.values())).dtype
        manifest = Manifest(
            format_version=FORMAT_VERSION,
            dtype=_le(dtype).str,
            mlp_dense=list(mlp.dense_names),
            mlp_attention=list(mlp.attention_names),
            mlp_tensors=list(mlp.tensors),
            banks=bank_entries,
            optimizer=optimizer,
            tensors=blobs.entries,
            meta=manifest_meta or {},
        )
        (tmp / MANIFEST_NAME).write_text(json.dumps(manifest.model_dump(), sort_keys=True, indent=2) + "\n")

        if path.exists():
            shutil.rmtree(path)
        tmp.rename(path)
    except OSError as e:
        shutil.rmtree(tmp, ignore_errors=True)
        raise DataError(f"failed to write checkpoint {path}: {e}") from e

    logger.info(
        "Saved checkpoint %s: %d banks, %d embedding rows, %d embedding bytes",
        path, len(report.banks), report.embedding_rows, report.embedding_bytes,
    )
    return report


def read_manifest(path) -> Manifest:
    manifest_path = Path(path) / MANIFEST_NAME
    try:
        text = manifest_path.read_text()
    except FileNotFoundError as e:
        raise FormatError(f"no {MANIFEST_NAME} in {path}") from e
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"{manifest_path}: invalid JSON ({e})") from e
    if not isinstance(raw, dict) or raw.get("format_version") != FORMAT_VERSION:
        found = raw.get("format_version") if isinstance(raw, dict) else None
        raise FormatError(f"{manifest_path}: format version {found!r}, expected {FORMAT_VERSION}")
    try:
        return Manifest.model_validate(raw)
    except ValidationError as e:
        raise FormatError(f"{manifest_path}: {e.error_count()} invalid manifest fields") from e


def load_checkpoint(path) -> Tuple[MlpParams, Dict[int, EmbeddingBank], OptimState]:
    """Restore MLP, banks and optimizer exactly as saved; checksums are verified."""
    root = Path(path)
    manifest = read_manifest(root)
    by_name = {t.name: t for t in manifest.tensors}

    def blob(name: str) -> np.ndarray:
        entry = by_name.get(name)
        if entry is None:
            raise CorruptionError(f"manifest has no tensor {name}")
        return _read_blob(root, entry)

    dtype = np.dtype(manifest.dtype).newbyteorder("=")
    tensors = {name: blob(f"mlp.{name}").astype(dtype) for name in manifest.mlp_tensors}
    mlp = MlpParams(tensors, list(manifest.mlp_dense), list(manifest.mlp_attention))

    banks: Dict[int, EmbeddingBank] = {}
    for entry in manifest.banks:
        bank = EmbeddingBank(entry.bank_id, entry.init_seed, entry.embed_dim, entry.init_kind, entry.init_range, dtype)
        for field_name, rows in entry.fields.items():
            ids = _read_vocab(root, entry.bank_id, field_name, rows)
            bank.restore_field(field_name, ids, blob(f"bank_{entry.bank_id}.{field_name}").astype(dtype))
        banks[entry.bank_id] = bank

    opt = manifest.optimizer
    optim_state = OptimState(opt.kind, **opt.hyperparams)
    slot_names = SLOT_NAMES[opt.kind]
    optim_state.dense_steps = dict(opt.dense_steps)
    for name in opt.dense_steps:
        optim_state.dense[name] = {s: blob(f"optim.dense.{name}.{s}").astype(dtype) for s in slot_names}
    for sp in opt.sparse:
        prefix = f"optim.sparse.{sp.slot_key}.{sp.field}"
        optim_state.sparse[(sp.slot_key, sp.field)] = SlotTable.restore(
            sp.dim,
            dtype,
            slot_names,
            optim_state.initial_accumulator,
            blob(f"{prefix}.ids").astype(np.uint64),
            blob(f"{prefix}.steps").astype(np.int64),
            {s: blob(f"{prefix}.{s}") for s in slot_names},
        )
    return mlp, banks, optim_state


# --------------------------------------------------------------------------- #
# CSV outputs
# --------------------------------------------------------------------------- #
def _format(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def _write_keyed_csv(path, columns: Sequence[str], rows: Iterable[Sequence[Any]], run_ids: Iterable[str]) -> None:
    """Rewrite ``path`` with existing rows of other run_ids kept and new rows appended."""
    path = Path(path)
    replaced = set(run_ids)
    kept: List[List[str]] = []
    if path.exists():
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is not None and tuple(header) != tuple(columns):
                raise FormatError(f"{path}: unexpected header {header}")
            kept = [row for row in reader if row and row[0] not in replaced]
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with tmp.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(columns)
            writer.writerows(kept)
            writer.writerows([_format(v) for v in row] for row in rows)
        os.replace(tmp, path)
    except OSError as e:
        raise DataError(f"failed to write {path}: {e}") from e
    finally:
        tmp.unlink(missing_ok=True)


def metric_row(record: MetricRecord) -> str:
    return ",".join(_format(getattr(record, c)) for c in METRIC_COLUMNS)


def write_metrics_csv(path, records: Sequence[MetricRecord]) -> None:
    rows = [[getattr(r, c) for c in METRIC_COLUMNS] for r in records]
    _write_keyed_csv(path, METRIC_COLUMNS, rows, {r.run_id for r in records})


def write_loss_curve_csv(path, points: Sequence[Any]) -> None:
    rows = [[getattr(p, c) for c in LOSS_CURVE_COLUMNS] for p in points]
    _write_keyed_csv(path, LOSS_CURVE_COLUMNS, rows, {p.run_id for p in points})


def read_metrics_csv(path) -> List[MetricRecord]:
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    records = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRIC_COLUMNS:
            raise FormatError(f"{path}: expected header {','.join(METRIC_COLUMNS)}")
        for n, row in enumerate(reader, start=2):
            if len(row) != len(METRIC_COLUMNS):
                raise FormatError(f"{path}:{n}: expected {len(METRIC_COLUMNS)} columns, found {len(row)}")
            try:
                records.append(
                    MetricRecord(
                        run_id=row[0],
                        variant=row[1],
                        dataset_index=int(row[2]),
                        epoch=int(row[3]),
                        bank_id=int(row[4]),
                        train_mean_loss=float(row[5]),
                        test_auc=float(row[6]),
                        test_logloss=float(row[7]),
                        wall_ms=float(row[8]),
                    )
                )
            except ValueError as e:
                raise FormatError(f"{path}:{n}: {e}") from e
    return records


def records_to_meta(records: Sequence[MetricRecord]) -> List[Dict[str, Any]]:
    return [r.to_dict() for r in records]


def records_from_meta(items: Sequence[Dict[str, Any]]) -> List[MetricRecord]:
    return [MetricRecord(**item) for item in items]


# --------------------------------------------------------------------------- #
# Run state (resume)
# --------------------------------------------------------------------------- #
def save_run_state(path, state: RunState, plan: Plan, extra_meta: Optional[Dict[str, Any]] = None) -> StorageReport:
    """Checkpoint a run at a pass boundary, including what is needed to resume it."""
    meta = dict(extra_meta or {})
    meta.update(
        variant=plan.variant,
        plan_length=len(plan.passes),
        next_pass=state.next_pass,
        current_bank=state.current_bank,
        pass_counts=[[t, key, n] for (t, key), n in sorted(state.pass_counts.items())],
        records=records_to_meta(state.records),
        loss_curve=[asdict(p) for p in state.loss_curve],
    )
    return save_checkpoint(path, state.mlp, state.banks, state.optimizer, meta)


def load_run_state(path, plan: Optional[Plan] = None) -> RunState:
    mlp, banks, optim_state = load_checkpoint(path)
    meta = read_manifest(path).meta
    if "next_pass" not in meta:
        raise FormatError(f"{path} holds no run state to resume from")
    if plan is not None:
        if meta.get("variant") != plan.variant or meta.get("plan_length") != len(plan.passes):
            raise FormatError(
                f"{path} was written by {meta.get('variant')} ({meta.get('plan_length')} passes), "
                f"cannot resume {plan.variant} ({len(plan.passes)} passes)"
            )
    return RunState(
        mlp=mlp,
        banks=banks,
        optimizer=optim_state,
        records=records_from_meta(meta.get("records", [])),
        loss_curve=[LossPoint(**p) for p in meta.get("loss_curve", [])],
        next_pass=int(meta["next_pass"]),
        current_bank=meta.get("current_bank"),
        pass_counts={(t, key): n for t, key, n in meta.get("pass_counts", [])},
    )
