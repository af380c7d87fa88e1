import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from errors import CorruptionError, FormatError
from meda import RunState, Schedule, plan_direct, plan_meda_nc, run_meda_c, run_meda_nc
from metrics import MetricRecord
from model import EmbeddingBank, MlpParams
from optim import OptimState
from persist import (
    MANIFEST_NAME,
    METRIC_COLUMNS,
    _write_keyed_csv,
    load_checkpoint,
    load_run_state,
    metric_row,
    read_manifest,
    read_metrics_csv,
    save_checkpoint,
    save_run_state,
    write_loss_curve_csv,
    write_metrics_csv,
)


def _tree(root: Path):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def trained(tiny_split, settings):
    train, test = tiny_split
    return run_meda_c(Schedule.full(2, 1), [train], test, settings)


def test_save_load_save_is_byte_identical(tmp_path, trained):
    first = tmp_path / "a"
    second = tmp_path / "b"
    save_checkpoint(first, trained.mlp, trained.banks, trained.optimizer, {"note": "x"})
    mlp, banks, opt = load_checkpoint(first)
    save_checkpoint(second, mlp, banks, opt, {"note": "x"})
    assert _tree(first) == _tree(second)


def test_round_trip_restores_everything(tmp_path, trained):
    save_checkpoint(tmp_path / "ckpt", trained.mlp, trained.banks, trained.optimizer)
    mlp, banks, opt = load_checkpoint(tmp_path / "ckpt")
    assert mlp.checksum() == trained.mlp.checksum()
    assert list(mlp.tensors) == list(trained.mlp.tensors)
    assert set(banks) == set(trained.banks) == {1, 2}
    for key, bank in banks.items():
        original = trained.banks[key]
        assert bank.checksum() == original.checksum()
        assert bank.init_seed == original.init_seed
        for name in original.fields():
            assert np.array_equal(bank.ids(name), original.ids(name))
    assert opt.kind == trained.optimizer.kind
    assert opt.dense_steps == trained.optimizer.dense_steps
    assert set(opt.sparse) == set(trained.optimizer.sparse)
    for key, table in trained.optimizer.sparse.items():
        restored = opt.sparse[key]
        assert np.array_equal(restored.ids, table.ids)
        assert np.array_equal(restored.steps, table.steps)
        for slot, value in table.slots.items():
            assert np.array_equal(restored.slots[slot], value)


def test_vocab_and_manifest_layout(tmp_path, trained):
    save_checkpoint(tmp_path / "ckpt", trained.mlp, trained.banks, trained.optimizer)
    root = tmp_path / "ckpt"
    vocab = (root / "vocab" / "1_item.tsv").read_text().splitlines()
    first = vocab[0].split("\t")
    assert first[0] == "item" and first[2] == "0"
    manifest = read_manifest(root)
    assert manifest.dtype == "<f4"
    for entry in manifest.tensors:
        assert (root / entry.file).stat().st_size == entry.bytes
    assert not list(tmp_path.glob(".ckpt.tmp-*"))


def test_truncated_blob_is_detected(tmp_path, trained):
    save_checkpoint(tmp_path / "ckpt", trained.mlp, trained.banks, trained.optimizer)
    blob = tmp_path / "ckpt" / "tensors" / "bank_1.item.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(CorruptionError):
        load_checkpoint(tmp_path / "ckpt")


def test_flipped_byte_is_detected(tmp_path, trained):
    save_checkpoint(tmp_path / "ckpt", trained.mlp, trained.banks, trained.optimizer)
    blob = tmp_path / "ckpt" / "tensors" / "mlp.output.weight.bin"
    data = bytearray(blob.read_bytes())
    data[0] ^= 0xFF
    blob.write_bytes(bytes(data))
    with pytest.raises(CorruptionError):
        load_checkpoint(tmp_path / "ckpt")


def test_manifest_errors(tmp_path, trained):
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "nothing")
    save_checkpoint(tmp_path / "ckpt", trained.mlp, trained.banks, trained.optimizer)
    manifest_path = tmp_path / "ckpt" / MANIFEST_NAME
    raw = json.loads(manifest_path.read_text())
    raw["format_version"] = 99
    manifest_path.write_text(json.dumps(raw))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "ckpt")
    manifest_path.write_text("{not json")
    with pytest.raises(FormatError):
        read_manifest(tmp_path / "ckpt")


def test_storage_report_counts_every_bank(tmp_path):
    k, n, dim = 3, 5, 4
    banks = {}
    for key in range(1, k + 1):
        banks[key] = EmbeddingBank(key, key, dim)
        banks[key].lookup("item", np.arange(n, dtype=np.uint64))
    mlp = MlpParams.build(20, [], rng=np.random.default_rng(0))
    report = save_checkpoint(tmp_path / "ckpt", mlp, banks, OptimState())
    assert report.embedding_bytes == k * n * dim * 4
    assert report.embedding_rows == k * n
    assert [b.bank_id for b in report.banks] == [1, 2, 3]

    empty = save_checkpoint(tmp_path / "empty", mlp, {1: EmbeddingBank(1, 1, dim)}, OptimState())
    assert empty.embedding_bytes == 0
    assert save_checkpoint(tmp_path / "none", mlp, {}, OptimState()).embedding_bytes == 0


# --------------------------------------------------------------------------- #
# CSV
# --------------------------------------------------------------------------- #
def _record(run_id="r1", epoch=2, auc_value=0.75):
    return MetricRecord(run_id, "meda_nc", 1, epoch, 2, 0.5, auc_value, 0.693147, 0.0)


def test_metric_row_format():
    assert metric_row(_record()) == "r1,meda_nc,1,2,2,0.500000,0.750000,0.693147,0.000000"


def test_metrics_csv_write_and_read(tmp_path):
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, [_record(epoch=1), _record(epoch=2)])
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(METRIC_COLUMNS)
    assert lines[2] == "r1,meda_nc,1,2,2,0.500000,0.750000,0.693147,0.000000"
    assert read_metrics_csv(path) == [_record(epoch=1), _record(epoch=2)]


def test_metrics_csv_with_no_records_is_header_only(tmp_path):
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, [])
    assert path.read_text() == ",".join(METRIC_COLUMNS) + "\n"
    assert read_metrics_csv(path) == []


def test_metrics_csv_replaces_rows_of_the_same_run(tmp_path):
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, [_record("r1")])
    write_metrics_csv(path, [_record("r2")])
    write_metrics_csv(path, [_record("r1", auc_value=0.8)])
    records = read_metrics_csv(path)
    assert [(r.run_id, r.test_auc) for r in records] == [("r2", 0.75), ("r1", 0.8)]


def test_interrupted_csv_write_keeps_other_runs(tmp_path):
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, [_record("r1"), _record("r2")])
    before = path.read_bytes()

    def rows():
        yield [getattr(_record("r3"), c) for c in METRIC_COLUMNS]
        raise RuntimeError("killed mid-write")

    with pytest.raises(RuntimeError):
        _write_keyed_csv(path, METRIC_COLUMNS, rows(), {"r3"})
    assert path.read_bytes() == before
    assert [p.name for p in tmp_path.iterdir()] == ["metrics.csv"]


def test_metrics_csv_errors(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(FormatError):
        read_metrics_csv(path)
    with pytest.raises(FormatError):
        write_metrics_csv(path, [_record()])
    path.write_text(",".join(METRIC_COLUMNS) + "\nr1,meda_nc,1\n")
    with pytest.raises(FormatError):
        read_metrics_csv(path)


def test_identical_runs_write_identical_csv(tmp_path, tiny_split, settings):
    train, test = tiny_split
    for name in ("a.csv", "b.csv"):
        write_metrics_csv(tmp_path / name, run_meda_nc(2, train, test, settings).records)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_loss_curve_csv(tmp_path, tiny_split, settings):
    train, test = tiny_split
    result = run_meda_nc(1, train, test, replace(settings, loss_curve_every=5))
    path = tmp_path / "loss_curve.csv"
    write_loss_curve_csv(path, result.loss_curve)
    lines = path.read_text().splitlines()
    assert lines[0] == "run_id,variant,dataset_index,epoch,bank_id,batch,window_mean_loss"
    assert len(lines) == 1 + len(result.loss_curve)
    assert lines[1].startswith("test-run,meda_nc,1,1,1,5,")


# --------------------------------------------------------------------------- #
# Resume
# --------------------------------------------------------------------------- #
def test_resume_reproduces_an_unbroken_run(tmp_path, tiny_split, settings):
    train, test = tiny_split
    unbroken = run_meda_nc(3, train, test, settings)
    ckpt = tmp_path / "pass_001"

    def save_first(state, plan):
        if state.next_pass == 1:
            save_run_state(ckpt, state, plan)

    run_meda_nc(3, train, test, replace(settings, on_pass_end=save_first))
    plan = plan_meda_nc(3, settings.base_seed)
    state = load_run_state(ckpt, plan)
    assert state.next_pass == 1
    assert len(state.records) == 1

    resumed = run_meda_nc(3, train, test, settings, resume=state)
    assert resumed.records == unbroken.records
    assert resumed.mlp.checksum() == unbroken.mlp.checksum()
    write_metrics_csv(tmp_path / "unbroken.csv", unbroken.records)
    write_metrics_csv(tmp_path / "resumed.csv", resumed.records)
    assert (tmp_path / "unbroken.csv").read_bytes() == (tmp_path / "resumed.csv").read_bytes()


def test_resume_rejects_another_plan(tmp_path, trained, settings):
    plan = plan_meda_nc(2, settings.base_seed)
    state = RunState(trained.mlp, trained.banks, trained.optimizer, next_pass=1, current_bank=1)
    save_run_state(tmp_path / "ckpt", state, plan)
    with pytest.raises(FormatError):
        load_run_state(tmp_path / "ckpt", plan_direct(2, settings.base_seed))
    with pytest.raises(FormatError):
        load_run_state(tmp_path / "ckpt", plan_meda_nc(3, settings.base_seed))
    assert load_run_state(tmp_path / "ckpt", plan).current_bank == 1

    save_checkpoint(tmp_path / "plain", trained.mlp, trained.banks, trained.optimizer)
    with pytest.raises(FormatError):
        load_run_state(tmp_path / "plain")
