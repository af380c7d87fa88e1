import numpy as np
import pytest

from errors import RowIndexError, ShapeError
from model import EmbeddingBank, MlpParams, RowGrads, backward_batch
from optim import OptimState, SlotTable


def _bank(n=5, dim=2):
    bank = EmbeddingBank(1, 3, dim)
    bank.lookup("item", np.arange(n, dtype=np.uint64))
    return bank


def _mlp():
    return MlpParams.build(2, [], rng=np.random.default_rng(0))


def test_sgd_dense_step():
    mlp = _mlp()
    before = mlp.tensors["output.weight"].copy()
    grad = np.ones_like(before)
    OptimState("sgd", learning_rate=0.1).step_dense(mlp, {"output.weight": grad})
    assert np.allclose(mlp.tensors["output.weight"], before - 0.1)


def test_adam_first_step_moves_by_learning_rate():
    mlp = _mlp()
    before = mlp.tensors["output.bias"].copy()
    opt = OptimState("adam", learning_rate=0.01)
    opt.step_dense(mlp, {"output.bias": np.array([0.3], dtype=before.dtype)})
    # bias-corrected first step is lr * g / (|g| + eps)
    assert mlp.tensors["output.bias"][0] == pytest.approx(before[0] - 0.01, rel=1e-5)
    assert opt.dense_steps["output.bias"] == 1


def test_adagrad_accumulates():
    mlp = _mlp()
    opt = OptimState("adagrad", learning_rate=0.1, initial_accumulator=0.0)
    g = np.array([2.0], dtype=mlp.tensors["output.bias"].dtype)
    opt.step_dense(mlp, {"output.bias": g})
    opt.step_dense(mlp, {"output.bias": g})
    assert opt.dense["output.bias"]["acc"][0] == pytest.approx(8.0)


def test_dense_shape_mismatch():
    with pytest.raises(ShapeError):
        OptimState("sgd").step_dense(_mlp(), {"output.weight": np.ones((3, 1))})


@pytest.mark.parametrize("kind", ["sgd", "adagrad", "adam"])
def test_sparse_step_is_lazy(kind):
    bank = _bank()
    before = bank.matrix("item").copy()
    opt = OptimState(kind, learning_rate=0.1)
    grads = {"item": RowGrads(rows=np.array([1, 3]), grads=np.ones((2, 2), dtype=bank.dtype))}
    opt.step_sparse(bank, grads)
    after = bank.matrix("item")
    assert np.array_equal(after[[0, 2, 4]], before[[0, 2, 4]])
    assert not np.array_equal(after[[1, 3]], before[[1, 3]])
    assert opt.sparse_slot_count(1) == 2


def test_sparse_row_steps_are_per_row():
    bank = _bank()
    opt = OptimState("adam", learning_rate=0.1)
    g = np.ones((1, 2), dtype=bank.dtype)
    opt.step_sparse(bank, {"item": RowGrads(np.array([0]), g)})
    opt.step_sparse(bank, {"item": RowGrads(np.array([0]), g)})
    opt.step_sparse(bank, {"item": RowGrads(np.array([4]), g)})
    table = opt.sparse[(1, "item")]
    steps = dict(zip(table.ids.tolist(), table.steps.tolist()))
    assert steps == {0: 2, 4: 1}


def test_sparse_out_of_range_row():
    bank = _bank(n=2)
    with pytest.raises(RowIndexError):
        OptimState("sgd").step_sparse(bank, {"item": RowGrads(np.array([2]), np.ones((1, 2), dtype=bank.dtype))})


def test_reset_embedding_slots_leaves_dense_state(tiny_split, tiny_model_cfg):
    train, _ = tiny_split
    mlp = MlpParams.init(tiny_model_cfg, np.random.default_rng(0))
    bank = EmbeddingBank.from_config(1, 7, tiny_model_cfg)
    opt = OptimState("adam", learning_rate=0.01)
    grads = backward_batch(mlp, bank, train.slice(0, 64))
    opt.step_dense(mlp, grads.mlp)
    opt.step_sparse(bank, grads.rows)

    mlp_before = mlp.copy()
    dense_before = {n: {s: v.copy() for s, v in slots.items()} for n, slots in opt.dense.items()}
    steps_before = dict(opt.dense_steps)

    opt.reset_embedding_slots(1)
    bank.reinitialize(8)

    assert opt.sparse_slot_count(1) == 0
    assert mlp.checksum() == mlp_before.checksum()
    assert opt.dense_steps == steps_before
    for name, slots in dense_before.items():
        for slot, value in slots.items():
            assert np.array_equal(opt.dense[name][slot], value)


def test_reset_only_touches_one_bank():
    a, b = _bank(), _bank()
    b.bank_id = 2
    opt = OptimState("adam")
    g = {"item": RowGrads(np.array([0]), np.ones((1, 2), dtype=a.dtype))}
    opt.step_sparse(a, g)
    opt.step_sparse(b, g)
    opt.reset_embedding_slots(1)
    assert opt.sparse_slot_count(1) == 0
    assert opt.sparse_slot_count(2) == 1


def test_shared_slot_key():
    a, b = _bank(), _bank()
    b.bank_id = 2
    opt = OptimState("adam")
    g = {"item": RowGrads(np.array([0]), np.ones((1, 2), dtype=a.dtype))}
    opt.step_sparse(a, g, slot_key=0)
    opt.step_sparse(b, g, slot_key=0)
    assert opt.sparse[(0, "item")].steps.tolist() == [2]


def test_unknown_kind():
    with pytest.raises(ValueError):
        OptimState("rmsprop")


def test_slot_table_grows_by_doubling():
    table = SlotTable(2, np.float32, ("acc",), initial=0.1, capacity=4)
    capacities = []
    for key in range(1, 11):
        table.locate(np.array([key], dtype=np.uint64))
        capacities.append(table.capacity)
    assert capacities == [4, 4, 4, 4, 8, 8, 8, 8, 16, 16]
    assert table.ids.tolist() == list(range(1, 11))
    assert table.slots["acc"].shape == (10, 2)
    assert np.all(table.slots["acc"] == np.float32(0.1))
    assert table.locate(np.array([3, 11], dtype=np.uint64)).tolist() == [2, 10]
    assert len(table) == 11


def test_slot_table_views_write_through():
    table = SlotTable(2, np.float64, ("m", "v"))
    idx = table.locate(np.array([7, 9], dtype=np.uint64))
    table.steps[idx] += 1
    table.slots["m"][idx] = 1.5
    assert table.steps.tolist() == [1, 1]
    assert np.all(table.slots["m"] == 1.5)
    restored = SlotTable.restore(2, np.float64, ("m", "v"), 0.0, table.ids, table.steps, table.slots)
    assert restored.locate(np.array([9], dtype=np.uint64)).tolist() == [1]
    assert np.array_equal(restored.slots["m"], table.slots["m"])
