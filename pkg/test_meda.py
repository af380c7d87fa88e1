from dataclasses import replace

import numpy as np
import pytest

from config import ExperimentConfig, OptimConfig, build_experiment_config, load_experiment_config
from data import Dataset, split_continual
from errors import ConfigError, DataError
from main import ExperimentRunner
from meda import (
    SNAPSHOT_BANK,
    Plan,
    Schedule,
    TrainSettings,
    TrainingPass,
    bank_seed,
    build_plan,
    epoch_seed,
    evaluate,
    execute_plan,
    init_mlp,
    plan_direct,
    plan_meda_nc,
    plan_variant,
    predict,
    run_direct,
    run_meda_c,
    run_meda_nc,
    run_variant,
    train_one_epoch,
    uses_continual_data,
)
from model import EmbeddingBank, backward_batch
from optim import OptimState


def _metrics(records):
    """Everything but the variant tag and run id."""
    return [
        (r.dataset_index, r.epoch, r.bank_id, r.train_mean_loss, r.test_auc, r.test_logloss, r.wall_ms)
        for r in records
    ]


# --------------------------------------------------------------------------- #
# Degenerate equivalences
# --------------------------------------------------------------------------- #
def test_meda_nc_with_one_epoch_is_the_single_epoch_baseline(tiny_split, settings):
    train, test = tiny_split
    direct = run_direct(1, train, test, settings)
    nc = run_meda_nc(1, train, test, settings)
    assert _metrics(nc.records) == _metrics(direct.records)
    assert nc.mlp.checksum() == direct.mlp.checksum()
    assert nc.bank.checksum() == direct.bank.checksum()


def test_meda_c_on_one_dataset_matches_meda_nc(tiny_split, settings):
    train, test = tiny_split
    nc = run_meda_nc(3, train, test, settings)
    c = run_meda_c(Schedule.full(3, 1), [train], test, settings)
    assert len(c.records) == 3
    assert _metrics(c.records) == _metrics(nc.records)
    assert c.mlp.checksum() == nc.mlp.checksum()
    assert c.bank.checksum() == nc.bank.checksum()


def test_direct_and_meda_nc_share_their_first_epoch(tiny_split, settings):
    train, test = tiny_split
    direct = run_direct(3, train, test, settings)
    nc = run_meda_nc(3, train, test, settings)
    assert _metrics(direct.records[:1]) == _metrics(nc.records[:1])
    assert _metrics(direct.records[1:]) != _metrics(nc.records[1:])


def test_runs_are_deterministic(tiny_split, settings):
    train, test = tiny_split
    a = run_meda_nc(2, train, test, settings)
    b = run_meda_nc(2, train, test, settings)
    assert a.records == b.records
    assert a.mlp.checksum() == b.mlp.checksum()


# --------------------------------------------------------------------------- #
# One pass
# --------------------------------------------------------------------------- #
def test_train_one_epoch_leaves_untouched_rows_alone(tiny_split, settings):
    train, _ = tiny_split
    mlp = init_mlp(settings.model, 1)
    bank = EmbeddingBank.from_config(1, 3, settings.model)
    unseen = np.array([10**9, 10**9 + 1], dtype=np.uint64)
    bank.lookup("user", unseen)
    bank.lookup("item", unseen)
    user_before = bank.vectors("user", unseen, create=False)[0].copy()
    item_before = bank.vectors("item", unseen, create=False)[0].copy()

    _, _, loss = train_one_epoch(mlp, bank, train, OptimState("adam", 0.01), epoch_seed(1, 1, 1), batch_size=32)

    assert loss > 0
    assert np.array_equal(bank.vectors("user", unseen, create=False)[0], user_before)
    assert np.array_equal(bank.vectors("item", unseen, create=False)[0], item_before)


def test_zero_learning_rate_keeps_parameters(tiny_split, settings):
    train, _ = tiny_split
    mlp = init_mlp(settings.model, 1)
    bank = EmbeddingBank.from_config(1, 3, settings.model)
    expected = backward_batch(mlp.copy(), bank.copy(), train).loss
    before = mlp.checksum()
    _, _, loss = train_one_epoch(mlp, bank, train, OptimState("adam", 0.0), epoch_seed(1, 1, 1), batch_size=32)
    assert mlp.checksum() == before
    for name in bank.fields():
        assert np.array_equal(bank.matrix(name), bank.init_vectors(name, bank.ids(name)))
    assert loss == pytest.approx(expected, rel=1e-5)


def test_train_one_epoch_errors(tiny_split, settings):
    train, _ = tiny_split
    mlp = init_mlp(settings.model, 1)
    bank = EmbeddingBank.from_config(1, 3, settings.model)
    with pytest.raises(DataError):
        train_one_epoch(mlp, bank, train.take([]), OptimState(), 0)
    with pytest.raises(ConfigError):
        train_one_epoch(mlp, bank, train, OptimState(), 0, batch_size=0)


def test_predict_is_independent_of_worker_count(tiny_split, settings):
    _, test = tiny_split
    mlp = init_mlp(settings.model, 1)
    bank = EmbeddingBank.from_config(1, 3, settings.model)
    serial = predict(mlp, bank, test, batch_size=16, workers=1)
    threaded = predict(mlp, bank, test, batch_size=16, workers=3)
    assert np.array_equal(serial, threaded)
    assert bank.row_count() == 0


def test_single_class_test_set_records_nan_auc(tiny_split, settings):
    _, test = tiny_split
    positives = test.take(np.flatnonzero(test.labels == 1))
    mlp = init_mlp(settings.model, 1)
    bank = EmbeddingBank.from_config(1, 3, settings.model)
    test_auc, test_logloss = evaluate(mlp, bank, positives)
    assert np.isnan(test_auc)
    assert test_logloss > 0


# --------------------------------------------------------------------------- #
# Banks and optimizer slots across passes
# --------------------------------------------------------------------------- #
def test_meda_nc_releases_old_banks_and_their_slots(tiny_split, settings):
    train, test = tiny_split
    result = run_meda_nc(3, train, test, settings)
    assert set(result.banks) == {3}
    assert result.optimizer.sparse_slot_count(1) == 0
    assert result.optimizer.sparse_slot_count(2) == 0
    assert result.optimizer.sparse_slot_count(3) > 0
    assert [r.bank_id for r in result.records] == [1, 2, 3]


def test_keep_embed_slots_shares_one_slot_table(tiny_split, settings):
    train, test = tiny_split
    result = run_meda_nc(2, train, test, replace(settings, keep_embed_slots=True))
    assert result.optimizer.sparse_slot_count(0) > 0
    assert result.optimizer.sparse_slot_count(2) == 0


def test_meda_c_keeps_every_bank(tiny_split, settings):
    train, test = tiny_split
    parts = split_continual(train, 2)
    result = run_meda_c(Schedule.full(2, 2), parts, test, settings)
    assert set(result.banks) == {1, 2}
    assert [(r.dataset_index, r.bank_id) for r in result.records] == [(1, 1), (1, 2), (2, 1), (2, 2)]


def test_single_pass_plans_refuse_a_repeat(tiny_split, settings):
    train, test = tiny_split
    plan = Plan("meda_c", (TrainingPass(1, 1, 1), TrainingPass(1, 2, 1)), initial_banks=((1, 9),), single_pass=True)
    with pytest.raises(ConfigError):
        execute_plan(plan, [train], test, settings)


def test_meda_c_needs_enough_datasets(tiny_split, settings):
    train, test = tiny_split
    with pytest.raises(ConfigError):
        run_meda_c(Schedule.full(2, 2), [train], test, settings)


def test_k_must_be_positive(tiny_split, settings):
    train, test = tiny_split
    with pytest.raises(ConfigError):
        run_direct(0, train, test, settings)
    with pytest.raises(ConfigError):
        run_meda_nc(0, train, test, settings)


# --------------------------------------------------------------------------- #
# Schedules and plans
# --------------------------------------------------------------------------- #
def test_schedule_validation():
    with pytest.raises(ConfigError):
        Schedule(2, 1, ((1, 3),))
    with pytest.raises(ConfigError):
        Schedule(2, 1, ((2, 1),))
    with pytest.raises(ConfigError):
        Schedule(2, 1, ((1, 1), (1, 1)))
    with pytest.raises(ConfigError):
        Schedule(0, 1, ())


def test_schedule_orders():
    assert Schedule.full(2, 2).selection == ((1, 1), (1, 2), (2, 1), (2, 2))
    assert Schedule.reversed_after_first(3, 2).selection == ((1, 1), (1, 2), (1, 3), (2, 3), (2, 2), (2, 1))
    assert Schedule.omit_after_first(4, 2, "even").selection[4:] == ((2, 1), (2, 3))
    assert Schedule.omit_after_first(4, 2, "odd").selection[4:] == ((2, 2), (2, 4))


def test_bank_seeds_follow_base_xor_epoch():
    plan = plan_meda_nc(3, 40)
    assert [p.bank_seed for p in plan.passes] == [41, 42, 43]
    assert [p.release for p in plan.passes] == [(), (1,), (2,)]
    assert plan_direct(3, 40).initial_banks == ((1, 41),)
    assert bank_seed(40, 2) == 42


def test_variant_plans():
    same_emb = plan_variant("emb_same_init", 3, 40)
    assert [p.bank_seed for p in same_emb.passes] == [None, 41, 41]
    same_mlp = plan_variant("mlp_same_init", 3, 40)
    assert [p.mlp_stream for p in same_mlp.passes] == [None, (), ()]
    reinit_mlp = plan_variant("mlp_reinit", 3, 40)
    assert [p.mlp_stream for p in reinit_mlp.passes] == [None, (2,), (3,)]
    fix_after = plan_variant("emb_fix_after_1", 3, 40)
    assert [p.train_embedding for p in fix_after.passes] == [True, False, False]
    multi = plan_variant("medac_multi_mlp", 2, 40, T=2)
    assert [p.mlp_stream for p in multi.passes] == [None, (1, 2), None, None]


def test_d1_emb_as_fixed_plan():
    plan = plan_variant("d1_emb_as_fixed", 3, 40, T=2)
    assert [(p.dataset_index, p.epoch, p.bank_key, p.train_embedding) for p in plan.passes] == [
        (1, 1, 1, True), (2, 1, 1, True), (2, 2, SNAPSHOT_BANK, False), (2, 3, SNAPSHOT_BANK, False),
    ]
    assert plan.passes[0].snapshot_to == SNAPSHOT_BANK
    multi = plan_variant("d1_emb_as_initial", 2, 40, T=2, d1_mode="multi")
    assert [(p.dataset_index, p.bank_key) for p in multi.passes] == [(1, 1), (1, 2), (2, 2), (2, 2)]


def test_plan_variant_errors():
    with pytest.raises(ConfigError):
        plan_variant("emb_melt", 2, 1)
    with pytest.raises(ConfigError):
        plan_variant("medac_emb_reuse", 2, 1, T=1)


def test_build_plan_from_config():
    cfg = build_experiment_config({"data": {"T": 2}, "run": {"method": "meda_c", "k": 2, "schedule": [[1, 1], [1, 2], [2, 2]]}})
    plan = build_plan(cfg)
    assert [(p.dataset_index, p.bank_key) for p in plan.passes] == [(1, 1), (1, 2), (2, 2)]
    assert plan.single_pass
    assert uses_continual_data(cfg)
    assert not uses_continual_data(ExperimentConfig())
    variant = build_experiment_config({"data": {"T": 2}, "run": {"method": "variant:medac_omit_odd", "k": 2}})
    assert uses_continual_data(variant)
    assert build_plan(variant).variant == "medac_omit_odd"


# --------------------------------------------------------------------------- #
# Ablation behaviour
# --------------------------------------------------------------------------- #
def test_emb_fix_keeps_embeddings_at_their_init(tiny_split, settings):
    train, test = tiny_split
    result = run_variant("emb_fix", 2, [train], test, settings)
    bank = result.bank
    assert bank.row_count() > 0
    for name in bank.fields():
        assert np.array_equal(bank.matrix(name), bank.init_vectors(name, bank.ids(name)))


def test_mlp_fix_keeps_the_mlp_at_its_init(tiny_split, settings):
    train, test = tiny_split
    result = run_variant("mlp_fix", 2, [train], test, settings)
    assert result.mlp.checksum() == init_mlp(settings.model, settings.base_seed).checksum()


def test_single_dataset_variants_train_on_the_concatenation(tiny_split, settings):
    train, test = tiny_split
    whole = run_variant("emb_reinit", 2, [train], test, settings)
    parts = run_variant("emb_reinit", 2, split_continual(train, 2), test, settings)
    assert whole.records == parts.records


def test_d1_emb_as_fixed_freezes_the_snapshot(tiny_split, settings):
    train, test = tiny_split
    snapshots = []

    def capture(state, plan):
        if state.next_pass == 1:
            snapshots.append(state.banks[SNAPSHOT_BANK].copy())

    result = run_variant("d1_emb_as_fixed", 3, split_continual(train, 2), test, replace(settings, on_pass_end=capture))
    snap = snapshots[0]
    frozen = result.banks[SNAPSHOT_BANK]
    for name in snap.fields():
        ids, values = snap.sorted_items(name)
        assert np.array_equal(frozen.vectors(name, ids, create=False)[0], values)
    assert len(result.records) == 4


def test_loss_curve_windows(tiny_split, settings):
    train, test = tiny_split
    result = run_meda_nc(2, train, test, replace(settings, loss_curve_every=4))
    n_batches = -(-len(train) // settings.batch_size)
    expected = list(range(4, n_batches + 1, 4))
    if expected[-1] != n_batches:
        expected.append(n_batches)
    assert [p.batch for p in result.loss_curve if p.epoch == 1] == expected
    assert {p.bank_id for p in result.loss_curve} == {1, 2}
    assert all(p.window_mean_loss > 0 for p in result.loss_curve)


def test_other_optimizers_run(tiny_split, settings):
    train, test = tiny_split
    for kind in ("sgd", "adagrad"):
        result = run_meda_nc(2, train, test, replace(settings, optim=OptimConfig(kind=kind)))
        assert all(0.0 <= r.test_auc <= 1.0 for r in result.records)


def test_attention_pooling_runs(tiny_split, settings):
    train, test = tiny_split
    model = settings.model.model_copy(update={"pooling": "attention", "attention_hidden": [4]})
    result = run_meda_nc(2, train, test, replace(settings, model=model))
    assert "attention_out.weight" in result.mlp.tensors
    assert len(result.records) == 2


# --------------------------------------------------------------------------- #
# Desk-scale reproductions on the shipped benchmark
# --------------------------------------------------------------------------- #
def _benchmark(**run):
    cfg = load_experiment_config("configs/benchmark.json", {f"run.{k}": v for k, v in run.items()})
    train_sets, test = ExperimentRunner(cfg).load_data()
    return train_sets, test, TrainSettings.from_experiment(cfg)


@pytest.mark.slow
def test_direct_overfits_while_meda_nc_improves():
    train_sets, test, settings_ = _benchmark(k=4)
    direct = run_direct(4, train_sets[0], test, settings_).aucs
    nc = run_meda_nc(4, train_sets[0], test, settings_).aucs
    assert direct[1] <= direct[0] - 0.003
    assert nc[1] >= nc[0] + 0.003
    running = np.maximum.accumulate(nc)
    assert np.all(np.asarray(nc) >= running - 0.005)


@pytest.mark.slow
def test_fixed_embedding_does_not_collapse():
    train_sets, test, settings_ = _benchmark(k=8)
    aucs = run_variant("emb_fix", 8, train_sets, test, settings_).aucs
    running = np.maximum.accumulate(aucs)
    assert np.all(np.asarray(aucs) >= running - 0.005)
