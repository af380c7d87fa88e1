"""
Training schedules: single-epoch baseline, direct multi-epoch, non-continual
MEDA (fresh embedding bank every epoch, MLP carried), continual MEDA (k banks,
each trained once per dataset, shared MLP), and the ablation variants.

Every method compiles to a :class:`Plan` - an ordered list of
:class:`TrainingPass` - and one executor runs any plan. Checkpoints are taken
at pass boundaries, so any run can be resumed from one.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from config import CONTINUAL_VARIANTS, VARIANTS, ExperimentConfig, ModelConfig, OptimConfig
from data import Dataset
from errors import ConfigError, DataError, MetricError, NumericError
from metrics import MetricRecord, auc, logloss
from model import EmbeddingBank, MlpParams, backward_batch, predict_batch
from optim import OptimState

logger = logging.getLogger(__name__)

MLP_STREAM = 0x4D4C50
SHUFFLE_STREAM = 0x5348
SNAPSHOT_BANK = 0


def derive_seed(base_seed: int, *stream: int) -> int:
    return int(np.random.SeedSequence([base_seed, *stream]).generate_state(1, dtype=np.uint64)[0])


def bank_seed(base_seed: int, r: int) -> int:
    return base_seed ^ r


def epoch_seed(base_seed: int, t: int, epoch: int) -> int:
    return derive_seed(base_seed, SHUFFLE_STREAM, t, epoch)


def init_mlp(model_cfg: ModelConfig, base_seed: int, stream: Tuple[int, ...] = ()) -> MlpParams:
    rng = np.random.default_rng(np.random.SeedSequence([base_seed, MLP_STREAM, *stream]))
    return MlpParams.init(model_cfg, rng)


# --------------------------------------------------------------------------- #
# Schedules and plans
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class Schedule:
    """Which (dataset t, bank r) pairs train, in order. Both indices are 1-based."""

    k: int
    T: int
    selection: Tuple[Tuple[int, int], ...]
    variant: str = "meda_c"

    def __post_init__(self):
        if self.k < 1 or self.T < 1:
            raise ConfigError(f"schedule needs k >= 1 and T >= 1 (k={self.k}, T={self.T})")
        seen = set()
        for t, r in self.selection:
            if not 1 <= t <= self.T:
                raise ConfigError(f"schedule references dataset {t} but T={self.T}")
            if not 1 <= r <= self.k:
                raise ConfigError(f"schedule references bank {r} but k={self.k}")
            if (t, r) in seen:
                raise ConfigError(f"schedule pair ({t}, {r}) appears twice")
            seen.add((t, r))

    @classmethod
    def full(cls, k: int, T: int, variant: str = "meda_c") -> "Schedule":
        return cls(k, T, tuple((t, r) for t in range(1, T + 1) for r in range(1, k + 1)), variant)

    @classmethod
    def reversed_after_first(cls, k: int, T: int) -> "Schedule":
        first = [(1, r) for r in range(1, k + 1)]
        rest = [(t, r) for t in range(2, T + 1) for r in range(k, 0, -1)]
        return cls(k, T, tuple(first + rest), "medac_reversed_order")

    @classmethod
    def omit_after_first(cls, k: int, T: int, parity: str) -> "Schedule":
        drop = 0 if parity == "even" else 1
        first = [(1, r) for r in range(1, k + 1)]
        rest = [(t, r) for t in range(2, T + 1) for r in range(1, k + 1) if r % 2 != drop]
        return cls(k, T, tuple(first + rest), f"medac_omit_{parity}")


@dataclass(frozen=True)
class TrainingPass:
    """One pass over ``dataset_index`` with bank ``bank_key``, followed by evaluation."""

    dataset_index: int
    epoch: int
    bank_key: int
    bank_seed: Optional[int] = None
    bank_from: Optional[int] = None
    release: Tuple[int, ...] = ()
    mlp_stream: Optional[Tuple[int, ...]] = None
    train_mlp: bool = True
    train_embedding: bool = True
    snapshot_to: Optional[int] = None


@dataclass(frozen=True)
class Plan:
    variant: str
    passes: Tuple[TrainingPass, ...]
    initial_banks: Tuple[Tuple[int, int], ...] = ()
    single_pass: bool = False


def plan_direct(k: int, base_seed: int, variant: str = "direct") -> Plan:
    passes = tuple(TrainingPass(1, r, 1) for r in range(1, k + 1))
    return Plan(variant, passes, initial_banks=((1, bank_seed(base_seed, 1)),))


def plan_meda_nc(k: int, base_seed: int, variant: str = "meda_nc", dataset_index: int = 1) -> Plan:
    passes = tuple(
        TrainingPass(dataset_index, r, r, bank_seed=bank_seed(base_seed, r), release=(r - 1,) if r > 1 else ())
        for r in range(1, k + 1)
    )
    return Plan(variant, passes)


def plan_meda_c(schedule: Schedule, base_seed: int, multi_mlp: bool = False) -> Plan:
    passes = []
    for t, r in schedule.selection:
        stream = None
        if multi_mlp and t == 1 and r >= 2:
            stream = (t, r)
        passes.append(TrainingPass(t, r, r, mlp_stream=stream))
    banks = tuple((r, bank_seed(base_seed, r)) for r in range(1, schedule.k + 1))
    return Plan(schedule.variant, tuple(passes), initial_banks=banks, single_pass=True)


def _plan_d1_then_d2(variant: str, k: int, base_seed: int, d1_mode: str, fixed: bool) -> Plan:
    if d1_mode == "multi":
        d1 = list(plan_meda_nc(k, base_seed, dataset_index=1).passes)
        d1_bank = k
    else:
        d1 = [TrainingPass(1, 1, 1, bank_seed=bank_seed(base_seed, 1))]
        d1_bank = 1
    if fixed:
        d1[-1] = replace(d1[-1], snapshot_to=SNAPSHOT_BANK)
    d2 = []
    for e in range(1, k + 1):
        if fixed and e >= 2:
            d2.append(TrainingPass(2, e, SNAPSHOT_BANK, train_embedding=False))
        else:
            d2.append(TrainingPass(2, e, d1_bank))
    return Plan(variant, tuple(d1 + d2))


def plan_variant(variant: str, k: int, base_seed: int, T: int = 1, d1_mode: str = "once") -> Plan:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant tag {variant!r}")
    if variant in CONTINUAL_VARIANTS and T < 2:
        raise ConfigError(f"variant {variant} needs at least two sub-datasets, got {T}")
    if variant == "emb_reinit":
        return plan_meda_nc(k, base_seed, variant=variant)
    if variant in ("d1_emb_as_initial", "medac_emb_reuse"):
        return _plan_d1_then_d2(variant, k, base_seed, d1_mode, fixed=False)
    if variant == "d1_emb_as_fixed":
        return _plan_d1_then_d2(variant, k, base_seed, d1_mode, fixed=True)
    if variant == "medac_multi_mlp":
        return plan_meda_c(Schedule.full(k, T, variant), base_seed, multi_mlp=True)
    if variant == "medac_reversed_order":
        return plan_meda_c(Schedule.reversed_after_first(k, T), base_seed)
    if variant in ("medac_omit_even", "medac_omit_odd"):
        return plan_meda_c(Schedule.omit_after_first(k, T, variant.rsplit("_", 1)[1]), base_seed)

    seed1 = bank_seed(base_seed, 1)
    passes = []
    for r in range(1, k + 1):
        p = TrainingPass(1, r, 1)
        if variant == "emb_fix":
            p = replace(p, train_embedding=False)
        elif variant == "mlp_fix":
            p = replace(p, train_mlp=False)
        elif variant == "emb_fix_after_1" and r >= 2:
            p = replace(p, train_embedding=False)
        elif variant == "mlp_fix_after_1" and r >= 2:
            p = replace(p, train_mlp=False)
        elif variant == "emb_same_init" and r >= 2:
            p = replace(p, bank_seed=seed1)
        elif variant == "mlp_same_init" and r >= 2:
            p = replace(p, mlp_stream=())
        elif variant == "mlp_reinit" and r >= 2:
            p = replace(p, mlp_stream=(r,))
        passes.append(p)
    return Plan(variant, tuple(passes), initial_banks=((1, seed1),))


# --------------------------------------------------------------------------- #
# Settings, state, results
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class LossPoint:
    run_id: str
    variant: str
    dataset_index: int
    epoch: int
    bank_id: int
    batch: int
    window_mean_loss: float


@dataclass
class TrainSettings:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    batch_size: int = 256
    base_seed: int = 2024
    run_id: str = "run"
    keep_embed_slots: bool = False
    eval_workers: int = 1
    record_wall_time: bool = False
    loss_curve_every: int = 0
    progress: bool = False
    d1_mode: str = "once"
    on_pass_end: Optional[Callable[["RunState", Plan], None]] = None

    @classmethod
    def from_experiment(cls, cfg: ExperimentConfig, **overrides) -> "TrainSettings":
        run = cfg.run
        settings = cls(
            model=cfg.model,
            optim=cfg.optim,
            batch_size=run.batch_size,
            base_seed=run.base_seed,
            run_id=cfg.resolved_run_id(),
            keep_embed_slots=run.keep_embed_slots,
            eval_workers=run.eval_workers,
            record_wall_time=run.record_wall_time,
            loss_curve_every=run.loss_curve_every,
            progress=run.progress,
            d1_mode=run.d1_mode,
        )
        return replace(settings, **overrides)


@dataclass
class RunState:
    mlp: MlpParams
    banks: Dict[int, EmbeddingBank]
    optimizer: OptimState
    records: List[MetricRecord] = field(default_factory=list)
    loss_curve: List[LossPoint] = field(default_factory=list)
    next_pass: int = 0
    current_bank: Optional[int] = None
    pass_counts: Dict[Tuple[int, int], int] = field(default_factory=dict)

    @classmethod
    def fresh(cls, plan: Plan, settings: TrainSettings) -> "RunState":
        banks = {
            key: EmbeddingBank.from_config(key, seed, settings.model) for key, seed in plan.initial_banks
        }
        return cls(
            mlp=init_mlp(settings.model, settings.base_seed),
            banks=banks,
            optimizer=OptimState.from_config(settings.optim),
        )


@dataclass
class RunResult:
    run_id: str
    variant: str
    records: List[MetricRecord]
    mlp: MlpParams
    bank: Optional[EmbeddingBank]
    banks: Dict[int, EmbeddingBank]
    optimizer: OptimState
    loss_curve: List[LossPoint] = field(default_factory=list)
    checkpoint: Optional[str] = None

    @property
    def aucs(self) -> List[float]:
        return [r.test_auc for r in self.records]


# --------------------------------------------------------------------------- #
# One pass and evaluation
# --------------------------------------------------------------------------- #
def train_one_epoch(
    mlp: MlpParams,
    bank: EmbeddingBank,
    train_ds: Dataset,
    optim_state: OptimState,
    epoch_seed: int,
    batch_size: int = 256,
    train_mlp: bool = True,
    train_embedding: bool = True,
    slot_key: Optional[int] = None,
    loss_curve_every: int = 0,
    on_window: Optional[Callable[[int, float], None]] = None,
    progress: bool = False,
) -> Tuple[MlpParams, EmbeddingBank, float]:
    """
    One shuffled minibatch pass; every sample visited exactly once. Returns
    the mean per-sample training loss (each batch's loss before its update).
    """
    n = len(train_ds)
    if n == 0:
        raise DataError("cannot train on an empty dataset")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng(epoch_seed).permutation(n)
    n_batches = math.ceil(n / batch_size)
    total = 0.0
    window_sum, window_count = 0.0, 0
    bar = tqdm(total=n_batches, disable=not progress, desc="train", leave=False)
    for b in range(n_batches):
        batch = train_ds.take(order[b * batch_size : (b + 1) * batch_size])
        try:
            grads = backward_batch(mlp, bank, batch)
        except NumericError as e:
            raise NumericError(f"batch {b}/{n_batches}: {e}") from e
        if train_mlp:
            optim_state.step_dense(mlp, grads.mlp)
        if train_embedding:
            optim_state.step_sparse(bank, grads.rows, slot_key=slot_key)
        total += grads.loss_sum
        if loss_curve_every:
            window_sum += grads.loss_sum
            window_count += grads.count
            if (b + 1) % loss_curve_every == 0 or b == n_batches - 1:
                if on_window is not None:
                    on_window(b + 1, window_sum / window_count)
                window_sum, window_count = 0.0, 0
        logger.debug("batch %d/%d loss %.6f", b + 1, n_batches, grads.loss)
        bar.update(1)
    bar.close()
    return mlp, bank, total / n


def predict(mlp: MlpParams, bank: EmbeddingBank, ds: Dataset, batch_size: int = 1024, workers: int = 1) -> np.ndarray:
    """Read-only scoring; batches may fan out over threads, results are collected in order."""
    starts = range(0, len(ds), batch_size)

    def score(start: int) -> np.ndarray:
        return predict_batch(mlp, bank, ds.slice(start, min(start + batch_size, len(ds))))

    if workers <= 1 or len(starts) <= 1:
        parts = [score(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(score, starts))
    return np.concatenate(parts) if parts else np.zeros(0)


def evaluate(mlp: MlpParams, bank: EmbeddingBank, test: Dataset, batch_size: int = 1024, workers: int = 1) -> Tuple[float, float]:
    probs = predict(mlp, bank, test, batch_size, workers)
    labels = test.labels
    try:
        test_auc = auc(probs, labels)
    except MetricError as e:
        logger.warning("AUC undefined on test set (%s); recording NaN", e)
        test_auc = float("nan")
    return test_auc, logloss(probs, labels)


# --------------------------------------------------------------------------- #
# Plan executor
# --------------------------------------------------------------------------- #
def _reset_slots(state: RunState, key: int, settings: TrainSettings) -> None:
    if not settings.keep_embed_slots:
        state.optimizer.reset_embedding_slots(key)


def execute_plan(
    plan: Plan,
    train_sets: Sequence[Dataset],
    test: Dataset,
    settings: TrainSettings,
    resume: Optional[RunState] = None,
) -> RunResult:
    state = resume or RunState.fresh(plan, settings)
    if state.next_pass:
        logger.info("Resuming %s at pass %d/%d", plan.variant, state.next_pass + 1, len(plan.passes))

    for index in range(state.next_pass, len(plan.passes)):
        p = plan.passes[index]
        if not 1 <= p.dataset_index <= len(train_sets):
            raise ConfigError(f"pass {index} references dataset {p.dataset_index} but only {len(train_sets)} given")
        started = time.perf_counter()

        for key in p.release:
            if state.banks.pop(key, None) is not None:
                _reset_slots(state, key, settings)
        if p.mlp_stream is not None:
            state.mlp = init_mlp(settings.model, settings.base_seed, p.mlp_stream)
            state.optimizer.reset_dense_slots()
        if p.bank_from is not None:
            state.banks[p.bank_key] = state.banks[p.bank_from].copy(bank_id=p.bank_key)
            _reset_slots(state, p.bank_key, settings)
        elif p.bank_seed is not None:
            state.banks[p.bank_key] = EmbeddingBank.from_config(p.bank_key, p.bank_seed, settings.model)
            _reset_slots(state, p.bank_key, settings)
        bank = state.banks.get(p.bank_key)
        if bank is None:
            raise ConfigError(f"pass {index} trains bank {p.bank_key} which was never initialized")

        count_key = (p.dataset_index, p.bank_key)
        state.pass_counts[count_key] = state.pass_counts.get(count_key, 0) + 1
        if plan.single_pass and state.pass_counts[count_key] > 1:
            raise ConfigError(f"bank {p.bank_key} trained twice on dataset {p.dataset_index}")

        def record_window(batch: int, value: float, p=p) -> None:
            state.loss_curve.append(
                LossPoint(settings.run_id, plan.variant, p.dataset_index, p.epoch, p.bank_key, batch, value)
            )

        _, _, mean_loss = train_one_epoch(
            state.mlp,
            bank,
            train_sets[p.dataset_index - 1],
            state.optimizer,
            epoch_seed(settings.base_seed, p.dataset_index, p.epoch),
            batch_size=settings.batch_size,
            train_mlp=p.train_mlp,
            train_embedding=p.train_embedding,
            slot_key=0 if settings.keep_embed_slots else None,
            loss_curve_every=settings.loss_curve_every,
            on_window=record_window,
            progress=settings.progress,
        )
        test_auc, test_logloss = evaluate(state.mlp, bank, test, workers=settings.eval_workers)
        wall_ms = (time.perf_counter() - started) * 1000.0 if settings.record_wall_time else 0.0
        record = MetricRecord(
            run_id=settings.run_id,
            variant=plan.variant,
            dataset_index=p.dataset_index,
            epoch=p.epoch,
            bank_id=p.bank_key,
            train_mean_loss=mean_loss,
            test_auc=test_auc,
            test_logloss=test_logloss,
            wall_ms=wall_ms,
        )
        state.records.append(record)
        logger.info(
            "%s pass %d/%d (t=%d, epoch=%d, bank=%d): train loss %.6f, test AUC %.6f, logloss %.6f",
            plan.variant, index + 1, len(plan.passes), p.dataset_index, p.epoch, p.bank_key,
            mean_loss, test_auc, test_logloss,
        )
        if p.snapshot_to is not None:
            state.banks[p.snapshot_to] = bank.copy(bank_id=p.snapshot_to)
        state.current_bank = p.bank_key
        state.next_pass = index + 1
        if settings.on_pass_end is not None:
            settings.on_pass_end(state, plan)

    final_bank = state.banks.get(state.current_bank) if state.current_bank is not None else None
    return RunResult(
        run_id=settings.run_id,
        variant=plan.variant,
        records=list(state.records),
        mlp=state.mlp,
        bank=final_bank,
        banks=state.banks,
        optimizer=state.optimizer,
        loss_curve=list(state.loss_curve),
    )


# --------------------------------------------------------------------------- #
# Entry points
# --------------------------------------------------------------------------- #
def run_direct(k: int, train: Dataset, test: Dataset, cfg: TrainSettings, resume: Optional[RunState] = None) -> RunResult:
    """Same (theta, E) trained k consecutive epochs; k=1 is the single-epoch baseline."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    return execute_plan(plan_direct(k, cfg.base_seed), [train], test, cfg, resume)


def run_meda_nc(k: int, train: Dataset, test: Dataset, cfg: TrainSettings, resume: Optional[RunState] = None) -> RunResult:
    """Epoch r trains a fresh bank seeded base_seed ^ r with the MLP carried from epoch r-1."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    return execute_plan(plan_meda_nc(k, cfg.base_seed), [train], test, cfg, resume)


def run_meda_c(
    schedule: Schedule, train_sets: Sequence[Dataset], test: Dataset, cfg: TrainSettings, resume: Optional[RunState] = None
) -> RunResult:
    """
    k banks seeded base_seed ^ r; for each selected (t, r) in order the shared
    MLP and bank r train one pass on dataset t. Unselected banks carry forward.
    """
    if schedule.T > len(train_sets):
        raise ConfigError(f"schedule expects T={schedule.T} datasets, got {len(train_sets)}")
    return execute_plan(plan_meda_c(schedule, cfg.base_seed), train_sets, test, cfg, resume)


def run_variant(
    variant: str, k: int, train_sets: Sequence[Dataset], test: Dataset, cfg: TrainSettings, resume: Optional[RunState] = None
) -> RunResult:
    """
    Ablation paradigms. Single-dataset variants train on the concatenation of
    ``train_sets``; continual variants treat them as D_1..D_T.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    plan = plan_variant(variant, k, cfg.base_seed, T=len(train_sets), d1_mode=cfg.d1_mode)
    if variant in CONTINUAL_VARIANTS:
        return execute_plan(plan, train_sets, test, cfg, resume)
    return execute_plan(plan, [Dataset.concat(list(train_sets))], test, cfg, resume)


def build_plan(cfg: ExperimentConfig) -> Plan:
    run, T = cfg.run, cfg.data.T
    if run.method == "direct":
        return plan_direct(run.k, run.base_seed)
    if run.method == "meda_nc":
        return plan_meda_nc(run.k, run.base_seed)
    if run.method == "meda_c":
        pairs = run.schedule
        schedule = Schedule(run.k, T, tuple(tuple(p) for p in pairs)) if pairs else Schedule.full(run.k, T)
        return plan_meda_c(schedule, run.base_seed)
    return plan_variant(run.variant, run.k, run.base_seed, T=T, d1_mode=run.d1_mode)


def uses_continual_data(cfg: ExperimentConfig) -> bool:
    return cfg.run.method == "meda_c" or cfg.run.variant in CONTINUAL_VARIANTS
