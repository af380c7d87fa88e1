import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from errors import ConfigError

logger = logging.getLogger(__name__)

# Numerics
CHECK_MODE = os.getenv("MEDA_CHECK_MODE", "0") == "1"

# Model defaults
DEFAULT_EMBED_DIM = 16
DEFAULT_HIDDEN = [64, 32]
DEFAULT_ATTENTION_HIDDEN = [32]
DEFAULT_INIT_RANGE = 0.01

# Optimizer defaults
DEFAULT_LEARNING_RATES = {"adam": 0.001, "adagrad": 0.01, "sgd": 0.01}
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
OPTIM_EPSILON = 1e-8

# Data defaults
MAX_SEQ_LEN = 20
TEST_FRACTION = 0.1
MALFORMED_LINE_LIMIT = 0.01
CALIBRATION_STEPS = 200

# Run defaults
BATCH_SIZE = 256
BASE_SEED = 2024
OUTPUT_DIR = os.getenv("MEDA_OUTPUT_DIR", "runs")
CACHE_DIR = os.getenv("MEDA_CACHE_DIR", ".meda_cache")
EVAL_WORKERS = int(os.getenv("MEDA_EVAL_WORKERS", "4"))
LOG_LEVEL = os.getenv("MEDA_LOG_LEVEL", "INFO")

# HTTP API
API_HOST = os.getenv("MEDA_API_HOST", "127.0.0.1")
API_PORT = int(os.getenv("MEDA_API_PORT", "5000"))

METHODS = ("direct", "meda_nc", "meda_c")

SINGLE_DATASET_VARIANTS = (
    "emb_fix",
    "mlp_fix",
    "emb_fix_after_1",
    "mlp_fix_after_1",
    "emb_same_init",
    "mlp_same_init",
    "emb_reinit",
    "mlp_reinit",
)
CONTINUAL_VARIANTS = (
    "d1_emb_as_initial",
    "d1_emb_as_fixed",
    "medac_emb_reuse",
    "medac_multi_mlp",
    "medac_reversed_order",
    "medac_omit_even",
    "medac_omit_odd",
)
VARIANTS = SINGLE_DATASET_VARIANTS + CONTINUAL_VARIANTS


def get_config() -> Dict[str, Any]:
    """Return application configuration dictionary"""
    return {
        "check_mode": CHECK_MODE,
        "embed_dim": DEFAULT_EMBED_DIM,
        "hidden": list(DEFAULT_HIDDEN),
        "attention_hidden": list(DEFAULT_ATTENTION_HIDDEN),
        "learning_rates": dict(DEFAULT_LEARNING_RATES),
        "max_seq_len": MAX_SEQ_LEN,
        "test_fraction": TEST_FRACTION,
        "batch_size": BATCH_SIZE,
        "base_seed": BASE_SEED,
        "output_dir": OUTPUT_DIR,
        "cache_dir": CACHE_DIR,
        "eval_workers": EVAL_WORKERS,
        "log_level": LOG_LEVEL,
        "api_host": API_HOST,
        "api_port": API_PORT,
        "methods": list(METHODS),
        "variants": list(VARIANTS),
    }


def validate_config() -> bool:
    """Validate environment-driven configuration"""
    ok = True
    if EVAL_WORKERS < 1:
        logger.error("MEDA_EVAL_WORKERS must be >= 1, got %d", EVAL_WORKERS)
        ok = False
    if LOG_LEVEL.upper() not in logging.getLevelNamesMapping():
        logger.error("MEDA_LOG_LEVEL %r is not a logging level", LOG_LEVEL)
        ok = False
    if CHECK_MODE:
        logger.warning("MEDA_CHECK_MODE=1: running with 64-bit scalars")
    return ok


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GenConfig(_Section):
    n_samples: int = Field(default=400_000, ge=1)
    n_users: int = Field(default=60_000, ge=1)
    n_items: int = Field(default=60_000, ge=1)
    n_categories: int = Field(default=500, ge=1)
    latent_dim: int = Field(default=8, ge=1)
    zipf_exponent: float = Field(default=1.1, ge=0.0)
    target_positive_rate: float = Field(default=0.5, gt=0.0, lt=1.0)
    alpha: float = Field(default=1.0, ge=0.0, description="scale of the user-item affinity in the label logit")
    max_seq_len: int = Field(default=MAX_SEQ_LEN, ge=0)
    seed: int = Field(default=BASE_SEED, ge=0)


class DataConfig(_Section):
    source: Literal["synthetic", "tsv"] = "synthetic"
    synthetic: GenConfig = Field(default_factory=GenConfig)
    train_path: Optional[str] = Field(default=None, description="TSV log; split chronologically unless test_path is set")
    test_path: Optional[str] = None
    test_fraction: float = Field(default=TEST_FRACTION, gt=0.0, lt=1.0)
    T: int = Field(default=1, ge=1)
    boundaries: Optional[List[float]] = None
    rho: float = Field(default=1.0, gt=0.0, le=1.0)
    subsample_seed: int = Field(default=BASE_SEED, ge=0)
    neg_per_pos: int = Field(default=0, ge=0)
    max_seq_len: int = Field(default=MAX_SEQ_LEN, ge=0)

    @model_validator(mode="after")
    def _check_source(self) -> "DataConfig":
        if self.source == "tsv" and not self.train_path:
            raise ValueError("train_path is required when source is 'tsv'")
        if self.boundaries is not None and len(self.boundaries) != self.T - 1:
            raise ValueError(f"boundaries must have T-1={self.T - 1} entries, got {len(self.boundaries)}")
        return self


class ModelConfig(_Section):
    embed_dim: int = Field(default=DEFAULT_EMBED_DIM, ge=1)
    hidden: List[int] = Field(default_factory=lambda: list(DEFAULT_HIDDEN))
    attention_hidden: List[int] = Field(default_factory=lambda: list(DEFAULT_ATTENTION_HIDDEN))
    pooling: Literal["mean", "attention"] = "mean"
    loss: Literal["bce"] = "bce"
    init_kind: Literal["glorot_uniform", "uniform"] = "glorot_uniform"
    init_range: float = Field(default=DEFAULT_INIT_RANGE, ge=0.0)
    label_arity: Literal[1] = 1

    @model_validator(mode="after")
    def _check_dims(self) -> "ModelConfig":
        if any(d < 1 for d in self.hidden + self.attention_hidden):
            raise ValueError("layer dims must be >= 1")
        if self.pooling == "attention" and not self.attention_hidden:
            raise ValueError("attention pooling needs at least one attention hidden layer")
        return self


class OptimConfig(_Section):
    kind: Literal["sgd", "adagrad", "adam"] = "adam"
    learning_rate: Optional[float] = Field(default=None, ge=0.0)
    beta1: float = Field(default=ADAM_BETA1, ge=0.0, lt=1.0)
    beta2: float = Field(default=ADAM_BETA2, ge=0.0, lt=1.0)
    epsilon: float = Field(default=OPTIM_EPSILON, gt=0.0)
    initial_accumulator: float = Field(default=0.0, ge=0.0)

    @model_validator(mode="after")
    def _default_lr(self) -> "OptimConfig":
        if self.learning_rate is None:
            self.learning_rate = DEFAULT_LEARNING_RATES[self.kind]
        return self


class RunConfig(_Section):
    method: str = "meda_nc"
    k: int = Field(default=2, ge=1)
    schedule: Optional[List[Tuple[int, int]]] = Field(default=None, description="(t, r) pairs, 1-based; meda_c only")
    batch_size: int = Field(default=BATCH_SIZE, ge=1)
    base_seed: int = Field(default=BASE_SEED, ge=0)
    output_dir: str = OUTPUT_DIR
    run_id: Optional[str] = None
    keep_embed_slots: bool = False
    d1_mode: Literal["once", "multi"] = "once"
    record_wall_time: bool = False
    checkpoint_every_pass: bool = False
    loss_curve_every: int = Field(default=0, ge=0)
    eval_workers: int = Field(default=EVAL_WORKERS, ge=1)
    progress: bool = False
    resume_from: Optional[str] = None

    @property
    def variant(self) -> Optional[str]:
        if self.method.startswith("variant:"):
            return self.method.split(":", 1)[1]
        return None

    @model_validator(mode="after")
    def _check_method(self) -> "RunConfig":
        variant = self.variant
        if variant is None and self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS} or variant:<tag>")
        if variant is not None and variant not in VARIANTS:
            raise ValueError(f"unknown variant tag {variant!r}")
        if self.schedule is not None and self.method != "meda_c":
            raise ValueError("schedule only applies to method meda_c")
        return self


class ExperimentConfig(_Section):
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    run: RunConfig = Field(default_factory=RunConfig)

    @model_validator(mode="after")
    def _check_consistency(self) -> "ExperimentConfig":
        run, data = self.run, self.data
        if run.variant in CONTINUAL_VARIANTS and data.T < 2:
            raise ValueError(f"variant {run.variant} needs data.T >= 2")
        if run.schedule is not None:
            seen = set()
            for t, r in run.schedule:
                if not (1 <= t <= data.T and 1 <= r <= run.k):
                    raise ValueError(f"schedule pair ({t}, {r}) outside T={data.T}, k={run.k}")
                if (t, r) in seen:
                    raise ValueError(f"schedule pair ({t}, {r}) appears twice")
                seen.add((t, r))
        return self

    def effective(self) -> Dict[str, Any]:
        """All defaults materialized, JSON-ready."""
        return self.model_dump(mode="json")

    def config_hash(self) -> str:
        payload = self.effective()
        payload["run"].pop("output_dir", None)
        payload["run"].pop("resume_from", None)
        payload["run"].pop("progress", None)
        payload["run"].pop("eval_workers", None)
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]

    def resolved_run_id(self) -> str:
        return self.run.run_id or f"{self.run.method.replace(':', '-')}-{self.config_hash()}"


def format_validation_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{path}: {err['msg']}")
    return "; ".join(parts)


def _apply_override(payload: Dict[str, Any], dotted: str, value: Any) -> None:
    node = payload
    keys = dotted.split(".")
    for key in keys[:-1]:
        node = node.setdefault(key, {})
    node[keys[-1]] = value


def build_experiment_config(payload: Dict[str, Any], overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    payload = json.loads(json.dumps(payload))
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _apply_override(payload, dotted, value)
    try:
        return ExperimentConfig.model_validate(payload)
    except ValidationError as e:
        raise ConfigError(format_validation_error(e)) from e


def load_experiment_config(path: str, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Load a JSON experiment file, apply dotted-path overrides, validate."""
    try:
        payload = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return build_experiment_config(payload, overrides)
