import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

load_dotenv()

DOSE_SCALE = 70.0
PRESCRIPTIONS = {"tv_high": 70.0, "tv_low": 54.25}
DEFAULT_OARS = ["spinal_cord", "parotid_left", "parotid_right", "oral_cavity"]
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class Config:
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
    LOG_DIR = os.getenv("LOG_DIR", "logs")
    RECONUQ_SEED = os.getenv("RECONUQ_SEED")
    RECONUQ_JOBS = os.getenv("RECONUQ_JOBS", "1")
    RECONUQ_THREADS = os.getenv("RECONUQ_THREADS", "1")

    @classmethod
    def seed_override(cls) -> Optional[int]:
        raw = os.getenv("RECONUQ_SEED", cls.RECONUQ_SEED)
        if raw is None or raw == "":
            return None
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"RECONUQ_SEED must be an integer, got {raw!r}")

    @classmethod
    def _positive_int(cls, name: str, default: str) -> int:
        raw = os.getenv(name, default)
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"{name} must be a positive integer, got {raw!r}")
        if value < 1:
            raise ConfigError(f"{name} must be a positive integer, got {raw!r}")
        return value

    @classmethod
    def jobs(cls) -> int:
        return cls._positive_int("RECONUQ_JOBS", cls.RECONUQ_JOBS)

    @classmethod
    def threads(cls) -> int:
        return cls._positive_int("RECONUQ_THREADS", cls.RECONUQ_THREADS)

    @classmethod
    def validate(cls):
        """Validate process settings"""
        level = os.getenv("LOG_LEVEL", cls.LOG_LEVEL)
        if level.upper() not in LOG_LEVELS:
            raise ConfigError(f"LOG_LEVEL must be one of {', '.join(LOG_LEVELS)}, got {level!r}")
        cls.jobs()
        cls.threads()
        cls.seed_override()


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DatasetSpec(_Section):
    n_id: int = 60
    n_ood: int = 10
    shape: List[int] = Field(default_factory=lambda: [64, 64])
    spacing: Optional[List[float]] = None
    seed: int = 42
    sigma: float = 6.0
    oars: List[str] = Field(default_factory=lambda: list(DEFAULT_OARS))
    # target centre bands, in normalised body coordinates along axis 0 (-1 top, +1 bottom)
    id_target_band: Tuple[float, float] = (-0.25, -0.05)
    ood_target_band: Tuple[float, float] = (0.25, 0.5)
    ood_cavities: Tuple[int, int] = (2, 3)

    @field_validator("n_id")
    @classmethod
    def _n_id(cls, v):
        if v < 12:
            raise ValueError("n_id must be >= 12 to support cross-validation splits")
        return v

    @field_validator("n_ood")
    @classmethod
    def _n_ood(cls, v):
        if v < 0:
            raise ValueError("n_ood must be >= 0")
        return v

    @field_validator("shape")
    @classmethod
    def _shape(cls, v):
        if len(v) not in (2, 3):
            raise ValueError("shape must have 2 or 3 axes")
        if any(s < 32 for s in v):
            raise ValueError("every axis of shape must be >= 32")
        return v

    @field_validator("sigma")
    @classmethod
    def _sigma(cls, v):
        if v <= 0:
            raise ValueError("sigma must be > 0")
        return v

    @field_validator("oars")
    @classmethod
    def _oars(cls, v):
        if len(v) < 3 or len(set(v)) != len(v):
            raise ValueError("at least 3 distinct OAR names are required")
        return v

    @model_validator(mode="after")
    def _geometry(self):
        if self.spacing is not None:
            if len(self.spacing) != len(self.shape) or any(s <= 0 for s in self.spacing):
                raise ValueError("spacing must give one positive value per axis")
        for name in ("id_target_band", "ood_target_band"):
            lo, hi = getattr(self, name)
            if not -0.8 <= lo <= hi <= 0.8:
                raise ValueError(f"{name} must satisfy -0.8 <= lo <= hi <= 0.8")
        id_lo, id_hi = self.id_target_band
        ood_lo, ood_hi = self.ood_target_band
        if not (id_hi < ood_lo or ood_hi < id_lo):
            raise ValueError("ID and OOD target bands must be disjoint")
        c_lo, c_hi = self.ood_cavities
        if not 0 <= c_lo <= c_hi:
            raise ValueError("ood_cavities must be a (min, max) pair with 0 <= min <= max")
        return self

    def resolved_spacing(self) -> Tuple[float, ...]:
        return tuple(self.spacing) if self.spacing is not None else (1.0,) * len(self.shape)


class NetConfig(_Section):
    spatial_dims: int = 2
    levels: int = 3
    base_channels: int = 16
    growth: int = 8
    convs_per_block: int = 2
    in_channels: Optional[int] = None
    dropout_p: float = 0.0
    kernel: int = 3
    recon_branch: bool = True

    @field_validator("spatial_dims")
    @classmethod
    def _dims(cls, v):
        if v not in (2, 3):
            raise ValueError("spatial_dims must be 2 or 3")
        return v

    @field_validator("levels")
    @classmethod
    def _levels(cls, v):
        if v < 2:
            raise ValueError("levels must be >= 2")
        return v

    @field_validator("base_channels")
    @classmethod
    def _base(cls, v):
        if v < 4:
            raise ValueError("base_channels must be >= 4")
        return v

    @field_validator("growth", "convs_per_block")
    @classmethod
    def _positive(cls, v):
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("dropout_p")
    @classmethod
    def _dropout(cls, v):
        if not 0.0 <= v < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        return v

    @field_validator("kernel")
    @classmethod
    def _kernel(cls, v):
        if v < 1 or v % 2 == 0:
            raise ValueError("kernel must be a positive odd integer")
        return v

    def with_channels(self, n_oars: int) -> "NetConfig":
        """Fill in in_channels from the dataset: CT + two prescription channels + one per OAR."""
        if self.in_channels is not None:
            return self
        return self.model_copy(update={"in_channels": 3 + n_oars})


class TrainConfig(_Section):
    # epochs=0 is accepted and yields the initial parameters unchanged
    epochs: int = 50
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    patch_size: List[int] = Field(default_factory=lambda: [64, 64])
    patches_per_patient: int = 4
    seed: int = 42

    @field_validator("epochs")
    @classmethod
    def _epochs(cls, v):
        if v < 0:
            raise ValueError("epochs must be >= 0")
        return v

    @field_validator("lr")
    @classmethod
    def _lr(cls, v):
        if v <= 0:
            raise ValueError("lr must be > 0")
        return v

    @field_validator("beta1", "beta2")
    @classmethod
    def _beta(cls, v):
        if not 0.0 < v < 1.0:
            raise ValueError("betas must lie in (0, 1)")
        return v

    @field_validator("eps")
    @classmethod
    def _eps(cls, v):
        if v < 0:
            raise ValueError("eps must be >= 0")
        return v

    @field_validator("batch_size", "patches_per_patient")
    @classmethod
    def _count(cls, v):
        if v < 1:
            raise ValueError("must be >= 1")
        return v


class CvConfig(_Section):
    n_folds: int = 11
    outer: int = 3
    val: int = 5
    test: int = 5
    seed: int = 42
    selected_fold: int = 0
    max_folds: Optional[int] = None

    @model_validator(mode="after")
    def _sizes(self):
        if self.n_folds < 1 or self.outer < 0 or self.val < 0 or self.test < 1:
            raise ValueError("n_folds >= 1, outer >= 0, val >= 0 and test >= 1 are required")
        if not 0 <= self.selected_fold < self.n_folds:
            raise ValueError("selected_fold must index one of the folds")
        if self.max_folds is not None and not 1 <= self.max_folds <= self.n_folds:
            raise ValueError("max_folds must lie in [1, n_folds]")
        return self

    def folds_to_run(self) -> List[int]:
        n = self.n_folds if self.max_folds is None else self.max_folds
        folds = list(range(n))
        if self.selected_fold not in folds:
            folds.append(self.selected_fold)
        return folds


class UqConfig(_Section):
    mcdo_probs: List[float] = Field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5])
    mcdo_passes: int = 20
    de_models: int = 20
    de_all_folds: bool = False
    seed: int = 42

    @field_validator("mcdo_probs")
    @classmethod
    def _probs(cls, v):
        if any(not 0.0 <= p < 1.0 for p in v):
            raise ValueError("every MCDO drop probability must lie in [0, 1)")
        return v

    @field_validator("mcdo_passes")
    @classmethod
    def _passes(cls, v):
        if v < 2:
            raise ValueError("mcdo_passes must be >= 2")
        return v

    @field_validator("de_models")
    @classmethod
    def _models(cls, v):
        if v < 1:
            raise ValueError("de_models must be >= 1")
        return v


class RunConfig(_Section):
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    net: NetConfig = Field(default_factory=NetConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    cv: CvConfig = Field(default_factory=CvConfig)
    uq: UqConfig = Field(default_factory=UqConfig)
    output_dir: Path = Path("runs/default")
    data_dir: Optional[Path] = None
    jobs: int = 1

    @model_validator(mode="after")
    def _consistent(self):
        shape = self.dataset.shape
        patch = self.train.patch_size
        if self.net.spatial_dims != len(shape):
            raise ValueError("net.spatial_dims must match the number of dataset axes")
        if len(patch) != len(shape) or any(p > s for p, s in zip(patch, shape)):
            raise ValueError("train.patch_size must have one entry per axis and fit in the dataset shape")
        factor = 2 ** (self.net.levels - 1)
        if any(p % factor for p in patch):
            raise ValueError(f"train.patch_size must be divisible by {factor} for {self.net.levels} levels")
        if self.net.in_channels is not None and self.net.in_channels != 3 + len(self.dataset.oars):
            raise ValueError("net.in_channels must equal 3 + number of OARs")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        return self

    def resolved_data_dir(self) -> Path:
        return self.data_dir if self.data_dir is not None else self.output_dir / "data"

    def net_config(self) -> NetConfig:
        return self.net.with_channels(len(self.dataset.oars))

    def seeds(self) -> Dict[str, int]:
        return {
            "dataset": self.dataset.seed,
            "train": self.train.seed,
            "cv": self.cv.seed,
            "uq": self.uq.seed,
        }


def config_hash(model: BaseModel, exclude: Optional[set] = None) -> str:
    canonical = json.dumps(model.model_dump(mode="json", exclude=exclude), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(document: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply `a.b=value` overrides to a nested config document (in place)."""
    for item in overrides:
        key, sep, raw = item.lstrip("-").partition("=")
        if not sep or not key:
            raise ConfigError(f"Override must look like 'section.field=value', got {item!r}")
        node = document
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"Override {item!r} descends into non-section {part!r}")
            node = child
        node[parts[-1]] = _parse_value(raw)
    return document


def load_run_config(path: Optional[Path] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Load a RunConfig: JSON file, then dotted overrides, then RECONUQ_SEED."""
    document: Dict[str, Any] = {}
    if path is not None:
        try:
            document = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}")
        if not isinstance(document, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object")
    apply_overrides(document, overrides)

    seed = Config.seed_override()
    if seed is not None:
        for section in ("dataset", "train", "cv", "uq"):
            document.setdefault(section, {})["seed"] = seed

    try:
        return RunConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"Invalid run configuration:\n{e}")
