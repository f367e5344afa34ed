"""
Configuration
-------------

1. `SearchConfig` - every knob of a search run. Defaults are the desk
   profile (a full search finishes on a CPU in well under an hour).
2. `parse_config` - reads a plain `key=value` file with `#` comments through
   python-dotenv's stream parser, so errors carry line numbers.
3. `load_environment` - process-level settings from the environment / .env.
"""

import hashlib
import io
import math
import os
from dataclasses import asdict, dataclass, fields, replace

import structlog
import torch
from dotenv import load_dotenv
from dotenv.parser import parse_stream

from utils.errors import ConfigError

log = structlog.get_logger(__name__)

SEARCH_MODES = ("mlas", "slas")
METRICS = ("is", "recip_fid")
DATASETS = ("synthetic", "cifar10")
BASELINE_MODES = ("shared_weights", "early_stop")

KEY_ALIASES = {
    "k": "top_k",
    "m": "num_candidates",
    "metric_mode": "metric",
    "shared_epochs": "shared_epochs_per_iter",
    "ctrl_steps": "ctrl_steps_per_iter",
}


@dataclass(frozen=True)
class SearchConfig:
    # schedule
    total_iters: int = 12
    u_stage: int = 0  # 0: total_iters // num_cells
    shared_epochs_per_iter: int = 2
    shared_steps_per_epoch: int = 20
    ctrl_steps_per_iter: int = 10
    num_cells: int = 3
    search_mode: str = "mlas"

    # beams and derivation
    top_k: int = 3
    num_candidates: int = 10
    retrain_generator_steps: int = 300
    retrain_workers: int = 2
    proxy_study_genotypes: int = 12

    # dynamic reset
    dynamic_reset: bool = True
    reset_threshold: float = 1e-3
    window_len: int = 50

    # reward and evaluation
    metric: str = "is"
    eval_samples: int = 500
    final_eval_samples: int = 5000
    eval_every: int = 4
    recip_fid_eps: float = 1e-3
    is_splits: int = 10

    # networks
    base_resolution: int = 4
    base_channels: int = 64
    z_dim: int = 64
    hidden_size: int = 64

    # optimization
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    lr_ctrl: float = 3.5e-4
    entropy_weight: float = 1e-4
    baseline_decay: float = 0.9
    batch_size: int = 32
    g_batch_size: int = 64

    # data
    dataset: str = "synthetic"
    data_dir: str = ""
    resolution: int = 32
    num_classes: int = 4
    synthetic_train: int = 5000
    synthetic_eval: int = 1000
    surrogate_epochs: int = 4

    # random-search baseline
    baseline_mode: str = "shared_weights"
    baseline_budget: int = 0  # generator steps; 0: same as a search
    early_stop_steps: int = 50

    seed: int = 0

    @property
    def stage_length(self) -> int:
        return self.u_stage or self.total_iters // self.num_cells

    @property
    def output_resolution(self) -> int:
        return self.base_resolution * 2 ** self.num_cells

    @property
    def search_generator_steps(self) -> int:
        return self.total_iters * self.shared_epochs_per_iter * self.shared_steps_per_epoch

    def validate(self) -> "SearchConfig":
        problems = []
        positive = (
            "total_iters", "shared_epochs_per_iter", "shared_steps_per_epoch", "ctrl_steps_per_iter", "num_cells",
            "top_k", "num_candidates", "window_len", "eval_samples", "final_eval_samples", "base_resolution",
            "base_channels", "z_dim", "hidden_size", "batch_size", "g_batch_size", "resolution", "num_classes",
            "retrain_generator_steps", "retrain_workers", "early_stop_steps", "is_splits",
        )
        for name in positive:
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        for name in ("u_stage", "eval_every", "baseline_budget", "surrogate_epochs", "seed"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if self.num_cells >= 1 and self.stage_length < 1:
            problems.append(f"total_iters {self.total_iters} gives no iteration per stage for {self.num_cells} cells")
        elif self.num_cells >= 1 and self.total_iters % self.stage_length:
            problems.append(f"total_iters {self.total_iters} is not divisible by u_stage {self.stage_length}")
        if self.top_k > self.num_candidates:
            problems.append(f"K = {self.top_k} must not exceed M = {self.num_candidates}")
        if self.search_mode not in SEARCH_MODES:
            problems.append(f"search_mode must be one of {SEARCH_MODES}")
        if self.metric not in METRICS:
            problems.append(f"metric must be one of {METRICS}")
        if self.dataset not in DATASETS:
            problems.append(f"dataset must be one of {DATASETS}")
        if self.baseline_mode not in BASELINE_MODES:
            problems.append(f"baseline_mode must be one of {BASELINE_MODES}")
        if self.reset_threshold < 0 or math.isnan(self.reset_threshold):
            problems.append("reset_threshold must be >= 0")
        if not 0.0 < self.baseline_decay < 1.0:
            problems.append("baseline_decay must be in (0, 1)")
        if self.batch_size < 2 or self.g_batch_size < 2:
            problems.append("batch sizes must be >= 2 (batch normalization)")
        if self.resolution < self.output_resolution:
            problems.append(
                f"dataset resolution {self.resolution} < output resolution {self.output_resolution} "
                f"({self.base_resolution} * 2^{self.num_cells})"
            )
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def with_overrides(self, **overrides) -> "SearchConfig":
        return replace(self, **overrides).validate()


def _to_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got '{raw}'")


def _to_float(raw: str) -> float:
    value = float(raw)
    if math.isnan(value):
        raise ValueError("NaN is not allowed")
    return value


_CONVERTERS = {"int": int, "float": _to_float, "bool": _to_bool, "str": str}
_FIELD_TYPES = {f.name: f.type if isinstance(f.type, str) else f.type.__name__ for f in fields(SearchConfig)}


def convert_value(key: str, raw: str):
    return _CONVERTERS[_FIELD_TYPES[key]](raw.strip())


def _binding_line(binding) -> int:
    """Line of the binding's first non-blank character; the parser counts from the blank lines before it."""
    raw = binding.original.string
    return binding.original.line + raw[: len(raw) - len(raw.lstrip())].count("\n")


def parse_config_text(text: str) -> SearchConfig:
    values = {}
    for binding in parse_stream(io.StringIO(text)):
        line = _binding_line(binding)
        if binding.error:
            raise ConfigError(f"malformed line '{binding.original.string.strip()}'", line=line)
        if binding.key is None:
            continue
        key = KEY_ALIASES.get(binding.key.lower(), binding.key.lower())
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key '{binding.key}'", line=line)
        if binding.value is None:
            raise ConfigError(f"key '{binding.key}' has no value", line=line)
        try:
            values[key] = convert_value(key, binding.value)
        except ValueError as e:
            raise ConfigError(f"bad value for '{binding.key}': {e}", line=line) from e
    return SearchConfig(**values).validate()


def parse_config(path: str | None) -> SearchConfig:
    """An absent path or an empty file gives the desk profile."""
    if not path:
        config = SearchConfig().validate()
        log.info("[config] loaded", path=None, **asdict(config))
        return config
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    config = parse_config_text(text)
    log.info("[config] loaded", path=path, **asdict(config))
    return config


def format_config(config: SearchConfig) -> str:
    return "".join(f"{key}={value}\n" for key, value in asdict(config).items())


def config_hash(config: SearchConfig) -> str:
    return hashlib.sha256(format_config(config).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Environment:
    num_threads: int | None
    runs_dir: str
    port: int


def load_environment() -> Environment:
    load_dotenv()
    raw_threads = os.getenv("AUTOGAN_NUM_THREADS", "").strip()
    try:
        threads = int(raw_threads) if raw_threads else None
        port = int(os.getenv("PORT", "8080"))
    except ValueError as e:
        raise ConfigError(f"bad environment setting: {e}") from e
    if threads is not None:
        if threads < 1:
            raise ConfigError(f"AUTOGAN_NUM_THREADS must be >= 1, got {threads}")
        torch.set_num_threads(threads)
    return Environment(threads, os.getenv("AUTOGAN_RUNS_DIR", "runs"), port)
