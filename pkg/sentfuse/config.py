"""Training configuration: defaults, flat key=value files and command-line overrides."""
from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

from dotenv import dotenv_values

from .errors import ConfigError

logger = logging.getLogger(__name__)

CONFIG_ENV_VAR = "SENTFUSE_CONFIG"

INTEGRATION_MODES = ("off", "shallow", "deep")
KT_SIDES = ("target", "source")
BSLM_DIRECTIONS = ("both", "forward")


@dataclass(frozen=True)
class TrainConfig:
    # model sizes
    d_model: int = 64
    d_ff: int = 0  # 0 means 4 * d_model
    heads: int = 4
    bslm_layers: int = 3
    nmt_layers: int = 3
    dropout: float = 0.1
    label_smoothing: float = 0.1
    ln_eps: float = 1e-6
    # optimization
    warmup: int = 400
    lr_scale: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    clip_norm: float = 5.0
    token_budget: int = 1024
    lm_steps: int = 2000
    max_steps: int = 5000
    seed: int = 1
    # integration
    fusion: str = "deep"
    kt: str = "deep"
    kt_scale: float = 1.0
    fusion_side: str = "source"
    kt_side: str = "target"
    freeze_fusion_weights: bool = False
    bslm_directions: str = "both"
    # monitoring and evaluation
    validate_every: int = 500
    log_every: int = 100
    smoothing_window: int = 100
    divergence_window: int = 500
    divergence_factor: float = 2.0
    beam: int = 4
    length_penalty: float = 0.6
    max_decode_len: int = 0  # 0 means 2 * source length + 10
    bleu_smoothing: bool = False
    # data and plumbing
    vocab_size: int = 32000
    shared_vocab: bool = False
    prefetch: int = 4
    workers: int = 1
    cache_dir: str = ""

    @property
    def ffn_width(self) -> int:
        return self.d_ff or 4 * self.d_model

    def fusion_layers(self) -> range:
        return integration_layers(self.fusion, self.nmt_layers)

    def kt_layers(self) -> range:
        return integration_layers(self.kt, self.nmt_layers)

    def uses_bslm(self) -> bool:
        return self.fusion != "off" or self.kt != "off"

    def validate(self) -> "TrainConfig":
        for name in ("d_model", "heads", "bslm_layers", "nmt_layers", "warmup", "token_budget", "beam",
                     "validate_every", "log_every", "smoothing_window", "divergence_window", "prefetch",
                     "workers", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("d_ff", "lm_steps", "max_steps", "max_decode_len", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must not be negative, got {getattr(self, name)}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.d_model % 2:
            raise ConfigError(f"d_model must be even for sinusoidal positions, got {self.d_model}")
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("dropout and label_smoothing must lie in [0, 1)")
        for name in ("fusion", "kt"):
            if getattr(self, name) not in INTEGRATION_MODES:
                raise ConfigError(f"{name} must be one of {', '.join(INTEGRATION_MODES)}, got {getattr(self, name)!r}")
        if self.kt_side not in KT_SIDES:
            raise ConfigError(f"kt_side must be one of {', '.join(KT_SIDES)}, got {self.kt_side!r}")
        if self.fusion_side != "source":
            raise ConfigError(
                f"fusion_side={self.fusion_side!r} is not supported: target-side fusion would feed partial translations to the BSLM"
            )
        if self.bslm_directions not in BSLM_DIRECTIONS:
            raise ConfigError(f"bslm_directions must be one of {', '.join(BSLM_DIRECTIONS)}, got {self.bslm_directions!r}")
        if self.kt != "off" and self.nmt_layers != self.bslm_layers:
            raise ConfigError(
                f"knowledge transfer needs as many NMT layers as BSLM layers ({self.nmt_layers} != {self.bslm_layers})"
            )
        if self.kt_scale < 0:
            raise ConfigError(f"kt_scale must not be negative, got {self.kt_scale}")
        if self.kt != "off" and self.kt_side == "source":
            logger.warning("kt_side=source is experimental")
        return self

    def replace(self, **changes: Any) -> "TrainConfig":
        return dataclasses.replace(self, **changes).validate()


DEFAULT_CONFIG: Dict[str, Any] = {f.name: f.default for f in dataclasses.fields(TrainConfig)}


def integration_layers(mode: str, count: int) -> range:
    """Layer indices touched by an integration mode: none, the first, or all."""
    if mode == "off":
        return range(0)
    if mode == "shallow":
        return range(min(1, count))
    if mode == "deep":
        return range(count)
    raise ConfigError(f"unknown integration mode {mode!r}")


def _coerce_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in {"1", "true", "yes", "on"}:
        return True
    if text in {"0", "false", "no", "off", ""}:
        return False
    raise ConfigError(f"expected a boolean, got {value!r}")


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULT_CONFIG[key]
    if isinstance(default, bool):
        return _coerce_bool(value)
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key} expects a {type(default).__name__}, got {value!r}") from None
    return "" if value is None else str(value).strip()


def _merge(settings: Dict[str, Any], updates: Mapping[str, Any], origin: str) -> None:
    for key, value in updates.items():
        if key not in DEFAULT_CONFIG:
            raise ConfigError(f"unknown configuration key {key!r} in {origin}")
        settings[key] = _coerce(key, value)


def load_config(
    path: Optional[os.PathLike] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    use_env: bool = True,
) -> TrainConfig:
    """Defaults, then the key=value file at ``path`` (or ``$SENTFUSE_CONFIG``), then ``overrides``."""
    settings = dict(DEFAULT_CONFIG)
    if not path and use_env:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    if path:
        config_path = Path(path)
        if not config_path.is_file():
            raise ConfigError(f"config file {config_path} does not exist")
        logger.info("Loading config from %s", config_path)
        _merge(settings, dotenv_values(config_path), str(config_path))
    if overrides:
        _merge(settings, {k: v for k, v in overrides.items() if v is not None}, "overrides")
    return TrainConfig(**settings).validate()


def parse_assignments(pairs: List[str]) -> Dict[str, str]:
    """``["a=1", "b=x"]`` -> ``{"a": "1", "b": "x"}``."""
    parsed: Dict[str, str] = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"expected key=value, got {pair!r}")
        parsed[key.strip()] = value.strip()
    return parsed


def config_lines(config: TrainConfig) -> List[str]:
    return [f"{f.name}={_format(getattr(config, f.name))}" for f in dataclasses.fields(config)]


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def save_config(config: TrainConfig, path: os.PathLike) -> None:
    """Persist the resolved configuration as key=value text."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text("\n".join(config_lines(config)) + "\n", encoding="utf-8")
    logger.debug("Saved config to %s", target)
