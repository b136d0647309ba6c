"""Experiment configuration.

Values are merged in priority order:
1. Environment variables (``FEDREG_SEED``, ``FEDREG_THREADS``, ``FEDREG_OUT``,
   ``FEDREG_LR``)
2. JSON configuration file
3. Package defaults

Config file layout::

    {
      "model":    {"n_blocks": 4, "d_model": 32, ...},
      "scenario": {"preset": "dysarthric", "n_clients": 16, ...},
      "corpus_path": null,
      "system": 14,
      "reg":      {"lambda_loss": 0.01, ...},
      "schedule": {"local_steps": "1ep", "total_rounds": 100, "batch_size": 8},
      "lr": 0.05, "seeds": [0], "out_dir": "runs", "threads": 1,
      "centralized": false
    }

Unknown keys are rejected at every level. When ``system`` is set the
regularizer layout starts from that preset and ``reg`` keys override it.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Union

from .errors import ConfigurationError
from .federation import DEFAULT_LR, CommSchedule
from .model import ModelConfig
from .regularizers import RegConfig, SYSTEM_DESCRIPTIONS, system_preset
from .synthdata import PRESETS, ScenarioConfig

logger = logging.getLogger(__name__)

DEFAULTS: dict[str, Any] = {
    "model": {},
    "scenario": {"preset": "dysarthric"},
    "corpus_path": None,
    "system": None,
    "reg": {},
    "schedule": {},
    "lr": DEFAULT_LR,
    "seeds": [0],
    "out_dir": "runs",
    "threads": 1,
    "centralized": False,
}

_SECTIONS = {
    "model": ModelConfig,
    "scenario": ScenarioConfig,
    "reg": RegConfig,
    "schedule": CommSchedule,
}
_TUPLE_FIELDS = {
    "model": ("tap_positions",),
    "scenario": ("word_length", "words_per_utterance", "frames_per_token"),
    "reg": ("embed_taps", "loss_taps"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a run."""

    model: ModelConfig = field(default_factory=ModelConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    corpus_path: Optional[str] = None
    system: Optional[int] = None
    reg: RegConfig = field(default_factory=RegConfig)
    schedule: CommSchedule = field(default_factory=CommSchedule)
    lr: float = DEFAULT_LR
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs"
    threads: int = 1
    centralized: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ConfigurationError("seeds must list at least one seed")
        if self.threads < 1:
            raise ConfigurationError(f"threads must be >= 1, got {self.threads}")
        if not self.lr >= 0:
            raise ConfigurationError(f"lr must be >= 0, got {self.lr}")
        if self.system is not None and self.system not in SYSTEM_DESCRIPTIONS:
            raise ConfigurationError(f"system must be in 0..15, got {self.system}")
        self.reg.validate_against(self.model)
        if self.corpus_path is None:
            if self.scenario.input_dim != self.model.input_dim:
                raise ConfigurationError(
                    f"scenario.input_dim {self.scenario.input_dim} != "
                    f"model.input_dim {self.model.input_dim}"
                )
            if self.scenario.vocab_size != self.model.vocab_size:
                raise ConfigurationError(
                    f"scenario.vocab_size {self.scenario.vocab_size} != "
                    f"model.vocab_size {self.model.vocab_size}"
                )

    @property
    def is_centralized(self) -> bool:
        return self.centralized or self.system == 0

    def for_system(self, system: int) -> "ExperimentConfig":
        """Same experiment with another system's regularizer layout."""
        return replace(self, system=system, reg=system_preset(system, self.model.n_blocks))


def _parse_int(value: str) -> Optional[int]:
    try:
        return int(value)
    except ValueError:
        return None


def _get_env_config() -> dict[str, Any]:
    """Overrides from ``FEDREG_*`` variables; unparseable values are ignored."""
    config: dict[str, Any] = {}

    seed = os.getenv("FEDREG_SEED")
    if seed:
        parsed = _parse_int(seed)
        if parsed is not None:
            config["seeds"] = [parsed]

    threads = os.getenv("FEDREG_THREADS")
    if threads:
        parsed = _parse_int(threads)
        if parsed is not None and parsed >= 1:
            config["threads"] = parsed

    out = os.getenv("FEDREG_OUT")
    if out:
        config["out_dir"] = out

    lr = os.getenv("FEDREG_LR")
    if lr:
        try:
            config["lr"] = float(lr)
        except ValueError:
            pass

    return config


def _load_config_file(path: Union[str, Path]) -> dict[str, Any]:
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: invalid JSON ({e})") from e
    except OSError as e:
        raise ConfigurationError(f"{path}: cannot read config ({e})") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a JSON object")
    return data


def _check_keys(section: str, values: Mapping[str, Any], allowed: set[str]) -> None:
    unknown = sorted(set(values) - allowed)
    if unknown:
        where = f"section {section!r}" if section else "top level"
        raise ConfigurationError(f"unknown config keys at {where}: {unknown}")


def _section_fields(section: str) -> set[str]:
    return {f.name for f in fields(_SECTIONS[section])}


def _build_section(section: str, values: Mapping[str, Any]) -> dict[str, Any]:
    if not isinstance(values, Mapping):
        raise ConfigurationError(f"section {section!r} must be a JSON object")
    _check_keys(section, values, _section_fields(section))
    out = dict(values)
    for name in _TUPLE_FIELDS.get(section, ()):
        if name in out:
            out[name] = tuple(out[name])
    return out


def config_from_dict(data: Mapping[str, Any]) -> ExperimentConfig:
    """Build and validate an :class:`ExperimentConfig` from plain values.

    Raises:
        ConfigurationError: On unknown keys or invalid values.
    """
    _check_keys("", data, set(DEFAULTS))
    merged = {**DEFAULTS, **data}
    try:
        model = ModelConfig(**_build_section("model", merged["model"] or {}))
        scenario_values = _build_section("scenario", merged["scenario"] or {})
        preset = scenario_values.pop("preset", "dysarthric")
        if preset in PRESETS:
            scenario = ScenarioConfig.from_preset(preset, **scenario_values)
        else:
            scenario = ScenarioConfig(preset=preset, **scenario_values)
        system = merged["system"]
        reg_values = _build_section("reg", merged["reg"] or {})
        base = system_preset(int(system), model.n_blocks) if system is not None else RegConfig()
        reg = replace(base, **reg_values)
        schedule = CommSchedule(**_build_section("schedule", merged["schedule"] or {}))
        return ExperimentConfig(
            model=model,
            scenario=scenario,
            corpus_path=merged["corpus_path"],
            system=None if system is None else int(system),
            reg=reg,
            schedule=schedule,
            lr=float(merged["lr"]),
            seeds=tuple(merged["seeds"]),
            out_dir=str(merged["out_dir"]),
            threads=int(merged["threads"]),
            centralized=bool(merged["centralized"]),
        )
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"invalid configuration value: {e}") from e


def load_config(path: Optional[Union[str, Path]] = None, use_env: bool = True) -> ExperimentConfig:
    """Load experiment configuration from all sources.

    Priority order (highest to lowest):
    1. Environment variables
    2. Configuration file at ``path``
    3. Package defaults
    """
    merged: dict[str, Any] = {}
    if path is not None:
        merged.update(_load_config_file(path))
        logger.debug("loaded config file %s", path)
    if use_env:
        merged.update(_get_env_config())
    return config_from_dict(merged)


def config_to_dict(config: ExperimentConfig) -> dict[str, Any]:
    """Canonical JSON-ready form; ``config_from_dict`` inverts it."""
    data = asdict(config)
    data["seeds"] = list(config.seeds)
    return json.loads(json.dumps(data))


def save_config(config: ExperimentConfig, path: Union[str, Path]) -> None:
    """Write ``config`` as JSON that :func:`load_config` reads back unchanged."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config_to_dict(config), f, indent=2)
