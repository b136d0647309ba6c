"""Tests for experiment configuration loading."""

import json
import os
from unittest.mock import patch

import pytest

from fedreg.config import (
    DEFAULTS,
    ExperimentConfig,
    _get_env_config,
    config_from_dict,
    config_to_dict,
    load_config,
    save_config,
)
from fedreg.errors import ConfigurationError
from fedreg.regularizers import COMBINED_WEIGHTS


class TestDefaults:
    """Tests for default configuration values."""

    def test_default_values(self, clean_env):
        """Defaults describe a single-seed dysarthric FedAvg run."""
        cfg = load_config()
        assert cfg.seeds == (0,)
        assert cfg.threads == 1
        assert cfg.out_dir == DEFAULTS["out_dir"]
        assert cfg.scenario.preset == "dysarthric"
        assert not cfg.reg.any_active
        assert not cfg.is_centralized

    def test_system_zero_is_centralized(self, clean_env):
        """System 0 trains centrally."""
        assert config_from_dict({"system": 0}).is_centralized


class TestEnvConfig:
    """Tests for environment variable configuration."""

    def test_seed_and_threads(self, clean_env):
        """Integer variables are parsed."""
        with patch.dict(os.environ, {"FEDREG_SEED": "7", "FEDREG_THREADS": "4"}):
            assert _get_env_config() == {"seeds": [7], "threads": 4}

    def test_out_and_lr(self, clean_env):
        """Paths pass through and learning rates are floats."""
        with patch.dict(os.environ, {"FEDREG_OUT": "/tmp/x", "FEDREG_LR": "0.1"}):
            assert _get_env_config() == {"out_dir": "/tmp/x", "lr": 0.1}

    def test_invalid_values_ignored(self, clean_env):
        """Unparseable values are skipped."""
        env = {"FEDREG_SEED": "abc", "FEDREG_THREADS": "0", "FEDREG_LR": "fast"}
        with patch.dict(os.environ, env):
            assert _get_env_config() == {}

    def test_env_overrides_file(self, clean_env, tmp_path):
        """Environment beats the config file."""
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"seeds": [1, 2], "threads": 2}))
        with patch.dict(os.environ, {"FEDREG_THREADS": "3"}):
            cfg = load_config(path)
        assert cfg.threads == 3
        assert cfg.seeds == (1, 2)

    def test_env_disabled(self, clean_env):
        """use_env=False ignores the environment."""
        with patch.dict(os.environ, {"FEDREG_THREADS": "3"}):
            assert load_config(use_env=False).threads == 1


class TestConfigFromDict:
    """Tests for validation of plain-value configurations."""

    def test_unknown_top_level_key(self):
        """Unknown keys are rejected."""
        with pytest.raises(ConfigurationError, match="top level"):
            config_from_dict({"rounds": 3})

    def test_unknown_section_key(self):
        """Unknown keys inside sections are rejected."""
        with pytest.raises(ConfigurationError, match="'schedule'"):
            config_from_dict({"schedule": {"steps": "1bt"}})

    def test_system_preset_with_override(self):
        """reg keys override the system preset."""
        cfg = config_from_dict({"system": 14, "reg": {"lambda_loss": 0.5}})
        assert cfg.reg.loss_taps == (1, 2, 3, 4)
        assert cfg.reg.lambda_loss == 0.5

    def test_combined_system(self):
        """System 15 uses the fixed combined weights."""
        assert config_from_dict({"system": 15}).reg.weights == COMBINED_WEIGHTS

    def test_invalid_system(self):
        """Systems outside 0..15 are rejected."""
        with pytest.raises(ConfigurationError):
            config_from_dict({"system": 99})

    def test_model_scenario_mismatch(self):
        """Scenario and model must agree on input size."""
        with pytest.raises(ConfigurationError, match="input_dim"):
            config_from_dict({"model": {"input_dim": 5}})

    def test_taps_beyond_model(self):
        """Regularizer taps must exist in the model."""
        with pytest.raises(ConfigurationError):
            config_from_dict(
                {"model": {"n_blocks": 2, "tap_positions": [1, 2]},
                 "reg": {"enable_loss": True, "loss_taps": [4]}}
            )

    def test_wrong_type(self):
        """Non-object sections are configuration errors."""
        with pytest.raises(ConfigurationError):
            config_from_dict({"model": [1, 2]})

    def test_negative_threads(self):
        """Thread counts must be positive."""
        with pytest.raises(ConfigurationError):
            ExperimentConfig(threads=0)

    @pytest.mark.parametrize(
        "values", [{"lr": "abc"}, {"threads": "four"}, {"schedule": {"total_rounds": "x"}}]
    )
    def test_unparsable_values(self, values):
        """Values that do not convert are configuration errors."""
        with pytest.raises(ConfigurationError, match="invalid configuration value"):
            config_from_dict(values)


class TestConfigFile:
    """Tests for config files."""

    def test_invalid_json(self, tmp_path):
        """Broken JSON is a configuration error."""
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigurationError, match="invalid JSON"):
            load_config(path)

    def test_missing_file(self, tmp_path):
        """Missing files are configuration errors."""
        with pytest.raises(ConfigurationError):
            load_config(tmp_path / "missing.json")

    def test_save_and_load(self, clean_env, tiny_config, tmp_path):
        """A saved configuration loads back equal."""
        path = tmp_path / "out" / "config.json"
        save_config(tiny_config, path)
        assert load_config(path) == tiny_config

    def test_dict_is_json_ready(self, tiny_config):
        """Canonical dicts contain only JSON types."""
        data = config_to_dict(tiny_config)
        assert data["seeds"] == [0]
        assert data["model"]["tap_positions"] == [1, 2]
        assert json.loads(json.dumps(data)) == data
