"""Pytest configuration and fixtures for fedreg tests."""

import os
from unittest.mock import patch

import numpy as np
import pytest

from fedreg.config import ExperimentConfig
from fedreg.federation import CommSchedule
from fedreg.model import ModelConfig, init_params
from fedreg.regularizers import RegConfig
from fedreg.synthdata import ScenarioConfig, Utterance, generate_scenario
from fedreg.telemetry import TelemetryClient

TINY_MODEL = ModelConfig(
    n_blocks=2, d_model=8, n_heads=2, d_ff=16, vocab_size=6, input_dim=4, tap_positions=(1, 2)
)
TINY_SCENARIO = ScenarioConfig(
    preset="dysarthric",
    n_clients=3,
    utterances_min=4,
    utterances_max=6,
    test_per_client=2,
    vocab_size=6,
    input_dim=4,
    lexicon_size=4,
    word_length=(1, 2),
    seed=7,
)


@pytest.fixture(autouse=True)
def reset_telemetry():
    """Reset telemetry singleton before and after each test."""
    TelemetryClient.reset_instance()
    yield
    TelemetryClient.reset_instance()


@pytest.fixture
def clean_env():
    """Provide a clean environment without fedreg-related variables."""
    env_vars_to_clear = [
        "DO_NOT_TRACK",
        "FEDREG_TELEMETRY_ENABLED",
        "FEDREG_TELEMETRY_DSN",
        "FEDREG_TELEMETRY_ENVIRONMENT",
        "FEDREG_SEED",
        "FEDREG_THREADS",
        "FEDREG_OUT",
        "FEDREG_LR",
    ]
    original = {var: os.environ.get(var) for var in env_vars_to_clear}
    for var in env_vars_to_clear:
        if var in os.environ:
            del os.environ[var]

    yield

    for var, value in original.items():
        if value is not None:
            os.environ[var] = value
        elif var in os.environ:
            del os.environ[var]


@pytest.fixture
def mock_sentry():
    """Mock sentry_sdk for testing."""
    with patch("fedreg.telemetry.sentry_sdk") as mock:
        yield mock


@pytest.fixture
def enabled_telemetry(clean_env, mock_sentry):
    """Provide an enabled and initialized telemetry client."""
    client = TelemetryClient.get_instance()
    client.initialize(dsn="https://test@example.com/1", package_version="1.0.0")
    return client


@pytest.fixture
def tiny_model():
    return TINY_MODEL


@pytest.fixture
def tiny_params():
    return init_params(TINY_MODEL, seed=3)


@pytest.fixture
def tiny_scenario():
    return TINY_SCENARIO


@pytest.fixture
def tiny_corpus():
    return generate_scenario(TINY_SCENARIO)


@pytest.fixture
def tiny_config(tmp_path):
    """A fast experiment: 3 clients, 2-block model, 2 rounds of 1 batch."""
    return ExperimentConfig(
        model=TINY_MODEL,
        scenario=TINY_SCENARIO,
        reg=RegConfig(),
        schedule=CommSchedule(local_steps="1bt", total_rounds=2, batch_size=2),
        seeds=(0,),
        out_dir=str(tmp_path / "runs"),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def make_utterance(rng):
    """Factory for random utterances long enough for their labels."""

    def factory(labels=(2, 3), n_frames=None, client_id=0, config=TINY_MODEL, **kw):
        n_frames = n_frames if n_frames is not None else 2 * len(labels) + 1
        features = rng.normal(size=(n_frames, config.input_dim))
        return Utterance(features, tuple(labels), client_id, **kw)

    return factory
