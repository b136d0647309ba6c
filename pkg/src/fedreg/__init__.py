"""fedreg - regularized federated learning for CTC sequence models.

Simulates FedAvg over synthetic heterogeneous speech-like clients training a
small transformer-encoder CTC model, with three optional local regularizers:

- parameter-based: squared distance to the global parameters
- embedding-based: distance of pooled block embeddings to a server reference
- loss-based: KL to pseudo-outputs of the frozen global model resumed from a
  local embedding

Everything runs on numpy with a small built-in reverse-mode autodiff.

Quick Start:
    from fedreg import ExperimentConfig, load_corpus, run_experiment, system_preset

    cfg = ExperimentConfig()
    corpus = load_corpus(cfg)
    result = run_experiment(cfg.model, system_preset(14), cfg.schedule, corpus, seed=0)
    print(result.final.overall_wer())

Command line:
    fedreg generate --out runs/
    fedreg run --config exp.json --seed 1
    fedreg sweep --axis comm-frequency
    fedreg check
    fedreg compare runs/a runs/b

Telemetry:
    Error tracking is off unless FEDREG_TELEMETRY_DSN is set. DO_NOT_TRACK=1
    or FEDREG_TELEMETRY_ENABLED=false always disable it.
"""

from fedreg.config import DEFAULTS, ExperimentConfig, load_config, save_config
from fedreg.errors import (
    ConfigurationError,
    ContractViolation,
    DataError,
    FedRegError,
    InfeasibleSampleError,
    ProtocolError,
)
from fedreg.experiment import compare_runs, load_corpus, run_seeds, run_single
from fedreg.federation import (
    ClientState,
    CommSchedule,
    GlobalState,
    aggregate_embeddings,
    fedavg_aggregate,
    local_train,
    run_experiment,
    run_round,
)
from fedreg.metrics import evaluate, greedy_ctc_decode, mapsswe_test, wer
from fedreg.model import ModelConfig, ModelParams, forward, init_params, resume_from_tap
from fedreg.regularizers import RegConfig, local_objective, system_preset
from fedreg.synthdata import ScenarioConfig, generate_scenario
from fedreg.telemetry import get_telemetry

__version__ = "0.1.0"

__all__ = [
    # Config
    "DEFAULTS",
    "ExperimentConfig",
    "load_config",
    "save_config",
    # Errors
    "ConfigurationError",
    "ContractViolation",
    "DataError",
    "FedRegError",
    "InfeasibleSampleError",
    "ProtocolError",
    # Model
    "ModelConfig",
    "ModelParams",
    "forward",
    "init_params",
    "resume_from_tap",
    # Regularizers
    "RegConfig",
    "local_objective",
    "system_preset",
    # Federation
    "ClientState",
    "CommSchedule",
    "GlobalState",
    "aggregate_embeddings",
    "fedavg_aggregate",
    "local_train",
    "run_experiment",
    "run_round",
    # Data and evaluation
    "ScenarioConfig",
    "generate_scenario",
    "evaluate",
    "greedy_ctc_decode",
    "mapsswe_test",
    "wer",
    # Harness
    "compare_runs",
    "load_corpus",
    "run_seeds",
    "run_single",
    # Telemetry
    "get_telemetry",
    "__version__",
]
