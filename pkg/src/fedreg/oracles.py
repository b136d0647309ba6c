"""Independent oracles the engine is checked against.

- CTC loss by exhaustive enumeration of frame alignments
- edit distance by plain recursion
- autodiff gradients against central finite differences
- FedAvg with one full-batch step per round against centralized SGD

``run_checks`` runs all of them; the ``check`` command exits nonzero when
any fails.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Hashable, Mapping, Optional, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError
from .federation import ClientState, CommSchedule, GlobalState, run_round
from .losses import ctc_feasible, ctc_loss, ctc_loss_value
from .metrics import edit_distance
from .model import BLANK, ModelConfig, ModelParams, forward, init_params
from .numerics import Tensor
from .regularizers import (
    EmbeddingReference,
    RegConfig,
    local_objective,
    r_embed,
    r_loss,
    r_para,
)
from .synthdata import Utterance
from .telemetry import EventCategory, RunEvent

logger = logging.getLogger(__name__)

GRADIENT_MODEL = ModelConfig(
    n_blocks=2, d_model=8, n_heads=2, d_ff=16, vocab_size=5, input_dim=6, tap_positions=(1, 2)
)
GRADIENT_TERMS = ("ctc", "para", "embed", "loss", "combined")


@dataclass
class CheckResult:
    name: str
    passed: bool
    cases: int
    max_error: float = 0.0
    failures: list[str] = field(default_factory=list)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.cases} cases, max error {self.max_error:.3e}"


# ---- CTC -----------------------------------------------------------------


def collapse(path: Sequence[int]) -> tuple[int, ...]:
    """Merge repeats, then drop blanks."""
    out: list[int] = []
    previous = None
    for token in path:
        if token != previous and token != BLANK:
            out.append(token)
        previous = token
    return tuple(out)


def brute_force_ctc_loss(log_probs: np.ndarray, labels: Sequence[int]) -> float:
    """-log of the summed probability of every frame path collapsing to ``labels``."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    n_frames, vocab = log_probs.shape
    target = tuple(labels)
    path_scores = [
        float(sum(log_probs[t, k] for t, k in enumerate(path)))
        for path in itertools.product(range(vocab), repeat=n_frames)
        if collapse(path) == target
    ]
    if not path_scores:
        return math.inf
    top = max(path_scores)
    return -(top + math.log(math.fsum(math.exp(s - top) for s in path_scores)))


def check_ctc(
    n_cases: int = 200, max_frames: int = 6, max_labels: int = 3, max_vocab: int = 4, seed: int = 0
) -> CheckResult:
    """Dynamic-programming CTC loss against exhaustive enumeration."""
    rng = np.random.default_rng(seed)
    result = CheckResult("ctc-brute-force", True, 0)
    while result.cases < n_cases:
        vocab = int(rng.integers(2, max_vocab + 1))
        n_frames = int(rng.integers(1, max_frames + 1))
        n_labels = int(rng.integers(1, max_labels + 1))
        labels = tuple(int(x) for x in rng.integers(1, vocab, size=n_labels))
        if not ctc_feasible(n_frames, labels):
            continue
        logits = rng.normal(size=(n_frames, vocab))
        log_probs = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        expected = brute_force_ctc_loss(log_probs, labels)
        actual = ctc_loss_value(log_probs, labels)
        error = abs(actual - expected)
        result.cases += 1
        result.max_error = max(result.max_error, error)
        if not error <= 1e-10:
            result.passed = False
            result.failures.append(f"T={n_frames} labels={labels}: {actual!r} vs {expected!r}")
    return result


# ---- edit distance -------------------------------------------------------


def recursive_edit_distance(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def d(i: int, j: int) -> int:
        if i == 0:
            return j
        if j == 0:
            return i
        return min(
            d(i - 1, j) + 1,
            d(i, j - 1) + 1,
            d(i - 1, j - 1) + (a[i - 1] != b[j - 1]),
        )

    return d(len(a), len(b))


def check_edit_distance(max_len: int = 5, alphabet: int = 3) -> CheckResult:
    """All pairs of sequences up to ``max_len`` over ``alphabet`` symbols."""
    sequences = [
        seq for n in range(max_len + 1) for seq in itertools.product(range(alphabet), repeat=n)
    ]
    result = CheckResult("edit-distance-exhaustive", True, 0)
    for a in sequences:
        for b in sequences:
            result.cases += 1
            got, want = edit_distance(a, b), recursive_edit_distance(a, b)
            if got != want:
                result.passed = False
                result.max_error = max(result.max_error, abs(got - want))
                if len(result.failures) < 10:
                    result.failures.append(f"{a} vs {b}: {got} != {want}")
    return result


# ---- gradients -----------------------------------------------------------


def _random_utterance(rng: np.random.Generator, config: ModelConfig) -> Utterance:
    n_labels = int(rng.integers(1, 3))
    labels = tuple(int(x) for x in rng.integers(1, config.vocab_size, size=n_labels))
    n_frames = 2 * n_labels + int(rng.integers(1, 3))
    return Utterance(rng.normal(size=(n_frames, config.input_dim)), labels, client_id=0)


def gradient_objective(
    term: str,
    batch: Sequence[Utterance],
    global_params: ModelParams,
    ref: EmbeddingReference,
) -> Callable[[Mapping[str, Tensor]], Tensor]:
    """Scalar function of the local parameters for one objective term."""
    config = global_params.config
    taps = config.tap_positions

    def fn(leaves: Mapping[str, Tensor]) -> Tensor:
        if term == "para":
            return r_para(leaves, global_params)
        if term == "combined":
            cfg = RegConfig(
                enable_para=True,
                enable_embed=True,
                embed_taps=taps,
                enable_loss=True,
                loss_taps=taps,
                combined_preset=True,
            )
            return local_objective(batch, leaves, global_params, ref, cfg, round_index=1).total
        traces = [forward(leaves, u.features, taps, config=config) for u in batch]
        if term == "ctc":
            return nx.mean(nx.stack([ctc_loss(t.log_probs, u.labels) for t, u in zip(traces, batch)]))
        if term == "embed":
            return r_embed(traces, ref, taps)
        if term == "loss":
            return r_loss(traces, global_params, taps)
        raise ConfigurationError(f"unknown objective term {term!r}")

    return fn


def check_gradients(
    n_cases: int = 100,
    seed: int = 0,
    config: ModelConfig = GRADIENT_MODEL,
    tensors_per_case: int = 3,
    rtol: float = 1e-4,
    atol: float = 1e-7,
) -> CheckResult:
    """Autodiff against central differences for every objective term.

    Cases cycle through the terms; each perturbs a few randomly chosen
    parameter tensors of a freshly initialised local model that sits near,
    not at, its global model.
    """
    rng = np.random.default_rng(seed)
    result = CheckResult("gradient-check", True, 0)
    names = [name for name, _ in init_params(config, 0).items()]
    for case in range(n_cases):
        term = GRADIENT_TERMS[case % len(GRADIENT_TERMS)]
        global_params = init_params(config, seed * 1000 + case)
        jitter = rng.normal(0.0, 0.05, size=global_params.size)
        local = ModelParams.unflatten(config, global_params.flatten() + jitter)
        batch = [_random_utterance(rng, config) for _ in range(2)]
        ref = EmbeddingReference(
            {tap: rng.normal(size=config.d_model) for tap in config.tap_positions}, round_index=0
        )
        pool = [n for n in names if not (term == "para" and n.startswith("frontend."))]
        wrt = [pool[int(i)] for i in rng.choice(len(pool), size=tensors_per_case, replace=False)]
        fn = gradient_objective(term, batch, global_params, ref)
        check = nx.gradient_check(fn, dict(local.items()), rtol=rtol, atol=atol, wrt=wrt)
        result.cases += 1
        result.max_error = max(result.max_error, check.max_abs_error)
        if not check.passed:
            result.passed = False
            result.failures.extend(f"case {case} ({term}): {f}" for f in check.failures)
    return result


# ---- FedAvg equivalence --------------------------------------------------


def _shards_for_equivalence(
    rng: np.random.Generator, config: ModelConfig, sizes: Sequence[int]
) -> dict[int, list[Utterance]]:
    shards: dict[int, list[Utterance]] = {}
    for cid, n in enumerate(sizes):
        shards[cid] = []
        for _ in range(n):
            utt = _random_utterance(rng, config)
            shards[cid].append(Utterance(utt.features, utt.labels, client_id=cid))
    return shards


def centralized_sgd_step(
    params: ModelParams, shards: Mapping[int, Sequence[Utterance]], lr: float
) -> ModelParams:
    """One SGD step on the sample-weighted global CTC objective."""
    pooled = [u for cid in sorted(shards) for u in shards[cid]]
    leaves = params.as_leaves()
    parts = local_objective(pooled, leaves, params, None, RegConfig())
    return params.sgd_step(nx.grad(parts.total, leaves), lr)


def check_fedavg_equivalence(
    n_steps: int = 10,
    seed: int = 0,
    config: ModelConfig = GRADIENT_MODEL,
    sizes: Sequence[int] = (3, 5, 4),
    lr: float = 0.1,
    tolerance: float = 1e-10,
    threads: int = 1,
) -> CheckResult:
    """FedAvg trajectory against centralized full-batch SGD on the pooled data."""
    rng = np.random.default_rng(seed)
    shards = _shards_for_equivalence(rng, config, sizes)
    start = init_params(config, seed)
    schedule = CommSchedule(local_steps="1bt", total_rounds=n_steps, batch_size=max(sizes))
    clients = [
        ClientState(cid, shards[cid], start, np.random.default_rng([seed, cid]), lr=lr)
        for cid in sorted(shards)
    ]
    state = GlobalState(round_index=0, params=start)
    central = start
    result = CheckResult("fedavg-equivalence", True, 0)
    for step in range(n_steps):
        state = run_round(state, clients, RegConfig(), schedule, threads=threads, seed=seed)
        central = centralized_sgd_step(central, shards, lr)
        error = float(np.max(np.abs(state.params.flatten() - central.flatten())))
        result.cases += 1
        result.max_error = max(result.max_error, error)
        if not error <= tolerance:
            result.passed = False
            result.failures.append(f"step {step + 1}: max |delta| {error:.3e}")
    return result


def run_checks(seed: int = 0, only: Optional[Sequence[str]] = None) -> list[CheckResult]:
    """Run every oracle suite (or the named subset) and log each outcome."""
    suites: dict[str, Callable[[], CheckResult]] = {
        "ctc": lambda: check_ctc(seed=seed),
        "wer": check_edit_distance,
        "gradients": lambda: check_gradients(seed=seed),
        "fedavg": lambda: check_fedavg_equivalence(seed=seed),
    }
    selected = list(only) if only else list(suites)
    unknown = sorted(set(selected) - set(suites))
    if unknown:
        raise ConfigurationError(f"unknown check suites {unknown}; choose from {sorted(suites)}")
    results: list[CheckResult] = []
    for name in selected:
        outcome = suites[name]()
        results.append(outcome)
        level = logging.INFO if outcome.passed else logging.ERROR
        logger.log(level, outcome.summary())
        RunEvent(
            "check_completed",
            EventCategory.CHECK,
            {"suite": name, "passed": outcome.passed, "cases": outcome.cases},
        ).send()
    return results
