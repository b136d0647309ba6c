"""Federated averaging engine with regularized local training.

Each round every participating client starts from the global model, runs
plain SGD on its regularized local objective for the scheduled number of
batches, and reports its parameters (and, with embedding regularization, its
per-tap mean embeddings). The server aggregates both with weights
proportional to client data size and redistributes the result.

Aggregation always sums in ascending client id order, so results do not
depend on thread scheduling or on the number of worker threads.
"""

from __future__ import annotations

import logging
import math
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import numerics as nx
from .decorators import TelemetrySpan, track_performance
from .errors import ConfigurationError, DataError, ProtocolError
from .losses import ctc_feasible
from .metrics import EvalReport, evaluate
from .model import ModelConfig, ModelParams, forward, init_params
from .regularizers import EmbeddingReference, RegConfig, local_objective
from .synthdata import Corpus, Utterance, centralize, data_weights
from .telemetry import get_telemetry, track_experiment, track_round

logger = logging.getLogger(__name__)

WEIGHT_SUM_TOLERANCE = 1e-9
DEFAULT_LR = 0.05
_STEPS_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(bt|ep)\s*$")


@dataclass(frozen=True)
class CommSchedule:
    """How much local work happens between synchronizations.

    ``local_steps`` is ``"<k>bt"`` for k batches per round or ``"<f>ep"`` for
    a fraction (or multiple) of each client's own epoch; ``"epoch"`` means
    ``"1ep"``. Batches continue across rounds from the client's shuffled
    stream, so one client behaves the same at every frequency.

    ``step_budget`` caps the local steps each client takes over the whole
    run; the round that reaches it is shortened.
    """

    local_steps: str = "1ep"
    total_rounds: int = 100
    batch_size: int = 8
    participation: float = 1.0
    step_budget: Optional[int] = None

    def __post_init__(self) -> None:
        steps = "1ep" if str(self.local_steps).strip() == "epoch" else str(self.local_steps)
        match = _STEPS_RE.match(steps)
        if not match or float(match.group(1)) <= 0:
            raise ConfigurationError(
                f"local_steps must look like '4bt' or '0.25ep', got {self.local_steps!r}"
            )
        if match.group(2) == "bt" and not float(match.group(1)).is_integer():
            raise ConfigurationError(f"batch count must be an integer, got {self.local_steps!r}")
        object.__setattr__(self, "local_steps", steps.strip())
        if self.total_rounds < 1:
            raise ConfigurationError(f"total_rounds must be >= 1, got {self.total_rounds}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.participation <= 1.0:
            raise ConfigurationError(f"participation must be in (0, 1], got {self.participation}")
        if self.step_budget is not None and self.step_budget < 1:
            raise ConfigurationError(f"step_budget must be >= 1, got {self.step_budget}")

    @property
    def unit(self) -> str:
        return _STEPS_RE.match(self.local_steps).group(2)  # type: ignore[union-attr]

    @property
    def amount(self) -> float:
        return float(_STEPS_RE.match(self.local_steps).group(1))  # type: ignore[union-attr]

    def batches_per_epoch(self, n_samples: int) -> int:
        return math.ceil(n_samples / self.batch_size)

    def steps_for(self, n_samples: int) -> int:
        """Local SGD steps a client with ``n_samples`` takes per round."""
        if self.unit == "bt":
            return int(self.amount)
        return max(1, math.ceil(self.amount * self.batches_per_epoch(n_samples)))

    def steps_in_round(self, n_samples: int, steps_taken: int) -> int:
        """``steps_for``, cut to what is left of ``step_budget``."""
        steps = self.steps_for(n_samples)
        if self.step_budget is None:
            return steps
        return max(0, min(steps, self.step_budget - steps_taken))

    def nominal_steps_per_round(self, counts: Sequence[int]) -> int:
        """Steps per round of a typical client (mean epoch length for epoch schedules)."""
        if self.unit == "bt":
            return int(self.amount)
        mean_epoch = float(np.mean([self.batches_per_epoch(n) for n in counts]))
        return max(1, round(self.amount * mean_epoch))

    def with_total_steps(self, total_steps: int, counts: Sequence[int]) -> "CommSchedule":
        """Same frequency with every client taking exactly ``total_steps`` local steps.

        Epoch schedules are pinned to the nominal epoch of ``counts`` so all
        clients sync after the same number of batches. The last round is
        shortened when the budget is not a multiple of the round length.
        """
        if total_steps < 1:
            raise ConfigurationError(f"total steps must be >= 1, got {total_steps}")
        per_round = self.nominal_steps_per_round(counts)
        return replace(
            self,
            local_steps=f"{per_round}bt",
            total_rounds=math.ceil(total_steps / per_round),
            step_budget=total_steps,
        )


@dataclass
class ClientState:
    """A client's shard, model and private random stream."""

    client_id: int
    shard: list[Utterance]
    params: ModelParams
    rng: np.random.Generator
    lr: float = DEFAULT_LR
    steps_taken: int = 0
    skipped_samples: int = 0
    _order: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64), repr=False)
    _cursor: int = 0

    def __post_init__(self) -> None:
        if not self.shard:
            raise DataError(f"client {self.client_id} has an empty shard")
        if not any(ctc_feasible(u.n_frames, u.labels) for u in self.shard):
            raise DataError(f"client {self.client_id}: every sample is CTC-infeasible")

    @property
    def n_samples(self) -> int:
        return len(self.shard)

    def next_batch(self, batch_size: int) -> list[Utterance]:
        """Next batch from the shuffled stream, reshuffling at epoch boundaries."""
        if self._cursor >= self._order.size:
            self._order = self.rng.permutation(self.n_samples)
            self._cursor = 0
        index = self._order[self._cursor : self._cursor + batch_size]
        self._cursor += batch_size
        return [self.shard[int(i)] for i in index]


@dataclass
class CommCounters:
    """Scalars moved between clients and server so far."""

    params_scalars: int = 0
    embed_scalars: int = 0

    def add(self, params_scalars: int = 0, embed_scalars: int = 0) -> None:
        if params_scalars < 0 or embed_scalars < 0:
            raise ProtocolError("communication counters never decrease")
        self.params_scalars += params_scalars
        self.embed_scalars += embed_scalars


@dataclass
class GlobalState:
    """Server side: round index, global model, embedding reference, costs."""

    round_index: int
    params: ModelParams
    reference: Optional[EmbeddingReference] = None
    comm: CommCounters = field(default_factory=CommCounters)
    total_steps: int = 0
    skipped_samples: int = 0


@dataclass
class LocalResult:
    client_id: int
    params: ModelParams
    pooled: Optional[dict[int, np.ndarray]]
    steps: int
    skipped_samples: int
    mean_loss: float


def fedavg_aggregate(
    params: Sequence[ModelParams],
    weights: Sequence[float],
    client_ids: Optional[Sequence[int]] = None,
) -> ModelParams:
    """Element-wise sum_i w_i W_i over canonical flat vectors.

    Terms are accumulated in ascending ``client_ids`` order when given,
    otherwise in the order supplied. Identical inputs are returned unchanged.

    Raises:
        ProtocolError: If weights do not sum to 1 or parameter counts differ.
    """
    if not params or len(params) != len(weights):
        raise ProtocolError(f"{len(params)} models but {len(weights)} weights")
    if abs(math.fsum(weights) - 1.0) > WEIGHT_SUM_TOLERANCE:
        raise ProtocolError(f"aggregation weights sum to {math.fsum(weights)!r}, not 1")
    config = params[0].config
    sizes = {p.size for p in params}
    if len(sizes) != 1 or any(p.config != config for p in params):
        raise ProtocolError(f"cannot aggregate models of different shapes (sizes {sorted(sizes)})")
    order = list(range(len(params)))
    if client_ids is not None:
        order.sort(key=lambda i: client_ids[i])
    vectors = [params[i].flatten() for i in order]
    if all(np.array_equal(vectors[0], v) for v in vectors[1:]):
        return ModelParams.unflatten(config, vectors[0])
    acc = weights[order[0]] * vectors[0]
    for i, v in zip(order[1:], vectors[1:]):
        acc = acc + weights[i] * v
    return ModelParams.unflatten(config, acc)


def aggregate_embeddings(
    per_client: Mapping[int, Mapping[int, np.ndarray]],
    weights: Mapping[int, float],
    taps: Sequence[int],
    round_index: int,
    counters: Optional[CommCounters] = None,
) -> EmbeddingReference:
    """Weighted sum of client mean embeddings per tap.

    Adds the uplink volume (taps x d_model per client) to ``counters``.

    Raises:
        ProtocolError: If a client did not report a tap.
    """
    if abs(math.fsum(weights.values()) - 1.0) > WEIGHT_SUM_TOLERANCE:
        raise ProtocolError(f"embedding weights sum to {math.fsum(weights.values())!r}, not 1")
    vectors: dict[int, np.ndarray] = {}
    transferred = 0
    for cid in sorted(per_client):
        if cid not in weights:
            raise ProtocolError(f"no aggregation weight for client {cid}")
        for tap in taps:
            if tap not in per_client[cid]:
                raise ProtocolError(f"client {cid} did not report an embedding for tap {tap}")
            term = weights[cid] * np.asarray(per_client[cid][tap], dtype=np.float64)
            vectors[tap] = term if tap not in vectors else vectors[tap] + term
            transferred += term.size
    if counters is not None:
        counters.add(embed_scalars=transferred)
    return EmbeddingReference(vectors=vectors, round_index=round_index)


def mean_pooled_embeddings(
    params: ModelParams, shard: Sequence[Utterance], taps: Sequence[int]
) -> dict[int, np.ndarray]:
    """Dataset mean of per-utterance time-pooled embeddings at each tap."""
    sums = {tap: np.zeros(params.config.d_model) for tap in taps}
    for utt in shard:
        trace = forward(params, utt.features, taps)
        for tap in taps:
            sums[tap] = sums[tap] + trace.embeddings[tap].data.mean(axis=0)
    return {tap: total / len(shard) for tap, total in sums.items()}


def local_train(
    client: ClientState,
    global_state: GlobalState,
    cfg: RegConfig,
    n_steps: int,
    batch_size: int,
) -> LocalResult:
    """Run ``n_steps`` SGD steps from the global model on the client's data.

    Batches whose samples are all CTC-infeasible are skipped and counted.
    When embedding regularization is active the client also reports its mean
    pooled embeddings, computed with the end-of-round local model.
    """
    client.params = global_state.params
    losses: list[float] = []
    skipped = 0
    for _ in range(n_steps):
        batch = client.next_batch(batch_size)
        leaves = client.params.as_leaves()
        try:
            parts = local_objective(
                batch,
                leaves,
                global_state.params,
                global_state.reference,
                cfg,
                round_index=global_state.round_index,
            )
        except DataError:
            skipped += len(batch)
            continue
        skipped += parts.n_skipped
        grads = nx.grad(parts.total, leaves)
        client.params = client.params.sgd_step(grads, client.lr)
        losses.append(parts.total.item())
    client.steps_taken += n_steps
    client.skipped_samples += skipped

    pooled = None
    if cfg.embed_active:
        pooled = mean_pooled_embeddings(client.params, client.shard, cfg.embed_taps)
    return LocalResult(
        client_id=client.client_id,
        params=client.params,
        pooled=pooled,
        steps=n_steps,
        skipped_samples=skipped,
        mean_loss=float(np.mean(losses)) if losses else math.nan,
    )


def _participants(
    clients: Sequence[ClientState], schedule: CommSchedule, seed: int, round_index: int
) -> list[ClientState]:
    ordered = sorted(clients, key=lambda c: c.client_id)
    if schedule.participation >= 1.0:
        return ordered
    k = max(1, round(schedule.participation * len(ordered)))
    rng = np.random.default_rng([seed, round_index, 0x5EED])
    picked = sorted(rng.choice(len(ordered), size=k, replace=False).tolist())
    return [ordered[i] for i in picked]


def run_round(
    state: GlobalState,
    clients: Sequence[ClientState],
    cfg: RegConfig,
    schedule: CommSchedule,
    threads: int = 1,
    seed: int = 0,
) -> GlobalState:
    """One communication round: local training, aggregation, redistribution.

    Per round the parameter traffic is 2 x participants x |W| scalars
    (upload plus download); embedding regularization adds taps x d_model per
    participant.
    """
    participants = _participants(clients, schedule, seed, state.round_index)
    with TelemetrySpan("federation.round", f"round {state.round_index + 1}") as span:
        span.set_data("clients", len(participants))

        def job(client: ClientState) -> LocalResult:
            n_steps = schedule.steps_in_round(client.n_samples, client.steps_taken)
            with TelemetrySpan("federation.local_train", f"client {client.client_id}"):
                return local_train(client, state, cfg, n_steps, schedule.batch_size)

        if threads > 1 and len(participants) > 1:
            with ThreadPoolExecutor(max_workers=threads, thread_name_prefix="fedreg-client") as pool:
                results = list(pool.map(job, participants))
        else:
            results = [job(c) for c in participants]

    results.sort(key=lambda r: r.client_id)
    weights = data_weights({c.client_id: c.n_samples for c in participants})
    new_params = fedavg_aggregate(
        [r.params for r in results],
        [weights[r.client_id] for r in results],
        [r.client_id for r in results],
    )
    comm = CommCounters(state.comm.params_scalars, state.comm.embed_scalars)
    comm.add(params_scalars=2 * len(participants) * new_params.size)
    reference = state.reference
    if cfg.embed_active:
        reference = aggregate_embeddings(
            {r.client_id: r.pooled or {} for r in results},
            weights,
            cfg.embed_taps,
            state.round_index,
            counters=comm,
        )
    new_state = GlobalState(
        round_index=state.round_index + 1,
        params=new_params,
        reference=reference,
        comm=comm,
        total_steps=state.total_steps + sum(r.steps for r in results),
        skipped_samples=state.skipped_samples + sum(r.skipped_samples for r in results),
    )
    track_round(
        new_state.round_index,
        clients=len(participants),
        seconds=round(span.elapsed, 3),
        train_loss=round(float(np.nanmean([r.mean_loss for r in results])), 6)
        if any(not math.isnan(r.mean_loss) for r in results)
        else None,
    )
    return new_state


@dataclass
class ExperimentResult:
    """Per-round evaluation history and final state of one run."""

    history: list[EvalReport]
    state: GlobalState
    wall_seconds: float
    n_clients: int
    centralized: bool = False

    @property
    def final(self) -> EvalReport:
        return self.history[-1]


def build_clients(
    shards: Mapping[int, Sequence[Utterance]], params: ModelParams, seed: int, lr: float
) -> list[ClientState]:
    """One client per shard, each with an RNG stream seeded by (seed, client id)."""
    return [
        ClientState(
            client_id=cid,
            shard=list(shards[cid]),
            params=params,
            rng=np.random.default_rng([seed, cid]),
            lr=lr,
        )
        for cid in sorted(shards)
    ]


@track_performance("experiment.run")
def run_experiment(
    model_config: ModelConfig,
    reg_config: RegConfig,
    schedule: CommSchedule,
    corpus: Corpus,
    seed: int,
    lr: float = DEFAULT_LR,
    threads: int = 1,
    centralized: bool = False,
    evaluate_every_round: bool = True,
    on_round: Optional[Callable[[GlobalState, Optional[EvalReport]], None]] = None,
) -> ExperimentResult:
    """Train for ``schedule.total_rounds`` rounds and evaluate the global model.

    ``centralized`` pools every training utterance into a single client,
    which makes aggregation the identity.
    """
    if lr < 0:
        raise ConfigurationError(f"learning rate must be >= 0, got {lr}")
    reg_config.validate_against(model_config)
    shards = centralize(corpus) if centralized else corpus.shards
    params = init_params(model_config, seed)
    clients = build_clients(shards, params, seed, lr)
    state = GlobalState(round_index=0, params=params)
    groups = corpus.groups
    history: list[EvalReport] = []
    get_telemetry().set_tag("seed", seed)

    track_experiment(
        "experiment_started",
        clients=len(clients),
        rounds=schedule.total_rounds,
        local_steps=schedule.local_steps,
        centralized=centralized,
        seed=seed,
    )
    start = time.perf_counter()
    for r in range(schedule.total_rounds):
        state = run_round(state, clients, reg_config, schedule, threads=threads, seed=seed)
        report: Optional[EvalReport] = None
        if evaluate_every_round or r == schedule.total_rounds - 1:
            report = evaluate(state.params, corpus.test, state.round_index, groups)
            for row in report.rows:
                row.comm_params = state.comm.params_scalars
                row.comm_embed_scalars = state.comm.embed_scalars
            history.append(report)
        if on_round is not None:
            on_round(state, report)
    elapsed = time.perf_counter() - start
    track_experiment(
        "experiment_finished",
        seconds=round(elapsed, 3),
        total_steps=state.total_steps,
        final_wer=round(history[-1].overall_wer(), 6),
    )
    return ExperimentResult(history, state, elapsed, len(clients), centralized)
