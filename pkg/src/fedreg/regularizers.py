"""Regularization terms for local client training and their composition.

Three penalties pull a client toward the federation during local training:

- parameter-based: squared L2 distance between local and global parameters
  (frontend excluded);
- embedding-based: squared L2 distance between the client's time-pooled
  block embeddings and the server-aggregated reference embedding;
- loss-based: KL divergence between the local output distribution and the
  pseudo-distribution obtained by running the local embedding through the
  frozen previous-round global model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Protocol, Sequence, Union

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, DataError, InfeasibleSampleError, ProtocolError
from .losses import ctc_loss, kl_divergence, squared_l2_distance
from .model import FRONTEND_PREFIX, ForwardTrace, ModelConfig, ModelParams, forward, resume_from_tap
from .numerics import Tensor

DEFAULT_LAMBDA_PARA = 0.01
DEFAULT_LAMBDA_EMBED = 0.001
DEFAULT_LAMBDA_LOSS = 0.01
COMBINED_WEIGHTS = (0.1, 0.1, 1.0)


class Sample(Protocol):
    features: np.ndarray
    labels: tuple[int, ...]


@dataclass(frozen=True)
class RegConfig:
    """Which regularizers are active, their weights and tap positions."""

    enable_para: bool = False
    lambda_para: float = DEFAULT_LAMBDA_PARA
    enable_embed: bool = False
    lambda_embed: float = DEFAULT_LAMBDA_EMBED
    embed_taps: tuple[int, ...] = (4,)
    enable_loss: bool = False
    lambda_loss: float = DEFAULT_LAMBDA_LOSS
    loss_taps: tuple[int, ...] = (4,)
    combined_preset: bool = False

    def __post_init__(self) -> None:
        for name in ("lambda_para", "lambda_embed", "lambda_loss"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ConfigurationError(f"{name} must be a finite value >= 0, got {value}")
        object.__setattr__(self, "embed_taps", tuple(sorted(set(int(t) for t in self.embed_taps))))
        object.__setattr__(self, "loss_taps", tuple(sorted(set(int(t) for t in self.loss_taps))))

    @property
    def weights(self) -> tuple[float, float, float]:
        """Effective (para, embed, loss) weights; the combined preset overrides."""
        if self.combined_preset:
            return COMBINED_WEIGHTS
        return (self.lambda_para, self.lambda_embed, self.lambda_loss)

    @property
    def para_active(self) -> bool:
        return self.enable_para and self.weights[0] > 0

    @property
    def embed_active(self) -> bool:
        return self.enable_embed and self.weights[1] > 0 and bool(self.embed_taps)

    @property
    def loss_active(self) -> bool:
        return self.enable_loss and self.weights[2] > 0 and bool(self.loss_taps)

    @property
    def any_active(self) -> bool:
        return self.para_active or self.embed_active or self.loss_active

    def forward_taps(self) -> frozenset[int]:
        """Tap positions a training forward pass must record."""
        taps: set[int] = set()
        if self.embed_active:
            taps.update(self.embed_taps)
        if self.loss_active:
            taps.update(self.loss_taps)
        return frozenset(taps)

    def validate_against(self, model: ModelConfig) -> None:
        allowed = set(model.tap_positions)
        for name in ("embed_taps", "loss_taps"):
            extra = sorted(set(getattr(self, name)) - allowed)
            enabled = self.enable_embed if name == "embed_taps" else self.enable_loss
            if enabled and extra:
                raise ConfigurationError(
                    f"{name} {extra} not among model tap_positions {model.tap_positions}"
                )


@dataclass
class EmbeddingReference:
    """Server-aggregated per-tap mean embeddings and the round that produced them."""

    vectors: dict[int, np.ndarray]
    round_index: int

    def __post_init__(self) -> None:
        for tap, vector in self.vectors.items():
            if not np.all(np.isfinite(vector)):
                raise ProtocolError(f"reference embedding at tap {tap} has non-finite values")


@dataclass
class ObjectiveParts:
    """The local objective and its individually recorded terms."""

    total: Tensor
    ctc: Tensor
    para: Optional[Tensor] = None
    embed: Optional[Tensor] = None
    loss: Optional[Tensor] = None
    n_used: int = 0
    n_skipped: int = 0
    traces: list[ForwardTrace] = field(default_factory=list, repr=False)


def _as_graph(params: Union[ModelParams, Mapping[str, Tensor]]) -> Mapping[str, Tensor]:
    return params.as_constants() if isinstance(params, ModelParams) else params


def _as_traces(traces: Union[ForwardTrace, Sequence[ForwardTrace]]) -> list[ForwardTrace]:
    if isinstance(traces, ForwardTrace):
        return [traces]
    traces = list(traces)
    if not traces:
        raise DataError("regularizer needs at least one forward trace")
    return traces


def r_para(
    local: Union[ModelParams, Mapping[str, Tensor]],
    global_params: ModelParams,
    exclude_prefix: str = FRONTEND_PREFIX,
) -> Tensor:
    """Squared L2 distance between local and frozen global parameters.

    Parameters whose name starts with ``exclude_prefix`` (the feature
    frontend) are left out, so their gradient is zero.
    """
    local = _as_graph(local)
    if set(local) != set(global_params):
        raise ConfigurationError("r_para: local and global models have different parameters")
    terms = [
        squared_l2_distance(local[name], nx.constant(value))
        for name, value in global_params.items()
        if not name.startswith(exclude_prefix)
    ]
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total


def pooled_embedding(trace: ForwardTrace, tap: int) -> Tensor:
    """Mean of a tapped embedding over time frames."""
    try:
        return nx.mean(trace.embeddings[tap], axis=0)
    except KeyError:
        raise ConfigurationError(f"forward trace has no embedding at tap {tap}") from None


def r_embed(
    traces: Union[ForwardTrace, Sequence[ForwardTrace]],
    ref: EmbeddingReference,
    taps: Iterable[int],
) -> Tensor:
    """Squared L2 distance of pooled embeddings to the reference.

    Summed over taps, averaged over the utterances in ``traces``.
    """
    traces = _as_traces(traces)
    taps = sorted(taps)
    missing = [t for t in taps if t not in ref.vectors]
    if missing:
        raise ProtocolError(f"embedding reference missing taps {missing}")
    per_utt = []
    for trace in traces:
        term = None
        for tap in taps:
            d = squared_l2_distance(pooled_embedding(trace, tap), ref.vectors[tap])
            term = d if term is None else term + d
        per_utt.append(term)
    return nx.mean(nx.stack(per_utt))


def r_loss(
    traces: Union[ForwardTrace, Sequence[ForwardTrace]],
    global_params: ModelParams,
    taps: Iterable[int],
) -> Tensor:
    """KL(local output || global pseudo-output from a local embedding).

    For each tap the local embedding is resumed through the frozen global
    model; gradient reaches the local model through both distributions but
    never the global parameters. Summed over taps, averaged over utterances.
    """
    traces = _as_traces(traces)
    frozen = global_params.as_constants()
    config = global_params.config
    taps = sorted(taps)
    bad = [t for t in taps if not 1 <= t <= config.n_blocks]
    if bad:
        raise ConfigurationError(f"r_loss taps {bad} outside 1..{config.n_blocks}")
    per_utt = []
    for trace in traces:
        local_dist = nx.softmax(trace.logits)
        term = None
        for tap in taps:
            if tap not in trace.embeddings:
                raise ConfigurationError(f"forward trace has no embedding at tap {tap}")
            pseudo = nx.softmax(resume_from_tap(frozen, trace.embeddings[tap], tap, config))
            kl = kl_divergence(local_dist, pseudo)
            term = kl if term is None else term + kl
        per_utt.append(term)
    return nx.mean(nx.stack(per_utt))


def local_objective(
    batch: Sequence[Sample],
    local: Union[ModelParams, Mapping[str, Tensor]],
    global_params: ModelParams,
    ref: Optional[EmbeddingReference],
    cfg: RegConfig,
    round_index: int = 0,
) -> ObjectiveParts:
    """L_CTC + lambda_para R_para + lambda_embed R_embed + lambda_loss R_loss.

    Inactive terms are not computed. CTC-infeasible samples are skipped and
    counted; the embedding term is zero in the first round, before any
    reference exists.

    Raises:
        DataError: If the batch is empty or every sample is infeasible.
        ProtocolError: If the reference is missing after the first round.
    """
    if not batch:
        raise DataError("local objective needs a non-empty batch")
    config = global_params.config
    graph = _as_graph(local)
    taps = cfg.forward_taps()

    traces: list[ForwardTrace] = []
    ctc_terms: list[Tensor] = []
    skipped = 0
    for sample in batch:
        trace = forward(graph, sample.features, taps, config=config)
        try:
            ctc_terms.append(ctc_loss(trace.log_probs, sample.labels))
        except InfeasibleSampleError:
            skipped += 1
            continue
        traces.append(trace)
    if not traces:
        raise DataError(f"all {len(batch)} samples in the batch are CTC-infeasible")

    ctc = nx.mean(nx.stack(ctc_terms))
    parts = ObjectiveParts(total=ctc, ctc=ctc, n_used=len(traces), n_skipped=skipped, traces=traces)
    w_para, w_embed, w_loss = cfg.weights

    if cfg.para_active:
        parts.para = r_para(graph, global_params)
        parts.total = parts.total + w_para * parts.para
    if cfg.embed_active:
        if ref is None:
            if round_index > 0:
                raise ProtocolError(
                    f"round {round_index + 1}: embedding reference missing after the first round"
                )
        else:
            parts.embed = r_embed(traces, ref, cfg.embed_taps)
            parts.total = parts.total + w_embed * parts.embed
    if cfg.loss_active:
        parts.loss = r_loss(traces, global_params, cfg.loss_taps)
        parts.total = parts.total + w_loss * parts.loss
    return parts


def quarter_taps(n_blocks: int) -> tuple[int, ...]:
    """Tap positions at each quarter of the encoder depth (6/12/18/24 for 24 blocks)."""
    return tuple(sorted({max(1, math.ceil(k * n_blocks / 4)) for k in range(1, 5)}))


SYSTEM_DESCRIPTIONS = {
    0: "centralized training",
    1: "FedAvg baseline",
    2: "parameter-based",
    3: "embedding, first quarter",
    4: "embedding, second quarter",
    5: "embedding, third quarter",
    6: "embedding, last block",
    7: "embedding, two deepest taps",
    8: "embedding, all taps",
    9: "loss, first quarter",
    10: "loss, second quarter",
    11: "loss, third quarter",
    12: "loss, last block",
    13: "loss, two middle taps",
    14: "loss, all taps",
    15: "parameter + embedding + loss, combined weights",
}


def system_preset(system: int, n_blocks: int = 4) -> RegConfig:
    """Regularization layout of one of the sixteen compared systems.

    System 0 (centralized) uses no regularization; centralization itself is
    an experiment-level switch.
    """
    if system not in SYSTEM_DESCRIPTIONS:
        raise ConfigurationError(f"unknown system {system}; choose 0..15")
    taps = quarter_taps(n_blocks)
    q = taps + (taps[-1],) * (4 - len(taps))
    base = RegConfig()
    if system in (0, 1):
        return base
    if system == 2:
        return replace(base, enable_para=True)
    if 3 <= system <= 6:
        return replace(base, enable_embed=True, embed_taps=(q[system - 3],))
    if system == 7:
        return replace(base, enable_embed=True, embed_taps=tuple(sorted({q[2], q[3]})))
    if system == 8:
        return replace(base, enable_embed=True, embed_taps=taps)
    if 9 <= system <= 12:
        return replace(base, enable_loss=True, loss_taps=(q[system - 9],))
    if system == 13:
        return replace(base, enable_loss=True, loss_taps=tuple(sorted({q[1], q[2]})))
    if system == 14:
        return replace(base, enable_loss=True, loss_taps=taps)
    return replace(
        base,
        enable_para=True,
        enable_embed=True,
        embed_taps=taps,
        enable_loss=True,
        loss_taps=taps,
        combined_preset=True,
    )
