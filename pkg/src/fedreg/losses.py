"""Training and regularization loss primitives.

- :func:`ctc_loss`: CTC negative log-likelihood via the log-space alpha
  recursion; gradients come from autodiff through the recursion.
- :func:`kl_divergence`: frame-averaged D_KL(p || q) in nats.
- :func:`squared_l2_distance`: sum of squared differences.
"""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, DataError, InfeasibleSampleError
from .model import BLANK
from .numerics import Tensor, TensorLike

KL_FLOOR = 1e-12
NEG_INF = -np.inf

LabelSeq = Sequence[int]


def validate_labels(labels: LabelSeq, vocab_size: int) -> tuple[int, ...]:
    """Check a label sequence is non-empty, blank-free and inside the vocabulary."""
    labels = tuple(int(t) for t in labels)
    if not labels:
        raise DataError("label sequence must contain at least one token")
    bad = [t for t in labels if not 1 <= t < vocab_size]
    if bad:
        raise DataError(f"label tokens {bad} outside 1..{vocab_size - 1} (blank is {BLANK})")
    return labels


def min_frames(labels: LabelSeq) -> int:
    """Fewest frames that can emit ``labels``: one per token plus a blank per repeat."""
    labels = tuple(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def ctc_feasible(n_frames: int, labels: LabelSeq) -> bool:
    return n_frames >= min_frames(labels)


def _extended(labels: tuple[int, ...]) -> np.ndarray:
    ext = np.full(2 * len(labels) + 1, BLANK, dtype=np.int64)
    ext[1::2] = labels
    return ext


def ctc_loss(log_probs: Tensor, labels: LabelSeq) -> Tensor:
    """-log P(labels | log_probs) for one utterance.

    Args:
        log_probs: Per-frame log-probabilities of shape (frames, vocab).
        labels: Target token ids, blank excluded.

    Raises:
        InfeasibleSampleError: If the frames cannot carry the labels.
    """
    if log_probs.data.ndim != 2:
        raise ConfigurationError(f"ctc_loss expects (frames, vocab) log-probs, got {log_probs.shape}")
    n_frames, vocab = log_probs.shape
    labels = validate_labels(labels, vocab)
    required = min_frames(labels)
    if n_frames < required:
        raise InfeasibleSampleError(n_frames, len(labels), required)

    ext = _extended(labels)
    n_states = ext.size
    emit = log_probs[(slice(None), ext)]

    # allowed skip from s-2 to s: s is a label state differing from the label two back
    skip = np.full(n_states, NEG_INF)
    for s in range(3, n_states, 2):
        if ext[s] != ext[s - 2]:
            skip[s] = 0.0
    start = np.full(n_states, NEG_INF)
    start[:2] = 0.0

    alpha = emit[0] + start
    pad1 = np.full(1, NEG_INF)
    pad2 = np.full(2, NEG_INF)
    for t in range(1, n_frames):
        stay = alpha
        step = nx.concat([pad1, alpha[:-1]])
        jump = nx.concat([pad2, alpha[:-2]]) + skip
        alpha = nx.logsumexp(nx.stack([stay, step, jump], axis=0), axis=0) + emit[t]
    final = nx.logsumexp(alpha[n_states - 2 :], axis=0)
    return -final


def kl_divergence(p: TensorLike, q: TensorLike) -> Tensor:
    """Mean over rows of sum_v p log(p / q), with p and q floored at 1e-12.

    Rows of ``p`` and ``q`` are distributions over the same vocabulary.
    Operand order is local first: D_KL(local || pseudo).
    """
    p, q = nx.as_tensor(p), nx.as_tensor(q)
    if p.shape != q.shape or p.data.ndim != 2:
        raise ConfigurationError(f"kl_divergence: shape mismatch {p.shape} vs {q.shape}")
    log_ratio = nx.log(nx.clamp_min(p, KL_FLOOR)) - nx.log(nx.clamp_min(q, KL_FLOOR))
    per_row = nx.sum(p * log_ratio, axis=1)
    return nx.mean(per_row)


def squared_l2_distance(a: TensorLike, b: TensorLike) -> Tensor:
    """Sum of squared elementwise differences of two equal-length vectors."""
    a, b = nx.as_tensor(a), nx.as_tensor(b)
    if a.shape != b.shape:
        raise ConfigurationError(f"squared_l2_distance: length mismatch {a.shape} vs {b.shape}")
    return nx.squared_l2_norm(a - b)


def ctc_loss_value(log_probs: Union[np.ndarray, Tensor], labels: LabelSeq) -> float:
    """Convenience scalar CTC loss without keeping a graph."""
    return ctc_loss(nx.constant(log_probs), labels).item()
