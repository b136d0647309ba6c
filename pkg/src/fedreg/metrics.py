"""Evaluation: greedy CTC decoding, error rates and the matched-pairs test."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Hashable, Iterable, Optional, Sequence

import numpy as np
from scipy import stats

from .errors import DataError, InfeasibleSampleError
from .losses import ctc_loss_value
from .model import BLANK, ModelParams, forward
from .synthdata import WORD_DELIMITER, Utterance

CSV_FIELDS = (
    "round",
    "split",
    "group",
    "ctc_loss",
    "ter",
    "wer",
    "comm_params",
    "comm_embed_scalars",
)
ALL_GROUPS = "all"


def greedy_ctc_decode(log_probs: np.ndarray) -> tuple[int, ...]:
    """Per-frame argmax, collapse repeats, drop blanks."""
    best = np.argmax(np.asarray(log_probs), axis=1)
    out: list[int] = []
    previous = None
    for token in best.tolist():
        if token != previous and token != BLANK:
            out.append(int(token))
        previous = token
    return tuple(out)


def edit_distance(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> float:
    """Edit distance divided by reference length; may exceed 1."""
    if len(ref) == 0:
        raise DataError("error rate is undefined for an empty reference")
    return edit_distance(ref, hyp) / len(ref)


def split_words(tokens: Sequence[int]) -> list[tuple[int, ...]]:
    """Split a token sequence into words at the delimiter; empty words are dropped."""
    words: list[tuple[int, ...]] = []
    current: list[int] = []
    for token in tokens:
        if token == WORD_DELIMITER:
            if current:
                words.append(tuple(current))
            current = []
        else:
            current.append(int(token))
    if current:
        words.append(tuple(current))
    return words


@dataclass
class UtteranceScore:
    """Scores of one held-out utterance (the matched-pairs segment)."""

    split: str
    group: str
    ctc_loss: Optional[float]
    token_errors: int
    n_tokens: int
    word_errors: int
    n_words: int


@dataclass
class EvalRow:
    round: int
    split: str
    group: str
    ctc_loss: float
    ter: float
    wer: float
    comm_params: int = 0
    comm_embed_scalars: int = 0

    def as_dict(self) -> dict[str, object]:
        return asdict(self)


@dataclass
class EvalReport:
    """Rows for one evaluation plus the per-utterance scores behind them."""

    rows: list[EvalRow]
    scores: list[UtteranceScore] = field(default_factory=list)
    n_infeasible: int = 0

    def row(self, split: Optional[str] = None, group: str = ALL_GROUPS) -> EvalRow:
        for r in self.rows:
            if r.group == group and (split is None or r.split == split):
                return r
        raise KeyError(f"no row for split={split} group={group}")

    @property
    def word_errors(self) -> list[int]:
        return [s.word_errors for s in self.scores]

    def overall_wer(self) -> float:
        """Micro-averaged WER over every held-out utterance."""
        words = sum(s.n_words for s in self.scores)
        return sum(s.word_errors for s in self.scores) / words if words else 0.0

    def overall_loss(self) -> float:
        losses = [s.ctc_loss for s in self.scores if s.ctc_loss is not None]
        return float(np.mean(losses)) if losses else math.inf


def score_utterance(params: ModelParams, utt: Utterance) -> UtteranceScore:
    log_probs = forward(params, utt.features).log_probs.data
    try:
        loss: Optional[float] = ctc_loss_value(log_probs, utt.labels)
    except InfeasibleSampleError:
        loss = None
    hyp = greedy_ctc_decode(log_probs)
    ref_words, hyp_words = split_words(utt.labels), split_words(hyp)
    return UtteranceScore(
        split=utt.split,
        group=utt.group,
        ctc_loss=loss,
        token_errors=edit_distance(utt.labels, hyp),
        n_tokens=len(utt.labels),
        word_errors=edit_distance(ref_words, hyp_words),
        n_words=len(ref_words),
    )


def _aggregate(round_index: int, split: str, group: str, scores: list[UtteranceScore]) -> EvalRow:
    losses = [s.ctc_loss for s in scores if s.ctc_loss is not None]
    n_tokens = sum(s.n_tokens for s in scores)
    n_words = sum(s.n_words for s in scores)
    return EvalRow(
        round=round_index,
        split=split,
        group=group,
        ctc_loss=float(np.mean(losses)) if losses else math.inf,
        ter=sum(s.token_errors for s in scores) / n_tokens if n_tokens else 0.0,
        wer=sum(s.word_errors for s in scores) / n_words if n_words else 0.0,
    )


def evaluate(
    params: ModelParams,
    utterances: Sequence[Utterance],
    round_index: int = 0,
    groups: Optional[Iterable[str]] = None,
) -> EvalReport:
    """Score ``params`` on held-out utterances.

    One row per split for all utterances, plus one per group when the
    utterances carry group tags (severity bands or speaker roles). Error
    rates are micro-averaged (total errors over total reference length).
    """
    if not utterances:
        raise DataError("evaluation set is empty")
    scores = [score_utterance(params, u) for u in utterances]
    group_names = sorted(groups) if groups is not None else sorted({u.group for u in utterances if u.group})
    rows: list[EvalRow] = []
    for split in sorted({s.split for s in scores}):
        in_split = [s for s in scores if s.split == split]
        rows.append(_aggregate(round_index, split, ALL_GROUPS, in_split))
        for group in group_names:
            in_group = [s for s in in_split if s.group == group]
            if in_group:
                rows.append(_aggregate(round_index, split, group, in_group))
    n_infeasible = sum(1 for s in scores if s.ctc_loss is None)
    return EvalReport(rows=rows, scores=scores, n_infeasible=n_infeasible)


@dataclass
class MatchedPairsResult:
    """Outcome of the matched-pairs segment word-error test."""

    z: float
    p_value: float
    significant: bool
    degenerate: bool
    n_segments: int
    mean_difference: float
    alpha: float


def mapsswe_test(
    errors_a: Sequence[float], errors_b: Sequence[float], alpha: float = 0.05
) -> MatchedPairsResult:
    """Matched-pairs test on per-segment error counts (segment = utterance).

    With d_i = e_i^A - e_i^B, z = mean(d) / (stdev(d) / sqrt(n)) using the
    sample standard deviation; the difference is significant when |z|
    exceeds the two-sided normal critical value for ``alpha`` (1.96 at 0.05).
    Zero variance is never significant and is flagged degenerate.
    """
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DataError(f"segment counts differ: {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise DataError(f"matched-pairs test needs >= 2 segments, got {n}")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        z = 0.0 if mean == 0.0 else math.copysign(math.inf, mean)
        return MatchedPairsResult(z, 1.0, False, True, n, mean, alpha)
    z = mean / (sd / math.sqrt(n))
    critical = float(stats.norm.ppf(1.0 - alpha / 2.0))
    p_value = float(2.0 * stats.norm.sf(abs(z)))
    return MatchedPairsResult(z, p_value, abs(z) > critical, False, n, mean, alpha)
