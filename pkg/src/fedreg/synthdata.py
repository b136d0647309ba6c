"""Synthetic heterogeneous client corpora.

Stands in for restricted pathological-speech corpora. Every label token owns
a canonical prototype frame sequence; a speaker's severity controls additive
noise, a linear channel transform and temporal stretching, and each client
draws words from its own Dirichlet-skewed distribution. The result has the
three properties regularized federation is meant to handle: little data per
client, imbalanced label distributions and heterogeneous speakers.

Vocabulary layout: 0 is the CTC blank, 1 the word delimiter ``|``, and
2..V-1 are letters. Utterances are lexicon words joined by the delimiter.
"""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np

from .errors import ConfigurationError, DataError

logger = logging.getLogger(__name__)

CORPUS_SCHEMA = "fedreg.corpus/v1"
WORD_DELIMITER = 1
FIRST_LETTER = 2
SEVERITIES = ("VL", "L", "M", "H")


@dataclass(frozen=True)
class SeverityProfile:
    """Distortion strengths for one intelligibility band."""

    noise: float
    channel: float
    stretch: float


SEVERITY_PROFILES: dict[str, SeverityProfile] = {
    "H": SeverityProfile(noise=0.1, channel=0.05, stretch=1.0),
    "M": SeverityProfile(noise=0.3, channel=0.15, stretch=1.25),
    "L": SeverityProfile(noise=0.6, channel=0.3, stretch=1.5),
    "VL": SeverityProfile(noise=1.0, channel=0.5, stretch=2.0),
}

PRESETS: dict[str, dict[str, object]] = {
    # one speaker per client, isolated words
    "dysarthric": {
        "n_clients": 16,
        "words_per_utterance": (1, 1),
        "severity_mix": {"VL": 0.25, "L": 0.2, "M": 0.2, "H": 0.35},
    },
    # participant + investigator per client, short phrases, dev/eval split
    "elderly": {
        "n_clients": 10,
        "words_per_utterance": (1, 3),
        "severity_mix": {"L": 0.5, "M": 0.5},
    },
}


@dataclass(frozen=True)
class ScenarioConfig:
    """How to synthesise a federated corpus."""

    preset: str = "dysarthric"
    n_clients: int = 16
    utterances_min: int = 60
    utterances_max: int = 180
    test_per_client: int = 20
    vocab_size: int = 12
    input_dim: int = 16
    lexicon_size: int = 24
    word_length: tuple[int, int] = (1, 3)
    words_per_utterance: tuple[int, int] = (1, 1)
    frames_per_token: tuple[int, int] = (1, 2)
    severity_mix: dict[str, float] = field(
        default_factory=lambda: {"VL": 0.25, "L": 0.2, "M": 0.2, "H": 0.35}
    )
    dirichlet_alpha: float = 1.0
    noise_scale: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.preset not in (*PRESETS, "custom"):
            raise ConfigurationError(f"unknown scenario preset {self.preset!r}")
        if self.n_clients < 1:
            raise ConfigurationError(f"n_clients must be >= 1, got {self.n_clients}")
        if not 1 <= self.utterances_min <= self.utterances_max:
            raise ConfigurationError(
                f"utterance range [{self.utterances_min}, {self.utterances_max}] is empty"
            )
        if self.test_per_client < 0:
            raise ConfigurationError("test_per_client must be >= 0")
        if self.vocab_size < 3:
            raise ConfigurationError("vocab_size must hold blank, delimiter and >= 1 letter")
        for name in ("word_length", "words_per_utterance", "frames_per_token"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ConfigurationError(f"{name} range [{lo}, {hi}] is empty")
            object.__setattr__(self, name, (int(lo), int(hi)))
        n_letters = self.vocab_size - FIRST_LETTER
        capacity = sum(n_letters**k for k in range(self.word_length[0], self.word_length[1] + 1))
        if not 1 <= self.lexicon_size <= capacity:
            raise ConfigurationError(
                f"lexicon_size {self.lexicon_size} impossible with {n_letters} letters "
                f"and word lengths {self.word_length}"
            )
        unknown = set(self.severity_mix) - set(SEVERITIES)
        if unknown or not self.severity_mix or sum(self.severity_mix.values()) <= 0:
            raise ConfigurationError(f"invalid severity_mix {self.severity_mix}")
        if any(v < 0 for v in self.severity_mix.values()):
            raise ConfigurationError("severity_mix weights must be >= 0")
        if not self.dirichlet_alpha > 0:
            raise ConfigurationError(f"dirichlet_alpha must be > 0, got {self.dirichlet_alpha}")
        if self.noise_scale < 0:
            raise ConfigurationError("noise_scale must be >= 0")

    @classmethod
    def from_preset(cls, preset: str, **overrides: object) -> "ScenarioConfig":
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown scenario preset {preset!r}")
        values: dict[str, object] = {"preset": preset, **PRESETS[preset]}
        values.update(overrides)
        return cls(**values)  # type: ignore[arg-type]


@dataclass
class Utterance:
    """One labelled feature sequence."""

    features: np.ndarray
    labels: tuple[int, ...]
    client_id: int
    group: str = ""
    split: str = "train"

    @property
    def n_frames(self) -> int:
        return int(self.features.shape[0])


@dataclass
class Speaker:
    group: str
    severity: str
    channel: np.ndarray
    noise_std: float
    stretch: float


@dataclass
class Corpus:
    """Client shards plus the held-out utterances."""

    config: ScenarioConfig
    shards: dict[int, list[Utterance]]
    test: list[Utterance]
    client_severity: dict[int, str] = field(default_factory=dict)

    @property
    def splits(self) -> list[str]:
        return sorted({u.split for u in self.test})

    @property
    def groups(self) -> list[str]:
        return sorted({u.group for u in self.test if u.group})

    def pooled(self) -> list[Utterance]:
        """All training utterances in ascending client order."""
        return [u for cid in sorted(self.shards) for u in self.shards[cid]]


@dataclass
class PartitionStats:
    counts: dict[int, int]
    weights: dict[int, float]
    label_histograms: dict[int, np.ndarray]
    entropy: dict[int, float]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def skew(self) -> float:
        """1 minus the mean normalised label entropy; higher is more skewed."""
        return 1.0 - float(np.mean(list(self.entropy.values())))


def data_weights(counts: Mapping[int, int]) -> dict[int, float]:
    """Client weight n_i / sum_j n_j, keyed by client id."""
    total = sum(counts.values())
    if total <= 0 or any(n < 1 for n in counts.values()):
        raise DataError(f"every client needs at least one sample, got counts {dict(counts)}")
    return {cid: counts[cid] / total for cid in sorted(counts)}


def _stretch(frames: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return frames
    n = int(np.ceil(frames.shape[0] * factor))
    index = np.minimum((np.arange(n) / factor).astype(int), frames.shape[0] - 1)
    return frames[index]


def make_speaker(
    group: str, severity: str, input_dim: int, noise_scale: float, rng: np.random.Generator
) -> Speaker:
    profile = SEVERITY_PROFILES[severity]
    mixing = rng.normal(0.0, 1.0, size=(input_dim, input_dim)) / np.sqrt(input_dim)
    channel = np.eye(input_dim) + noise_scale * profile.channel * mixing
    return Speaker(
        group=group,
        severity=severity,
        channel=channel,
        noise_std=noise_scale * profile.noise,
        stretch=profile.stretch,
    )


def distort(clean: np.ndarray, speaker: Speaker, rng: np.random.Generator) -> np.ndarray:
    """Apply a speaker's channel transform, stretch and additive noise."""
    frames = _stretch(clean, speaker.stretch) @ speaker.channel
    if speaker.noise_std > 0:
        frames = frames + rng.normal(0.0, speaker.noise_std, size=frames.shape)
    return frames


def distortion_energy(
    severity: str, input_dim: int, n_samples: int, seed: int = 0, noise_scale: float = 1.0
) -> float:
    """Mean squared per-frame distortion for fresh speakers of one severity."""
    rng = np.random.default_rng(seed)
    energies = []
    for _ in range(n_samples):
        speaker = make_speaker("", severity, input_dim, noise_scale, rng)
        clean = rng.normal(0.0, 1.0, size=(1, input_dim))
        noisy = clean @ speaker.channel + rng.normal(0.0, 1.0, size=clean.shape) * speaker.noise_std
        energies.append(float(np.sum((noisy - clean) ** 2)))
    return float(np.mean(energies))


class _Generator:
    def __init__(self, cfg: ScenarioConfig) -> None:
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.prototypes = self._prototypes()
        self.lexicon = self._lexicon()

    def _prototypes(self) -> dict[int, np.ndarray]:
        lo, hi = self.cfg.frames_per_token
        protos = {}
        for token in range(1, self.cfg.vocab_size):
            length = int(self.rng.integers(lo, hi + 1))
            centre = self.rng.normal(0.0, 1.0, size=self.cfg.input_dim)
            jitter = self.rng.normal(0.0, 0.1, size=(length, self.cfg.input_dim))
            protos[token] = centre + jitter
        return protos

    def _lexicon(self) -> list[tuple[int, ...]]:
        lo, hi = self.cfg.word_length
        words: list[tuple[int, ...]] = []
        seen: set[tuple[int, ...]] = set()
        while len(words) < self.cfg.lexicon_size:
            length = int(self.rng.integers(lo, hi + 1))
            word = tuple(
                int(t) for t in self.rng.integers(FIRST_LETTER, self.cfg.vocab_size, size=length)
            )
            if word not in seen:
                seen.add(word)
                words.append(word)
        return words

    def clean_features(self, labels: Sequence[int]) -> np.ndarray:
        silence = np.zeros((1, self.cfg.input_dim))
        parts = [silence]
        for token in labels:
            parts += [self.prototypes[token], silence]
        return np.concatenate(parts, axis=0)

    def labels_for(self, word_probs: np.ndarray) -> tuple[int, ...]:
        lo, hi = self.cfg.words_per_utterance
        n_words = int(self.rng.integers(lo, hi + 1))
        picks = self.rng.choice(len(self.lexicon), size=n_words, p=word_probs)
        labels: list[int] = []
        for i, w in enumerate(picks):
            if i:
                labels.append(WORD_DELIMITER)
            labels.extend(self.lexicon[int(w)])
        return tuple(labels)

    def utterance(
        self, speaker: Speaker, word_probs: np.ndarray, client_id: int, split: str
    ) -> Utterance:
        labels = self.labels_for(word_probs)
        features = distort(self.clean_features(labels), speaker, self.rng)
        return Utterance(features, labels, client_id, speaker.group, split)

    def severities(self) -> list[str]:
        mix = self.cfg.severity_mix
        names = [s for s in SEVERITIES if mix.get(s, 0) > 0]
        probs = np.array([mix[s] for s in names], dtype=np.float64)
        picks = self.rng.choice(len(names), size=self.cfg.n_clients, p=probs / probs.sum())
        return [names[int(i)] for i in picks]


def generate_scenario(cfg: ScenarioConfig) -> Corpus:
    """Build client shards and the held-out set; a pure function of ``cfg``.

    The ``elderly`` preset gives every client a participant (``PAR``) and an
    investigator (``INV``, severity H) and splits held-out data into ``dev``
    and ``eval``. Other presets use one speaker per client, grouped by
    severity, with a single ``test`` split.
    """
    gen = _Generator(cfg)
    uniform = np.full(cfg.lexicon_size, 1.0 / cfg.lexicon_size)
    shards: dict[int, list[Utterance]] = {}
    test: list[Utterance] = []
    client_severity: dict[int, str] = {}

    for cid, severity in enumerate(gen.severities()):
        client_severity[cid] = severity
        if cfg.preset == "elderly":
            speakers = [
                make_speaker("PAR", severity, cfg.input_dim, cfg.noise_scale, gen.rng),
                make_speaker("INV", "H", cfg.input_dim, cfg.noise_scale, gen.rng),
            ]
        else:
            speakers = [make_speaker(severity, severity, cfg.input_dim, cfg.noise_scale, gen.rng)]
        word_probs = gen.rng.dirichlet(np.full(cfg.lexicon_size, cfg.dirichlet_alpha))
        # choice() is strict about the sum
        word_probs = word_probs / word_probs.sum()
        n_train = int(gen.rng.integers(cfg.utterances_min, cfg.utterances_max + 1))
        shards[cid] = [
            gen.utterance(speakers[i % len(speakers)], word_probs, cid, "train")
            for i in range(n_train)
        ]
        for i in range(cfg.test_per_client):
            if cfg.preset == "elderly":
                split = "dev" if i % 2 == 0 else "eval"
            else:
                split = "test"
            test.append(gen.utterance(speakers[(i // 2) % len(speakers)], uniform, cid, split))

    logger.info(
        "generated scenario preset=%s clients=%d train=%d test=%d",
        cfg.preset,
        cfg.n_clients,
        sum(len(s) for s in shards.values()),
        len(test),
    )
    return Corpus(cfg, shards, test, client_severity)


def partition_stats(shards: Mapping[int, Sequence[Utterance]], vocab_size: int) -> PartitionStats:
    """Per-client counts, FedAvg weights, label histograms and entropy."""
    counts = {cid: len(shards[cid]) for cid in sorted(shards)}
    weights = data_weights(counts)
    histograms: dict[int, np.ndarray] = {}
    entropy: dict[int, float] = {}
    for cid in counts:
        hist = np.zeros(vocab_size)
        for utt in shards[cid]:
            for token in utt.labels:
                hist[token] += 1
        histograms[cid] = hist
        p = hist[hist > 0] / hist.sum()
        entropy[cid] = float(-(p * np.log(p)).sum() / np.log(vocab_size - 1))
    return PartitionStats(counts, weights, histograms, entropy)


def _encode_features(features: np.ndarray) -> str:
    return base64.b64encode(features.astype("<f8").tobytes()).decode("ascii")


def _decode_features(payload: str, shape: Sequence[int]) -> np.ndarray:
    raw = base64.b64decode(payload.encode("ascii"))
    return np.frombuffer(raw, dtype="<f8").reshape(tuple(shape)).astype(np.float64)


def write_corpus(corpus: Corpus, path: Union[str, Path]) -> None:
    """Write a JSON-lines corpus: a schema header, then one utterance per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "schema": CORPUS_SCHEMA,
        "config": asdict(corpus.config),
        "client_severity": {str(k): v for k, v in corpus.client_severity.items()},
    }
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header) + "\n")
        for utt in [*corpus.pooled(), *corpus.test]:
            record = {
                "client_id": utt.client_id,
                "split": utt.split,
                "group": utt.group,
                "labels": list(utt.labels),
                "shape": list(utt.features.shape),
                "features": _encode_features(utt.features),
            }
            f.write(json.dumps(record) + "\n")


def read_corpus(path: Union[str, Path]) -> Corpus:
    """Read a corpus written by :func:`write_corpus`."""
    with open(path, encoding="utf-8") as f:
        lines = [line for line in f if line.strip()]
    if not lines:
        raise DataError(f"{path}: empty corpus file")
    header = json.loads(lines[0])
    if header.get("schema") != CORPUS_SCHEMA:
        raise DataError(f"{path}: unsupported corpus schema {header.get('schema')!r}")
    cfg_dict = dict(header["config"])
    cfg_dict["severity_mix"] = dict(cfg_dict["severity_mix"])
    for key in ("word_length", "words_per_utterance", "frames_per_token"):
        cfg_dict[key] = tuple(cfg_dict[key])
    cfg = ScenarioConfig(**cfg_dict)
    shards: dict[int, list[Utterance]] = {}
    test: list[Utterance] = []
    for line in lines[1:]:
        rec = json.loads(line)
        utt = Utterance(
            features=_decode_features(rec["features"], rec["shape"]),
            labels=tuple(rec["labels"]),
            client_id=int(rec["client_id"]),
            group=rec.get("group", ""),
            split=rec["split"],
        )
        if utt.split == "train":
            shards.setdefault(utt.client_id, []).append(utt)
        else:
            test.append(utt)
    severity = {int(k): v for k, v in header.get("client_severity", {}).items()}
    return Corpus(cfg, shards, test, severity)


def centralize(corpus: Corpus) -> dict[int, list[Utterance]]:
    """A single shard holding every training utterance (client id 0)."""
    return {0: corpus.pooled()}
