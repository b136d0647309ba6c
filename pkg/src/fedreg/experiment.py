"""Running experiments, sweeps and comparisons, and writing their results.

A run directory holds::

    metrics.csv     one row per (round, split, group)
    segments.csv    per-utterance error counts of the final model
    summary.json    final metrics, wall time, step and skip counts
    manifest.json   config, seed and package version
    model.frsm      final global model

Multi-seed runs write one ``seed-<n>`` directory per seed.
"""

from __future__ import annotations

import csv
import json
import logging
import platform
from dataclasses import asdict, dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

import numpy as np

from .config import ExperimentConfig, config_to_dict
from .decorators import TelemetrySpan
from .errors import ConfigurationError, DataError, ProtocolError
from .federation import CommSchedule, ExperimentResult, run_experiment
from .metrics import CSV_FIELDS, MatchedPairsResult, mapsswe_test
from .model import save_checkpoint
from .regularizers import SYSTEM_DESCRIPTIONS, RegConfig
from .synthdata import Corpus, generate_scenario, read_corpus
from .telemetry import EventCategory, RunEvent

logger = logging.getLogger(__name__)

SEGMENT_FIELDS = ("index", "split", "group", "word_errors", "n_words", "token_errors", "n_tokens")
COMM_FREQUENCIES = ("1bt", "0.25ep", "1ep")
SWEEP_AXES = ("comm-frequency", "reg-method", "tap-position")

PathLike = Union[str, Path]


def _package_version() -> str:
    from . import __version__

    return __version__


def load_corpus(cfg: ExperimentConfig) -> Corpus:
    """Read ``cfg.corpus_path`` or synthesise the configured scenario.

    Raises:
        ConfigurationError: If the corpus does not fit the model shape.
    """
    corpus = read_corpus(cfg.corpus_path) if cfg.corpus_path else generate_scenario(cfg.scenario)
    if corpus.config.input_dim != cfg.model.input_dim:
        raise ConfigurationError(
            f"corpus features have width {corpus.config.input_dim}, "
            f"model expects {cfg.model.input_dim}"
        )
    if corpus.config.vocab_size != cfg.model.vocab_size:
        raise ConfigurationError(
            f"corpus vocabulary {corpus.config.vocab_size} != model vocabulary {cfg.model.vocab_size}"
        )
    if not corpus.test:
        raise DataError("corpus has no held-out utterances")
    return corpus


def write_manifest(
    out_dir: PathLike, cfg: ExperimentConfig, seed: Optional[int], **extra: Any
) -> Path:
    path = Path(out_dir) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "package": "fedreg",
        "version": _package_version(),
        "python": platform.python_version(),
        "created": datetime.now(timezone.utc).isoformat(),
        "seed": seed,
        "config": config_to_dict(cfg),
        **extra,
    }
    path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return path


def write_metrics_csv(result: ExperimentResult, path: PathLike) -> None:
    """Header plus one row per (round, split, group), ordered by round."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for report in result.history:
            for row in report.rows:
                writer.writerow(row.as_dict())


def write_segments_csv(result: ExperimentResult, path: PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=SEGMENT_FIELDS)
        writer.writeheader()
        for i, score in enumerate(result.final.scores):
            writer.writerow(
                {
                    "index": i,
                    "split": score.split,
                    "group": score.group,
                    "word_errors": score.word_errors,
                    "n_words": score.n_words,
                    "token_errors": score.token_errors,
                    "n_tokens": score.n_tokens,
                }
            )


def summarize(result: ExperimentResult, cfg: ExperimentConfig, seed: int) -> dict[str, Any]:
    final = result.final
    return {
        "seed": seed,
        "system": cfg.system,
        "description": SYSTEM_DESCRIPTIONS.get(cfg.system) if cfg.system is not None else None,
        "centralized": result.centralized,
        "n_clients": result.n_clients,
        "rounds": result.state.round_index,
        "local_steps": cfg.schedule.local_steps,
        "total_steps": result.state.total_steps,
        "wall_seconds": round(result.wall_seconds, 4),
        "skipped_samples": result.state.skipped_samples,
        "eval_infeasible": final.n_infeasible,
        "wer": final.overall_wer(),
        "ctc_loss": final.overall_loss(),
        "comm_params": result.state.comm.params_scalars,
        "comm_embed_scalars": result.state.comm.embed_scalars,
        "final": [row.as_dict() for row in final.rows],
    }


@dataclass
class RunOutput:
    seed: int
    directory: Path
    result: ExperimentResult
    summary: dict[str, Any]


def run_single(
    cfg: ExperimentConfig,
    seed: int,
    out_dir: PathLike,
    corpus: Optional[Corpus] = None,
) -> RunOutput:
    """Train one seed and write the run directory."""
    corpus = corpus if corpus is not None else load_corpus(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, cfg, seed)
    result = run_experiment(
        cfg.model,
        cfg.reg,
        cfg.schedule,
        corpus,
        seed,
        lr=cfg.lr,
        threads=cfg.threads,
        centralized=cfg.is_centralized,
    )
    write_metrics_csv(result, out / "metrics.csv")
    write_segments_csv(result, out / "segments.csv")
    save_checkpoint(result.state.params, out / "model.frsm")
    summary = summarize(result, cfg, seed)
    (out / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    logger.info("run seed=%d wer=%.4f -> %s", seed, summary["wer"], out)
    return RunOutput(seed, out, result, summary)


def run_seeds(cfg: ExperimentConfig, out_dir: Optional[PathLike] = None) -> list[RunOutput]:
    """Run every configured seed on one shared corpus, one directory per seed."""
    root = Path(out_dir or cfg.out_dir)
    corpus = load_corpus(cfg)
    write_manifest(root, cfg, None, seeds=list(cfg.seeds))
    return [run_single(cfg, seed, root / f"seed-{seed}", corpus) for seed in cfg.seeds]


# ---- comparison ----------------------------------------------------------


@dataclass
class Segment:
    split: str
    group: str
    word_errors: int
    n_words: int


def read_segments(path: PathLike) -> list[Segment]:
    """Per-utterance counts of a run, pooled over ``seed-*`` directories in seed order.

    Raises:
        DataError: If no segment file is found.
    """
    path = Path(path)
    if path.is_dir() and (path / "segments.csv").exists():
        files = [path / "segments.csv"]
    elif path.is_dir():
        seeds = sorted(path.glob("seed-*/segments.csv"), key=lambda p: int(p.parent.name[5:]))
        files = list(seeds)
    else:
        files = [path]
    if not files or not all(f.exists() for f in files):
        raise DataError(f"{path}: no segments.csv found")
    segments: list[Segment] = []
    for file in files:
        with open(file, newline="", encoding="utf-8") as f:
            for row in csv.DictReader(f):
                segments.append(
                    Segment(row["split"], row["group"], int(row["word_errors"]), int(row["n_words"]))
                )
    return segments


@dataclass
class ComparisonResult:
    """System B against system A on the same held-out segments."""

    wer_a: float
    wer_b: float
    absolute_reduction: float
    relative_reduction: float
    test: MatchedPairsResult

    def as_dict(self) -> dict[str, Any]:
        return {**{k: v for k, v in asdict(self).items() if k != "test"}, **asdict(self.test)}

    def verdict(self) -> str:
        if self.test.degenerate:
            return "no difference (degenerate)"
        if not self.test.significant:
            return "not significant"
        better = "B" if self.test.mean_difference > 0 else "A"
        return f"{better} significantly better"


def _micro_wer(segments: Sequence[Segment]) -> float:
    words = sum(s.n_words for s in segments)
    return sum(s.word_errors for s in segments) / words if words else 0.0


def compare_segments(
    a: Sequence[Segment], b: Sequence[Segment], alpha: float = 0.05
) -> ComparisonResult:
    """Matched-pairs test plus absolute and relative WER reduction of B over A.

    Raises:
        DataError: If the two runs were not scored on the same segments.
    """
    if len(a) != len(b):
        raise DataError(f"runs scored different segment counts: {len(a)} vs {len(b)}")
    for i, (sa, sb) in enumerate(zip(a, b)):
        if (sa.split, sa.group, sa.n_words) != (sb.split, sb.group, sb.n_words):
            raise DataError(f"segment {i} differs between runs; were they scored on one corpus?")
    test = mapsswe_test([s.word_errors for s in a], [s.word_errors for s in b], alpha)
    wer_a, wer_b = _micro_wer(a), _micro_wer(b)
    absolute = wer_a - wer_b
    relative = absolute / wer_a if wer_a > 0 else 0.0
    return ComparisonResult(wer_a, wer_b, absolute, relative, test)


def compare_runs(path_a: PathLike, path_b: PathLike, alpha: float = 0.05) -> ComparisonResult:
    return compare_segments(read_segments(path_a), read_segments(path_b), alpha)


# ---- sweeps --------------------------------------------------------------


@dataclass
class SweepResult:
    axis: str
    rows: list[dict[str, Any]]
    best: list[Any]


def _write_sweep(out: Path, result: SweepResult) -> None:
    out.mkdir(parents=True, exist_ok=True)
    columns: list[str] = []
    for row in result.rows:
        columns.extend(k for k in row if k not in columns)
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        writer.writerows(result.rows)
    (out / "sweep.json").write_text(
        json.dumps({"axis": result.axis, "best": result.best, "rows": result.rows}, indent=2),
        encoding="utf-8",
    )


def _cell(
    cfg: ExperimentConfig, seed: int, out: Path, corpus: Corpus, label: str
) -> RunOutput:
    with TelemetrySpan("sweep.cell", label) as span:
        span.set_data("seed", seed)
        output = run_single(cfg, seed, out, corpus)
    RunEvent(
        "cell_completed",
        EventCategory.SWEEP,
        {"cell": label, "seed": seed, "wer": round(output.summary["wer"], 6)},
    ).send()
    return output


def planned_total_steps(cfg: ExperimentConfig, corpus: Corpus) -> int:
    """Per-client step budget implied by the configured schedule."""
    if cfg.schedule.step_budget is not None:
        return cfg.schedule.step_budget
    counts = [len(s) for s in corpus.shards.values()]
    return cfg.schedule.total_rounds * cfg.schedule.nominal_steps_per_round(counts)


def sweep_comm_frequency(
    cfg: ExperimentConfig,
    out_dir: PathLike,
    frequencies: Iterable[str] = COMM_FREQUENCIES,
    total_steps: Optional[int] = None,
    corpus: Optional[Corpus] = None,
) -> SweepResult:
    """One run per synchronization frequency with the total step budget held fixed.

    ``total_steps`` is the number of local steps every client takes, so all
    cells execute the same number of client steps. Each seed also gets a
    centralized reference trained for ``total_steps`` steps; ``gap`` is the
    held-out loss distance to it.

    Raises:
        ProtocolError: If a cell executes a different number of steps.
    """
    corpus = corpus if corpus is not None else load_corpus(cfg)
    out = Path(out_dir)
    counts = [len(s) for s in corpus.shards.values()]
    budget = total_steps if total_steps is not None else planned_total_steps(cfg, corpus)
    base = replace(cfg.schedule, step_budget=None)
    schedules: dict[str, CommSchedule] = {}
    for freq in frequencies:
        schedule = replace(base, local_steps=freq)
        schedules[schedule.local_steps] = schedule.with_total_steps(budget, counts)
    per_round = [s.nominal_steps_per_round(counts) for s in schedules.values()]
    if len(set(per_round)) < len(per_round):
        logger.warning(
            "frequencies %s share a round length at this shard size: %s",
            list(schedules),
            per_round,
        )
    expected = budget * len(counts) if base.participation >= 1.0 else None
    write_manifest(out, cfg, None, axis="comm-frequency", total_steps=budget)
    rows: list[dict[str, Any]] = []
    for seed in cfg.seeds:
        central_cfg = replace(
            cfg,
            centralized=True,
            schedule=replace(base, local_steps="1bt", total_rounds=budget, step_budget=budget),
        )
        central = _cell(central_cfg, seed, out / "centralized" / f"seed-{seed}", corpus, "centralized")
        central_loss = central.summary["ctc_loss"]
        for freq, schedule in schedules.items():
            cell_cfg = replace(cfg, schedule=schedule, centralized=False)
            run = _cell(cell_cfg, seed, out / f"freq-{freq}" / f"seed-{seed}", corpus, freq)
            executed = run.summary["total_steps"]
            if expected is not None and executed != expected:
                raise ProtocolError(f"{freq}: executed {executed} steps, expected {expected}")
            rows.append(
                {
                    "seed": seed,
                    "local_steps": freq,
                    "rounds": schedule.total_rounds,
                    "steps_per_round": schedule.nominal_steps_per_round(counts),
                    "planned_steps": budget * len(counts),
                    "executed_steps": executed,
                    "wer": run.summary["wer"],
                    "ctc_loss": run.summary["ctc_loss"],
                    "centralized_loss": central_loss,
                    "gap": abs(run.summary["ctc_loss"] - central_loss),
                    "comm_params": run.summary["comm_params"],
                    "wall_seconds": run.summary["wall_seconds"],
                }
            )
    mean_gap = {
        f: float(np.mean([r["gap"] for r in rows if r["local_steps"] == f]))
        for f in dict.fromkeys(r["local_steps"] for r in rows)
    }
    result = SweepResult("comm-frequency", rows, sorted(mean_gap, key=mean_gap.__getitem__))
    _write_sweep(out, result)
    return result


def sweep_reg_method(
    cfg: ExperimentConfig,
    out_dir: PathLike,
    systems: Iterable[int] = tuple(SYSTEM_DESCRIPTIONS),
    baseline: int = 1,
    corpus: Optional[Corpus] = None,
) -> SweepResult:
    """Every listed system on one corpus; each is tested against ``baseline``."""
    corpus = corpus if corpus is not None else load_corpus(cfg)
    out = Path(out_dir)
    systems = list(systems)
    write_manifest(out, cfg, None, axis="reg-method", systems=systems)
    dirs: dict[int, Path] = {}
    rows: list[dict[str, Any]] = []
    for system in systems:
        sys_cfg = cfg.for_system(system)
        dirs[system] = out / f"system-{system:02d}"
        runs = [
            _cell(sys_cfg, seed, dirs[system] / f"seed-{seed}", corpus, f"system {system}")
            for seed in cfg.seeds
        ]
        row: dict[str, Any] = {
            "system": system,
            "description": SYSTEM_DESCRIPTIONS[system],
            "wer": float(np.mean([r.summary["wer"] for r in runs])),
            "ctc_loss": float(np.mean([r.summary["ctc_loss"] for r in runs])),
            "comm_embed_scalars": runs[0].summary["comm_embed_scalars"],
        }
        for final_row in runs[0].result.final.rows:
            key = f"wer_{final_row.split}_{final_row.group}"
            row[key] = float(
                np.mean([r.result.final.row(final_row.split, final_row.group).wer for r in runs])
            )
        rows.append(row)
    if baseline in dirs:
        base_segments = read_segments(dirs[baseline])
        for row in rows:
            if row["system"] == baseline:
                continue
            cmp = compare_segments(base_segments, read_segments(dirs[row["system"]]))
            row.update(
                z=cmp.test.z,
                p_value=cmp.test.p_value,
                significant=cmp.test.significant,
                degenerate=cmp.test.degenerate,
            )
    ranked = sorted(rows, key=lambda r: r["wer"])
    result = SweepResult("reg-method", rows, [r["system"] for r in ranked])
    _write_sweep(out, result)
    return result


def sweep_tap_position(
    cfg: ExperimentConfig,
    out_dir: PathLike,
    method: str = "loss",
    corpus: Optional[Corpus] = None,
) -> SweepResult:
    """Single-tap embedding or loss regularization at each tap; reports the two best taps."""
    if method not in ("loss", "embed"):
        raise ConfigurationError(f"tap sweep method must be 'loss' or 'embed', got {method!r}")
    corpus = corpus if corpus is not None else load_corpus(cfg)
    out = Path(out_dir)
    write_manifest(out, cfg, None, axis="tap-position", method=method)
    rows: list[dict[str, Any]] = []
    for tap in cfg.model.tap_positions:
        if method == "loss":
            reg = RegConfig(enable_loss=True, loss_taps=(tap,), lambda_loss=cfg.reg.lambda_loss)
        else:
            reg = RegConfig(enable_embed=True, embed_taps=(tap,), lambda_embed=cfg.reg.lambda_embed)
        tap_cfg = replace(cfg, reg=reg, system=None, centralized=False)
        runs = [
            _cell(tap_cfg, seed, out / f"tap-{tap}" / f"seed-{seed}", corpus, f"tap {tap}")
            for seed in cfg.seeds
        ]
        rows.append(
            {
                "tap": tap,
                "method": method,
                "wer": float(np.mean([r.summary["wer"] for r in runs])),
                "ctc_loss": float(np.mean([r.summary["ctc_loss"] for r in runs])),
            }
        )
    ranked = sorted(rows, key=lambda r: (r["wer"], r["ctc_loss"], r["tap"]))
    result = SweepResult("tap-position", rows, [r["tap"] for r in ranked[:2]])
    _write_sweep(out, result)
    logger.info("best taps for %s regularization: %s", method, result.best)
    return result
