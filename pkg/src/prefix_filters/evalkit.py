"""Evaluation metrics: validity, token cost, trigger attribution, transfer,
and percentile-bootstrap confidence intervals."""
from __future__ import annotations

import csv
import json
import random
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .decoder import DecodeError, DecoderConfig, TrieNode, constrained_sample, fallback_reject_sample
from .filter_engine import FilterSet, first_trigger_prefix
from .generator import Capability, model_calls as _calls
from .oracle import Oracle, OracleCrashed

__all__ = [
    "EmptyEvaluation",
    "EmptyInput",
    "SampleRow",
    "MetricsReport",
    "TransferCell",
    "run_eval",
    "summarize",
    "top_k_share",
    "capture_rate",
    "transfer_matrix",
    "bootstrap_ci",
    "diff_significant",
    "write_report",
    "read_samples_csv",
    "SAMPLE_COLUMNS",
]

SAMPLE_COLUMNS = ("prompt_id", "text", "valid", "error_classes", "tokens_sampled", "model_calls", "trigger_ids")


class EmptyEvaluation(ValueError):
    pass


class EmptyInput(ValueError):
    pass


@dataclass
class SampleRow:
    prompt_id: str
    text: str
    valid: bool | None
    error_classes: tuple[str, ...] = ()
    tokens_sampled: int = 0
    model_calls: int = 0
    trigger_ids: tuple[str, ...] = ()
    error: str | None = None


@dataclass
class MetricsReport:
    n_samples: int
    validity_rate: float
    validity_ci: tuple[float, float]
    tokens_per_sample: float
    model_calls_mean: float
    invalid_counts: dict[str, int]
    trigger_counts: dict[str, int]
    n_failed: int = 0
    n_unjudged: int = 0
    round_label: str = ""
    top3_trigger_share: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["validity_ci"] = list(self.validity_ci)
        return d


@dataclass(frozen=True)
class TransferCell:
    owner: str
    source: str
    capture_rate: float


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------


def _boot_means(x: np.ndarray, resamples: int, rng: np.random.Generator, chunk: int = 2000) -> np.ndarray:
    n = x.size
    out = np.empty(resamples)
    for start in range(0, resamples, chunk):
        stop = min(resamples, start + chunk)
        idx = rng.integers(0, n, size=(stop - start, n))
        out[start:stop] = x[idx].mean(axis=1)
    return out


def bootstrap_ci(
    outcomes: Sequence[float],
    resamples: int = 10_000,
    level: float = 0.95,
    seed: int = 0,
) -> tuple[float, float]:
    """Percentile-method bootstrap interval for the mean."""
    x = np.asarray(outcomes, dtype=float)
    if x.size == 0:
        raise EmptyInput("bootstrap_ci needs at least one outcome")
    if resamples < 1000:
        raise ValueError("use at least 1000 resamples")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    means = _boot_means(x, resamples, np.random.default_rng(seed))
    alpha = 1 - level
    lo, hi = np.quantile(means, [alpha / 2, 1 - alpha / 2])
    return float(lo), float(hi)


def diff_significant(
    outcomes_a: Sequence[float],
    outcomes_b: Sequence[float],
    resamples: int = 10_000,
    level: float = 0.95,
    seed: int = 0,
) -> bool:
    """True if the bootstrap interval of ``mean(b) - mean(a)`` excludes 0.

    The two groups are resampled independently.
    """
    a = np.asarray(outcomes_a, dtype=float)
    b = np.asarray(outcomes_b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise EmptyInput("both groups need outcomes")
    if resamples < 1000:
        raise ValueError("use at least 1000 resamples")
    rng = np.random.default_rng(seed)
    diffs = _boot_means(b, resamples, rng) - _boot_means(a, resamples, rng)
    alpha = 1 - level
    lo, hi = np.quantile(diffs, [alpha / 2, 1 - alpha / 2])
    return bool(lo > 0 or hi < 0)


# ---------------------------------------------------------------------------
# Trigger attribution and transfer
# ---------------------------------------------------------------------------


def top_k_share(trigger_counts: Mapping[str, int] | Iterable[int], k: int = 3) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    counts = list(trigger_counts.values()) if isinstance(trigger_counts, Mapping) else list(trigger_counts)
    total = sum(counts)
    if total == 0:
        return 0.0
    return sum(sorted(counts, reverse=True)[:k]) / total


def captured(filters: FilterSet | Sequence, text: str) -> bool:
    """Whether any per-character prefix of ``text`` triggers any filter."""
    return any(first_trigger_prefix(f, text) is not None for f in filters)


def capture_rate(filters: FilterSet | Sequence, texts: Sequence[str]) -> float:
    if not texts:
        raise EmptyInput("no samples to capture")
    return sum(captured(filters, t) for t in texts) / len(texts)


def transfer_matrix(
    filter_sets: Mapping[str, FilterSet],
    invalid_samples: Mapping[str, Sequence[str]],
) -> list[TransferCell]:
    """Capture rate of each owner's filters on each source's invalid samples.

    Cells are ordered row-major, owners and sources in mapping order.
    """
    for src, texts in invalid_samples.items():
        if not texts:
            raise EmptyInput(f"source {src!r} has no invalid samples")
    return [
        TransferCell(owner, src, capture_rate(fs, texts))
        for owner, fs in filter_sets.items()
        for src, texts in invalid_samples.items()
    ]


# ---------------------------------------------------------------------------
# Running an evaluation
# ---------------------------------------------------------------------------


def run_eval(
    model,
    filters: FilterSet | None,
    prompts: Sequence[str],
    n_per_prompt: int,
    oracle: Oracle | None,
    config: DecoderConfig | None = None,
    prompt_ids: Sequence[str] | None = None,
    round_label: str = "",
    bootstrap_resamples: int = 10_000,
) -> tuple[MetricsReport, list[SampleRow]]:
    """Sample ``n_per_prompt`` outputs per prompt and aggregate metrics.

    An empty filter set means plain unconstrained sampling. Decoder failures
    (Unsatisfiable, AttemptsExhausted) become failed rows counted as invalid.
    With ``oracle=None`` nothing is judged and validity is not reported.
    """
    if n_per_prompt < 1:
        raise EmptyEvaluation("n_per_prompt must be >= 1")
    if not prompts:
        raise EmptyEvaluation("no prompts")
    config = config or DecoderConfig()
    prompt_ids = list(prompt_ids) if prompt_ids is not None else [str(i) for i in range(len(prompts))]
    constrained = filters is not None and len(filters) > 0
    has_dist = bool(getattr(model, "capabilities", Capability(0)) & Capability.DISTRIBUTION)
    rng = random.Random(config.seed)
    rows: list[SampleRow] = []
    for pi, prompt in enumerate(prompts):
        trie = TrieNode()
        for _ in range(n_per_prompt):
            pid = prompt_ids[pi]
            if not constrained:
                cont = model.sample_continuation(prompt, config.max_len, rng.getrandbits(63))
                rows.append(SampleRow(pid, cont.text, None, (), cont.tokens_drawn, _calls(cont)))
                continue
            try:
                if has_dist:
                    out = constrained_sample(model, prompt, filters, trie, config, rng)
                else:
                    out = fallback_reject_sample(model, prompt, filters, config, rng)
            except DecodeError as exc:
                rows.append(SampleRow(pid, "", False, (), 0, 0, (), f"{type(exc).__name__}: {exc}"))
                continue
            rows.append(
                SampleRow(pid, out.text, None, (), out.tokens_sampled, out.model_calls,
                          tuple(fid for fid, _ in out.trigger_events))
            )
    if oracle is not None:
        for row in rows:
            if row.error is not None:
                row.error_classes = ("decode_failed",)
                continue
            try:
                v = oracle.judge(row.text)
            except OracleCrashed as exc:
                row.valid = None
                row.error = f"OracleCrashed: {exc}"
                continue
            row.valid = v.valid
            row.error_classes = v.error_classes
    report = summarize(rows, round_label=round_label, judged=oracle is not None, resamples=bootstrap_resamples,
                       seed=config.seed)
    return report, rows


def summarize(
    rows: Sequence[SampleRow],
    round_label: str = "",
    judged: bool = True,
    resamples: int = 10_000,
    seed: int = 0,
) -> MetricsReport:
    if not rows:
        raise EmptyEvaluation("no samples")
    outcomes = [1.0 if r.valid else 0.0 for r in rows if r.valid is not None]
    if judged and outcomes:
        rate = float(np.mean(outcomes))
        ci = bootstrap_ci(outcomes, resamples, 0.95, seed)
    else:
        rate, ci = float("nan"), (float("nan"), float("nan"))
    invalid = Counter(c for r in rows if r.valid is False for c in r.error_classes)
    triggers = Counter(fid for r in rows for fid in r.trigger_ids)
    return MetricsReport(
        n_samples=len(rows),
        validity_rate=rate,
        validity_ci=ci,
        tokens_per_sample=float(np.mean([r.tokens_sampled for r in rows])),
        model_calls_mean=float(np.mean([r.model_calls for r in rows])),
        invalid_counts=dict(sorted(invalid.items())),
        trigger_counts=dict(sorted(triggers.items())),
        n_failed=sum(1 for r in rows if r.error is not None and r.error_classes == ("decode_failed",)),
        n_unjudged=sum(1 for r in rows if r.valid is None),
        round_label=round_label,
        top3_trigger_share=top_k_share(triggers, 3),
    )


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------


def _fmt_valid(v: bool | None) -> str:
    return "" if v is None else ("1" if v else "0")


def write_report(
    out_dir: str | Path,
    rows: Sequence[SampleRow] | None = None,
    report: MetricsReport | None = None,
    transfer: Sequence[TransferCell] | None = None,
) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if rows is not None:
        with open(out / "samples.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(SAMPLE_COLUMNS)
            for r in rows:
                w.writerow([
                    r.prompt_id, r.text, _fmt_valid(r.valid), ";".join(r.error_classes),
                    r.tokens_sampled, r.model_calls, ";".join(r.trigger_ids),
                ])
    if report is not None:
        (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    if transfer is not None:
        with open(out / "transfer.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("owner", "source", "capture_rate"))
            for c in transfer:
                w.writerow((c.owner, c.source, f"{c.capture_rate:.6f}"))
    return out


def read_samples_csv(path: str | Path) -> list[SampleRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SAMPLE_COLUMNS:
            raise ValueError(f"{path}: expected columns {SAMPLE_COLUMNS}, got {reader.fieldnames}")
        for rec in reader:
            rows.append(SampleRow(
                prompt_id=rec["prompt_id"],
                text=rec["text"],
                valid=None if rec["valid"] == "" else rec["valid"] == "1",
                error_classes=tuple(c for c in rec["error_classes"].split(";") if c),
                tokens_sampled=int(rec["tokens_sampled"]),
                model_calls=int(rec["model_calls"]),
                trigger_ids=tuple(t for t in rec["trigger_ids"].split(";") if t),
            ))
    return rows
