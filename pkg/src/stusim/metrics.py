"""Simulation-fidelity metrics over rollout records: per-step and averaged
coverage / grade proximity / CodeBLEU, degradation deltas, and grade
progression curves, emitted as JSON / CSV / markdown reports.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

from .analysis import DEFAULT_WEIGHTS, codebleu
from .corpus import Corpus
from .rollout import HORIZON, RolloutRecord

log = logging.getLogger(__name__)

TABLE2_LEGEND = "Legend: Cov (Coverage), GP (Grade Proximity), CB (CodeBLEU)."


class MatchedPair(NamedTuple):
    record_key: tuple
    k: int
    generated_code: str
    generated_score: float
    ground_truth_code: str
    ground_truth_score: float


def matched_pairs(records: Iterable[RolloutRecord], k: int) -> list[MatchedPair]:
    """Steps at depth k where the model generated and ground truth exists."""
    pairs = []
    for record in records:
        for step in record.steps:
            if step.k == k and step.ground_truth_code is not None:
                pairs.append(
                    MatchedPair(
                        record.key(),
                        k,
                        step.generated_code,
                        step.outcome.score,
                        step.ground_truth_code,
                        step.ground_truth_score,
                    )
                )
    return pairs


def coverage(records: Iterable[RolloutRecord], k: int) -> float | None:
    """Fraction of records holding ground truth at step k that also hold a
    model prediction there; None when no record is eligible."""
    eligible = covered = 0
    for record in records:
        if record.start_t + k - 1 <= record.traj_len:
            eligible += 1
            if any(step.k == k for step in record.steps):
                covered += 1
    if eligible == 0:
        return None
    return covered / eligible


def grade_proximity(pred: float, truth: float) -> float:
    """1 - |pred - truth| over grades in [0, 1]."""
    return 1.0 - abs(pred - truth)


@dataclass
class StepMetrics:
    coverage: float | None
    grade_proximity: float | None
    codebleu: float | None
    n_pairs: int
    n_eligible: int
    n_covered: int

    def as_dict(self) -> dict:
        return self.__dict__.copy()


@dataclass
class MetricsReport:
    per_step: dict[int, StepMetrics]
    averages: dict[str, float | None]
    degradation: dict[str, float | None]
    degradation_complete: bool
    horizon: int = HORIZON
    weighting: str = "micro"

    def as_dict(self) -> dict:
        return {
            "per_step": {str(k): v.as_dict() for k, v in self.per_step.items()},
            "averages": self.averages,
            "degradation": self.degradation,
            "degradation_complete": self.degradation_complete,
            "horizon": self.horizon,
            "weighting": self.weighting,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MetricsReport":
        return cls(
            per_step={int(k): StepMetrics(**v) for k, v in obj["per_step"].items()},
            averages=obj["averages"],
            degradation=obj["degradation"],
            degradation_complete=obj["degradation_complete"],
            horizon=obj["horizon"],
            weighting=obj["weighting"],
        )


def degradation(per_step_means: list[float | None], K: int = HORIZON) -> float | None:
    """Mean drop of steps 2..K relative to step 1; more negative means faster
    degradation. Missing step means are skipped with a warning."""
    if K < 2 or not per_step_means:
        raise ValueError("need at least two step means")
    means = list(per_step_means)[:K]
    m1 = means[0]
    if m1 is None:
        return None
    later = [m for m in means[1:] if m is not None]
    if not later:
        return None
    if len(later) < K - 1:
        log.warning("degradation computed over %d of %d later steps", len(later), K - 1)
    return math.fsum(later) / len(later) - m1


def _mean(values: list[float]) -> float | None:
    return math.fsum(values) / len(values) if values else None


def aggregate(
    records: list[RolloutRecord],
    weights: tuple[float, float, float, float] = DEFAULT_WEIGHTS,
    horizon: int = HORIZON,
    macro: bool = False,
) -> MetricsReport:
    """Per-step means over matched pairs (quality) and eligible records
    (coverage), plus overall averages and degradation deltas.

    Micro averaging weights each prediction equally; the macro flag averages
    the per-step means instead.
    """
    per_step: dict[int, StepMetrics] = {}
    cov_means: list[float | None] = []
    gp_means: list[float | None] = []
    cb_means: list[float | None] = []
    all_gp: list[float] = []
    all_cb: list[float] = []
    total_eligible = total_covered = 0
    for k in range(1, horizon + 1):
        eligible = sum(1 for r in records if r.start_t + k - 1 <= r.traj_len)
        covered = sum(
            1
            for r in records
            if r.start_t + k - 1 <= r.traj_len and any(s.k == k for s in r.steps)
        )
        pairs = matched_pairs(records, k)
        gps = [grade_proximity(p.generated_score, p.ground_truth_score) for p in pairs]
        cbs = [codebleu(p.generated_code, p.ground_truth_code, weights).total for p in pairs]
        cov = covered / eligible if eligible else None
        per_step[k] = StepMetrics(cov, _mean(gps), _mean(cbs), len(pairs), eligible, covered)
        cov_means.append(cov)
        gp_means.append(_mean(gps))
        cb_means.append(_mean(cbs))
        all_gp.extend(gps)
        all_cb.extend(cbs)
        total_eligible += eligible
        total_covered += covered

    if macro:
        averages = {
            "coverage": _mean([c for c in cov_means if c is not None]),
            "grade_proximity": _mean([g for g in gp_means if g is not None]),
            "codebleu": _mean([c for c in cb_means if c is not None]),
        }
    else:
        averages = {
            "coverage": total_covered / total_eligible if total_eligible else None,
            "grade_proximity": _mean(all_gp),
            "codebleu": _mean(all_cb),
        }
    deltas = {
        "coverage": degradation(cov_means, horizon),
        "grade_proximity": degradation(gp_means, horizon),
        "codebleu": degradation(cb_means, horizon),
    }
    complete = all(m is not None for series in (cov_means, gp_means, cb_means) for m in series)
    return MetricsReport(
        per_step=per_step,
        averages=averages,
        degradation=deltas,
        degradation_complete=complete,
        horizon=horizon,
        weighting="macro" if macro else "micro",
    )


@dataclass
class ProgressionBin:
    position: float
    mean_score: float
    ci95: float
    n: int

    def as_dict(self) -> dict:
        return self.__dict__.copy()


@dataclass
class ProgressionCurve:
    bins: list[ProgressionBin] = field(default_factory=list)

    def total_points(self) -> int:
        return sum(b.n for b in self.bins)

    def as_dict(self) -> dict:
        return {"bins": [b.as_dict() for b in self.bins]}


def _progression_points(source: Corpus | list[RolloutRecord]) -> list[tuple[float, float]]:
    points = []
    if isinstance(source, Corpus):
        for traj in source.trajectories:
            T = len(traj)
            for sub in traj.entries:
                pos = 0.0 if T == 1 else (sub.index - 1) / (T - 1)
                points.append((pos, sub.logged_score))
    else:
        for record in source:
            T = record.traj_len
            for step in record.steps:
                index = record.start_t + step.k - 1
                pos = 0.0 if T == 1 else (index - 1) / (T - 1)
                points.append((pos, step.outcome.score))
    return points


def grade_progression(source: Corpus | list[RolloutRecord], n_bins: int = 20) -> ProgressionCurve:
    """Scores binned by normalized trajectory position, with a normal-
    approximation 95% interval per bin. Empty bins are omitted."""
    buckets: dict[int, list[tuple[float, float]]] = {}
    for pos, score in _progression_points(source):
        idx = min(int(pos * n_bins), n_bins - 1)
        buckets.setdefault(idx, []).append((pos, score))
    bins = []
    for idx in sorted(buckets):
        members = buckets[idx]
        scores = [s for _, s in members]
        n = len(scores)
        sd = statistics.stdev(scores) if n > 1 else 0.0
        bins.append(
            ProgressionBin(
                position=math.fsum(p for p, _ in members) / n,
                mean_score=math.fsum(scores) / n,
                ci95=1.96 * sd / math.sqrt(n) if n > 1 else 0.0,
                n=n,
            )
        )
    return ProgressionCurve(bins)


def _fmt(value: float | None, digits: int = 4) -> str:
    return "" if value is None else f"{value:.{digits}f}"


def emit_report(
    report: MetricsReport,
    curves: dict[str, ProgressionCurve] | None,
    formats: Iterable[str],
    out_dir: Path | str,
) -> list[Path]:
    """Write the report in the requested formats; deterministic output."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curves = curves or {}
    written = []
    for fmt in formats:
        if fmt == "json":
            path = out_dir / "report.json"
            payload = {
                "schema_version": 1,
                "report": report.as_dict(),
                "curves": {name: c.as_dict() for name, c in curves.items()},
            }
            path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        elif fmt == "csv":
            path = out_dir / "report.csv"
            with open(path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(
                    ["k", "coverage", "grade_proximity", "codebleu", "n_pairs", "n_eligible", "n_covered"]
                )
                for k in sorted(report.per_step):
                    s = report.per_step[k]
                    writer.writerow(
                        [k, _fmt(s.coverage), _fmt(s.grade_proximity), _fmt(s.codebleu),
                         s.n_pairs, s.n_eligible, s.n_covered]
                    )
                writer.writerow(
                    ["avg", _fmt(report.averages["coverage"]),
                     _fmt(report.averages["grade_proximity"]),
                     _fmt(report.averages["codebleu"]), "", "", ""]
                )
        elif fmt == "markdown":
            path = out_dir / "report.md"
            lines = [
                "# Rollout performance metrics",
                "",
                TABLE2_LEGEND,
                "",
                "| Cov | GP | CB | ΔCov | ΔGP | ΔCB |",
                "| --- | --- | --- | --- | --- | --- |",
                "| {} | {} | {} | {} | {} | {} |".format(
                    _fmt(report.averages["coverage"]),
                    _fmt(report.averages["grade_proximity"]),
                    _fmt(report.averages["codebleu"]),
                    _fmt(report.degradation["coverage"]),
                    _fmt(report.degradation["grade_proximity"]),
                    _fmt(report.degradation["codebleu"]),
                ),
                "",
                "| k | Cov | GP | CB | n |",
                "| --- | --- | --- | --- | --- |",
            ]
            for k in sorted(report.per_step):
                s = report.per_step[k]
                lines.append(
                    f"| {k} | {_fmt(s.coverage)} | {_fmt(s.grade_proximity)} "
                    f"| {_fmt(s.codebleu)} | {s.n_pairs} |"
                )
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        written.append(path)
    return written


def load_report(path: Path | str) -> tuple[MetricsReport, dict[str, ProgressionCurve]]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    report = MetricsReport.from_dict(payload["report"])
    curves = {
        name: ProgressionCurve([ProgressionBin(**b) for b in c["bins"]])
        for name, c in payload.get("curves", {}).items()
    }
    return report, curves
