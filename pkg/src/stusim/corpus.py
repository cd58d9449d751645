"""Trajectory corpora: ingest raw submission logs, apply the trajectory
filters, split by semester, and compute summary statistics.
"""

from __future__ import annotations

import csv
import json
import random
import statistics
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable, Iterable, NamedTuple

REQUIRED_COLUMNS = ("student", "assignment", "timestamp", "code", "score")
OPTIONAL_COLUMNS = ("feedback", "semester")


class CorpusError(ValueError):
    pass


@dataclass
class Submission:
    index: int
    code: str
    timestamp: str
    logged_score: float
    logged_feedback: str | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.logged_score <= 1.0:
            raise CorpusError(f"score {self.logged_score} outside [0, 1]")
        if not self.code.strip():
            raise CorpusError("submission code is empty")


@dataclass
class Trajectory:
    student_id: str
    assignment_id: str
    entries: list[Submission]
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.entries:
            raise CorpusError("trajectory has no submissions")
        for pos, sub in enumerate(self.entries, start=1):
            if sub.index != pos:
                raise CorpusError(f"submission indices must run 1..T, got {sub.index} at {pos}")
        stamps = [s.timestamp for s in self.entries]
        if any(a > b for a, b in zip(stamps, stamps[1:])):
            raise CorpusError("submissions not sorted by timestamp")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def final_score(self) -> float:
        return self.entries[-1].logged_score

    def scores(self) -> list[float]:
        return [s.logged_score for s in self.entries]


@dataclass
class Assignment:
    assignment_id: str
    description: str
    reference_solution: str | None = None
    test_suite_ref: str | None = None
    extra_context: str | None = None

    def __post_init__(self) -> None:
        if not self.description:
            raise CorpusError(f"assignment {self.assignment_id} has empty description")


@dataclass
class Corpus:
    assignments: dict[str, Assignment]
    trajectories: list[Trajectory]
    split_label: str = "unsplit"

    def __post_init__(self) -> None:
        for traj in self.trajectories:
            if traj.assignment_id not in self.assignments:
                raise CorpusError(f"unknown assignment {traj.assignment_id!r}")

    def assignment_for(self, traj: Trajectory) -> Assignment:
        return self.assignments[traj.assignment_id]


@dataclass
class FilterRules:
    require_one_pass: bool = True
    drop_noncompiling_submissions: bool = True
    keep_runtime_errors: bool = True


@dataclass(frozen=True)
class Rejected:
    reason: str  # no_pass | empty_after_filter


@dataclass
class StatsTable:
    n_traj: int
    n_students: int
    n_success: int
    n_fail: int
    n_assignments: int
    avg_len: float
    avg_final_grade: float
    median_final_grade: float

    COLUMNS = ("#Traj", "#Stud", "#Succ", "#Fail", "#Asg", "Avg.Len", "Avg.G", "Med.G")

    def row(self) -> list:
        return [
            self.n_traj,
            self.n_students,
            self.n_success,
            self.n_fail,
            self.n_assignments,
            self.avg_len,
            self.avg_final_grade,
            self.median_final_grade,
        ]


class RowError(NamedTuple):
    row: int
    reason: str


class IngestResult(NamedTuple):
    corpus: Corpus
    errors: list[RowError]


def _parse_timestamp(value: str) -> datetime:
    return datetime.fromisoformat(value)


def _iter_rows(path: Path, format: str):
    if format == "jsonl":
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                yield lineno, line
    elif format == "csv":
        with open(path, encoding="utf-8", newline="") as fh:
            for lineno, row in enumerate(csv.DictReader(fh), start=2):
                yield lineno, row
    else:
        raise CorpusError(f"unknown format {format!r}")


def ingest_logs(
    path: Path | str,
    format: str = "jsonl",
    column_map: dict[str, str] | None = None,
    assignments: dict[str, Assignment] | None = None,
) -> IngestResult:
    """Group raw per-submission rows into one trajectory per (student,
    assignment). Malformed rows are collected, not fatal; an unreadable file is.

    `column_map` maps the canonical names (student, assignment, timestamp,
    code, score, feedback, semester) to the source column names. Assignments
    missing from the catalog get stub descriptions.
    """
    path = Path(path)
    colmap = {name: name for name in REQUIRED_COLUMNS + OPTIONAL_COLUMNS}
    colmap.update(column_map or {})
    errors: list[RowError] = []
    groups: dict[tuple[str, str], list[dict]] = {}

    for lineno, raw in _iter_rows(path, format):
        if isinstance(raw, str):
            try:
                raw = json.loads(raw)
            except json.JSONDecodeError as exc:
                errors.append(RowError(lineno, f"bad json: {exc.msg}"))
                continue
        try:
            row = {
                "student": str(raw[colmap["student"]]),
                "assignment": str(raw[colmap["assignment"]]),
                "timestamp": str(raw[colmap["timestamp"]]),
                "code": str(raw[colmap["code"]]),
                "score": float(raw[colmap["score"]]),
            }
        except (KeyError, TypeError, ValueError) as exc:
            errors.append(RowError(lineno, f"missing or malformed column: {exc}"))
            continue
        try:
            _parse_timestamp(row["timestamp"])
        except ValueError:
            errors.append(RowError(lineno, f"bad timestamp {row['timestamp']!r}"))
            continue
        if not row["code"].strip():
            errors.append(RowError(lineno, "empty code"))
            continue
        if not 0.0 <= row["score"] <= 1.0:
            errors.append(RowError(lineno, f"score {row['score']} outside [0, 1]"))
            continue
        feedback = raw.get(colmap["feedback"])
        row["feedback"] = str(feedback) if feedback not in (None, "") else None
        semester = raw.get(colmap["semester"])
        row["semester"] = str(semester) if semester not in (None, "") else None
        groups.setdefault((row["student"], row["assignment"]), []).append(row)

    catalog = dict(assignments or {})
    trajectories = []
    for (student, assignment_id), rows in groups.items():
        rows.sort(key=lambda r: _parse_timestamp(r["timestamp"]))
        entries = [
            Submission(
                index=i,
                code=r["code"],
                timestamp=r["timestamp"],
                logged_score=r["score"],
                logged_feedback=r["feedback"],
            )
            for i, r in enumerate(rows, start=1)
        ]
        meta = {}
        semesters = {r["semester"] for r in rows if r["semester"]}
        if semesters:
            meta["semester"] = sorted(semesters)[0]
        trajectories.append(Trajectory(student, assignment_id, entries, meta))
        if assignment_id not in catalog:
            catalog[assignment_id] = Assignment(assignment_id, description=assignment_id)

    return IngestResult(Corpus(catalog, trajectories), errors)


def filter_trajectory(
    traj: Trajectory,
    rules: FilterRules,
    compile_check: Callable[[str], bool],
    runtime_error_prefix: str = "Runtime error",
) -> Trajectory | Rejected:
    """Apply the trajectory filters; survivors are re-indexed 1..T'.

    Non-compiling submissions are dropped when configured; trajectories with
    no passing submission are rejected outright. Runtime errors (compiling,
    failing) are kept unless keep_runtime_errors is off, which falls back to
    a feedback-prefix heuristic since logs carry no execution status.
    """
    kept = []
    for sub in traj.entries:
        if rules.drop_noncompiling_submissions and not compile_check(sub.code):
            continue
        if (
            not rules.keep_runtime_errors
            and sub.logged_score == 0.0
            and (sub.logged_feedback or "").startswith(runtime_error_prefix)
        ):
            continue
        kept.append(sub)
    if not kept:
        return Rejected("empty_after_filter")
    # checked over survivors so filtering is idempotent
    if rules.require_one_pass and not any(s.logged_score > 0.0 for s in kept):
        return Rejected("no_pass")
    entries = [
        Submission(i, s.code, s.timestamp, s.logged_score, s.logged_feedback)
        for i, s in enumerate(kept, start=1)
    ]
    return Trajectory(traj.student_id, traj.assignment_id, entries, dict(traj.meta))


def filter_corpus(
    corpus: Corpus, rules: FilterRules, compile_check: Callable[[str], bool]
) -> tuple[Corpus, dict[str, int]]:
    """Filter every trajectory; returns the surviving corpus and rejection
    counts by reason."""
    kept = []
    rejected: dict[str, int] = {}
    for traj in corpus.trajectories:
        result = filter_trajectory(traj, rules, compile_check)
        if isinstance(result, Rejected):
            rejected[result.reason] = rejected.get(result.reason, 0) + 1
        else:
            kept.append(result)
    return Corpus(dict(corpus.assignments), kept, corpus.split_label), rejected


class SplitSummary(NamedTuple):
    n_train: int
    n_test: int
    student_overlap: int


class SplitResult(NamedTuple):
    train: Corpus
    test: Corpus
    summary: SplitSummary


def split_corpus(
    corpus: Corpus,
    policy: dict[str, str],
    sample: tuple[int, int] | None = None,
) -> SplitResult:
    """Partition by each trajectory's semester tag under `policy` (tag ->
    train|test). `sample` = (count, seed) draws a uniform random test subset."""
    train, test = [], []
    for traj in corpus.trajectories:
        tag = traj.meta.get("semester")
        if tag is None:
            raise CorpusError(
                f"trajectory {traj.student_id}/{traj.assignment_id} has no semester tag"
            )
        side = policy.get(tag)
        if side == "train":
            train.append(traj)
        elif side == "test":
            test.append(traj)
        else:
            raise CorpusError(f"unknown semester tag {tag!r}")
    if sample is not None:
        count, seed = sample
        if count < len(test):
            picked = set(random.Random(seed).sample(range(len(test)), count))
            test = [t for i, t in enumerate(test) if i in picked]
    overlap = {t.student_id for t in train} & {t.student_id for t in test}
    return SplitResult(
        Corpus(dict(corpus.assignments), train, "train"),
        Corpus(dict(corpus.assignments), test, "test"),
        SplitSummary(len(train), len(test), len(overlap)),
    )


def corpus_stats(corpus: Corpus) -> StatsTable:
    """Summary counts and grade statistics; final grade = last submission's score."""
    if not corpus.trajectories:
        raise CorpusError("corpus is empty")
    finals = [t.final_score for t in corpus.trajectories]
    n_success = sum(1 for g in finals if g == 1.0)
    return StatsTable(
        n_traj=len(corpus.trajectories),
        n_students=len({t.student_id for t in corpus.trajectories}),
        n_success=n_success,
        n_fail=len(finals) - n_success,
        n_assignments=len({t.assignment_id for t in corpus.trajectories}),
        avg_len=statistics.fmean(len(t) for t in corpus.trajectories),
        avg_final_grade=statistics.fmean(finals),
        median_final_grade=statistics.median(finals),
    )


def load_assignments(path: Path | str) -> dict[str, Assignment]:
    """Assignment catalog JSONL: one object per assignment."""
    catalog: dict[str, Assignment] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            catalog[obj["assignment_id"]] = Assignment(
                assignment_id=obj["assignment_id"],
                description=obj["description"],
                reference_solution=obj.get("reference_solution"),
                test_suite_ref=obj.get("test_suite_ref"),
                extra_context=obj.get("extra_context"),
            )
    return catalog


def save_corpus(corpus: Corpus, path: Path | str) -> None:
    """Canonical corpus JSONL: one object per trajectory with nested entries."""
    with open(path, "w", encoding="utf-8") as fh:
        for traj in corpus.trajectories:
            record = {
                "student_id": traj.student_id,
                "assignment_id": traj.assignment_id,
                "semester": traj.meta.get("semester"),
                "entries": [
                    {
                        "index": s.index,
                        "timestamp": s.timestamp,
                        "code": s.code,
                        "logged_score": s.logged_score,
                        **(
                            {"logged_feedback": s.logged_feedback}
                            if s.logged_feedback is not None
                            else {}
                        ),
                    }
                    for s in traj.entries
                ],
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_corpus(
    path: Path | str,
    assignments: dict[str, Assignment] | None = None,
    split_label: str = "unsplit",
) -> Corpus:
    trajectories = []
    catalog = dict(assignments or {})
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            entries = [
                Submission(
                    index=e["index"],
                    code=e["code"],
                    timestamp=e["timestamp"],
                    logged_score=e["logged_score"],
                    logged_feedback=e.get("logged_feedback"),
                )
                for e in obj["entries"]
            ]
            meta = {"semester": obj["semester"]} if obj.get("semester") else {}
            trajectories.append(
                Trajectory(obj["student_id"], obj["assignment_id"], entries, meta)
            )
            if obj["assignment_id"] not in catalog:
                catalog[obj["assignment_id"]] = Assignment(
                    obj["assignment_id"], description=obj["assignment_id"]
                )
    return Corpus(catalog, trajectories, split_label)
