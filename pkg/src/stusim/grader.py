"""Deterministic grading: numeric score plus textual feedback for a submission,
over a pluggable execution backend (in-memory mock or sandboxed subprocess).
"""

from __future__ import annotations

import hashlib
import json
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from .analysis import ParseError, parse_ast
from .corpus import Assignment


class GraderError(Exception):
    pass


class BackendUnavailable(GraderError):
    """Retriable transport/backend fault, distinct from any grading outcome."""


@dataclass(frozen=True)
class ExecLimits:
    wall_time_s: float = 10.0
    memory_mb: int = 512
    stdout_cap_bytes: int = 65536

    def __post_init__(self) -> None:
        if self.wall_time_s <= 0 or self.memory_mb <= 0 or self.stdout_cap_bytes <= 0:
            raise GraderError("execution limits must be positive")


@dataclass(frozen=True)
class TestCase:
    __test__ = False  # not a pytest class

    case_id: str
    expected: str
    function: str | None = None
    args: list | None = None
    stdin: str | None = None
    float_tol: float | None = None

    def to_wire(self) -> dict:
        wire: dict = {"case_id": self.case_id, "expected": self.expected}
        if self.function is not None:
            wire["function"] = self.function
            wire["args"] = self.args or []
        if self.stdin is not None:
            wire["stdin"] = self.stdin
        if self.float_tol is not None:
            wire["float_tol"] = self.float_tol
        return wire


@dataclass
class TestSuite:
    __test__ = False  # not a pytest class

    suite_id: str
    cases: list[TestCase]

    def __post_init__(self) -> None:
        if not self.cases:
            raise GraderError(f"suite {self.suite_id} has no cases")


@dataclass(frozen=True)
class CaseResult:
    case_id: str
    passed: bool
    observed: str
    expected: str
    error: bool = False  # the case raised instead of returning a wrong value


@dataclass
class ExecReport:
    per_case: list[CaseResult] = field(default_factory=list)
    error_trace: str | None = None
    timed_out: bool = False
    wall_time_s: float | None = None

    @classmethod
    def from_wire(cls, obj: dict) -> "ExecReport":
        return cls(
            per_case=[
                CaseResult(
                    case_id=c["case_id"],
                    passed=bool(c["passed"]),
                    observed=c.get("observed", ""),
                    expected=c.get("expected", ""),
                    error=bool(c.get("error", False)),
                )
                for c in obj.get("per_case", [])
            ],
            error_trace=obj.get("error_trace"),
            timed_out=bool(obj.get("timed_out", False)),
            wall_time_s=obj.get("wall_time_s"),
        )


@dataclass
class GradeOutcome:
    score: float
    feedback: str
    status: str  # all_pass | partial | runtime_error | timeout | noncompiling

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise GraderError(f"score {self.score} outside [0, 1]")
        if not self.feedback:
            raise GraderError("feedback must be non-empty")
        if (self.status == "all_pass") != (self.score == 1.0):
            raise GraderError("status all_pass must coincide with score 1.0")


@dataclass(frozen=True)
class FeedbackTemplate:
    passed_line: str = "Tests passed: {passed}/{total}"
    fail_line: str = "FAIL {case_id}: expected {expected}, got {observed}"
    runtime_error_line: str = "Runtime error: {message}"
    timeout_line: str = "Execution timed out after {wall_time_s}s"


DEFAULT_TEMPLATE = FeedbackTemplate()


def classify_report(report: ExecReport) -> str:
    """Backend report to grading status. A submission whose every case raised
    (none merely wrong) counts as a runtime error, matching autograders that
    abort on crashes."""
    if report.error_trace is not None:
        return "runtime_error"
    if report.timed_out:
        return "timeout"
    passed = sum(1 for c in report.per_case if c.passed)
    if report.per_case and passed == len(report.per_case):
        return "all_pass"
    if passed == 0 and report.per_case and all(c.error for c in report.per_case):
        return "runtime_error"
    return "partial"


def report_score(report: ExecReport) -> float:
    status = classify_report(report)
    if status in ("runtime_error", "timeout"):
        return 0.0
    if not report.per_case:
        return 0.0
    return sum(1 for c in report.per_case if c.passed) / len(report.per_case)


def render_feedback(report: ExecReport, template: FeedbackTemplate = DEFAULT_TEMPLATE) -> str:
    """Pure rendering of a backend report to summative feedback text."""
    status = classify_report(report)
    if status == "runtime_error":
        if report.error_trace is not None:
            message = report.error_trace.strip().splitlines()[0]
        else:
            message = next(c.observed for c in report.per_case if c.error)
        return template.runtime_error_line.format(message=message)
    if status == "timeout":
        return template.timeout_line.format(wall_time_s=report.wall_time_s)
    total = len(report.per_case)
    passed = sum(1 for c in report.per_case if c.passed)
    lines = [template.passed_line.format(passed=passed, total=total)]
    for case in report.per_case:
        if not case.passed:
            lines.append(
                template.fail_line.format(
                    case_id=case.case_id, expected=case.expected, observed=case.observed
                )
            )
    return "\n".join(lines)


def is_compiling(program: str) -> bool:
    """Shared parse check: true iff the program parses as Python."""
    return not isinstance(parse_ast(program), ParseError)


class ExecutionBackend(Protocol):
    def run(self, program: str, suite_ref: str | None, limits: ExecLimits) -> ExecReport: ...


def grade(
    assignment: Assignment,
    program: str,
    backend: ExecutionBackend,
    limits: ExecLimits = ExecLimits(),
    template: FeedbackTemplate = DEFAULT_TEMPLATE,
) -> GradeOutcome:
    """Score = passed/total cases; feedback rendered from the backend report.
    Deterministic for deterministic programs."""
    parsed = parse_ast(program)
    if isinstance(parsed, ParseError):
        feedback = f"Syntax error: {parsed.message} (line {parsed.line})"
        return GradeOutcome(0.0, feedback, "noncompiling")
    report = backend.run(program, assignment.test_suite_ref, limits)
    return GradeOutcome(
        score=report_score(report),
        feedback=render_feedback(report, template),
        status=classify_report(report),
    )


def program_key(program: str) -> str:
    return hashlib.sha256(program.encode("utf-8")).hexdigest()


class MockBackend:
    """Replays canned reports keyed by program hash; performs no execution."""

    def __init__(
        self,
        oracle: dict[str, ExecReport] | None = None,
        default: ExecReport | None = None,
    ):
        self._oracle = dict(oracle or {})
        self._default = default

    @classmethod
    def from_programs(
        cls, reports: dict[str, ExecReport], default: ExecReport | None = None
    ) -> "MockBackend":
        return cls({program_key(code): rep for code, rep in reports.items()}, default)

    def add(self, program: str, report: ExecReport) -> None:
        self._oracle[program_key(program)] = report

    def run(self, program: str, suite_ref: str | None, limits: ExecLimits) -> ExecReport:
        report = self._oracle.get(program_key(program), self._default)
        if report is None:
            raise BackendUnavailable(f"no canned report for program {program_key(program)[:12]}")
        return report


def mock_backend(
    oracle: dict[str, ExecReport], default: ExecReport | None = None
) -> MockBackend:
    """Backend over a program-hash -> report oracle; unknown programs get the
    configurable default report."""
    return MockBackend(oracle, default)


def exec_report_for_score(score: float, n_cases: int = 8) -> ExecReport:
    """Canned all-value report whose pass fraction equals `score` exactly.
    Requires score * n_cases to be integral."""
    passed = score * n_cases
    if abs(passed - round(passed)) > 1e-9:
        raise GraderError(f"score {score} not expressible over {n_cases} cases")
    passed = round(passed)
    cases = [
        CaseResult(f"case{i + 1}", i < passed, "ok" if i < passed else "wrong", "ok")
        for i in range(n_cases)
    ]
    return ExecReport(per_case=cases)


def _posix_rlimits(limits: ExecLimits):
    def apply():
        import resource

        mem = limits.memory_mb * 1024 * 1024
        try:
            resource.setrlimit(resource.RLIMIT_AS, (mem, mem))
        except (ValueError, OSError):
            pass

    return apply


class SubprocessBackend:
    """Spawns the runner harness per submission: request JSON on stdin, one
    report line on stdout. Wall-clock kill and memory caps are enforced here;
    the harness itself stays unprivileged."""

    def __init__(self, runner_cmd: list[str], suites: dict[str, TestSuite]):
        if not runner_cmd:
            raise GraderError("runner command must be non-empty")
        self.runner_cmd = list(runner_cmd)
        self.suites = dict(suites)

    def run(self, program: str, suite_ref: str | None, limits: ExecLimits) -> ExecReport:
        if suite_ref not in self.suites:
            raise GraderError(f"unresolvable test suite {suite_ref!r}")
        suite = self.suites[suite_ref]
        request = {
            "program": program,
            "cases": [case.to_wire() for case in suite.cases],
            "per_case_timeout_s": limits.wall_time_s,
            "stdout_cap_bytes": limits.stdout_cap_bytes,
        }
        try:
            proc = subprocess.Popen(
                self.runner_cmd,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
                preexec_fn=_posix_rlimits(limits),
            )
        except OSError as exc:
            raise BackendUnavailable(f"cannot launch runner: {exc}") from exc
        try:
            out, err = proc.communicate(json.dumps(request), timeout=limits.wall_time_s)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.communicate()
            return ExecReport(timed_out=True, wall_time_s=limits.wall_time_s)
        if proc.returncode != 0:
            trace = (err or "").strip() or f"runner exited with code {proc.returncode}"
            return ExecReport(error_trace=trace.splitlines()[-1])
        line = out.strip().splitlines()[-1] if out.strip() else ""
        try:
            return ExecReport.from_wire(json.loads(line))
        except (json.JSONDecodeError, KeyError, TypeError):
            trace = (err or "").strip() or "runner emitted malformed report"
            return ExecReport(error_trace=trace.splitlines()[-1])


def load_suites(path: Path | str) -> dict[str, TestSuite]:
    """Test-suite catalog JSONL: {suite_id, cases: [...]} per line."""
    suites: dict[str, TestSuite] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            cases = [
                TestCase(
                    case_id=c["case_id"],
                    expected=c["expected"],
                    function=c.get("function"),
                    args=c.get("args"),
                    stdin=c.get("stdin"),
                    float_tol=c.get("float_tol"),
                )
                for c in obj["cases"]
            ]
            suites[obj["suite_id"]] = TestSuite(obj["suite_id"], cases)
    return suites
