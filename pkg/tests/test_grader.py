import random

import pytest

from conftest import make_synthetic_corpus, replay_backend
from stusim.analysis import ParseError, parse_ast
from stusim.corpus import Assignment
from stusim.grader import (
    BackendUnavailable,
    CaseResult,
    ExecLimits,
    ExecReport,
    GradeOutcome,
    GraderError,
    MockBackend,
    TestCase,
    TestSuite,
    classify_report,
    exec_report_for_score,
    grade,
    is_compiling,
    load_suites,
    mock_backend,
    program_key,
    render_feedback,
)

ASSIGNMENT = Assignment("a1", "desc", test_suite_ref="suite-a1")


def report(results, **kw):
    return ExecReport(per_case=[CaseResult(*r) for r in results], **kw)


class TestRenderFeedback:
    def test_all_pass_single_line(self):
        rep = report([("c1", True, "1", "1"), ("c2", True, "2", "2")])
        assert render_feedback(rep) == "Tests passed: 2/2"

    def test_zero_passed_lines_in_suite_order(self):
        rep = report(
            [("c1", False, "4", "2"), ("c2", False, "9", "3"), ("c3", False, "4", "2")]
        )
        expected = (
            "Tests passed: 0/3\n"
            "FAIL c1: expected 2, got 4\n"
            "FAIL c2: expected 3, got 9\n"
            "FAIL c3: expected 2, got 4"
        )
        assert render_feedback(rep) == expected

    def test_error_trace_single_runtime_line(self):
        rep = ExecReport(error_trace="NameError: name 'x' is not defined\n  File ...")
        assert render_feedback(rep) == "Runtime error: NameError: name 'x' is not defined"

    def test_timeout_line(self):
        rep = ExecReport(timed_out=True, wall_time_s=2.5)
        assert render_feedback(rep) == "Execution timed out after 2.5s"

    def test_pure_function(self):
        rep = report([("c1", False, "4", "2"), ("c2", True, "3", "3")])
        assert render_feedback(rep) == render_feedback(rep)


class TestClassify:
    def test_all_pass(self):
        assert classify_report(report([("c1", True, "1", "1")])) == "all_pass"

    def test_partial_with_value_failures(self):
        rep = report([("c1", True, "1", "1"), ("c2", False, "9", "3")])
        assert classify_report(rep) == "partial"

    def test_every_case_crashing_is_runtime_error(self):
        rep = report(
            [("c1", False, "NameError: x", "1", True), ("c2", False, "NameError: x", "2", True)]
        )
        assert classify_report(rep) == "runtime_error"
        assert render_feedback(rep) == "Runtime error: NameError: x"

    def test_mixed_crash_and_pass_is_partial(self):
        rep = report([("c1", True, "1", "1"), ("c2", False, "NameError: x", "2", True)])
        assert classify_report(rep) == "partial"


class TestGrade:
    def test_all_pass_scores_one(self):
        backend = MockBackend.from_programs({"x = 1": exec_report_for_score(1.0, 8)})
        out = grade(ASSIGNMENT, "x = 1", backend)
        assert out.score == 1.0 and out.status == "all_pass"
        assert out.feedback == "Tests passed: 8/8"

    def test_unknown_program_uses_default(self):
        backend = MockBackend(default=exec_report_for_score(0.0, 4))
        out = grade(ASSIGNMENT, "y = 2", backend)
        assert out.score == 0.0 and out.status == "partial"

    def test_unknown_program_without_default_is_retriable(self):
        backend = MockBackend()
        with pytest.raises(BackendUnavailable):
            grade(ASSIGNMENT, "y = 2", backend)

    def test_noncompiling_short_circuits(self):
        backend = MockBackend()  # would raise if consulted
        out = grade(ASSIGNMENT, "def f(:", backend)
        assert out.status == "noncompiling" and out.score == 0.0
        assert out.feedback.startswith("Syntax error:")

    def test_partial_score_fraction(self):
        backend = MockBackend.from_programs({"x = 1": exec_report_for_score(0.125, 8)})
        out = grade(ASSIGNMENT, "x = 1", backend)
        assert out.score == 0.125
        assert out.feedback.splitlines()[0] == "Tests passed: 1/8"

    def test_deterministic(self):
        backend = MockBackend.from_programs({"x = 1": exec_report_for_score(0.5, 8)})
        a = grade(ASSIGNMENT, "x = 1", backend)
        b = grade(ASSIGNMENT, "x = 1", backend)
        assert a == b

    def test_mock_backend_factory(self):
        oracle = {program_key("p"): exec_report_for_score(1.0, 2)}
        out = grade(ASSIGNMENT, "p", mock_backend(oracle))
        assert out.score == 1.0


class TestReplayIdentity:
    def test_logged_scores_reproduced_bit_exactly(self):
        corpus = make_synthetic_corpus(n_traj=10, seed=3)
        backend = replay_backend(corpus)
        for traj in corpus.trajectories:
            assignment = corpus.assignment_for(traj)
            for sub in traj.entries:
                assert grade(assignment, sub.code, backend).score == sub.logged_score


class TestIsCompiling:
    def test_trivial(self):
        assert is_compiling("x = 1")
        assert not is_compiling("def f(:")

    def test_agrees_with_parser_on_random_programs(self):
        rng = random.Random(17)
        snippets = []
        for _ in range(1000):
            code = f"v{rng.randint(0, 99)} = {rng.randint(0, 99)}"
            if rng.random() < 0.3:
                code += "\nif v0:"  # dangling block
            snippets.append(code)
        for code in snippets:
            assert is_compiling(code) == (not isinstance(parse_ast(code), ParseError))


class TestStructures:
    def test_limits_positive(self):
        with pytest.raises(GraderError):
            ExecLimits(wall_time_s=0)

    def test_suite_nonempty(self):
        with pytest.raises(GraderError):
            TestSuite("s", [])

    def test_outcome_invariants(self):
        with pytest.raises(GraderError):
            GradeOutcome(1.0, "fine", "partial")
        with pytest.raises(GraderError):
            GradeOutcome(0.5, "", "partial")

    def test_exec_report_for_score_requires_expressible(self):
        with pytest.raises(GraderError):
            exec_report_for_score(0.3, 8)

    def test_report_wire_roundtrip(self):
        rep = report([("c1", True, "1", "1"), ("c2", False, "err", "2", True)])
        wire = {
            "per_case": [
                {"case_id": c.case_id, "passed": c.passed, "observed": c.observed,
                 "expected": c.expected, "error": c.error}
                for c in rep.per_case
            ],
            "error_trace": None,
            "timed_out": False,
        }
        assert ExecReport.from_wire(wire) == rep

    def test_load_suites(self, tmp_path):
        path = tmp_path / "suites.jsonl"
        path.write_text(
            '{"suite_id": "s1", "cases": [{"case_id": "c1", "function": "f", '
            '"args": [[1, 2, 3]], "expected": "2.0"}]}\n',
            encoding="utf-8",
        )
        suites = load_suites(path)
        assert suites["s1"].cases[0] == TestCase("c1", "2.0", function="f", args=[[1, 2, 3]])
