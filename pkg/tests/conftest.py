"""Shared fixtures: the compute_average dialogue programs, synthetic corpora
with 8-case score granularity, and replay/expert mock endpoints and backends.
"""

from __future__ import annotations

import random
from datetime import datetime, timedelta

import pytest

from stusim.corpus import Assignment, Corpus, Submission, Trajectory
from stusim.grader import MockBackend, exec_report_for_score, grade, program_key
from stusim.serializer import Dialogue, extract_code

N_CASES = 8

ASSIGNMENT_DESCRIPTION = (
    'Write a Python function called "compute_average". The function should '
    "take as argument a (non-empty) list of integers and returns the mean "
    "over those elements."
)

# The three submissions of the worked dialogue, as printed there.
STEP1 = """def compute_average(nums):
    total = num[0]
    for i in nums:
        total += i
    return average / len(nums)"""

STEP2 = """def compute_average(nums):
    total = num[0]
    for i in nums:
        total += i
    return total / len(nums)"""

STEP3 = """def compute_average(nums):
    total = 0
    for i in nums:
        total += i
    return total / len(nums)"""

FEEDBACK1 = 'Runtime error: undefined variable "average".'
FEEDBACK2 = "Tests passed: 1/8"
FEEDBACK3 = "Tests passed: 8/8"

# The off-by-init variant actually executable to a 1/8 grade (the printed
# step 2 still references the undefined `num` and crashes at call time).
STEP2_RUNNABLE = """def compute_average(nums):
    total = nums[0]
    for i in nums:
        total += i
    return total / len(nums)"""


def make_trajectory(
    student: str,
    assignment: str,
    codes: list[str],
    scores: list[float],
    feedbacks: list[str] | None = None,
    semester: str = "S21",
) -> Trajectory:
    base = datetime(2021, 3, 1)
    if feedbacks is None:
        feedbacks = [
            f"Tests passed: {round(s * N_CASES)}/{N_CASES}" for s in scores
        ]
    entries = [
        Submission(
            index=i + 1,
            code=codes[i],
            timestamp=(base + timedelta(minutes=i)).isoformat(),
            logged_score=scores[i],
            logged_feedback=feedbacks[i],
        )
        for i in range(len(codes))
    ]
    return Trajectory(student, assignment, entries, {"semester": semester})


@pytest.fixture
def paper_assignment() -> Assignment:
    return Assignment(
        assignment_id="compute_average",
        description=ASSIGNMENT_DESCRIPTION,
        reference_solution=STEP3,
        test_suite_ref="compute_average_suite",
    )


@pytest.fixture
def paper_trajectory() -> Trajectory:
    return make_trajectory(
        "student1",
        "compute_average",
        [STEP1, STEP2, STEP3],
        [0.0, 0.125, 1.0],
        [FEEDBACK1, FEEDBACK2, FEEDBACK3],
    )


class _UniqueCode:
    def __init__(self) -> None:
        self.n = 0

    def __call__(self) -> str:
        self.n += 1
        return f"def solve():\n    value = {self.n}\n    return value"


def make_synthetic_corpus(
    n_traj: int = 20,
    min_len: int = 2,
    max_len: int = 8,
    seed: int = 0,
    semester: str = "S21",
) -> Corpus:
    """Corpus with globally unique submission codes and eighth-grained scores;
    a perfect score can only appear on a final submission."""
    rng = random.Random(seed)
    fresh = _UniqueCode()
    assignments = {}
    trajectories = []
    for i in range(n_traj):
        aid = f"asg{i % 5}"
        if aid not in assignments:
            assignments[aid] = Assignment(
                aid,
                description=f"Assignment {aid}: write solve() returning the checked value.",
                reference_solution=f"def solve():\n    return 'ref-{aid}'",
                test_suite_ref=f"suite-{aid}",
            )
        T = rng.randint(min_len, max_len)
        scores = sorted(rng.choice(range(0, N_CASES)) / N_CASES for _ in range(T))
        if rng.random() < 0.7:
            scores[-1] = 1.0
        codes = [fresh() for _ in range(T)]
        trajectories.append(
            make_trajectory(f"stud{i:03d}", aid, codes, scores, semester=semester)
        )
    return Corpus(assignments, trajectories)


def replay_backend(corpus: Corpus, n_cases: int = N_CASES) -> MockBackend:
    """Grading mock that reproduces every logged score bit-exactly and grades
    reference solutions as perfect."""
    oracle = {}
    for traj in corpus.trajectories:
        for sub in traj.entries:
            oracle[program_key(sub.code)] = exec_report_for_score(sub.logged_score, n_cases)
    for assignment in corpus.assignments.values():
        if assignment.reference_solution:
            oracle[program_key(assignment.reference_solution)] = exec_report_for_score(1.0, n_cases)
    return MockBackend(oracle, default=exec_report_for_score(0.0, n_cases))


def grade_fn_for(backend: MockBackend):
    return lambda assignment, code: grade(assignment, code, backend)


def _last_assistant_code(dialogue: Dialogue) -> str:
    for message in reversed(dialogue.messages):
        if message.role == "assistant":
            return extract_code(message.content)
    raise AssertionError("no assistant turn in rollout context")


class ReplayClient:
    """Chat mock that continues a trajectory with the student's real next
    submission, keyed by the most recent code in the context."""

    def __init__(self, corpus: Corpus):
        self.successor: dict[str, str] = {}
        for traj in corpus.trajectories:
            for prev, nxt in zip(traj.entries, traj.entries[1:]):
                self.successor[prev.code] = nxt.code

    def complete(self, messages: Dialogue) -> list[str]:
        return [self.successor[_last_assistant_code(messages)]]


class ExpertClient:
    """Chat mock that always answers with the assignment's reference solution."""

    def __init__(self, corpus: Corpus):
        self.by_description = {
            a.description: a.reference_solution for a in corpus.assignments.values()
        }

    def complete(self, messages: Dialogue) -> list[str]:
        return [self.by_description[messages.messages[1].content]]


class CharCounter:
    """One token per character; handy for exact truncation arithmetic."""

    def count(self, text: str) -> int:
        return len(text)
