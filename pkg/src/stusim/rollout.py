"""Evaluation harness: from each test-trajectory position, roll a chat model
forward up to the horizon, grading every generation and feeding the rendered
feedback back into the context.
"""

from __future__ import annotations

import itertools
import json
import logging
import os
import time
import uuid
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Protocol

from .corpus import Assignment, Corpus, Trajectory
from .grader import BackendUnavailable, GradeOutcome
from .serializer import (
    Dialogue,
    EmptyGenerationError,
    HeuristicTokenCounter,
    Message,
    FeedbackMode,
    SerializeMode,
    TokenCounter,
    extract_code,
    fence_code,
    serialize_trajectory,
    truncate_dialogue,
)

log = logging.getLogger(__name__)

HORIZON = 5

GradeFn = Callable[[Assignment, str], GradeOutcome]


class RolloutError(Exception):
    pass


class EndpointUnavailable(RolloutError):
    pass


class ProtocolError(RolloutError):
    pass


class RolloutAborted(RolloutError):
    """A record could not be completed; its key stays resumable."""

    def __init__(self, key: tuple, cause: Exception):
        super().__init__(f"record {key} aborted: {cause}")
        self.key = key
        self.cause = cause


@dataclass(frozen=True)
class Decoding:
    kind: str = "greedy"  # greedy | top_p
    p: float = 1.0
    temperature: float = 0.7

    def __post_init__(self) -> None:
        if self.kind not in ("greedy", "top_p"):
            raise RolloutError(f"unknown decoding {self.kind!r}")
        if not 0.0 < self.p <= 1.0:
            raise RolloutError("top_p must be in (0, 1]")


@dataclass
class EndpointConfig:
    base_url: str
    model_name: str
    api_key_env: str | None = None
    decoding: Decoding = field(default_factory=Decoding)
    n_samples: int = 1
    max_new_tokens: int = 1024
    timeout_s: float = 60.0
    max_retries: int = 4
    retry_base_s: float = 0.5

    def __post_init__(self) -> None:
        if self.decoding.kind == "greedy" and self.n_samples != 1:
            raise RolloutError("greedy decoding implies a single sample")
        if self.n_samples < 1:
            raise RolloutError("n_samples must be >= 1")


def _is_transient(status: int) -> bool:
    return status == 429 or status >= 500


def chat_complete(cfg: EndpointConfig, messages: Dialogue | list[dict], session=None) -> list[str]:
    """POST a chat-completions request, returning n_samples generation texts.

    Transient transport and 5xx failures retry with exponential backoff up to
    max_retries; each attempt is logged under one correlation id.
    """
    if session is None:
        import requests

        session = requests.Session()
    wire = messages.to_wire() if isinstance(messages, Dialogue) else messages
    greedy = cfg.decoding.kind == "greedy"
    payload = {
        "model": cfg.model_name,
        "messages": wire,
        "temperature": 0.0 if greedy else cfg.decoding.temperature,
        "top_p": 1.0 if greedy else cfg.decoding.p,
        "n": cfg.n_samples,
        "max_tokens": cfg.max_new_tokens,
    }
    headers = {"Content-Type": "application/json"}
    if cfg.api_key_env:
        key = os.environ.get(cfg.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
    url = cfg.base_url.rstrip("/") + "/chat/completions"
    correlation = uuid.uuid4().hex[:12]
    last_error: Exception | None = None
    for attempt in range(cfg.max_retries + 1):
        if attempt:
            time.sleep(cfg.retry_base_s * 2 ** (attempt - 1))
        try:
            log.debug("chat[%s] attempt %d -> %s", correlation, attempt + 1, url)
            resp = session.post(url, json=payload, headers=headers, timeout=cfg.timeout_s)
        except Exception as exc:  # transport-level
            last_error = exc
            log.warning("chat[%s] transport failure: %s", correlation, exc)
            continue
        if _is_transient(resp.status_code):
            last_error = RolloutError(f"HTTP {resp.status_code}")
            log.warning("chat[%s] transient HTTP %d", correlation, resp.status_code)
            continue
        if resp.status_code != 200:
            raise ProtocolError(f"endpoint returned HTTP {resp.status_code}")
        try:
            data = resp.json()
            texts = [choice["message"]["content"] for choice in data["choices"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed chat response: {exc}") from exc
        if len(texts) != cfg.n_samples:
            raise ProtocolError(f"expected {cfg.n_samples} choices, got {len(texts)}")
        log.debug("chat[%s] ok after %d attempt(s)", correlation, attempt + 1)
        return texts
    raise EndpointUnavailable(f"retries exhausted after {cfg.max_retries + 1} attempts: {last_error}")


class ChatClient(Protocol):
    def complete(self, messages: Dialogue) -> list[str]: ...


class HttpChatClient:
    def __init__(self, cfg: EndpointConfig, session=None):
        self.cfg = cfg
        self.session = session

    def complete(self, messages: Dialogue) -> list[str]:
        return chat_complete(self.cfg, messages, session=self.session)


@dataclass
class RolloutStep:
    k: int
    generated_code: str
    outcome: GradeOutcome
    ground_truth_code: str | None = None
    ground_truth_score: float | None = None
    termination: str | None = None  # perfect_solution | no_ground_truth | horizon

    def to_wire(self) -> dict:
        return {
            "k": self.k,
            "generated_code": self.generated_code,
            "outcome": {
                "score": self.outcome.score,
                "feedback": self.outcome.feedback,
                "status": self.outcome.status,
            },
            "ground_truth_code": self.ground_truth_code,
            "ground_truth_score": self.ground_truth_score,
            "termination": self.termination,
        }

    @classmethod
    def from_wire(cls, obj: dict) -> "RolloutStep":
        o = obj["outcome"]
        return cls(
            k=obj["k"],
            generated_code=obj["generated_code"],
            outcome=GradeOutcome(o["score"], o["feedback"], o["status"]),
            ground_truth_code=obj.get("ground_truth_code"),
            ground_truth_score=obj.get("ground_truth_score"),
            termination=obj.get("termination"),
        )


@dataclass
class RolloutRecord:
    student_id: str
    assignment_id: str
    start_t: int
    traj_len: int
    steps: list[RolloutStep]

    def key(self) -> tuple[str, str, int]:
        return (self.student_id, self.assignment_id, self.start_t)

    def to_wire(self) -> dict:
        return {
            "student_id": self.student_id,
            "assignment_id": self.assignment_id,
            "start_t": self.start_t,
            "traj_len": self.traj_len,
            "steps": [s.to_wire() for s in self.steps],
        }

    @classmethod
    def from_wire(cls, obj: dict) -> "RolloutRecord":
        return cls(
            student_id=obj["student_id"],
            assignment_id=obj["assignment_id"],
            start_t=obj["start_t"],
            traj_len=obj["traj_len"],
            steps=[RolloutStep.from_wire(s) for s in obj["steps"]],
        )


@dataclass
class RolloutSettings:
    mode: SerializeMode = field(default_factory=SerializeMode)
    budget: int = 4096
    counter: TokenCounter = field(default_factory=HeuristicTokenCounter)
    horizon: int = HORIZON
    ground_truth_scores: str = "logged"  # logged | regrade
    concurrency: int = 1
    max_abort_fraction: float = 0.1
    progress_every: int = 50


def should_terminate(
    last_outcome: GradeOutcome, has_ground_truth_next: bool, k: int, horizon: int = HORIZON
) -> str | None:
    """Early-stop rule checked after each graded step."""
    if last_outcome.score == 1.0:
        return "perfect_solution"
    if not has_ground_truth_next:
        return "no_ground_truth"
    if k >= horizon:
        return "horizon"
    return None


def _empty_generation_outcome() -> GradeOutcome:
    return GradeOutcome(0.0, "Syntax error: empty generation", "noncompiling")


def rollout_from(
    client: ChatClient,
    assignment: Assignment,
    traj: Trajectory,
    start_t: int,
    grade_fn: GradeFn,
    settings: RolloutSettings,
) -> RolloutRecord:
    """Roll the model from history u_{<= start_t-1}; step k targets ground
    truth at position start_t + k - 1. Generated code and its grading feedback
    (never the ground truth) extend the context between steps.
    """
    T = len(traj)
    if not 2 <= start_t <= T:
        raise RolloutError(f"start position {start_t} outside [2, {T}]")
    prefix = Trajectory(traj.student_id, traj.assignment_id, traj.entries[: start_t - 1], dict(traj.meta))
    context = serialize_trajectory(assignment, prefix, settings.mode)
    key = (traj.student_id, traj.assignment_id, start_t)
    steps: list[RolloutStep] = []
    for k in range(1, settings.horizon + 1):
        request = truncate_dialogue(context, settings.budget, settings.counter)
        try:
            generations = client.complete(request)
        except (EndpointUnavailable, BackendUnavailable) as exc:
            raise RolloutAborted(key, exc) from exc
        try:
            code = extract_code(generations[0])
            outcome = grade_fn(assignment, code)
        except EmptyGenerationError:
            code = ""
            outcome = _empty_generation_outcome()
        position = start_t + k - 1
        truth = traj.entries[position - 1]
        truth_score = truth.logged_score
        if settings.ground_truth_scores == "regrade":
            truth_score = grade_fn(assignment, truth.code).score
        step = RolloutStep(k, code, outcome, truth.code, truth_score)
        steps.append(step)
        context.messages.append(Message("assistant", fence_code(code)))
        if settings.mode.feedback is FeedbackMode.WITH_FEEDBACK:
            context.messages.append(Message("user", outcome.feedback))
        term = should_terminate(outcome, position + 1 <= T, k, settings.horizon)
        if term is not None:
            step.termination = term
            break
    return RolloutRecord(traj.student_id, traj.assignment_id, start_t, T, steps)


@dataclass
class RunStats:
    completed: int = 0
    skipped: int = 0
    aborted: int = 0

    @property
    def attempted(self) -> int:
        return self.completed + self.aborted


def load_completed_keys(path: Path | str) -> set[tuple[str, str, int]]:
    keys: set[tuple[str, str, int]] = set()
    path = Path(path)
    if not path.exists():
        return keys
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                keys.add((obj["student_id"], obj["assignment_id"], obj["start_t"]))
            except (json.JSONDecodeError, KeyError):
                continue  # torn final line from an interrupt
    return keys


def load_records(path: Path | str) -> list[RolloutRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(RolloutRecord.from_wire(json.loads(line)))
    return records


def run_eval(
    test_corpus: Corpus,
    client: ChatClient,
    grade_fn: GradeFn,
    settings: RolloutSettings,
    out_path: Path | str | None = None,
    stats: RunStats | None = None,
) -> Iterator[RolloutRecord]:
    """One record per (trajectory, start position in [2..T]), in corpus order.

    Completed keys found in out_path are skipped, so an interrupted run
    resumes to the same fixpoint. Records run on a bounded worker pool but are
    written and yielded in submission order.
    """
    stats = stats if stats is not None else RunStats()
    done = load_completed_keys(out_path) if out_path else set()
    tasks: list[tuple[Assignment, Trajectory, int]] = []
    for traj in test_corpus.trajectories:
        assignment = test_corpus.assignment_for(traj)
        for start_t in range(2, len(traj) + 1):
            if (traj.student_id, traj.assignment_id, start_t) in done:
                stats.skipped += 1
                continue
            tasks.append((assignment, traj, start_t))
    total = len(tasks)
    log.info("rollout: %d records to run, %d already complete", total, stats.skipped)

    sink = open(out_path, "a", encoding="utf-8") if out_path else None
    run_one = lambda task: rollout_from(client, task[0], task[1], task[2], grade_fn, settings)

    def finish(record: RolloutRecord | None, error: RolloutAborted | None):
        if error is not None:
            stats.aborted += 1
            log.warning("%s", error)
            return None
        stats.completed += 1
        if sink is not None:
            sink.write(json.dumps(record.to_wire(), ensure_ascii=False) + "\n")
            sink.flush()
        if stats.completed % settings.progress_every == 0:
            log.info("rollout progress: %d/%d", stats.completed, total)
        return record

    try:
        if settings.concurrency <= 1:
            for task in tasks:
                try:
                    record = finish(run_one(task), None)
                except RolloutAborted as exc:
                    finish(None, exc)
                    continue
                yield record
        else:
            with ThreadPoolExecutor(max_workers=settings.concurrency) as pool:
                pending: deque = deque()
                it = iter(tasks)
                for task in itertools.islice(it, settings.concurrency * 2):
                    pending.append(pool.submit(run_one, task))
                while pending:
                    future = pending.popleft()
                    nxt = next(it, None)
                    if nxt is not None:
                        pending.append(pool.submit(run_one, nxt))
                    try:
                        record = finish(future.result(), None)
                    except RolloutAborted as exc:
                        finish(None, exc)
                        continue
                    yield record
    finally:
        if sink is not None:
            sink.close()
    if stats.attempted and stats.aborted / stats.attempted > settings.max_abort_fraction:
        raise RolloutError(
            f"{stats.aborted}/{stats.attempted} records aborted, above the allowed fraction"
        )
