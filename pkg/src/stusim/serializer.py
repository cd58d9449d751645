"""Conversational serialization of trajectories: student code as assistant
turns, grader feedback as user turns, plus the code-only ablation and the
sliding-window truncation used to fit a token budget.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Protocol

from .corpus import Assignment, Trajectory

DEFAULT_SYSTEM_PROMPT = (
    "You are a first-year novice student learning programming in Python. "
    "Solve the given programming assignment(s). You will be interacting with "
    "a learning environment which will provide you with summative feedback."
)

ROLES = ("system", "user", "assistant")


class SerializeError(ValueError):
    pass


class FeedbackMissingError(SerializeError):
    def __init__(self, index: int):
        super().__init__(f"submission {index} has no feedback; regrade before serializing")
        self.index = index


class CannotFitError(SerializeError):
    pass


class EmptyGenerationError(SerializeError):
    pass


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise SerializeError(f"unknown role {self.role!r}")
        if not self.content:
            raise SerializeError(f"empty content in {self.role} message")


@dataclass
class Dialogue:
    messages: list[Message]

    def roles(self) -> list[str]:
        return [m.role for m in self.messages]

    def to_wire(self) -> list[dict]:
        return [{"role": m.role, "content": m.content} for m in self.messages]

    @classmethod
    def from_wire(cls, messages: Iterable[dict]) -> "Dialogue":
        return cls([Message(m["role"], m["content"]) for m in messages])


class FeedbackMode(str, Enum):
    WITH_FEEDBACK = "with_feedback"
    CODE_ONLY = "code_only"


@dataclass
class SerializeMode:
    feedback: FeedbackMode = FeedbackMode.WITH_FEEDBACK
    system_prompt: str = DEFAULT_SYSTEM_PROMPT

    def __post_init__(self) -> None:
        self.feedback = FeedbackMode(self.feedback)
        if not self.system_prompt:
            raise SerializeError("system prompt must be non-empty")


class TokenCounter(Protocol):
    def count(self, text: str) -> int: ...


class HeuristicTokenCounter:
    """Deterministic model-free budget unit: ceil(utf-8 bytes / 4)."""

    def count(self, text: str) -> int:
        return math.ceil(len(text.encode("utf-8")) / 4)


def fence_code(code: str) -> str:
    return f"```python\n{code}\n```"


_FENCE_RE = re.compile(r"```[^\n]*\n(.*?)\n?```", re.DOTALL)


def extract_code(assistant_content: str) -> str:
    """Interior of the first fenced code block; bare content is returned
    trimmed. Models may emit prose around the fence."""
    if not assistant_content.strip():
        raise EmptyGenerationError("generation contains no code")
    m = _FENCE_RE.search(assistant_content)
    if m:
        return m.group(1)
    return assistant_content.strip()


def serialize_entries(assignment: Assignment, entries, mode: SerializeMode) -> Dialogue:
    """System prompt, assignment turn, then one assistant turn per submission,
    each followed by its feedback turn unless running code-only. Accepts a
    bare submission sequence so degenerate empty prefixes serialize too."""
    description = assignment.description
    if assignment.extra_context:
        description = f"{description}\n{assignment.extra_context}"
    messages = [Message("system", mode.system_prompt), Message("user", description)]
    for sub in entries:
        messages.append(Message("assistant", fence_code(sub.code)))
        if mode.feedback is FeedbackMode.WITH_FEEDBACK:
            if not sub.logged_feedback:
                raise FeedbackMissingError(sub.index)
            messages.append(Message("user", sub.logged_feedback))
    return Dialogue(messages)


def serialize_trajectory(
    assignment: Assignment, traj: Trajectory, mode: SerializeMode
) -> Dialogue:
    return serialize_entries(assignment, traj.entries, mode)


def _units(dialogue: Dialogue) -> list[list[Message]]:
    """Split post-prefix messages into whole submission units (assistant turn
    plus its paired feedback turn, when present)."""
    units: list[list[Message]] = []
    for msg in dialogue.messages[2:]:
        if msg.role == "assistant":
            units.append([msg])
        elif msg.role == "user":
            if not units or len(units[-1]) != 1:
                raise SerializeError("feedback turn without a preceding assistant turn")
            units[-1].append(msg)
        else:
            raise SerializeError("system message after the dialogue prefix")
    return units


def truncate_dialogue(dialogue: Dialogue, budget: int, counter: TokenCounter) -> Dialogue:
    """Drop the oldest submission units until the dialogue fits the budget.

    The system prompt and assignment turn always survive, as does the most
    recent unit; units are dropped whole so alternation is preserved.
    """
    prefix = dialogue.messages[:2]
    cost = lambda msgs: sum(counter.count(m.content) for m in msgs)
    prefix_cost = cost(prefix)
    if prefix_cost >= budget:
        raise CannotFitError(f"budget {budget} cannot hold the dialogue prefix")
    units = _units(dialogue)
    total = prefix_cost + sum(cost(u) for u in units)
    start = 0
    while total > budget and start < len(units) - 1:
        total -= cost(units[start])
        start += 1
    if units and total > budget:
        raise CannotFitError(
            f"most recent submission alone exceeds budget {budget}"
        )
    kept = [m for unit in units[start:] for m in unit]
    return Dialogue(prefix + kept)


def parse_dialogue(dialogue: Dialogue) -> tuple[str, list[tuple[str, str | None]]]:
    """Inverse of serialize_trajectory: assignment description plus the
    per-submission (code, feedback) projection."""
    msgs = dialogue.messages
    if len(msgs) < 2 or msgs[0].role != "system" or msgs[1].role != "user":
        raise SerializeError("dialogue must start with system and assignment turns")
    items: list[tuple[str, str | None]] = []
    i = 2
    while i < len(msgs):
        if msgs[i].role != "assistant":
            raise SerializeError(f"expected assistant turn at message {i}")
        code = extract_code(msgs[i].content)
        feedback = None
        if i + 1 < len(msgs) and msgs[i + 1].role == "user":
            feedback = msgs[i + 1].content
            i += 2
        else:
            i += 1
        items.append((code, feedback))
    return msgs[1].content, items


def dialogue_record(dialogue: Dialogue, meta: dict | None = None) -> dict:
    return {"messages": dialogue.to_wire(), "meta": meta or {}}


def save_dialogues(records: Iterable[dict], path: Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
            n += 1
    return n
