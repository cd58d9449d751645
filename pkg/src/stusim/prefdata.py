"""Preference-optimization data: next-submission pairing against the first
later differently-graded attempt, prefix sampling for group-based training,
tiered candidate rewards and group-relative advantages.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, NamedTuple

from . import analysis
from .corpus import Corpus, Trajectory
from .grader import GradeOutcome, is_compiling
from .serializer import (
    Dialogue,
    HeuristicTokenCounter,
    SerializeMode,
    TokenCounter,
    serialize_trajectory,
    truncate_dialogue,
)

DEFAULT_GROUP_SIZE = 4
DEFAULT_PREFIXES_PER_TRAJ = 2
SCORE_EPS = 1e-9


@dataclass
class PreferencePair:
    prompt: Dialogue
    chosen: str
    rejected: str
    meta: dict

    def __post_init__(self) -> None:
        if self.meta["chosen_score"] == self.meta["rejected_score"]:
            raise ValueError("chosen and rejected scores must differ")
        if self.meta["k_star"] < 2:
            raise ValueError("k_star must be >= 2")

    def key(self) -> tuple:
        m = self.meta
        return (m["student_id"], m["assignment_id"], m["t"], m["k_star"], self.chosen, self.rejected)

    def to_wire(self) -> dict:
        return {
            "prompt": self.prompt.to_wire(),
            "chosen": self.chosen,
            "rejected": self.rejected,
            "meta": self.meta,
        }


@dataclass
class GrpoPrefix:
    prompt: Dialogue
    ground_truth_next: str
    ground_truth_score: float
    t: int

    def __post_init__(self) -> None:
        if self.t < 1:
            raise ValueError("prefix position must be >= 1")


@dataclass(frozen=True)
class RewardTier:
    value: float
    reason: str

    _TIERS = {
        "ast_match": 2.0,
        "grade_match": 1.0,
        "neutral": 0.0,
        "noncompiling": -1.0,
    }

    def __post_init__(self) -> None:
        if self._TIERS.get(self.reason) != self.value:
            raise ValueError(f"reward {self.value} does not match reason {self.reason!r}")


def k_star(traj: Trajectory, t: int) -> int | None:
    """Smallest k in [2, T-t] whose grade differs from the immediate next
    attempt's; None when every later grade matches."""
    T = len(traj)
    if not 1 <= t <= T - 1:
        raise ValueError(f"position t={t} outside [1, {T - 1}]")
    scores = traj.scores()
    next_score = scores[t]  # a_{t+1}, zero-based
    for k in range(2, T - t + 1):
        if scores[t + k - 1] != next_score:
            return k
    return None


class DpoBuild(NamedTuple):
    pairs: list[PreferencePair]
    positions_seen: int
    positions_skipped: int


def build_dpo_dataset(
    corpus: Corpus,
    mode: SerializeMode | None = None,
    budget: int = 4096,
    counter: TokenCounter | None = None,
) -> DpoBuild:
    """One preference pair per (trajectory, position) admitting a later
    differently-graded attempt; output order is trajectory order then
    ascending position. Positions without a contrast are counted, not errors."""
    mode = mode or SerializeMode()
    counter = counter or HeuristicTokenCounter()
    pairs: list[PreferencePair] = []
    seen = skipped = 0
    for traj in corpus.trajectories:
        assignment = corpus.assignment_for(traj)
        for t in range(1, len(traj)):
            seen += 1
            k = k_star(traj, t)
            if k is None:
                skipped += 1
                continue
            prefix = Trajectory(
                traj.student_id, traj.assignment_id, traj.entries[:t], dict(traj.meta)
            )
            prompt = truncate_dialogue(
                serialize_trajectory(assignment, prefix, mode), budget, counter
            )
            chosen = traj.entries[t]
            rejected = traj.entries[t + k - 1]
            pairs.append(
                PreferencePair(
                    prompt=prompt,
                    chosen=chosen.code,
                    rejected=rejected.code,
                    meta={
                        "student_id": traj.student_id,
                        "assignment_id": traj.assignment_id,
                        "t": t,
                        "k_star": k,
                        "chosen_score": chosen.logged_score,
                        "rejected_score": rejected.logged_score,
                    },
                )
            )
    return DpoBuild(pairs, seen, skipped)


def sample_grpo_prefixes(
    traj: Trajectory,
    assignment,
    n: int = DEFAULT_PREFIXES_PER_TRAJ,
    seed: int = 0,
    mode: SerializeMode | None = None,
    budget: int = 4096,
    counter: TokenCounter | None = None,
) -> list[GrpoPrefix]:
    """Uniform sample of n distinct prefix positions from {1..T-1} (all of
    them when fewer exist), reproducible under the seed."""
    T = len(traj)
    if T < 2:
        raise ValueError("trajectory too short to sample prefixes")
    mode = mode or SerializeMode()
    counter = counter or HeuristicTokenCounter()
    positions = list(range(1, T))
    if len(positions) > n:
        positions = sorted(random.Random(seed).sample(positions, n))
    out = []
    for t in positions:
        prefix = Trajectory(traj.student_id, traj.assignment_id, traj.entries[:t], dict(traj.meta))
        prompt = truncate_dialogue(
            serialize_trajectory(assignment, prefix, mode), budget, counter
        )
        nxt = traj.entries[t]
        out.append(GrpoPrefix(prompt, nxt.code, nxt.logged_score, t))
    return out


def tiered_reward(
    candidate: str,
    ground_truth_next: str,
    ground_truth_score: float,
    grade_fn: Callable[[str], GradeOutcome],
) -> RewardTier:
    """Discrete candidate reward. Precedence: compile failure, exact tree
    match, matching grade, nothing; exactly one tier fires."""
    if not is_compiling(candidate):
        return RewardTier(-1.0, "noncompiling")
    if analysis.ast_equal(candidate, ground_truth_next):
        return RewardTier(2.0, "ast_match")
    outcome = grade_fn(candidate)
    if abs(outcome.score - ground_truth_score) <= SCORE_EPS:
        return RewardTier(1.0, "grade_match")
    return RewardTier(0.0, "neutral")


def group_advantage(rewards: list[float]) -> list[float]:
    """Mean-centered, population-std-normalized rewards; all zero when the
    group is (numerically) constant."""
    if len(rewards) < 2:
        raise ValueError("need at least two rewards")
    mean = math.fsum(rewards) / len(rewards)
    var = math.fsum((r - mean) ** 2 for r in rewards) / len(rewards)
    std = math.sqrt(var)
    if std < 1e-8:
        return [0.0] * len(rewards)
    return [(r - mean) / std for r in rewards]


def save_preference_pairs(pairs: Iterable[PreferencePair], path: Path | str) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(json.dumps(pair.to_wire(), ensure_ascii=False) + "\n")
            n += 1
    return n


def grpo_sample_record(
    prefix: GrpoPrefix, candidates: list[str], rewards: list[RewardTier]
) -> dict:
    """Training-ready group sample: candidates with rewards and advantages."""
    advantages = group_advantage([r.value for r in rewards])
    return {
        "prompt": prefix.prompt.to_wire(),
        "candidates": [
            {"code": code, "reward": tier.value, "reason": tier.reason, "advantage": adv}
            for code, tier, adv in zip(candidates, rewards, advantages)
        ],
        "ground_truth": prefix.ground_truth_next,
        "meta": {"t": prefix.t, "ground_truth_score": prefix.ground_truth_score},
    }
