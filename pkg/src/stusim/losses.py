"""Training objectives as pure numeric functions over caller-supplied
log-probabilities: masked NLL, implicit reward, and the pairwise preference
loss with its gradient. No model, no autodiff.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path


@dataclass
class LogprobSeq:
    token_logprobs: list[float]
    assistant_mask: list[bool]

    def __post_init__(self) -> None:
        if len(self.token_logprobs) != len(self.assistant_mask):
            raise ValueError("logprobs and mask lengths differ")
        if any(lp > 0.0 for lp in self.token_logprobs):
            raise ValueError("log-probabilities must be <= 0")


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 0.5

    def __post_init__(self) -> None:
        if self.beta <= 0:
            raise ValueError("beta must be positive")


def sft_nll(seq: LogprobSeq) -> float:
    """Negative log-likelihood summed over assistant-masked positions only."""
    return -math.fsum(
        lp for lp, keep in zip(seq.token_logprobs, seq.assistant_mask) if keep
    )


def implicit_reward(policy_logprob_sum: float, ref_logprob_sum: float, cfg: DpoConfig) -> float:
    """beta-scaled log-ratio of policy to reference completion probability."""
    return cfg.beta * (policy_logprob_sum - ref_logprob_sum)


def _softplus(x: float) -> float:
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def dpo_loss(r_chosen: float, r_rejected: float) -> float:
    """-log sigmoid(r_chosen - r_rejected), via the stable softplus form."""
    return _softplus(-(r_chosen - r_rejected))


def dpo_loss_grad(r_chosen: float, r_rejected: float) -> tuple[float, float]:
    """Partial derivatives w.r.t. the two rewards: (-s, +s) with s = sigmoid(-delta)."""
    s = _sigmoid(-(r_chosen - r_rejected))
    return (-s, s)


def audit_pair_file(in_path: Path | str, out_path: Path | str, cfg: DpoConfig = DpoConfig()) -> int:
    """Per-pair loss audit. Reads JSONL with chosen/rejected policy and
    reference logprob sums; writes one loss record per pair."""
    n = 0
    with open(in_path, encoding="utf-8") as src, open(out_path, "w", encoding="utf-8") as dst:
        for line in src:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            r_c = implicit_reward(obj["chosen"]["policy_lp"], obj["chosen"]["ref_lp"], cfg)
            r_r = implicit_reward(obj["rejected"]["policy_lp"], obj["rejected"]["ref_lp"], cfg)
            record = {
                "pair_id": obj["pair_id"],
                "reward_chosen": r_c,
                "reward_rejected": r_r,
                "loss": dpo_loss(r_c, r_r),
            }
            dst.write(json.dumps(record) + "\n")
            n += 1
    return n
