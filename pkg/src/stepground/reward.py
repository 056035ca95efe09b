"""History-baselined, progress-gated reward and within-group advantages.

The reward credits a completion only for the grounding improvement it adds
beyond the history alone, measured relative to the remaining headroom:

    progress = (full - hist) / max(1 - hist, eps)
    reward   = full                          if progress >= tau
             = clip(alpha * (progress - tau), -1, 0)   otherwise

The jump at the gate is intentional: restating the history, emitting
nothing, or adding marginal fluff all land below tau and are penalized,
while substantive continuations collect the full grounding score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .align import AlignConfig, StepSequence, grounding_score
from .corpus import CorpusIndex

_STD_FLOOR = 1e-12


@dataclass(frozen=True)
class RewardConfig:
    tau: float = 0.10    # minimum relative progress for positive reward
    alpha: float = 2.0   # penalty slope below the gate
    eps: float = 1e-6    # guard for the 1 - hist denominator

    def __post_init__(self) -> None:
        if not 0 < self.tau < 1:
            raise ValueError(f"tau must be in (0, 1), got {self.tau}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")


@dataclass(frozen=True)
class RewardBreakdown:
    a_full: float
    a_hist: float
    rho: float
    reward: float
    gated: bool
    best_record_full: int
    best_record_hist: int

    def to_dict(self) -> dict:
        return {
            "a_full": self.a_full,
            "a_hist": self.a_hist,
            "rho": self.rho,
            "reward": self.reward,
            "gated": self.gated,
            "best_record_full": self.best_record_full,
            "best_record_hist": self.best_record_hist,
        }


@dataclass(frozen=True)
class AdvantageGroup:
    rewards: tuple[float, ...]
    advantages: tuple[float, ...]
    mean: float
    std: float

    def to_dict(self) -> dict:
        return {
            "rewards": list(self.rewards),
            "advantages": list(self.advantages),
            "mean": self.mean,
            "std": self.std,
        }


def concat_steps(
    history: StepSequence | None, completion: StepSequence | None
) -> StepSequence:
    """Step-level concatenation; embedding rows are stacked, never recomputed."""
    hist_n = 0 if history is None else len(history)
    comp_n = 0 if completion is None else len(completion)
    if hist_n == 0 and comp_n == 0:
        raise ValueError("cannot concatenate two empty step sequences")
    if hist_n == 0:
        assert completion is not None
        return completion
    if comp_n == 0:
        assert history is not None
        return history
    assert history is not None and completion is not None
    return StepSequence(
        history.steps + completion.steps,
        np.concatenate([history.embeddings, completion.embeddings], axis=0),
    )


def reward_from_scores(
    a_full: float, a_hist: float, cfg: RewardConfig
) -> tuple[float, float, bool]:
    """Apply the gated piecewise formula; returns (rho, reward, gated)."""
    rho = (a_full - a_hist) / max(1.0 - a_hist, cfg.eps)
    if rho >= cfg.tau:
        return rho, a_full, True
    penalty = cfg.alpha * (rho - cfg.tau)
    return rho, min(max(penalty, -1.0), 0.0), False


def compute_reward(
    history: StepSequence,
    completion: StepSequence | None,
    index: CorpusIndex,
    acfg: AlignConfig,
    rcfg: RewardConfig,
    workers: int = 1,
) -> RewardBreakdown:
    """Score a completion against the corpus relative to its history.

    An empty completion is legal: the concatenation equals the history, so
    progress is zero and the sub-gate penalty applies.
    """
    if len(history) == 0:
        raise ValueError("history must contain at least one step")
    a_hist, best_hist, _ = grounding_score(history, index, acfg, workers=workers)
    if completion is None or len(completion) == 0:
        a_full, best_full = a_hist, best_hist
    else:
        full = concat_steps(history, completion)
        a_full, best_full, _ = grounding_score(full, index, acfg, workers=workers)
    rho, reward, gated = reward_from_scores(a_full, a_hist, rcfg)
    return RewardBreakdown(
        a_full=a_full,
        a_hist=a_hist,
        rho=rho,
        reward=reward,
        gated=gated,
        best_record_full=best_full.record_idx,
        best_record_hist=best_hist.record_idx,
    )


def group_advantages(rewards: list[float] | tuple[float, ...]) -> AdvantageGroup:
    """Standardize rewards within a sampling group.

    Uses the population standard deviation (divide by the group size). A
    zero-variance group yields all-zero advantages rather than an error:
    identical completions carry no gradient, which is the benign outcome.
    """
    if len(rewards) < 2:
        raise ValueError(f"need at least 2 rewards in a group, got {len(rewards)}")
    arr = np.asarray(rewards, dtype=np.float64)
    mean = float(arr.mean())
    if bool(np.all(arr == arr[0])):
        # all-equal groups are exactly degenerate; the mean can still round
        # an ulp away from the common value, so test the inputs, not the std
        std = 0.0
        adv = np.zeros_like(arr)
    else:
        std = float(np.sqrt(((arr - mean) ** 2).mean()))
        adv = (arr - mean) / max(std, _STD_FLOOR)
    return AdvantageGroup(
        rewards=tuple(float(r) for r in arr),
        advantages=tuple(float(a) for a in adv),
        mean=mean,
        std=std,
    )
