"""Per-node mode selection: a two-armed UCB bandit choosing between active
radar and passive spectrum sensing, plus the radar-only and random-p
baseline policies.

Rewards are normalized Shannon entropies of the coordinator's current
distribution estimates, so they are always in [0, 1]: the active arm is
paid by motion-model uncertainty, the passive arm by signal-model
uncertainty, each averaged over the targets the node covers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from crnsim.markov import normalized_entropy

# tracks with fewer observations than this contribute maximum uncertainty,
# pushing nodes to observe unknown targets
MIN_OBSERVATIONS_FOR_ESTIMATE = 3


class OutOfRangeReward(ValueError):
    """Reward outside the unit interval."""


class NodeMode(Enum):
    ACTIVE = 0
    PASSIVE = 1


class PolicyKind(Enum):
    BANDIT = "bandit"
    RADAR_ONLY = "radar-only"
    RANDOM = "random"


@dataclass
class RewardSample:
    node_id: int
    mode: NodeMode
    value: float
    num_covered_targets: int


@dataclass
class BanditState:
    """Pull counts and running mean rewards for one node's two arms."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros(2, dtype=np.int64))
    means: np.ndarray = field(default_factory=lambda: np.zeros(2))
    total_steps: int = 0


def compute_rewards(motion_dists, signal_dists) -> tuple[float, float]:
    """Mean normalized entropy of the covered tracks' motion and signal
    distribution estimates.

    Each element of the two lists is either a distribution vector or None;
    None marks a track with too little history, which contributes maximum
    uncertainty (entropy 1). Both rewards are 0 when nothing is covered.
    """
    m = len(motion_dists)
    if m == 0:
        return 0.0, 0.0
    if len(signal_dists) != m:
        raise ValueError("motion and signal estimate lists must align")
    active = sum(1.0 if d is None else normalized_entropy(d) for d in motion_dists)
    passive = sum(1.0 if d is None else normalized_entropy(d) for d in signal_dists)
    return active / m, passive / m


def ucb_select(state: BanditState, t: int) -> NodeMode:
    """Pick the arm maximizing mean reward plus the sqrt(log t / N) bonus.

    Unplayed arms are selected first (infinite bonus); ties go to Active.
    """
    if t < 1:
        raise ValueError("t starts at 1")
    if state.counts[NodeMode.ACTIVE.value] == 0:
        return NodeMode.ACTIVE
    if state.counts[NodeMode.PASSIVE.value] == 0:
        return NodeMode.PASSIVE
    bonus = np.sqrt(math.log(t) / state.counts)
    score = state.means + bonus
    if score[NodeMode.ACTIVE.value] >= score[NodeMode.PASSIVE.value]:
        return NodeMode.ACTIVE
    return NodeMode.PASSIVE


def record_reward(state: BanditState, mode: NodeMode, value: float) -> BanditState:
    """Update the played arm's running mean and count in place."""
    if not 0.0 <= value <= 1.0:
        raise OutOfRangeReward(f"reward {value} outside [0, 1]")
    i = mode.value
    state.counts[i] += 1
    state.means[i] += (value - state.means[i]) / state.counts[i]
    state.total_steps += 1
    return state


def baseline_policy(
    kind: PolicyKind, p: float, rng: np.random.Generator
) -> NodeMode:
    """Radar-only always plays Active; random-p plays Active with probability p."""
    if kind is PolicyKind.RADAR_ONLY:
        return NodeMode.ACTIVE
    if kind is PolicyKind.RANDOM:
        if not 0.0 <= p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        return NodeMode.ACTIVE if rng.random() < p else NodeMode.PASSIVE
    raise ValueError(f"not a baseline policy: {kind}")
