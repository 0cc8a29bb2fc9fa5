"""Effective updates per parameter group and conditional learning speeds."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .ndcore import group_sq_norm


class DegenerateGroup(ValueError):
    pass


class InsufficientWarmup(ValueError):
    pass


def mu(grads: Sequence[np.ndarray], params_after: Sequence[np.ndarray]) -> float:
    """Squared gradient norm (pre-step) over squared parameter norm (post-step) for one group."""
    denom = group_sq_norm(params_after)
    if denom <= 0.0:
        raise DegenerateGroup("degenerate group: parameter norm is zero")
    return group_sq_norm(grads) / denom


@dataclass
class SpeedAccumulator:
    m_theta0: float = 0.0
    m_theta0_prime: float = 0.0
    m_theta1: float = 0.0
    m_theta1_prime: float = 0.0
    steps: int = 0

    def accumulate(self, mu0: float, mu0_prime: float, mu1: float, mu1_prime: float) -> SpeedAccumulator:
        self.m_theta0 += mu0
        self.m_theta0_prime += mu0_prime
        self.m_theta1 += mu1
        # each primed sum accumulates its own group's update
        self.m_theta1_prime += mu1_prime
        self.steps += 1
        return self

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.m_theta0, self.m_theta0_prime, self.m_theta1, self.m_theta1_prime

    def to_dict(self) -> dict:
        return asdict(self)

    def copy(self) -> SpeedAccumulator:
        return SpeedAccumulator(**asdict(self))

    def mirrored(self) -> SpeedAccumulator:
        return SpeedAccumulator(self.m_theta1, self.m_theta1_prime, self.m_theta0, self.m_theta0_prime, self.steps)


def log_ratio(fusion_sum: float, branch_sum: float) -> float:
    if fusion_sum <= 0.0 or branch_sum <= 0.0:
        raise InsufficientWarmup("insufficient warm-up: an accumulated sum is zero")
    return math.log(fusion_sum / branch_sum)


def cond_speed(acc: SpeedAccumulator) -> tuple[float, float]:
    """(s(m1|m0), s(m0|m1)): how fast each branch learns from the other modality relative to its own."""
    return log_ratio(acc.m_theta0_prime, acc.m_theta0), log_ratio(acc.m_theta1_prime, acc.m_theta1)


def diff_speed(acc: SpeedAccumulator) -> float:
    s10, s01 = cond_speed(acc)
    return s10 - s01


def diff_speed_multi(sums: Sequence[tuple[float, float]]) -> tuple[float, tuple[int, int]]:
    """Spread between the fastest and slowest conditional speeds over k modalities.

    ``sums[i]`` is (accumulated fusion update into branch i, accumulated branch-i
    update). Returns ``(max - min, (argmax, argmin))``.
    """
    if len(sums) < 2:
        raise ValueError("need at least two modalities")
    speeds = np.array([log_ratio(f, b) for f, b in sums])
    hi, lo = int(np.argmax(speeds)), int(np.argmin(speeds))
    return float(speeds[hi] - speeds[lo]), (hi, lo)
