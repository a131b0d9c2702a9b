"""Unmasking-count schedules, temperature schedules, and grouped decoding plans.

A StepSchedule fixes, for each of S decoding steps, how many tokens to commit
and at which sampling/choice temperatures. A GroupedSchedule reassigns those S
base steps to T groups, each consisting of one full evaluation followed by
l_t cheap local evaluations (sum l_t = T').
"""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = [
    "StepSchedule",
    "SubStep",
    "GroupedSchedule",
    "cosine_schedule",
    "polynomial_schedule",
    "tau1_schedule",
    "tau2_schedule",
    "default_tau_low",
    "default_tau2_init",
    "build_grouped_schedule",
    "TAU2_INIT_BY_NFE",
]

TAU2_FLOOR = 1e-6

# tau_low anchors by total step count; linear interpolation between anchors,
# clamped to the nearest anchor outside [16, 32]
_TAU_LOW_ANCHORS = ((16, 0.65), (20, 0.68), (24, 0.72), (32, 0.75))

# published initial choice temperatures by NFE for alternating-style schedules
TAU2_INIT_BY_NFE = {
    20: 6.0,
    30: 6.5,
    40: 7.0,
    50: 8.0,
    60: 8.5,
    70: 9.0,
    80: 9.5,
    100: 12.0,
    128: 13.0,
}


def default_tau_low(total_steps: int) -> float:
    """Interpolate the tau_low anchors; clamp outside the anchored range."""
    pts = _TAU_LOW_ANCHORS
    if total_steps <= pts[0][0]:
        return pts[0][1]
    if total_steps >= pts[-1][0]:
        return pts[-1][1]
    for (s0, v0), (s1, v1) in zip(pts, pts[1:]):
        if s0 <= total_steps <= s1:
            w = (total_steps - s0) / (s1 - s0)
            return v0 + w * (v1 - v0)
    raise AssertionError("unreachable")


def default_tau2_init(total_steps: int) -> float:
    return 4.5 if total_steps < 16 else 5.5


def tau1_schedule(step_fraction: float, tau_low: float) -> float:
    """Sampling temperature: 1.0 at the first step decaying to tau_low."""
    if not 0.0 <= step_fraction <= 1.0:
        raise ValueError(f"step_fraction must be in [0, 1], got {step_fraction}")
    if not 0.0 < tau_low <= 1.0:
        raise ValueError(f"tau_low must be in (0, 1], got {tau_low}")
    return tau_low + (1.0 - step_fraction**0.5) * (1.0 - tau_low)


def tau2_schedule(s: int, total_steps: int, tau2_init: float) -> float:
    """Choice temperature: linear decay from tau2_init toward zero, floored."""
    if not 1 <= s <= total_steps:
        raise ValueError(f"step {s} outside [1, {total_steps}]")
    return max(tau2_init * (1.0 - (s - 1) / total_steps), TAU2_FLOOR)


@dataclass(frozen=True)
class StepSchedule:
    """Per-step decode counts and temperatures for S decoding steps.

    remaining_masked holds m_0..m_S (m_0 = L, m_S = 0); decode_counts holds
    the differences. Zero counts can occur from floor rounding and are
    skipped by the decoders; the grouped builder rebalances them away.
    """

    total_steps: int
    remaining_masked: tuple[int, ...]
    decode_counts: tuple[int, ...]
    tau1: tuple[float, ...]
    tau2: tuple[float, ...]
    tau_low: float
    tau2_init: float

    def __post_init__(self) -> None:
        S = self.total_steps
        assert len(self.remaining_masked) == S + 1, "need m_0..m_S"
        assert self.remaining_masked[-1] == 0, "final masked count must be 0"
        assert len(self.decode_counts) == S
        assert all(c >= 0 for c in self.decode_counts), "negative decode count"
        assert all(
            a >= b for a, b in zip(self.remaining_masked, self.remaining_masked[1:])
        ), "remaining_masked must be non-increasing"

    @property
    def num_tokens(self) -> int:
        return self.remaining_masked[0]


def _finish_schedule(
    remaining: list[int], tau_low: float | None, tau2_init: float | None
) -> StepSchedule:
    S = len(remaining) - 1
    tau_low = default_tau_low(S) if tau_low is None else tau_low
    tau2_init = default_tau2_init(S) if tau2_init is None else tau2_init
    counts = tuple(a - b for a, b in zip(remaining, remaining[1:]))
    tau1 = tuple(
        tau1_schedule((s - 1) / (S - 1) if S > 1 else 0.0, tau_low)
        for s in range(1, S + 1)
    )
    tau2 = tuple(tau2_schedule(s, S, tau2_init) for s in range(1, S + 1))
    return StepSchedule(
        total_steps=S,
        remaining_masked=tuple(remaining),
        decode_counts=counts,
        tau1=tau1,
        tau2=tau2,
        tau_low=tau_low,
        tau2_init=tau2_init,
    )


def cosine_schedule(
    total_steps: int,
    num_tokens: int,
    tau_low: float | None = None,
    tau2_init: float | None = None,
) -> StepSchedule:
    """m_t = floor(cos(pi*t / 2S) * L) for t in 0..S-1, then m_S = 0."""
    if total_steps < 1 or num_tokens < 1:
        raise ValueError("total_steps and num_tokens must be >= 1")
    remaining = [
        int(math.floor(math.cos(math.pi * t / (2 * total_steps)) * num_tokens))
        for t in range(total_steps)
    ] + [0]
    return _finish_schedule(remaining, tau_low, tau2_init)


def polynomial_schedule(
    total_steps: int,
    num_tokens: int,
    exponent: float = 2.5,
    tau_low: float | None = None,
    tau2_init: float | None = None,
) -> StepSchedule:
    """m_t = floor((1 - (t/S)^exponent) * L) for t in 0..S-1, then m_S = 0."""
    if total_steps < 1 or num_tokens < 1:
        raise ValueError("total_steps and num_tokens must be >= 1")
    if not exponent > 0:
        raise ValueError(f"exponent must be positive, got {exponent}")
    remaining = [
        int(math.floor((1.0 - (t / total_steps) ** exponent) * num_tokens))
        for t in range(total_steps)
    ] + [0]
    return _finish_schedule(remaining, tau_low, tau2_init)


@dataclass(frozen=True)
class SubStep:
    index: int  # global step s in [1, T+T'], shared with the base schedule
    group: int  # 1-based group index
    kind: str  # "full" | "local"
    decode_count: int
    tau1: float
    tau2: float


@dataclass(frozen=True)
class GroupedSchedule:
    """T groups over a base schedule of T+T' steps; group t = Full + l_t Locals."""

    T: int
    T_prime: int
    u: int
    pattern: str
    local_counts: tuple[int, ...]
    substeps: tuple[SubStep, ...]

    def __post_init__(self) -> None:
        assert sum(self.local_counts) == self.T_prime
        assert len(self.substeps) == self.T + self.T_prime
        for group in self.groups():
            assert group[0].kind == "full", "every group must start Full"

    def groups(self) -> list[list[SubStep]]:
        out: list[list[SubStep]] = [[] for _ in range(self.T)]
        for sub in self.substeps:
            out[sub.group - 1].append(sub)
        return out

    @property
    def num_tokens(self) -> int:
        return sum(s.decode_count for s in self.substeps)


def _rebalance_zero_counts(counts: list[int]) -> list[int]:
    # Give every sub-step at least one token when there are enough tokens,
    # borrowing from the nearest later (then earlier) donor with >= 2.
    if sum(counts) < len(counts):
        return counts
    for i, c in enumerate(counts):
        if c > 0:
            continue
        donors = [j for j in range(i + 1, len(counts)) if counts[j] >= 2]
        if not donors:
            donors = [j for j in range(i - 1, -1, -1) if counts[j] >= 2]
            donor = donors[0] if donors else None
        else:
            donor = donors[0]
        if donor is None:
            continue
        counts[donor] -= 1
        counts[i] += 1
    return counts


def build_grouped_schedule(
    T: int,
    T_prime: int,
    u: int | None,
    base: StepSchedule,
    pattern: str = "tail_singles",
) -> GroupedSchedule:
    """Assign the T+T' base steps to T groups.

    tail_singles: groups 1..u are bare Full steps, groups u+1..T each carry
    one Local (requires u + T' = T; u defaults to T - T').
    alternating: the first T' groups each carry one Local, the rest are bare
    Full steps (requires u = 0 and T' <= T).
    """
    if T < 1 or T_prime < 0:
        raise ValueError(f"need T >= 1 and T' >= 0, got T={T}, T'={T_prime}")
    if base.total_steps != T + T_prime:
        raise ValueError(
            f"base schedule has {base.total_steps} steps, expected T+T'={T + T_prime}"
        )
    if pattern == "tail_singles":
        if u is None:
            u = T - T_prime
        if u + T_prime != T or u < 0:
            raise ValueError(f"tail_singles requires u + T' = T, got u={u}")
        local_counts = [0] * u + [1] * (T - u)
    elif pattern == "alternating":
        if u is None:
            u = 0
        if u != 0:
            raise ValueError(f"alternating requires u = 0, got u={u}")
        if T_prime > T:
            raise ValueError(f"alternating requires T' <= T, got T'={T_prime} > T={T}")
        local_counts = [1] * T_prime + [0] * (T - T_prime)
    else:
        raise ValueError(f"unknown pattern {pattern!r}")

    counts = _rebalance_zero_counts(list(base.decode_counts))
    substeps: list[SubStep] = []
    s = 1
    for g, l in enumerate(local_counts, start=1):
        for k in range(1 + l):
            substeps.append(
                SubStep(
                    index=s,
                    group=g,
                    kind="full" if k == 0 else "local",
                    decode_count=counts[s - 1],
                    tau1=base.tau1[s - 1],
                    tau2=base.tau2[s - 1],
                )
            )
            s += 1
    return GroupedSchedule(
        T=T,
        T_prime=T_prime,
        u=u,
        pattern=pattern,
        local_counts=tuple(local_counts),
        substeps=tuple(substeps),
    )
