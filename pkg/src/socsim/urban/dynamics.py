"""Car-following (IDM) and lane-change (MOBIL) decision rules, scalar form.

These are the reference implementations used for single-vehicle decisions
and for testing; the vectorized per-tick kernels live in kernels.py.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

INF = float("inf")
VEHICLE_LENGTH = 5.0  # meters


@dataclass(frozen=True)
class IdmParams:
    v0: float = 30.0          # desired speed, m/s
    T: float = 1.5            # safe time headway, s
    a_max: float = 0.73       # maximum acceleration, m/s^2
    b: float = 1.67           # comfortable deceleration, m/s^2
    s0: float = 2.0           # minimum gap, m
    delta: float = 4.0        # acceleration exponent
    b_emergency: float = 8.0  # hard braking floor, m/s^2

    def __post_init__(self):
        for name in ("v0", "T", "a_max", "b", "s0", "delta", "b_emergency"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class MobilParams:
    politeness: float = 0.5        # weight of follower gains, in [0, 1]
    threshold: float = 0.1         # net advantage needed to change, m/s^2
    b_safe: float = 4.0            # max braking imposed on new follower, m/s^2

    def __post_init__(self):
        if not 0.0 <= self.politeness <= 1.0:
            raise ValueError("politeness must be in [0, 1]")
        if self.b_safe <= 0:
            raise ValueError("b_safe must be positive")


def idm_acceleration(v: float, v_lead: float, gap: float, p: IdmParams) -> float:
    """Acceleration command for a vehicle at speed v following a leader.

    Free flow is modeled as gap = inf. A non-positive gap returns the
    emergency braking value -b_emergency (the flagged worst case).
    """
    if gap <= 0:
        return -p.b_emergency
    accel = p.a_max * (1.0 - (v / p.v0) ** p.delta)
    if math.isfinite(gap):
        dv = v - v_lead
        s_star = p.s0 + v * p.T + v * dv / (2.0 * math.sqrt(p.a_max * p.b))
        s_star = max(s_star, p.s0)
        accel -= p.a_max * (s_star / gap) ** 2
    return min(max(accel, -p.b_emergency), p.a_max)


@dataclass(frozen=True)
class LaneNeighbors:
    """Gaps and speeds of the nearest vehicles around a slot in one lane.

    Gaps are bumper-to-bumper; absent vehicles are (inf gap, 0 speed).
    """

    leader_gap: float = INF
    leader_speed: float = 0.0
    follower_gap: float = INF
    follower_speed: float = 0.0


def mobil_lane_change(ego_speed: float, current: LaneNeighbors, target: LaneNeighbors,
                      idm: IdmParams, mobil: MobilParams,
                      veh_len: float = VEHICLE_LENGTH) -> bool:
    """True iff changing to the target lane is both safe and worthwhile.

    Safety: the target lane's follower must not be forced to brake harder
    than b_safe. Incentive: the ego's acceleration gain plus the politeness
    -weighted gain of both followers must exceed the changing threshold.
    """
    # Safety criterion for the new follower.
    if math.isfinite(target.follower_gap):
        a_new_follower_after = idm_acceleration(
            target.follower_speed, ego_speed, target.follower_gap, idm)
        if a_new_follower_after < -mobil.b_safe:
            return False

    a_ego_before = idm_acceleration(ego_speed, current.leader_speed, current.leader_gap, idm)
    a_ego_after = idm_acceleration(ego_speed, target.leader_speed, target.leader_gap, idm)

    gain_followers = 0.0
    if math.isfinite(target.follower_gap):
        before = idm_acceleration(
            target.follower_speed, target.leader_speed,
            target.follower_gap + veh_len + target.leader_gap, idm)
        after = idm_acceleration(target.follower_speed, ego_speed, target.follower_gap, idm)
        gain_followers += after - before
    if math.isfinite(current.follower_gap):
        before = idm_acceleration(
            current.follower_speed, ego_speed, current.follower_gap, idm)
        after = idm_acceleration(
            current.follower_speed, current.leader_speed,
            current.follower_gap + veh_len + current.leader_gap, idm)
        gain_followers += after - before

    incentive = (a_ego_after - a_ego_before) + mobil.politeness * gain_followers
    return incentive > mobil.threshold
