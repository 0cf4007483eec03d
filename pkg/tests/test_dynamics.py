import math

import pytest

from socsim.urban.dynamics import (IdmParams, LaneNeighbors, MobilParams,
                                   idm_acceleration, mobil_lane_change)

INF = math.inf


def idm_oracle(v, v_lead, gap, p):
    """Straight transcription of the car-following law, kept separate from
    the implementation under test."""
    accel = p.a_max * (1 - (v / p.v0) ** p.delta)
    if math.isfinite(gap):
        s_star = p.s0 + v * p.T + v * (v - v_lead) / (2 * math.sqrt(p.a_max * p.b))
        s_star = max(s_star, p.s0)
        accel -= p.a_max * (s_star / gap) ** 2
    return min(max(accel, -p.b_emergency), p.a_max)


def test_equilibrium_at_desired_speed():
    p = IdmParams()
    assert idm_acceleration(p.v0, 0.0, INF, p) == pytest.approx(0.0, abs=1e-12)


def test_standing_start_free_flow_approaches_a_max():
    p = IdmParams()
    assert idm_acceleration(0.0, 0.0, INF, p) == pytest.approx(p.a_max)
    # With a finite but huge gap the minimum-gap term vanishes quadratically.
    assert idm_acceleration(0.0, 0.0, 1e9, p) == pytest.approx(p.a_max, abs=1e-9)


def test_documented_following_case():
    p = IdmParams(v0=30, T=1.5, a_max=0.73, b=1.67, s0=2, delta=4)
    a = idm_acceleration(10.0, 10.0, 20.0, p)
    # s* = 2 + 15 = 17; a = 0.73 (1 - (1/3)^4 - (17/20)^2)
    assert a == pytest.approx(0.73 * (1 - (1 / 3) ** 4 - (17 / 20) ** 2), abs=1e-12)
    assert a == pytest.approx(0.1936, abs=5e-5)
    assert a == pytest.approx(idm_oracle(10.0, 10.0, 20.0, p), abs=1e-12)


def test_matches_oracle_across_regimes():
    p = IdmParams()
    for v in (0.0, 5.0, 15.0, 29.0, 35.0):
        for v_lead in (0.0, 10.0, 30.0):
            for gap in (0.5, 2.0, 10.0, 100.0, INF):
                assert idm_acceleration(v, v_lead, gap, p) == pytest.approx(
                    idm_oracle(v, v_lead, gap, p), abs=1e-12)


def test_non_positive_gap_is_emergency():
    p = IdmParams()
    assert idm_acceleration(10.0, 0.0, 0.0, p) == -p.b_emergency
    assert idm_acceleration(10.0, 0.0, -3.0, p) == -p.b_emergency


def test_acceleration_clamped():
    p = IdmParams()
    a = idm_acceleration(30.0, 0.0, 0.5, p)
    assert a == -p.b_emergency


def test_bad_params_rejected():
    with pytest.raises(ValueError):
        IdmParams(v0=-1)
    with pytest.raises(ValueError):
        MobilParams(politeness=1.5)
    with pytest.raises(ValueError):
        MobilParams(b_safe=0)


def test_change_into_empty_lane_when_blocked():
    idm, mobil = IdmParams(), MobilParams()
    blocked = LaneNeighbors(leader_gap=6.0, leader_speed=2.0)
    empty = LaneNeighbors()
    assert mobil_lane_change(15.0, blocked, empty, idm, mobil) is True


def test_safety_veto():
    idm, mobil = IdmParams(), MobilParams()
    blocked = LaneNeighbors(leader_gap=6.0, leader_speed=2.0)
    # A fast follower right behind the slot would have to brake far beyond b_safe.
    tight = LaneNeighbors(follower_gap=1.0, follower_speed=30.0)
    assert mobil_lane_change(15.0, blocked, tight, idm, mobil) is False


def test_no_incentive_when_both_lanes_empty():
    idm, mobil = IdmParams(), MobilParams()
    empty = LaneNeighbors()
    assert mobil_lane_change(20.0, empty, empty, idm, mobil) is False
