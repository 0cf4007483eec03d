"""Vectorized per-tick vehicle kernels.

Two interchangeable backends compute identical math: numba @njit kernels
when numba is importable, and a pure-numpy path otherwise. Setting the
environment variable SOCSIM_FORCE_NUMPY=1 forces the numpy path; the
`socsim bench env --backend both` command compares the two.
"""

from __future__ import annotations

import os

import numpy as np

FORCE_NUMPY = os.environ.get("SOCSIM_FORCE_NUMPY", "0") == "1"

_INF = np.inf


def _idm_accel_numpy(v, v_lead, gap, v0, T, a_max, b, s0, delta, b_emergency):
    accel = a_max * (1.0 - (v / v0) ** delta)
    dv = v - v_lead
    sqrt_ab = 2.0 * np.sqrt(a_max * b)
    s_star = np.maximum(s0 + v * T + v * dv / sqrt_ab, s0)
    finite = np.isfinite(gap)
    safe_gap = np.where(finite & (gap > 0), gap, 1.0)
    brake = np.where(finite, a_max * (s_star / safe_gap) ** 2, 0.0)
    accel = accel - brake
    accel = np.clip(accel, -b_emergency, a_max)
    return np.where(finite & (gap <= 0), -b_emergency, accel)


def _integrate_numpy(pos, v, accel, dt):
    v_next = v + accel * dt
    stopping = v_next < 0.0
    # Ballistic advance; vehicles that would reverse stop exactly at v = 0.
    adv = v * dt + 0.5 * accel * dt * dt
    with np.errstate(divide="ignore", invalid="ignore"):
        adv_stop = np.where(accel < 0, -(v * v) / (2.0 * accel), 0.0)
    adv = np.where(stopping, adv_stop, adv)
    pos_next = pos + np.maximum(adv, 0.0)
    return pos_next, np.maximum(v_next, 0.0)


if not FORCE_NUMPY:
    try:
        from numba import njit
    except ImportError:
        njit = None
else:
    njit = None

if njit is not None:

    @njit(cache=True)
    def _idm_accel_numba(v, v_lead, gap, v0, T, a_max, b, s0, delta, b_emergency):  # pragma: no cover - timed via bench
        n = v.shape[0]
        out = np.empty(n, dtype=np.float64)
        sqrt_ab = 2.0 * np.sqrt(a_max * b)
        for i in range(n):
            g = gap[i]
            if np.isfinite(g) and g <= 0.0:
                out[i] = -b_emergency
                continue
            a = a_max * (1.0 - (v[i] / v0) ** delta)
            if np.isfinite(g):
                s_star = s0 + v[i] * T + v[i] * (v[i] - v_lead[i]) / sqrt_ab
                if s_star < s0:
                    s_star = s0
                a -= a_max * (s_star / g) ** 2
            if a < -b_emergency:
                a = -b_emergency
            elif a > a_max:
                a = a_max
            out[i] = a
        return out

    @njit(cache=True)
    def _integrate_numba(pos, v, accel, dt):  # pragma: no cover - timed via bench
        n = pos.shape[0]
        pos_next = np.empty(n, dtype=np.float64)
        v_next = np.empty(n, dtype=np.float64)
        for i in range(n):
            vn = v[i] + accel[i] * dt
            if vn < 0.0:
                adv = 0.0
                if accel[i] < 0.0:
                    adv = -(v[i] * v[i]) / (2.0 * accel[i])
                vn = 0.0
            else:
                adv = v[i] * dt + 0.5 * accel[i] * dt * dt
            if adv < 0.0:
                adv = 0.0
            pos_next[i] = pos[i] + adv
            v_next[i] = vn
        return pos_next, v_next

    BACKEND = "numba"
    idm_accel_batch = _idm_accel_numba
    integrate_batch = _integrate_numba
else:
    BACKEND = "numpy"
    idm_accel_batch = _idm_accel_numpy
    integrate_batch = _integrate_numpy


def backend_name() -> str:
    return BACKEND


def get_backends() -> dict:
    """Both backends when available, for side-by-side benchmarking."""
    out = {"numpy": (_idm_accel_numpy, _integrate_numpy)}
    if njit is not None:
        out["numba"] = (_idm_accel_numba, _integrate_numba)
    return out


def select_backend(name: str) -> str:
    """Rebind the module-level kernels to one backend (for benchmarks)."""
    global idm_accel_batch, integrate_batch, BACKEND
    backends = get_backends()
    if name not in backends:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(backends)}")
    idm_accel_batch, integrate_batch = backends[name]
    BACKEND = name
    return name


def warmup() -> None:
    """Trigger JIT compilation outside any timed region."""
    v = np.array([10.0, 12.0])
    g = np.array([30.0, _INF])
    idm_accel_batch(v, v * 0.9, g, 30.0, 1.5, 0.73, 1.67, 2.0, 4.0, 8.0)
    integrate_batch(np.zeros(2), v, np.full(2, -1.0), 1.0)
