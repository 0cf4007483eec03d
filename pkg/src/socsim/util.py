"""Shared helpers: stable hashing, seeded RNG streams, cent arithmetic, sim clock."""

from __future__ import annotations

import hashlib
import math
import random

SECONDS_PER_HOUR = 3600
SECONDS_PER_DAY = 86400


def stable_hash64(*parts) -> int:
    """Deterministic 64-bit hash of the given parts, stable across processes.

    Python's builtin hash() is salted per process; this one is not, so it is
    safe to use for reproducible seeding and deterministic tie-breaking.
    """
    h = hashlib.sha256()
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "big")


def derive_rng(seed: int, *scope) -> random.Random:
    """A random.Random stream derived from a base seed and a scope label.

    Every agent (and every subsystem) gets its own stream so that execution
    order never affects the numbers anyone draws.
    """
    return random.Random(stable_hash64(seed, *scope))


def round_half_up(x: float) -> int:
    """Round to nearest integer, ties away from zero (for non-negative cents)."""
    if x < 0:
        return -math.floor(-x + 0.5)
    return math.floor(x + 0.5)


def cents(dollars: float) -> int:
    """Convert a dollar amount to integer cents, rounding half-up."""
    return round_half_up(dollars * 100)


def fmt_cents(amount: int) -> str:
    sign = "-" if amount < 0 else ""
    amount = abs(amount)
    return f"{sign}{amount // 100}.{amount % 100:02d}"


def hour_of_day(sim_time: float) -> float:
    return (sim_time % SECONDS_PER_DAY) / SECONDS_PER_HOUR


def day_index(sim_time: float) -> int:
    return int(sim_time // SECONDS_PER_DAY)


def is_weekday(sim_time: float) -> bool:
    # Day 0 is a Monday.
    return day_index(sim_time) % 7 < 5
