"""Gravity-model destination choice.

A candidate j at distance D_j with attractiveness S_j is chosen with
probability proportional to S_j / D_j^beta. Zero distances are clamped to
EPSILON_DISTANCE because the weight is undefined at D = 0.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

import numpy as np

EPSILON_DISTANCE = 1.0  # meters


@dataclass(frozen=True)
class GravityParams:
    beta: float = 1.0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")


def gravity_probabilities(attractiveness, distances, params: GravityParams) -> np.ndarray:
    """Normalized choice probabilities over candidates.

    Invariant under scaling all attractiveness values by a positive constant.
    """
    s = np.asarray(attractiveness, dtype=np.float64)
    d = np.asarray(distances, dtype=np.float64)
    if s.size == 0:
        raise ValueError("candidate list is empty")
    if s.shape != d.shape:
        raise ValueError("attractiveness and distances differ in length")
    if np.any(s <= 0):
        raise ValueError("attractiveness must be positive")
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    d = np.maximum(d, EPSILON_DISTANCE)
    weights = s / d ** params.beta
    return weights / weights.sum()


def gravity_select(candidates, params: GravityParams, rng: random.Random):
    """Pick one (poi, distance) candidate; returns (poi, probability_vector)."""
    if not candidates:
        raise ValueError("candidate list is empty")
    probs = gravity_probabilities(
        [c[0].attractiveness for c in candidates],
        [c[1] for c in candidates],
        params,
    )
    r = rng.random()
    acc = 0.0
    for (poi, _), p in zip(candidates, probs):
        acc += p
        if r < acc:
            return poi, probs
    return candidates[-1][0], probs
