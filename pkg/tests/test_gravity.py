import math
import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

from socsim.urban.gravity import EPSILON_DISTANCE, GravityParams, gravity_probabilities, gravity_select


def oracle_probs(attract, dists, beta):
    """Independent scalar evaluation of the choice rule."""
    weights = [s / max(d, EPSILON_DISTANCE) ** beta for s, d in zip(attract, dists)]
    total = sum(weights)
    return [w / total for w in weights]


def test_single_candidate_is_certain():
    p = gravity_probabilities([3.0], [100.0], GravityParams(beta=1.0))
    assert p.tolist() == [1.0]


def test_symmetric_candidates_split_evenly():
    p = gravity_probabilities([1.0, 1.0], [250.0, 250.0], GravityParams(beta=1.0))
    assert np.allclose(p, [0.5, 0.5], atol=1e-15)


def test_example_weights():
    # S=[2,1], D=[1,2], beta=1 -> weights 2 and 0.5 -> P=[0.8, 0.2]
    p = gravity_probabilities([2.0, 1.0], [1.0, 2.0], GravityParams(beta=1.0))
    assert np.allclose(p, [0.8, 0.2], atol=1e-12)
    assert np.allclose(p, oracle_probs([2, 1], [1, 2], 1.0), atol=1e-15)


def test_matches_oracle_on_random_instances():
    rng = random.Random(7)
    for _ in range(300):
        n = rng.randrange(1, 50)
        attract = [rng.uniform(0.01, 50) for _ in range(n)]
        dists = [rng.uniform(1, 5000) for _ in range(n)]
        beta = rng.uniform(0, 3)
        p = gravity_probabilities(attract, dists, GravityParams(beta=beta))
        assert abs(p.sum() - 1.0) < 1e-12
        assert np.allclose(p, oracle_probs(attract, dists, beta), atol=1e-12)


def test_attractiveness_scale_invariance():
    attract = [1.0, 4.0, 2.5]
    dists = [10.0, 40.0, 25.0]
    base = gravity_probabilities(attract, dists, GravityParams())
    scaled = gravity_probabilities([a * 137.5 for a in attract], dists, GravityParams())
    assert np.allclose(base, scaled, atol=1e-15)


def test_zero_distance_clamped_to_epsilon():
    p = gravity_probabilities([1.0, 1.0], [0.0, EPSILON_DISTANCE], GravityParams(beta=1.0))
    assert np.allclose(p, [0.5, 0.5], atol=1e-15)


def test_empty_candidates_rejected():
    with pytest.raises(ValueError):
        gravity_probabilities([], [], GravityParams())

    class P:
        attractiveness = 1.0

    with pytest.raises(ValueError):
        gravity_select([], GravityParams(), random.Random(0))


def test_negative_beta_rejected():
    with pytest.raises(ValueError):
        GravityParams(beta=-0.1)


def test_empirical_frequencies_within_three_sigma():
    class P:
        def __init__(self, s):
            self.attractiveness = s

    cands = [(P(2.0), 100.0), (P(1.0), 200.0), (P(4.0), 50.0)]
    rng = random.Random(123)
    n = 100_000
    counts = [0, 0, 0]
    probs = None
    for _ in range(n):
        poi, probs = gravity_select(cands, GravityParams(beta=1.0), rng)
        counts[[c[0] for c in cands].index(poi)] += 1
    for k, p in zip(counts, probs):
        sigma = math.sqrt(n * p * (1 - p))
        assert abs(k - n * p) <= 3 * sigma


@given(st.lists(st.tuples(st.floats(0.01, 100), st.floats(0.0, 1e4)),
                min_size=1, max_size=50),
       st.floats(0, 4))
def test_probability_vector_properties(pairs, beta):
    attract = [a for a, _ in pairs]
    dists = [d for _, d in pairs]
    p = gravity_probabilities(attract, dists, GravityParams(beta=beta))
    assert abs(p.sum() - 1.0) < 1e-12
    assert (p >= 0).all()
