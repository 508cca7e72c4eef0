import math

import pytest
from hypothesis import given, strategies as st

from grmfuzz.scoring import (
    FrequencyMap,
    ScoringParams,
    adjusted_beta,
    commit_test_case,
    score_transition,
)

points = st.frozensets(st.integers(0, 31))


def brute_force(H, G, freq, p):
    total = 0.0
    for x in range(32):
        if x not in G:
            continue
        if x in H:
            total += p.alpha
        else:
            total += max(p.beta_w - freq.get(x, 0) * p.factor, p.alpha)
    return total


@given(points, points, st.dictionaries(st.integers(0, 31), st.integers(0, 10**6)))
def test_matches_per_point_loop(H, G, counts):
    freq = FrequencyMap()
    freq.counts.update(counts)
    p = ScoringParams()
    assert math.isclose(score_transition(H, G, freq, p).value, brute_force(H, G, counts, p), abs_tol=1e-9)


def test_oracle_values():
    p = ScoringParams(alpha=0.1, beta_w=1.0, factor=1e-5)
    freq = FrequencyMap()
    freq.counts[3] = 50_000
    s = score_transition({1}, {1, 2, 3}, freq, p)
    assert s.value == pytest.approx(0.1 + 1.0 + 0.5)
    assert s.new_points == frozenset({1, 2, 3})
    # the penalty floors at alpha
    freq.counts[3] = 10**9
    assert adjusted_beta(3, freq, p) == 0.1


@given(points, points)
def test_monotone_in_frequency(H, G):
    low, high = FrequencyMap(), FrequencyMap()
    for x in G:
        high.counts[x] = 10**4
    assert score_transition(H, G, high).value <= score_transition(H, G, low).value


def test_commit_counts_each_point_once():
    freq = FrequencyMap()
    commit_test_case([1, 1, 2], freq)
    commit_test_case([2], freq)
    assert freq[1] == 1 and freq[2] == 2 and freq[9] == 0
    assert FrequencyMap.from_csv(freq.to_csv()).counts == freq.counts


def test_params_validation():
    with pytest.raises(ValueError):
        ScoringParams(alpha=1.0, beta_w=1.0)
    with pytest.raises(ValueError):
        ScoringParams(factor=-1)
