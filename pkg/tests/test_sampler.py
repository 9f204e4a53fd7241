"""Candidate sets, FSD, mirostat and the per-query sampler."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inferkit.sampler import (
    STRATEGIES,
    AntiLm,
    MirostatState,
    Sampler,
    SamplerPolicy,
    estimate_zipf_exponent,
    fsd_random,
    fsd_score,
    min_p_set,
    mirostat_step,
    sample_from_set,
    temperature_scale,
    tfs_set,
    top_k_set,
    top_p_set,
    typical_set,
)
from inferkit.tensorcore import softmax
from oracles import brute_tfs, brute_top_p

P3 = np.array([0.5, 0.3, 0.2])


def random_probs(draw_floats):
    p = np.array(draw_floats, dtype=np.float64) + 1e-3
    return p / p.sum()


prob_vectors = st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=40).map(random_probs)


# -- top-k / top-p / min-p -------------------------------------------------------------


def test_top_k_examples():
    probs = np.array([0.1, 0.4, 0.2, 0.3])
    assert top_k_set(probs, 1).tolist() == [1]
    assert top_k_set(probs, 4).tolist() == [0, 1, 2, 3]
    assert top_k_set(probs, 99).tolist() == [0, 1, 2, 3]
    assert top_k_set(P3, 2).tolist() == [0, 1]


def test_top_k_tie_goes_to_lower_id():
    assert top_k_set(np.array([0.25, 0.25, 0.25, 0.25]), 2).tolist() == [0, 1]


def test_top_p_examples():
    assert top_p_set(P3, 0.7).tolist() == [0, 1]
    assert top_p_set(np.array([0.6, 0.4, 0.0]), 1.0).tolist() == [0, 1]


@given(prob_vectors, st.floats(0.01, 1.0))
@settings(max_examples=300, deadline=None)
def test_top_p_minimal(probs, p):
    got = top_p_set(probs, p).tolist()
    assert got == brute_top_p(probs.tolist(), p)
    mass = probs[got].sum()
    smallest = min(got, key=lambda i: (probs[i], -i))
    assert mass >= p - 1e-12 or len(got) == np.count_nonzero(probs)
    assert probs[got].sum() - probs[smallest] < p


@given(prob_vectors, st.floats(0.01, 1.0), st.floats(0.01, 1.0))
@settings(max_examples=200, deadline=None)
def test_top_p_nesting(probs, p1, p2):
    lo, hi = sorted((p1, p2))
    assert set(top_p_set(probs, lo)) <= set(top_p_set(probs, hi))


def test_min_p_examples():
    assert min_p_set(np.array([0.5, 0.3, 0.15, 0.05]), 0.2).tolist() == [0, 1, 2]
    assert min_p_set(np.array([0.4, 0.4, 0.2]), 1.0).tolist() == [0, 1]
    assert min_p_set(np.array([0.5, 0.3, 0.2, 0.0]), 1e-9).tolist() == [0, 1, 2]


@given(prob_vectors, st.floats(0.001, 1.0))
@settings(max_examples=300, deadline=None)
def test_min_p_threshold_exact(probs, alpha):
    got = set(min_p_set(probs, alpha).tolist())
    threshold = alpha * probs.max()
    assert got == {i for i, q in enumerate(probs) if q >= threshold}


@given(prob_vectors, st.floats(0.01, 1.0), st.floats(0.01, 1.0))
@settings(max_examples=200, deadline=None)
def test_min_p_anti_monotone(probs, a1, a2):
    lo, hi = sorted((a1, a2))
    assert set(min_p_set(probs, hi)) <= set(min_p_set(probs, lo))


# -- temperature ------------------------------------------------------------------------


def test_temperature_examples():
    logits = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(temperature_scale(logits, 1.0), softmax(logits))
    flat = temperature_scale(logits, 1000.0)
    assert flat.max() - flat.min() < 0.01
    assert temperature_scale(logits, 0.5).max() > softmax(logits).max()
    with pytest.raises(ValueError):
        temperature_scale(logits, 0.0)


@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=2, max_size=20), st.floats(0.05, 5), st.floats(0.05, 5))
@settings(max_examples=300, deadline=None)
def test_temperature_monotone(logits, t1, t2):
    if max(logits) - min(logits) < 1e-3:
        return
    lo, hi = sorted((t1, t2))
    assert temperature_scale(logits, lo).max() >= temperature_scale(logits, hi).max() - 1e-12


# -- typical / tfs --------------------------------------------------------------------------


def test_typical_examples():
    assert typical_set(P3, 0.7).tolist() == [0, 1]
    assert typical_set(P3, 1.0).tolist() == [0, 1, 2]
    assert typical_set(np.full(5, 0.2), 0.5).tolist() == [0, 1, 2]


def test_tfs_examples():
    assert tfs_set(P3, 1.0).tolist() == [0, 1, 2]
    assert tfs_set(np.array([0.7, 0.3]), 0.5).tolist() == [0, 1]


@pytest.mark.parametrize("z", [0.3, 0.5, 0.7, 0.9, 0.95, 0.99])
def test_tfs_geometric(z):
    probs = 0.5 ** np.arange(1, 9)
    probs = probs / probs.sum()
    assert tfs_set(probs, z).tolist() == brute_tfs(probs.tolist(), z)


@given(prob_vectors, st.floats(0.05, 0.99))
@settings(max_examples=300, deadline=None)
def test_tfs_matches_oracle(probs, z):
    if len(probs) < 3 or np.abs(np.diff(np.sort(probs)[::-1], n=2)).sum() < 1e-9:
        return
    assert tfs_set(probs, z).tolist() == brute_tfs(probs.tolist(), z)


@pytest.mark.parametrize("fn,arg", [(top_k_set, 3), (top_p_set, 0.5), (typical_set, 0.5), (min_p_set, 0.5), (tfs_set, 0.5)])
@given(probs=prob_vectors)
@settings(max_examples=100, deadline=None)
def test_sets_never_empty(fn, arg, probs):
    assert len(fn(probs, arg)) >= 1


# -- sampling -----------------------------------------------------------------------------------


def test_singleton_and_reproducible(rng):
    assert sample_from_set(P3, [2], rng) == 2
    a = [sample_from_set(np.full(6, 1 / 6), range(6), np.random.default_rng(5)) for _ in range(3)]
    b = [sample_from_set(np.full(6, 1 / 6), range(6), np.random.default_rng(5)) for _ in range(3)]
    assert a == b
    assert sample_from_set(P3, [1, 2], None, greedy=True) == 1


def test_sample_frequencies():
    rng = np.random.default_rng(0)
    probs = np.array([0.1, 0.4, 0.05, 0.25, 0.2])
    ids = [0, 1, 3, 4]
    draws = np.bincount([sample_from_set(probs, ids, rng) for _ in range(100_000)], minlength=5) / 100_000
    expect = np.zeros(5)
    expect[ids] = probs[ids] / probs[ids].sum()
    assert 0.5 * np.abs(draws - expect).sum() < 0.01


# -- FSD ----------------------------------------------------------------------------------------


def test_anti_lm_bigram_counts():
    anti = AntiLm(3).extend([0, 1, 0, 1, 0])
    np.testing.assert_allclose(anti.probs(), np.array([0.5, 2.5, 0.5]) / 3.5)


def test_fsd_alpha_flips_repeated_token():
    lm = np.array([0.3, 0.5, 0.2])
    anti = AntiLm(3).extend([0, 1, 0, 1, 0]).probs()
    assert fsd_score(lm, anti, 0.0, 3) == 1
    assert fsd_score(lm, anti, 0.2, 3) == 1
    assert fsd_score(lm, anti, 0.3, 3) == 0


def test_fsd_alpha_one_uniform_anti():
    lm = np.array([0.1, 0.5, 0.4])
    assert fsd_score(lm, np.full(3, 1 / 3), 1.0, 2) == 1


@given(prob_vectors, prob_vectors, st.integers(1, 10))
@settings(max_examples=200, deadline=None)
def test_fsd_alpha_zero_is_greedy(lm, anti, k):
    if len(anti) != len(lm):
        anti = np.full(len(lm), 1 / len(lm))
    assert fsd_score(lm, anti, 0.0, k) == int(np.argsort(-lm, kind="stable")[0])


def test_fsd_random_modes():
    lm = np.array([0.3, 0.3, 0.2, 0.2])
    anti = np.full(4, 0.25)
    greedy = fsd_score(lm, anti, 0.4, 4)
    for seed in range(5):
        assert fsd_random(lm, anti, 0.4, 4, step=3, t_random=2, rng=np.random.default_rng(seed)) == greedy
    first = [fsd_random(lm, anti, 0.4, 4, 1, 2, np.random.default_rng(9)) for _ in range(3)]
    assert len(set(first)) == 1


def test_fsd_random_t_zero_equals_fsd():
    pol_a = SamplerPolicy("fsd", top_k=5, alpha=0.4)
    pol_b = SamplerPolicy("fsd_random", top_k=5, alpha=0.4, t_random=0, seed=3)
    rng = np.random.default_rng(1)
    a, b = Sampler(pol_a, 12, [1, 2]), Sampler(pol_b, 12, [1, 2])
    for _ in range(30):
        logits = rng.standard_normal(12)
        assert a.choose(logits) == b.choose(logits)


# -- mirostat -------------------------------------------------------------------------------------


def test_mirostat_deterministic_distribution():
    logits = np.full(10, -1e9)
    logits[4] = 0.0
    state = MirostatState(3.0, 0.1)
    tok, state = mirostat_step(logits, state, np.random.default_rng(0))
    assert tok == 4 and state.surprises == [0.0]


def test_mirostat_zero_rate_keeps_mu():
    state = MirostatState(2.5, 0.0)
    assert state.mu == 5.0
    rng = np.random.default_rng(0)
    for _ in range(20):
        mirostat_step(rng.standard_normal(50), state, rng)
    assert state.mu == 5.0


def test_zipf_exponent_recovered():
    ranks = np.arange(1, 201)
    p = ranks**-1.3
    assert abs(estimate_zipf_exponent(p / p.sum()) - 1.3) < 1e-9


def mirostat_mean_surprise(target=3.0, steps=500, seed=0):
    ranks = np.arange(1, 1001, dtype=np.float64)
    logits = -1.1 * np.log(ranks)
    state = MirostatState(target, 0.1)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        mirostat_step(logits, state, rng)
    return float(np.mean(state.surprises))


def test_mirostat_converges():
    assert abs(mirostat_mean_surprise() - 3.0) <= 0.2


# -- policy and sampler ------------------------------------------------------------------------------


def test_policy_validation():
    with pytest.raises(ValueError):
        SamplerPolicy("beam")
    with pytest.raises(ValueError):
        SamplerPolicy(top_p=0)
    with pytest.raises(ValueError):
        SamplerPolicy("fsd", alpha=1.5)
    with pytest.raises(ValueError):
        SamplerPolicy(temperature=-1)


def test_policy_from_mapping_aliases():
    pol = SamplerPolicy.from_mapping({"strategy": "mirostat", "mirostat_tau": "4", "mirostat_eta": "0.2", "temp": "0.7"})
    assert (pol.target_surprise, pol.learning_rate, pol.temperature) == (4.0, 0.2, 0.7)
    with pytest.raises(ValueError):
        SamplerPolicy.from_mapping({"colour": "red"})


def test_fsd_alpha_zero_greedy_on_random_prefixes():
    rng = np.random.default_rng(42)
    for _ in range(100):
        prefix = rng.integers(0, 20, size=int(rng.integers(1, 12))).tolist()
        logits = rng.standard_normal(20)
        fsd = Sampler(SamplerPolicy("fsd", alpha=0.0, top_k=5), 20, prefix)
        greedy = Sampler(SamplerPolicy("greedy"), 20, prefix)
        assert fsd.choose(logits) == greedy.choose(logits)


quantized_logits = st.lists(st.integers(-64, 64), min_size=3, max_size=16).map(lambda v: np.array(v) / 8.0)


@pytest.mark.parametrize("strategy", STRATEGIES)
@given(logits=quantized_logits, shift=st.integers(-20, 20), seed=st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_shift_invariance(strategy, logits, shift, seed):
    pol = SamplerPolicy(strategy, top_k=3, alpha=0.3 if strategy != "min_p" else 0.2, seed=seed, t_random=2)
    a = Sampler(pol, len(logits), [0, 1])
    b = Sampler(pol, len(logits), [0, 1])
    pa, ca = a.candidates(logits)
    pb, cb = b.candidates(logits + shift)
    assert ca.tolist() == cb.tolist()
    assert [a.choose(logits) for _ in range(3)] == [b.choose(logits + shift) for _ in range(3)]


def test_sampler_streams_differ():
    pol = SamplerPolicy("temperature", seed=1)
    logits = np.zeros(50)
    draws = {Sampler(pol, 50, stream=s).choose(logits) for s in range(10)}
    assert len(draws) > 1

