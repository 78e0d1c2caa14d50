import subprocess
import sys
from itertools import permutations

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latent_denoising.numerics import (
    NumericsError,
    SeededRng,
    cosine,
    draw_gaussian,
    kl_divergence,
    l2_normalize,
    sample_without_replacement,
    softmax,
    svd_values,
)

mpmath.mp.dps = 50
finite = st.floats(-1e3, 1e3, allow_nan=False)


def enumerate_sequential(weights, k):
    """Exact probability of every ordered draw of the sequential process."""
    out = {}
    for order in permutations(range(len(weights)), k):
        p, pool = mpmath.mpf(1), [mpmath.mpf(w) for w in weights]
        for i in order:
            total = sum(pool)
            if pool[i] == 0:
                p = 0
                break
            p *= pool[i] / total
            pool[i] = 0
        out[order] = p
    return out


# softmax

def test_softmax_constant_input_is_uniform():
    np.testing.assert_allclose(softmax([2.5, 2.5, 2.5], 0.3), [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_single_element():
    assert softmax([5.0], 1.0).tolist() == [1.0]


def test_softmax_matches_extended_precision():
    e = [mpmath.exp(mpmath.mpf(x) / mpmath.mpf("0.10")) for x in (1.0, 0.0)]
    expected = [float(v / sum(e)) for v in e]
    np.testing.assert_allclose(softmax([1.0, 0.0], 0.10), expected, rtol=1e-15)


@pytest.mark.parametrize("values,tau", [([], 1.0), ([1.0], 0.0), ([1.0], -2.0)])
def test_softmax_rejects_bad_input(values, tau):
    with pytest.raises(NumericsError):
        softmax(values, tau)


@given(arrays(np.float64, st.integers(1, 30), elements=finite), st.floats(1e-3, 1e3))
def test_softmax_sums_to_one(values, tau):
    p = softmax(values, tau)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12


# normalization and cosine

def test_l2_normalize_345():
    np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8], rtol=0, atol=1e-16)


def test_l2_normalize_unit_vector_is_fixed():
    v = np.array([0.0, 1.0, 0.0])
    assert np.array_equal(l2_normalize(v), v)


def test_l2_normalize_random_has_unit_norm(np_rng):
    v = np_rng.normal(size=8)
    out = l2_normalize(v)
    assert abs(float(mpmath.sqrt(mpmath.fsum(mpmath.mpf(x) ** 2 for x in out))) - 1) <= 1e-12
    assert np.allclose(out * np.linalg.norm(v), v)


def test_l2_normalize_names_offending_row():
    with pytest.raises(NumericsError, match="index 1"):
        l2_normalize(np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_cosine_examples():
    assert cosine([1, 0], [0, 1]) == 0
    v = np.array([0.3, -1.2, 2.0])
    assert cosine(v, v) == pytest.approx(1.0, abs=1e-15)
    a, b = [1, 2, 3], [4, 5, 6]
    dot = mpmath.fsum(mpmath.mpf(x) * y for x, y in zip(a, b))
    expected = dot / (mpmath.sqrt(mpmath.fsum(x * x for x in a)) * mpmath.sqrt(mpmath.fsum(y * y for y in b)))
    assert cosine(a, b) == pytest.approx(float(expected), rel=1e-15)


def test_cosine_rejects_zero_vector():
    with pytest.raises(NumericsError):
        cosine([0.0, 0.0], [1.0, 0.0])


@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite))
def test_cosine_in_range(a, b):
    if np.linalg.norm(a) > 1e-6 and np.linalg.norm(b) > 1e-6:
        assert -1.0 <= cosine(a, b) <= 1.0


# KL

def test_kl_identical_is_zero():
    p = np.array([0.2, 0.5, 0.3])
    assert kl_divergence(p, p) == 0.0
    assert kl_divergence([1.0, 0.0], [1.0, 0.0]) == 0.0


def test_kl_direct_summation():
    expected = 0.7 * mpmath.log(mpmath.mpf("0.7") / mpmath.mpf("0.5")) + 0.3 * mpmath.log(mpmath.mpf("0.3") / mpmath.mpf("0.5"))
    assert kl_divergence([0.7, 0.3], [0.5, 0.5]) == pytest.approx(float(expected), rel=1e-14)


def test_kl_support_violation():
    with pytest.raises(NumericsError):
        kl_divergence([0.5, 0.5], [1.0, 0.0])


@given(arrays(np.float64, st.integers(1, 12), elements=st.one_of(st.just(0.0), st.floats(1e-6, 1))))
def test_kl_self_is_exactly_zero(w):
    if w.sum() > 0:
        p = w / w.sum()
        if abs(p.sum() - 1) <= 1e-9:
            assert kl_divergence(p, p) == 0.0


# SVD

def test_svd_examples():
    np.testing.assert_allclose(svd_values(np.eye(3)), [1, 1, 1])
    np.testing.assert_allclose(svd_values(np.diag([3.0, 2.0])), [3, 2])


def test_svd_matches_gram_eigenvalues(np_rng):
    m = np_rng.normal(size=(5, 3))
    oracle = np.sqrt(np.clip(np.linalg.eigvalsh(m.T @ m), 0, None))[::-1]
    np.testing.assert_allclose(svd_values(m), oracle, rtol=1e-10)


@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=st.floats(-100, 100)))
def test_svd_descending_and_preserves_frobenius(m):
    s = svd_values(m)
    assert s.shape == (min(m.shape),)
    assert np.all(np.diff(s) <= 0) and np.all(s >= 0)
    fro = np.sum(m * m)
    assert abs(np.sum(s * s) - fro) <= 1e-8 * max(fro, 1e-300)


# RNG and Gaussian draws

def test_rng_reproducible_and_label_sensitive():
    a = SeededRng(3, "x").uniform(size=5)
    assert np.array_equal(a, SeededRng(3, "x").uniform(size=5))
    assert not np.array_equal(a, SeededRng(3, "y").uniform(size=5))
    assert not np.array_equal(a, SeededRng(4, "x").uniform(size=5))


def test_rng_frozen_golden_values():
    values = SeededRng(0, "golden").uniform(size=3).tolist()
    assert values == GOLDEN_UNIFORMS


def test_rng_identical_across_processes():
    code = "from latent_denoising.numerics import SeededRng; print(SeededRng(9, 'p').normal(4).tobytes().hex())"
    outs = {subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout for _ in range(2)}
    assert len(outs) == 1
    assert outs.pop().strip() == SeededRng(9, "p").normal(4).tobytes().hex()


def test_rng_rejects_out_of_range_seed():
    with pytest.raises(NumericsError):
        SeededRng(-1)


def test_draw_gaussian_statistics():
    n = 10**6
    x = draw_gaussian(SeededRng(1, "gauss"), n, 1.0)
    assert abs(x.mean()) <= 4 / np.sqrt(n)
    assert abs(x.var() - 1.0) <= 0.02


def test_draw_gaussian_deterministic_and_scaled():
    a = draw_gaussian(SeededRng(2, "g"), 1000, 1.0)
    assert np.array_equal(a, draw_gaussian(SeededRng(2, "g"), 1000, 1.0))
    b = draw_gaussian(SeededRng(2, "g"), 1000, 2.0)
    assert np.var(b) / np.var(a) == pytest.approx(4.0, rel=1e-12)


@pytest.mark.parametrize("dim,sigma", [(0, 1.0), (3, 0.0), (3, -1.0)])
def test_draw_gaussian_rejects(dim, sigma):
    with pytest.raises(NumericsError):
        draw_gaussian(SeededRng(0), dim, sigma)


# sampling without replacement

def test_sampling_uniform_symmetry():
    rng = SeededRng(0, "sym")
    hits = sum(int(sample_without_replacement(rng, [1.0, 1.0], 1)[0] == 0) for _ in range(100_000))
    assert abs(hits / 100_000 - 0.5) <= 0.01


def test_sampling_degenerate_weights():
    rng = SeededRng(0, "deg")
    assert all(sample_without_replacement(rng, [1.0, 0.0, 0.0], 1)[0] == 0 for _ in range(200))


def test_sampling_pairwise_inclusion_matches_enumeration():
    weights = [4.0, 3.0, 2.0, 1.0]
    exact = enumerate_sequential(weights, 2)
    pair_exact = {}
    for order, p in exact.items():
        key = tuple(sorted(order))
        pair_exact[key] = pair_exact.get(key, 0) + p
    rng = SeededRng(0, "pairs")
    trials = 100_000
    counts = {}
    for _ in range(trials):
        key = tuple(sorted(sample_without_replacement(rng, weights, 2).tolist()))
        counts[key] = counts.get(key, 0) + 1
    for key, p in pair_exact.items():
        assert abs(counts.get(key, 0) / trials - float(p)) <= 0.005


def test_sampling_rejects_large_k():
    with pytest.raises(NumericsError):
        sample_without_replacement(SeededRng(0), [1.0, 0.0], 2)


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(0, 10)), st.integers(0, 64), st.data())
def test_sampling_returns_distinct_positive_indices(w, seed, data):
    positive = int(np.count_nonzero(w > 0))
    k = data.draw(st.integers(0, positive))
    idx = sample_without_replacement(SeededRng(seed, "prop"), w, k)
    assert len(idx) == k == len(set(idx.tolist()))
    assert np.all(w[idx] > 0)


GOLDEN_UNIFORMS = [0.9534231672089132, 0.6896380632016739, 0.33615321579011015]
