import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import ortho_group

from latent_denoising.analysis import (
    AnalysisReport,
    FeatureDump,
    analyze,
    attention_entropy,
    effective_rank,
    knn_probe,
    linear_cka,
    mean_pool_visual,
    singular_spectrum,
    text_to_visual_entropy,
)
from latent_denoising.numerics import NumericsError, svd_values
from oracles import gram_hsic_cka


def blobs(n_per=100, seed=0):
    rng = np.random.default_rng(seed)
    centers = np.array([[10.0, 0, 0, 0], [0, 10.0, 0, 0], [0, 0, 10.0, 0]])
    x = np.concatenate([c + rng.normal(scale=0.5, size=(n_per, 4)) for c in centers])
    y = np.repeat(np.arange(3), n_per)
    perm = rng.permutation(len(y))
    return x[perm], y[perm]


def with_spectrum(values, rows=6, cols=5, seed=0):
    u = ortho_group.rvs(rows, random_state=seed)[:, : len(values)]
    v = ortho_group.rvs(cols, random_state=seed + 1)[:, : len(values)]
    return u @ np.diag(values) @ v.T


# CKA

def test_cka_self_and_rotation(np_rng):
    x = np_rng.normal(size=(20, 6))
    assert abs(linear_cka(x, x) - 1.0) <= 1e-12
    r = ortho_group.rvs(6, random_state=3)
    assert abs(linear_cka(x, x @ r) - 1.0) <= 1e-10


def test_cka_matches_hsic_oracle(np_rng):
    for _ in range(5):
        x, y = np_rng.normal(size=(20, 3)), np_rng.normal(size=(20, 5))
        assert abs(linear_cka(x, y) - gram_hsic_cka(x, y)) <= 1e-10


@given(st.integers(0, 10_000))
def test_cka_symmetric_scale_invariant_bounded(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(12, 4)), rng.normal(size=(12, 3))
    value = linear_cka(x, y)
    assert 0.0 <= value <= 1.0
    assert abs(value - linear_cka(y, x)) <= 1e-12
    assert abs(value - linear_cka(3.7 * x, y)) <= 1e-10


def test_cka_errors(np_rng):
    with pytest.raises(NumericsError):
        linear_cka(np.ones((5, 3)), np_rng.normal(size=(5, 3)))
    with pytest.raises(NumericsError):
        linear_cka(np_rng.normal(size=(5, 3)), np_rng.normal(size=(4, 3)))


# kNN

def test_knn_separable_blobs():
    x, y = blobs()
    assert knn_probe(x, y) == 1.0


def test_knn_chance_level():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(400, 16))
    y = rng.integers(0, 4, size=400)
    assert abs(knn_probe(x, y) - 0.25) <= 0.06


def test_knn_duplicates_k1():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(33, 5))
    y = rng.integers(0, 3, size=33)
    # 33 is coprime to 5, so each point and its copy land in different folds
    assert knn_probe(np.vstack([x, x]), np.concatenate([y, y]), k=1) == 1.0


def test_knn_deterministic_and_clamps_k(caplog):
    x, y = blobs(4)
    assert knn_probe(x, y, k=50) == knn_probe(x, y, k=50)
    assert "exceeds" in caplog.text


def test_knn_vote_tie_goes_to_smaller_label():
    # folds by parity; with k=2 several queries get one vote for 0 and one for 1.
    # Resolving those ties to label 0 gives (3/3 + 1/3) / 2; resolving to 1 would give 1/2
    x = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 0.0], [1.0, -1.0], [-1.0, 0.0], [-1.0, 0.0]])
    y = np.array([0, 1, 0, 0, 1, 1])
    assert knn_probe(x, y, k=2, folds=2) == pytest.approx(2 / 3, abs=1e-15)


def test_knn_needs_rows():
    with pytest.raises(ValueError):
        knn_probe(np.ones((3, 2)), np.zeros(3, int), folds=5)


# effective rank and spectra

def test_effective_rank_closed_forms():
    assert abs(effective_rank(with_spectrum([1.0, 1.0, 1.0])) - 3.0) <= 1e-9
    assert abs(effective_rank(np.outer(np.arange(1.0, 6.0), np.arange(1.0, 4.0))) - 1.0) <= 1e-9
    assert abs(effective_rank(with_spectrum([2.0, 1.0, 1.0])) - 2**1.5) <= 1e-9


@given(st.integers(0, 10_000))
def test_effective_rank_bounds_and_scale(seed):
    m = np.random.default_rng(seed).normal(size=(7, 4))
    r = effective_rank(m)
    assert 1.0 - 1e-12 <= r <= 4.0 + 1e-12
    assert abs(r - effective_rank(5 * m)) <= 1e-10


def test_zero_matrix_errors():
    with pytest.raises(NumericsError):
        effective_rank(np.zeros((3, 3)))
    with pytest.raises(NumericsError):
        singular_spectrum(np.zeros((3, 3)))


def test_spectrum_examples(np_rng):
    np.testing.assert_allclose(singular_spectrum(np.eye(4), normalize=True), [1, 1, 1, 1])
    np.testing.assert_allclose(singular_spectrum(np.diag([4.0, 2.0, 1.0]), normalize=True), [1, 0.5, 0.25])
    m = np_rng.normal(size=(10, 6))
    assert np.array_equal(singular_spectrum(m), svd_values(m))


# entropy and pooling

def test_attention_entropy_examples():
    assert abs(attention_entropy(np.full(576, 1 / 576)) - math.log(576)) <= 1e-9
    assert attention_entropy([0, 1, 0]) == 0.0
    assert attention_entropy([0.5, 0.25, 0.25]) == pytest.approx(1.5 * math.log(2), abs=1e-15)
    with pytest.raises(ValueError):
        attention_entropy([1.2, -0.2])


def test_uniform_maximizes_entropy(np_rng):
    top = attention_entropy(np.full(20, 0.05))
    for _ in range(100):
        w = np.full(20, 0.05) + np_rng.normal(scale=0.01, size=20)
        w = np.clip(w, 0, None)
        w /= w.sum()
        assert attention_entropy(w) <= top + 1e-12


def test_text_to_visual_entropy():
    attn = np.zeros((2, 6, 6))
    attn[:, 4:, :4] = 0.2
    attn[:, 4:, 4:] = 0.1
    assert text_to_visual_entropy(attn, 4) == pytest.approx(math.log(4), abs=1e-12)
    with pytest.raises(ValueError):
        text_to_visual_entropy(attn, 6)


def test_mean_pool_examples(np_rng):
    v = np.array([1.0, -2.0])
    assert np.array_equal(mean_pool_visual(v[None]), v)
    assert np.array_equal(mean_pool_visual(np.stack([v, -v])), [0.0, 0.0])
    m = np_rng.normal(size=(3, 2))
    np.testing.assert_allclose(mean_pool_visual(m), [(m[0, j] + m[1, j] + m[2, j]) / 3 for j in range(2)], rtol=1e-15)
    with pytest.raises(ValueError):
        mean_pool_visual(np.zeros((0, 2)))


# driver

def test_feature_dump_validates_rows():
    with pytest.raises(ValueError):
        FeatureDump([(0, np.ones((3, 2)))], np.zeros(4))


def test_analyze_modes():
    x, y = blobs(20)
    dump = FeatureDump([(0, x), (1, x[:, :2])], y, "blobs")
    assert analyze(dump, "cka", dump).per_layer[1]["cka"] == pytest.approx(1.0, abs=1e-12)
    assert analyze(dump, "knn").per_layer[0]["knn"] == 1.0
    report = analyze(dump, "rank")
    assert isinstance(report, AnalysisReport) and 1.0 <= report.per_layer[1]["effective_rank"] <= 2.0
    spectra = analyze(dump, "spectrum").spectra
    assert spectra[0][0] == 1.0 and spectra[0] == sorted(spectra[0], reverse=True)
    assert analyze(dump, "knn").to_json_dict()["metadata"]["source"] == "blobs"


def test_analyze_errors():
    x, y = blobs(10)
    dump = FeatureDump([(0, x)], y)
    with pytest.raises(ValueError):
        analyze(dump, "cka")
    with pytest.raises(ValueError):
        analyze(dump, "cka", FeatureDump([(0, x[:5])], y[:5]))
    with pytest.raises(ValueError):
        analyze(dump, "tsne")
