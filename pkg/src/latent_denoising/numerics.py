"""Dense linear algebra, seeded randomness and scalar primitives.

Matrices are plain ``float64`` numpy arrays; every public function returns
finite values or raises.
"""
from __future__ import annotations

import numpy as np

from latent_denoising import kernels

EPS_NORM = 1e-12
EPS_KL = 1e-12


class NumericsError(ValueError):
    """Raised when a numerical precondition is violated."""


def label_hash(label: str) -> int:
    """64-bit FNV-1a of the UTF-8 bytes of ``label``."""
    return int(kernels.fnv1a64(label.encode("utf-8")))


class SeededRng:
    """Counter-based random stream keyed by ``(seed, stream_label)``.

    Uses Philox with the 128-bit key ``(seed, fnv1a64(label))`` so that the
    same pair reproduces the same draws on every platform, and different labels
    give unrelated streams.
    """

    def __init__(self, seed: int, stream_label: str = "root"):
        if not 0 <= int(seed) < 2**64:
            raise NumericsError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.stream_label = stream_label
        key = np.array([self.seed, label_hash(stream_label)], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def child(self, label: str) -> "SeededRng":
        return SeededRng(self.seed, f"{self.stream_label}/{label}")

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        return self.generator.uniform(low, high, size=size)

    def normal(self, size=None):
        return self.generator.standard_normal(size=size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, stream_label={self.stream_label!r})"


def softmax(values, temperature: float = 1.0) -> np.ndarray:
    """Temperature-scaled softmax computed with max subtraction."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise NumericsError("softmax of an empty sequence")
    if not temperature > 0:
        raise NumericsError(f"temperature must be positive, got {temperature}")
    z = x / temperature
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def l2_normalize(v) -> np.ndarray:
    """Scale a vector (or every row of a matrix) to unit Euclidean norm."""
    x = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    bad = np.flatnonzero(norms.reshape(-1) <= EPS_NORM)
    if bad.size:
        raise NumericsError(f"near-zero norm at index {int(bad[0])}")
    return x / norms


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= EPS_NORM or nb <= EPS_NORM:
        raise NumericsError("cosine of a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def kl_divergence(p, q) -> float:
    """KL(p || q) with the 0 log 0 = 0 convention."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise NumericsError(f"length mismatch: {p.shape} vs {q.shape}")
    if abs(p.sum() - 1.0) > 1e-9 or abs(q.sum() - 1.0) > 1e-9:
        raise NumericsError("inputs must sum to 1")
    support = p > 0
    if np.any(q[support] < EPS_KL):
        raise NumericsError("q vanishes where p has mass")
    ps, qs = p[support], q[support]
    return float(max(np.sum(ps * (np.log(ps) - np.log(qs))), 0.0))


def svd_values(m) -> np.ndarray:
    """Singular values in non-increasing order."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise NumericsError("svd_values needs a non-empty matrix")
    return np.linalg.svd(m, compute_uv=False)


def draw_gaussian(rng: SeededRng, dim: int, sigma: float) -> np.ndarray:
    if dim < 1:
        raise NumericsError(f"dim must be >= 1, got {dim}")
    if not sigma > 0:
        raise NumericsError(f"sigma must be positive, got {sigma}")
    return sigma * rng.normal(dim)


def sample_without_replacement(rng: SeededRng, weights, k: int) -> np.ndarray:
    """Draw ``k`` distinct indices by sequential weighted draws.

    After each draw the chosen index leaves the pool and the remaining weights
    are renormalized. Zero weights are never drawn.
    """
    w = np.ascontiguousarray(weights, dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise NumericsError("weights must be finite and non-negative")
    positive = int(np.count_nonzero(w > 0))
    if k < 0 or k > positive:
        raise NumericsError(f"cannot draw {k} indices from {positive} positive weights")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    uniforms = np.ascontiguousarray(rng.uniform(size=k), dtype=np.float64)
    return np.asarray(kernels.weighted_draws(w, uniforms), dtype=np.int64)
