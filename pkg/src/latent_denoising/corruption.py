"""Saliency-guided corruption of projected visual tokens.

High-saliency patches are preferentially noised (soft corruption), the
low-saliency remainder preferentially masked (hard corruption). Noise strengths
and noise vectors are drawn once per plan and stored, so applying a plan is a
pure function.
"""
from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np

from latent_denoising.numerics import (
    NumericsError,
    SeededRng,
    sample_without_replacement,
    softmax,
)

SALIENCY_MODES = ("cls_attention", "received_attention", "feature_surrogate")


class CorruptionError(ValueError):
    pass


@dataclass(frozen=True)
class SaliencyScores:
    scores: np.ndarray
    mode: str

    def __post_init__(self):
        if self.mode not in SALIENCY_MODES:
            raise CorruptionError(f"unknown saliency mode {self.mode!r}")
        if not np.all(np.isfinite(self.scores)):
            raise CorruptionError("saliency scores must be finite")

    def __len__(self):
        return len(self.scores)


@dataclass(frozen=True)
class CorruptionConfig:
    rho_n: float = 0.10
    rho_m: float = 0.02
    sigma: float = 1.0
    tau_max: float = 0.15
    tau_s: float = 0.07
    bins: int = 8

    def __post_init__(self):
        if not (0 <= self.rho_n <= 1 and 0 <= self.rho_m <= 1):
            raise CorruptionError("corruption rates must lie in [0, 1]")
        if self.rho_n + self.rho_m > 1:
            raise CorruptionError("rho_n + rho_m must not exceed 1")
        if self.sigma <= 0 or not 0 < self.tau_max <= 1 or self.tau_s <= 0:
            raise CorruptionError("sigma, tau_s must be positive and tau_max in (0, 1]")
        if self.bins < 1:
            raise CorruptionError("bins must be >= 1")

    def counts(self, num_patches: int, scale: float = 1.0) -> tuple[int, int]:
        """(K_N, K_M) = floor(scale * rho * S) for the noised and masked sets."""
        return (
            math.floor(scale * self.rho_n * num_patches + 1e-9),
            math.floor(scale * self.rho_m * num_patches + 1e-9),
        )


@dataclass(frozen=True)
class CorruptionPlan:
    """Disjoint noised/masked index sets plus the stored noise draws.

    ``noised`` keeps draw order; ``taus[k]`` and ``noise[k]`` belong to
    ``noised[k]``.
    """

    num_patches: int
    noised: np.ndarray
    taus: np.ndarray
    noise: np.ndarray
    masked: np.ndarray
    tau_max: float = 0.15
    bins: int = 8

    @property
    def corrupted(self) -> np.ndarray:
        """C = N u M in ascending token order."""
        return np.sort(np.concatenate([self.noised, self.masked])).astype(np.int64)

    @classmethod
    def empty(cls, num_patches: int, dim: int, tau_max: float = 0.15, bins: int = 8):
        return cls(
            num_patches,
            np.empty(0, np.int64),
            np.empty(0),
            np.empty((0, dim)),
            np.empty(0, np.int64),
            tau_max,
            bins,
        )


@dataclass
class ConditioningTables:
    mask_embedding: np.ndarray
    noise_bin_embeddings: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.noise_bin_embeddings.ndim != 2:
            raise CorruptionError("noise_bin_embeddings must be B x d_h")
        if self.noise_bin_embeddings.shape[1] != self.mask_embedding.shape[0]:
            raise CorruptionError("mask and bin embeddings disagree on d_h")

    @property
    def dim(self) -> int:
        return self.mask_embedding.shape[0]

    @classmethod
    def zeros(cls, dim: int, bins: int = 8):
        return cls(np.zeros(dim), np.zeros((bins, dim)))


@dataclass(frozen=True)
class WhdSchedule:
    """Warmup / hold / decay fractions of training."""

    warmup_frac: float = 0.05
    hold_frac: float = 0.75
    decay_frac: float = 0.20

    def __post_init__(self):
        parts = (self.warmup_frac, self.hold_frac, self.decay_frac)
        if min(parts) < 0 or abs(sum(parts) - 1.0) > 1e-12:
            raise CorruptionError("WHD fractions must be non-negative and sum to 1")


def _check_rows(attention: np.ndarray):
    sums = attention.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6) or np.any(attention < 0):
        raise CorruptionError("attention rows must be probability distributions")


def saliency_from_cls_attention(attention) -> SaliencyScores:
    """Head-averaged attention from the class token (index 0) to each patch."""
    a = np.asarray(attention, dtype=np.float64)
    if a.ndim != 3 or a.shape[1] != a.shape[2] or a.shape[1] < 2:
        raise CorruptionError(f"expected H x (S+1) x (S+1) attention, got {a.shape}")
    _check_rows(a)
    return SaliencyScores(a[:, 0, 1:].mean(axis=0), "cls_attention")


def saliency_from_received_attention(attention) -> SaliencyScores:
    """Average attention each patch receives, over heads and query patches."""
    a = np.asarray(attention, dtype=np.float64)
    if a.ndim != 3 or a.shape[1] != a.shape[2]:
        raise CorruptionError(f"expected H x S x S attention, got {a.shape}")
    _check_rows(a)
    heads, s, _ = a.shape
    return SaliencyScores(a.sum(axis=(0, 1)) / (heads * s), "received_attention")


def saliency_from_features(features) -> SaliencyScores:
    """Centered-feature norm per patch, rescaled into a probability vector.

    Patches far from the mean patch are treated as distinctive. Identical
    patches give uniform scores.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise CorruptionError("feature saliency needs at least two patches")
    norms = np.linalg.norm(f - f.mean(axis=0), axis=1)
    total = norms.sum()
    if total <= 1e-12 * max(1.0, np.abs(f).max()):
        return SaliencyScores(np.full(f.shape[0], 1.0 / f.shape[0]), "feature_surrogate")
    return SaliencyScores(norms / total, "feature_surrogate")


def sample_plan(
    saliency: SaliencyScores,
    config: CorruptionConfig,
    rng: SeededRng,
    dim: int,
    scale: float = 1.0,
) -> CorruptionPlan:
    """Sample the noised set, then the masked set from the remaining patches.

    Draws come from ``rng`` in a fixed order: noised-set uniforms, masked-set
    uniforms, strengths, noise vectors. ``scale`` multiplies both rates (the
    WHD factor). Noise strengths are uniform on [0, tau_max) and noise vectors
    are N(0, sigma^2 I) of size ``dim``.
    """
    s = np.asarray(saliency.scores, dtype=np.float64)
    n = s.shape[0]
    k_n, k_m = config.counts(n, scale)
    if k_n + k_m > n:
        raise CorruptionError(f"cannot corrupt {k_n + k_m} of {n} patches")

    p_high = softmax(s, config.tau_s)
    noised = sample_without_replacement(rng, p_high, k_n)

    remaining = np.ones(n, dtype=bool)
    remaining[noised] = False
    if k_m:
        low = -s / config.tau_s
        low = np.where(remaining, np.exp(low - low[remaining].max()), 0.0)
        masked = sample_without_replacement(rng, low, k_m)
    else:
        masked = np.empty(0, dtype=np.int64)

    taus = rng.uniform(size=k_n, high=config.tau_max)
    noise = config.sigma * rng.normal((k_n, dim))
    return CorruptionPlan(n, noised, taus, noise, masked, config.tau_max, config.bins)


def bin_index(tau: float, tau_max: float, bins: int) -> int:
    """Discretize a noise strength; tau == tau_max lands in the last bin."""
    if not 0 <= tau <= tau_max:
        raise CorruptionError(f"tau={tau} outside [0, {tau_max}]")
    return min(int(math.floor(tau / tau_max * bins)), bins - 1)


def corruption_coefficients(plan: CorruptionPlan, bins: int):
    """Express a plan as z~ = keep * z + offset + mask_sel * e_mask + bin_sel @ e_tau.

    Returns ``(keep, offset, mask_sel, bin_sel)`` with shapes ``(S,)``,
    ``(S, d)``, ``(S,)`` and ``(S, B)``. The toy model uses this linear form so
    that gradients reach the mask and bin embeddings.
    """
    s = plan.num_patches
    dim = plan.noise.shape[1]
    keep = np.ones(s)
    offset = np.zeros((s, dim))
    mask_sel = np.zeros(s)
    bin_sel = np.zeros((s, bins))
    for k, i in enumerate(plan.noised):
        tau = float(plan.taus[k])
        keep[i] = 1.0 - tau
        offset[i] = tau * plan.noise[k]
        bin_sel[i, bin_index(tau, plan.tau_max, bins)] = 1.0
    keep[plan.masked] = 0.0
    mask_sel[plan.masked] = 1.0
    return keep, offset, mask_sel, bin_sel


def apply_corruption(z, plan: CorruptionPlan, tables: ConditioningTables) -> np.ndarray:
    """Apply a stored plan to projected tokens ``z`` (S x d_h)."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] != plan.num_patches:
        raise CorruptionError(f"z has shape {z.shape}, plan expects {plan.num_patches} rows")
    if z.shape[1] != tables.dim or (plan.noised.size and plan.noise.shape[1] != z.shape[1]):
        raise CorruptionError("token dimension does not match tables or stored noise")
    bins = tables.noise_bin_embeddings.shape[0]
    out = z.copy()
    for k, i in enumerate(plan.noised):
        tau = float(plan.taus[k])
        out[i] = (1.0 - tau) * z[i] + tau * plan.noise[k]
        out[i] = out[i] + tables.noise_bin_embeddings[bin_index(tau, plan.tau_max, bins)]
    out[plan.masked] = tables.mask_embedding
    return out


def whd_scale(progress: float, schedule: WhdSchedule = WhdSchedule()) -> float:
    """Piecewise-linear warmup-hold-decay factor in [0, 1].

    Evaluated in exact rational arithmetic on the decimal forms of the inputs,
    so breakpoints such as 0.9 on the default schedule give exactly 0.5.
    """
    p = min(max(Fraction(repr(float(progress))), Fraction(0)), Fraction(1))
    warm = Fraction(repr(float(schedule.warmup_frac)))
    hold = Fraction(repr(float(schedule.hold_frac)))
    decay = Fraction(repr(float(schedule.decay_frac)))
    if p < warm:
        return float(p / warm)
    if p <= warm + hold or decay == 0:
        return 1.0
    return float(max(Fraction(0), (1 - p) / decay))

__all__ = [
    "CorruptionConfig",
    "CorruptionError",
    "CorruptionPlan",
    "ConditioningTables",
    "NumericsError",
    "SaliencyScores",
    "WhdSchedule",
    "apply_corruption",
    "bin_index",
    "corruption_coefficients",
    "sample_plan",
    "saliency_from_cls_attention",
    "saliency_from_features",
    "saliency_from_received_attention",
    "whd_scale",
]
