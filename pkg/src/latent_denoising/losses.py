"""Reconstruction, relational and contrastive recovery losses.

Each loss takes decoded student features ``student`` (|C| x d_t) and frozen
teacher features ``teacher`` of the same shape, and returns the scalar value
together with its gradient with respect to ``student``. Teacher features are
treated as constants.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from latent_denoising.numerics import EPS_NORM, NumericsError


@dataclass(frozen=True)
class LossWeights:
    lambda_rec: float = 0.10
    lambda_rel: float = 0.025
    lambda_con: float = 0.025

    def __post_init__(self):
        if min(self.lambda_rec, self.lambda_rel, self.lambda_con) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class Temperatures:
    tau_r: float = 0.10
    tau_c: float = 0.07

    def __post_init__(self):
        if self.tau_r <= 0 or self.tau_c <= 0:
            raise ValueError("temperatures must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    lang: float
    rec: float
    rel: float
    con: float
    whd: float
    total: float

    def as_row(self) -> tuple[float, ...]:
        return (self.lang, self.rec, self.rel, self.con, self.whd, self.total)


class LossValue(tuple):
    """``(value, grad)`` pair; ``degenerate`` marks a value defined by convention."""

    def __new__(cls, value: float, grad: np.ndarray, degenerate: bool = False):
        obj = super().__new__(cls, (float(value), grad))
        obj.degenerate = degenerate
        return obj

    @property
    def value(self) -> float:
        return self[0]

    @property
    def grad(self) -> np.ndarray:
        return self[1]


def _check_pair(student, teacher):
    s = np.asarray(student, dtype=np.float64)
    t = np.asarray(teacher, dtype=np.float64)
    if s.ndim != 2 or s.shape != t.shape:
        raise NumericsError(f"student {s.shape} and teacher {t.shape} must be matching matrices")
    return s, t


def _unit_rows(x: np.ndarray, what: str):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    bad = np.flatnonzero(norms[:, 0] <= EPS_NORM)
    if bad.size:
        raise NumericsError(f"{what} row {int(bad[0])} has near-zero norm")
    return x / norms, norms


def _normalize_backward(grad_unit: np.ndarray, unit: np.ndarray, norms: np.ndarray):
    # d(x/|x|)^T g = (g - u (u.g)) / |x|
    return (grad_unit - unit * np.sum(unit * grad_unit, axis=1, keepdims=True)) / norms


def _log_softmax_rows(a: np.ndarray) -> np.ndarray:
    # log1p over the non-max terms keeps full precision for near one-hot rows
    top = a.argmax(axis=1)
    rows = np.arange(a.shape[0])
    shifted = a - a[rows, top][:, None]
    e = np.exp(shifted)
    e[rows, top] = 0.0
    return shifted - np.log1p(e.sum(axis=1, keepdims=True))


def similarity_matrix(features) -> np.ndarray:
    """Pairwise cosine similarities, clamped to [-1, 1] with a unit diagonal."""
    f = np.asarray(features, dtype=np.float64)
    unit, _ = _unit_rows(f, "feature")
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    np.fill_diagonal(sim, 1.0)
    return sim


def loss_rec(student, teacher) -> LossValue:
    """Mean squared distance between L2-normalized student and teacher rows."""
    s, t = _check_pair(student, teacher)
    n = s.shape[0]
    if n == 0:
        return LossValue(0.0, np.zeros_like(s))
    u, norms = _unit_rows(s, "student")
    v, _ = _unit_rows(t, "teacher")
    diff = u - v
    value = np.sum(diff * diff) / n
    return LossValue(value, _normalize_backward(2.0 * diff / n, u, norms))


def loss_rel(student, teacher, tau_r: float = 0.10) -> LossValue:
    """Row-wise KL(teacher || student) between softmaxed cosine-similarity rows.

    Rows include the diagonal. With fewer than two rows the loss is 0 and the
    result is flagged ``degenerate``.
    """
    s, t = _check_pair(student, teacher)
    n = s.shape[0]
    if n < 2:
        return LossValue(0.0, np.zeros_like(s), degenerate=True)
    u, norms = _unit_rows(s, "student")
    v, _ = _unit_rows(t, "teacher")
    log_p = _log_softmax_rows((v @ v.T) / tau_r)
    log_q = _log_softmax_rows((u @ u.T) / tau_r)
    p = np.exp(log_p)
    value = np.sum(p * (log_p - log_q)) / n
    g_sim = (np.exp(log_q) - p) / (n * tau_r)
    g_unit = (g_sim + g_sim.T) @ u
    return LossValue(value, _normalize_backward(g_unit, u, norms))


def loss_con(student, teacher, tau_c: float = 0.07) -> LossValue:
    """Student-to-teacher InfoNCE; negatives are the other teacher rows of the image."""
    s, t = _check_pair(student, teacher)
    n = s.shape[0]
    if n == 0:
        return LossValue(0.0, np.zeros_like(s))
    u, norms = _unit_rows(s, "student")
    v, _ = _unit_rows(t, "teacher")
    log_q = _log_softmax_rows((u @ v.T) / tau_c)
    value = -np.trace(log_q) / n
    g_logits = (np.exp(log_q) - np.eye(n)) / (n * tau_c)
    return LossValue(value, _normalize_backward(g_logits @ v, u, norms))


def total_objective(
    lang: float,
    rec: float,
    rel: float,
    con: float,
    weights: LossWeights = LossWeights(),
    whd: float = 1.0,
) -> LossBreakdown:
    if not 0.0 <= whd <= 1.0:
        raise ValueError(f"whd scale must lie in [0, 1], got {whd}")
    aux = weights.lambda_rec * rec + weights.lambda_rel * rel + weights.lambda_con * con
    return LossBreakdown(lang, rec, rel, con, whd, lang + whd * aux)
