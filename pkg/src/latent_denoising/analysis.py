"""Offline analysis of internal visual representations."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from latent_denoising.numerics import NumericsError, svd_values

log = logging.getLogger(__name__)


@dataclass
class FeatureDump:
    """Per-layer N x d feature matrices sharing one label vector."""

    layers: list[tuple[int, np.ndarray]]
    labels: np.ndarray
    metadata: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int32)
        for index, feats in self.layers:
            if feats.shape[0] != self.labels.shape[0]:
                raise ValueError(
                    f"layer {index} has {feats.shape[0]} rows but there are {self.labels.shape[0]} labels"
                )

    @property
    def num_rows(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class AnalysisReport:
    per_layer: dict[int, dict[str, float]] = field(default_factory=dict)
    spectra: dict[int, list[float]] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "layers": {str(k): v for k, v in sorted(self.per_layer.items())},
            "spectra": {str(k): v for k, v in sorted(self.spectra.items())},
        }


def _centered(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x - x.mean(axis=0, keepdims=True)


def linear_cka(x, y) -> float:
    """Linear CKA in feature space: ||Xc^T Yc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape[0] != y.shape[0] or x.shape[0] < 2:
        raise NumericsError("linear_cka needs matching row counts of at least 2")
    xc, yc = _centered(x), _centered(y)
    norm_x = np.linalg.norm(xc.T @ xc)
    norm_y = np.linalg.norm(yc.T @ yc)
    if norm_x == 0 or norm_y == 0:
        raise NumericsError("linear_cka of a matrix that is constant across rows")
    cross = np.linalg.norm(xc.T @ yc) ** 2
    return float(min(max(cross / (norm_x * norm_y), 0.0), 1.0))


def knn_probe(features, labels, k: int = 20, folds: int = 5) -> float:
    """Cosine k-NN accuracy under index-mod-``folds`` cross-validation.

    Neighbour ties go to the smaller index, vote ties to the smaller label.
    """
    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n = f.shape[0]
    if n < folds or y.shape[0] != n:
        raise ValueError(f"need at least {folds} labelled rows, got {n}")
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    unit = f / np.where(norms > 0, norms, 1.0)
    fold_of = np.arange(n) % folds
    n_classes = int(y.max()) + 1
    accs = []
    for fold in range(folds):
        test = np.flatnonzero(fold_of == fold)
        train = np.flatnonzero(fold_of != fold)
        k_eff = k
        if k >= train.size:
            k_eff = max(1, train.size - 1)
            log.warning("k=%d exceeds training fold of %d; using k=%d", k, train.size, k_eff)
        sims = unit[test] @ unit[train].T
        order = np.argsort(-sims, axis=1, kind="stable")[:, :k_eff]
        votes = y[train][order]
        counts = np.zeros((test.size, n_classes), dtype=np.int64)
        np.add.at(counts, (np.repeat(np.arange(test.size), k_eff), votes.reshape(-1)), 1)
        pred = counts.argmax(axis=1)
        accs.append(float(np.mean(pred == y[test])))
    return float(np.mean(accs))


def singular_spectrum(features, normalize: bool = False) -> np.ndarray:
    s = svd_values(features)
    if s[0] == 0:
        raise NumericsError("spectrum of a zero matrix")
    return s / s[0] if normalize else s


def effective_rank(features) -> float:
    """exp of the Shannon entropy of the normalized singular values."""
    s = svd_values(features)
    total = s.sum()
    if total == 0:
        raise NumericsError("effective rank of a zero matrix")
    p = s[s > 0] / total
    return float(np.exp(-np.sum(p * np.log(p))))


def attention_entropy(weights) -> float:
    """Shannon entropy in nats, with 0 ln 0 = 0."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("attention weights must be non-negative")
    if abs(w.sum() - 1.0) > 1e-6:
        raise ValueError("attention weights must sum to 1")
    nz = w[w > 0]
    return float(-np.sum(nz * np.log(nz)))


def text_to_visual_entropy(attn, num_visual: int) -> float:
    """Entropy of text-to-visual attention for one (H, T, T) map.

    Rows for text queries are restricted to the visual keys, averaged over
    heads and queries, renormalized, and scored with ``attention_entropy``.
    """
    a = np.asarray(attn, dtype=np.float64)
    if a.ndim != 3 or a.shape[1] <= num_visual or num_visual < 1:
        raise ValueError("expected an (H, T, T) map with text positions after the visual ones")
    mean = a[:, num_visual:, :num_visual].mean(axis=(0, 1))
    total = mean.sum()
    if total <= 0:
        raise NumericsError("text queries place no attention on visual keys")
    return attention_entropy(mean / total)


def mean_pool_visual(hidden) -> np.ndarray:
    h = np.asarray(hidden, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] < 1:
        raise ValueError("expected an S x d matrix with S >= 1")
    return h.mean(axis=0)


def analyze(dump: FeatureDump, mode: str, reference: FeatureDump | None = None, k: int = 20, folds: int = 5) -> AnalysisReport:
    """Run one analysis over every layer of ``dump``."""
    report = AnalysisReport(metadata={"mode": mode, "source": dump.metadata})
    if mode == "cka":
        if reference is None:
            raise ValueError("cka mode needs a reference dump")
        if reference.num_rows != dump.num_rows:
            raise ValueError(f"row count mismatch: {dump.num_rows} vs {reference.num_rows}")
        ref = dict(reference.layers)
        for index, feats in dump.layers:
            if index in ref:
                target = ref[index]
            elif len(reference.layers) == 1:
                target = reference.layers[0][1]
            else:
                raise ValueError(f"reference has no layer {index}")
            report.per_layer[index] = {"cka": linear_cka(feats, target)}
    elif mode == "knn":
        for index, feats in dump.layers:
            report.per_layer[index] = {"knn": knn_probe(feats, dump.labels, k, folds)}
    elif mode == "rank":
        for index, feats in dump.layers:
            report.per_layer[index] = {"effective_rank": effective_rank(feats)}
    elif mode == "spectrum":
        for index, feats in dump.layers:
            report.spectra[index] = singular_spectrum(feats, normalize=True).tolist()
    else:
        raise ValueError(f"unknown analysis mode {mode!r}")
    return report
