"""Latent-denoising training loop for the toy model.

One step, per sample: encode the image with the frozen encoder, score patch
saliency, sample a corruption plan, project and corrupt the visual tokens, run
the causal transformer, decode the supervision-layer states at corrupted
positions and score them against the detached teacher. The batch objective is
the language loss plus WHD-scaled recovery losses; gradients come from the
tape, with the recovery losses entering through their closed-form gradients.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from latent_denoising import autodiff as ad
from latent_denoising.corruption import (
    CorruptionConfig,
    CorruptionPlan,
    WhdSchedule,
    corruption_coefficients,
    sample_plan,
    saliency_from_cls_attention,
    whd_scale,
)
from latent_denoising.losses import (
    LossBreakdown,
    LossWeights,
    Temperatures,
    loss_con,
    loss_rec,
    loss_rel,
    total_objective,
)
from latent_denoising.model import (
    LATENT_ONLY,
    FrozenEncoder,
    ModelConfig,
    corrupt_tokens,
    decode_head,
    forward,
    init_parameters,
    project,
)
from latent_denoising.numerics import NumericsError, SeededRng

log = logging.getLogger(__name__)


class TrainingDiverged(NumericsError):
    """A step produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dataset_size: int = 512
    probe_size: int = 32
    probe_every: int = 50


@dataclass
class Configs:
    """Every knob a training step reads."""

    model: ModelConfig = field(default_factory=ModelConfig)
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    temperatures: Temperatures = field(default_factory=Temperatures)
    schedule: WhdSchedule = field(default_factory=WhdSchedule)
    train: TrainConfig = field(default_factory=TrainConfig)


class TrainState:
    """Trainable parameters, Adam moments, step counter and the frozen encoder.

    The encoder's weights are not part of ``params``; its outputs are cached
    per image id since they never change.
    """

    def __init__(self, configs: Configs):
        self.configs = configs
        self.encoder = FrozenEncoder(configs.model)
        self.params = init_parameters(configs.model, configs.corruption.bins)
        self.m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.step = 0
        self.rng = SeededRng(configs.model.seed, "train")
        self._cache: dict[str, tuple] = {}

    def encode(self, sample):
        hit = self._cache.get(sample.image_id)
        if hit is None:
            hit = self.encoder.encode(sample.image)
            self._cache[sample.image_id] = hit
        return hit

    def shared_parameters(self):
        return {k: p for k, p in self.params.items() if k not in LATENT_ONLY}


@dataclass
class Batch:
    samples: list
    features: np.ndarray  # (B, S, d_v)
    teacher: np.ndarray  # (B, S, d_t), constant
    saliency: list
    text: np.ndarray  # (B, U)
    assistant_mask: np.ndarray  # (B, U)


def make_batch(state: TrainState, samples) -> Batch:
    if not samples:
        raise ValueError("batch must be non-empty")
    encoded = [state.encode(s) for s in samples]
    return Batch(
        samples=list(samples),
        features=np.stack([e[0] for e in encoded]),
        teacher=np.stack([e[2] for e in encoded]),
        saliency=[saliency_from_cls_attention(e[1]) for e in encoded],
        text=np.stack([s.text for s in samples]),
        assistant_mask=np.stack([s.assistant_mask for s in samples]),
    )


def sample_plans(state: TrainState, batch: Batch, scale: float, step: int | None = None) -> list[CorruptionPlan]:
    """One plan per sample, each from its own stream labeled by step and batch slot."""
    c = state.configs
    step = state.step if step is None else step
    return [
        sample_plan(sal, c.corruption, state.rng.child(f"plan/{step}/{b}"), c.model.d_h, scale)
        for b, sal in enumerate(batch.saliency)
    ]


def _visual_tokens(params, configs: Configs, batch: Batch, plans):
    z = project(params, batch.features)
    if plans is None or all(p.corrupted.size == 0 for p in plans):
        return z
    coeffs = [corruption_coefficients(p, configs.corruption.bins) for p in plans]
    keep, offset, mask_sel, bin_sel = (np.stack(parts) for parts in zip(*coeffs))
    return corrupt_tokens(params, z, keep, offset, mask_sel, bin_sel)


def objective(state: TrainState, batch: Batch, plans, whd: float, params=None):
    """Build the tape for the batch objective.

    Returns ``(root, breakdown, extras)``; ``root`` is the scalar total loss
    node. With ``plans=None`` the visual tokens stay clean and no latent terms
    are formed.
    """
    c = state.configs
    params = state.params if params is None else params
    visual = _visual_tokens(params, c, batch, plans)
    out = forward(params, c.model, visual, batch.text)
    logits = _drop_last(out.logits)
    lang = ad.cross_entropy(logits, batch.text[:, 1:], batch.assistant_mask[:, 1:])

    n_batch = len(batch.samples)
    rec = rel = con = 0.0
    root = lang
    decoded = None
    if plans is not None and whd > 0:
        rows_b, rows_i = [], []
        for b, plan in enumerate(plans):
            idx = plan.corrupted
            rows_b.extend([b] * idx.size)
            rows_i.extend(idx.tolist())
        if rows_b:
            rows_b = np.asarray(rows_b, dtype=np.int64)
            rows_i = np.asarray(rows_i, dtype=np.int64)
            decoded = decode_head(params, ad.take_rows(out.hidden, rows_b, rows_i))
            grad = np.zeros_like(decoded.value)
            w, t = c.weights, c.temperatures
            for b in range(n_batch):
                sel = np.flatnonzero(rows_b == b)
                if sel.size == 0:
                    continue
                student = decoded.value[sel]
                teacher = batch.teacher[b][rows_i[sel]]
                r1, g1 = loss_rec(student, teacher)
                r2, g2 = loss_rel(student, teacher, t.tau_r)
                r3, g3 = loss_con(student, teacher, t.tau_c)
                rec += r1 / n_batch
                rel += r2 / n_batch
                con += r3 / n_batch
                grad[sel] = whd * (w.lambda_rec * g1 + w.lambda_rel * g2 + w.lambda_con * g3) / n_batch
            breakdown = total_objective(float(lang.value), rec, rel, con, c.weights, whd)
            aux = ad.external_loss(decoded, breakdown.total - float(lang.value), grad)
            root = ad.add(lang, aux)
            return root, breakdown, {"forward": out, "decoded": decoded}
    breakdown = total_objective(float(lang.value), rec, rel, con, c.weights, whd)
    return root, breakdown, {"forward": out, "decoded": decoded}


def _drop_last(logits: ad.Tensor) -> ad.Tensor:
    """Logits at text positions 0..U-2, which predict tokens 1..U-1."""

    def backward(g):
        out = np.zeros_like(logits.value)
        out[:, :-1] = g
        return (out,)

    return ad.Tensor(logits.value[:, :-1], (logits,), backward)


def _adam_update(state: TrainState, names):
    t = state.configs.train
    state.step += 1
    bc1 = 1.0 - t.beta1**state.step
    bc2 = 1.0 - t.beta2**state.step
    for name in names:
        p = state.params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.value)
        state.m[name] = t.beta1 * state.m[name] + (1.0 - t.beta1) * g
        state.v[name] = t.beta2 * state.v[name] + (1.0 - t.beta2) * (g * g)
        update = t.lr * (state.m[name] / bc1) / (np.sqrt(state.v[name] / bc2) + t.adam_eps)
        p.value = p.value - update


def _check_finite(breakdown: LossBreakdown, step: int):
    if not all(math.isfinite(x) for x in breakdown.as_row()):
        raise TrainingDiverged(f"non-finite loss at step {step}: {breakdown}")


def train_step(state: TrainState, samples, progress: float | None = None, whd: float | None = None) -> LossBreakdown:
    """One latent-denoising optimizer step on ``samples``.

    The WHD factor comes from ``whd`` if given, else from ``progress``; it
    scales both the corruption rates and the auxiliary loss weights.
    """
    c = state.configs
    if whd is None:
        whd = whd_scale(0.0 if progress is None else progress, c.schedule)
    batch = make_batch(state, samples)
    plans = sample_plans(state, batch, whd)
    for p in state.params.values():
        p.grad = None
    root, breakdown, _ = objective(state, batch, plans, whd)
    _check_finite(breakdown, state.step)
    root.backward()
    _adam_update(state, list(state.params))
    return breakdown


def language_only_step(state: TrainState, samples) -> float:
    """Plain instruction-tuning step: clean tokens, language loss only.

    Only the parameters on the language path are updated.
    """
    batch = make_batch(state, samples)
    for p in state.params.values():
        p.grad = None
    visual = project(state.params, batch.features)
    out = forward(state.params, state.configs.model, visual, batch.text)
    lang = ad.cross_entropy(_drop_last(out.logits), batch.text[:, 1:], batch.assistant_mask[:, 1:])
    if not math.isfinite(float(lang.value)):
        raise TrainingDiverged(f"non-finite language loss at step {state.step}")
    lang.backward()
    _adam_update(state, list(state.shared_parameters()))
    return float(lang.value)


def batch_indices(state: TrainState, step: int, n: int) -> np.ndarray:
    b = state.configs.train.batch_size
    return state.rng.child(f"batch/{step}").integers(0, n, size=b)


def probe_alignment(state: TrainState, batch: Batch, plans) -> float:
    """Mean cosine between decoded and teacher features over corrupted positions."""
    root, _, extras = objective(state, batch, plans, whd=1.0)
    decoded = extras["decoded"]
    if decoded is None:
        return float("nan")
    rows = [batch.teacher[b][p.corrupted] for b, p in enumerate(plans) if p.corrupted.size]
    teacher = np.concatenate(rows)
    yhat = decoded.value
    cos = np.sum(yhat * teacher, axis=1) / (np.linalg.norm(yhat, axis=1) * np.linalg.norm(teacher, axis=1))
    return float(np.mean(cos))


@dataclass
class Timeline:
    steps: list = field(default_factory=list)  # LossBreakdown per step
    probes: list = field(default_factory=list)  # (step, alignment)


def probe_setup(state: TrainState, probe_samples):
    batch = make_batch(state, probe_samples)
    rng = SeededRng(state.configs.model.seed, "probe")
    plans = [
        sample_plan(sal, state.configs.corruption, rng.child(str(b)), state.configs.model.d_h, 1.0)
        for b, sal in enumerate(batch.saliency)
    ]
    return batch, plans


def run_training(state: TrainState, dataset, total_steps: int, probe_samples=None, callback=None) -> Timeline:
    """Train for ``total_steps`` steps, probing held-out alignment periodically."""
    if not dataset:
        raise ValueError("dataset must be non-empty")
    timeline = Timeline()
    every = state.configs.train.probe_every
    probe = probe_setup(state, probe_samples) if probe_samples else None
    if probe:
        timeline.probes.append((0, probe_alignment(state, *probe)))
    for step in range(total_steps):
        idx = batch_indices(state, step, len(dataset))
        progress = step / total_steps
        breakdown = train_step(state, [dataset[i] for i in idx], progress=progress)
        timeline.steps.append(breakdown)
        if callback is not None:
            callback(step, breakdown)
        if probe and ((step + 1) % every == 0 or step + 1 == total_steps):
            timeline.probes.append((step + 1, probe_alignment(state, *probe)))
    return timeline
