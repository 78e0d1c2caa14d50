"""Central finite-difference audits of the recovery losses and the full objective."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from latent_denoising import losses
from latent_denoising.corruption import CorruptionConfig
from latent_denoising.data import generate_synthetic_dataset
from latent_denoising.numerics import SeededRng
from latent_denoising.training import Configs, TrainState, make_batch, objective, sample_plans

STEP = 1e-5
LOSS_TOL = 1e-5
COMPOSITE_TOL = 1e-4
SIZES = ((2, 3), (3, 7), (5, 3), (2, 7), (3, 3), (5, 7), (2, 3), (3, 7), (5, 3), (5, 7))


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||), with 0 when both vanish."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - n) / scale)


def numeric_gradient(fn, x: np.ndarray, h: float = STEP) -> np.ndarray:
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = fn(x)
        x[idx] = orig - h
        down = fn(x)
        x[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def default_loss_fns():
    return {
        "rec": losses.loss_rec,
        "rel": lambda s, t: losses.loss_rel(s, t, 0.10),
        "con": lambda s, t: losses.loss_con(s, t, 0.07),
    }


def check_losses(seed: int = 0, loss_fns=None, instances: int = 10) -> dict[str, float]:
    """Max relative gradient error per loss over random (|C|, d_t) instances."""
    loss_fns = loss_fns or default_loss_fns()
    rng = SeededRng(seed, "gradcheck/losses")
    worst = {}
    for name, fn in loss_fns.items():
        errs = []
        for k in range(instances):
            n, d = SIZES[k % len(SIZES)]
            student = rng.normal((n, d))
            teacher = rng.normal((n, d))
            _, grad = fn(student, teacher)
            numeric = numeric_gradient(lambda s: fn(s, teacher)[0], student.copy())
            errs.append(relative_error(grad, numeric))
        worst[name] = max(errs)
    return worst


def gradcheck_configs(seed: int = 0) -> Configs:
    """Default toy model with rates high enough that every loss term is active."""
    base = Configs()
    return dataclasses.replace(
        base,
        model=dataclasses.replace(base.model, seed=seed),
        corruption=CorruptionConfig(rho_n=0.25, rho_m=0.125),
    )


def check_composite(seed: int = 0, probes: int = 20, batch_size: int = 2) -> float:
    """Relative error of the total-objective gradient on a random parameter probe."""
    state = TrainState(gradcheck_configs(seed))
    samples = generate_synthetic_dataset(batch_size, SeededRng(seed, "gradcheck/data"))
    batch = make_batch(state, samples)
    plans = sample_plans(state, batch, scale=1.0)
    whd = 1.0

    for p in state.params.values():
        p.grad = None
    root, _, _ = objective(state, batch, plans, whd)
    root.backward()

    rng = SeededRng(seed, "gradcheck/probe")
    names = list(state.params)
    chosen = []
    for _ in range(probes):
        name = names[int(rng.integers(0, len(names)))]
        flat = int(rng.integers(0, state.params[name].value.size))
        chosen.append((name, np.unravel_index(flat, state.params[name].value.shape)))

    analytic, numeric = [], []
    for name, idx in chosen:
        param = state.params[name]
        g = param.grad
        analytic.append(0.0 if g is None else float(g[idx]))
        orig = param.value[idx]
        param.value[idx] = orig + STEP
        up = objective(state, batch, plans, whd)[1].total
        param.value[idx] = orig - STEP
        down = objective(state, batch, plans, whd)[1].total
        param.value[idx] = orig
        numeric.append((up - down) / (2 * STEP))
    return relative_error(np.array(analytic), np.array(numeric))


@dataclass
class GradcheckReport:
    errors: dict[str, float]
    tolerances: dict[str, float]

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.errors.items() if not v <= self.tolerances[k]]

    @property
    def ok(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        return [
            f"{name:<10} max_rel_err={err:.3e} tol={self.tolerances[name]:.0e} "
            f"{'ok' if err <= self.tolerances[name] else 'FAIL'}"
            for name, err in self.errors.items()
        ]


def run_gradcheck(seed: int = 0, loss_fns=None) -> GradcheckReport:
    errors = check_losses(seed, loss_fns)
    tolerances = {k: LOSS_TOL for k in errors}
    errors["composite"] = check_composite(seed)
    tolerances["composite"] = COMPOSITE_TOL
    return GradcheckReport(errors, tolerances)
