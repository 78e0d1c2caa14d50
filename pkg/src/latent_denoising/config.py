"""Flat ``key = value`` run configuration.

Lines starting with ``#`` (and anything after a ``#``) are comments. Unknown
keys are rejected so that a typo never silently falls back to a default.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from latent_denoising.corruption import CorruptionConfig, WhdSchedule
from latent_denoising.imagecorrupt import ProtocolConfig
from latent_denoising.losses import LossWeights, Temperatures
from latent_denoising.model import ModelConfig
from latent_denoising.training import Configs, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # latent corruption
    rho_n: float = 0.10
    rho_m: float = 0.02
    sigma: float = 1.0
    tau_max: float = 0.15
    tau_s: float = 0.07
    bins: int = 8
    # recovery losses
    tau_r: float = 0.10
    tau_c: float = 0.07
    lambda_rec: float = 0.10
    lambda_rel: float = 0.025
    lambda_con: float = 0.025
    # warmup / hold / decay
    warmup_frac: float = 0.05
    hold_frac: float = 0.75
    decay_frac: float = 0.20
    # toy model; supervise_layer 0 means ceil(layers / 2)
    patch_grid: int = 4
    patch_size: int = 4
    d_v: int = 32
    d_h: int = 64
    d_t: int = 32
    layers: int = 4
    heads: int = 4
    vocab: int = 64
    supervise_layer: int = 0
    # hidden states for the decoder head are read after the whole block
    hidden_boundary: str = "post_block"
    # layer whose text-to-visual attention is scored; 0 means supervise_layer
    entropy_layer: int = 0
    # optimisation and data
    seed: int = 0
    steps: int = 500
    batch_size: int = 16
    lr: float = 1e-3
    dataset_size: int = 512
    probe_size: int = 32
    probe_every: int = 50
    # evaluation-image protocol
    protocol_seed: int = 0
    family: str = "noise"
    severity: int = 3

    def validate(self) -> "RunConfig":
        try:
            self.to_configs()
            self.protocol()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.hidden_boundary != "post_block":
            raise ConfigError(f"hidden_boundary must be 'post_block', got {self.hidden_boundary!r}")
        if not 0 <= self.entropy_layer <= self.layers:
            raise ConfigError(f"entropy_layer must be in 0..{self.layers}")
        if self.steps < 0 or self.batch_size < 1 or self.dataset_size < 1 or self.probe_every < 1:
            raise ConfigError("steps must be >= 0 and batch/dataset sizes and probe_every >= 1")
        return self

    def model(self) -> ModelConfig:
        return ModelConfig(
            patch_grid=self.patch_grid,
            patch_size=self.patch_size,
            d_v=self.d_v,
            d_h=self.d_h,
            d_t=self.d_t,
            layers=self.layers,
            heads=self.heads,
            vocab=self.vocab,
            supervise_layer=self.supervise_layer or None,
            seed=self.seed,
        )

    def to_configs(self) -> Configs:
        return Configs(
            model=self.model(),
            corruption=CorruptionConfig(self.rho_n, self.rho_m, self.sigma, self.tau_max, self.tau_s, self.bins),
            weights=LossWeights(self.lambda_rec, self.lambda_rel, self.lambda_con),
            temperatures=Temperatures(self.tau_r, self.tau_c),
            schedule=WhdSchedule(self.warmup_frac, self.hold_frac, self.decay_frac),
            train=TrainConfig(
                batch_size=self.batch_size,
                lr=self.lr,
                dataset_size=self.dataset_size,
                probe_size=self.probe_size,
                probe_every=self.probe_every,
            ),
        )

    @property
    def attention_layer(self) -> int:
        return self.entropy_layer or self.model().supervise_layer

    def protocol(self) -> ProtocolConfig:
        return ProtocolConfig(self.protocol_seed, self.family, self.severity)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {value!r}" if isinstance(value, float) else f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELDS[name].type
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from exc
    return raw


def loads(text: str) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw)
    return dataclasses.replace(RunConfig(), **values).validate()


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)
