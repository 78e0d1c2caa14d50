"""Miniature multimodal model: frozen patch encoder, projector, causal
decoder-only transformer, language head and the latent decoder head."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from latent_denoising import autodiff as ad
from latent_denoising.numerics import SeededRng


@dataclass(frozen=True)
class ModelConfig:
    patch_grid: int = 4
    patch_size: int = 4
    d_v: int = 32
    d_h: int = 64
    d_t: int = 32
    layers: int = 4
    heads: int = 4
    vocab: int = 64
    supervise_layer: int | None = None
    encoder_heads: int = 4
    text_len: int = 7
    seed: int = 0

    def __post_init__(self):
        if self.supervise_layer is None:
            object.__setattr__(self, "supervise_layer", math.ceil(self.layers / 2))
        if self.d_h % self.heads or self.d_v % self.encoder_heads:
            raise ValueError("hidden sizes must be divisible by their head counts")
        if not 1 <= self.supervise_layer <= self.layers:
            raise ValueError(f"supervise_layer must lie in [1, {self.layers}]")
        if self.d_t != self.d_v:
            raise ValueError("the teacher is the encoder output, so d_t must equal d_v")

    @property
    def num_patches(self) -> int:
        return self.patch_grid**2

    @property
    def image_size(self) -> int:
        return self.patch_grid * self.patch_size

    @property
    def seq_len(self) -> int:
        return self.num_patches + self.text_len


def _layer_norm(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)


class FrozenEncoder:
    """Patch embedding plus one self-attention layer with a class token.

    Weights come from a seeded initialization and are never updated. The
    teacher targets are the encoder's own patch outputs.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = SeededRng(config.seed, "encoder")
        c = config
        patch_dim = c.patch_size * c.patch_size * 3
        self.weights = {
            "patch": rng.normal((patch_dim, c.d_v)) / math.sqrt(patch_dim),
            "patch_bias": 0.1 * rng.normal(c.d_v),
            "pos": 0.5 * rng.normal((c.num_patches, c.d_v)),
            "cls": rng.normal(c.d_v),
            "qkv": rng.normal((c.d_v, 3 * c.d_v)) / math.sqrt(c.d_v),
            "out": rng.normal((c.d_v, c.d_v)) / math.sqrt(c.d_v),
        }
        for w in self.weights.values():
            w.setflags(write=False)

    def patchify(self, image: np.ndarray) -> np.ndarray:
        c = self.config
        img = np.asarray(image)
        if img.shape != (c.image_size, c.image_size, 3):
            raise ValueError(f"expected a {c.image_size}x{c.image_size}x3 image, got {img.shape}")
        g, p = c.patch_grid, c.patch_size
        x = img.astype(np.float64) / 255.0
        return x.reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4).reshape(g * g, p * p * 3)

    def encode(self, image: np.ndarray):
        """Return patch features V (S x d_v), attention (H x S+1 x S+1), teacher Y."""
        c, w = self.config, self.weights
        tokens = self.patchify(image) @ w["patch"] + w["patch_bias"] + w["pos"]
        x = np.vstack([w["cls"], tokens])
        h = _layer_norm(x)
        n, hd = x.shape[0], c.d_v // c.encoder_heads
        q, k, v = np.split(h @ w["qkv"], 3, axis=1)
        q = q.reshape(n, c.encoder_heads, hd).transpose(1, 0, 2)
        k = k.reshape(n, c.encoder_heads, hd).transpose(1, 0, 2)
        v = v.reshape(n, c.encoder_heads, hd).transpose(1, 0, 2)
        scores = q @ k.transpose(0, 2, 1) / math.sqrt(hd)
        scores -= scores.max(axis=-1, keepdims=True)
        attn = np.exp(scores)
        attn /= attn.sum(axis=-1, keepdims=True)
        mixed = (attn @ v).transpose(1, 0, 2).reshape(n, c.d_v)
        out = x + mixed @ w["out"]
        features = out[1:].copy()
        teacher = features.copy()
        teacher.setflags(write=False)
        return features, attn, teacher


def init_parameters(config: ModelConfig, bins: int = 8) -> dict[str, ad.Tensor]:
    """Seeded initialization of every trainable tensor, in a fixed name order."""
    c = config
    rng = SeededRng(c.seed, "params")

    def dense(fan_in, fan_out):
        return rng.normal((fan_in, fan_out)) / math.sqrt(fan_in)

    p = {
        "proj.w1": dense(c.d_v, c.d_h),
        "proj.b1": np.zeros(c.d_h),
        "proj.w2": dense(c.d_h, c.d_h),
        "proj.b2": np.zeros(c.d_h),
        "tok_emb": 0.1 * rng.normal((c.vocab, c.d_h)),
        "pos_emb": 0.1 * rng.normal((c.seq_len, c.d_h)),
    }
    for layer in range(c.layers):
        pre = f"block{layer}."
        p[pre + "ln1.g"] = np.ones(c.d_h)
        p[pre + "ln1.b"] = np.zeros(c.d_h)
        p[pre + "qkv.w"] = dense(c.d_h, 3 * c.d_h)
        p[pre + "qkv.b"] = np.zeros(3 * c.d_h)
        p[pre + "out.w"] = dense(c.d_h, c.d_h) / math.sqrt(2 * c.layers)
        p[pre + "out.b"] = np.zeros(c.d_h)
        p[pre + "ln2.g"] = np.ones(c.d_h)
        p[pre + "ln2.b"] = np.zeros(c.d_h)
        p[pre + "mlp.w1"] = dense(c.d_h, 4 * c.d_h)
        p[pre + "mlp.b1"] = np.zeros(4 * c.d_h)
        p[pre + "mlp.w2"] = dense(4 * c.d_h, c.d_h) / math.sqrt(2 * c.layers)
        p[pre + "mlp.b2"] = np.zeros(c.d_h)
    p["ln_f.g"] = np.ones(c.d_h)
    p["ln_f.b"] = np.zeros(c.d_h)
    p["lm_head.w"] = dense(c.d_h, c.vocab)
    p["lm_head.b"] = np.zeros(c.vocab)
    p["dec.w1"] = dense(c.d_h, c.d_h)
    p["dec.b1"] = np.zeros(c.d_h)
    p["dec.w2"] = dense(c.d_h, c.d_t)
    p["dec.b2"] = np.zeros(c.d_t)
    p["e_mask"] = 0.02 * rng.normal(c.d_h)
    p["e_tau"] = 0.02 * rng.normal((bins, c.d_h))
    return {name: ad.parameter(value) for name, value in p.items()}


LATENT_ONLY = ("dec.w1", "dec.b1", "dec.w2", "dec.b2", "e_mask", "e_tau")


def project(params, features: np.ndarray) -> ad.Tensor:
    """Two-layer GELU projector from encoder space (..., d_v) to (..., d_h)."""
    h = ad.gelu(ad.matmul(features, params["proj.w1"]) + params["proj.b1"])
    return ad.matmul(h, params["proj.w2"]) + params["proj.b2"]


def corrupt_tokens(params, z: ad.Tensor, keep, offset, mask_sel, bin_sel) -> ad.Tensor:
    """Differentiable z~ = keep*z + offset + mask_sel*e_mask + bin_sel @ e_tau."""
    out = ad.mul(z, keep[..., None]) + offset
    out = out + ad.mul(mask_sel[..., None], params["e_mask"])
    return out + ad.matmul(bin_sel, params["e_tau"])


def _attention(params, pre, x: ad.Tensor, heads: int, causal: np.ndarray):
    b, t, d = x.shape
    hd = d // heads
    qkv = ad.matmul(x, params[pre + "qkv.w"]) + params[pre + "qkv.b"]
    qkv = ad.transpose(ad.reshape(qkv, (b, t, 3, heads, hd)), (2, 0, 3, 1, 4))
    q, k, v = (_slice0(qkv, i) for i in range(3))
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    attn = ad.masked_softmax(scores, causal)
    mixed = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
    return ad.matmul(mixed, params[pre + "out.w"]) + params[pre + "out.b"], attn


def _slice0(x: ad.Tensor, i: int) -> ad.Tensor:
    def backward(g):
        out = np.zeros_like(x.value)
        out[i] = g
        return (out,)

    return ad.Tensor(x.value[i], (x,), backward)


@dataclass
class ForwardResult:
    logits: ad.Tensor
    hidden: ad.Tensor
    layer_outputs: list
    attention: list


def forward(params, config: ModelConfig, visual: ad.Tensor, text: np.ndarray) -> ForwardResult:
    """Run the causal transformer over ``[visual; embed(text)]``.

    ``visual`` is (B, S, d_h) and ``text`` is (B, U) token ids. Returns logits
    at the text positions, the post-block visual hidden states of the
    supervision layer, every block's output and every attention map.
    """
    c = config
    s = visual.shape[1]
    text = np.asarray(text, dtype=np.int64)
    x = ad.concat([visual, ad.embed(params["tok_emb"], text)], axis=1)
    t = x.shape[1]
    if t > c.seq_len:
        raise ValueError(f"sequence of length {t} exceeds configured {c.seq_len}")
    pos = _slice_rows(params["pos_emb"], t)
    x = x + pos
    causal = np.tril(np.ones((t, t), dtype=bool))
    outputs, maps, hidden = [x], [], None
    for layer in range(c.layers):
        pre = f"block{layer}."
        a, attn = _attention(params, pre, ad.layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"]), c.heads, causal)
        x = x + a
        h = ad.layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        h = ad.matmul(ad.gelu(ad.matmul(h, params[pre + "mlp.w1"]) + params[pre + "mlp.b1"]), params[pre + "mlp.w2"])
        x = x + h + params[pre + "mlp.b2"]
        outputs.append(x)
        maps.append(attn)
        if layer + 1 == c.supervise_layer:
            hidden = x
    text_states = _slice_axis1(x, s, t)
    final = ad.layer_norm(text_states, params["ln_f.g"], params["ln_f.b"])
    logits = ad.matmul(final, params["lm_head.w"]) + params["lm_head.b"]
    return ForwardResult(logits, hidden, outputs, maps)


def _slice_rows(x: ad.Tensor, n: int) -> ad.Tensor:
    def backward(g):
        out = np.zeros_like(x.value)
        out[:n] = g
        return (out,)

    return ad.Tensor(x.value[:n], (x,), backward)


def _slice_axis1(x: ad.Tensor, start: int, stop: int) -> ad.Tensor:
    def backward(g):
        out = np.zeros_like(x.value)
        out[:, start:stop] = g
        return (out,)

    return ad.Tensor(x.value[:, start:stop], (x,), backward)


def decode_head(params, hidden_rows: ad.Tensor) -> ad.Tensor:
    """Two-layer GELU MLP from d_h to d_t."""
    h = ad.gelu(ad.matmul(hidden_rows, params["dec.w1"]) + params["dec.b1"])
    return ad.matmul(h, params["dec.w2"]) + params["dec.b2"]


def decode_targets(params, hidden: np.ndarray | ad.Tensor, corrupted) -> ad.Tensor | None:
    """Decode the rows of one sample's hidden states (S x d_h) listed in ``corrupted``.

    Rows come out in ascending token order. Returns ``None`` for an empty set,
    in which case the caller skips the latent losses.
    """
    idx = np.sort(np.asarray(corrupted, dtype=np.int64))
    if idx.size == 0:
        return None
    hidden = ad.constant(hidden)
    rows = ad.take_rows(ad.reshape(hidden, (1,) + hidden.shape), np.zeros_like(idx), idx)
    return decode_head(params, rows)


def language_loss(logits, targets, assistant_mask) -> float:
    """Mean NLL of ``targets`` at assistant positions (plain numpy)."""
    logits = np.asarray(logits.value if isinstance(logits, ad.Tensor) else logits, dtype=np.float64)
    mask = np.asarray(assistant_mask, dtype=bool)
    if not mask.any():
        raise ValueError("assistant mask selects no positions")
    return float(ad.cross_entropy(ad.Tensor(logits), np.asarray(targets, dtype=np.int64), mask).value)
