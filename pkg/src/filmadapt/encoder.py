"""Toy frozen transformer encoder with the two surgical sites the adaptation
method needs: feature-map modulation after a configurable block, and low-rank
adapters on the query/value projections from a configurable block onward.

Everything except the adapters (and optionally the classifier head) is
random-initialized and frozen, standing in for a pretrained backbone. Token
pooling is a plain mean and the default head scores pooled features against
frozen unit-norm prototype rows, standing in for a frozen text encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .film import FilmAugmentor, film_apply, film_params
from .lora import LoraAdapter, ParameterRegistry, init_lora, lora_forward
from .tensor import (
    ShapeMismatch,
    Tensor,
    gelu,
    matmul,
    reshape,
    softmax,
    sqrt,
    transpose,
)


class ConfigMismatch(ValueError):
    pass


HEAD_MODES = ("frozen-prototype", "trainable-linear")


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 6
    width: int = 64
    n_heads: int = 4
    seq_len: int = 16
    film_layer: int = 3      # feature map captured after this block
    lora_start: int = 3      # first block whose q/v projections get adapters
    lora_rank: int = 4
    n_classes: int = 8
    input_dim: int = 32
    lora_scale: float = 1.0

    def __post_init__(self):
        if not 0 <= self.film_layer < self.n_layers:
            raise ConfigMismatch(f"film_layer {self.film_layer} outside [0, {self.n_layers})")
        if not 0 <= self.lora_start < self.n_layers:
            raise ConfigMismatch(f"lora_start {self.lora_start} outside [0, {self.n_layers})")
        if self.width % self.n_heads != 0:
            raise ConfigMismatch(f"n_heads {self.n_heads} must divide width {self.width}")
        if self.lora_rank > min(self.width, self.width):
            raise ConfigMismatch(f"lora_rank {self.lora_rank} exceeds width {self.width}")


@dataclass
class PredictionBundle:
    """Logits from the original branch plus one set per augmentation."""

    z_orig: Tensor             # (B, K)
    z_aug: list[Tensor] = field(default_factory=list)  # each (B, K)

    @property
    def n(self) -> int:
        return len(self.z_aug)


class ClassifierHead:
    """Maps pooled features to class logits. ``frozen-prototype`` scores
    against fixed unit-norm rows; ``trainable-linear`` learns weight+bias."""

    def __init__(self, n_classes: int, width: int, mode: str, seed: int,
                 dtype, registry: ParameterRegistry):
        if mode not in HEAD_MODES:
            raise ConfigMismatch(f"unknown head mode {mode!r}")
        self.mode = mode
        self.bias = None
        if mode == "frozen-prototype":
            raw = rng.stream(seed, "init/head.P").normal(0.0, 1.0, (n_classes, width))
            raw /= np.linalg.norm(raw, axis=1, keepdims=True)
            self.P = registry.add("head.P", Tensor(raw.astype(dtype)), "frozen")
        else:
            w = rng.stream(seed, "init/head.W").normal(0.0, 1.0 / np.sqrt(width), (n_classes, width))
            self.P = registry.add("head.W", Tensor(w.astype(dtype), requires_grad=True), "head")
            self.bias = registry.add("head.b", Tensor(np.zeros(n_classes, dtype=dtype), requires_grad=True), "head")


def pool_and_classify(features: Tensor, head: ClassifierHead) -> Tensor:
    """Mean-pool tokens, then score against the head rows."""
    if features.shape[-1] != head.P.shape[1]:
        raise ShapeMismatch(f"feature width {features.shape[-1]} != head width {head.P.shape[1]}")
    pooled = features.mean(axis=1)  # (B, C)
    logits = matmul(pooled, transpose(head.P))
    if head.bias is not None:
        logits = logits + head.bias
    return logits


def layer_norm(x: Tensor, g: Tensor, b: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / sqrt(var + eps) * g + b


class AttentionBlock:
    """Pre-LN block: multi-head self-attention then a 4x MLP, both residual.
    Query/value projections may be low-rank adapted; everything else frozen."""

    def __init__(self, index: int, cfg: EncoderConfig, seed: int, dtype,
                 registry: ParameterRegistry):
        c = cfg.width
        self.n_heads = cfg.n_heads
        self.head_dim = c // cfg.n_heads
        prefix = f"blocks.{index}"
        adapted = index >= cfg.lora_start

        def frozen(name, shape, std):
            arr = rng.stream(seed, f"init/{prefix}.{name}").normal(0.0, std, shape)
            return registry.add(f"{prefix}.{name}", Tensor(arr.astype(dtype)), "frozen")

        def const(name, arr):
            return registry.add(f"{prefix}.{name}", Tensor(arr.astype(dtype)), "frozen")

        self.ln1_g = const("ln1.g", np.ones(c))
        self.ln1_b = const("ln1.b", np.zeros(c))
        self.ln2_g = const("ln2.g", np.ones(c))
        self.ln2_b = const("ln2.b", np.zeros(c))

        std = 1.0 / np.sqrt(c)
        self.k = frozen("attn.k.W", (c, c), std)
        self.o = frozen("attn.o.W", (c, c), std)
        self.fc1_w = frozen("mlp.fc1.W", (4 * c, c), std)
        self.fc1_b = const("mlp.fc1.b", np.zeros(4 * c))
        self.fc2_w = frozen("mlp.fc2.W", (c, 4 * c), 1.0 / np.sqrt(4 * c))
        self.fc2_b = const("mlp.fc2.b", np.zeros(c))

        self.q: Tensor | LoraAdapter
        self.v: Tensor | LoraAdapter
        for proj in ("q", "v"):
            w0 = frozen(f"attn.{proj}.W", (c, c), std)
            if adapted:
                adapter = init_lora(
                    c, c, cfg.lora_rank, scale=cfg.lora_scale, dtype=dtype, w0=w0,
                    gen=rng.stream(seed, f"init/{prefix}.attn.{proj}.lora.A"),
                )
                registry.add(f"{prefix}.attn.{proj}.lora.A", adapter.A, "lora")
                registry.add(f"{prefix}.attn.{proj}.lora.B", adapter.B, "lora")
                setattr(self, proj, adapter)
            else:
                setattr(self, proj, w0)

    def _project(self, x: Tensor, layer) -> Tensor:
        if isinstance(layer, LoraAdapter):
            return lora_forward(x, layer)
        return matmul(x, transpose(layer))

    def __call__(self, x: Tensor) -> Tensor:
        b, t, c = x.shape
        h, hd = self.n_heads, self.head_dim

        y = layer_norm(x, self.ln1_g, self.ln1_b)
        q = self._project(y, self.q)
        k = matmul(y, transpose(self.k))
        v = self._project(y, self.v)

        def split(z):
            return transpose(reshape(z, (b, t, h, hd)), (0, 2, 1, 3))  # (B, H, T, hd)

        qh, kh, vh = split(q), split(k), split(v)
        scores = matmul(qh, transpose(kh, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
        attn = softmax(scores, axis=-1)
        ctx = matmul(attn, vh)                                  # (B, H, T, hd)
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, t, c))
        x = x + matmul(ctx, transpose(self.o))

        y = layer_norm(x, self.ln2_g, self.ln2_b)
        y = gelu(matmul(y, transpose(self.fc1_w)) + self.fc1_b)
        y = matmul(y, transpose(self.fc2_w)) + self.fc2_b
        return x + y


class Encoder:
    """Frozen transformer with adapters; produces a PredictionBundle."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0, dtype=np.float32,
                 head_mode: str = "frozen-prototype",
                 registry: ParameterRegistry | None = None):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.registry = registry if registry is not None else ParameterRegistry()

        proj = rng.stream(seed, "init/input_proj.W").normal(
            0.0, 1.0 / np.sqrt(cfg.input_dim), (cfg.width, cfg.input_dim))
        self.in_w = self.registry.add("input_proj.W", Tensor(proj.astype(dtype)), "frozen")
        self.in_b = self.registry.add("input_proj.b", Tensor(np.zeros(cfg.width, dtype=dtype)), "frozen")

        self.blocks = [AttentionBlock(i, cfg, seed, dtype, self.registry)
                       for i in range(cfg.n_layers)]

        self.lnf_g = self.registry.add("ln_f.g", Tensor(np.ones(cfg.width, dtype=dtype)), "frozen")
        self.lnf_b = self.registry.add("ln_f.b", Tensor(np.zeros(cfg.width, dtype=dtype)), "frozen")
        self.head = ClassifierHead(cfg.n_classes, cfg.width, head_mode, seed, dtype, self.registry)

    def encode(self, x: Tensor, film: FilmAugmentor | None = None) -> PredictionBundle:
        cfg = self.cfg
        if x.ndim != 3 or x.shape[1] != cfg.seq_len or x.shape[2] != cfg.input_dim:
            raise ShapeMismatch(
                f"expected input (B, {cfg.seq_len}, {cfg.input_dim}), got {x.shape}")
        if x.dtype != self.dtype:
            raise ConfigMismatch(f"input dtype {x.dtype} != model dtype {self.dtype}")
        if film is not None and film.width != cfg.width:
            raise ConfigMismatch(f"augmentor width {film.width} != model width {cfg.width}")

        h = matmul(x, transpose(self.in_w)) + self.in_b
        for i in range(cfg.film_layer + 1):
            h = self.blocks[i](h)

        branches = [h]
        if film is not None:
            branches += [film_apply(h, film_params(film, i)) for i in range(film.n)]

        logits = []
        for branch in branches:
            z = branch
            for i in range(cfg.film_layer + 1, cfg.n_layers):
                z = self.blocks[i](z)
            z = layer_norm(z, self.lnf_g, self.lnf_b)
            logits.append(pool_and_classify(z, self.head))
        return PredictionBundle(z_orig=logits[0], z_aug=logits[1:])


def encode(model: Encoder, x: Tensor, film: FilmAugmentor | None = None) -> PredictionBundle:
    return model.encode(x, film)
