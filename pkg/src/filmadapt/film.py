"""Learned feature augmentation: an embedding table feeds a small MLP that
emits per-channel scale/shift pairs, applied to an intermediate feature map.

The final MLP layer starts at exactly zero and the scale is read out as
``1 + raw``, so a fresh module is the identity: every augmented branch
reproduces the original features bit for bit until training moves it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .lora import ParameterRegistry
from .tensor import (
    IndexOutOfRange,
    ShapeMismatch,
    Tensor,
    gelu,
    matmul,
    narrow,
    transpose,
)


@dataclass
class FilmParams:
    gamma: Tensor  # (C,)
    beta: Tensor   # (C,)
    index: int


class FilmAugmentor:
    """N augmentation embeddings -> generator MLP -> N (gamma, beta) pairs."""

    def __init__(self, n: int, d_e: int, hidden: int, width: int, seed: int = 0,
                 dtype=np.float32, registry: ParameterRegistry | None = None):
        if n < 1:
            raise ValueError(f"need at least one augmentation, got n={n}")
        self.n = n
        self.d_e = d_e
        self.hidden = hidden
        self.width = width
        reg = registry if registry is not None else ParameterRegistry()
        self.registry = reg

        def param(name, array):
            return reg.add(name, Tensor(array.astype(dtype), requires_grad=True), "aug")

        self.E = param("film.E", rng.stream(seed, "init/film.E").normal(0.0, 1.0, (n, d_e)))
        self.w1 = param("film.mlp.0.W", rng.stream(seed, "init/film.mlp.0.W").normal(0.0, 1.0 / np.sqrt(d_e), (hidden, d_e)))
        self.b1 = param("film.mlp.0.b", np.zeros(hidden))
        # zero final layer => gamma = 1, beta = 0 exactly at construction
        self.w2 = param("film.mlp.1.W", np.zeros((2 * width, hidden)))
        self.b2 = param("film.mlp.1.b", np.zeros(2 * width))

    def params_for(self, i: int) -> FilmParams:
        return film_params(self, i)


def film_params(aug: FilmAugmentor, i: int) -> FilmParams:
    """Scale/shift pair for augmentation ``i``; pure in the module state."""
    if not 0 <= i < aug.n:
        raise IndexOutOfRange(f"augmentation index {i} outside [0, {aug.n})")
    e = narrow(aug.E, 0, i, 1)                      # (1, De)
    h = gelu(matmul(e, transpose(aug.w1)) + aug.b1)  # (1, hidden)
    out = matmul(h, transpose(aug.w2)) + aug.b2      # (1, 2C)
    c = aug.width
    gamma = narrow(out, 1, 0, c).reshape(c) + 1.0
    beta = narrow(out, 1, c, c).reshape(c)
    return FilmParams(gamma=gamma, beta=beta, index=i)


def film_apply(f: Tensor, p: FilmParams) -> Tensor:
    """Per-channel affine modulation ``gamma * f + beta`` broadcast over the
    leading (batch, token) axes."""
    if f.shape[-1] != p.gamma.shape[0]:
        raise ShapeMismatch(f"feature width {f.shape[-1]} != modulation width {p.gamma.shape[0]}")
    return f * p.gamma + p.beta


def augment_all(aug: FilmAugmentor, f: Tensor) -> tuple[Tensor, list[Tensor]]:
    """The original features (unmodified) alongside all N modulated copies."""
    return f, [film_apply(f, film_params(aug, i)) for i in range(aug.n)]
