"""Low-rank adapters for frozen linear projections, plus the parameter
registry that tags every tensor in a model as frozen / lora / aug / head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .tensor import ShapeMismatch, Tensor, matmul, transpose


class RankTooLarge(ValueError):
    pass


class DuplicateParameter(ValueError):
    pass


TAGS = ("frozen", "lora", "aug", "head")


@dataclass
class LoraAdapter:
    """Frozen base matrix plus trainable low-rank update.

    The adapted map is ``x -> x @ (W0 + scale * B @ A)^T``; ``B`` starts at
    zero so a fresh adapter is exactly the frozen map.
    """

    W0: Tensor  # (d, k), frozen
    A: Tensor   # (r, k), trainable
    B: Tensor   # (d, r), trainable
    scale: float = 1.0

    @property
    def rank(self) -> int:
        return self.A.shape[0]


def init_lora(d: int, k: int, r: int, scale: float = 1.0, seed: int = 0,
              dtype=np.float32, w0: Tensor | None = None,
              gen: np.random.Generator | None = None) -> LoraAdapter:
    """Build an adapter: A ~ Gaussian(0, 1/r), B = 0, so B@A = 0 initially.

    ``w0`` supplies the frozen base matrix; when omitted a zero base is used
    (useful for standalone tests). ``gen`` overrides the seed-derived stream.
    """
    if r < 1:
        raise RankTooLarge(f"rank must be >= 1, got {r}")
    if r > min(d, k):
        raise RankTooLarge(f"rank {r} exceeds min(d, k) = {min(d, k)}")
    if gen is None:
        gen = rng.stream(seed, "lora_init")
    a = gen.normal(0.0, 1.0 / np.sqrt(r), size=(r, k))
    adapter = LoraAdapter(
        W0=w0 if w0 is not None else Tensor(np.zeros((d, k), dtype=dtype)),
        A=Tensor(a.astype(dtype), requires_grad=True),
        B=Tensor(np.zeros((d, r), dtype=dtype), requires_grad=True),
        scale=float(scale),
    )
    if adapter.W0.shape != (d, k):
        raise ShapeMismatch(f"base matrix shape {adapter.W0.shape} != ({d}, {k})")
    return adapter


def lora_forward(x: Tensor, a: LoraAdapter) -> Tensor:
    """``x @ W0^T + scale * (x @ A^T) @ B^T``. Gradients reach A and B only."""
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, x.shape[0])
    if x.shape[-1] != a.W0.shape[1]:
        raise ShapeMismatch(f"input width {x.shape[-1]} != adapter k {a.W0.shape[1]}")
    base = matmul(x, transpose(a.W0))
    update = matmul(matmul(x, transpose(a.A)), transpose(a.B))
    out = base + update * a.scale
    return out.reshape(out.shape[-1]) if squeeze else out


class ParameterRegistry:
    """Ordered name -> (tensor, tag) map. Every parameter appears once; the
    optimizer only ever sees the non-frozen tags."""

    def __init__(self):
        self._entries: dict[str, tuple[Tensor, str]] = {}

    def add(self, name: str, tensor: Tensor, tag: str) -> Tensor:
        if tag not in TAGS:
            raise ValueError(f"unknown tag {tag!r}")
        if name in self._entries:
            raise DuplicateParameter(name)
        if tag == "frozen" and tensor.requires_grad:
            raise ValueError(f"frozen parameter {name} must not require grad")
        if tag != "frozen" and not tensor.requires_grad:
            raise ValueError(f"trainable parameter {name} must require grad")
        self._entries[name] = (tensor, tag)
        return tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, name: str) -> Tensor:
        return self._entries[name][0]

    def tag(self, name: str) -> str:
        return self._entries[name][1]

    def items(self, tags: tuple[str, ...] | None = None):
        for name, (tensor, tag) in self._entries.items():
            if tags is None or tag in tags:
                yield name, tensor

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, (t, tag) in self._entries.items() if tag != "frozen"}

    def frozen(self) -> dict[str, Tensor]:
        return {n: t for n, (t, tag) in self._entries.items() if tag == "frozen"}

    def names(self) -> list[str]:
        return list(self._entries)


def count_trainable(registry: ParameterRegistry) -> dict[str, int]:
    """Exact scalar counts of trainable parameters by tag."""
    counts = {"lora": 0, "aug": 0, "head": 0}
    for name, (tensor, tag) in registry._entries.items():
        if tag in counts:
            counts[tag] += tensor.size
    counts["total"] = counts["lora"] + counts["aug"] + counts["head"]
    return counts
