"""Attention fusion: self-attention and reference cross-attention in
parallel, sharing one query, summed with an inference-time strength knob.

Both branches run through the same scaled-dot kernel (one shared sqrt(d_k)
scaling). The reference branch has its own key/value projections; with
strength 0 it is skipped entirely, so the output equals plain
self-attention exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import Tensor
from .errors import InvalidConfigError, InvalidShapeError


@dataclass
class FusionSite:
    """Projection set for one attention site; channels -> channels maps."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wkref: Tensor
    wvref: Tensor
    wo: Tensor
    n_heads: int
    strength: float = 1.0  # cross-branch weight (lambda), >= 0

    @property
    def channels(self) -> int:
        return self.wq.data.shape[0]

    def set_strength(self, value: float):
        if value < 0:
            raise InvalidConfigError(f"fusion strength must be >= 0, got {value}")
        self.strength = float(value)

    def params(self):
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv,
                "wkref": self.wkref, "wvref": self.wvref, "wo": self.wo}


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(B, n, c) -> (B, h, n, c/h)."""
    b, n, c = x.data.shape
    if c % n_heads:
        raise InvalidConfigError(f"{n_heads} heads do not divide {c} channels")
    return ops.transpose(ops.reshape(x, (b, n, n_heads, c // n_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """(B, h, n, d) -> (B, n, h*d)."""
    b, h, n, d = x.data.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b, n, h * d))


def fused_attention(x_gen: Tensor, x_ref: Tensor | None, site: FusionSite) -> Tensor:
    """Per head: attn(Q,K,V) + strength * attn(Q,K_ref,V_ref); then W_out.

    x_gen: (B, n, c) tokens from the generation stream.
    x_ref: (B, m, c) reference tokens, or None to run self-attention only.
    The residual connection is the caller's job.
    """
    if x_gen.data.ndim != 3 or x_gen.data.shape[-1] != site.channels:
        raise InvalidShapeError(
            f"fusion input must be (B, n, {site.channels}), got {x_gen.data.shape}"
        )
    q = split_heads(ops.matmul(x_gen, site.wq), site.n_heads)
    k = split_heads(ops.matmul(x_gen, site.wk), site.n_heads)
    v = split_heads(ops.matmul(x_gen, site.wv), site.n_heads)
    out = ops.scaled_dot_attention(q, k, v)
    if x_ref is not None and site.strength != 0.0:
        if x_ref.data.ndim != 3 or x_ref.data.shape[-1] != site.channels:
            raise InvalidShapeError(
                f"reference tokens must be (B, m, {site.channels}), got {x_ref.data.shape}"
            )
        kr = split_heads(ops.matmul(x_ref, site.wkref), site.n_heads)
        vr = split_heads(ops.matmul(x_ref, site.wvref), site.n_heads)
        cross = ops.scaled_dot_attention(q, kr, vr)
        out = ops.add(out, ops.scale(cross, site.strength))
    return ops.matmul(merge_heads(out), site.wo)


def init_site(channels: int, n_heads: int, rng: np.random.Generator, dtype=np.float32) -> FusionSite:
    """Glorot-scaled square projections; output projection included."""
    def proj():
        std = 1.0 / np.sqrt(channels)
        return Tensor(rng.standard_normal((channels, channels)).astype(dtype) * dtype(std),
                      requires_grad=True)

    if channels % n_heads:
        raise InvalidConfigError(f"{n_heads} heads do not divide {channels} channels")
    return FusionSite(wq=proj(), wk=proj(), wv=proj(), wkref=proj(), wvref=proj(),
                      wo=proj(), n_heads=n_heads)
