"""Per-input-channel attention over normalized scattering coefficients.

One :class:`AttentionModule` handles the K coefficient maps of a single
input channel: standardize each path, reweight paths with a
squeeze-and-excitation gate, reweight locations with a dilated-convolution
saliency map, then blend the attended and plain coefficients with a
learnable scalar clamped to [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

NORM_EPS = 1e-5
NORM_MOMENTUM = 0.1
REDUCTION = 16
DILATIONS = (1, 2, 3)


@dataclass
class NormStats:
    """Running per-path mean and (biased) variance."""

    mean: np.ndarray
    var: np.ndarray
    eps: float = NORM_EPS
    momentum: float = NORM_MOMENTUM

    @classmethod
    def fresh(cls, K: int, dtype=np.float32) -> "NormStats":
        return cls(np.zeros(K, dtype=dtype), np.ones(K, dtype=dtype))


def normalize_coeffs(s: Tensor, stats: NormStats, training: bool) -> Tensor:
    """Standardize (B, K, Hs, Ws) coefficients per path over batch and space.

    Training mode uses batch moments and updates the running statistics;
    eval mode uses the running statistics.  No learnable affine.
    """
    if training:
        mu = T.mean(s, axis=(0, 2, 3), keepdims=True)
        centered = s - mu
        var = T.mean(centered * centered, axis=(0, 2, 3), keepdims=True)
        m = stats.momentum
        stats.mean = ((1 - m) * stats.mean + m * mu.data.reshape(-1)).astype(stats.mean.dtype)
        stats.var = ((1 - m) * stats.var + m * var.data.reshape(-1)).astype(stats.var.dtype)
        return centered / T.sqrt(var + stats.eps)
    mu = stats.mean.reshape(1, -1, 1, 1).astype(s.dtype)
    inv = (1.0 / np.sqrt(stats.var + stats.eps)).reshape(1, -1, 1, 1).astype(s.dtype)
    return (s - mu) * inv


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def bottleneck_width(K: int, r: int = REDUCTION) -> int:
    return max(1, K // r)


class AttentionParams:
    """Trainable state of one attention module."""

    def __init__(self, K: int, r: int = REDUCTION, rng: np.random.Generator | None = None, dtype=np.float32):
        rng = np.random.default_rng(0) if rng is None else rng
        hidden = bottleneck_width(K, r)
        self.K, self.r = K, r
        self.v = _uniform(rng, (K, hidden), K, dtype)
        self.w = _uniform(rng, (hidden, K), hidden, dtype)
        self.reduce_w = _uniform(rng, (r, K, 1, 1), K, dtype)
        self.reduce_b = _zeros((r,), dtype)
        self.dilated_w = [_uniform(rng, (r, r, 3, 3), 9 * r, dtype) for _ in DILATIONS]
        self.dilated_b = [_zeros((r,), dtype) for _ in DILATIONS]
        self.merge_w = _uniform(rng, (1, 4 * r, 1, 1), 4 * r, dtype)
        self.merge_b = _zeros((1,), dtype)
        self.w1 = Tensor(np.array([0.5], dtype=dtype), requires_grad=True)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        items = [("v", self.v), ("w", self.w), ("reduce_w", self.reduce_w), ("reduce_b", self.reduce_b)]
        for d, (wt, bs) in enumerate(zip(self.dilated_w, self.dilated_b)):
            items += [(f"dilated{d}_w", wt), (f"dilated{d}_b", bs)]
        items += [("merge_w", self.merge_w), ("merge_b", self.merge_b), ("w1", self.w1)]
        return items

    def clamp_fusion(self) -> None:
        np.clip(self.w1.data, 0.0, 1.0, out=self.w1.data)


def channel_attention(s: Tensor, params: AttentionParams) -> tuple[Tensor, Tensor]:
    """Squeeze-and-excitation gate.  Returns A^c (B, K) and U^c (B, K, Hs, Ws)."""
    if s.ndim != 4 or s.shape[1] != params.K:
        raise ValueError(f"expected (B, {params.K}, Hs, Ws), got {s.shape}")
    z = T.global_avg_pool(s)
    a = T.sigmoid(T.relu(z @ params.v) @ params.w)
    return a, s * a.reshape(a.shape + (1, 1))


def spatial_attention(s: Tensor, u_c: Tensor, params: AttentionParams) -> tuple[Tensor, Tensor]:
    """Dilated-context saliency.  Returns A^s (B, 1, Hs, Ws) and U^s = A^s * U^c."""
    if s.shape != u_c.shape:
        raise ValueError(f"shape mismatch: {s.shape} vs {u_c.shape}")
    if s.shape[1] != params.K:
        raise ValueError(f"expected {params.K} coefficient maps, got {s.shape[1]}")
    m0 = T.conv2d(s, params.reduce_w, params.reduce_b)
    maps = [m0] + [T.conv2d(m0, wt, bs, dilation=d)
                   for d, wt, bs in zip(DILATIONS, params.dilated_w, params.dilated_b)]
    a_s = T.conv2d(T.concat(maps, axis=1), params.merge_w, params.merge_b)
    return a_s, a_s * u_c


def fuse(u_s: Tensor, s: Tensor, w1) -> Tensor:
    """Convex blend ``w1 * U^s + (1 - w1) * S``."""
    w1 = w1 if isinstance(w1, Tensor) else Tensor(np.asarray(w1, dtype=s.dtype))
    return w1 * u_s + (1.0 - w1) * s


@dataclass
class AttentionOutput:
    fused: Tensor
    normalized: Tensor
    channel_weights: Tensor  # A^c, (B, K)
    spatial_map: Tensor  # A^s, (B, 1, Hs, Ws)
    u_c: Tensor
    u_s: Tensor


class AttentionModule:
    def __init__(self, K: int, r: int = REDUCTION, rng=None, dtype=np.float32):
        self.params = AttentionParams(K, r, rng, dtype)
        self.stats = NormStats.fresh(K, dtype)

    def __call__(self, s: Tensor, training: bool = False) -> AttentionOutput:
        s_tilde = normalize_coeffs(s, self.stats, training)
        a_c, u_c = channel_attention(s_tilde, self.params)
        a_s, u_s = spatial_attention(s_tilde, u_c, self.params)
        fused = fuse(u_s, s_tilde, self.params.w1)
        return AttentionOutput(fused, s_tilde, a_c, a_s, u_c, u_s)
