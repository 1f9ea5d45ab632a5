"""Spatial attention overlays, channel-attention disks and integrated gradients."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import atomic_write_text, bilinear_resize
from .tensor import Tensor


@dataclass
class Attribution:
    scores: np.ndarray  # (C, H, W)
    method: str
    residual: float
    f_x: float
    f_baseline: float

    @property
    def relative_residual(self) -> float:
        denom = abs(self.f_x - self.f_baseline)
        return self.residual / denom if denom > 0 else (0.0 if self.residual == 0 else float("inf"))


@dataclass
class ChannelDisk:
    # one list per input channel of (order, j1, theta1, j2, theta2, weight)
    entries: list[list[tuple]]
    degenerate: list[bool]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["channel", "order", "j1", "theta1", "j2", "theta2", "weight"])
        for c, rows in enumerate(self.entries):
            for order, j1, t1, j2, t2, w in rows:
                writer.writerow([c, order] + ["" if v is None else v for v in (j1, t1, j2, t2)] + [repr(float(w))])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        atomic_write_text(path, self.to_csv())


def spatial_map(a_s, H: int, W: int) -> np.ndarray:
    """Upsample per-channel A^s maps, each (1, Hs, Ws), to a (C, H, W) overlay."""
    if a_s is None:
        raise ValueError("no recorded forward pass")
    maps = [np.asarray(getattr(a, "data", a), dtype=np.float64) for a in a_s]
    return np.concatenate([bilinear_resize(m.reshape(1, *m.shape[-2:]), H, W) for m in maps], axis=0)


def channel_disk(a_c, paths) -> ChannelDisk:
    """Min-max normalize A^c per input channel and tag each weight with its path.

    ``a_c`` is a sequence of length-K vectors, one per input channel.  A
    channel with all-equal weights maps to zeros and is flagged degenerate.
    """
    entries, flags = [], []
    for vec in a_c:
        vec = np.asarray(getattr(vec, "data", vec), dtype=np.float64).reshape(-1)
        if len(vec) != len(paths):
            raise ValueError(f"A^c has {len(vec)} entries, path table has {len(paths)}")
        lo, hi = vec.min(), vec.max()
        flat = hi == lo
        norm = np.zeros_like(vec) if flat else (vec - lo) / (hi - lo)
        entries.append([tuple(p) + (float(w),) for p, w in zip(paths, norm)])
        flags.append(bool(flat))
    return ChannelDisk(entries, flags)


def attention_maps(model, x: np.ndarray) -> tuple[np.ndarray, ChannelDisk]:
    """Run one (C, H, W) sample through ``model`` in eval mode and collect both views."""
    model.eval()
    model.forward(Tensor(np.asarray(x, dtype=model.dtype)[None]))
    outs = model.last_attention
    if outs is None:
        raise ValueError("no recorded forward pass")
    cfg = model.config
    overlay = spatial_map([o.spatial_map.data[0] for o in outs], cfg.H, cfg.W)
    disk = channel_disk([o.channel_weights.data[0] for o in outs], model.paths)
    return overlay, disk


def integrated_gradients(f, x: np.ndarray, steps: int = 64, batch: int = 8, dtype=None) -> Attribution:
    """Integrated gradients from an all-zero baseline, midpoint Riemann rule.

    ``f`` maps a (B, C, H, W) tensor to (B, 1) outputs (a frozen model).  The
    completeness residual ``|sum(IG) - (f(x) - f(0))|`` is recorded.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.asarray(x)
    dtype = dtype or x.dtype
    x = x.astype(dtype)
    alphas = (np.arange(steps) + 0.5) / steps
    total = np.zeros(x.shape, dtype=np.float64)
    for start in range(0, steps, batch):
        a = alphas[start:start + batch].astype(dtype)
        path = Tensor((a[:, None, None, None] * x[None]).astype(dtype), requires_grad=True)
        out = f(path)
        T.backward(T.tsum(out), inputs=[path])
        if not np.all(np.isfinite(path.grad)):
            raise FloatingPointError("non-finite gradients along the integration path")
        total += path.grad.astype(np.float64).sum(axis=0)
    scores = x.astype(np.float64) * total / steps
    f_x = float(f(Tensor(x[None])).data.reshape(-1)[0])
    f_0 = float(f(Tensor(np.zeros_like(x)[None])).data.reshape(-1)[0])
    residual = abs(float(scores.sum()) - (f_x - f_0))
    return Attribution(scores, "integrated_gradients", residual, f_x, f_0)


def model_integrated_gradients(model, x: np.ndarray, steps: int = 64, batch: int = 8) -> Attribution:
    model.eval()
    return integrated_gradients(model.forward, np.asarray(x, dtype=model.dtype), steps, batch)
