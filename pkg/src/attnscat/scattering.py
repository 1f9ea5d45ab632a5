"""Second-order 2D scattering cascade built from differentiable tensor ops."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .data import atomic_write_text
from .filterbank import FilterBank
from .tensor import Tensor

Path = tuple  # (order, j1, theta1, j2, theta2), unused entries None


def n_paths(J: int, L: int) -> int:
    return 1 + L * J + (J * (J - 1) // 2) * L * L


def iter_paths(J: int, L: int) -> Iterator[Path]:
    """Paths in channel order: order 0, then order 1 by (j1, theta1), then
    order 2 by (j1, theta1, j2, theta2) with j1 < j2."""
    yield (0, None, None, None, None)
    for j1 in range(J):
        for t1 in range(L):
            yield (1, j1, t1, None, None)
    for j1 in range(J):
        for t1 in range(L):
            for j2 in range(j1 + 1, J):
                for t2 in range(L):
                    yield (2, j1, t1, j2, t2)


def path_table(J: int, L: int) -> list[Path]:
    return list(iter_paths(J, L))


def path_index(order: int, j1=None, theta1=None, j2=None, theta2=None, *, J: int, L: int) -> int:
    """Channel index of a scattering path (inverse of :func:`path_table`)."""

    def check(name, value, hi):
        if value is None or not 0 <= value < hi:
            raise ValueError(f"{name}={value} outside [0, {hi})")

    if order == 0:
        return 0
    if order == 1:
        check("j1", j1, J)
        check("theta1", theta1, L)
        return 1 + j1 * L + theta1
    if order == 2:
        check("j1", j1, J)
        check("theta1", theta1, L)
        check("j2", j2, J)
        check("theta2", theta2, L)
        if j1 >= j2:
            raise ValueError(f"second-order paths need j1 < j2, got j1={j1}, j2={j2}")
        before = sum(L * (J - a - 1) * L for a in range(j1))
        inner = theta1 * (J - j1 - 1) * L + (j2 - j1 - 1) * L + theta2
        return 1 + J * L + before + inner
    raise ValueError(f"order must be 0, 1 or 2, got {order}")


@dataclass
class ScatteringCoeffs:
    values: Tensor  # (B, C, K, H / 2**J, W / 2**J)
    paths: list[Path]
    J: int
    L: int

    @property
    def K(self) -> int:
        return len(self.paths)


def write_path_table(path, paths: list[Path]) -> None:
    """CSV sidecar ``k,order,j1,theta1,j2,theta2``; unused fields left empty."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["k", "order", "j1", "theta1", "j2", "theta2"])
    for k, p in enumerate(paths):
        writer.writerow([k] + ["" if v is None else v for v in p])
    atomic_write_text(path, buf.getvalue())


def _lowpass_decimate(spectrum: Tensor, phi: np.ndarray, J: int) -> Tensor:
    """Real part of ``ifft2(spectrum * phi)`` subsampled by 2**J.

    Subsampling in space is folding in frequency, so the inverse transform
    runs on the small grid.  Identical to subsampling the full-size result.
    """
    f = 2 ** J
    y = spectrum * phi
    *lead, h, w = y.shape
    folded = y.reshape(*lead, f, h // f, f, w // f).sum(axis=(-4, -2))
    return T.real(T.ifft2(folded)) * (1.0 / (f * f))


def scatter2d(x: Tensor, bank: FilterBank) -> ScatteringCoeffs:
    """Scattering coefficients of a real (B, C, H, W) batch, per channel.

    Output channel order follows :func:`path_table`.  Convolutions are
    periodic; every step is differentiable with respect to ``x``.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.is_complex:
        raise TypeError("scatter2d needs a real input")
    if x.ndim != 4:
        raise ValueError(f"expected (B, C, H, W), got shape {x.shape}")
    if x.shape[-2:] != (bank.H, bank.W):
        raise ValueError(f"input spatial dims {x.shape[-2:]} do not match bank {(bank.H, bank.W)}")
    J, L = bank.J, bank.L
    psi, phi = bank.as_dtype(x.dtype)

    xf = T.fft2(x)  # (B, C, H, W)
    s0 = _lowpass_decimate(xf, phi, J)[:, :, None]
    U1 = T.complex_modulus(T.ifft2(xf[:, :, None, None] * psi))  # (B, C, J, L, H, W)
    U1f = T.fft2(U1)
    s1 = _lowpass_decimate(U1f, phi, J)
    B, C = x.shape[:2]
    hs, ws = s0.shape[-2:]
    parts = [s0, s1.reshape(B, C, J * L, hs, ws)]
    for j1 in range(J - 1):
        # (B, C, L, 1, 1, H, W) * (J - j1 - 1, L, H, W) -> (B, C, L, nj2, L, H, W)
        prod = U1f[:, :, j1][:, :, :, None, None] * psi[j1 + 1:]
        U2 = T.complex_modulus(T.ifft2(prod))
        s2 = _lowpass_decimate(T.fft2(U2), phi, J)
        parts.append(s2.reshape(B, C, -1, hs, ws))
    values = T.concat(parts, axis=2)
    return ScatteringCoeffs(values, path_table(J, L), J, L)


def scatter_numpy(x: np.ndarray, bank: FilterBank, chunk: int = 16) -> np.ndarray:
    """Gradient-free batched scattering, processed ``chunk`` samples at a time."""
    x = np.asarray(x)
    out = [scatter2d(Tensor(x[i:i + chunk]), bank).values.data for i in range(0, len(x), chunk)]
    return np.concatenate(out, axis=0)
