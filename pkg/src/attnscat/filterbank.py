"""Fourier-domain Morlet filter banks.

Filters are sampled from their analytic Fourier expressions on the DFT grid
``2*pi*fftfreq(N)`` with aliases summed over +-2 periods, which makes them
exactly compatible with periodic (FFT) convolution.  Frequency axis 0 is the
row (vertical) frequency, axis 1 the column frequency; orientation ``theta``
measures the wave vector angle from the row axis.

The Morlet envelope is symmetric, so every spectrum is real-valued and is
stored as a real array.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .tensor import is_power_of_two

MORLET_XI = 3 * np.pi / 4
MORLET_SIGMA = 0.8
ALIAS_PERIODS = 2


@dataclass(frozen=True, eq=False)
class FilterBank:
    J: int
    L: int
    H: int
    W: int
    psi_hat: np.ndarray  # (J, L, H, W)
    phi_hat: np.ndarray  # (H, W)
    psi_scale: float = 1.0
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def n_bandpass(self) -> int:
        return self.J * self.L

    def psi(self, j: int, theta: int) -> np.ndarray:
        return self.psi_hat[j, theta]

    def as_dtype(self, dtype) -> tuple[np.ndarray, np.ndarray]:
        """Spectra cast to ``dtype`` (float32/float64), memoized."""
        key = np.dtype(dtype).str
        if key not in self._cache:
            self._cache[key] = (self.psi_hat.astype(dtype), self.phi_hat.astype(dtype))
        return self._cache[key]


def frequency_grid(H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    wy = 2 * np.pi * np.fft.fftfreq(H)[:, None]
    wx = 2 * np.pi * np.fft.fftfreq(W)[None, :]
    return np.broadcast_to(wy, (H, W)), np.broadcast_to(wx, (H, W))


def gabor_hat(H: int, W: int, sigma: float, theta: float, xi: float, slant: float = 1.0,
              periods: int = ALIAS_PERIODS) -> np.ndarray:
    """Periodized spectrum of a unit-peak anisotropic Gabor atom.

    The spatial atom is a Gaussian of width ``sigma`` along ``theta`` and
    ``sigma / slant`` across it, modulated at frequency ``xi`` along ``theta``.
    """
    wy, wx = frequency_grid(H, W)
    c, s = np.cos(theta), np.sin(theta)
    out = np.zeros((H, W))
    for ky in range(-periods, periods + 1):
        for kx in range(-periods, periods + 1):
            oy = wy + 2 * np.pi * ky
            ox = wx + 2 * np.pi * kx
            along = c * oy + s * ox - xi
            across = -s * oy + c * ox
            out += np.exp(-0.5 * sigma ** 2 * (along ** 2 + (across / slant) ** 2))
    return out


def morlet_hat(H: int, W: int, sigma: float, theta: float, xi: float, slant: float) -> np.ndarray:
    """Gabor spectrum minus the Gaussian multiple that cancels its DC value."""
    gab = gabor_hat(H, W, sigma, theta, xi, slant)
    env = gabor_hat(H, W, sigma, theta, 0.0, slant)
    out = gab - (gab[0, 0] / env[0, 0]) * env
    out[0, 0] = 0.0
    return out


def _negate_freq(a: np.ndarray) -> np.ndarray:
    """Map ``a(w)`` to ``a(-w)`` on the DFT grid."""
    return np.roll(np.flip(a, axis=(-2, -1)), shift=(1, 1), axis=(-2, -1))


def lp_sum(psi_hat: np.ndarray, phi_hat: np.ndarray) -> np.ndarray:
    bands = psi_hat.reshape(-1, *phi_hat.shape)
    sym = 0.5 * ((bands ** 2).sum(axis=0) + (_negate_freq(bands) ** 2).sum(axis=0))
    return phi_hat ** 2 + sym


def build_morlet_bank(J: int, L: int, H: int, W: int) -> FilterBank:
    """Morlet bank with J scales and L orientations in [0, pi).

    Bandpass ``(j, l)`` has width ``0.8 * 2**j``, centre frequency
    ``(3*pi/4) / 2**j`` and angle ``l*pi/L``; the lowpass is a Gaussian of
    width ``0.8 * 2**(J-1)`` normalized to 1 at DC.  The bandpasses share one
    scale factor (at most 1) chosen so the Littlewood-Paley sum never
    exceeds 1.  Banks are cached per ``(J, L, H, W)``.
    """
    return _build_cached(int(J), int(L), int(H), int(W))


@lru_cache(maxsize=32)
def _build_cached(J: int, L: int, H: int, W: int) -> FilterBank:
    if J < 1 or L < 1:
        raise ValueError(f"J and L must be >= 1, got J={J}, L={L}")
    if not (is_power_of_two(H) and is_power_of_two(W)):
        raise ValueError(f"H and W must be powers of two, got {H}x{W}")
    if 2 ** J > min(H, W):
        raise ValueError(f"2**J = {2 ** J} exceeds min(H, W) = {min(H, W)}")

    psi = np.empty((J, L, H, W))
    for j in range(J):
        for l in range(L):
            psi[j, l] = morlet_hat(H, W, MORLET_SIGMA * 2 ** j, l * np.pi / L,
                                   MORLET_XI / 2 ** j, 4.0 / L)
    phi = gabor_hat(H, W, MORLET_SIGMA * 2 ** (J - 1), 0.0, 0.0)
    phi = phi / phi[0, 0]

    band = lp_sum(psi, np.zeros_like(phi))
    room = 1.0 - phi ** 2
    live = band > 1e-12
    scale2 = min(1.0, float(np.min(room[live] / band[live])))
    # shave a few ulps so rounding cannot push the sum above 1
    scale = np.sqrt(scale2) * (1 - 1e-12)
    psi *= scale
    psi.setflags(write=False)
    phi.setflags(write=False)
    return FilterBank(J, L, H, W, psi, phi, float(scale))


def littlewood_paley(bank: FilterBank) -> tuple[float, float]:
    """Pointwise min and max of the symmetrized Littlewood-Paley sum."""
    total = lp_sum(bank.psi_hat, bank.phi_hat)
    return float(total.min()), float(total.max())


def littlewood_paley_map(bank: FilterBank) -> np.ndarray:
    return lp_sum(bank.psi_hat, bank.phi_hat)


def spatial_filters(bank: FilterBank) -> tuple[np.ndarray, np.ndarray]:
    """Spatial-domain filters by explicit inverse DFT sums (no FFT).

    Slow, O((HW)^2); meant for small banks and reference computations.
    """
    H, W = bank.H, bank.W
    ey = np.exp(2j * np.pi * np.outer(np.arange(H), np.arange(H)) / H)
    ex = np.exp(2j * np.pi * np.outer(np.arange(W), np.arange(W)) / W)

    def inv(spectrum):
        return ey @ spectrum @ ex.T / (H * W)

    psi = np.array([[inv(bank.psi_hat[j, l]) for l in range(bank.L)] for j in range(bank.J)])
    return psi, inv(bank.phi_hat).real


def export_bank(bank: FilterBank, path) -> None:
    """Write all spectra as one (J*L + 1, H, W) real64 tensor file, lowpass last."""
    from .data import save_tensor_file

    stacked = np.concatenate([bank.psi_hat.reshape(-1, bank.H, bank.W), bank.phi_hat[None]], axis=0)
    save_tensor_file(path, stacked.astype(np.float64))
