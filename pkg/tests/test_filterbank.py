import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attnscat.data import load_tensor_file
from attnscat.filterbank import (build_morlet_bank, export_bank, frequency_grid, gabor_hat, littlewood_paley,
                                 littlewood_paley_map, spatial_filters)


def test_standard_bank_has_18_bandpass_filters():
    bank = build_morlet_bank(3, 6, 128, 128)
    assert bank.psi_hat.shape == (3, 6, 128, 128)
    assert bank.n_bandpass == 18
    assert bank.phi_hat.shape == (128, 128)


def test_minimal_bank():
    bank = build_morlet_bank(1, 1, 8, 8)
    assert bank.psi_hat.shape == (1, 1, 8, 8) and bank.phi_hat.shape == (8, 8)


@pytest.mark.parametrize("J,L,H,W", [(1, 1, 8, 8), (1, 2, 8, 8), (2, 4, 32, 16), (3, 6, 64, 64), (3, 6, 128, 128)])
def test_dc_values(J, L, H, W):
    bank = build_morlet_bank(J, L, H, W)
    assert np.max(np.abs(bank.psi_hat[..., 0, 0])) <= 1e-6
    assert bank.phi_hat[0, 0] == 1.0


@pytest.mark.parametrize("size", [64, 128])
@pytest.mark.parametrize("J,L", [(1, 2), (2, 4), (3, 6)])
def test_littlewood_paley_upper_bound(J, L, size):
    lo, hi = littlewood_paley(build_morlet_bank(J, L, size, size))
    assert hi <= 1.001
    assert 0 <= lo <= hi


def test_littlewood_paley_annulus_floor():
    bank = build_morlet_bank(3, 6, 128, 128)
    wy, wx = frequency_grid(128, 128)
    r = np.hypot(wy, wx)
    annulus = (r >= np.pi / 2 ** 3) & (r <= 0.8 * np.pi)
    assert littlewood_paley_map(bank)[annulus].min() >= 0.3


def test_littlewood_paley_at_dc_is_one():
    assert littlewood_paley_map(build_morlet_bank(2, 4, 32, 32))[0, 0] == 1.0


def lp_by_loops(bank):
    """Littlewood-Paley sum with -omega located by explicit index arithmetic."""
    H, W = bank.H, bank.W
    out = np.empty((H, W))
    for i in range(H):
        for k in range(W):
            total = bank.phi_hat[i, k] ** 2
            for j in range(bank.J):
                for l in range(bank.L):
                    total += 0.5 * (bank.psi_hat[j, l, i, k] ** 2 + bank.psi_hat[j, l, (-i) % H, (-k) % W] ** 2)
            out[i, k] = total
    return out


def test_littlewood_paley_matches_loop_oracle():
    bank = build_morlet_bank(2, 3, 16, 8)
    np.testing.assert_allclose(littlewood_paley_map(bank), lp_by_loops(bank), atol=1e-14)


@pytest.mark.parametrize("args", [(0, 6, 64, 64), (3, 0, 64, 64), (4, 6, 8, 64), (3, 6, 48, 64), (3, 6, 64, 100)])
def test_invalid_banks(args):
    with pytest.raises(ValueError):
        build_morlet_bank(*args)


def test_bank_is_cached_and_read_only():
    a, b = build_morlet_bank(2, 4, 32, 32), build_morlet_bank(2, 4, 32, 32)
    assert a is b
    with pytest.raises(ValueError):
        a.psi_hat[0, 0, 0, 0] = 1.0


def spatial_gabor_spectrum(H, W, sigma, theta, xi, slant):
    """DFT of the spatially periodized Gabor atom (Poisson summation oracle).

    The atom is ``exp(-(a^2 + slant^2 b^2) / (2 sigma^2)) exp(i xi a)`` with
    ``a`` along ``theta`` and ``b`` across it; its continuous transform has
    peak ``2 pi sigma^2 / slant``, which is divided out.
    """
    y = np.arange(H)[:, None]
    x = np.arange(W)[None, :]
    f = np.zeros((H, W), dtype=complex)
    for ny in range(-3, 4):
        for nx in range(-3, 4):
            yy, xx = y + ny * H, x + nx * W
            a = np.cos(theta) * yy + np.sin(theta) * xx
            b = -np.sin(theta) * yy + np.cos(theta) * xx
            f += np.exp(-(a ** 2 + slant ** 2 * b ** 2) / (2 * sigma ** 2)) * np.exp(1j * xi * a)
    return np.fft.fft2(f) * slant / (2 * np.pi * sigma ** 2)


@pytest.mark.parametrize("sigma,theta,xi,slant", [
    (0.8, 0.3, 3 * np.pi / 4, 4 / 6), (1.6, 1.0, 3 * np.pi / 8, 1.0), (3.2, 2.5, 3 * np.pi / 16, 0.5),
    (1.6, 0.0, 0.0, 1.0)])
def test_gabor_spectrum_matches_spatial_oracle(sigma, theta, xi, slant):
    ours = gabor_hat(32, 32, sigma, theta, xi, slant)
    np.testing.assert_allclose(ours, spatial_gabor_spectrum(32, 32, sigma, theta, xi, slant), atol=1e-12)


def test_bandpass_parameters_follow_dyadic_scheme():
    # psi_{j,l} is the unit-peak Morlet with sigma 0.8*2^j, xi (3pi/4)/2^j, angle l*pi/L, slant 4/L
    J, L, N = 3, 6, 64
    bank = build_morlet_bank(J, L, N, N)
    for j in range(J):
        for l in range(L):
            sigma, xi, theta = 0.8 * 2 ** j, 0.75 * np.pi / 2 ** j, l * np.pi / L
            gab = spatial_gabor_spectrum(N, N, sigma, theta, xi, 4 / L).real
            env = spatial_gabor_spectrum(N, N, sigma, theta, 0.0, 4 / L).real
            morlet = gab - gab[0, 0] / env[0, 0] * env
            np.testing.assert_allclose(bank.psi_hat[j, l], bank.psi_scale * morlet, atol=1e-10)


def test_lowpass_is_dilated_gaussian():
    bank = build_morlet_bank(3, 4, 64, 64)
    ref = spatial_gabor_spectrum(64, 64, 0.8 * 2 ** 2, 0.0, 0.0, 1.0).real
    np.testing.assert_allclose(bank.phi_hat, ref / ref[0, 0], atol=1e-12)


def smooth_radial_profile(spectrum, centres, width):
    wy, wx = frequency_grid(*spectrum.shape)
    r = np.hypot(wy, wx)
    kernel = np.exp(-(r[None] - centres[:, None, None]) ** 2 / (2 * width ** 2))
    return (kernel * spectrum ** 2).sum(axis=(1, 2))


@pytest.mark.parametrize("J,L,N", [(3, 6, 128), (2, 4, 64), (3, 8, 64)])
def test_rotation_consistency(J, L, N):
    bank = build_morlet_bank(J, L, N, N)
    centres = np.linspace(0, np.pi, 40)
    # j = 0 reaches the Nyquist boundary, where the square frequency cell
    # is not rotation invariant; coarser scales sit well inside it
    for j in range(1, J):
        ref = smooth_radial_profile(bank.psi_hat[j, 0], centres, centres[1])
        for l in range(1, L):
            prof = smooth_radial_profile(bank.psi_hat[j, l], centres, centres[1])
            assert np.max(np.abs(prof - ref)) / ref.max() <= 1e-4


@pytest.mark.parametrize("J,L,N", [(3, 6, 64), (2, 4, 32)])
def test_quarter_turn_is_exact(J, L, N):
    # rotation by pi/2 maps the DFT grid onto itself: (wy, wx) -> (-wx, wy)
    bank = build_morlet_bank(J, L, N, N)
    q = L // 2
    for j in range(J):
        rotated = np.empty((N, N))
        for i in range(N):
            for k in range(N):
                rotated[i, k] = bank.psi_hat[j, 0, k, (-i) % N]
        np.testing.assert_allclose(bank.psi_hat[j, q], rotated, atol=1e-12)


@pytest.mark.parametrize("J,L,N", [(3, 6, 128), (4, 6, 128), (3, 6, 64)])
def test_scale_consistency(J, L, N):
    bank = build_morlet_bank(J, L, N, N)
    wy, wx = frequency_grid(N, N)
    r = np.hypot(wy, wx).reshape(-1)
    for l in range(L):
        peaks = [r[np.argmax(bank.psi_hat[j, l] ** 2)] for j in range(J)]
        for j in range(J - 1):
            assert peaks[j + 1] / peaks[j] == pytest.approx(0.5, rel=0.1)


def test_spatial_filters_invert_spectra():
    bank = build_morlet_bank(1, 2, 8, 8)
    psi, phi = spatial_filters(bank)
    np.testing.assert_allclose(np.fft.fft2(psi), bank.psi_hat, atol=1e-12)
    np.testing.assert_allclose(np.fft.fft2(phi), bank.phi_hat, atol=1e-12)
    assert phi.sum() == pytest.approx(1.0)


def test_export_bank(tmp_path):
    bank = build_morlet_bank(2, 3, 16, 16)
    export_bank(bank, tmp_path / "bank.stns")
    arr = load_tensor_file(tmp_path / "bank.stns")
    assert arr.shape == (7, 16, 16) and arr.dtype == np.float64
    np.testing.assert_array_equal(arr[:6], bank.psi_hat.reshape(6, 16, 16))
    np.testing.assert_array_equal(arr[6], bank.phi_hat)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(1, 8), st.sampled_from([8, 16, 32]), st.sampled_from([8, 16, 32]))
def test_bank_invariants_property(J, L, H, W):
    if 2 ** J > min(H, W):
        with pytest.raises(ValueError):
            build_morlet_bank(J, L, H, W)
        return
    bank = build_morlet_bank(J, L, H, W)
    assert bank.psi_hat.shape == (J, L, H, W)
    assert np.max(np.abs(bank.psi_hat[..., 0, 0])) <= 1e-6
    assert bank.phi_hat[0, 0] == 1.0
    assert littlewood_paley(bank)[1] <= 1.001
