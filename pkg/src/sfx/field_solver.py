"""Split-step multislice propagation of the emitted and pump fields.

One slice step maps plane ``iz`` to plane ``iz + 1``::

    Omega+(iz+1) = G  * IFFT[K  * FFT Omega+(iz)] + i S+
    Omega-(iz+1) = G* * IFFT[K* * FFT Omega-(iz)] - i S-

with G = exp(-mu dz / 2 - i delta k0 dz) and
K = exp(-i (kx^2 + ky^2) dz / 2 k0) times the spectral mask. Sources are
added after the kernels and are evaluated from the atomic state before
its update at the current tau (Ito ordering in z and tau).

Field arrays produced by :class:`SliceMarcher` are stacked as
``(..., which, part, s, Nx, Ny)`` with ``which`` = (+, -) and
``part`` = (det, noise).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import constants

from .atomic_model import ConfigurationError
from .grid_domain import GridSpec, spectral_mask, transverse_wavenumbers

log = logging.getLogger(__name__)

PLUS, MINUS = 0, 1
DET, NOISE = 0, 1

# 2 eps0 c |E|^2 / (hbar omega) in photons m^-2 s^-1 -> photons nm^-2 fs^-1
_SI_TO_FLUX_UNITS = 1e-18 * 1e-15


def diffraction_factor(grid: GridSpec, k0: float | None = None, mask: np.ndarray | None = None) -> np.ndarray:
    """Fresnel kernel exp(-i k_perp^2 dz / 2 k0), optionally masked."""
    k0 = grid.k0 if k0 is None else k0
    kx, ky = transverse_wavenumbers(grid)
    k2 = kx[:, None] ** 2 + ky[None, :] ** 2
    kern = np.exp(-1j * k2 * grid.dz / (2.0 * k0))
    if mask is not None:
        kern = kern * mask
    return kern


def absorption_factor(mu, dz: float, delta=0.0, k0: float = 0.0) -> np.ndarray:
    """Per-voxel factor exp(-mu dz / 2 - i delta k0 dz) for the (+) field."""
    mu = np.asarray(mu, dtype=float)
    if np.any(mu < 0):
        raise ValueError("absorption coefficient must be non-negative")
    return np.exp(-0.5 * mu * dz - 1j * np.asarray(delta) * k0 * dz)


def make_kernels(grid: GridSpec, mu_slice, delta_slice=0.0, k0: float | None = None,
                 mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Absorption/phase factor per voxel and diffraction factor per (kx, ky).

    Both refer to the (+) field; the (-) field uses their conjugates.
    """
    k0 = grid.k0 if k0 is None else k0
    return (absorption_factor(mu_slice, grid.dz, delta_slice, k0),
            diffraction_factor(grid, k0, mask))


def propagate(field, absorption, diffraction) -> np.ndarray:
    """Apply one diffraction step followed by the local absorption factor."""
    spec = np.fft.fft2(field, axes=(-2, -1))
    return absorption * np.fft.ifft2(diffraction * spec, axes=(-2, -1))


def drift_gauged_sources(pol_plus, pol_minus, drift_mask):
    """Hermitian-average the polarization sources where ``drift_mask`` holds."""
    pol_plus = np.asarray(pol_plus)
    pol_minus = np.asarray(pol_minus)
    sym_plus = 0.5 * (pol_plus + np.conj(pol_minus))
    sym_minus = 0.5 * (pol_minus + np.conj(pol_plus))
    return (np.where(drift_mask, sym_plus, pol_plus),
            np.where(drift_mask, sym_minus, pol_minus))


def sf_slice_step(plus_det, plus_noise, minus_det, minus_noise, pol_plus, pol_minus,
                  n_slice, xi_plus, xi_minus, g, drift_mask, grid: GridSpec, gamma: float,
                  mu=0.0, mask: np.ndarray | None = None, delta=0.0):
    """Advance the four emitted-field components through one slice.

    Arrays carry trailing (Nx, Ny) axes; ``pol_plus``/``pol_minus`` are the
    polarization fields of the slice, ``g`` the diffusion gauge and
    ``drift_mask`` the positions where the drift gauge applies. Pass
    ``xi_plus = xi_minus = 0`` for noise-free propagation.
    """
    absorb, diffract = make_kernels(grid, mu, delta, mask=mask)
    src_plus, src_minus = drift_gauged_sources(pol_plus, pol_minus, drift_mask)
    det_scale = gamma * np.asarray(n_slice) * grid.cell_volume
    noise_scale = 2.0 * np.sqrt(gamma * np.asarray(g, dtype=complex) / (2.0 * grid.dtau))
    new_plus_det = propagate(plus_det, absorb, diffract) + 1j * det_scale * src_plus
    new_minus_det = propagate(minus_det, np.conj(absorb), np.conj(diffract)) - 1j * det_scale * src_minus
    new_plus_noise = propagate(plus_noise, absorb, diffract) + 1j * noise_scale * xi_plus
    new_minus_noise = propagate(minus_noise, np.conj(absorb), np.conj(diffract)) - 1j * noise_scale * xi_minus
    return new_plus_det, new_plus_noise, new_minus_det, new_minus_noise


def pump_slice_step(pump, mu_pump, grid: GridSpec, k0: float, mask: np.ndarray | None = None):
    """Advance the pump envelope through one slice; real absorption only."""
    absorb, diffract = make_kernels(grid, mu_pump, 0.0, k0=k0, mask=mask)
    return propagate(pump, absorb, diffract)


class SliceMarcher:
    """Precomputed kernels for marching stacked emitted fields and the pump.

    Parameters
    ----------
    grid : GridSpec
    pump_k0 : float
        Pump carrier wavenumber, nm^-1.
    use_mask : bool
        Apply the cos^2 spectral taper to both propagators.
    delta : float
        Constant refractive term entering the SF absorption/phase factor.
    """

    def __init__(self, grid: GridSpec, pump_k0: float, use_mask: bool = True, delta: float = 0.0):
        self.grid = grid
        self.mask = spectral_mask(grid, enabled=use_mask)
        kern = diffraction_factor(grid, grid.k0, self.mask)
        stack = np.empty((2, 1, 1) + grid.transverse_shape, dtype=complex)
        stack[PLUS, 0, 0] = kern
        stack[MINUS, 0, 0] = np.conj(kern)
        self.sf_kernel = stack
        self.pump_kernel = diffraction_factor(grid, pump_k0, self.mask)
        self.phase = np.exp(-1j * delta * grid.k0 * grid.dz)

    def sf_absorption(self, mu_sf) -> np.ndarray | None:
        """Stacked absorption factor for ``mu_sf`` of shape (..., 2 s, Nx, Ny)."""
        if mu_sf is None:
            if self.phase == 1.0:
                return None
            mu_sf = 0.0
        plus = np.exp(-0.5 * np.asarray(mu_sf) * self.grid.dz) * self.phase
        plus = np.asarray(plus)
        if plus.ndim == 0:
            return np.array([plus, np.conj(plus)]).reshape(2, 1, 1, 1, 1)
        return np.stack([plus, np.conj(plus)], axis=-4)[..., :, None, :, :, :]

    def step_sf(self, omega, absorption, src_plus, src_minus, noise_plus, noise_minus):
        """One slice for stacked fields of shape (B, 2, 2, 2, Nx, Ny).

        ``src_*`` are the deterministic sources gamma n dV P(+/-) and
        ``noise_*`` the scaled noise sources, each (B, 2 s, Nx, Ny); pass
        None to skip a source.
        """
        spec = np.fft.fft2(omega, axes=(-2, -1))
        spec *= self.sf_kernel
        out = np.fft.ifft2(spec, axes=(-2, -1))
        if absorption is not None:
            out *= absorption
        if src_plus is not None:
            out[:, PLUS, DET] += 1j * src_plus
            out[:, MINUS, DET] -= 1j * src_minus
        if noise_plus is not None:
            out[:, PLUS, NOISE] += 1j * noise_plus
            out[:, MINUS, NOISE] -= 1j * noise_minus
        return out

    def step_pump(self, pump, mu_pump):
        spec = np.fft.fft2(pump, axes=(-2, -1))
        spec *= self.pump_kernel
        return np.exp(-0.5 * mu_pump * self.grid.dz) * np.fft.ifft2(spec, axes=(-2, -1))


def flux_from_field(amplitude, photon_energy_kev: float) -> np.ndarray:
    """Photon flux (photons nm^-2 fs^-1) of a real-envelope field in V/m."""
    hbar_omega = photon_energy_kev * 1e3 * constants.e
    return 2.0 * constants.epsilon_0 * constants.c * np.abs(amplitude) ** 2 / hbar_omega * _SI_TO_FLUX_UNITS


def field_from_flux(flux, photon_energy_kev: float) -> np.ndarray:
    hbar_omega = photon_energy_kev * 1e3 * constants.e
    return np.sqrt(np.asarray(flux) * hbar_omega / (2.0 * constants.epsilon_0 * constants.c * _SI_TO_FLUX_UNITS))


def photon_wavenumber(photon_energy_kev: float) -> float:
    """Vacuum wavenumber (nm^-1) of a photon of the given energy."""
    wavelength_nm = constants.h * constants.c / (photon_energy_kev * 1e3 * constants.e) * 1e9
    return 2.0 * math.pi / wavelength_nm


def photon_count(energy_uj: float, photon_energy_kev: float) -> float:
    return energy_uj * 1e-6 / (photon_energy_kev * 1e3 * constants.e)


def _gaussian_density(coord, fwhm, centre=0.0):
    sigma = fwhm / (2.0 * math.sqrt(2.0 * math.log(2.0)))
    return np.exp(-0.5 * ((coord - centre) / sigma) ** 2) / (sigma * math.sqrt(2.0 * math.pi))


@dataclass(frozen=True)
class PumpField:
    """Pump envelope at the entrance plane for every tau node.

    ``amplitude`` has shape (Ntau, Nx, Ny), is real and given in V/m; the
    (-) envelope is its conjugate, i.e. identical.
    """

    amplitude: np.ndarray
    photon_energy_kev: float
    k0: float

    def flux(self) -> np.ndarray:
        return flux_from_field(self.amplitude, self.photon_energy_kev)


def build_pump_initial(grid: GridSpec, energy_uj: float, photon_energy_kev: float,
                       fwhm_x: float, fwhm_y: float, fwhm_t: float, delay: float) -> PumpField:
    """Separable Gaussian pump whose time-area integral of J_P is the photon count.

    Normalization is analytic (continuum Gaussian), so the peak flux does not
    depend on the grid; truncation by a small domain only loses photons.
    """
    if energy_uj < 0:
        raise ConfigurationError("pump.energy must be >= 0")
    if min(fwhm_x, fwhm_y, fwhm_t) <= 0 or photon_energy_kev <= 0:
        raise ConfigurationError("pump widths and photon energy must be positive")
    if fwhm_x > 0.25 * grid.nx * grid.dx or fwhm_y > 0.25 * grid.ny * grid.dy:
        log.warning("pump FWHM exceeds a quarter of the transverse domain; periodic wrap-around likely")
    n_ph = photon_count(energy_uj, photon_energy_kev)
    fx = _gaussian_density(grid.x_axis(), fwhm_x)
    fy = _gaussian_density(grid.y_axis(), fwhm_y)
    ft = _gaussian_density(grid.tau_axis(), fwhm_t, delay)
    flux = n_ph * ft[:, None, None] * fx[None, :, None] * fy[None, None, :]
    return PumpField(field_from_flux(flux, photon_energy_kev), photon_energy_kev,
                     photon_wavenumber(photon_energy_kev))
