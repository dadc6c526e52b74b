"""Four-dimensional (x, y, z, tau) discretization and derived geometry.

All lengths are in nm and times in fs. Time is the retarded time
tau = t - z/c; the physical time is never materialized, so every array
is indexed purely by (x, y, z, tau).

Field planes are numbered 0..Nz: plane 0 is the entrance face and plane
``iz + 1`` lies behind slice ``iz``. Atoms in slice ``iz`` see the field
of plane ``iz``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .atomic_model import ConfigurationError

MASK_FRACTION = 0.1


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid in (x, y, z, tau) plus the carrier wavelength."""

    nx: int
    ny: int
    nz: int
    ntau: int
    dx: float
    dy: float
    dz: float
    dtau: float
    wavelength: float
    window_start: float = 0.0

    def __post_init__(self):
        for name in ("nx", "ny", "nz", "ntau"):
            val = getattr(self, name)
            if int(val) != val or val < 2:
                raise ConfigurationError(f"grid.{name} must be an integer >= 2, got {val}")
        for name in ("dx", "dy", "dz", "dtau", "wavelength"):
            val = getattr(self, name)
            if not (val > 0 and math.isfinite(val)):
                raise ConfigurationError(f"grid.{name} must be positive, got {val}")

    @property
    def k0(self) -> float:
        return 2.0 * math.pi / self.wavelength

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def cell_volume(self) -> float:
        return self.dx * self.dy * self.dz

    @property
    def volume(self) -> float:
        return (self.nx * self.dx) * (self.ny * self.dy) * (self.nz * self.dz)

    @property
    def transverse_shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def voxel_shape(self) -> tuple[int, int, int]:
        return (self.nz, self.nx, self.ny)

    @property
    def length(self) -> float:
        return self.nz * self.dz

    def x_axis(self) -> np.ndarray:
        """Cell-centre x coordinates, symmetric about the beam axis."""
        return (np.arange(self.nx) - 0.5 * (self.nx - 1)) * self.dx

    def y_axis(self) -> np.ndarray:
        return (np.arange(self.ny) - 0.5 * (self.ny - 1)) * self.dy

    def z_planes(self) -> np.ndarray:
        """Positions of the Nz + 1 field planes."""
        return np.arange(self.nz + 1) * self.dz

    def z_centres(self) -> np.ndarray:
        return (np.arange(self.nz) + 0.5) * self.dz

    def tau_axis(self) -> np.ndarray:
        return self.window_start + np.arange(self.ntau) * self.dtau


@dataclass(frozen=True)
class EffectiveRates:
    """Grid-dependent constants entering the discretized field equations."""

    gamma: float
    solid_angle: float
    cell_volume: float


def effective_gamma(grid: GridSpec, gamma_rad: float) -> float:
    """Effective paraxial radiative rate (3/8pi)(lambda^2/dx dy) Gamma_rad."""
    return 3.0 / (8.0 * math.pi) * grid.wavelength**2 / grid.cell_area * gamma_rad


def effective_rates(grid: GridSpec, gamma_rad: float) -> EffectiveRates:
    return EffectiveRates(
        gamma=effective_gamma(grid, gamma_rad),
        solid_angle=grid.wavelength**2 / grid.cell_area,
        cell_volume=grid.cell_volume,
    )


def flux_normalization(wavelength: float, gamma_rad: float) -> float:
    """(3/8pi) lambda^2 Gamma_rad: converts Omega+ Omega- into photons nm^-2 fs^-1."""
    return 3.0 / (8.0 * math.pi) * wavelength**2 * gamma_rad


def _axis_wavenumbers(n: int, step: float) -> np.ndarray:
    k = 2.0 * math.pi * np.fft.fftfreq(n, d=step)
    if n % 2 == 0:
        # the unpaired Nyquist bin is reported as +pi/step
        k[n // 2] = math.pi / step
    return k


def transverse_wavenumbers(grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """DFT-ordered wavenumbers (nm^-1): zero frequency first, max |k| = pi/dx."""
    return _axis_wavenumbers(grid.nx, grid.dx), _axis_wavenumbers(grid.ny, grid.dy)


def _axis_taper(k: np.ndarray, k_max: float, fraction: float) -> np.ndarray:
    if fraction <= 0:
        return np.ones_like(k)
    k_edge = (1.0 - fraction) * k_max
    ak = np.abs(k)
    arg = np.clip((ak - k_edge) / (k_max - k_edge), 0.0, 1.0)
    taper = np.cos(0.5 * math.pi * arg) ** 2
    taper[ak <= k_edge] = 1.0
    return taper


def spectral_mask(grid: GridSpec, fraction: float = MASK_FRACTION, enabled: bool = True) -> np.ndarray:
    """Separable cos^2 taper over the outer ``fraction`` of each |k| axis.

    Modes with |k| below the taper band are passed exactly (factor 1.0);
    the Nyquist bin is removed. Returns an (Nx, Ny) real array.
    """
    if not enabled:
        return np.ones(grid.transverse_shape)
    if not 0.0 <= fraction < 1.0:
        raise ConfigurationError("mask fraction must lie in [0, 1)")
    kx, ky = transverse_wavenumbers(grid)
    mx = _axis_taper(kx, math.pi / grid.dx, fraction)
    my = _axis_taper(ky, math.pi / grid.dy, fraction)
    return mx[:, None] * my[None, :]
