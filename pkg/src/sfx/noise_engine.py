"""Gaussian noise streams, diffusion gauge and drift-gauge condition.

Stream construction (bit-exact)
-------------------------------
For master seed ``S`` (unsigned 64-bit), trajectory ``t`` and time index
``j`` the block of noises is::

    bits = numpy.random.Philox(key=[S, t], counter=[0, 0, j, 0])
    raw  = numpy.random.Generator(bits).standard_normal((2, 2, Nz, Nx, Ny, 2))
    xi   = (raw[..., 0] + 1j * raw[..., 1]) * sqrt(1/2)

Axis 0 selects the noise (0 -> xi(+), 1 -> xi(-)), axis 1 the
polarization (0 -> s=-1, 1 -> s=+1). The last raw axis holds real and
imaginary parts. Because Philox is counter based, the draw depends only
on (S, t, j) and never on scheduling order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_GAUGE_EPS = 1e-8


@dataclass(frozen=True)
class NoiseField:
    """Noises for one (trajectory, tau) step over the whole (z, x, y) grid."""

    xi_plus: np.ndarray   # (2 s, Nz, Nx, Ny) complex
    xi_minus: np.ndarray
    trajectory: int
    step: int


def noise_generator(seed: int, trajectory: int, step: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, trajectory) at counter ``step``."""
    if not (0 <= seed < 2**64 and 0 <= trajectory < 2**64 and 0 <= step < 2**64):
        raise ValueError("seed, trajectory and step must be unsigned 64-bit integers")
    bits = np.random.Philox(key=[seed, trajectory], counter=[0, 0, step, 0])
    return np.random.Generator(bits)


def standard_complex_normal(gen: np.random.Generator, shape) -> np.ndarray:
    """Complex normals with real and imaginary variance 1/2 each."""
    raw = gen.standard_normal(tuple(shape) + (2,))
    return (raw[..., 0] + 1j * raw[..., 1]) * math.sqrt(0.5)


def sample_noise(seed: int, trajectory: int, step: int, shape) -> NoiseField:
    """Draw xi(+) and xi(-) for both polarizations on a grid of ``shape``.

    No grid scaling is applied here; callers multiply by the amplitudes from
    :func:`noise_amplitudes`.
    """
    block = standard_complex_normal(noise_generator(seed, trajectory, step), (2, 2) + tuple(shape))
    return NoiseField(block[0], block[1], trajectory, step)


def diffusion_gauge(rho_up, rho_low, eps: float = DEFAULT_GAUGE_EPS) -> np.ndarray:
    """Gauge factor g = rho_up / (rho_up - rho_low), neutral (1) where singular.

    The neutral value is used where |Re(rho_up - rho_low)| <= eps, and also
    where the resulting |g| <= eps, since the atomic noise divides by sqrt(g).
    """
    rho_up = np.asarray(rho_up, dtype=complex)
    diff = rho_up - np.asarray(rho_low, dtype=complex)
    ok = np.abs(diff.real) > eps
    g = np.ones(np.broadcast(rho_up, diff).shape, dtype=complex)
    np.divide(rho_up, diff, out=g, where=ok)
    g[np.abs(g) <= eps] = 1.0
    return g


def drift_gauge_mask(rho_up, rho_low) -> np.ndarray:
    """True where the effective inversion is positive (real parts only)."""
    return np.real(rho_up) > np.real(rho_low)


def noise_amplitudes(g, gamma: float, dtau: float) -> tuple[np.ndarray, np.ndarray]:
    """Amplitudes (sqrt(gamma g / 2 dtau), sqrt(gamma / (g 2 dtau))).

    The first multiplies xi in the field sources (together with a factor 2),
    the second multiplies xi* in the atomic noise. Their product is
    gamma / (2 dtau) for every g.
    """
    root_g = np.sqrt(np.asarray(g, dtype=complex))
    base = math.sqrt(gamma / (2.0 * dtau))
    return base * root_g, base / root_g
