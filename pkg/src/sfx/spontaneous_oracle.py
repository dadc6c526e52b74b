"""Analytic spontaneous-emission correlation function on the simulation grid.

In the spontaneous limit each voxel radiates independently, the
coherences decay freely, and the exit-plane correlation becomes::

    J_s(x, t1, t2) = sum_{iz < p} sum_x' |G_{p-1-iz}(x - x')|^2 gamma n dz
                     sum_{(u,l) in s} |T_uls|^2 rho_uu(x', iz, t_min) D_ul(t_min -> t_max)

with G_m the discrete Green function (a unit voxel source propagated
through m slice kernels) and D the free decay of the coherence
between the two times. ``t_min`` is min(t1, t2) and D multiplies
exp(-w_ul(j) dtau) over the steps j = t_min + 1 .. t_max, with
w_ul = (Gamma_u + Gamma_l) / 2.

The oracle shares only the propagator with the stochastic solver; the
estimate it predicts is the latency-aligned two-time function of
:mod:`sfx.observables` on the window 0..Ntau-2.
"""

from __future__ import annotations

import logging
import math
import warnings

import numpy as np

from .atomic_model import LevelScheme
from .field_solver import diffraction_factor
from .grid_domain import GridSpec, effective_gamma, flux_normalization

log = logging.getLogger(__name__)


def green_functions(grid: GridSpec, max_steps: int, mask: np.ndarray | None = None,
                    mu: float = 0.0) -> np.ndarray:
    """G_m for m = 0..max_steps: unit voxel source after m slice kernels.

    Returned shape (max_steps + 1, Nx, Ny), source at index (0, 0), with
    the (+) convention; the (-) field uses the conjugate.
    """
    kern = diffraction_factor(grid, grid.k0, mask)
    absorb = math.exp(-0.5 * mu * grid.dz)
    out = np.zeros((max_steps + 1,) + grid.transverse_shape, dtype=complex)
    out[0, 0, 0] = 1.0
    for m in range(1, max_steps + 1):
        out[m] = absorb * np.fft.ifft2(kern * np.fft.fft2(out[m - 1]))
    return out


def fresnel_far_field_magnitude(wavelength: float, z: float) -> float:
    """Continuum far-field Green magnitude 1/(lambda z) per unit source area."""
    return 1.0 / (wavelength * z)


def _pair_decay(widths_pair: np.ndarray, dtau: float) -> np.ndarray:
    """D(t1, t2) for widths shaped (Ntau, ...): product of exp(-w dtau) over j in (t_min, t_max]."""
    cum = np.concatenate([np.zeros((1,) + widths_pair.shape[1:]), np.cumsum(widths_pair * dtau, axis=0)])
    # cum[k] = sum_{j < k} w_j dtau ; steps t_min+1..t_max -> cum[t_max+1] - cum[t_min+1]
    nt = widths_pair.shape[0]
    c = cum[1:nt + 1]
    diff = np.abs(c[:, None] - c[None, :])
    return np.exp(-diff)


def analytic_J(upper_history, density, grid: GridSpec, scheme: LevelScheme, plane: int,
               widths_history=None, gamma_dec: float | None = None,
               mask: np.ndarray | None = None, mu: float = 0.0,
               transverse_integrated: bool = True) -> np.ndarray:
    """Oracle correlation J_s at field plane ``plane``.

    Parameters
    ----------
    upper_history : array (Ntau, Nz, Nx, Ny, n_upper)
        Real upper-level populations from a field-free kinetics run.
    density : array broadcastable to (Nz, Nx, Ny)
        Copper density, nm^-3.
    widths_history : array (Ntau, Nz, Nx, Ny, 6), optional
        Level widths Gamma_i(tau) of that run. If omitted, the constant
        ``gamma_dec`` (default: natural value) is used for every pair.
    transverse_integrated : bool
        Return sum_x dx dy J (shape (2, Nt, Nt)) instead of (2, Nt, Nt, Nx, Ny).

    Returns
    -------
    J on the aligned window, Nt = Ntau - 1, in photons nm^-2 fs^-1
    (times nm^2 when integrated).
    """
    upper = np.asarray(upper_history, dtype=float)
    nt_full = upper.shape[0]
    if not 0 <= plane <= grid.nz:
        raise ValueError(f"plane {plane} outside 0..{grid.nz}")
    if upper.shape[1:4] != grid.voxel_shape:
        raise ValueError("upper_history does not match the grid")
    nt = nt_full - 1
    n = np.broadcast_to(np.asarray(density, dtype=float), grid.voxel_shape)
    gamma = effective_gamma(grid, scheme.gamma_rad)
    pref = gamma * grid.dz
    nu = len(scheme.upper_labels)
    if widths_history is None and gamma_dec is None:
        gamma_dec = scheme.decoherence_rate
    green = green_functions(grid, max(plane - 1, 0), mask, mu)
    g2_spec = np.fft.fft2(np.abs(green) ** 2)
    out_shape = (2, nt, nt) + grid.transverse_shape
    out = np.zeros(out_shape)
    if widths_history is None:
        steps = np.arange(nt)
        const_decay = np.exp(-gamma_dec * grid.dtau * np.abs(steps[:, None] - steps[None, :]))
    tmin = np.minimum(np.arange(nt)[:, None], np.arange(nt)[None, :])
    for iz in range(plane):
        m = plane - 1 - iz
        source = np.zeros(out_shape)
        for (u, l, s) in zip(*np.nonzero(scheme.coupling)):
            weight = abs(scheme.coupling[u, l, s]) ** 2
            pop = upper[:nt, iz, :, :, u] * n[iz] * (pref * weight)   # (nt, Nx, Ny)
            pop_pair = pop[tmin]                                     # (nt, nt, Nx, Ny)
            if widths_history is None:
                decay = const_decay[:, :, None, None]
            else:
                w = 0.5 * (np.asarray(widths_history)[:nt, iz, :, :, u]
                           + np.asarray(widths_history)[:nt, iz, :, :, nu + l])
                decay = _pair_decay(w, grid.dtau)
            source[s] += pop_pair * decay
        conv = np.fft.ifft2(np.fft.fft2(source, axes=(-2, -1)) * g2_spec[m], axes=(-2, -1)).real
        out += conv
    if transverse_integrated:
        return out.sum(axis=(-2, -1)) * grid.cell_area
    return out


def photon_number(J_integrated, dtau: float) -> np.ndarray:
    """Time-integrated photon number from a transverse-integrated J (diagonal)."""
    diag = np.diagonal(np.asarray(J_integrated), axis1=-2, axis2=-1)
    return diag.sum(axis=-1) * dtau


def oracle_photon_numbers(upper_history, density, grid: GridSpec, scheme: LevelScheme,
                          mask: np.ndarray | None = None, mu: float = 0.0) -> np.ndarray:
    """Time-integrated photon number at every field plane, shape (Nz + 1, 2).

    Uses the diagonal of the oracle (no decay factor) and the fact that the
    transverse sum of a convolution factorizes into sum(source) * sum(|G_m|^2).
    """
    upper = np.asarray(upper_history, dtype=float)
    nt = upper.shape[0] - 1
    n = np.broadcast_to(np.asarray(density, dtype=float), grid.voxel_shape)
    gamma = effective_gamma(grid, scheme.gamma_rad)
    weights = np.zeros((len(scheme.upper_labels), 2))
    for (u, l, s) in zip(*np.nonzero(scheme.coupling)):
        weights[u, s] += abs(scheme.coupling[u, l, s]) ** 2
    # emitted flux per slice and polarization, summed over x' and the window
    slice_rate = np.einsum("tzxyu,zxy,us->zs", upper[:nt], n, weights) * gamma * grid.dz
    green = green_functions(grid, grid.nz, mask, mu)
    spread = (np.abs(green) ** 2).sum(axis=(-2, -1))
    out = np.zeros((grid.nz + 1, 2))
    for plane in range(1, grid.nz + 1):
        m = plane - 1 - np.arange(plane)
        out[plane] = (spread[m, None] * slice_rate[:plane]).sum(axis=0)
    return out * grid.cell_area * grid.dtau


def photon_rate_asymptotics(population_integral: float, gamma_rad: float, wavelength: float,
                            regime: str, z: float | None = None, area: float | None = None,
                            solid_angle: float | None = None) -> float:
    """Photon rate dN/dtau in the far or near zone.

    far: (3/8pi) (S / z^2) Gamma_rad int n rho_up; near: (3/8pi) Do Gamma_rad int n rho_up.
    ``population_integral`` is int n rho_up dV (dimensionless atom count).
    """
    if regime == "far":
        if z is None or area is None:
            raise ValueError("far-field rate needs z and the detector area")
        return 3.0 / (8.0 * math.pi) * area / z ** 2 * gamma_rad * population_integral
    if regime == "near":
        if solid_angle is None:
            raise ValueError("near-field rate needs the paraxial solid angle")
        return 3.0 / (8.0 * math.pi) * solid_angle * gamma_rad * population_integral
    raise ValueError(f"unknown regime '{regime}'")


def analytic_spectrum(J_integrated, dtau: float, gamma_dec: float | None = None, n_omega: int = 2048):
    """Spectrum of a two-time correlation and its Lorentzian fit.

    Returns a dict with ``omega``, ``spectrum``, ``hwhm`` (from the
    profile), ``fit_hwhm`` and ``fit_residual`` (relative rms of the
    Lorentzian fit).
    """
    from scipy.optimize import OptimizeWarning, curve_fit

    from .observables import half_width_half_max, spectrum_from_two_time

    j2 = np.asarray(J_integrated)
    window = j2.shape[0] * dtau
    if gamma_dec is not None and window < 3.0 / gamma_dec:
        log.warning("correlation window %.3g fs shorter than 3/gamma_dec; truncation bias", window)
    omega, spec = spectrum_from_two_time(j2, dtau, n_omega)
    spec = spec.real
    hwhm = half_width_half_max(omega, spec)

    def lorentz(w, amp, centre, width):
        return amp * width ** 2 / ((w - centre) ** 2 + width ** 2)

    guess = (spec.max(), omega[np.argmax(spec)], hwhm if np.isfinite(hwhm) else 1.0)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", OptimizeWarning)     # covariance is not used
            params, _ = curve_fit(lorentz, omega, spec, p0=guess, maxfev=20000)
        resid = float(np.sqrt(np.mean((lorentz(omega, *params) - spec) ** 2)) / spec.max())
        fit_hwhm = abs(params[2])
    except RuntimeError:
        fit_hwhm, resid = float("nan"), float("nan")
    return {"omega": omega, "spectrum": spec, "hwhm": hwhm, "fit_hwhm": fit_hwhm, "fit_residual": resid}


def flux_scale(grid: GridSpec, scheme: LevelScheme) -> float:
    return flux_normalization(grid.wavelength, scheme.gamma_rad)
