"""Ensemble estimators for fluxes, correlations, spectra and polarization.

Latency-aligned estimators
--------------------------
Under Ito ordering a noise drawn at step j enters the field immediately
but reaches the coherences only at step j + 1. The equal-time product
Omega+(j) Omega-(j) therefore carries no spontaneous contribution, while
the product at lag k carries the value that a continuum correlation has at
lag k - sign(k). The aligned estimators below undo this one-step latency::

    J_al(i, j) = Omega+(i + 1) Omega-(j)            i > j
               = Omega+(i) Omega-(j + 1)            i < j
               = [Omega+(i + 1) Omega-(i) + Omega+(i) Omega-(i + 1)] / 2

on the window i, j = 0..Ntau-2. For lag correlations c(k) the same rule
reads c_al(k) = c(k + sign k), c_al(0) = [c(1) + c(-1)] / 2. Every
``aligned`` flag in this module applies that rule; ``aligned=False`` gives
the plain products.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .atomic_model import N_UPPER, LevelScheme

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------------
# streaming statistics

@dataclass
class _Moments:
    count: int
    mean: np.ndarray
    m2_re: np.ndarray
    m2_im: np.ndarray | None


def _batch_moments(values: np.ndarray) -> _Moments:
    n = values.shape[0]
    mean = values.mean(axis=0)
    dev = values - mean
    m2_re = (dev.real ** 2).sum(axis=0)
    m2_im = (dev.imag ** 2).sum(axis=0) if np.iscomplexobj(values) else None
    return _Moments(n, mean, m2_re, m2_im)


def _chan_merge(a: _Moments, b: _Moments) -> _Moments:
    if a.count == 0:
        return _Moments(b.count, b.mean.copy(), b.m2_re.copy(), None if b.m2_im is None else b.m2_im.copy())
    if b.count == 0:
        return _Moments(a.count, a.mean.copy(), a.m2_re.copy(), None if a.m2_im is None else a.m2_im.copy())
    n = a.count + b.count
    delta = b.mean - a.mean
    frac = b.count / n
    mean = a.mean + delta * frac
    w = a.count * b.count / n
    m2_re = a.m2_re + b.m2_re + delta.real ** 2 * w
    m2_im = None
    if a.m2_im is not None or b.m2_im is not None:
        ai = a.m2_im if a.m2_im is not None else np.zeros_like(a.m2_re)
        bi = b.m2_im if b.m2_im is not None else np.zeros_like(b.m2_re)
        m2_im = ai + bi + delta.imag ** 2 * w
    return _Moments(n, mean, m2_re, m2_im)


@dataclass
class EnsembleAccumulator:
    """Mergeable streaming mean and variance for named observables.

    Complex observables keep separate second moments for real and imaginary
    parts; :meth:`sem` returns ``sem_re + 1j * sem_im`` for them.
    """

    moments: dict[str, _Moments] = field(default_factory=dict)
    axes: dict[str, tuple[str, ...]] = field(default_factory=dict)
    units: dict[str, str] = field(default_factory=dict)
    divergent: int = 0
    metadata: dict[str, str] = field(default_factory=dict)

    def register(self, name: str, axes: tuple[str, ...], units: str = "") -> None:
        self.axes[name] = tuple(axes)
        self.units[name] = units

    def add_batch(self, name: str, values) -> None:
        """Add per-trajectory samples stacked along axis 0."""
        values = np.asarray(values)
        if values.shape[0] == 0:
            return
        if values.dtype.kind not in "fc":
            values = values.astype(float)
        batch = _batch_moments(values)
        self.moments[name] = _chan_merge(self.moments[name], batch) if name in self.moments else batch

    def add(self, name: str, value) -> None:
        self.add_batch(name, np.asarray(value)[None])

    def merge(self, other: "EnsembleAccumulator") -> "EnsembleAccumulator":
        """Combined accumulator; neither input is modified."""
        out = EnsembleAccumulator(axes={**other.axes, **self.axes}, units={**other.units, **self.units},
                                  divergent=self.divergent + other.divergent,
                                  metadata=dict(self.metadata))
        for name in set(self.moments) | set(other.moments):
            empty = _Moments(0, None, None, None)
            out.moments[name] = _chan_merge(self.moments.get(name, empty), other.moments.get(name, empty))
        return out

    @property
    def names(self) -> list[str]:
        return sorted(self.moments)

    def count(self, name: str | None = None) -> int:
        if name is None:
            return max((m.count for m in self.moments.values()), default=0)
        return self.moments[name].count

    def mean(self, name: str) -> np.ndarray:
        return self.moments[name].mean

    def variance(self, name: str) -> np.ndarray:
        m = self.moments[name]
        denom = max(m.count - 1, 1)
        var = m.m2_re / denom
        if m.m2_im is not None:
            return var + 1j * (m.m2_im / denom)
        return var

    def sem(self, name: str) -> np.ndarray:
        """Standard error sqrt(M2 / (N (N - 1))), per real and imaginary part."""
        m = self.moments[name]
        if m.count < 2:
            nan = np.full_like(m.m2_re, np.nan)
            return nan if m.m2_im is None else nan + 1j * nan
        denom = m.count * (m.count - 1)
        out = np.sqrt(m.m2_re / denom)
        if m.m2_im is not None:
            return out + 1j * np.sqrt(m.m2_im / denom)
        return out


# ----------------------------------------------------------------------------
# elementary field products

def flux_norm(wavelength: float, gamma_rad: float) -> float:
    return 3.0 / (8.0 * math.pi) * wavelength ** 2 * gamma_rad


def photon_flux(omega_plus, omega_minus, gamma_rad: float, wavelength: float) -> np.ndarray:
    """Photon flux Omega+ Omega- / ((3/8pi) lambda^2 Gamma_rad), complex per trajectory."""
    return np.asarray(omega_plus) * np.asarray(omega_minus) / flux_norm(wavelength, gamma_rad)


def aligned_equal_time(plus, minus, axis: int = 0) -> np.ndarray:
    """Diagonal of the aligned estimator along the time ``axis`` (length N - 1)."""
    plus = np.moveaxis(np.asarray(plus), axis, 0)
    minus = np.moveaxis(np.asarray(minus), axis, 0)
    out = 0.5 * (plus[1:] * minus[:-1] + plus[:-1] * minus[1:])
    return np.moveaxis(out, 0, axis)


def align_two_time(raw: np.ndarray) -> np.ndarray:
    """Aligned two-time matrix from the raw one on the leading two axes."""
    raw = np.asarray(raw)
    n = raw.shape[0] - 1
    later_first = (np.arange(n)[:, None] > np.arange(n)[None, :]).reshape((n, n) + (1,) * (raw.ndim - 2))
    out = np.where(later_first, raw[1:, :-1], raw[:-1, 1:])
    d = np.arange(n)
    out[d, d] = 0.5 * (raw[d + 1, d] + raw[d, d + 1])
    return out


def align_lags(c_raw: np.ndarray, axis: int = 0) -> np.ndarray:
    """Aligned lag correlation; input lags -(N-1)..(N-1), output -(N-2)..(N-2)."""
    c = np.moveaxis(np.asarray(c_raw), axis, 0)
    length = c.shape[0]
    mid = length // 2
    half = mid - 1
    out = np.empty((2 * half + 1,) + c.shape[1:], dtype=np.result_type(c, complex))
    out[half] = 0.5 * (c[mid + 1] + c[mid - 1])
    out[half + 1:] = c[mid + 2:]
    out[:half] = c[:mid - 1]
    return np.moveaxis(out, 0, axis)


def correlation_J(omega_plus_t1, omega_minus_t2, gamma_rad: float, wavelength: float,
                  cell_area: float | None = None) -> np.ndarray:
    """J = Omega+(tau1) Omega-(tau2) / norm; transverse sum weighted by ``cell_area`` if given."""
    j = photon_flux(omega_plus_t1, omega_minus_t2, gamma_rad, wavelength)
    if cell_area is not None:
        j = j.sum(axis=(-2, -1)) * cell_area
    return j


def two_time_correlation(plus, minus, gamma_rad: float, wavelength: float,
                         cell_area: float | None = None, aligned: bool = True) -> np.ndarray:
    """Two-time J from time series shaped (..., Ntau, Nx, Ny).

    With ``cell_area`` the result is transverse integrated and shaped
    (..., Nt, Nt); otherwise (..., Nt, Nt, Nx, Ny) is returned.
    """
    plus = np.asarray(plus)
    minus = np.asarray(minus)
    norm = flux_norm(wavelength, gamma_rad)
    if cell_area is not None:
        p = plus.reshape(plus.shape[:-2] + (-1,))
        m = minus.reshape(minus.shape[:-2] + (-1,))
        raw = np.einsum("...ix,...jx->...ij", p, m) * (cell_area / norm)
        lead = raw.ndim - 2
        if aligned:
            raw = np.moveaxis(align_two_time(np.moveaxis(raw, (lead, lead + 1), (0, 1))), (0, 1), (lead, lead + 1))
        return raw
    raw = plus[..., :, None, :, :] * minus[..., None, :, :, :] / norm
    if aligned:
        lead = raw.ndim - 4
        raw = np.moveaxis(align_two_time(np.moveaxis(raw, (lead, lead + 1), (0, 1))), (0, 1), (lead, lead + 1))
    return raw


# ----------------------------------------------------------------------------
# spectra

def lag_sums(two_time: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """c(k) = sum_i J(i + k, i) for k = -(N-1)..(N-1), on the leading two axes."""
    n = two_time.shape[0]
    lags = np.arange(-(n - 1), n)
    out = np.array([np.trace(two_time, offset=-k, axis1=0, axis2=1) for k in lags])
    return lags, out


def _lag_transform(lags, c, dtau: float, n_omega: int):
    """(dtau / 2pi) sum_k c(k) exp(i omega k dtau) on an fftshifted omega grid."""
    length = max(int(n_omega), 2 * len(lags))
    buf = np.zeros((length,) + c.shape[1:], dtype=complex)
    np.add.at(buf, np.mod(lags, length), c)
    spec = np.fft.ifft(buf, axis=0) * length
    omega = 2.0 * math.pi * np.fft.fftfreq(length, d=dtau)
    order = np.argsort(omega)
    return omega[order], spec[order] * (dtau / (2.0 * math.pi))


def spectrum_from_two_time(two_time, dtau: float, n_omega: int = 512):
    """S(w) = (dtau^2 / 2pi) sum_{i,j} J(i, j) exp(i w (i - j) dtau).

    The integral of S over w equals the time-integrated flux.
    """
    lags, c = lag_sums(np.asarray(two_time))
    omega, spec = _lag_transform(lags, c * dtau, dtau, n_omega)
    return omega, spec


def half_width_half_max(omega, spectrum) -> float:
    """HWHM of a single-peaked real profile, linearly interpolated."""
    y = np.real(np.asarray(spectrum))
    x = np.asarray(omega)
    k = int(np.argmax(y))
    half = 0.5 * y[k]
    right = k
    while right + 1 < len(y) and y[right + 1] > half:
        right += 1
    left = k
    while left - 1 >= 0 and y[left - 1] > half:
        left -= 1
    if right + 1 >= len(y) or left - 1 < 0:
        return float("nan")
    xr = x[right] + (half - y[right]) * (x[right + 1] - x[right]) / (y[right + 1] - y[right])
    xl = x[left] + (half - y[left]) * (x[left - 1] - x[left]) / (y[left - 1] - y[left])
    return 0.5 * float(xr - xl)


def wigner_from_two_time(two_time, dtau: float, n_omega: int = 512):
    """Wigner distribution W(tau_j, w) from a two-time matrix J(i, j).

    Odd lags use the mean of the two neighbouring off-centre entries, so
    the tau marginal reproduces J(j, j) exactly and the w marginal matches
    :func:`spectrum_from_two_time` up to window edges. Returns
    (omega, W) with W shaped (Ntau, Nomega).
    """
    j2 = np.asarray(two_time)
    n = j2.shape[0]
    lags = np.arange(-(2 * n - 2), 2 * n - 1)
    vals = np.zeros((len(lags), n), dtype=complex)
    for idx, k in enumerate(lags):
        for c in range(n):
            if k % 2 == 0:
                a, b = c + k // 2, c - k // 2
                if 0 <= a < n and 0 <= b < n:
                    vals[idx, c] = j2[a, b]
            else:
                a1, b1 = c + (k + 1) // 2, c - (k - 1) // 2
                a2, b2 = c + (k - 1) // 2, c - (k + 1) // 2
                acc, cnt = 0.0, 0
                for a, b in ((a1, b1), (a2, b2)):
                    if 0 <= a < n and 0 <= b < n:
                        acc += j2[a, b]
                        cnt += 1
                if cnt == 2:
                    vals[idx, c] = 0.5 * acc
    omega, w = _lag_transform(lags, vals, dtau, n_omega)
    return omega, w.T


def wigner(omega_plus, omega_minus, dtau: float, gamma_rad: float, wavelength: float,
           aligned: bool = True, n_omega: int = 512):
    """Wigner distribution of a single-point time series, with both projections.

    Returns (omega, W, tau_projection, omega_projection); the tau projection
    is the flux and the omega projection the spectrum.
    """
    plus = np.asarray(omega_plus)
    minus = np.asarray(omega_minus)
    raw = np.outer(plus, minus) / flux_norm(wavelength, gamma_rad)
    j2 = align_two_time(raw) if aligned else raw
    omega, w = wigner_from_two_time(j2, dtau, n_omega)
    dw = omega[1] - omega[0]
    return omega, w, w.sum(axis=1) * dw, w.sum(axis=0) * dtau


def transform_limited_spectrum(intensity, dtau: float, n_omega: int = 512):
    """|int dtau/2pi exp(i w tau) sqrt(I(tau))|^2, negatives clamped to zero.

    Returns (omega, I_TL, number_of_clamped_samples).
    """
    i_real = np.real(np.asarray(intensity))
    clamped = int(np.count_nonzero(i_real < 0))
    if clamped:
        log.debug("transform-limited spectrum: %d negative samples clamped", clamped)
    amp = np.sqrt(np.clip(i_real, 0.0, None))
    length = max(int(n_omega), len(amp))
    spec = np.fft.ifft(amp, n=length) * length * dtau / (2.0 * math.pi)
    omega = 2.0 * math.pi * np.fft.fftfreq(length, d=dtau)
    order = np.argsort(omega)
    return omega[order], np.abs(spec[order]) ** 2, clamped


def spectral_angular(omega_plus, omega_minus, dx: float, dy: float, dtau: float, k0: float,
                     gamma_rad: float, wavelength: float, aligned: bool = True):
    """Spectral-angular distribution from fields shaped (Ntau, Nx, Ny).

    The (+) transform uses exp[+i k0 (x theta_x + y theta_y) - i w tau] and
    the (-) transform the opposite signs, each with the measure
    dx dy dtau / (2 pi)^3. Returns (theta_x, theta_y, omega, I) with I shaped
    (Nomega, Nx, Ny) in DFT order on every axis. A field exp(-i w1 tau)
    peaks at omega = -w1 here, opposite to the spectrum and Wigner outputs.
    """
    plus = np.asarray(omega_plus)
    minus = np.asarray(omega_minus)
    nt, nx, ny = plus.shape
    measure = dx * dy * dtau / (2.0 * math.pi) ** 3
    a_plus = np.fft.ifft2(plus, axes=(1, 2)) * (nx * ny)
    a_minus = np.fft.fft2(minus, axes=(1, 2))
    if not aligned:
        bar_plus = np.fft.fft(a_plus, axis=0)
        bar_minus = np.fft.ifft(a_minus, axis=0) * nt
        prod = bar_plus * bar_minus
        n_omega = nt
    else:
        length = 2 * nt
        fp = np.fft.fft(a_plus, n=length, axis=0)
        fm = np.fft.fft(a_minus, n=length, axis=0)
        fm_neg = np.roll(fm[::-1], 1, axis=0)
        circ = np.fft.ifft(fp * fm_neg, axis=0)       # c(k) = sum_t a+(t + k) a-(t)
        lags = np.arange(-(nt - 1), nt)
        c_raw = circ[np.mod(lags, length)]
        c_al = align_lags(c_raw, axis=0)
        lags_al = np.arange(-(nt - 2), nt - 1)
        n_omega = nt - 1
        fold = np.zeros((n_omega, nx, ny), dtype=complex)
        np.add.at(fold, np.mod(lags_al, n_omega), c_al)
        prod = np.fft.fft(fold, axis=0)                # sum_k c(k) exp(-i w k dtau)
    intensity = prod * measure ** 2 / flux_norm(wavelength, gamma_rad)
    kx = 2.0 * math.pi * np.fft.fftfreq(nx, d=dx)
    ky = 2.0 * math.pi * np.fft.fftfreq(ny, d=dy)
    omega = 2.0 * math.pi * np.fft.fftfreq(n_omega, d=dtau)
    return kx / k0, ky / k0, omega, intensity


# ----------------------------------------------------------------------------
# transverse structure and polarization

def _reflect(spec: np.ndarray) -> np.ndarray:
    """A(-k) in DFT order over the last two axes."""
    return np.roll(np.flip(spec, axis=(-2, -1)), 1, axis=(-2, -1))


def transverse_correlation(omega_plus, omega_minus, dx: float, dy: float) -> np.ndarray:
    """Gamma(r) = sum_r' Omega+(r') Omega-(r' + r) dx dy, periodic, DFT-ordered r."""
    a = np.fft.fft2(np.asarray(omega_plus), axes=(-2, -1))
    b = np.fft.fft2(np.asarray(omega_minus), axes=(-2, -1))
    return np.fft.ifft2(b * _reflect(a), axes=(-2, -1)) * (dx * dy)


def correlation_width(corr_map: np.ndarray, dx: float) -> float:
    """FWHM of |map| along the x cut through r = 0 (DFT-ordered input)."""
    cut = np.abs(np.fft.fftshift(np.asarray(corr_map))[:, corr_map.shape[1] // 2])
    centre = corr_map.shape[0] // 2
    peak = cut[centre]
    if peak <= 0:
        return 0.0
    half = 0.5 * peak

    def edge(direction):
        i = centre
        while 0 <= i + direction < len(cut) and cut[i + direction] > half:
            i += direction
        if not 0 <= i + direction < len(cut):
            return abs(i - centre) + 0.5
        frac = (cut[i] - half) / (cut[i] - cut[i + direction])
        return abs(i - centre) + frac

    return dx * (edge(+1) + edge(-1))


def stokes(plus_m1, minus_m1, plus_p1, minus_p1, norm: float = 1.0) -> np.ndarray:
    """Stokes vector (S0, S1, S2, S3) stacked on a new leading axis."""
    i_m = plus_m1 * minus_m1
    i_p = plus_p1 * minus_p1
    cross_a = plus_p1 * minus_m1
    cross_b = plus_m1 * minus_p1
    out = np.stack([i_m + i_p, cross_a + cross_b, 1j * (cross_a - cross_b), i_m - i_p])
    return out / norm


def aligned_stokes(plus, minus, norm: float = 1.0, axis: int = 0) -> np.ndarray:
    """Stokes parameters from aligned products at tau and tau + 1.

    ``plus``/``minus`` carry the polarization axis first (s = -1, +1) and time
    along ``axis`` of the remaining dimensions.
    """
    plus = np.moveaxis(np.asarray(plus), axis + 1, 1)
    minus = np.moveaxis(np.asarray(minus), axis + 1, 1)
    late = stokes(plus[0, 1:], minus[0, :-1], plus[1, 1:], minus[1, :-1], norm)
    early = stokes(plus[0, :-1], minus[0, 1:], plus[1, :-1], minus[1, 1:], norm)
    return np.moveaxis(0.5 * (late + early), 1, axis + 1)


MAX_PAIR_POINTS = 1024


def stokes_pair_products(stokes_field: np.ndarray) -> np.ndarray:
    """P[a, b] = S(a) . S(b) over flattened transverse points (per trajectory)."""
    s = np.asarray(stokes_field)
    vec = s[1:4].reshape(3, -1)
    if vec.shape[1] > MAX_PAIR_POINTS:
        raise ValueError(f"polarization correlation limited to {MAX_PAIR_POINTS} transverse points")
    return vec.T @ vec


def polarization_correlation_from_moments(pair_mean, s0_mean, shape, cell_area: float) -> np.ndarray:
    """C(r) = sum_r' <S(r').S(r'+r)> / (<S0(r')> <S0(r'+r)>) dx dy, DFT-ordered r."""
    nx, ny = shape
    pair = np.asarray(pair_mean).reshape(nx, ny, nx, ny)
    s0 = np.asarray(s0_mean).reshape(nx, ny)
    out = np.zeros((nx, ny), dtype=complex)
    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    for rx in range(nx):
        for ry in range(ny):
            jx = (ix + rx) % nx
            jy = (iy + ry) % ny
            out[rx, ry] = np.sum(pair[ix, iy, jx, jy] / (s0[ix, iy] * s0[jx, jy]))
    return out * cell_area


def polarization_correlation(stokes_samples, cell_area: float) -> np.ndarray:
    """C(r) from Stokes fields of many trajectories shaped (Ntraj, 4, Nx, Ny)."""
    samples = np.asarray(stokes_samples)
    shape = samples.shape[-2:]
    pairs = np.mean([stokes_pair_products(s) for s in samples], axis=0)
    s0 = samples[:, 0].mean(axis=0)
    return polarization_correlation_from_moments(pairs, s0, shape, cell_area)


# ----------------------------------------------------------------------------
# atomic observables

def effective_inversion(rho, scheme: LevelScheme, populations_only: bool = False):
    """(rho_up, rho_low) per polarization on a trailing axis of length 2.

    The quadratic forms run over pairs of nonzero couplings that share a
    lower level (upper form) or an upper level (lower form).
    """
    rho = np.asarray(rho)
    tu, tl, ts, tv = scheme.coupling_nonzeros()
    dtype = np.result_type(rho, complex)
    up = np.zeros(rho.shape[:-2] + (2,), dtype=dtype)
    low = np.zeros_like(up)
    for a in range(len(tv)):
        for b in range(len(tv)):
            if ts[a] != ts[b] or (populations_only and a != b):
                continue
            if tl[a] == tl[b]:
                up[..., ts[a]] += np.conj(tv[a]) * tv[b] * rho[..., tu[a], tu[b]]
            if tu[a] == tu[b]:
                low[..., ts[a]] += tv[a] * np.conj(tv[b]) * rho[..., tl[a], tl[b]]
    return up, low


def polarization_fields(rho, scheme: LevelScheme):
    """(P+_s, P-_s) = (sum T_lu rho_ul, sum rho_lu T_ul) on a trailing s axis."""
    rho = np.asarray(rho)
    tu, tl, ts, tv = scheme.coupling_nonzeros()
    dtype = np.result_type(rho, complex)
    p_plus = np.zeros(rho.shape[:-2] + (2,), dtype=dtype)
    p_minus = np.zeros_like(p_plus)
    for u, l, s, t in zip(tu, tl, ts, tv):
        p_plus[..., s] += np.conj(t) * rho[..., u, l]
        p_minus[..., s] += t * rho[..., l, u]
    return p_plus, p_minus


def gain_coefficient(rho_up, rho_low, n, gamma_dec: float, wavelength: float, gamma_rad: float):
    """(3/8pi) n lambda^2 (Gamma_rad / gamma_dec) (rho_up - rho_low), nm^-1."""
    if gamma_dec <= 0:
        raise ValueError("gamma_dec must be positive")
    return (3.0 / (8.0 * math.pi) * np.asarray(n) * wavelength ** 2 * gamma_rad / gamma_dec
            * (np.asarray(rho_up) - np.asarray(rho_low)))


def upper_populations(rho) -> np.ndarray:
    return np.real(np.diagonal(np.asarray(rho)[..., :N_UPPER, :N_UPPER], axis1=-2, axis2=-1))
