"""Per-voxel integration of the stochastic Bloch equations.

Each tau step splits into a deterministic part, integrated with fourth-order
Runge-Kutta in integrating-factor (Lawson) form at frozen fields and rates,
and an Euler-Maruyama
noise increment that is evaluated from the state before the update::

    rho(tau + dtau) = rho + Delta_RK4(rho; Omega_det, rates) + Delta_noise(rho; Omega_noise, xi)

The elementwise linear part -(Gamma_p + Gamma_q)/2 - i dw_pq (and the
ground/auxiliary losses) is propagated exactly through exp factors, so
pure decay and free phase rotation carry no truncation error.

Matrix form used throughout (p, q run over the six levels)::

    V = sum_s (Omega+_s A_s + Omega-_s B_s)
    d rho / d tau = -i dw o rho + i [V, rho] + incoherent terms

where A_s holds T_{ul,s} in its (u, l) block and B_s holds T_{lu,s} in
its (l, u) block. The direct atomic noise adds
``a_s (xi-*_s rho A_s + xi+*_s B_s rho)`` with a_s = sqrt(gamma / (2 g_s dtau)).

The heavy lifting is done by numba kernels over a flattened voxel axis;
:func:`unitary_rhs` is an independent dense numpy version kept for tests.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .atomic_model import N_LEVELS, N_UPPER, IncoherentRates, LevelScheme

DEFAULT_RHO_MAX = 1e3


def coupling_operators(scheme: LevelScheme) -> tuple[np.ndarray, np.ndarray]:
    """Dense A_s and B_s, each shaped (2 s, 6, 6)."""
    a = np.zeros((2, N_LEVELS, N_LEVELS), dtype=complex)
    b = np.zeros_like(a)
    nu = len(scheme.upper_labels)
    for s in range(2):
        a[s, :nu, nu:] = scheme.coupling[:, :, s]
        b[s, nu:, :nu] = scheme.coupling_lu[:, :, s]
    return a, b


def interaction_matrix(omega_plus, omega_minus, scheme: LevelScheme) -> np.ndarray:
    """V with trailing (6, 6) axes; fields carry a trailing polarization axis."""
    a, b = coupling_operators(scheme)
    return (np.einsum("...s,spq->...pq", np.asarray(omega_plus, dtype=complex), a)
            + np.einsum("...s,spq->...pq", np.asarray(omega_minus, dtype=complex), b))


def unitary_rhs(rho, omega_plus, omega_minus, scheme: LevelScheme) -> np.ndarray:
    """Coherent part -i dw o rho + i [V, rho] (dense reference implementation)."""
    rho = np.asarray(rho, dtype=complex)
    v = interaction_matrix(omega_plus, omega_minus, scheme)
    return -1j * scheme.detunings() * rho + 1j * (v @ rho - rho @ v)


# ----------------------------------------------------------------------------
# numba kernels

@njit(cache=True)
def _voxel_rhs(r, gr, ax, out, vrow, vcol, vval, nv, widths, pump, branch, gamma_rad,
               detuning, has_detuning, ground_loss, aux_gain, aux_loss, linear):
    n = r.shape[0]
    nu = branch.shape[1]
    if linear:
        for p in range(n):
            for q in range(n):
                out[p, q] = -0.5 * (widths[p] + widths[q]) * r[p, q]
        if has_detuning:
            for p in range(n):
                for q in range(n):
                    out[p, q] -= 1j * detuning[p, q] * r[p, q]
    else:
        for p in range(n):
            for q in range(n):
                out[p, q] = 0.0
    for k in range(nv):
        a = vrow[k]
        b = vcol[k]
        iv = 1j * vval[k]
        for c in range(n):
            out[a, c] += iv * r[b, c]
            out[c, b] -= iv * r[c, a]
    for p in range(n):
        out[p, p] += pump[p] * gr
    for l in range(n - nu):
        acc = 0.0 + 0.0j
        for u in range(nu):
            acc += branch[l, u] * r[u, u]
        out[nu + l, nu + l] += gamma_rad * acc
    if linear:
        return -ground_loss * gr, -aux_loss * ax + aux_gain * gr
    return 0.0, aux_gain * gr


@njit(cache=True)
def _build_v(op, om, tu, tl, ts, tv, vrow, vcol, vval):
    nnz = tu.shape[0]
    for k in range(nnz):
        vrow[k] = tu[k]
        vcol[k] = tl[k]
        vval[k] = op[ts[k]] * tv[k]
        vrow[nnz + k] = tl[k]
        vcol[nnz + k] = tu[k]
        vval[nnz + k] = om[ts[k]] * np.conj(tv[k])
    return 2 * nnz


@njit(cache=True)
def _noise_voxel(r, inc, op_n, om_n, xpc, xmc, amp, tu, tl, ts, tv, vrow, vcol, vval,
                 has_field_noise, quadratic, dt):
    n = r.shape[0]
    for p in range(n):
        for q in range(n):
            inc[p, q] = 0.0
    if has_field_noise:
        nv = _build_v(op_n, om_n, tu, tl, ts, tv, vrow, vcol, vval)
        for k in range(nv):
            a = vrow[k]
            b = vcol[k]
            iv = 1j * vval[k]
            for c in range(n):
                inc[a, c] += iv * r[b, c]
                inc[c, b] -= iv * r[c, a]
    for k in range(tu.shape[0]):
        u = tu[k]
        l = tl[k]
        s = ts[k]
        t = tv[k]
        cm = amp[s] * xmc[s] * t            # rho A_s, column l
        cp = amp[s] * xpc[s] * np.conj(t)   # B_s rho, row l
        for c in range(n):
            inc[c, l] += cm * r[c, u]
            inc[l, c] += cp * r[u, c]
    if quadratic:
        for s in range(2):
            pol_m = 0.0 + 0.0j
            pol_p = 0.0 + 0.0j
            for k in range(tu.shape[0]):
                if ts[k] == s:
                    pol_m += r[tl[k], tu[k]] * tv[k]
                    pol_p += np.conj(tv[k]) * r[tu[k], tl[k]]
            fac = amp[s] * (xmc[s] * pol_m + xpc[s] * pol_p)
            for p in range(n):
                for q in range(n):
                    inc[p, q] -= fac * r[p, q]
    for p in range(n):
        for q in range(n):
            inc[p, q] *= dt


@njit(cache=True)
def _advance_kernel(rho, ground, aux, op, om, has_fields, op_n, om_n, xpc, xmc, amp,
                    has_noise, has_field_noise, quadratic, widths, pump, ground_loss,
                    aux_gain, aux_loss, branch, gamma_rad, detuning, has_detuning,
                    tu, tl, ts, tv, dt, maxabs):
    nvox = rho.shape[0]
    n = rho.shape[1]
    nnz = tu.shape[0]
    vrow = np.zeros(2 * nnz, dtype=np.int64)
    vcol = np.zeros(2 * nnz, dtype=np.int64)
    vval = np.zeros(2 * nnz, dtype=np.complex128)
    r0 = np.empty((n, n), dtype=np.complex128)
    rt = np.empty((n, n), dtype=np.complex128)
    k1 = np.empty((n, n), dtype=np.complex128)
    k2 = np.empty((n, n), dtype=np.complex128)
    k3 = np.empty((n, n), dtype=np.complex128)
    k4 = np.empty((n, n), dtype=np.complex128)
    inc = np.empty((n, n), dtype=np.complex128)
    eh = np.empty((n, n), dtype=np.complex128)
    ef = np.empty((n, n), dtype=np.complex128)
    nrow = np.zeros(2 * nnz, dtype=np.int64)
    ncol = np.zeros(2 * nnz, dtype=np.int64)
    nval = np.zeros(2 * nnz, dtype=np.complex128)
    half = 0.5 * dt
    sixth = dt / 6.0
    for v in range(nvox):
        for p in range(n):
            for q in range(n):
                r0[p, q] = rho[v, p, q]
        g0 = ground[v]
        a0 = aux[v]
        nv = 0
        if has_fields:
            nv = _build_v(op[v], om[v], tu, tl, ts, tv, vrow, vcol, vval)
        if has_noise:
            _noise_voxel(r0, inc, op_n[v], om_n[v], xpc[v], xmc[v], amp[v], tu, tl, ts, tv,
                         nrow, ncol, nval, has_field_noise, quadratic, dt)
        wv = widths[v]
        pv = pump[v]
        gl = ground_loss[v]
        ag = aux_gain[v]
        al = aux_loss[v]
        # integrating factors: diagonal damping and detuning are applied exactly
        for p in range(n):
            for q in range(n):
                lam = -0.5 * (wv[p] + wv[q])
                if has_detuning:
                    lam = lam - 1j * detuning[p, q]
                eh[p, q] = np.exp(lam * half)
                ef[p, q] = eh[p, q] * eh[p, q]
        gh = np.exp(-gl * half)
        ah = np.exp(-al * half)
        dg1, da1 = _voxel_rhs(r0, g0, a0, k1, vrow, vcol, vval, nv, wv, pv, branch, gamma_rad,
                              detuning, has_detuning, gl, ag, al, False)
        for p in range(n):
            for q in range(n):
                rt[p, q] = eh[p, q] * (r0[p, q] + half * k1[p, q])
        dg2, da2 = _voxel_rhs(rt, gh * (g0 + half * dg1), ah * (a0 + half * da1), k2, vrow, vcol,
                              vval, nv, wv, pv, branch, gamma_rad, detuning, has_detuning, gl, ag,
                              al, False)
        for p in range(n):
            for q in range(n):
                rt[p, q] = eh[p, q] * r0[p, q] + half * k2[p, q]
        dg3, da3 = _voxel_rhs(rt, gh * g0 + half * dg2, ah * a0 + half * da2, k3, vrow, vcol, vval,
                              nv, wv, pv, branch, gamma_rad, detuning, has_detuning, gl, ag, al,
                              False)
        for p in range(n):
            for q in range(n):
                rt[p, q] = ef[p, q] * r0[p, q] + dt * eh[p, q] * k3[p, q]
        dg4, da4 = _voxel_rhs(rt, gh * gh * g0 + dt * gh * dg3, ah * ah * a0 + dt * ah * da3, k4,
                              vrow, vcol, vval, nv, wv, pv, branch, gamma_rad, detuning,
                              has_detuning, gl, ag, al, False)
        m = 0.0
        for p in range(n):
            for q in range(n):
                val = ef[p, q] * r0[p, q] + sixth * (ef[p, q] * k1[p, q]
                                                     + 2.0 * eh[p, q] * (k2[p, q] + k3[p, q])
                                                     + k4[p, q])
                if has_noise:
                    val += inc[p, q]
                rho[v, p, q] = val
                a = abs(val)
                if not (a <= m):
                    m = a if a == a else np.inf
        ground[v] = gh * gh * g0 + sixth * (gh * gh * dg1 + 2.0 * gh * (dg2 + dg3) + dg4)
        aux[v] = ah * ah * a0 + sixth * (ah * ah * da1 + 2.0 * ah * (da2 + da3) + da4)
        maxabs[v] = m


@njit(cache=True)
def _noise_kernel(rho, out, op_n, om_n, xpc, xmc, amp, has_field_noise, quadratic,
                  tu, tl, ts, tv, dt):
    nnz = tu.shape[0]
    vrow = np.zeros(2 * nnz, dtype=np.int64)
    vcol = np.zeros(2 * nnz, dtype=np.int64)
    vval = np.zeros(2 * nnz, dtype=np.complex128)
    for v in range(rho.shape[0]):
        _noise_voxel(rho[v], out[v], op_n[v], om_n[v], xpc[v], xmc[v], amp[v], tu, tl, ts, tv,
                     vrow, vcol, vval, has_field_noise, quadratic, dt)


# ----------------------------------------------------------------------------
# python front ends

class BlochIntegrator:
    """Binds a level scheme to the numba kernels.

    Parameters
    ----------
    scheme : LevelScheme
    quadratic_noise : bool
        Keep the noise terms quadratic in rho (research flag, default off).
    """

    def __init__(self, scheme: LevelScheme, quadratic_noise: bool = False):
        self.scheme = scheme
        self.quadratic_noise = bool(quadratic_noise)
        tu, tl, ts, tv = scheme.coupling_nonzeros()
        self._t = (np.ascontiguousarray(tu), np.ascontiguousarray(tl),
                   np.ascontiguousarray(ts), np.ascontiguousarray(tv))
        self._branch = np.ascontiguousarray(scheme.branching, dtype=float)
        self._detuning = np.ascontiguousarray(scheme.detunings(), dtype=float)
        self._has_detuning = bool(np.any(self._detuning != 0))
        self._dummy_f2 = np.zeros((1, 2), dtype=complex)

    def _vox(self, arr, nvox, tail, dtype):
        if arr is None:
            return None
        return np.ascontiguousarray(np.broadcast_to(arr, arr.shape).reshape((nvox,) + tail), dtype=dtype)

    def advance(self, rho, ground, aux, rates: IncoherentRates, dtau: float,
                omega_plus=None, omega_minus=None, noise_plus=None, noise_minus=None,
                xi_plus_conj=None, xi_minus_conj=None, atomic_amplitude=None) -> np.ndarray:
        """In-place step of ``rho`` (..., 6, 6), ``ground`` and ``aux`` (...).

        Fields, noises and amplitudes carry a trailing polarization axis and
        must be given for every voxel or be None. Returns max |rho_pq| per
        voxel (inf where non-finite).
        """
        shape = ground.shape
        nvox = int(np.prod(shape))
        r = rho.reshape(nvox, N_LEVELS, N_LEVELS)
        g = ground.reshape(nvox)
        a = aux.reshape(nvox)
        has_fields = omega_plus is not None
        has_noise = xi_plus_conj is not None
        has_field_noise = noise_plus is not None
        dummy = self._dummy_f2  # placeholder for absent inputs; never indexed

        def pick(arr):
            if arr is None:
                return dummy
            return self._vox(np.broadcast_to(arr, shape + (2,)), nvox, (2,), complex)

        op, om = pick(omega_plus), pick(omega_minus)
        opn, omn = pick(noise_plus), pick(noise_minus)
        xpc, xmc, amp = pick(xi_plus_conj), pick(xi_minus_conj), pick(atomic_amplitude)
        widths = self._vox(np.broadcast_to(rates.widths, shape + (N_LEVELS,)), nvox, (N_LEVELS,), float)
        pump = self._vox(np.broadcast_to(rates.pump, shape + (N_LEVELS,)), nvox, (N_LEVELS,), float)
        gl = self._vox(np.broadcast_to(rates.ground_loss, shape), nvox, (), float)
        ag = self._vox(np.broadcast_to(rates.aux_gain, shape), nvox, (), float)
        al = self._vox(np.broadcast_to(rates.aux_loss, shape), nvox, (), float)
        maxabs = np.empty(nvox)
        tu, tl, ts, tv = self._t
        _advance_kernel(r, g, a, op, om, has_fields, opn, omn, xpc, xmc, amp, has_noise,
                        has_field_noise, self.quadratic_noise, widths, pump, gl, ag, al,
                        self._branch, self.scheme.gamma_rad, self._detuning, self._has_detuning,
                        tu, tl, ts, tv, float(dtau), maxabs)
        return maxabs.reshape(shape)


def _contiguous_state(rho, ground, aux):
    rho = np.ascontiguousarray(rho, dtype=complex).copy()
    ground = np.ascontiguousarray(ground, dtype=float).copy()
    aux = np.ascontiguousarray(aux, dtype=float).copy()
    return rho, ground, aux


def rk4_step(rho, ground, aux, rates: IncoherentRates, dtau: float, scheme: LevelScheme,
             omega_plus=None, omega_minus=None):
    """Deterministic RK4 update at frozen fields and rates; returns new arrays."""
    rho, ground, aux = _contiguous_state(rho, ground, aux)
    BlochIntegrator(scheme).advance(rho, ground, aux, rates, dtau, omega_plus, omega_minus)
    return rho, ground, aux


def noise_increment(rho, noise_plus, noise_minus, xi_plus_conj, xi_minus_conj, g, gamma: float,
                    dtau: float, scheme: LevelScheme, quadratic: bool = False) -> np.ndarray:
    """Euler-Maruyama noise increment Delta rho from the pre-update state.

    ``noise_plus``/``noise_minus`` are the noise parts of the fields (or None),
    ``xi_*_conj`` the conjugated noises, and ``g`` the diffusion gauge; all
    carry a trailing polarization axis.
    """
    rho = np.ascontiguousarray(rho, dtype=complex)
    shape = rho.shape[:-2]
    nvox = int(np.prod(shape))
    amp = np.sqrt(gamma / (2.0 * dtau)) / np.sqrt(np.asarray(g, dtype=complex))

    def flat(arr):
        return np.ascontiguousarray(np.broadcast_to(np.asarray(arr, dtype=complex), shape + (2,)).reshape(nvox, 2))

    has_field = noise_plus is not None
    zeros = np.zeros(shape + (2,), dtype=complex)
    out = np.empty((nvox, N_LEVELS, N_LEVELS), dtype=complex)
    tu, tl, ts, tv = scheme.coupling_nonzeros()
    _noise_kernel(rho.reshape(nvox, N_LEVELS, N_LEVELS), out,
                  flat(noise_plus if has_field else zeros), flat(noise_minus if has_field else zeros),
                  flat(xi_plus_conj), flat(xi_minus_conj), flat(amp), has_field, bool(quadratic),
                  tu, tl, ts, tv, float(dtau))
    return out.reshape(rho.shape)


def initial_state(shape, upper_population: float = 0.0):
    """Neutral medium (ground = 1) or, optionally, a fraction placed in the upper levels.

    The upper fraction is shared equally between the upper sublevels.
    """
    rho = np.zeros(tuple(shape) + (N_LEVELS, N_LEVELS), dtype=complex)
    ground = np.full(tuple(shape), 1.0 - upper_population)
    for u in range(N_UPPER):
        rho[..., u, u] = upper_population / N_UPPER
    return rho, ground, np.zeros(tuple(shape))
