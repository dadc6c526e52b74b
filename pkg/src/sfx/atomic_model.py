"""Cu K-alpha1 level scheme, photoionization data and incoherent kinetics.

Level ordering used everywhere in the package (index -> state)::

    0  1s1/2 m=-1/2   (upper)
    1  1s1/2 m=+1/2   (upper)
    2  2p3/2 m=-3/2   (lower)
    3  2p3/2 m=-1/2   (lower)
    4  2p3/2 m=+1/2   (lower)
    5  2p3/2 m=+3/2   (lower)

Field components ("F" axis of the cross-section tables) are ordered
``(pump, omega s=-1, omega s=+1)`` and polarizations ``s`` are ordered
``(-1, +1)``.

Units: cross-sections nm^2, fluxes photons nm^-2 fs^-1, rates fs^-1,
densities nm^-3, absorption coefficients nm^-1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

N_UPPER = 2
N_LOWER = 4
N_LEVELS = N_UPPER + N_LOWER
UPPER = slice(0, N_UPPER)
LOWER = slice(N_UPPER, N_LEVELS)
POLARIZATIONS = (-1, +1)
FIELD_COMPONENTS = ("pump", "omega_minus", "omega_plus")

UPPER_LABELS = ("1s1/2 m=-1/2", "1s1/2 m=+1/2")
LOWER_LABELS = ("2p3/2 m=-3/2", "2p3/2 m=-1/2", "2p3/2 m=+1/2", "2p3/2 m=+3/2")

# Natural widths (fs^-1): K shell and L3 shell.
WIDTH_K = 2.24
WIDTH_L3 = 0.92

# Photoionization cross-sections in nm^2, keyed by the table symbol names.
CROSS_SECTIONS = {
    "sigma_g_P_1s": 2.53e-6,
    "sigma_g_P_2p": 1.04e-7,
    "sigma_g_P_a": 3.23e-7,
    "sigma_g_Omega_2p": 1.52e-7,
    "sigma_g_Omega_a": 4.34e-7,
    "sigma_i_P_1s": 4.75e-7,
    "sigma_i_P_2p": 3.02e-7,
    "sigma_i_Omega_1s": 6.53e-7,
    "sigma_i_Omega_2p": 4.15e-7,
    "sigma_a_P": 3.27e-7,
    "sigma_a_Omega": 4.58e-7,
    "sigma_P_O": 2.00e-8,
    "sigma_P_N": 1.11e-8,
    "sigma_Omega_O": 2.75e-8,
    "sigma_Omega_N": 1.55e-8,
}

# Atoms per copper atom in an 8 M copper nitrate solution.
COMPOUND_COUNTS = {"O": 13, "N": 2}


class ConfigurationError(ValueError):
    """Raised for physically invalid model parameters."""


@dataclass(frozen=True)
class LevelScheme:
    """Immutable description of the emitting level manifold.

    ``coupling[u, l, s]`` holds the dimensionless dipole coefficient
    T_{ul,s}; the reverse coefficient is its complex conjugate.
    ``branching[l, u]`` holds the isotropic radiative branching ratios.
    ``energies`` are level energies relative to the carrier (rad/fs), so
    the detuning of any pair is ``energies[p] - energies[q]``.
    """

    upper_labels: tuple[str, ...]
    lower_labels: tuple[str, ...]
    energies: np.ndarray
    coupling: np.ndarray
    branching: np.ndarray
    gamma_rad: float
    width_upper: float
    width_lower: float

    @property
    def n_levels(self) -> int:
        return len(self.upper_labels) + len(self.lower_labels)

    @property
    def natural_widths(self) -> np.ndarray:
        nu = len(self.upper_labels)
        out = np.full(self.n_levels, self.width_lower)
        out[:nu] = self.width_upper
        return out

    @property
    def decoherence_rate(self) -> float:
        """Natural damping rate of the optical coherences."""
        return 0.5 * (self.width_upper + self.width_lower)

    @property
    def coupling_lu(self) -> np.ndarray:
        """T_{lu,s} laid out as ``[l, u, s]``."""
        return np.conj(np.transpose(self.coupling, (1, 0, 2)))

    def detunings(self) -> np.ndarray:
        """Matrix of Delta omega_pq = omega_p - omega_q."""
        e = np.asarray(self.energies, dtype=float)
        return e[:, None] - e[None, :]

    def coupling_nonzeros(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Sparse form of T: (upper index, lower index in full ordering, s index, value)."""
        u, l, s = np.nonzero(self.coupling)
        vals = self.coupling[u, l, s].astype(np.complex128)
        return (u.astype(np.int64), (l + len(self.upper_labels)).astype(np.int64),
                s.astype(np.int64), vals)


@dataclass(frozen=True)
class CrossSectionTable:
    """Partial photoionization cross-sections (nm^2).

    Rows follow ``FIELD_COMPONENTS``; columns follow the level ordering,
    with the auxiliary state appended as the last column of ``s_ground``.
    """

    s_ground: np.ndarray
    s_ion: np.ndarray
    s_aux: np.ndarray
    sigma_compound: np.ndarray
    values: Mapping[str, float] = field(default_factory=dict)

    @property
    def ground_total(self) -> np.ndarray:
        """Total ground-state cross-section per field component, aux included."""
        return self.s_ground.sum(axis=1)


def _coupling_matrix() -> np.ndarray:
    t = np.zeros((N_UPPER, N_LOWER, 2), dtype=np.complex128)
    third, root = 1.0 / 3.0, 1.0 / math.sqrt(3.0)
    # s = +1: m_l = m_u + 1
    t[0, 2, 1] = third          # -1/2 -> +1/2
    t[1, 3, 1] = root           # +1/2 -> +3/2
    # s = -1: m_l = m_u - 1
    t[0, 0, 0] = root           # -1/2 -> -3/2
    t[1, 1, 0] = third          # +1/2 -> -1/2
    return t


def _branching_matrix() -> np.ndarray:
    return np.array(
        [[1 / 3, 0.0],
         [2 / 9, 1 / 9],
         [1 / 9, 2 / 9],
         [0.0, 1 / 3]]
    )


def _tables(v: Mapping[str, float]) -> CrossSectionTable:
    gp1s, gp2p, gpa = v["sigma_g_P_1s"], v["sigma_g_P_2p"], v["sigma_g_P_a"]
    go2p, goa = v["sigma_g_Omega_2p"], v["sigma_g_Omega_a"]
    ip1s, ip2p = v["sigma_i_P_1s"], v["sigma_i_P_2p"]
    io1s, io2p = v["sigma_i_Omega_1s"], v["sigma_i_Omega_2p"]
    s_ground = np.array([
        [0.5 * gp1s, 0.5 * gp1s, 0.27 * gp2p, 0.23 * gp2p, 0.23 * gp2p, 0.27 * gp2p, gpa],
        [0.0, 0.0, 0.12 * go2p, 0.18 * go2p, 0.28 * go2p, 0.42 * go2p, goa],
        [0.0, 0.0, 0.42 * go2p, 0.28 * go2p, 0.18 * go2p, 0.12 * go2p, goa],
    ])
    s_ion = np.array([
        [ip1s, ip1s, 1.05 * ip2p, 0.95 * ip2p, 0.95 * ip2p, 1.05 * ip2p],
        [0.75 * io1s, 1.25 * io1s, 0.70 * io2p, 0.83 * io2p, 1.06 * io2p, 1.41 * io2p],
        [1.25 * io1s, 0.75 * io1s, 1.41 * io2p, 1.06 * io2p, 0.83 * io2p, 0.70 * io2p],
    ])
    s_aux = np.array([v["sigma_a_P"], v["sigma_a_Omega"], v["sigma_a_Omega"]])
    no, nn = COMPOUND_COUNTS["O"], COMPOUND_COUNTS["N"]
    comp_p = no * v["sigma_P_O"] + nn * v["sigma_P_N"]
    comp_o = no * v["sigma_Omega_O"] + nn * v["sigma_Omega_N"]
    sigma_compound = np.array([comp_p, comp_o, comp_o])
    for arr in (s_ground, s_ion, s_aux, sigma_compound):
        arr.setflags(write=False)
    return CrossSectionTable(s_ground, s_ion, s_aux, sigma_compound, dict(v))


def load_cross_section_overrides(path: str | Path) -> dict[str, float]:
    """Read ``name = value`` lines; ``#`` starts a comment."""
    out: dict[str, float] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'name = value'")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in CROSS_SECTIONS:
            raise ConfigurationError(f"{path}:{lineno}: unknown cross-section '{key}'")
        out[key] = float(val)
    return out


def build_cu_kalpha1(
    gamma_rad: float = 1.0,
    width_upper: float = WIDTH_K,
    width_lower: float = WIDTH_L3,
    energies: np.ndarray | None = None,
    cross_sections: Mapping[str, float] | None = None,
) -> tuple[LevelScheme, CrossSectionTable]:
    """Assemble the six-level Cu K-alpha1 scheme and its ionization data.

    ``gamma_rad`` has no default physical value here; callers pass the
    configured radiative rate.
    """
    if width_upper <= 0 or width_lower <= 0:
        raise ConfigurationError("natural widths must be positive")
    if gamma_rad < 0:
        raise ConfigurationError("gamma_rad must be non-negative")
    vals = dict(CROSS_SECTIONS)
    for key, val in (cross_sections or {}).items():
        if key not in CROSS_SECTIONS:
            raise ConfigurationError(f"unknown cross-section '{key}'")
        if val < 0:
            raise ConfigurationError(f"cross-section '{key}' must be >= 0")
        vals[key] = float(val)
    e = np.zeros(N_LEVELS) if energies is None else np.asarray(energies, dtype=float)
    if e.shape != (N_LEVELS,):
        raise ConfigurationError("energies must have one entry per level")
    coupling, branching = _coupling_matrix(), _branching_matrix()
    for arr in (coupling, branching, e):
        arr.setflags(write=False)
    scheme = LevelScheme(UPPER_LABELS, LOWER_LABELS, e, coupling, branching,
                         float(gamma_rad), float(width_upper), float(width_lower))
    return scheme, _tables(vals)


def _stack_fluxes(j_pump, j_omega) -> np.ndarray:
    j_pump = np.asarray(j_pump, dtype=float)
    j_omega = np.asarray(j_omega, dtype=float)
    return np.concatenate([j_pump[..., None], j_omega], axis=-1)


def pump_rates(j_pump, j_omega, table: CrossSectionTable) -> np.ndarray:
    """Ground-state promotion rates p_i (fs^-1) into the six levels.

    ``j_omega`` carries a trailing axis of length 2 (s = -1, +1).
    """
    return _stack_fluxes(j_pump, j_omega) @ table.s_ground[:, :N_LEVELS]


def aux_production_rate(j_pump, j_omega, table: CrossSectionTable) -> np.ndarray:
    return _stack_fluxes(j_pump, j_omega) @ table.s_ground[:, N_LEVELS]


def ground_depletion_rate(j_pump, j_omega, table: CrossSectionTable) -> np.ndarray:
    return _stack_fluxes(j_pump, j_omega) @ table.ground_total


def aux_loss_rate(j_pump, j_omega, table: CrossSectionTable) -> np.ndarray:
    return _stack_fluxes(j_pump, j_omega) @ table.s_aux


def lifetimes(j_pump, j_omega, table: CrossSectionTable, scheme: LevelScheme) -> np.ndarray:
    """Total widths Gamma_i: natural width plus photoionization of the ion."""
    return scheme.natural_widths + _stack_fluxes(j_pump, j_omega) @ table.s_ion


def absorption_coefficients(rho_ground, rho_aux, rho_diag, n, table: CrossSectionTable) -> np.ndarray:
    """Absorption coefficients mu_F (nm^-1), trailing axis over field components.

    Only real parts of the populations enter.
    """
    g = np.real(np.asarray(rho_ground))[..., None]
    a = np.real(np.asarray(rho_aux))[..., None]
    d = np.real(np.asarray(rho_diag))
    n = np.asarray(n, dtype=float)[..., None]
    return n * (g * table.ground_total + a * table.s_aux + d @ table.s_ion.T
                + table.sigma_compound)


def incoherent_derivative(rho, rho_ground, rho_aux, j_pump, j_omega,
                          table: CrossSectionTable, scheme: LevelScheme):
    """Pump, decay and ionization part of the atomic equations.

    ``rho`` has trailing shape (6, 6). Returns the derivatives of
    (rho, rho_ground, rho_aux).
    """
    rho = np.asarray(rho)
    widths = lifetimes(j_pump, j_omega, table, scheme)
    p = pump_rates(j_pump, j_omega, table)
    damp = 0.5 * (widths[..., :, None] + widths[..., None, :])
    drho = -damp * rho
    diag = np.diagonal(rho, axis1=-2, axis2=-1)
    feed = np.zeros(diag.shape, dtype=np.result_type(rho, complex))
    feed[..., LOWER] = scheme.gamma_rad * diag[..., UPPER] @ scheme.branching.T
    feed = feed + p * np.asarray(rho_ground)[..., None]
    idx = np.arange(N_LEVELS)
    drho[..., idx, idx] += feed
    dground = -ground_depletion_rate(j_pump, j_omega, table) * rho_ground
    daux = (-aux_loss_rate(j_pump, j_omega, table) * rho_aux
            + aux_production_rate(j_pump, j_omega, table) * rho_ground)
    return drho, dground, daux


@dataclass(frozen=True)
class IncoherentRates:
    """Flux-dependent rates for one set of voxels (all fs^-1).

    ``pump`` and ``widths`` carry a trailing axis over the six levels.
    """

    pump: np.ndarray
    widths: np.ndarray
    ground_loss: np.ndarray
    aux_gain: np.ndarray
    aux_loss: np.ndarray


def incoherent_rates(j_pump, j_omega, table: CrossSectionTable, scheme: LevelScheme) -> IncoherentRates:
    """Evaluate every flux-dependent rate entering the incoherent kinetics."""
    fluxes = _stack_fluxes(j_pump, j_omega)
    return IncoherentRates(
        pump=fluxes @ table.s_ground[:, :N_LEVELS],
        widths=scheme.natural_widths + fluxes @ table.s_ion,
        ground_loss=fluxes @ table.ground_total,
        aux_gain=fluxes @ table.s_ground[:, N_LEVELS],
        aux_loss=fluxes @ table.s_aux,
    )
