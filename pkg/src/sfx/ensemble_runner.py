"""Trajectory loop, batching, divergence policy and output persistence.

Each tau step of a batch of trajectories performs, in order:

1. pump march through all slices with absorption from the current state;
2. emitted-field march with drift-gauged polarization sources and noise;
3. RK4 update of the atoms at frozen fields and rates, plus the
   Euler-Maruyama noise increment evaluated from the pre-update state.

Trajectories are grouped into batches of ``run.batch_size`` consecutive
ids. The partition depends only on the configuration, every batch is
integrated independently, and batch accumulators are merged in batch
order, so the ensemble means do not depend on the number of workers.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .atomic_model import (N_LEVELS, N_UPPER, absorption_coefficients, build_cu_kalpha1, incoherent_rates,
                           load_cross_section_overrides)
from .bloch_solver import BlochIntegrator, initial_state
from .config import RunConfig, format_config, probe_plane
from .field_solver import DET, MINUS, NOISE, PLUS, SliceMarcher, build_pump_initial, flux_from_field
from .grid_domain import GridSpec, effective_gamma
from .io import load_accumulator, save_accumulator, write_array, write_csv
from .noise_engine import diffusion_gauge, drift_gauge_mask, sample_noise
from .observables import (EnsembleAccumulator, aligned_equal_time, aligned_stokes, effective_inversion,
                          flux_norm, polarization_fields, spectral_angular, spectrum_from_two_time, stokes,
                          stokes_pair_products, transverse_correlation, two_time_correlation)
from .spontaneous_oracle import analytic_J, analytic_spectrum, oracle_photon_numbers

log = logging.getLogger(__name__)

ENV_THREADS = "SFX_THREADS"


class DivergenceError(RuntimeError):
    """Too many trajectories exceeded the state bound."""


@dataclass
class TrajectoryRecord:
    trajectory: int
    seed_key: tuple[int, int]
    divergent: bool = False
    first_divergence: tuple[int, int] | None = None   # (slice, tau index)


@dataclass
class Model:
    """Everything derived once from a configuration."""

    cfg: RunConfig
    grid: GridSpec
    scheme: object
    table: object
    density: float
    pump_amplitude: np.ndarray          # (Ntau, Nx, Ny) V/m at the entrance plane
    pump_energy_kev: float
    seed_field: np.ndarray | None      # (Ntau, 2 s, Nx, Ny) Omega+ at the entrance plane
    marcher: SliceMarcher
    integrator: BlochIntegrator
    gamma: float
    norm: float
    probes: list[int]
    observables: tuple[str, ...]
    aligned: bool
    noise: bool
    coupled: bool
    emit: bool
    drift: bool
    field_absorption: bool

    @property
    def n_window(self) -> int:
        return self.grid.ntau - 1 if self.aligned else self.grid.ntau


def build_grid(cfg: RunConfig) -> GridSpec:
    steps = cfg.grid_steps()
    return GridSpec(cfg["grid.nx"], cfg["grid.ny"], cfg["grid.nz"], cfg["grid.ntau"],
                    steps["dx"], steps["dy"], steps["dz"], steps["dtau"],
                    cfg["grid.wavelength"], cfg["grid.window_start"])


def _seed_field(cfg: RunConfig, grid: GridSpec) -> np.ndarray | None:
    path = cfg.resolve_path("seed_pulse.file")
    if path is not None:
        arr = np.load(path)
        want = (grid.ntau, 2) + grid.transverse_shape
        if arr.shape != want:
            raise ValueError(f"seed_pulse.file: expected shape {want}, got {arr.shape}")
        return arr.astype(complex)
    amp = cfg["seed_pulse.amplitude"]
    if amp == 0:
        return None
    tau = grid.tau_axis()
    envelope = amp * np.exp(-4.0 * math.log(2.0) * ((tau - cfg["seed_pulse.delay"]) / cfg["seed_pulse.fwhm_t"]) ** 2)
    waist = cfg["seed_pulse.waist"]
    if waist > 0:
        r2 = grid.x_axis()[:, None] ** 2 + grid.y_axis()[None, :] ** 2
        profile = np.exp(-r2 / waist ** 2)
    else:
        profile = np.ones(grid.transverse_shape)
    pol = cfg["seed_pulse.polarization"]
    weights = {"both": (1.0, 1.0), "-1": (1.0, 0.0), "+1": (0.0, 1.0), "1": (0.0, 1.0)}[pol]
    out = np.zeros((grid.ntau, 2) + grid.transverse_shape, dtype=complex)
    for s, w in enumerate(weights):
        out[:, s] = w * envelope[:, None, None] * profile
    return out


def build_model(cfg: RunConfig) -> Model:
    grid = build_grid(cfg)
    overrides = {}
    path = cfg.resolve_path("physics.cross_sections")
    if path is not None:
        overrides = load_cross_section_overrides(path)
    energies = np.zeros(N_LEVELS)
    energies[:N_UPPER] = cfg["physics.detuning_upper"]
    energies[N_UPPER:] = cfg["physics.detuning_lower"]
    scheme, table = build_cu_kalpha1(cfg["physics.gamma_rad"], cfg["physics.width_upper"],
                                     cfg["physics.width_lower"], energies, overrides)
    pump = build_pump_initial(grid, cfg["pump.energy"], cfg["pump.photon_energy"], cfg["pump.fwhm_x"],
                              cfg["pump.fwhm_y"], cfg["pump.fwhm_t"], cfg["pump.delay"])
    mode = cfg.mode
    probes = sorted({probe_plane(p, grid.nz, grid.dz) for p in cfg["output.probes"]})
    return Model(
        cfg=cfg, grid=grid, scheme=scheme, table=table, density=cfg["medium.concentration"],
        pump_amplitude=pump.amplitude, pump_energy_kev=cfg["pump.photon_energy"],
        seed_field=_seed_field(cfg, grid),
        marcher=SliceMarcher(grid, pump.k0, cfg["physics.spectral_mask"], cfg["physics.refractive_delta"]),
        integrator=BlochIntegrator(scheme, cfg["physics.quadratic_noise"]),
        gamma=effective_gamma(grid, scheme.gamma_rad), norm=flux_norm(grid.wavelength, scheme.gamma_rad),
        probes=probes, observables=tuple(cfg["output.observables"]), aligned=cfg["run.n_smooth"] == 2,
        noise=mode in ("full", "spontaneous"), coupled=mode in ("full", "deterministic"),
        emit=mode != "pump-only", drift=cfg.drift_gauge_enabled(),
        field_absorption=cfg["physics.field_absorption"],
    )


def batch_partition(first: int, count: int, batch_size: int) -> list[range]:
    """Fixed partition of trajectory ids into consecutive batches."""
    stop = first + count
    return [range(start, min(start + batch_size, stop)) for start in range(first, stop, batch_size)]


# ----------------------------------------------------------------------------
# integration of one batch

def _register(acc: EnsembleAccumulator, model: Model) -> None:
    nw = "tau" if not model.aligned else "tau_aligned"
    obs = set(model.observables)
    reg = {
        "photon_number": (("z_plane", "s"), "photons"),
        "pump_photons": (("z_plane",), "photons"),
        "field_norm_sym": (("z_plane", "s"), "photons"),
        "field_norm_asym": (("z_plane", "s"), "photons"),
        "intensity": (("probe", "s", nw), "photons fs^-1"),
        "two_time": (("probe", "s", "tau1", "tau2"), "photons fs^-2"),
        "spectrum": (("probe", "s", "omega"), "photons fs"),
        "fluence": (("probe", "s", "x", "y"), "photons nm^-2"),
        "transverse_correlation": (("probe", "s", "rx", "ry"), "photons"),
        "stokes": (("probe", "stokes", "x", "y"), "photons nm^-2"),
        "stokes_pairs": (("probe", "point_a", "point_b"), "photons^2 nm^-4"),
        "spectral_angular": (("probe", "s", "omega", "theta_x", "theta_y"), "photons fs nm^2"),
        "inversion_up": (("tau", "z_slice", "s"), ""),
        "inversion_low": (("tau", "z_slice", "s"), ""),
        "polarization_mean": (("tau", "z_slice", "s"), ""),
        "polarization_product": (("tau", "z_slice", "s"), ""),
    }
    wanted = {"photon_number", "pump_photons", "intensity", "two_time", "spectrum", "fluence",
              "transverse_correlation", "stokes", "spectral_angular"} & obs
    if "field_norms" in obs:
        wanted |= {"field_norm_sym", "field_norm_asym"}
    if "polarization_correlation" in obs:
        wanted |= {"stokes", "stokes_pairs"}
    if "inversion" in obs:
        wanted |= {"inversion_up", "inversion_low"}
    if "polarization" in obs:
        wanted |= {"polarization_mean", "polarization_product"}
    for name in sorted(wanted):
        axes, units = reg[name]
        acc.register(name, axes, units)


def _first_divergence(maxabs_b, limit) -> int:
    bad = ~(maxabs_b <= limit)
    per_slice = bad.reshape(bad.shape[0], -1).any(axis=1)
    return int(np.argmax(per_slice))


def simulate_batch(model: Model, trajectories: range, seed: int,
                   history_hook=None) -> tuple[EnsembleAccumulator, list[TrajectoryRecord]]:
    """Integrate a batch of trajectories and return its accumulator.

    ``history_hook(step, rho, rates)`` is called before each atomic update
    (used by the oracle to record the field-free kinetics).
    """
    grid, cfg = model.grid, model.cfg
    nb = len(trajectories)
    nz, nx, ny, nt = grid.nz, grid.nx, grid.ny, grid.ntau
    vox = (nb, nz, nx, ny)
    rho, ground, aux = initial_state(vox, cfg["medium.initial_upper_population"])
    records = [TrajectoryRecord(t, (seed, t)) for t in trajectories]
    alive = np.ones(nb, dtype=bool)
    acc = EnsembleAccumulator()
    _register(acc, model)
    wanted = set(acc.axes)
    probes = model.probes
    npl = len(probes)
    area, dtau, norm = grid.cell_area, grid.dtau, model.norm
    n = model.density
    dv = grid.cell_volume
    rho_max = cfg["run.rho_max"]
    eps = cfg["run.gauge_eps"]

    # per-trajectory tallies
    photon = np.zeros((nb, nz + 1, 2), dtype=complex)
    pump_ph = np.zeros((nb, nz + 1))
    sym = np.zeros((nb, nz + 1, 2))
    asym = np.zeros((nb, nz + 1, 2))
    need_hist = bool(wanted & {"intensity", "two_time", "spectrum", "fluence", "transverse_correlation",
                               "stokes", "spectral_angular"}) and model.emit
    hist = np.zeros((nb, npl, 2, 2, nt, nx, ny), dtype=complex) if need_hist else None
    track_atoms = bool(wanted & {"inversion_up", "polarization_mean"})
    inv_up = np.zeros((nb, nt, nz, 2), dtype=complex) if "inversion_up" in wanted else None
    inv_low = np.zeros_like(inv_up) if inv_up is not None else None
    pol_mean = np.zeros((nb, nt, nz, 2), dtype=complex) if "polarization_mean" in wanted else None
    pol_prod = np.zeros_like(pol_mean) if pol_mean is not None else None

    omega = np.zeros((nb, nz + 1, 2, 2, 2, nx, ny), dtype=complex) if model.emit else None
    prev_tot = None
    pump_entry = model.pump_amplitude
    marcher = model.marcher
    amp_field = 2.0 * math.sqrt(model.gamma / (2.0 * dtau))
    amp_atom = math.sqrt(model.gamma / (2.0 * dtau))

    for j in range(nt):
        diag = np.real(np.diagonal(rho, axis1=-2, axis2=-1))
        mu = absorption_coefficients(ground, aux, diag, n, model.table)       # (B, Nz, Nx, Ny, 3)

        # (a) pump
        pump = np.broadcast_to(pump_entry[j], (nb, nx, ny)).astype(complex)
        j_pump = np.empty(vox)
        for iz in range(nz):
            flux = flux_from_field(pump, model.pump_energy_kev)
            j_pump[:, iz] = flux
            pump_ph[:, iz] += flux.sum(axis=(-2, -1)) * area * dtau
            pump = marcher.step_pump(pump, mu[:, iz, :, :, 0])
        pump_ph[:, nz] += flux_from_field(pump, model.pump_energy_kev).sum(axis=(-2, -1)) * area * dtau

        # (b) emitted field
        j_omega = np.zeros(vox + (2,))
        xi_pc = xi_mc = atom_amp = None
        if model.emit:
            p_plus, p_minus = polarization_fields(rho, model.scheme)          # (B, Nz, Nx, Ny, 2)
            if model.drift or track_atoms:
                up, low = effective_inversion(rho, model.scheme)
            if model.drift:
                dmask = drift_gauge_mask(up, low)
                s_plus = np.where(dmask, 0.5 * (p_plus + np.conj(p_minus)), p_plus)
                s_minus = np.where(dmask, 0.5 * (p_minus + np.conj(p_plus)), p_minus)
            else:
                s_plus, s_minus = p_plus, p_minus
            det_scale = model.gamma * n * dv
            s_plus = np.moveaxis(s_plus, -1, 2) * det_scale                   # (B, Nz, 2, Nx, Ny)
            s_minus = np.moveaxis(s_minus, -1, 2) * det_scale
            if model.noise:
                up_p, low_p = effective_inversion(rho, model.scheme, populations_only=True)
                g = diffusion_gauge(up_p, low_p, eps)                         # (B, Nz, Nx, Ny, 2)
                xi_p = np.empty((nb, 2, nz, nx, ny), dtype=complex)
                xi_m = np.empty_like(xi_p)
                for b, t in enumerate(trajectories):
                    draw = sample_noise(seed, t, j, (nz, nx, ny))
                    xi_p[b], xi_m[b] = draw.xi_plus, draw.xi_minus
                root_g = np.moveaxis(np.sqrt(g), -1, 2)                       # (B, Nz, 2, Nx, Ny)
                xi_p = np.moveaxis(xi_p, 1, 2)
                xi_m = np.moveaxis(xi_m, 1, 2)
                n_plus = amp_field * root_g * xi_p
                n_minus = amp_field * root_g * xi_m
                xi_pc = np.moveaxis(np.conj(xi_p), 2, -1)
                xi_mc = np.moveaxis(np.conj(xi_m), 2, -1)
                atom_amp = amp_atom / np.sqrt(g)
            mu_sf = np.moveaxis(mu[..., 1:], -1, 2) if model.field_absorption else None
            if model.seed_field is not None:
                omega[:, 0, PLUS, DET] = model.seed_field[j]
                omega[:, 0, MINUS, DET] = np.conj(model.seed_field[j])
            for iz in range(nz):
                absorb = marcher.sf_absorption(None if mu_sf is None else mu_sf[:, iz])
                omega[:, iz + 1] = marcher.step_sf(
                    omega[:, iz], absorb, s_plus[:, iz], s_minus[:, iz],
                    n_plus[:, iz] if model.noise else None, n_minus[:, iz] if model.noise else None)
            tot = omega[:, :, :, DET] + omega[:, :, :, NOISE]                 # (B, Nz+1, which, s, Nx, Ny)
            if model.coupled:
                j_omega = np.moveaxis(np.abs(tot[:, :nz, PLUS] * tot[:, :nz, MINUS]) / norm, 2, -1)
            # tallies
            if model.aligned:
                if prev_tot is not None:
                    prod = 0.5 * (tot[:, :, PLUS] * prev_tot[:, :, MINUS] + prev_tot[:, :, PLUS] * tot[:, :, MINUS])
                    photon += prod.sum(axis=(-2, -1)) * (area * dtau / norm)
                prev_tot = tot.copy()
            else:
                photon += (tot[:, :, PLUS] * tot[:, :, MINUS]).sum(axis=(-2, -1)) * (area * dtau / norm)
            if "field_norm_sym" in wanted:
                sym += (np.abs(tot[:, :, PLUS] + np.conj(tot[:, :, MINUS])) ** 2).sum(axis=(-2, -1)) * (area * dtau / norm)
                asym += (np.abs(tot[:, :, PLUS] - np.conj(tot[:, :, MINUS])) ** 2).sum(axis=(-2, -1)) * (area * dtau / norm)
            if hist is not None:
                hist[:, :, :, :, j] = tot[:, probes]
            if track_atoms and inv_up is not None:
                inv_up[:, j] = up.mean(axis=(2, 3))
                inv_low[:, j] = low.mean(axis=(2, 3))
            if pol_mean is not None:
                pol_mean[:, j] = p_plus.mean(axis=(2, 3))
                pol_prod[:, j] = (p_plus * p_minus).mean(axis=(2, 3))
        elif inv_up is not None:
            up, low = effective_inversion(rho, model.scheme)
            inv_up[:, j] = up.mean(axis=(2, 3))
            inv_low[:, j] = low.mean(axis=(2, 3))

        if j == nt - 1:
            break

        # (c)+(d) atoms
        rates = incoherent_rates(j_pump, j_omega, model.table, model.scheme)
        if history_hook is not None:
            history_hook(j, rho, rates)
        kw = {}
        if model.emit and model.coupled:
            fields = np.moveaxis(omega[:, :nz], 4, -1)                        # (B, Nz, which, part, Nx, Ny, s)
            kw.update(omega_plus=fields[:, :, PLUS, DET], omega_minus=fields[:, :, MINUS, DET])
            if model.noise:
                kw.update(noise_plus=fields[:, :, PLUS, NOISE], noise_minus=fields[:, :, MINUS, NOISE])
        if model.noise:
            kw.update(xi_plus_conj=xi_pc, xi_minus_conj=xi_mc, atomic_amplitude=atom_amp)
        maxabs = model.integrator.advance(rho, ground, aux, rates, dtau, **kw)

        field_ok = np.ones(nb, dtype=bool)
        if model.emit:
            field_ok = np.isfinite(omega.reshape(nb, -1)).all(axis=1)
        for b in range(nb):
            if alive[b] and (not field_ok[b] or not np.all(maxabs[b] <= rho_max)):
                alive[b] = False
                records[b].divergent = True
                records[b].first_divergence = (_first_divergence(maxabs[b], rho_max), j)
                log.info("trajectory %d diverged at slice %d, step %d", records[b].trajectory,
                         records[b].first_divergence[0], j)
        dead = ~alive
        if dead.any():
            rho[dead] = 0.0
            ground[dead] = 0.0
            aux[dead] = 0.0
            if omega is not None:
                omega[dead] = 0.0
                if prev_tot is not None:
                    prev_tot[dead] = 0.0

    ok = alive
    acc.divergent = int(np.count_nonzero(~ok))
    if "photon_number" in wanted:
        acc.add_batch("photon_number", photon[ok])
    if "pump_photons" in wanted:
        acc.add_batch("pump_photons", pump_ph[ok])
    if "field_norm_sym" in wanted:
        acc.add_batch("field_norm_sym", sym[ok])
        acc.add_batch("field_norm_asym", asym[ok])
    if inv_up is not None:
        acc.add_batch("inversion_up", inv_up[ok])
        acc.add_batch("inversion_low", inv_low[ok])
    if pol_mean is not None:
        acc.add_batch("polarization_mean", pol_mean[ok])
        acc.add_batch("polarization_product", pol_prod[ok])
    if hist is not None and ok.any():
        _probe_observables(acc, model, hist[ok], wanted)
    return acc, records


def _probe_observables(acc, model: Model, hist: np.ndarray, wanted: set) -> None:
    """Observables derived from the probe-plane field histories (B, P, which, s, Ntau, Nx, Ny)."""
    grid, norm = model.grid, model.norm
    area, dtau = grid.cell_area, grid.dtau
    plus, minus = hist[:, :, PLUS], hist[:, :, MINUS]                          # (B, P, s, Ntau, Nx, Ny)
    if model.aligned:
        local = aligned_equal_time(plus, minus, axis=3) / norm
    else:
        local = plus * minus / norm
    if "intensity" in wanted:
        acc.add_batch("intensity", local.sum(axis=(-2, -1)) * area)
    if "fluence" in wanted:
        acc.add_batch("fluence", local.sum(axis=3) * dtau)
    if wanted & {"two_time", "spectrum"}:
        j2 = two_time_correlation(plus, minus, model.scheme.gamma_rad, grid.wavelength, area, model.aligned)
        if "two_time" in wanted:
            acc.add_batch("two_time", j2)
        if "spectrum" in wanted:
            n_omega = model.cfg["output.n_omega"]
            flat = j2.reshape((-1,) + j2.shape[-2:])
            specs = np.array([spectrum_from_two_time(m, dtau, n_omega)[1] for m in flat])
            acc.add_batch("spectrum", specs.reshape(j2.shape[:-2] + (-1,)))
            acc.metadata["spectrum_omega"] = spectrum_from_two_time(flat[0], dtau, n_omega)[0].tolist()
    if "transverse_correlation" in wanted:
        if model.aligned:
            tc = 0.5 * (transverse_correlation(plus[:, :, :, 1:], minus[:, :, :, :-1], grid.dx, grid.dy)
                        + transverse_correlation(plus[:, :, :, :-1], minus[:, :, :, 1:], grid.dx, grid.dy))
        else:
            tc = transverse_correlation(plus, minus, grid.dx, grid.dy)
        acc.add_batch("transverse_correlation", tc.sum(axis=3) * dtau / norm)
    if "stokes" in wanted:
        ps, ms = np.moveaxis(plus, 2, 0), np.moveaxis(minus, 2, 0)            # (s, B, P, Ntau, Nx, Ny)
        if model.aligned:
            st = aligned_stokes(ps, ms, norm, axis=2)
        else:
            st = stokes(ps[0], ms[0], ps[1], ms[1], norm)
        st = np.moveaxis(st, 0, 2)                                              # (B, P, 4, Nt, Nx, Ny)
        st_int = st.sum(axis=3) * dtau                                           # (B, P, 4, Nx, Ny)
        acc.add_batch("stokes", st_int)
        if "stokes_pairs" in wanted:
            pairs = np.array([[stokes_pair_products(st_int[b, p]) for p in range(st_int.shape[1])]
                              for b in range(st_int.shape[0])])
            acc.add_batch("stokes_pairs", pairs)
    if "spectral_angular" in wanted:
        nb, npl = plus.shape[:2]
        out = None
        for b in range(nb):
            for p in range(npl):
                for s in range(2):
                    tx, ty, om, sa = spectral_angular(plus[b, p, s], minus[b, p, s], grid.dx, grid.dy, dtau,
                                                      grid.k0, model.scheme.gamma_rad, grid.wavelength,
                                                      model.aligned)
                    if out is None:
                        out = np.empty((nb, npl, 2) + sa.shape, dtype=complex)
                        acc.metadata.update(theta_x=tx.tolist(), theta_y=ty.tolist(), sa_omega=om.tolist())
                    out[b, p, s] = sa
        acc.add_batch("spectral_angular", out)


# ----------------------------------------------------------------------------
# orchestration

_WORKER_MODEL: dict[str, Model] = {}


def _worker_batch(args):
    cfg, trajectories, seed = args
    key = cfg.config_hash()
    if key not in _WORKER_MODEL:
        _WORKER_MODEL.clear()
        _WORKER_MODEL[key] = build_model(cfg)
    return simulate_batch(_WORKER_MODEL[key], trajectories, seed)


def worker_count(requested: int) -> int:
    cap = os.environ.get(ENV_THREADS)
    if cap:
        try:
            return max(1, min(requested, int(cap)))
        except ValueError:
            log.warning("ignoring non-integer %s=%s", ENV_THREADS, cap)
    return max(1, requested)


@dataclass
class RunResult:
    accumulator: EnsembleAccumulator
    records: list[TrajectoryRecord]
    manifest: dict
    model: Model

    @property
    def divergent_fraction(self) -> float:
        return sum(r.divergent for r in self.records) / max(len(self.records), 1)


def grid_metadata(grid: GridSpec) -> dict:
    return {"nx": grid.nx, "ny": grid.ny, "nz": grid.nz, "ntau": grid.ntau, "dx_nm": grid.dx,
            "dy_nm": grid.dy, "dz_nm": grid.dz, "dtau_fs": grid.dtau, "wavelength_nm": grid.wavelength,
            "window_start_fs": grid.window_start}


def run(cfg: RunConfig, workers: int | None = None, output: str | Path | None = None,
        check_divergence: bool = True) -> RunResult:
    """Integrate all trajectories of ``cfg``; optionally write the output directory."""
    model = build_model(cfg)
    seed = cfg["run.seed"]
    batches = batch_partition(cfg["run.first_trajectory"], cfg["run.trajectories"], cfg["run.batch_size"])
    nworkers = worker_count(workers if workers is not None else cfg["run.workers"])
    start = time.perf_counter()
    if nworkers == 1 or len(batches) == 1:
        results = [simulate_batch(model, b, seed) for b in batches]
    else:
        with ProcessPoolExecutor(max_workers=nworkers) as pool:
            results = list(pool.map(_worker_batch, [(cfg, b, seed) for b in batches]))
    acc = EnsembleAccumulator()
    records: list[TrajectoryRecord] = []
    for batch_acc, batch_records in results:
        acc = acc.merge(batch_acc)
        records.extend(batch_records)
    elapsed = time.perf_counter() - start
    acc.metadata.update(results[0][0].metadata if results else {})
    manifest = {
        "config_hash": cfg.config_hash(), "config": format_config(cfg), "mode": cfg.mode,
        "grid": grid_metadata(model.grid), "probes": model.probes, "aligned": model.aligned,
        "runs": [{"seed": seed, "first": cfg["run.first_trajectory"], "count": cfg["run.trajectories"]}],
        "trajectories": len(records),
        "divergent_records": [{"trajectory": r.trajectory, "slice": r.first_divergence[0],
                               "tau_index": r.first_divergence[1]} for r in records if r.divergent],
        "wall_seconds": elapsed, "workers": nworkers, "version": __version__,
    }
    result = RunResult(acc, records, manifest, model)
    frac = result.divergent_fraction
    if frac > 0:
        log.warning("%d of %d trajectories diverged (%.1f%%) and were excluded",
                    acc.divergent, len(records), 100 * frac)
    if output is not None:
        write_output(output, result)
    if check_divergence and frac > cfg["run.divergence_threshold"]:
        raise DivergenceError(f"divergent fraction {frac:.3f} exceeds run.divergence_threshold "
                              f"{cfg['run.divergence_threshold']}")
    return result


def write_output(directory: str | Path, result: RunResult) -> Path:
    directory = Path(directory)
    acc, model = result.accumulator, result.model
    save_accumulator(directory, acc, result.manifest)
    _write_series(directory, acc, model.grid, model.probes, model.aligned)
    return directory


def _write_series(directory: Path, acc: EnsembleAccumulator, grid: GridSpec, probes, aligned) -> None:
    z = np.arange(grid.nz + 1) * grid.dz
    if "photon_number" in acc.moments:
        mean, sem = acc.mean("photon_number"), acc.sem("photon_number")
        cols = {"z_nm": z}
        for s, label in enumerate(("sm1", "sp1")):
            cols.update({f"re_{label}": mean[:, s].real, f"im_{label}": mean[:, s].imag,
                         f"sem_re_{label}": sem[:, s].real, f"sem_im_{label}": sem[:, s].imag})
        write_csv(directory / "photon_number.csv", cols)
    if "pump_photons" in acc.moments:
        write_csv(directory / "pump_photons.csv",
                  {"z_nm": z, "mean": acc.mean("pump_photons"), "sem": acc.sem("pump_photons")})
    if "intensity" in acc.moments:
        mean, sem = acc.mean("intensity"), acc.sem("intensity")
        tau = grid.tau_axis()[:mean.shape[-1]]
        if aligned:
            tau = tau + 0.5 * grid.dtau
        for p, plane in enumerate(probes):
            cols = {"tau_fs": tau}
            for s, label in enumerate(("sm1", "sp1")):
                cols.update({f"re_{label}": mean[p, s].real, f"im_{label}": mean[p, s].imag,
                             f"sem_re_{label}": sem[p, s].real})
            write_csv(directory / f"intensity_plane{plane}.csv", cols)


def merge_outputs(directories, output: str | Path | None = None) -> tuple[EnsembleAccumulator, dict]:
    """Combine partial output directories that share a configuration hash."""
    directories = list(directories)
    if not directories:
        raise ValueError("nothing to merge")
    acc, manifest = load_accumulator(directories[0])
    seen = {(r["seed"], r["first"], r["count"]) for r in manifest.get("runs", [])}
    for directory in directories[1:]:
        other, om = load_accumulator(directory)
        if om.get("config_hash") != manifest.get("config_hash"):
            raise ValueError(f"config hash mismatch: {directory} ({om.get('config_hash')}) vs "
                             f"{directories[0]} ({manifest.get('config_hash')})")
        runs = {(r["seed"], r["first"], r["count"]) for r in om.get("runs", [])}
        overlap = _overlapping(seen, runs)
        if overlap:
            raise ValueError(f"{directory} repeats trajectories of seed {overlap}")
        seen |= runs
        acc = acc.merge(other)
        manifest["runs"] = manifest.get("runs", []) + om.get("runs", [])
        manifest["trajectories"] = manifest.get("trajectories", 0) + om.get("trajectories", 0)
        manifest["divergent_records"] = manifest.get("divergent_records", []) + om.get("divergent_records", [])
    if output is not None:
        out = Path(output)
        save_accumulator(out, acc, manifest)
        grid = GridSpec(**{"nx": manifest["grid"]["nx"], "ny": manifest["grid"]["ny"],
                           "nz": manifest["grid"]["nz"], "ntau": manifest["grid"]["ntau"],
                           "dx": manifest["grid"]["dx_nm"], "dy": manifest["grid"]["dy_nm"],
                           "dz": manifest["grid"]["dz_nm"], "dtau": manifest["grid"]["dtau_fs"],
                           "wavelength": manifest["grid"]["wavelength_nm"],
                           "window_start": manifest["grid"]["window_start_fs"]})
        _write_series(out, acc, grid, manifest.get("probes", []), manifest.get("aligned", True))
    return acc, manifest


def _overlapping(a, b):
    for seed_a, first_a, count_a in a:
        for seed_b, first_b, count_b in b:
            if seed_a == seed_b and first_a < first_b + count_b and first_b < first_a + count_a:
                return seed_a
    return None


# ----------------------------------------------------------------------------
# oracle

@dataclass
class OracleResult:
    photon_number: np.ndarray          # (Nz+1, 2)
    two_time: np.ndarray               # (P, 2, Nt, Nt)
    spectra: list[dict]                # per probe, per s
    upper_history: np.ndarray
    widths_history: np.ndarray
    probes: list[int]


def field_free_history(model: Model) -> tuple[np.ndarray, np.ndarray]:
    """Upper populations (Ntau, Nz, Nx, Ny, 2) and widths (Ntau, Nz, Nx, Ny, 6) without emitted fields."""
    grid = model.grid
    shape = (grid.ntau, grid.nz, grid.nx, grid.ny)
    upper = np.zeros(shape + (N_UPPER,))
    widths = np.zeros(shape + (N_LEVELS,))

    def hook(step, rho, rates):
        upper[step] = np.real(np.diagonal(rho[0, ..., :N_UPPER, :N_UPPER], axis1=-2, axis2=-1))
        widths[step] = np.broadcast_to(rates.widths[0], shape[1:] + (N_LEVELS,))

    cfg = model.cfg.with_overrides(**{"run.mode": "pump-only", "output.observables": ["pump_photons"]})
    pump_model = build_model(cfg)
    simulate_batch(pump_model, range(1), 0, history_hook=hook)
    # the final node is not advanced; its populations follow from the last step
    upper[-1] = upper[-2] if grid.ntau > 1 else upper[-1]
    widths[-1] = widths[-2] if grid.ntau > 1 else widths[-1]
    return upper, widths


def run_oracle(cfg: RunConfig) -> OracleResult:
    """Analytic spontaneous-emission prediction on the grid of ``cfg``."""
    model = build_model(cfg)
    upper, widths = field_free_history(model)
    grid = model.grid
    mask = model.marcher.mask
    nplanes = oracle_photon_numbers(upper, model.density, grid, model.scheme, mask)
    two = np.array([analytic_J(upper, model.density, grid, model.scheme, p, widths_history=widths, mask=mask)
                    for p in model.probes])
    spectra = [[analytic_spectrum(two[i, s], grid.dtau, model.scheme.decoherence_rate, cfg["output.n_omega"])
                for s in range(2)] for i in range(len(model.probes))]
    return OracleResult(nplanes, two, spectra, upper, widths, model.probes)


def write_oracle(directory: str | Path, cfg: RunConfig, result: OracleResult) -> Path:
    directory = Path(directory)
    write_array(directory, "oracle_photon_number", result.photon_number, ("z_plane", "s"), "photons")
    write_array(directory, "oracle_two_time", result.two_time, ("probe", "s", "tau1", "tau2"), "photons fs^-2")
    spec = np.array([[sp["spectrum"] for sp in per] for per in result.spectra])
    write_array(directory, "oracle_spectrum", spec, ("probe", "s", "omega"), "photons fs")
    write_array(directory, "oracle_spectrum_omega", result.spectra[0][0]["omega"] if result.spectra else np.zeros(0),
                ("omega",), "fs^-1")
    z = np.arange(cfg["grid.nz"] + 1) * build_grid(cfg).dz
    write_csv(directory / "oracle_photon_number.csv",
              {"z_nm": z, "sm1": result.photon_number[:, 0], "sp1": result.photon_number[:, 1]})
    (directory / "oracle.json").write_text(json.dumps({
        "config_hash": cfg.config_hash(), "probes": result.probes, "version": __version__,
        "hwhm": [[sp["hwhm"] for sp in per] for per in result.spectra],
        "fit_hwhm": [[sp["fit_hwhm"] for sp in per] for per in result.spectra],
    }, indent=2))
    return directory
