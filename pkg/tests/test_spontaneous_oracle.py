import logging
import math

import numpy as np
import pytest

from sfx.atomic_model import build_cu_kalpha1
from sfx.grid_domain import GridSpec, effective_gamma
from sfx.spontaneous_oracle import (analytic_J, analytic_spectrum, fresnel_far_field_magnitude, green_functions,
                                    oracle_photon_numbers, photon_number, photon_rate_asymptotics)

LAM, GR = 0.15406, 0.86


@pytest.fixture(scope="module")
def scheme():
    return build_cu_kalpha1(GR)[0]


def small_grid(nz=3, ntau=12, n=8):
    return GridSpec(n, n, nz, ntau, 20.0, 20.0, 500.0, 0.3, LAM)


def uniform_history(grid, pop=0.2):
    upper = np.zeros((grid.ntau,) + grid.voxel_shape + (2,))
    upper[...] = pop
    return upper


def test_green_near_field_is_cell_delta():
    g = small_grid()
    green = green_functions(g, 2)
    expect = np.zeros(g.transverse_shape)
    expect[0, 0] = 1.0
    np.testing.assert_array_equal(green[0], expect)


def test_green_far_field_magnitude():
    m, dz, dx = 10, 50.0, 1.0
    g = GridSpec(256, 256, m, 2, dx, dx, dz, 0.1, LAM)
    green = green_functions(g, m)
    z = m * dz
    expect = fresnel_far_field_magnitude(LAM, z) * dx * dx
    for ix, iy in [(0, 0), (3, 2), (-5, 4), (1, -4)]:
        assert abs(green[m][ix, iy]) == pytest.approx(expect, rel=0.05)
    assert (np.abs(green[m]) ** 2).sum() == pytest.approx(1.0, rel=1e-12)


def test_equal_time_is_flux_and_photon_number_consistent(scheme):
    g = small_grid()
    upper = uniform_history(g) * np.linspace(0.5, 1.0, g.ntau)[:, None, None, None, None]
    j = analytic_J(upper, 4.8, g, scheme, plane=g.nz)
    assert j.shape == (2, g.ntau - 1, g.ntau - 1)
    diag = np.diagonal(j, axis1=-2, axis2=-1)
    assert np.all(diag >= 0) and np.isrealobj(j)
    np.testing.assert_allclose(photon_number(j, g.dtau), oracle_photon_numbers(upper, 4.8, g, scheme)[g.nz],
                               rtol=1e-12)


def test_single_voxel_far_field(scheme):
    m, dz, dx = 10, 50.0, 1.0
    g = GridSpec(256, 256, m + 1, 3, dx, dx, dz, 0.1, LAM)
    upper = np.zeros((g.ntau,) + g.voxel_shape + (2,))
    rho = 0.3
    upper[:, 0, 0, 0, 1] = rho                          # one voxel, upper level m = +1/2
    n = 4.8
    j = analytic_J(upper, n, g, scheme, plane=m + 1, transverse_integrated=False)
    z = m * dz
    weight = abs(scheme.coupling[1, 3, 1]) ** 2       # the s = +1 transition from that level
    cont = 3 / (8 * math.pi) * LAM ** 2 * GR * n * g.cell_volume * rho * weight / (LAM * z) ** 2
    for ix, iy in [(0, 0), (3, 2), (-5, 4)]:
        assert j[1, 0, 0, ix, iy] == pytest.approx(cont, rel=0.06)
    discrete = effective_gamma(g, GR) * n * dz * rho * weight * abs(green_functions(g, m)[m][0, 0]) ** 2
    assert j[1, 0, 0, 0, 0] == pytest.approx(discrete, rel=1e-12)


def test_decay_factor(scheme):
    g = small_grid(nz=2, ntau=20)
    j = analytic_J(uniform_history(g), 4.8, g, scheme, plane=2)
    for lag in (1, 4, 9):
        assert j[1, 3 + lag, 3] / j[1, 3, 3] == pytest.approx(math.exp(-1.58 * lag * g.dtau), rel=1e-12)
        assert j[1, 3, 3 + lag] == pytest.approx(j[1, 3 + lag, 3], rel=1e-12)


def test_time_dependent_widths_reduce_to_constant(scheme):
    g = small_grid(nz=2, ntau=10)
    widths = np.broadcast_to(scheme.natural_widths, (g.ntau,) + g.voxel_shape + (6,))
    a = analytic_J(uniform_history(g), 4.8, g, scheme, plane=2, widths_history=widths)
    b = analytic_J(uniform_history(g), 4.8, g, scheme, plane=2)
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_plane_out_of_range(scheme):
    g = small_grid()
    with pytest.raises(ValueError):
        analytic_J(uniform_history(g), 4.8, g, scheme, plane=g.nz + 1)


def test_entrance_plane_is_dark(scheme):
    g = small_grid()
    assert not analytic_J(uniform_history(g), 4.8, g, scheme, plane=0).any()
    assert not oracle_photon_numbers(uniform_history(g), 4.8, g, scheme)[0].any()


def test_far_field_rate_scaling():
    zs = np.array([1e3, 2e3, 4e3, 8e3])
    rates = [photon_rate_asymptotics(1e5, GR, LAM, "far", z=z, area=100.0) for z in zs]
    slope = np.polyfit(np.log(zs), np.log(rates), 1)[0]
    assert slope == pytest.approx(-2.0, abs=1e-12)


def test_near_field_rate_and_crossover():
    near = photon_rate_asymptotics(1e5, GR, LAM, "near", solid_angle=1e-6)
    assert near == pytest.approx(3 / (8 * math.pi) * 1e-6 * GR * 1e5)
    z = 1e4
    far = photon_rate_asymptotics(1e5, GR, LAM, "far", z=z, area=1e-6 * z ** 2)
    assert far == pytest.approx(near, rel=1e-14)
    with pytest.raises(ValueError):
        photon_rate_asymptotics(1.0, GR, LAM, "middle")


def exp_corr(n, dtau, gamma):
    """Oracle-shaped J(i, j) = P(min(i, j)) exp(-gamma |i - j| dtau) for a population burst at i = 0.

    Its lag sums are the sampled exponential exp(-gamma |k| dtau) itself.
    """
    t = np.arange(n)
    pop = np.zeros(n)
    pop[0] = 1.0
    return pop[np.minimum(t[:, None], t[None, :])] * np.exp(-gamma * dtau * np.abs(t[:, None] - t[None, :]))


def test_spectrum_hwhm_desk_window():
    out = analytic_spectrum(exp_corr(50, 0.6, 1.58), 0.6, gamma_dec=1.58)
    assert out["hwhm"] == pytest.approx(1.58, rel=0.10)


def test_spectrum_exact_lorentzian_and_scaling():
    a = analytic_spectrum(exp_corr(800, 0.02, 1.58), 0.02, n_omega=16384)
    b = analytic_spectrum(exp_corr(800, 0.02, 3.16), 0.02, n_omega=16384)
    assert a["hwhm"] == pytest.approx(1.58, rel=0.03)
    assert b["hwhm"] / a["hwhm"] == pytest.approx(2.0, rel=0.02)
    assert a["fit_residual"] < 0.01


def test_spectrum_short_window_warns(caplog):
    with caplog.at_level(logging.WARNING):
        analytic_spectrum(exp_corr(5, 0.2, 1.58), 0.2, gamma_dec=1.58)
    assert "shorter" in caplog.text
