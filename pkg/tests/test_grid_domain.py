import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfx.atomic_model import ConfigurationError
from sfx.grid_domain import GridSpec, effective_gamma, effective_rates, spectral_mask, transverse_wavenumbers


def grid(nx=8, ny=8, dx=1.0, dy=1.0, **kw):
    args = dict(nx=nx, ny=ny, nz=4, ntau=5, dx=dx, dy=dy, dz=10.0, dtau=0.2, wavelength=0.15406)
    args.update(kw)
    return GridSpec(**args)


def test_effective_gamma_unit_cell():
    lam = 0.15406
    g = GridSpec(4, 4, 2, 2, lam, lam, 1.0, 0.1, lam)
    assert effective_gamma(g, 0.86) == pytest.approx(3 / (8 * math.pi) * 0.86, rel=1e-14)


def test_effective_gamma_scaling():
    assert effective_gamma(grid(dx=2.0), 1.0) == pytest.approx(0.5 * effective_gamma(grid(dx=1.0), 1.0))


def test_effective_gamma_paper_grid():
    g = grid(nx=64, ny=64, dx=900 / 64, dy=900 / 64)
    assert effective_gamma(g, 1.0) == pytest.approx(3 / (8 * math.pi) * 0.15406 ** 2 / 14.0625 ** 2, rel=1e-13)


def test_gamma_dv_identity():
    g = grid(dx=5.0, dy=7.0, dz=13.0)
    rates = effective_rates(g, 0.86)
    assert rates.gamma * rates.cell_volume == pytest.approx(3 / (8 * math.pi) * 0.15406 ** 2 * 0.86 * 13.0,
                                                            rel=1e-14)


def test_wavenumbers_layout():
    kx, _ = transverse_wavenumbers(grid(nx=2, ny=2))
    np.testing.assert_allclose(kx, [0, math.pi])
    kx, _ = transverse_wavenumbers(grid(nx=4, ny=4))
    np.testing.assert_allclose(kx, [0, math.pi / 2, math.pi, -math.pi / 2])
    kx, _ = transverse_wavenumbers(grid(nx=16, ny=16, dx=3.0))
    assert np.abs(kx).max() == pytest.approx(math.pi / 3.0)


def test_volume_identity():
    g = grid(nx=6, ny=10, dx=3.3, dy=1.7)
    assert g.cell_volume * g.nx * g.ny * g.nz == pytest.approx(g.nx * g.dx * g.ny * g.dy * g.nz * g.dz, rel=1e-15)


@pytest.mark.parametrize("field,value", [("nx", 1), ("nz", 0), ("dx", 0.0), ("dtau", -1.0), ("nx", 2.5)])
def test_invalid_grid(field, value):
    with pytest.raises(ConfigurationError, match=field):
        grid(**{field: value})


def test_mask_band_untouched():
    g = grid(nx=32, ny=32)
    mask = spectral_mask(g)
    kx, ky = transverse_wavenumbers(g)
    kmax = math.pi
    inner = (np.abs(kx)[:, None] <= 0.9 * kmax) & (np.abs(ky)[None, :] <= 0.9 * kmax)
    np.testing.assert_array_equal(mask[inner], 1.0)
    assert mask[16, 0] == pytest.approx(0.0, abs=1e-30)
    assert np.all((mask >= 0) & (mask <= 1))
    np.testing.assert_array_equal(spectral_mask(g, enabled=False), 1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 40), st.floats(0.1, 10.0))
def test_wavenumbers_symmetric(n, dx):
    kx, _ = transverse_wavenumbers(grid(nx=n, ny=2, dx=dx))
    assert kx[0] == 0
    body = kx[1:] if n % 2 else np.delete(kx, [0, n // 2])
    assert abs(body.sum()) < 1e-9 * max(1.0, np.abs(kx).max())
    assert np.abs(kx).max() <= math.pi / dx * (1 + 1e-12)
