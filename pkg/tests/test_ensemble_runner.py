import json

import numpy as np
import pytest

from sfx.config import load_text
from sfx.ensemble_runner import (DivergenceError, batch_partition, merge_outputs, run, run_oracle, worker_count,
                                 write_oracle)
from sfx.io import read_array, read_csv, read_manifest
from sfx.observables import EnsembleAccumulator

TINY = """
grid.nx = 4
grid.ny = 4
grid.nz = 3
grid.ntau = 12
grid.width_x = 400 nm
grid.width_y = 400 nm
grid.length = 30 um
grid.window = 24 fs
pump.fwhm_x = 100 nm
pump.fwhm_y = 100 nm
run.trajectories = 6
run.batch_size = 2
run.seed = 11
output.observables = photon_number, pump_photons, field_norms, intensity, two_time, spectrum, inversion, polarization
"""


def tiny(extra=""):
    """TINY with the ``key = value`` lines of ``extra`` replacing its own."""
    lines = dict(line.split("=", 1) for line in (TINY + "\n" + extra).splitlines() if "=" in line)
    return load_text("\n".join(f"{k.strip()} = {v.strip()}" for k, v in lines.items()))


def test_batch_partition():
    assert batch_partition(10, 7, 3) == [range(10, 13), range(13, 16), range(16, 17)]
    assert batch_partition(0, 2, 16) == [range(0, 2)]


def test_worker_count_env_cap(monkeypatch):
    monkeypatch.setenv("SFX_THREADS", "2")
    assert worker_count(8) == 2
    monkeypatch.delenv("SFX_THREADS")
    assert worker_count(8) == 8 and worker_count(0) == 1


def test_deterministic_without_excitation_is_zero():
    cfg = tiny("pump.energy = 0 uJ\nrun.mode = deterministic\nrun.trajectories = 2")
    acc = run(cfg).accumulator
    for name in acc.names:
        assert not np.any(acc.mean(name)), name


def test_worker_count_does_not_change_means():
    cfg = tiny()
    one = run(cfg, workers=1).accumulator
    three = run(cfg, workers=3).accumulator
    assert one.names == three.names
    for name in one.names:
        np.testing.assert_array_equal(one.mean(name), three.mean(name))
        np.testing.assert_array_equal(one.variance(name), three.variance(name))


def test_same_seed_reproducible_other_seed_differs():
    a = run(tiny()).accumulator.mean("photon_number")
    b = run(tiny()).accumulator.mean("photon_number")
    c = run(tiny().with_overrides(**{"run.seed": 12})).accumulator.mean("photon_number")
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_split_merge_matches_monolithic(tmp_path):
    base = tiny("run.trajectories = 10")
    whole = run(base, output=tmp_path / "whole").accumulator
    run(base.with_overrides(**{"run.trajectories": 6}), output=tmp_path / "a")
    run(base.with_overrides(**{"run.trajectories": 4, "run.first_trajectory": 6}), output=tmp_path / "b")
    ab, manifest = merge_outputs([tmp_path / "a", tmp_path / "b"], tmp_path / "merged")
    ba, _ = merge_outputs([tmp_path / "b", tmp_path / "a"])
    assert manifest["trajectories"] == 10
    for name in whole.names:
        scale = max(np.abs(whole.mean(name)).max(), 1e-300)
        for merged in (ab, ba):
            np.testing.assert_allclose(merged.mean(name), whole.mean(name), rtol=1e-12, atol=1e-12 * scale)
            # M2 carries an absolute floating-point floor of order eps * mean^2 * N
            var_floor = 1e-12 * scale ** 2 * 10
            np.testing.assert_allclose(merged.variance(name), whole.variance(name), rtol=1e-9,
                                       atol=var_floor)
    assert (tmp_path / "merged" / "photon_number.csv").is_file()


def test_merge_with_empty_accumulator_is_identity():
    acc = run(tiny("run.trajectories = 2")).accumulator
    merged = acc.merge(EnsembleAccumulator())
    for name in acc.names:
        np.testing.assert_array_equal(merged.mean(name), acc.mean(name))


def test_merge_refuses_hash_mismatch_and_overlap(tmp_path):
    base = tiny("run.trajectories = 2")
    run(base, output=tmp_path / "a")
    run(base.with_overrides(**{"grid.ntau": 14}), output=tmp_path / "b")
    with pytest.raises(ValueError, match="hash"):
        merge_outputs([tmp_path / "a", tmp_path / "b"])
    run(base.with_overrides(**{"run.first_trajectory": 1}), output=tmp_path / "c")
    with pytest.raises(ValueError, match="repeats"):
        merge_outputs([tmp_path / "a", tmp_path / "c"])


def test_output_is_self_describing(tmp_path):
    run(tiny("run.trajectories = 2"), output=tmp_path)
    manifest = read_manifest(tmp_path)
    assert manifest["config_hash"] == tiny().config_hash()
    assert manifest["grid"]["nz"] == 3 and manifest["observables"]["photon_number"] == 2
    arr, meta = read_array(tmp_path, "photon_number")
    assert meta["axes"][0] == "z_plane" or "z" in meta["axes"][0]
    assert arr.shape[0] == 4
    series = read_csv(tmp_path / "photon_number.csv")
    assert len(next(iter(series.values()))) == 4
    json.dumps(manifest)


def test_divergence_policy():
    cfg = tiny("run.trajectories = 2\nrun.rho_max = 1e-9")
    with pytest.raises(DivergenceError):
        run(cfg)
    result = run(cfg, check_divergence=False)
    assert result.divergent_fraction == 1.0
    assert all(r.divergent and r.first_divergence is not None for r in result.records)


def test_pump_only_mode_bleaches_and_has_no_field():
    cfg = tiny("run.mode = pump-only\noutput.observables = pump_photons, inversion\nrun.trajectories = 1")
    acc = run(cfg).accumulator
    pump = acc.mean("pump_photons").real
    assert pump[0] > pump[-1] > 0
    assert np.all(np.diff(pump) <= 0)


def test_oracle_pipeline(tmp_path):
    cfg = tiny("run.mode = spontaneous\nphysics.field_absorption = false")
    result = run_oracle(cfg)
    write_oracle(tmp_path, cfg, result)
    number, _ = read_array(tmp_path, "oracle_photon_number")
    assert number.shape == (4, 2) and np.all(number[1:] > 0) and not number[0].any()
    two, _ = read_array(tmp_path, "oracle_two_time")
    sim = run(cfg).accumulator.mean("two_time")
    assert two.shape == sim.shape
