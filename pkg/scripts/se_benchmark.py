"""Spontaneous-emission benchmark: stochastic ensemble versus the analytic oracle.

Runs the oracle and the ensemble on ``configs/se_small.cfg`` (or another
config), writes both into one directory and prints the comparison of the
photon number along z, the exit-plane correlation surface and the spectrum
width.

    python scripts/se_benchmark.py --output results/se_small
"""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

import numpy as np

from sfx.config import load_config
from sfx.ensemble_runner import run, run_oracle, write_oracle
from sfx.observables import half_width_half_max

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=ROOT / "configs" / "se_small.cfg")
    ap.add_argument("--trajectories", type=int)
    ap.add_argument("--output", default=ROOT / "results" / "se_small")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config)
    if args.trajectories:
        cfg = cfg.with_overrides(**{"run.trajectories": args.trajectories})
    out = Path(args.output)
    oracle = run_oracle(cfg)
    write_oracle(out, cfg, oracle)
    result = run(cfg, output=out)
    acc = result.accumulator

    mean, sem = acc.mean("photon_number"), acc.sem("photon_number")
    z_dev = np.abs(mean.real[1:] - oracle.photon_number[1:]) / sem.real[1:]
    print(f"trajectories {acc.count()}  divergent {acc.divergent}")
    print(f"photon number: max |sim - oracle| / SEM over z = {z_dev.max():.2f}")
    print(f"exit |Im N| / SEM = {np.abs(mean.imag[-1] / sem.imag[-1]).max():.2f}")
    j2, j2_sem = acc.mean("two_time")[0], acc.sem("two_time")[0]
    print(f"J surface: max |sim - oracle| / SEM = {(np.abs(j2.real - oracle.two_time[0]) / j2_sem.real).max():.2f}")
    omega = np.asarray(acc.metadata["spectrum_omega"])
    spec = acc.mean("spectrum")[0].real
    gamma_dec = result.model.scheme.decoherence_rate
    for s in range(2):
        print(f"spectrum s={2 * s - 1:+d}: HWHM {half_width_half_max(omega, spec[s]):.3f} fs^-1 "
              f"(gamma_dec {gamma_dec:.3f}, oracle {oracle.spectra[0][s]['hwhm']:.3f})")


if __name__ == "__main__":
    main()
