"""Run configuration: a line-oriented ``section.key = value [unit]`` format.

Grammar
-------
::

    line    := blank | comment | entry
    comment := '#' anything
    entry   := section '.' key '=' value [unit] [comment]

Values are integers, floats, booleans (true/false/yes/no/on/off), bare
words or comma-separated lists. A dimensioned value carries its unit as
the last whitespace-separated token, e.g. ``pump.energy = 250 uJ``.
Recognized units and their internal equivalents:

=========  ==========================================================
length     nm (1), um/µm (1e3), mm (1e6), m (1e9), pm (1e-3), A (0.1)
time       fs (1), as (1e-3), ps (1e3)
energy     uJ/µJ (1), mJ (1e3), J (1e6); photon energy keV (1), eV (1e-3)
rate       1/fs, fs^-1 (1); 1/ps, ps^-1 (1e-3)
density    nm^-3 (1), m^-3 (1e-27), M (molar -> nm^-3)
=========  ==========================================================

Keys absent from the file take the defaults listed in :data:`SCHEMA`.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from scipy import constants

from .atomic_model import ConfigurationError

MODES = ("full", "spontaneous", "pump-only", "deterministic")
OBSERVABLES = ("photon_number", "pump_photons", "field_norms", "intensity", "two_time", "spectrum",
               "fluence", "transverse_correlation", "stokes", "polarization_correlation",
               "spectral_angular", "inversion", "polarization")
DEFAULT_OBSERVABLES = ("photon_number", "pump_photons", "field_norms", "intensity", "two_time", "spectrum")

_MOLAR_TO_NM3 = constants.Avogadro * 1e3 * 1e-27

UNITS = {
    "length": {"nm": 1.0, "um": 1e3, "µm": 1e3, "mm": 1e6, "m": 1e9, "pm": 1e-3, "A": 0.1},
    "time": {"fs": 1.0, "as": 1e-3, "ps": 1e3},
    "energy": {"uJ": 1.0, "µJ": 1.0, "mJ": 1e3, "J": 1e6},
    "photon_energy": {"keV": 1.0, "eV": 1e-3},
    "rate": {"1/fs": 1.0, "fs^-1": 1.0, "1/ps": 1e-3, "ps^-1": 1e-3},
    "density": {"nm^-3": 1.0, "m^-3": 1e-27, "M": _MOLAR_TO_NM3},
}


class ConfigError(ConfigurationError):
    """Validation failure tied to one configuration key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


# (kind, default); kind is a unit family, or int/float/bool/str/list/path
SCHEMA: dict[str, tuple[str, object]] = {
    "grid.nx": ("int", 16), "grid.ny": ("int", 16), "grid.nz": ("int", 20), "grid.ntau": ("int", 60),
    "grid.dx": ("length", None), "grid.dy": ("length", None), "grid.dz": ("length", None),
    "grid.dtau": ("time", None),
    "grid.width_x": ("length", 900.0), "grid.width_y": ("length", 900.0),
    "grid.length": ("length", 270e3), "grid.window": ("time", 37.0),
    "grid.window_start": ("time", 0.0), "grid.wavelength": ("length", 0.15406),
    "medium.concentration": ("density", 8.0 * _MOLAR_TO_NM3),
    "medium.initial_upper_population": ("float", 0.0),
    "pump.energy": ("energy", 250.0), "pump.photon_energy": ("photon_energy", 9.0),
    "pump.fwhm_x": ("length", 200.0), "pump.fwhm_y": ("length", 200.0),
    "pump.fwhm_t": ("time", 11.7), "pump.delay": ("time", 10.0),
    "physics.gamma_rad": ("rate", 0.86), "physics.width_upper": ("rate", 2.24),
    "physics.width_lower": ("rate", 0.92), "physics.detuning_upper": ("rate", 0.0),
    "physics.detuning_lower": ("rate", 0.0), "physics.cross_sections": ("path", ""),
    "physics.field_absorption": ("bool", True), "physics.spectral_mask": ("bool", True),
    "physics.refractive_delta": ("float", 0.0), "physics.quadratic_noise": ("bool", False),
    "physics.drift_gauge": ("str", "auto"),
    "seed_pulse.amplitude": ("rate", 0.0), "seed_pulse.fwhm_t": ("time", 10.0),
    "seed_pulse.delay": ("time", 0.0), "seed_pulse.polarization": ("str", "both"),
    "seed_pulse.waist": ("length", 0.0), "seed_pulse.file": ("path", ""),
    "run.trajectories": ("int", 100), "run.seed": ("int", 1), "run.mode": ("str", "full"),
    "run.n_smooth": ("int", 2), "run.gauge_eps": ("float", 1e-8), "run.rho_max": ("float", 1e3),
    "run.divergence_threshold": ("float", 0.05), "run.batch_size": ("int", 16),
    "run.workers": ("int", 1), "run.first_trajectory": ("int", 0),
    "output.observables": ("list", list(DEFAULT_OBSERVABLES)), "output.probes": ("list", ["exit"]),
    "output.path": ("path", "sfx_output"), "output.n_omega": ("int", 512),
}

# keys that do not change the physics of a trajectory
_HASH_EXCLUDED = {"run.trajectories", "run.seed", "run.workers", "run.first_trajectory", "output.path"}


def _parse_bool(key, text):
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ConfigError(key, f"expected a boolean, got '{text}'")


def _parse_number(key, text, integer=False):
    try:
        val = int(text, 0) if integer else float(text)
    except ValueError:
        raise ConfigError(key, f"expected a number, got '{text}'") from None
    if not integer and not math.isfinite(val):
        raise ConfigError(key, "value must be finite")
    return val


def parse_value(key: str, text: str, kind: str):
    """Convert the raw text of one entry to its internal value."""
    text = text.strip()
    if kind == "int":
        return _parse_number(key, text, integer=True)
    if kind == "float":
        return _parse_number(key, text)
    if kind == "bool":
        return _parse_bool(key, text)
    if kind in ("str", "path"):
        return text
    if kind == "list":
        return [item.strip() for item in text.split(",") if item.strip()]
    table = UNITS[kind]
    parts = text.split()
    if len(parts) == 1:
        raise ConfigError(key, f"missing unit (one of {', '.join(table)})")
    if len(parts) != 2:
        raise ConfigError(key, f"expected '<number> <unit>', got '{text}'")
    number, unit = parts
    if unit not in table:
        raise ConfigError(key, f"unit '{unit}' is not a {kind} unit ({', '.join(table)})")
    return _parse_number(key, number) * table[unit]


def parse_text(text: str) -> dict[str, object]:
    """Parse configuration text into a flat ``{section.key: value}`` mapping."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected 'section.key = value'")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        if key in values:
            raise ConfigError(key, "duplicate key")
        values[key] = parse_value(key, val, SCHEMA[key][0])
    return values


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration (internal units: nm, fs, uJ, keV, nm^-3)."""

    values: dict = field(default_factory=dict)
    source: str = ""
    base_dir: str = "."

    def __getitem__(self, key: str):
        return self.values[key]

    def with_overrides(self, **overrides) -> "RunConfig":
        vals = dict(self.values)
        for key, val in overrides.items():
            dotted = key.replace("__", ".")
            if dotted not in SCHEMA:
                raise ConfigError(dotted, "unknown key")
            vals[dotted] = val
        cfg = replace(self, values=vals)
        validate(cfg)
        return cfg

    @property
    def mode(self) -> str:
        return self.values["run.mode"]

    def drift_gauge_enabled(self) -> bool:
        choice = str(self.values["physics.drift_gauge"]).lower()
        if choice == "auto":
            return self.mode in ("full", "deterministic")
        return _parse_bool("physics.drift_gauge", choice)

    def resolve_path(self, key: str) -> Path | None:
        text = self.values[key]
        if not text:
            return None
        path = Path(text)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def config_hash(self) -> str:
        canon = {k: v for k, v in sorted(self.values.items()) if k not in _HASH_EXCLUDED}
        return hashlib.sha256(json.dumps(canon, sort_keys=True, default=str).encode()).hexdigest()[:16]

    def grid_steps(self) -> dict[str, float]:
        v = self.values
        return {
            "dx": v["grid.dx"] if v["grid.dx"] is not None else v["grid.width_x"] / v["grid.nx"],
            "dy": v["grid.dy"] if v["grid.dy"] is not None else v["grid.width_y"] / v["grid.ny"],
            "dz": v["grid.dz"] if v["grid.dz"] is not None else v["grid.length"] / v["grid.nz"],
            "dtau": v["grid.dtau"] if v["grid.dtau"] is not None else v["grid.window"] / v["grid.ntau"],
        }


def validate(cfg: RunConfig) -> None:
    """Raise :class:`ConfigError` naming the first offending key."""
    v = cfg.values
    for key in ("grid.nx", "grid.ny", "grid.nz", "grid.ntau"):
        if v[key] < 2:
            raise ConfigError(key, "must be >= 2")
    for key in ("grid.dx", "grid.dy", "grid.dz", "grid.dtau"):
        if v[key] is not None and v[key] <= 0:
            raise ConfigError(key, "must be positive")
    for key in ("grid.width_x", "grid.width_y", "grid.length", "grid.window", "grid.wavelength",
                "pump.photon_energy", "pump.fwhm_x", "pump.fwhm_y", "pump.fwhm_t",
                "physics.width_upper", "physics.width_lower", "seed_pulse.fwhm_t"):
        if v[key] <= 0:
            raise ConfigError(key, "must be positive")
    for key in ("medium.concentration", "pump.energy", "physics.gamma_rad", "seed_pulse.amplitude",
                "seed_pulse.waist", "run.gauge_eps"):
        if v[key] < 0:
            raise ConfigError(key, "must be non-negative")
    if not 0 <= v["medium.initial_upper_population"] <= 1:
        raise ConfigError("medium.initial_upper_population", "must lie in [0, 1]")
    if v["run.mode"] not in MODES:
        raise ConfigError("run.mode", f"must be one of {', '.join(MODES)}")
    if v["run.n_smooth"] not in (1, 2):
        raise ConfigError("run.n_smooth", "supported values are 1 (raw products) and 2 (aligned)")
    if v["run.trajectories"] < 1:
        raise ConfigError("run.trajectories", "must be >= 1")
    if not 0 <= v["run.seed"] < 2 ** 64:
        raise ConfigError("run.seed", "must be an unsigned 64-bit integer")
    if v["run.first_trajectory"] < 0:
        raise ConfigError("run.first_trajectory", "must be >= 0")
    if v["run.rho_max"] <= 0:
        raise ConfigError("run.rho_max", "must be positive")
    if not 0 <= v["run.divergence_threshold"] <= 1:
        raise ConfigError("run.divergence_threshold", "must lie in [0, 1]")
    if v["run.batch_size"] < 1:
        raise ConfigError("run.batch_size", "must be >= 1")
    if v["run.workers"] < 1:
        raise ConfigError("run.workers", "must be >= 1")
    if v["seed_pulse.polarization"] not in ("both", "-1", "+1", "1"):
        raise ConfigError("seed_pulse.polarization", "must be -1, +1 or both")
    if str(v["physics.drift_gauge"]).lower() not in ("auto", "true", "false", "yes", "no", "on", "off"):
        raise ConfigError("physics.drift_gauge", "must be auto or a boolean")
    for name in v["output.observables"]:
        if name not in OBSERVABLES:
            raise ConfigError("output.observables", f"unknown observable '{name}'")
    sf_only = set(OBSERVABLES) - {"pump_photons", "inversion"}
    if v["run.mode"] == "pump-only":
        bad = [name for name in v["output.observables"] if name in sf_only]
        if bad:
            raise ConfigError("output.observables", f"'{bad[0]}' needs emitted fields; mode pump-only has none")
    if v["output.n_omega"] < 8:
        raise ConfigError("output.n_omega", "must be >= 8")
    steps = cfg.grid_steps()
    for probe in v["output.probes"]:
        try:
            probe_plane(probe, v["grid.nz"], steps["dz"])
        except ValueError as exc:
            raise ConfigError("output.probes", str(exc)) from None
    if "polarization_correlation" in v["output.observables"] and v["grid.nx"] * v["grid.ny"] > 1024:
        raise ConfigError("output.observables", "polarization_correlation supports at most 1024 transverse points")
    path = cfg.resolve_path("physics.cross_sections")
    if path is not None and not path.is_file():
        raise ConfigError("physics.cross_sections", f"file not found: {path}")
    path = cfg.resolve_path("seed_pulse.file")
    if path is not None and not path.is_file():
        raise ConfigError("seed_pulse.file", f"file not found: {path}")


def probe_plane(spec: str, nz: int, dz: float) -> int:
    """Plane index for a probe given as 'exit', 'entrance', an index, or a length."""
    spec = str(spec).strip()
    if spec == "exit":
        return nz
    if spec == "entrance":
        return 0
    parts = spec.split()
    if len(parts) == 2:
        unit = parts[1]
        if unit not in UNITS["length"]:
            raise ValueError(f"probe '{spec}' has unit '{unit}', expected a length")
        z = float(parts[0]) * UNITS["length"][unit]
        plane = int(round(z / dz))
    else:
        try:
            plane = int(spec)
        except ValueError:
            raise ValueError(f"cannot interpret probe '{spec}'") from None
    if not 0 <= plane <= nz:
        raise ValueError(f"probe '{spec}' outside planes 0..{nz}")
    return plane


def defaults() -> dict[str, object]:
    return {key: (list(default) if isinstance(default, list) else default)
            for key, (_, default) in SCHEMA.items()}


def load_text(text: str, base_dir: str | Path = ".") -> RunConfig:
    values = defaults()
    values.update(parse_text(text))
    cfg = RunConfig(values=values, source=text, base_dir=str(base_dir))
    validate(cfg)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    return load_text(path.read_text(), base_dir=path.parent)


def format_config(cfg: RunConfig) -> str:
    """Canonical text in internal units, re-loadable by :func:`load_text`."""
    internal = {"length": "nm", "time": "fs", "energy": "uJ", "photon_energy": "keV",
                "rate": "1/fs", "density": "nm^-3"}
    lines = []
    for key, (kind, _) in SCHEMA.items():
        val = cfg.values[key]
        if val is None:
            continue
        if kind in internal:
            lines.append(f"{key} = {val!r} {internal[kind]}")
        elif kind == "list":
            lines.append(f"{key} = {', '.join(val)}")
        elif kind == "bool":
            lines.append(f"{key} = {'true' if val else 'false'}")
        else:
            lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


__all__ = ["ConfigError", "RunConfig", "SCHEMA", "MODES", "OBSERVABLES", "load_config", "load_text",
           "parse_text", "parse_value", "validate", "probe_plane", "format_config", "defaults"]
