"""Self-describing output directories.

Each array ``name`` is stored as ``name.bin`` (raw little-endian data) next
to ``name.hdr``, a text header with one ``key: value`` per line::

    dtype: <c16
    shape: 2, 49, 49
    axes: s, tau1, tau2
    units: photons nm^2 fs^-1

``manifest.json`` records the package version, configuration hash and
text, grid metadata, trajectory ranges and per-observable counts. Scalar
series versus z or tau are additionally written as CSV.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import __version__
from .observables import EnsembleAccumulator, _Moments

MANIFEST = "manifest.json"


def write_array(directory: str | Path, name: str, array, axes=(), units: str = "") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(array)
    arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    (directory / f"{name}.bin").write_bytes(np.ascontiguousarray(arr).tobytes())
    header = [f"dtype: {arr.dtype.str}", f"shape: {', '.join(str(n) for n in arr.shape)}",
              f"axes: {', '.join(axes)}", f"units: {units}"]
    path = directory / f"{name}.hdr"
    path.write_text("\n".join(header) + "\n")
    return path


def read_header(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if ":" in line:
            key, val = line.split(":", 1)
            out[key.strip()] = val.strip()
    return out


def read_array(directory: str | Path, name: str) -> tuple[np.ndarray, dict]:
    """Array and its parsed header (axes as a tuple, shape as ints)."""
    directory = Path(directory)
    hdr = read_header(directory / f"{name}.hdr")
    shape = tuple(int(n) for n in hdr["shape"].split(",") if n.strip())
    data = np.frombuffer((directory / f"{name}.bin").read_bytes(), dtype=np.dtype(hdr["dtype"]))
    meta = {"axes": tuple(a.strip() for a in hdr.get("axes", "").split(",") if a.strip()),
            "units": hdr.get("units", ""), "shape": shape}
    return data.reshape(shape).astype(data.dtype.newbyteorder("="), copy=True), meta


def write_csv(path: str | Path, columns: dict[str, np.ndarray]) -> None:
    """Columns of equal length as a CSV with a header row."""
    names = list(columns)
    data = [np.asarray(columns[n]).ravel() for n in names]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for row in zip(*data):
            writer.writerow([repr(float(v)) for v in row])


def read_csv(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0]
    cols = np.array([[float(v) for v in r] for r in rows[1:]]).T
    return {n: cols[i] for i, n in enumerate(names)}


def save_accumulator(directory: str | Path, acc: EnsembleAccumulator, manifest: dict) -> Path:
    """Write means, SEMs and raw moments so that partial runs can be merged."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    counts = {}
    for name in acc.names:
        m = acc.moments[name]
        axes, units = acc.axes.get(name, ()), acc.units.get(name, "")
        write_array(directory, name, m.mean, axes, units)
        write_array(directory, f"{name}.sem", acc.sem(name), axes, units)
        write_array(directory, f"{name}.m2_re", m.m2_re, axes, f"({units})^2")
        if m.m2_im is not None:
            write_array(directory, f"{name}.m2_im", m.m2_im, axes, f"({units})^2")
        counts[name] = m.count
    full = dict(manifest)
    full.update({"version": __version__, "observables": counts, "divergent": acc.divergent})
    full.setdefault("metadata", {}).update(acc.metadata)
    (directory / MANIFEST).write_text(json.dumps(full, indent=2, sort_keys=True, default=_jsonable))
    return directory / MANIFEST


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"{directory} has no {MANIFEST}")
    return json.loads(path.read_text())


def load_accumulator(directory: str | Path) -> tuple[EnsembleAccumulator, dict]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    acc = EnsembleAccumulator(divergent=int(manifest.get("divergent", 0)),
                              metadata=dict(manifest.get("metadata", {})))
    for name, count in manifest.get("observables", {}).items():
        mean, meta = read_array(directory, name)
        m2_re, _ = read_array(directory, f"{name}.m2_re")
        m2_im = None
        if (directory / f"{name}.m2_im.hdr").is_file():
            m2_im, _ = read_array(directory, f"{name}.m2_im")
        acc.moments[name] = _Moments(int(count), mean, m2_re, m2_im)
        acc.axes[name] = meta["axes"]
        acc.units[name] = meta["units"]
    return acc, manifest
