"""File formats: measure/flow text files, binary path dumps, fixed-precision CSV."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidParameter
from .measures import EmpiricalMeasure, MeasureFlow

PATH_MAGIC = b"MVLPATH\x00"
PATH_VERSION = 1
# magic(8) version(u32) pad(u32) n_particles(u32) n_times(u32) dim(u32) pad(u32)
_HEADER = struct.Struct("<8sIIIIII")
assert _HEADER.size == 32


def fmt(x: float) -> str:
    """17 significant digits; round-trips every float64."""
    return format(float(x), ".17g")


def write_csv(path, header: list[str], rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def write_measure(path, mu: EmpiricalMeasure, theta: float) -> None:
    """Header ``dim,theta`` then one ``w,x1,...,xd`` row per atom."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write(f"{mu.dim},{fmt(theta)}\n")
        for w, x in zip(mu.weights, mu.atoms):
            fh.write(",".join([fmt(w), *(fmt(v) for v in x)]) + "\n")


def read_measure(path) -> tuple[EmpiricalMeasure, float]:
    lines = Path(path).read_text().strip().splitlines()
    dim_s, theta_s = lines[0].split(",")
    dim = int(dim_s)
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]], dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != dim + 1:
        raise InvalidParameter(f"{path}: expected {dim + 1} columns per atom row")
    return EmpiricalMeasure(data[:, 1:], data[:, 0]), float(theta_s)


def write_flow(directory, flow: MeasureFlow, theta: float, index_name: str = "index.csv") -> Path:
    """One measure file per grid time plus an index of ``t,filename`` rows."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(flow) - 1)))
    with (directory / index_name).open("w") as fh:
        fh.write("t,filename\n")
        for k, (t, mu) in enumerate(zip(flow.times, flow.measures)):
            name = f"measure_{k:0{width}d}.csv"
            write_measure(directory / name, mu, theta)
            fh.write(f"{fmt(t)},{name}\n")
    return directory / index_name


def read_flow(index_path) -> tuple[MeasureFlow, float]:
    index_path = Path(index_path)
    rows = index_path.read_text().strip().splitlines()[1:]
    times, measures, theta = [], [], None
    for row in rows:
        t, name = row.split(",", 1)
        mu, theta = read_measure(index_path.parent / name)
        times.append(float(t))
        measures.append(mu)
    return MeasureFlow(np.array(times), tuple(measures)), theta


def write_paths(path, paths: np.ndarray) -> None:
    """Little-endian float64 dump, row-major particle x time x dim, 32-byte header."""
    paths = np.asarray(paths, dtype="<f8")
    n, nt, d = paths.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(PATH_MAGIC, PATH_VERSION, 0, n, nt, d, 0))
        fh.write(np.ascontiguousarray(paths).tobytes())


def read_paths(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, version, _, n, nt, d, _ = _HEADER.unpack_from(raw)
    if magic != PATH_MAGIC:
        raise InvalidParameter(f"{path}: not a path dump")
    if version != PATH_VERSION:
        raise InvalidParameter(f"{path}: unsupported version {version}")
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if data.size != n * nt * d:
        raise InvalidParameter(f"{path}: truncated payload")
    return data.reshape(n, nt, d).copy()


def write_json(path, payload) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")
