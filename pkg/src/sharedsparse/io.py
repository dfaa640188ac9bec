"""File formats: CSV exports, the ``SPCL1`` binary envelope and run configs.

Binary envelope (little-endian)::

    b"SPCL1"  uint32 n_arrays
    repeated n_arrays times:
        uint16 name_len, name (utf-8), uint32 ndim, uint64 dims[ndim],
        float64 data[prod(dims)] in column-major order
"""

from __future__ import annotations

import csv
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .grid import Grid2D

MAGIC = b"SPCL1"

__all__ = [
    "write_arrays",
    "read_arrays",
    "write_field_csv",
    "read_field_csv",
    "write_spectrum_csv",
    "read_spectrum_csv",
    "RunConfig",
    "parse_config_text",
]


def _fmt(x) -> str:
    return format(float(x), ".17g")


def write_arrays(path, arrays: dict):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8")
            key = name.encode("utf-8")
            fh.write(struct.pack("<H", len(key)))
            fh.write(key)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.asfortranarray(arr).tobytes(order="F"))


def read_arrays(path) -> dict:
    data = Path(path).read_bytes()
    if data[:5] != MAGIC:
        raise ValueError(f"{path}: not an SPCL1 file")
    pos = 5
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + klen].decode("utf-8")
        pos += klen
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos)
        pos += 8 * size
        out[name] = arr.reshape(shape, order="F").copy()
    return out


def write_field_csv(path, grid: Grid2D, values):
    values = np.asarray(values, dtype=float)
    if values.shape != (grid.N,):
        raise ValueError(f"field has shape {values.shape}, grid has {grid.N} cells")
    i, j = grid.indices()
    x, y = grid.centers()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "x", "y", "value"])
        for row in zip(i, j, x, y, values):
            w.writerow([row[0], row[1], _fmt(row[2]), _fmt(row[3]), _fmt(row[4])])


def read_field_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = [(int(r["i"]), int(r["j"]), float(r["value"])) for r in reader]
    n = int(round(np.sqrt(len(rows))))
    out = np.empty(len(rows))
    for i, j, v in rows:
        out[j * n + i] = v
    return out


def write_spectrum_csv(path, lam):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "eigenvalue"])
        for k, v in enumerate(lam, start=1):
            w.writerow([k, _fmt(v)])


def read_spectrum_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([float(r["eigenvalue"]) for r in csv.DictReader(fh)])


@dataclass
class RunConfig:
    """Everything one CLI run needs; ``None`` means "preset default"."""

    problem: str = "poisson-neumann"
    n: int = 64
    r: int | None = None
    rtilde: int | None = None
    alpha: float | None = None
    beta: float | None = None
    gamma: float | None = None
    kappa: float | None = None
    eps: float = 1e-7
    eps_schedule: str | None = None
    method: str = "nirls"
    theta: float = 1.5
    cg_iters: int = 3
    tol: float = 1e-6
    max_iters: int = 500
    warmup: int = 15
    seed: int = 0
    out_dir: str = "out"

    def __post_init__(self):
        if self.method not in ("irls", "or-irls", "nirls"):
            raise ValueError(f"unknown method {self.method!r}")

    def schedule(self):
        if not self.eps_schedule:
            return None
        rho, eps_min = (float(v) for v in str(self.eps_schedule).split(","))
        return rho, eps_min

    def to_text(self) -> str:
        lines = ["# sharedsparse run configuration"]
        for f in fields(self):
            val = getattr(self, f.name)
            if val is None:
                continue
            lines.append(f"{f.name} = {_fmt(val) if isinstance(val, float) else val}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, mapping: dict) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(types[key], raw)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_mapping(parse_config_text(Path(path).read_text()))

    def asdict(self):
        return asdict(self)


def _coerce(type_str, raw):
    if raw is None or isinstance(raw, (int, float)) and not isinstance(raw, bool):
        return raw
    s = str(raw).strip()
    if s.lower() == "none":
        return None
    if "int" in type_str:
        return int(s)
    if "float" in type_str:
        return float(s)
    return s


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, val = (p.strip() for p in line.split("=", 1))
        out[key] = val
    return out
