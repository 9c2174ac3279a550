"""Bit-exact artifact formats.

Snapshot container: one JSON header line, a newline, then the raw values as
little-endian float64 in row-major order. Diagnostics and reports are CSV
with 17 significant digits, so a reread reproduces every double exactly.
"""

import csv
import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .functionals import DiagnosticsSeries

FORMAT = "dklab-snapshot"
VERSION = 1
_DTYPE = np.dtype("<f8")


class SnapshotFormatError(ValueError):
    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


@dataclass
class Snapshot:
    values: np.ndarray
    header: dict = field(default_factory=dict)

    @property
    def times(self):
        return self.header.get("times")

    @property
    def time(self):
        return self.header.get("time")


def _fmt(x):
    return format(float(x), ".17g")


def _atomic_write(path, data, mode="wb"):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_snapshot(values, path, time=None, times=None, components=None, extra=None):
    """Write a field, vector field or time series of either.

    ``components`` defaults to 2 when the axis before the grid has length 2
    and the array has exactly 3 axes, else 1; pass it explicitly for series.
    """
    a = np.ascontiguousarray(values, dtype=_DTYPE)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"snapshot arrays end in a square grid, got shape {a.shape}")
    if components is None:
        components = 2 if a.ndim == 3 and a.shape[0] == 2 else 1
    header = {
        "format": FORMAT, "version": VERSION, "dtype": "f64", "endianness": "LE",
        "shape": list(a.shape), "components": int(components),
        "grid": {"n": int(a.shape[-1]), "domain": "unit-torus"},
        "time": None if time is None else float(time),
        "times": None if times is None else [float(t) for t in times],
    }
    if extra:
        header["extra"] = extra
    line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    _atomic_write(path, line + a.tobytes(order="C"))


def read_snapshot(path):
    with open(path, "rb") as f:
        raw = f.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise SnapshotFormatError(path, "missing header line")
    try:
        header = json.loads(raw[:nl])
    except json.JSONDecodeError as exc:
        raise SnapshotFormatError(path, f"header is not JSON ({exc})") from None
    if header.get("format") != FORMAT:
        raise SnapshotFormatError(path, f"not a {FORMAT} container")
    if header.get("version") != VERSION or header.get("dtype") != "f64" or header.get("endianness") != "LE":
        raise SnapshotFormatError(
            path, f"unsupported version: version={header.get('version')} dtype={header.get('dtype')!r} "
                  f"endianness={header.get('endianness')!r} (only version {VERSION}, f64, LE)")
    shape = header.get("shape")
    if not isinstance(shape, list) or len(shape) < 2 or any(not isinstance(s, int) or s <= 0 for s in shape):
        raise SnapshotFormatError(path, f"bad shape {shape!r}")
    if header.get("grid", {}).get("n") != shape[-1] or shape[-1] != shape[-2]:
        raise SnapshotFormatError(path, f"grid config does not match shape {shape}")
    comps = header.get("components")
    if comps not in (1, 2) or (comps == 2 and (len(shape) < 3 or shape[-3] != 2)):
        raise SnapshotFormatError(path, f"component count {comps!r} does not match shape {shape}")
    times = header.get("times")
    if times is not None and len(times) != shape[0]:
        raise SnapshotFormatError(path, f"{len(times)} times for {shape[0]} slices")
    payload = raw[nl + 1:]
    need = int(np.prod(shape)) * _DTYPE.itemsize
    if len(payload) != need:
        kind = "truncated" if len(payload) < need else "oversized"
        raise SnapshotFormatError(path, f"{kind} payload: {len(payload)} bytes, expected {need}")
    values = np.frombuffer(payload, dtype=_DTYPE).reshape(shape).astype(np.float64)
    return Snapshot(values, header)


def write_diagnostics(series, path):
    write_table(path, DiagnosticsSeries.COLUMNS, series.rows())


def read_diagnostics(path):
    cols, rows = read_table(path)
    if tuple(cols) != DiagnosticsSeries.COLUMNS:
        raise ValueError(f"{path}: unexpected diagnostics header {cols}")
    return DiagnosticsSeries.from_rows(rows)


def _cell(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return _fmt(x)


def write_table(path, columns, rows):
    try:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(columns)
            for r in rows:
                w.writerow([_cell(x) for x in r])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def read_table(path):
    with open(path, newline="") as f:
        r = csv.reader(f)
        cols = next(r)
        return cols, [[float(x) for x in row] for row in r]


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if x != x or x in (float("inf"), float("-inf")):
            return str(x)  # JSON has no inf/nan
        return x
    return x


def write_json(path, obj):
    text = json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"
    _atomic_write(path, text, mode="w")


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
