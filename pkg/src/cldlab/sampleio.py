"""Sample and table serialisation (CSV, JSON, little-endian binary)."""

from __future__ import annotations

import csv
import io
import json
import struct

import numpy as np

SAMPLE_MAGIC = b"CLDSMP01"


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def table_to_csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _jsonable(v):
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    return v


def table_to_json(columns, rows, **meta) -> str:
    data = {c: [_jsonable(r[i]) for r in rows] for i, c in enumerate(columns)}
    return json.dumps({**meta, "columns": list(columns), "data": data}, indent=2)


def samples_to_csv(x, v=None) -> str:
    x = np.atleast_2d(x)
    cols = [f"x_{i}" for i in range(x.shape[1])]
    arr = x
    if v is not None:
        cols += [f"v_{i}" for i in range(x.shape[1])]
        arr = np.concatenate([x, np.atleast_2d(v)], 1)
    return table_to_csv(cols, arr.tolist())


def read_samples_csv(text: str):
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    arr = np.array(body, dtype=float).reshape(len(body), len(header))
    nx = sum(h.startswith("x_") for h in header)
    x = arr[:, :nx]
    v = arr[:, nx:] if nx < len(header) else None
    return x, v


def samples_to_bytes(x) -> bytes:
    x = np.ascontiguousarray(np.atleast_2d(x), dtype="<f8")
    n, d = x.shape
    return SAMPLE_MAGIC + struct.pack("<II", n, d) + x.tobytes()


def samples_from_bytes(raw: bytes) -> np.ndarray:
    if raw[:8] != SAMPLE_MAGIC:
        raise ValueError("not a CLDSMP01 sample blob")
    n, d = struct.unpack("<II", raw[8:16])
    body = raw[16:]
    if len(body) != 8 * n * d:
        raise ValueError(f"payload has {len(body)} bytes, expected {8 * n * d}")
    return np.frombuffer(body, dtype="<f8").reshape(n, d).copy()
