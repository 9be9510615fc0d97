"""Columnar binary and CSV persistence.

Binary layout: the 8-byte magic ``SMPJCOL1``, a little-endian uint32 header
length, a UTF-8 JSON header, then each column stored contiguously in the order
listed in the header.
"""

import csv
import json
import struct

import numpy as np

MAGIC = b"SMPJCOL1"


def write_columns(path, header, columns):
    """Write named 1-D columns with a JSON header."""
    lengths = {len(v) for v in columns.values()}
    if len(lengths) > 1:
        raise ValueError("all columns must have the same length")
    spec = []
    for name, values in columns.items():
        arr = np.ascontiguousarray(values)
        spec.append({"name": name, "dtype": arr.dtype.newbyteorder("<").str})
    meta = dict(header)
    meta["columns"] = spec
    meta["n_rows"] = lengths.pop() if lengths else 0
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for item, values in zip(spec, columns.values()):
            fh.write(np.ascontiguousarray(values, dtype=item["dtype"]).tobytes())


def read_columns(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path} is not a columnar file")
    (size,) = struct.unpack("<I", data[8:12])
    meta = json.loads(data[12:12 + size].decode())
    offset = 12 + size
    n = meta["n_rows"]
    columns = {}
    for item in meta["columns"]:
        dtype = np.dtype(item["dtype"])
        columns[item["name"]] = np.frombuffer(data, dtype=dtype, count=n, offset=offset).copy()
        offset += n * dtype.itemsize
    return meta, columns


def _long_index(n, k, m):
    path = np.repeat(np.arange(n, dtype=np.int32), k * m)
    step = np.tile(np.repeat(np.arange(k, dtype=np.int32), m), n)
    mark = np.tile(np.arange(m, dtype=np.int16), n * k)
    return path, step, mark


def save_ensemble(ensemble, path):
    n, k, m = ensemble.n_paths, ensemble.n_steps, ensemble.n_marks
    p, s, z = _long_index(n, k, m)
    cols = {"path": p, "step": s, "mark": z,
            "increment": np.ravel(ensemble.increments),
            "intensity": np.ravel(np.asarray(ensemble.intensity))}
    if ensemble.counts is not None:
        cols["count"] = np.ravel(ensemble.counts)
    write_columns(path, {"kind": "ensemble", **ensemble.describe()}, cols)


def load_ensemble(path):
    from .noise import MarkSpace, PathEnsemble, TimeGrid, model_from_description

    meta, cols = read_columns(path)
    if meta.get("kind") != "ensemble":
        raise ValueError(f"{path} does not hold an ensemble")
    grid = TimeGrid(meta["grid"]["horizon"], meta["grid"]["n_steps"])
    marks = MarkSpace(tuple(meta["marks"]))
    shape = (meta["n_paths"], grid.n_steps, len(marks))
    tm = lambda a: np.ascontiguousarray(np.moveaxis(a.reshape(shape), 1, 0))
    counts = tm(cols["count"]) if "count" in cols else None
    return PathEnsemble.from_time_major(grid, marks, model_from_description(meta["model"]), meta["seed"],
                                        tm(cols["increment"]), tm(cols["intensity"]), counts)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([format_value(v) for v in row])


def format_value(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return v


def export_ensemble_csv(ensemble, path, max_rows=1_000_000):
    n, k, m = ensemble.n_paths, ensemble.n_steps, ensemble.n_marks
    if n * k * m > max_rows:
        raise ValueError("ensemble too large for CSV export; use the binary format")
    inc, lam = ensemble.increments, np.asarray(ensemble.intensity)
    cnt = ensemble.counts
    rows = ((i, s, ensemble.marks.labels[z], inc[i, s, z], lam[i, s, z],
             "" if cnt is None else int(cnt[i, s, z]))
            for i in range(n) for s in range(k) for z in range(m))
    write_csv(path, ["path", "step", "mark", "increment", "intensity", "count"], rows)
