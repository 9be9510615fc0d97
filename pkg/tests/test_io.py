import csv

import numpy as np
import pytest

from smpjump.io import (export_ensemble_csv, load_ensemble, read_columns, save_ensemble, write_columns,
                        write_csv)


def test_columns_round_trip(tmp_path):
    cols = {"a": np.arange(5, dtype=np.int32), "b": np.linspace(0, 1, 5), "c": np.arange(5, dtype=np.int16)}
    write_columns(tmp_path / "x.bin", {"note": "hi"}, cols)
    meta, back = read_columns(tmp_path / "x.bin")
    assert meta["note"] == "hi" and meta["n_rows"] == 5
    for k in cols:
        assert np.array_equal(back[k], cols[k]) and back[k].dtype == cols[k].dtype


def test_column_length_mismatch(tmp_path):
    with pytest.raises(ValueError):
        write_columns(tmp_path / "x.bin", {}, {"a": np.zeros(2), "b": np.zeros(3)})


def test_bad_magic(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"nonsense-bytes")
    with pytest.raises(ValueError):
        read_columns(tmp_path / "x.bin")


def test_ensemble_round_trip(tmp_path, cox16, brownian16):
    for e in (cox16, brownian16):
        save_ensemble(e, tmp_path / "e.bin")
        back = load_ensemble(tmp_path / "e.bin")
        assert np.array_equal(back.increments, e.increments)
        assert np.array_equal(np.asarray(back.intensity), np.asarray(e.intensity))
        assert (back.counts is None) == (e.counts is None)
        if e.counts is not None:
            assert np.array_equal(back.counts, e.counts)
        assert back.grid == e.grid and back.seed == e.seed


def test_csv_floats_round_trip_exactly(tmp_path, poisson16):
    write_csv(tmp_path / "t.csv", ["x"], [[0.1], [1 / 3], [np.float64(2.0) ** -36]])
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert [float(r[0]) for r in rows[1:]] == [0.1, 1 / 3, 2.0 ** -36]
    with pytest.raises(ValueError):
        export_ensemble_csv(poisson16, tmp_path / "e.csv", max_rows=10)
