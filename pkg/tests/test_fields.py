from lskkf.errors import FieldFormatError, MaskError, ShapeError
from lskkf.fields import (
    Grid,
    MaskSet,
    ScalarField,
    read_field_csv,
    read_pgm,
    read_sf1,
    write_field_csv,
    write_pgm,
    write_sf1,
)

import numpy as np
import pytest


def test_flat_index_is_row_major():
    grid = Grid((2, 3, 4), (1.0, 1.0, 1.0))
    assert grid.flat_index((0, 0, 1)) == 1, "last axis varies fastest"
    assert grid.flat_index((1, 0, 0)) == 12
    np.testing.assert_allclose(grid.point(13), [1.0, 0.0, 1.0])
    assert grid.coordinates().shape == (24, 3)


def test_grid_rejects_bad_metadata():
    with pytest.raises(ShapeError):
        Grid((2, 2), (1.0,))
    with pytest.raises(ShapeError):
        Grid((2, 2), (1.0, 0.0))
    with pytest.raises(ShapeError):
        Grid((1, 1, 1, 1), (1.0, 1.0, 1.0, 1.0))


def test_field_size_must_match_grid():
    with pytest.raises(ShapeError):
        ScalarField(Grid((2, 2), (1.0, 1.0)), np.zeros(5))


def test_sf1_round_trip_is_lossless(tmp_path):
    rng = np.random.default_rng(3)
    grid = Grid((4, 3, 2), (0.001, 0.0025, 0.1))
    fld = ScalarField(grid, rng.standard_normal(grid.size) * 1e5)
    back = read_sf1(write_sf1(fld, tmp_path / "f.sf1"))
    assert back.shape == grid.shape
    assert back.spacing == grid.spacing
    assert np.array_equal(back.values, fld.values), "SF1 must preserve every 64-bit value"


def test_sf1_rejects_truncated_payload(tmp_path):
    path = write_sf1(ScalarField(Grid((3,), (1.0,)), [1.0, 2.0, 3.0]), tmp_path / "f.sf1")
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FieldFormatError):
        read_sf1(path)
    bad = tmp_path / "bad.sf1"
    bad.write_bytes(b"XYZ 1 3 1.0\n" + b"\0" * 24)
    with pytest.raises(FieldFormatError):
        read_sf1(bad)


def test_csv_export_of_2x2_field_is_row_major(tmp_path):
    fld = ScalarField(Grid((2, 2), (1.0, 1.0)), np.array([[1.0, 2.0], [3.0, 4.0]]))
    path = write_field_csv(fld, tmp_path / "f.csv", digest="abc")
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# SF1-csv shape=2x2")
    assert "digest=abc" in lines[0]
    assert [float(v) for v in lines[1:]] == [1.0, 2.0, 3.0, 4.0], "data lines must follow row-major order"
    back = read_field_csv(path)
    assert np.array_equal(back.values, fld.values)


def test_constant_field_gives_uniform_pgm(tmp_path):
    fld = ScalarField(Grid((3, 4), (1.0, 1.0)), np.full(12, 2.5))
    pixels = read_pgm(write_pgm(fld, tmp_path / "c.pgm"))
    assert pixels.shape == (3, 4)
    assert np.all(pixels == pixels[0, 0]), "constant field must map to one gray level"
    assert "min=2.5" in (tmp_path / "c.pgm.txt").read_text()


def test_pgm_spans_full_range(tmp_path):
    fld = ScalarField(Grid((2, 2), (1.0, 1.0)), [0.0, 1.0, 2.0, 4.0])
    pixels = read_pgm(write_pgm(fld, tmp_path / "r.pgm"))
    assert pixels.min() == 0 and pixels.max() == 65535


def test_pgm_of_3d_field_needs_slice(tmp_path):
    fld = ScalarField(Grid((2, 3, 4), (1.0, 1.0, 1.0)), np.arange(24.0))
    with pytest.raises(ShapeError):
        write_pgm(fld, tmp_path / "x.pgm")
    pixels = read_pgm(write_pgm(fld, tmp_path / "x.pgm", axis=2, index=1))
    assert pixels.shape == (2, 3)


def test_masks_reject_overlap_and_non_binary():
    grid = Grid((4,), (1.0,))
    with pytest.raises(MaskError):
        MaskSet(grid, (np.array([1, 1, 0, 0]), np.array([0, 1, 1, 1])))
    with pytest.raises(MaskError):
        MaskSet(grid, (np.array([0.5, 1, 0, 0]),))
    masks = MaskSet.from_labels(grid, np.array([0, 0, 1, 1]))
    assert masks.covers()
    assert masks.indices(1).tolist() == [2, 3]
    partial = MaskSet(grid, (np.array([1, 0, 0, 0]),))
    assert not partial.covers()
    assert partial.labels().tolist() == [0, -1, -1, -1]
