import struct

import numpy as np
import pytest

from bgldown.services.gridded_io import (
    CoarseField,
    FineField,
    GridSpec,
    TimeIndex,
    decode_mask,
    encode_mask,
    field_header,
    month_range,
    next_month,
    parse_month,
    read_field,
    write_container,
    write_field,
)
from bgldown.utils.errors import (
    DimensionMismatch,
    MalformedHeader,
    MalformedInput,
    NonFiniteValue,
)
from conftest import fine_field

SMALLEST_HEADER = (
    "kind=fine\nlon0=0.0\nlat0=0.0\ndlon=1.0\ndlat=1.0\nncols=1\nnrows=1\n"
    "ntime=1\nmonths=2000-01\nmask=1x1\n\n"
)


def test_read_smallest_file(tmp_path):
    path = tmp_path / "one.gsf"
    path.write_bytes(SMALLEST_HEADER.encode("ascii") + struct.pack("<d", 7.25))
    fld = read_field(path)
    assert isinstance(fld, FineField)
    assert fld.values.tolist() == [[7.25]]
    assert fld.time.entries == ((2000, 1),)


def test_short_payload_is_dimension_mismatch(tmp_path):
    path = tmp_path / "short.gsf"
    header = SMALLEST_HEADER.replace("ntime=1\nmonths=2000-01", "ntime=2\nmonths=2000-01,2000-02")
    path.write_bytes(header.encode("ascii") + struct.pack("<d", 7.25))
    with pytest.raises(DimensionMismatch):
        read_field(path)


def test_missing_header_key(tmp_path):
    path = tmp_path / "bad.gsf"
    path.write_bytes(SMALLEST_HEADER.replace("dlon=1.0\n", "").encode("ascii") + struct.pack("<d", 1.0))
    with pytest.raises(MalformedHeader):
        read_field(path)


def test_missing_blank_line(tmp_path):
    path = tmp_path / "bad.gsf"
    path.write_bytes(b"kind=fine\nlon0=0.0")
    with pytest.raises(MalformedHeader):
        read_field(path)


def test_non_finite_payload(tmp_path):
    fld = fine_field(np.zeros((2, 4)), 2, 2)
    path = tmp_path / "nan.gsf"
    payload = np.zeros((2, 4))
    payload[1, 3] = np.nan
    write_container(path, field_header(fld), payload)
    with pytest.raises(NonFiniteValue, match="2000-02"):
        read_field(path)


def test_round_trip_is_byte_identical(tmp_path, rng):
    mask = rng.random(7 * 5) > 0.3
    values = rng.standard_normal((13, int(mask.sum()))) * 3.0 + 20.0
    fld = fine_field(values, 7, 5, start=(1999, 11), mask=mask, lon0=145.125, lat0=-10.3, dlon=0.25, dlat=-0.25)
    first, second = tmp_path / "a.gsf", tmp_path / "b.gsf"
    write_field(fld, first)
    loaded = read_field(first)
    write_field(loaded, second)
    assert first.read_bytes() == second.read_bytes()
    np.testing.assert_array_equal(loaded.values, fld.values)
    assert loaded.spec.same_layout(fld.spec)
    assert loaded.time.entries == fld.time.entries


def test_masked_cells_are_absent_from_payload(tmp_path):
    mask = np.array([1, 0, 1, 1, 0, 1], dtype=bool)
    fld = fine_field(np.ones((3, 4)), 3, 2, mask=mask)
    path = tmp_path / "masked.gsf"
    write_field(fld, path)
    raw = path.read_bytes()
    body = raw[raw.find(b"\n\n") + 2:]
    assert len(body) == 3 * 4 * 8


def test_empty_time_index_cannot_be_written(tmp_path):
    grid = GridSpec.full("fine", 0.0, 0.0, 1.0, 1.0, 2, 2)
    fld = FineField(grid, TimeIndex(()), np.zeros((0, 4)))
    with pytest.raises(MalformedInput):
        write_field(fld, tmp_path / "empty.gsf")


def test_coarse_kind_round_trip(tmp_path):
    grid = GridSpec.full("coarse", 1.0, 2.0, 0.5, 0.5, 3, 2)
    fld = CoarseField(grid, TimeIndex(((2001, 3),)), np.arange(6.0))
    write_field(fld, tmp_path / "c.gsf")
    assert isinstance(read_field(tmp_path / "c.gsf"), CoarseField)


def test_custom_season_map_round_trip(tmp_path):
    custom = {"wet": [11, 12, 1], "early": [2, 3, 4], "dry": [5, 6, 7], "late": [8, 9, 10]}
    fld = fine_field(np.zeros((2, 1)), 1, 1, season_map=custom)
    write_field(fld, tmp_path / "s.gsf")
    loaded = read_field(tmp_path / "s.gsf")
    assert loaded.time.season_of(12) == "wet"
    assert loaded.time.season_of(2) == "early"


def test_default_season_map_header_is_omitted():
    fld = fine_field(np.zeros((1, 1)), 1, 1)
    assert "seasons" not in dict(field_header(fld))


def test_mask_run_length_encoding():
    mask = np.array([1, 1, 0, 1, 0, 0, 0], dtype=bool)
    assert encode_mask(mask) == "1x2,0x1,1x1,0x3"
    np.testing.assert_array_equal(decode_mask("1x2,0x1,1x1,0x3"), mask)
    with pytest.raises(MalformedHeader):
        decode_mask("2x3")


def test_active_ordering_is_row_major():
    mask = np.array([1, 0, 1, 1, 1, 0], dtype=bool)
    grid = GridSpec("fine", 10.0, 20.0, 1.0, -1.0, 3, 2, mask)
    lon, lat = grid.coordinates()
    np.testing.assert_array_equal(lon, [10.0, 12.0, 10.0, 11.0])
    np.testing.assert_array_equal(lat, [20.0, 20.0, 19.0, 19.0])


def test_time_index_must_increase():
    with pytest.raises(MalformedInput):
        TimeIndex(((2000, 2), (2000, 1)))


def test_season_positions():
    time = TimeIndex(tuple(month_range((2000, 1), (2001, 12))))
    np.testing.assert_array_equal(time.season_positions("summer"), [0, 1, 11, 12, 13, 23])
    np.testing.assert_array_equal(time.season_positions("summer", until=(2000, 12)), [0, 1, 11])
    assert time.seasons() == ["summer", "autumn", "winter", "spring"]


def test_month_parsing():
    assert parse_month("2018-07") == (2018, 7)
    assert month_range((2000, 11), (2001, 2)) == [(2000, 11), (2000, 12), (2001, 1), (2001, 2)]
    assert next_month((2000, 12)) == (2001, 1) and next_month((2000, 3)) == (2000, 4)
    for bad in ("2018-13", "18-07", "2018/07"):
        with pytest.raises(MalformedInput):
            parse_month(bad)
