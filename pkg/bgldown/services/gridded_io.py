#!/usr/bin/env python3
"""
Gridded space-time data model and the self-describing `.gsf` container.

A `.gsf` file is a text header of `key=value` lines, a blank line, then a
little-endian float64 payload laid out row-major [time x active cells].
Masked cells are omitted from the payload. The same container carries
climatologies, EOF bases and fitted BGL models, distinguished by `kind=`.
"""

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from bgldown.config.settings import DEFAULT_SEASON_MAP, SEASON_ORDER
from bgldown.utils.errors import (
    DimensionMismatch,
    IoFailure,
    MalformedHeader,
    MalformedInput,
    NonFiniteValue,
)

logger = logging.getLogger(__name__)

FIELD_KINDS = ("coarse", "fine")
HEADER_KEYS = ("kind", "lon0", "lat0", "dlon", "dlat", "ncols", "nrows", "ntime", "months", "mask")
PAYLOAD_DTYPE = np.dtype("<f8")

_MONTH_PATTERN = re.compile(r"^(\d{4})-(\d{2})$")

Month = Tuple[int, int]


def parse_month(text: str) -> Month:
    """Parse 'YYYY-MM' into (year, month)."""
    match = _MONTH_PATTERN.match(text.strip())
    if not match:
        raise MalformedInput(f"Invalid month \"{text}\" - expected YYYY-MM")
    year, month = int(match.group(1)), int(match.group(2))
    if not 1 <= month <= 12:
        raise MalformedInput(f"Invalid month \"{text}\" - month must be 01..12")
    return year, month


def format_month(entry: Month) -> str:
    return f"{entry[0]:04d}-{entry[1]:02d}"


def month_range(start: Month, stop: Month) -> List[Month]:
    """Inclusive list of consecutive months from start to stop."""
    out = []
    year, month = start
    while (year, month) <= stop:
        out.append((year, month))
        month += 1
        if month > 12:
            year, month = year + 1, 1
    return out


def next_month(entry: Month) -> Month:
    year, month = entry
    return (year + 1, 1) if month == 12 else (year, month + 1)


def _fmt_real(value: float) -> str:
    return repr(float(value))


def encode_mask(mask: np.ndarray) -> str:
    """Run-length encode a boolean vector as '<bit>x<count>' runs."""
    runs = []
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return ""
    start = 0
    for idx in range(1, flat.size + 1):
        if idx == flat.size or flat[idx] != flat[start]:
            runs.append(f"{int(flat[start])}x{idx - start}")
            start = idx
    return ",".join(runs)


def decode_mask(text: str) -> np.ndarray:
    bits: List[np.ndarray] = []
    for run in filter(None, text.split(",")):
        try:
            bit, count = run.split("x")
            bit_val, count_val = int(bit), int(count)
        except ValueError as err:
            raise MalformedHeader(f"Bad mask run \"{run}\"") from err
        if bit_val not in (0, 1) or count_val < 1:
            raise MalformedHeader(f"Bad mask run \"{run}\"")
        bits.append(np.full(count_val, bool(bit_val)))
    return np.concatenate(bits) if bits else np.zeros(0, dtype=bool)


@dataclass(frozen=True)
class GridSpec:
    """Regular lon/lat grid with an activity mask.

    `lon0, lat0` is the centre of cell (row 0, col 0); `dlat` may be negative.
    """
    kind: str
    lon0: float
    lat0: float
    dlon: float
    dlat: float
    ncols: int
    nrows: int
    mask: np.ndarray = field(repr=False, compare=False)

    def __post_init__(self):
        if self.dlon <= 0:
            raise MalformedInput(f"dlon must be > 0, got {self.dlon}")
        if self.dlat == 0:
            raise MalformedInput("dlat must be non-zero")
        if self.ncols < 1 or self.nrows < 1:
            raise MalformedInput(f"grid must have at least one cell, got {self.nrows}x{self.ncols}")
        mask = np.asarray(self.mask, dtype=bool).ravel()
        if mask.size != self.ncols * self.nrows:
            raise DimensionMismatch(
                f"mask length {mask.size} != ncols*nrows = {self.ncols * self.nrows}"
            )
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def full(cls, kind: str, lon0: float, lat0: float, dlon: float, dlat: float,
             ncols: int, nrows: int) -> "GridSpec":
        return cls(kind, lon0, lat0, dlon, dlat, ncols, nrows, np.ones(ncols * nrows, dtype=bool))

    @property
    def active_count(self) -> int:
        return int(self.mask.sum())

    @property
    def active_index(self) -> np.ndarray:
        """Flat row-major indices of active cells (payload order)."""
        return np.flatnonzero(self.mask)

    def coordinates(self) -> Tuple[np.ndarray, np.ndarray]:
        """(lon, lat) of active cell centres in payload order."""
        idx = self.active_index
        rows, cols = np.divmod(idx, self.ncols)
        return self.lon0 + cols * self.dlon, self.lat0 + rows * self.dlat

    def same_layout(self, other: "GridSpec") -> bool:
        return (
            (self.lon0, self.lat0, self.dlon, self.dlat, self.ncols, self.nrows)
            == (other.lon0, other.lat0, other.dlon, other.dlat, other.ncols, other.nrows)
            and np.array_equal(self.mask, other.mask)
        )

    def with_kind(self, kind: str) -> "GridSpec":
        return GridSpec(kind, self.lon0, self.lat0, self.dlon, self.dlat, self.ncols, self.nrows, self.mask)

    def header_items(self) -> List[Tuple[str, str]]:
        return [
            ("lon0", _fmt_real(self.lon0)),
            ("lat0", _fmt_real(self.lat0)),
            ("dlon", _fmt_real(self.dlon)),
            ("dlat", _fmt_real(self.dlat)),
            ("ncols", str(self.ncols)),
            ("nrows", str(self.nrows)),
        ]


def validate_season_map(season_map: Mapping[str, Sequence[int]]) -> Dict[int, str]:
    """Check a season map and return its month -> season inverse."""
    month_to_season: Dict[int, str] = {}
    for season, months in season_map.items():
        if len(months) != 3:
            raise MalformedInput(f"Season \"{season}\" must have exactly 3 months, got {list(months)}")
        for month in months:
            if not 1 <= int(month) <= 12:
                raise MalformedInput(f"Season \"{season}\" has invalid month {month}")
            if int(month) in month_to_season:
                raise MalformedInput(f"Month {month} is mapped to more than one season")
            month_to_season[int(month)] = season
    if len(month_to_season) != 12:
        missing = sorted(set(range(1, 13)) - set(month_to_season))
        raise MalformedInput(f"Season map does not cover months {missing}")
    return month_to_season


@dataclass(frozen=True)
class TimeIndex:
    """Strictly increasing (year, month) entries plus a month -> season map."""
    entries: Tuple[Month, ...]
    season_map: Mapping[str, Tuple[int, ...]] = field(
        default_factory=lambda: {k: tuple(v) for k, v in DEFAULT_SEASON_MAP.items()}
    )

    def __post_init__(self):
        entries = tuple((int(y), int(m)) for y, m in self.entries)
        for y, m in entries:
            if not 1 <= m <= 12:
                raise MalformedInput(f"Invalid calendar month {m} in time index")
        for prev, cur in zip(entries, entries[1:]):
            if cur <= prev:
                raise MalformedInput(
                    f"Time index not strictly increasing at {format_month(prev)} -> {format_month(cur)}"
                )
        season_map = {str(k): tuple(int(m) for m in v) for k, v in self.season_map.items()}
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "season_map", season_map)
        object.__setattr__(self, "_month_to_season", validate_season_map(season_map))

    def __len__(self) -> int:
        return len(self.entries)

    def season_of(self, month: int) -> str:
        return self._month_to_season[int(month)]

    def seasons(self) -> List[str]:
        """Season names in canonical order (custom names sorted after)."""
        known = [s for s in SEASON_ORDER if s in self.season_map]
        return known + sorted(s for s in self.season_map if s not in SEASON_ORDER)

    def positions(self, predicate) -> np.ndarray:
        return np.array([i for i, e in enumerate(self.entries) if predicate(e)], dtype=int)

    def season_positions(self, season: str, until: Optional[Month] = None) -> np.ndarray:
        return self.positions(
            lambda e: self.season_of(e[1]) == season and (until is None or e <= until)
        )

    def index_of(self, entry: Month) -> int:
        try:
            return self.entries.index(tuple(entry))
        except ValueError:
            return -1

    def subset(self, positions: Iterable[int]) -> "TimeIndex":
        return TimeIndex(tuple(self.entries[i] for i in positions), self.season_map)

    def until(self, end: Month) -> "TimeIndex":
        return self.subset(i for i, e in enumerate(self.entries) if e <= end)


@dataclass(frozen=True)
class GriddedField:
    """Gridded space-time values [time x active cells]."""
    spec: GridSpec
    time: TimeIndex
    values: np.ndarray = field(repr=False, compare=False)

    expected_kind = None

    def __post_init__(self):
        if self.expected_kind and self.spec.kind != self.expected_kind:
            raise MalformedInput(f"{type(self).__name__} needs a {self.expected_kind} grid, got {self.spec.kind}")
        values = np.array(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values.reshape(1, -1)
        if values.shape != (len(self.time), self.spec.active_count):
            raise DimensionMismatch(
                f"values shape {values.shape} != (|time|={len(self.time)}, active={self.spec.active_count})"
            )
        bad = np.argwhere(~np.isfinite(values))
        if bad.size:
            t, c = bad[0]
            raise NonFiniteValue(
                f"non-finite value at time {format_month(self.time.entries[t])}, active cell {c}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def month_map(self, t: int, fill: float = np.nan) -> np.ndarray:
        """2-D (nrows x ncols) map of time step t, masked cells set to fill."""
        grid = np.full(self.spec.ncols * self.spec.nrows, fill, dtype=np.float64)
        grid[self.spec.active_index] = self.values[t]
        return grid.reshape(self.spec.nrows, self.spec.ncols)

    def select(self, positions: Sequence[int]):
        positions = list(positions)
        return type(self)(self.spec, self.time.subset(positions), self.values[positions])


class CoarseField(GriddedField):
    expected_kind = "coarse"


class FineField(GriddedField):
    expected_kind = "fine"


AnyField = Union[CoarseField, FineField]


# ---------------------------------------------------------------------------
# Container codec
# ---------------------------------------------------------------------------

def write_container(path: Union[str, Path], items: Sequence[Tuple[str, str]], payload: np.ndarray) -> None:
    """Write header items, a blank line and a little-endian float64 payload."""
    lines = []
    for key, value in items:
        if "\n" in value or "=" in key:
            raise MalformedInput(f"Header entry {key!r} is not representable")
        lines.append(f"{key}={value}\n")
    header = "".join(lines) + "\n"
    data = np.ascontiguousarray(payload, dtype=PAYLOAD_DTYPE).tobytes()
    try:
        with open(path, "wb") as f:
            f.write(header.encode("ascii"))
            f.write(data)
    except OSError as err:
        raise IoFailure(f"Failed to write {path}: {err}") from err


def read_container(path: Union[str, Path]) -> Tuple[Dict[str, str], np.ndarray]:
    """Read a container into (ordered header dict, flat float64 payload)."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as err:
        raise IoFailure(f"Failed to read {path}: {err}") from err

    end = raw.find(b"\n\n")
    if end < 0:
        raise MalformedHeader(f"{path}: missing blank line after header")
    header: Dict[str, str] = {}
    for lineno, line in enumerate(raw[:end].decode("ascii", errors="replace").split("\n"), start=1):
        if "=" not in line:
            raise MalformedHeader(f"{path}: header line {lineno} is not key=value: {line!r}")
        key, value = line.split("=", 1)
        if key in header:
            raise MalformedHeader(f"{path}: duplicate header key \"{key}\" at line {lineno}")
        header[key] = value
    body = raw[end + 2:]
    if len(body) % PAYLOAD_DTYPE.itemsize:
        raise DimensionMismatch(
            f"{path}: payload of {len(body)} bytes is not a whole number of float64 values"
        )
    return header, np.frombuffer(body, dtype=PAYLOAD_DTYPE).astype(np.float64)


def _require(header: Mapping[str, str], key: str, path) -> str:
    if key not in header:
        raise MalformedHeader(f"{path}: missing header key \"{key}\"")
    return header[key]


def _int_key(header, key, path) -> int:
    try:
        return int(_require(header, key, path))
    except ValueError as err:
        raise MalformedHeader(f"{path}: header key \"{key}\" is not an integer") from err


def _real_key(header, key, path) -> float:
    try:
        return float(_require(header, key, path))
    except ValueError as err:
        raise MalformedHeader(f"{path}: header key \"{key}\" is not a real number") from err


def grid_from_header(header: Mapping[str, str], kind: str, path) -> GridSpec:
    try:
        return GridSpec(
            kind=kind,
            lon0=_real_key(header, "lon0", path),
            lat0=_real_key(header, "lat0", path),
            dlon=_real_key(header, "dlon", path),
            dlat=_real_key(header, "dlat", path),
            ncols=_int_key(header, "ncols", path),
            nrows=_int_key(header, "nrows", path),
            mask=decode_mask(_require(header, "mask", path)),
        )
    except (MalformedInput, DimensionMismatch) as err:
        raise MalformedHeader(f"{path}: {err}") from err


def encode_season_map(season_map: Mapping[str, Sequence[int]]) -> str:
    return ";".join(f"{name}:{'/'.join(str(m) for m in months)}" for name, months in season_map.items())


def decode_season_map(text: str) -> Dict[str, Tuple[int, ...]]:
    out = {}
    for part in filter(None, text.split(";")):
        try:
            name, months = part.split(":")
            out[name] = tuple(int(m) for m in months.split("/"))
        except ValueError as err:
            raise MalformedHeader(f"Bad season map entry {part!r}") from err
    return out


def read_field(path: Union[str, Path]) -> AnyField:
    """Read a coarse or fine gridded field.

    Raises:
        MalformedHeader: header missing keys or unparsable
        DimensionMismatch: payload length disagrees with the header
        NonFiniteValue: NaN/inf in an active cell
    """
    header, payload = read_container(path)
    kind = _require(header, "kind", path)
    if kind not in FIELD_KINDS:
        raise MalformedHeader(f"{path}: kind \"{kind}\" is not a gridded field")
    spec = grid_from_header(header, kind, path)
    ntime = _int_key(header, "ntime", path)
    months_text = _require(header, "months", path)
    try:
        entries = tuple(parse_month(m) for m in months_text.split(",")) if months_text else ()
    except MalformedInput as err:
        raise MalformedHeader(f"{path}: {err}") from err
    if len(entries) != ntime:
        raise DimensionMismatch(f"{path}: ntime={ntime} but {len(entries)} months listed")
    season_map = decode_season_map(header["seasons"]) if "seasons" in header else DEFAULT_SEASON_MAP
    try:
        time = TimeIndex(entries, season_map)
    except MalformedInput as err:
        raise MalformedHeader(f"{path}: {err}") from err
    expected = ntime * spec.active_count
    if payload.size != expected:
        raise DimensionMismatch(
            f"{path}: payload has {payload.size} values, header implies {ntime} x {spec.active_count} = {expected}"
        )
    cls = CoarseField if kind == "coarse" else FineField
    return cls(spec, time, payload.reshape(ntime, spec.active_count))


def field_header(fld: AnyField) -> List[Tuple[str, str]]:
    items = [("kind", fld.spec.kind)]
    items += fld.spec.header_items()
    items += [
        ("ntime", str(len(fld.time))),
        ("months", ",".join(format_month(e) for e in fld.time.entries)),
        ("mask", encode_mask(fld.spec.mask)),
    ]
    if {k: list(v) for k, v in fld.time.season_map.items()} != DEFAULT_SEASON_MAP:
        items.append(("seasons", encode_season_map(fld.time.season_map)))
    return items


def write_field(fld: AnyField, path: Union[str, Path]) -> None:
    """Write a gridded field as `.gsf`.

    Raises:
        MalformedInput: empty time index
        IoFailure: the file cannot be written
    """
    if len(fld.time) == 0:
        raise MalformedInput("Cannot write a field with an empty time index")
    write_container(path, field_header(fld), fld.values)
    logger.debug(f"Wrote {fld.spec.kind} field {path} ({len(fld.time)} x {fld.spec.active_count})")
