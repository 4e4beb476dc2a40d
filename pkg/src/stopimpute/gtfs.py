"""GTFS feed parsing and schedule queries.

The parser reads the five mandatory text files (stops, trips, stop_times,
shapes, calendar), expands each trip over the dates its service runs, and
drops rows that break referential integrity or ordering. Every drop is
counted in a :class:`ParseReport`.

Times past 24:00:00 are kept as seconds beyond 86400 on the same service day.
"""
from __future__ import annotations

import json
import logging
import os
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ._geometry import cumulative_length_m

logger = logging.getLogger(__name__)

MANDATORY_FILES = ("stops.txt", "trips.txt", "stop_times.txt", "shapes.txt", "calendar.txt")
WEEKDAY_COLUMNS = ("monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday")


class GtfsError(ValueError):
    """Raised when a feed cannot be parsed at all."""


@dataclass(frozen=True)
class Stop:
    stop_id: str
    name: str
    lat: float
    lon: float


@dataclass(frozen=True)
class StopEvent:
    stop_id: str
    sequence: int
    scheduled_arrival: int
    shape_dist: Optional[float] = None


@dataclass(frozen=True)
class RouteShape:
    shape_id: str
    points: Tuple[Tuple[float, float], ...]
    cum_dist: Tuple[float, ...]

    def __post_init__(self):
        if len(self.points) < 2:
            raise ValueError(f"shape {self.shape_id!r} needs at least 2 points")

    @classmethod
    def from_points(cls, shape_id: str, points: Sequence[Tuple[float, float]]) -> "RouteShape":
        pts = tuple((float(a), float(b)) for a, b in points)
        lats = [p[0] for p in pts]
        lons = [p[1] for p in pts]
        return cls(shape_id, pts, tuple(float(d) for d in cumulative_length_m(lats, lons)))

    @property
    def length_m(self) -> float:
        return self.cum_dist[-1]


@dataclass(frozen=True, eq=False)
class TripSchedule:
    """Ordered scheduled stop events of one vehicle trip on one service date."""

    trip_id: str
    route_id: str
    service_date: date
    shape_id: str
    events: Tuple[StopEvent, ...]
    arrivals: np.ndarray = field(init=False, repr=False, compare=False)
    stop_ids: Tuple[str, ...] = field(init=False, repr=False, compare=False)
    positions: Dict[str, Tuple[int, ...]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.events) < 1:
            raise ValueError(f"trip {self.trip_id!r} has no events")
        arr = np.fromiter((e.scheduled_arrival for e in self.events), dtype=np.int64,
                          count=len(self.events))
        arr.setflags(write=False)
        object.__setattr__(self, "arrivals", arr)
        object.__setattr__(self, "stop_ids", tuple(e.stop_id for e in self.events))
        positions: Dict[str, list] = {}
        for e in self.events:
            positions.setdefault(e.stop_id, []).append(e.sequence)
        object.__setattr__(self, "positions", {k: tuple(v) for k, v in positions.items()})

    def __eq__(self, other):
        if not isinstance(other, TripSchedule):
            return NotImplemented
        return (self.trip_id, self.route_id, self.service_date, self.shape_id, self.events) == (
            other.trip_id, other.route_id, other.service_date, other.shape_id, other.events)

    def __hash__(self):
        return hash((self.trip_id, self.service_date))

    def __len__(self):
        return len(self.events)

    def with_date(self, service_date: date) -> "TripSchedule":
        # shares the derived arrays instead of recomputing them
        clone = object.__new__(TripSchedule)
        for name in ("trip_id", "route_id", "shape_id", "events", "arrivals", "stop_ids", "positions"):
            object.__setattr__(clone, name, getattr(self, name))
        object.__setattr__(clone, "service_date", service_date)
        return clone


@dataclass
class ParseReport:
    """Counts of dropped rows per file per reason."""

    dropped: Dict[str, Dict[str, int]] = field(default_factory=lambda: defaultdict(dict))

    def drop(self, filename: str, reason: str, n: int = 1) -> None:
        if n:
            bucket = self.dropped.setdefault(filename, {})
            bucket[reason] = bucket.get(reason, 0) + int(n)

    def count(self, filename: str, reason: Optional[str] = None) -> int:
        bucket = self.dropped.get(filename, {})
        if reason is None:
            return sum(bucket.values())
        return bucket.get(reason, 0)

    def to_dict(self) -> dict:
        return {f: dict(sorted(r.items())) for f, r in sorted(self.dropped.items()) if r}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass(frozen=True)
class FeedFilter:
    """Optional restriction of a feed to some operators and/or a bounding box.

    ``bbox`` is ``(min_lat, min_lon, max_lat, max_lon)``; a trip is kept only if
    every one of its stops falls inside it. ``agency_ids`` needs routes.txt.
    """

    agency_ids: Optional[frozenset] = None
    bbox: Optional[Tuple[float, float, float, float]] = None


@dataclass
class GtfsFeed:
    stops: Dict[str, Stop]
    trips: Dict[Tuple[str, date], TripSchedule]
    shapes: Dict[str, RouteShape]
    route_agency: Dict[str, str] = field(default_factory=dict)
    report: ParseReport = field(default_factory=ParseReport, compare=False)

    def trip(self, trip_id: str, service_date: date) -> Optional[TripSchedule]:
        return self.trips.get((trip_id, service_date))

    def shape_for(self, trip: TripSchedule) -> RouteShape:
        return self.shapes[trip.shape_id]

    def service_dates(self) -> List[date]:
        return sorted({d for _, d in self.trips})


# --------------------------------------------------------------------------- times


def parse_gtfs_time(value) -> int:
    """'HH:MM:SS' (hours may exceed 23) or an integer string -> seconds."""
    s = str(value).strip()
    if ":" not in s:
        return int(float(s))
    parts = s.split(":")
    if len(parts) != 3:
        raise ValueError(f"bad time {value!r}")
    h, m, sec = (int(p) for p in parts)
    if not (0 <= m < 60 and 0 <= sec < 60 and h >= 0):
        raise ValueError(f"bad time {value!r}")
    return h * 3600 + m * 60 + sec


def format_gtfs_time(seconds: int) -> str:
    seconds = int(seconds)
    return f"{seconds // 3600:02d}:{(seconds % 3600) // 60:02d}:{seconds % 60:02d}"


def _parse_date(value: str) -> date:
    s = str(value).strip()
    return date(int(s[0:4]), int(s[4:6]), int(s[6:8]))


# --------------------------------------------------------------------------- queries


def scheduled_position(trip: TripSchedule, t: float) -> int:
    """Sequence of the last stop whose scheduled arrival is at or before ``t``.

    Clamped to 1 before the first arrival and to the last sequence after the
    final one.
    """
    idx = int(np.searchsorted(trip.arrivals, t, side="right"))
    return max(idx, 1)


def scheduled_positions(arrivals: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Vectorized :func:`scheduled_position` for many timestamps on one trip."""
    return np.maximum(np.searchsorted(arrivals, t, side="right"), 1)


@dataclass(frozen=True)
class TripStats:
    number_of_points: int
    total_length_m: float
    total_time_s: int
    degenerate: bool = False


def trip_stats(trip: TripSchedule, shape: RouteShape) -> TripStats:
    total_time = int(trip.arrivals[-1] - trip.arrivals[0])
    return TripStats(
        number_of_points=len(shape.points),
        total_length_m=float(shape.cum_dist[-1]),
        total_time_s=total_time,
        degenerate=len(trip.events) < 2,
    )


# --------------------------------------------------------------------------- parsing


def _read(directory: str, name: str, required: bool = True) -> Optional[pd.DataFrame]:
    path = os.path.join(directory, name)
    if not os.path.exists(path):
        if required:
            raise GtfsError(f"missing mandatory GTFS file: {name}")
        return None
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8-sig")
    df.columns = [c.strip() for c in df.columns]
    return df


def _need_columns(df: pd.DataFrame, name: str, cols: Iterable[str]) -> None:
    missing = [c for c in cols if c not in df.columns]
    if missing:
        raise GtfsError(f"{name} lacks columns {missing}")


def _active_dates(calendar: pd.DataFrame, calendar_dates: Optional[pd.DataFrame],
                  report: ParseReport) -> Dict[str, List[date]]:
    services: Dict[str, set] = {}
    for row in calendar.itertuples(index=False):
        try:
            start = _parse_date(row.start_date)
            end = _parse_date(row.end_date)
            flags = [str(getattr(row, c)).strip() == "1" for c in WEEKDAY_COLUMNS]
        except (ValueError, AttributeError):
            report.drop("calendar.txt", "unparseable")
            continue
        days = set()
        d = start
        while d <= end:
            if flags[d.weekday()]:
                days.add(d)
            d += timedelta(days=1)
        services.setdefault(row.service_id, set()).update(days)
    if calendar_dates is not None and len(calendar_dates):
        for row in calendar_dates.itertuples(index=False):
            try:
                d = _parse_date(row.date)
                kind = int(row.exception_type)
            except (ValueError, AttributeError):
                report.drop("calendar_dates.txt", "unparseable")
                continue
            days = services.setdefault(row.service_id, set())
            if kind == 1:
                days.add(d)
            elif kind == 2:
                days.discard(d)
    return {sid: sorted(days) for sid, days in services.items()}


def _parse_stops(df: pd.DataFrame, report: ParseReport) -> Dict[str, Stop]:
    _need_columns(df, "stops.txt", ("stop_id", "stop_lat", "stop_lon"))
    names = df["stop_name"] if "stop_name" in df.columns else pd.Series([""] * len(df))
    stops: Dict[str, Stop] = {}
    for sid, name, lat_s, lon_s in zip(df["stop_id"], names, df["stop_lat"], df["stop_lon"]):
        try:
            lat, lon = float(lat_s), float(lon_s)
        except ValueError:
            report.drop("stops.txt", "unparseable")
            continue
        if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
            report.drop("stops.txt", "coordinates_out_of_range")
            continue
        if not sid:
            report.drop("stops.txt", "missing_stop_id")
            continue
        if sid in stops:
            report.drop("stops.txt", "duplicate_stop_id")
            continue
        stops[sid] = Stop(sid, name, lat, lon)
    return stops


def _to_float(v) -> float:
    try:
        return float(v)
    except ValueError:
        return float("nan")


def _parse_shapes(df: pd.DataFrame, report: ParseReport) -> Dict[str, RouteShape]:
    _need_columns(df, "shapes.txt", ("shape_id", "shape_pt_lat", "shape_pt_lon", "shape_pt_sequence"))
    # python float() round-trips repr() exactly; pandas' fast parser may not
    lat = pd.Series([_to_float(v) for v in df["shape_pt_lat"]], dtype=float)
    lon = pd.Series([_to_float(v) for v in df["shape_pt_lon"]], dtype=float)
    seq = pd.to_numeric(df["shape_pt_sequence"], errors="coerce")
    bad = lat.isna() | lon.isna() | seq.isna()
    report.drop("shapes.txt", "unparseable", int(bad.sum()))
    ok = pd.DataFrame({"shape_id": df["shape_id"], "lat": lat, "lon": lon, "seq": seq})[~bad]
    out_of_range = ~(ok["lat"].between(-90, 90) & ok["lon"].between(-180, 180))
    report.drop("shapes.txt", "coordinates_out_of_range", int(out_of_range.sum()))
    ok = ok[~out_of_range].sort_values(["shape_id", "seq"], kind="mergesort")
    shapes: Dict[str, RouteShape] = {}
    for shape_id, grp in ok.groupby("shape_id", sort=True):
        pts = list(zip(grp["lat"].tolist(), grp["lon"].tolist()))
        if len(pts) < 2:
            report.drop("shapes.txt", "too_few_points", len(pts))
            continue
        shapes[shape_id] = RouteShape.from_points(shape_id, pts)
    return shapes


def _passes_filter(stop_ids: Sequence[str], route_id: str, stops: Mapping[str, Stop],
                   route_agency: Mapping[str, str], flt: Optional[FeedFilter]) -> bool:
    if flt is None:
        return True
    if flt.agency_ids is not None and route_agency.get(route_id) not in flt.agency_ids:
        return False
    if flt.bbox is not None:
        lo_lat, lo_lon, hi_lat, hi_lon = flt.bbox
        for sid in stop_ids:
            s = stops[sid]
            if not (lo_lat <= s.lat <= hi_lat and lo_lon <= s.lon <= hi_lon):
                return False
    return True


def parse_feed(directory: str, feed_filter: Optional[FeedFilter] = None) -> GtfsFeed:
    """Parse a GTFS directory into a fully resolved :class:`GtfsFeed`.

    Raises:
        GtfsError: a mandatory file or column is missing.
    """
    report = ParseReport()
    frames = {name: _read(directory, name) for name in MANDATORY_FILES}
    calendar_dates = _read(directory, "calendar_dates.txt", required=False)
    routes = _read(directory, "routes.txt", required=False)

    stops = _parse_stops(frames["stops.txt"], report)
    shapes = _parse_shapes(frames["shapes.txt"], report)
    _need_columns(frames["calendar.txt"], "calendar.txt",
                  ("service_id", "start_date", "end_date") + WEEKDAY_COLUMNS)
    service_days = _active_dates(frames["calendar.txt"], calendar_dates, report)

    route_agency: Dict[str, str] = {}
    if routes is not None and "route_id" in routes.columns:
        agency = routes["agency_id"] if "agency_id" in routes.columns else [""] * len(routes)
        route_agency = dict(zip(routes["route_id"], agency))

    trips_df = frames["trips.txt"]
    _need_columns(trips_df, "trips.txt", ("route_id", "service_id", "trip_id", "shape_id"))
    templates: Dict[str, Tuple[str, str, str]] = {}
    for trip_id, route_id, service_id, shape_id in zip(
            trips_df["trip_id"], trips_df["route_id"], trips_df["service_id"], trips_df["shape_id"]):
        if not trip_id:
            report.drop("trips.txt", "missing_trip_id")
        elif trip_id in templates:
            report.drop("trips.txt", "duplicate_trip_id")
        elif shape_id not in shapes:
            report.drop("trips.txt", "unknown_shape")
        elif service_id not in service_days:
            report.drop("trips.txt", "unknown_service")
        else:
            templates[trip_id] = (route_id, service_id, shape_id)

    st = frames["stop_times.txt"]
    _need_columns(st, "stop_times.txt", ("trip_id", "arrival_time", "stop_id", "stop_sequence"))
    has_dist = "shape_dist_traveled" in st.columns
    rows_by_trip: Dict[str, list] = defaultdict(list)
    dists = st["shape_dist_traveled"] if has_dist else [""] * len(st)
    deps = st["departure_time"] if "departure_time" in st.columns else [""] * len(st)
    for trip_id, arr_s, dep_s, stop_id, seq_s, dist_s in zip(
            st["trip_id"], st["arrival_time"], deps, st["stop_id"], st["stop_sequence"], dists):
        if trip_id not in templates:
            report.drop("stop_times.txt", "unknown_trip")
            continue
        if stop_id not in stops:
            report.drop("stop_times.txt", "unknown_stop")
            continue
        try:
            seq = int(seq_s)
            arrival = parse_gtfs_time(arr_s if arr_s.strip() else dep_s)
            dist = float(dist_s) if dist_s.strip() else None
        except ValueError:
            report.drop("stop_times.txt", "unparseable")
            continue
        rows_by_trip[trip_id].append((seq, arrival, stop_id, dist))

    trips: Dict[Tuple[str, date], TripSchedule] = {}
    for trip_id in sorted(templates):
        route_id, service_id, shape_id = templates[trip_id]
        rows = sorted(rows_by_trip.get(trip_id, ()), key=lambda r: r[0])
        kept = []
        last_seq = None
        for seq, arrival, stop_id, dist in rows:
            if seq == last_seq:
                report.drop("stop_times.txt", "duplicate_sequence")
                continue
            if kept and arrival < kept[-1][1]:
                report.drop("stop_times.txt", "non_monotone_time")
                continue
            kept.append((seq, arrival, stop_id, dist))
            last_seq = seq
        if len(kept) < 2:
            report.drop("stop_times.txt", "trip_too_short", len(kept))
            report.drop("trips.txt", "too_few_events")
            continue
        events = tuple(StopEvent(sid, i + 1, arr, dist) for i, (_, arr, sid, dist) in enumerate(kept))
        if not _passes_filter([e.stop_id for e in events], route_id, stops, route_agency, feed_filter):
            report.drop("trips.txt", "filtered_out")
            continue
        template = TripSchedule(trip_id, route_id, date.min, shape_id, events)
        for d in service_days[service_id]:
            trips[(trip_id, d)] = template.with_date(d)

    logger.info("parsed feed %s: %d stops, %d trip instances, %d shapes",
                directory, len(stops), len(trips), len(shapes))
    return GtfsFeed(stops=stops, trips=trips, shapes=shapes, route_agency=route_agency, report=report)


# --------------------------------------------------------------------------- writing


def write_feed(feed: GtfsFeed, directory: str, agency_names: Optional[Mapping[str, str]] = None) -> None:
    """Write a feed as GTFS text files.

    Trips that share a template (same trip_id and events) on several dates are
    written once with a per-template service_id covering exactly those dates.
    """
    os.makedirs(directory, exist_ok=True)
    stops = sorted(feed.stops.values(), key=lambda s: s.stop_id)
    pd.DataFrame({
        "stop_id": [s.stop_id for s in stops],
        "stop_name": [s.name for s in stops],
        "stop_lat": [repr(s.lat) for s in stops],
        "stop_lon": [repr(s.lon) for s in stops],
    }).to_csv(os.path.join(directory, "stops.txt"), index=False)

    shape_rows = []
    for shape_id in sorted(feed.shapes):
        for i, (lat, lon) in enumerate(feed.shapes[shape_id].points, start=1):
            shape_rows.append((shape_id, repr(lat), repr(lon), i))
    pd.DataFrame(shape_rows, columns=["shape_id", "shape_pt_lat", "shape_pt_lon", "shape_pt_sequence"]) \
        .to_csv(os.path.join(directory, "shapes.txt"), index=False)

    by_trip: Dict[str, List[TripSchedule]] = defaultdict(list)
    for (trip_id, _), trip in sorted(feed.trips.items()):
        by_trip[trip_id].append(trip)

    # service patterns: one service_id per distinct date set
    patterns: Dict[Tuple[date, ...], str] = {}
    trip_rows, st_rows = [], []
    for trip_id in sorted(by_trip):
        instances = by_trip[trip_id]
        dates = tuple(sorted(t.service_date for t in instances))
        sid = patterns.setdefault(dates, f"svc{len(patterns) + 1}")
        t0 = instances[0]
        trip_rows.append((t0.route_id, sid, trip_id, t0.shape_id))
        for e in t0.events:
            ts = format_gtfs_time(e.scheduled_arrival)
            st_rows.append((trip_id, ts, ts, e.stop_id, e.sequence,
                            "" if e.shape_dist is None else repr(e.shape_dist)))
    pd.DataFrame(trip_rows, columns=["route_id", "service_id", "trip_id", "shape_id"]) \
        .to_csv(os.path.join(directory, "trips.txt"), index=False)
    pd.DataFrame(st_rows, columns=["trip_id", "arrival_time", "departure_time", "stop_id",
                                   "stop_sequence", "shape_dist_traveled"]) \
        .to_csv(os.path.join(directory, "stop_times.txt"), index=False)

    cal_rows, cd_rows = [], []
    for dates, sid in patterns.items():
        start, end = dates[0], dates[-1]
        cal_rows.append((sid, 0, 0, 0, 0, 0, 0, 0, start.strftime("%Y%m%d"), end.strftime("%Y%m%d")))
        for d in dates:
            cd_rows.append((sid, d.strftime("%Y%m%d"), 1))
    pd.DataFrame(cal_rows, columns=["service_id", *WEEKDAY_COLUMNS, "start_date", "end_date"]) \
        .to_csv(os.path.join(directory, "calendar.txt"), index=False)
    pd.DataFrame(cd_rows, columns=["service_id", "date", "exception_type"]) \
        .to_csv(os.path.join(directory, "calendar_dates.txt"), index=False)

    route_ids = sorted({t.route_id for t in feed.trips.values()})
    agencies = sorted({feed.route_agency.get(r, "") for r in route_ids})
    pd.DataFrame({
        "route_id": route_ids,
        "agency_id": [feed.route_agency.get(r, "") for r in route_ids],
        "route_short_name": route_ids,
        "route_type": [3] * len(route_ids),
    }).to_csv(os.path.join(directory, "routes.txt"), index=False)
    names = agency_names or {}
    pd.DataFrame({
        "agency_id": agencies,
        "agency_name": [names.get(a, a) for a in agencies],
        "agency_url": ["http://example.invalid"] * len(agencies),
        "agency_timezone": ["Asia/Jerusalem"] * len(agencies),
    }).to_csv(os.path.join(directory, "agency.txt"), index=False)
