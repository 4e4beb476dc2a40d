"""Synthetic city generator: GTFS feed, municipal points, smart-card boardings
with known true stops, vehicle lateness and missing-stop masking.

Routes are straight-ish lines crossing at a shared hub stop in the city
centre. Vehicles accumulate lateness along the trip (a per-stop drift plus a
random walk) and may carry an extra hour-of-day offset. Commuters repeat the
same two journeys every day; one-time travelers board once and never return.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from datetime import date, timedelta
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ._geometry import offset_point
from .afc import AfcRecord, write_afc
from .geodata import GeoPoint, write_geo_csv
from .gtfs import GtfsFeed, RouteShape, Stop, StopEvent, TripSchedule, write_feed

logger = logging.getLogger(__name__)

HUB_STOP_ID = "HUB"
TRAVELER_TYPES = ("regular", "student", "senior")


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LatenessModel:
    """Vehicle lateness at stop sequence k (1-based) of a trip instance::

        drift_per_stop_s * k + hourly_mean_s[hour of scheduled arrival] + walk_k

    where ``walk_k`` is a Gaussian random walk with per-stop step ``sigma_s``.
    All zeros means vehicles run exactly on schedule.
    """

    drift_per_stop_s: float = 0.0
    sigma_s: float = 0.0
    hourly_mean_s: Tuple[float, ...] = (0.0,) * 24

    @classmethod
    def none(cls) -> "LatenessModel":
        return cls()

    @classmethod
    def drift(cls, mu_per_stop_s: float, sigma_s: float, hourly_mean_s=None) -> "LatenessModel":
        return cls(mu_per_stop_s, sigma_s, tuple(hourly_mean_s) if hourly_mean_s is not None else (0.0,) * 24)

    @classmethod
    def hourly(cls, hourly_mean_s, sigma_s: float = 0.0) -> "LatenessModel":
        return cls(0.0, sigma_s, tuple(float(v) for v in hourly_mean_s))

    def __post_init__(self):
        if len(self.hourly_mean_s) != 24:
            raise SynthConfigError("hourly_mean_s needs 24 values")
        if self.sigma_s < 0:
            raise SynthConfigError("sigma_s must be >= 0")


def peak_profile(morning: float, evening: float = None) -> Tuple[float, ...]:
    """Hourly offsets with a morning (7-8h) and an evening (16-17h) peak."""
    evening = morning if evening is None else evening
    prof = [0.0] * 24
    for h in (7, 8):
        prof[h] = float(morning)
    for h in (16, 17):
        prof[h] = float(evening)
    return tuple(prof)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    num_routes: int = 5
    stops_per_route: int = 15
    headway_s: int = 600
    service_days: int = 28
    start_date: date = date(2018, 11, 4)
    service_start_s: int = 5 * 3600 + 30 * 60
    service_end_s: int = 23 * 3600
    stop_spacing_m: Tuple[float, float] = (300.0, 650.0)
    speed_mps: Tuple[float, float] = (5.0, 8.0)
    dwell_s: int = 20
    lateness: LatenessModel = field(default_factory=LatenessModel)
    num_commuters: int = 500
    trips_per_commuter_per_day: int = 2
    commuter_ride_prob: float = 0.95
    one_time_traveler_fraction: float = 0.2
    hub_weight: float = 4.0
    missing_ratio: float = 0.0
    missing_mechanism: str = "random"
    num_operators: int = 3
    center: Tuple[float, float] = (31.2518, 34.7913)
    num_addresses: int = 1500

    def __post_init__(self):
        if self.stops_per_route < 3:
            raise SynthConfigError("stops_per_route must be >= 3")
        for name in ("one_time_traveler_fraction", "missing_ratio", "commuter_ride_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SynthConfigError(f"{name} must lie in [0, 1]")
        if self.one_time_traveler_fraction >= 1.0:
            raise SynthConfigError("one_time_traveler_fraction must be < 1")
        if self.headway_s <= 0 or self.headway_s > self.service_end_s - self.service_start_s:
            raise SynthConfigError("headway must be positive and fit in the service span")
        if self.missing_mechanism not in ("random", "operator_biased"):
            raise SynthConfigError(f"unknown missingness mechanism {self.missing_mechanism!r}")
        if self.num_routes < 1 or self.service_days < 1:
            raise SynthConfigError("need at least one route and one service day")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        lat = d.pop("lateness", None)
        if isinstance(lat, dict):
            lat = dict(lat)
            kind = lat.pop("kind", None)
            if kind == "none":
                lat = LatenessModel()
            else:
                if "peak_s" in lat:
                    lat["hourly_mean_s"] = peak_profile(lat.pop("peak_s"))
                if "mu_per_stop_s" in lat:
                    lat["drift_per_stop_s"] = lat.pop("mu_per_stop_s")
                if "hourly_mean_s" in lat:
                    lat["hourly_mean_s"] = tuple(float(v) for v in lat["hourly_mean_s"])
                lat = LatenessModel(**lat)
        if "start_date" in d and isinstance(d["start_date"], str):
            d["start_date"] = date.fromisoformat(d["start_date"])
        for k in ("stop_spacing_m", "speed_mps", "center"):
            if k in d:
                d[k] = tuple(d[k])
        cfg = cls(**d)
        return replace(cfg, lateness=lat) if lat is not None else cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["start_date"] = self.start_date.isoformat()
        d["lateness"] = asdict(self.lateness)
        d["lateness"]["hourly_mean_s"] = list(self.lateness.hourly_mean_s)
        return d


@dataclass
class GroundTruth:
    true_stop_id: List[str]
    true_sequence: np.ndarray
    lateness_s: np.ndarray
    one_time: np.ndarray

    def __len__(self):
        return len(self.true_stop_id)


@dataclass
class SynthCity:
    config: SynthConfig
    feed: GtfsFeed
    records: List[AfcRecord]          # after masking
    truth: GroundTruth
    geo_points: List[GeoPoint]
    operators: Dict[str, str]         # route_id -> operator_id

    def unmasked_records(self) -> List[AfcRecord]:
        return [replace(r, boarding_stop_id=s) for r, s in zip(self.records, self.truth.true_stop_id)]


# --------------------------------------------------------------------------- network


def _build_network(cfg: SynthConfig, rng: np.random.Generator):
    lat0, lon0 = cfg.center
    n = cfg.stops_per_route
    hub_pos = n // 2
    stops: Dict[str, Stop] = {HUB_STOP_ID: Stop(HUB_STOP_ID, "Central hub", lat0, lon0)}
    routes = []
    for r in range(cfg.num_routes):
        rid = f"R{r + 1}"
        heading = math.pi * r / cfg.num_routes + rng.uniform(-0.15, 0.15)
        spacing = rng.uniform(*cfg.stop_spacing_m, size=n - 1)
        # signed position of each stop along the line, hub at 0
        along = np.concatenate([[0.0], np.cumsum(spacing)])
        along -= along[hub_pos]
        wobble = rng.normal(0.0, 25.0, size=n)
        wobble[hub_pos] = 0.0
        stop_ids, coords = [], []
        for k in range(n):
            north = along[k] * math.cos(heading) - wobble[k] * math.sin(heading)
            east = along[k] * math.sin(heading) + wobble[k] * math.cos(heading)
            lat, lon = offset_point(lat0, lon0, north, east)
            if k == hub_pos:
                sid, (lat, lon) = HUB_STOP_ID, (lat0, lon0)
            else:
                sid = f"{rid}_S{k + 1:02d}"
                stops[sid] = Stop(sid, f"{rid} stop {k + 1}", float(lat), float(lon))
            stop_ids.append(sid)
            coords.append((float(lat), float(lon)))
        # shape: stop vertices plus 0-3 slightly bent intermediate vertices per gap
        points, stop_vertex = [], []
        for k in range(n):
            stop_vertex.append(len(points))
            points.append(coords[k])
            if k == n - 1:
                break
            m = int(rng.integers(0, 4))
            for j in range(1, m + 1):
                f = j / (m + 1)
                lat = coords[k][0] + f * (coords[k + 1][0] - coords[k][0])
                lon = coords[k][1] + f * (coords[k + 1][1] - coords[k][1])
                lat, lon = offset_point(lat, lon, rng.normal(0, 8.0), rng.normal(0, 8.0))
                points.append((float(lat), float(lon)))
        shape = RouteShape.from_points(f"SH_{rid}", points)
        speed = rng.uniform(*cfg.speed_mps)
        run = np.diff([shape.cum_dist[v] for v in stop_vertex]) / speed + cfg.dwell_s
        offsets = np.concatenate([[0], np.cumsum(np.round(run).astype(np.int64))])
        routes.append({
            "route_id": rid,
            "stop_ids": stop_ids,
            "shape": shape,
            "stop_dist": [shape.cum_dist[v] for v in stop_vertex],
            "offsets": offsets,
            "first_departure": cfg.service_start_s + int(rng.integers(0, cfg.headway_s)),
            "street_light_spacing": float(rng.uniform(40.0, 120.0)),
        })
    return stops, routes


def _timetable(cfg: SynthConfig, route) -> List[Tuple[str, np.ndarray]]:
    out = []
    dep = route["first_departure"]
    j = 0
    while dep <= cfg.service_end_s:
        out.append((f"{route['route_id']}_T{j + 1:03d}", dep + route["offsets"]))
        dep += cfg.headway_s
        j += 1
    return out


def _geo_points(cfg: SynthConfig, routes, rng: np.random.Generator) -> List[GeoPoint]:
    pts: List[GeoPoint] = []
    for route in routes:
        shape = route["shape"]
        # traffic lights next to some stops
        for sid_i, d in enumerate(route["stop_dist"]):
            if rng.random() < 0.35:
                lat, lon = _point_at(shape, d)
                lat, lon = offset_point(lat, lon, rng.normal(0, 10), rng.normal(0, 10))
                pts.append(GeoPoint(float(lat), float(lon), "traffic_light"))
        # street lights at a route-specific spacing, a few meters off the road
        s = 0.0
        while s < shape.length_m:
            lat, lon = _point_at(shape, s)
            lat, lon = offset_point(lat, lon, rng.normal(0, 12), rng.normal(0, 12))
            pts.append(GeoPoint(float(lat), float(lon), "street_light"))
            s += route["street_light_spacing"]
    lat0, lon0 = cfg.center
    extent = cfg.stops_per_route * max(cfg.stop_spacing_m) / 2.0
    for _ in range(cfg.num_addresses):
        lat, lon = offset_point(lat0, lon0, rng.uniform(-extent, extent), rng.uniform(-extent, extent))
        pts.append(GeoPoint(float(lat), float(lon), "address"))
    return pts


def _point_at(shape: RouteShape, dist: float) -> Tuple[float, float]:
    cum = np.asarray(shape.cum_dist)
    i = int(np.clip(np.searchsorted(cum, dist, side="right") - 1, 0, len(cum) - 2))
    seg = cum[i + 1] - cum[i]
    f = 0.0 if seg <= 0 else (dist - cum[i]) / seg
    (a_lat, a_lon), (b_lat, b_lon) = shape.points[i], shape.points[i + 1]
    return a_lat + f * (b_lat - a_lat), a_lon + f * (b_lon - a_lon)


# --------------------------------------------------------------------------- lateness


def realized_arrivals(sched: np.ndarray, model: LatenessModel, rng: np.random.Generator) -> np.ndarray:
    """Realized arrival times for a (trips x stops) matrix of scheduled times.

    Vehicles never arrive at a stop before they left the previous one.
    """
    n_trips, n_stops = sched.shape
    k = np.arange(1, n_stops + 1)
    late = model.drift_per_stop_s * k[None, :] + np.asarray(model.hourly_mean_s)[(sched // 3600) % 24]
    if model.sigma_s > 0:
        late = late + np.cumsum(rng.normal(0.0, model.sigma_s, size=(n_trips, n_stops)), axis=1)
    realized = np.round(sched + late).astype(np.int64)
    realized = np.maximum(realized, 0)
    return np.maximum.accumulate(realized, axis=1)


# --------------------------------------------------------------------------- demand


def _stop_weights(route, hub_weight: float) -> np.ndarray:
    # nobody boards at the terminus
    w = np.array([hub_weight if s == HUB_STOP_ID else 1.0 for s in route["stop_ids"]])
    w[-1] = 0.0
    return w / w.sum()


@dataclass
class _Commuter:
    card_id: str
    traveler_type: str
    legs: List[Tuple[int, int, int]]  # (route index, stop index, desired time)


def _make_commuters(cfg: SynthConfig, routes, rng) -> List[_Commuter]:
    windows = [(6, 9), (15, 19), (11, 14), (19, 21)]
    out = []
    for c in range(cfg.num_commuters):
        legs = []
        for leg in range(cfg.trips_per_commuter_per_day):
            lo, hi = windows[leg % len(windows)]
            r = int(rng.integers(len(routes)))
            k = int(rng.choice(cfg.stops_per_route, p=_stop_weights(routes[r], cfg.hub_weight)))
            hour = int(rng.integers(lo, hi))
            t = hour * 3600 + int(rng.integers(5, 31)) * 60
            legs.append((r, k, t))
        out.append(_Commuter(f"C{c + 1:05d}", TRAVELER_TYPES[int(rng.integers(len(TRAVELER_TYPES)))], legs))
    return out


def _board(column_sorted: Tuple[np.ndarray, np.ndarray], desired: int) -> Optional[int]:
    """Index of the first vehicle reaching the stop at or after ``desired``."""
    times, order = column_sorted
    p = int(np.searchsorted(times, desired, side="left"))
    return None if p == len(times) else int(order[p])


def generate_city(cfg: SynthConfig) -> SynthCity:
    """Build a synthetic city in memory (see :func:`generate` to write files)."""
    rng = np.random.default_rng(cfg.seed)
    stops, routes = _build_network(cfg, rng)
    operators = {rt["route_id"]: f"OP{i % cfg.num_operators + 1}" for i, rt in enumerate(routes)}
    dates = [cfg.start_date + timedelta(days=i) for i in range(cfg.service_days)]

    trips: Dict[Tuple[str, date], TripSchedule] = {}
    tables = []
    for route in routes:
        tt = _timetable(cfg, route)
        templates = []
        for trip_id, arr in tt:
            events = tuple(StopEvent(sid, k + 1, int(a), float(route["stop_dist"][k]))
                           for k, (sid, a) in enumerate(zip(route["stop_ids"], arr)))
            tmpl = TripSchedule(trip_id, route["route_id"], dates[0], route["shape"].shape_id, events)
            templates.append(tmpl)
            for d in dates:
                trips[(trip_id, d)] = tmpl.with_date(d)
        tables.append((templates, np.array([a for _, a in tt], dtype=np.int64)))
    feed = GtfsFeed(stops=stops, trips=trips, shapes={r["shape"].shape_id: r["shape"] for r in routes},
                    route_agency=dict(operators))
    geo = _geo_points(cfg, routes, rng)
    commuters = _make_commuters(cfg, routes, rng)

    rows = []  # (date, ts, trip_id, card, route_idx, stop_idx, lateness, one_time, ttype)
    one_time_counter = 0
    for d in dates:
        realized = [realized_arrivals(sched, cfg.lateness, rng) for _, sched in tables]
        columns: Dict[Tuple[int, int], tuple] = {}

        def column(r, k):
            key = (r, k)
            if key not in columns:
                col = realized[r][:, k]
                order = np.argsort(col, kind="mergesort")
                columns[key] = (col[order], order)
            return columns[key]

        day_rows = []
        for c in commuters:
            for r, k, t in c.legs:
                if rng.random() >= cfg.commuter_ride_prob:
                    continue
                desired = t + int(rng.integers(-300, 301))
                v = _board(column(r, k), desired)
                if v is None:
                    continue
                day_rows.append((r, k, v, c.card_id, c.traveler_type, False))
        n_once = int(round(len(day_rows) * cfg.one_time_traveler_fraction
                           / (1.0 - cfg.one_time_traveler_fraction)))
        span_end = cfg.service_end_s - 3600
        for _ in range(n_once):
            r = int(rng.integers(len(routes)))
            k = int(rng.choice(cfg.stops_per_route, p=_stop_weights(routes[r], cfg.hub_weight)))
            desired = int(rng.integers(cfg.service_start_s, span_end))
            v = _board(column(r, k), desired)
            ttype = TRAVELER_TYPES[int(rng.integers(len(TRAVELER_TYPES)))]
            one_time_counter += 1
            if v is None:
                continue
            day_rows.append((r, k, v, f"O{one_time_counter:07d}", ttype, True))
        for r, k, v, card, ttype, once in day_rows:
            templates, sched = tables[r]
            ts = int(realized[r][v, k])
            rows.append((d, ts, templates[v].trip_id, card, r, k, ts - int(sched[v, k]), once, ttype))

    rows.sort(key=lambda x: (x[0], x[1], x[2], x[3]))
    records = []
    true_stop, true_seq, late, once_flags = [], [], [], []
    for d, ts, trip_id, card, r, k, lat, once, ttype in rows:
        rid = routes[r]["route_id"]
        sid = routes[r]["stop_ids"][k]
        records.append(AfcRecord(card, trip_id, d, ts, sid, operators[rid], ttype))
        true_stop.append(sid)
        true_seq.append(k + 1)
        late.append(lat)
        once_flags.append(once)
    truth = GroundTruth(true_stop, np.array(true_seq, np.int64), np.array(late, np.int64),
                        np.array(once_flags, bool))
    masked = mask(records, cfg.missing_ratio, cfg.missing_mechanism, seed=cfg.seed)
    logger.info("synthetic city seed=%d: %d boardings, %d trip instances", cfg.seed, len(records), len(trips))
    return SynthCity(cfg, feed, masked, truth, geo, operators)


# --------------------------------------------------------------------------- masking


def mask(records: Sequence[AfcRecord], ratio: float, mechanism: str = "random", seed: int = 0,
         concentrations: Sequence[float] = (0.5, 1.5, 4.0)) -> List[AfcRecord]:
    """Erase boarding stops.

    ``random`` erases each stop independently with probability ``ratio``.
    ``operator_biased`` draws a per-trip erase probability from a Beta
    distribution with mean ``ratio``; each operator gets its own concentration
    (cycled from ``concentrations``), so operators differ in spread.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    if mechanism not in ("random", "operator_biased"):
        raise ValueError(f"unknown mechanism {mechanism!r}")
    rng = np.random.default_rng([seed, 7919])
    n = len(records)
    if ratio == 0.0 or n == 0:
        return list(records)
    if ratio == 1.0:
        return [replace(r, boarding_stop_id=None) for r in records]
    if mechanism == "random":
        p = np.full(n, ratio)
    else:
        ops = sorted({r.operator_id for r in records})
        kappa = {op: concentrations[i % len(concentrations)] for i, op in enumerate(ops)}
        trip_p: Dict[tuple, float] = {}
        p = np.empty(n)
        for i, r in enumerate(records):
            key = (r.operator_id, r.trip_id, r.service_date)
            q = trip_p.get(key)
            if q is None:
                kp = kappa[r.operator_id]
                q = trip_p[key] = rng.beta(ratio * kp, (1.0 - ratio) * kp)
            p[i] = q
    erase = rng.random(n) < p
    return [replace(r, boarding_stop_id=None) if e else r for r, e in zip(records, erase)]


# --------------------------------------------------------------------------- files


@dataclass(frozen=True)
class SynthPaths:
    gtfs_dir: str
    afc_csv: str
    geo_csv: str
    truth_csv: str


def write_city(city: SynthCity, out_dir: str) -> SynthPaths:
    os.makedirs(out_dir, exist_ok=True)
    paths = SynthPaths(os.path.join(out_dir, "gtfs"), os.path.join(out_dir, "afc.csv"),
                       os.path.join(out_dir, "geo.csv"), os.path.join(out_dir, "ground_truth.csv"))
    write_feed(city.feed, paths.gtfs_dir)
    write_afc(city.records, paths.afc_csv)
    write_geo_csv(city.geo_points, paths.geo_csv)
    with open(paths.truth_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_index", "true_stop_id", "true_sequence", "lateness_s", "one_time"])
        for i, (s, q, l, o) in enumerate(zip(city.truth.true_stop_id, city.truth.true_sequence,
                                             city.truth.lateness_s, city.truth.one_time)):
            w.writerow([i, s, int(q), int(l), int(o)])
    return paths


def read_truth(path: str) -> GroundTruth:
    import pandas as pd

    df = pd.read_csv(path, dtype={"true_stop_id": str})
    df = df.sort_values("record_index")
    one = df["one_time"].to_numpy(bool) if "one_time" in df.columns else np.zeros(len(df), bool)
    return GroundTruth(df["true_stop_id"].tolist(), df["true_sequence"].to_numpy(np.int64),
                       df["lateness_s"].to_numpy(np.int64), one)


def generate(cfg: SynthConfig, out_dir: str) -> SynthPaths:
    """Generate a city and write its GTFS directory, AFC, geo and truth CSVs."""
    return write_city(generate_city(cfg), out_dir)
