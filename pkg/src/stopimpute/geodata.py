"""Counts of municipal point features (traffic lights, street lights, addresses)
within a buffer of each route's shape."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

from ._geometry import EARTH_RADIUS_M
from .gtfs import GtfsFeed, RouteShape

logger = logging.getLogger(__name__)

CATEGORIES = ("traffic_light", "street_light", "address")
DEFAULT_BUFFER_M = 50.0


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float
    category: str

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown geo category {self.category!r}")


@dataclass(frozen=True)
class RouteGeoStats:
    route_id: str
    addresses_count: float = 0
    street_light_count: float = 0
    traffic_light_count: float = 0
    missing: bool = False

    def as_tuple(self):
        return (self.addresses_count, self.street_light_count, self.traffic_light_count)


def load_geo_csv(path: str) -> List[GeoPoint]:
    df = pd.read_csv(path, dtype={"lat": float, "lon": float, "category": str}, float_precision="round_trip")
    missing = {"lat", "lon", "category"} - set(df.columns)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    ok = df["category"].isin(CATEGORIES) & df["lat"].between(-90, 90) & df["lon"].between(-180, 180)
    if (~ok).any():
        logger.warning("%s: dropped %d rows with bad category or coordinates", path, int((~ok).sum()))
    df = df[ok]
    return [GeoPoint(float(a), float(b), c) for a, b, c in zip(df["lat"], df["lon"], df["category"])]


def write_geo_csv(points: Sequence[GeoPoint], path: str) -> None:
    pd.DataFrame({
        "lat": [repr(p.lat) for p in points],
        "lon": [repr(p.lon) for p in points],
        "category": [p.category for p in points],
    }).to_csv(path, index=False)


def distance_to_polyline_m(lat: np.ndarray, lon: np.ndarray, shape: RouteShape,
                           chunk: int = 4096) -> np.ndarray:
    """Distance in meters from each point to the nearest segment of ``shape``.

    Each segment is projected onto a local equirectangular plane centred on the
    query point, so the projection is linear in (lat, lon) and inserting
    collinear vertices cannot change the result.
    """
    lat = np.atleast_1d(np.asarray(lat, dtype=float))
    lon = np.atleast_1d(np.asarray(lon, dtype=float))
    pts = np.asarray(shape.points, dtype=float)
    a_lat, a_lon = pts[:-1, 0], pts[:-1, 1]
    b_lat, b_lon = pts[1:, 0], pts[1:, 1]
    k = np.radians(1.0) * EARTH_RADIUS_M
    out = np.empty(len(lat))
    for s in range(0, len(lat), chunk):
        plat = lat[s:s + chunk, None]
        plon = lon[s:s + chunk, None]
        cosl = np.cos(np.radians(plat))
        ax = (a_lon - plon) * cosl * k
        ay = (a_lat - plat) * k
        bx = (b_lon - plon) * cosl * k
        by = (b_lat - plat) * k
        dx, dy = bx - ax, by - ay
        seg2 = dx * dx + dy * dy
        with np.errstate(invalid="ignore", divide="ignore"):
            t = np.where(seg2 > 0, -(ax * dx + ay * dy) / seg2, 0.0)
        t = np.clip(t, 0.0, 1.0)
        cx, cy = ax + t * dx, ay + t * dy
        out[s:s + chunk] = np.sqrt(cx * cx + cy * cy).min(axis=1)
    return out


def route_point_counts(shape: RouteShape, points: Sequence[GeoPoint], buffer_m: float = DEFAULT_BUFFER_M,
                       route_id: Optional[str] = None) -> RouteGeoStats:
    """Count points of each category within ``buffer_m`` of the shape."""
    rid = route_id if route_id is not None else shape.shape_id
    if not points:
        return RouteGeoStats(rid, 0, 0, 0)
    lat = np.fromiter((p.lat for p in points), float, len(points))
    lon = np.fromiter((p.lon for p in points), float, len(points))
    cats = np.array([p.category for p in points])
    near = distance_to_polyline_m(lat, lon, shape) <= buffer_m
    c = Counter(cats[near].tolist())
    return RouteGeoStats(rid, c["address"], c["street_light"], c["traffic_light"])


def route_shapes(feed: GtfsFeed) -> Dict[str, RouteShape]:
    """The most used shape of each route (ties broken by shape_id)."""
    usage: Dict[str, Counter] = {}
    for trip in feed.trips.values():
        usage.setdefault(trip.route_id, Counter())[trip.shape_id] += 1
    return {
        rid: feed.shapes[min(c.items(), key=lambda kv: (-kv[1], kv[0]))[0]]
        for rid, c in sorted(usage.items())
    }


def route_geo_stats(feed: GtfsFeed, points: Sequence[GeoPoint], buffer_m: float = DEFAULT_BUFFER_M,
                    normalize_geo_by_length: bool = False) -> Dict[str, RouteGeoStats]:
    """Geospatial predictors for every route in the feed.

    With ``normalize_geo_by_length`` the counts are divided by the shape length
    in kilometers.
    """
    out = {}
    for rid, shape in route_shapes(feed).items():
        st = route_point_counts(shape, points, buffer_m, route_id=rid)
        if normalize_geo_by_length and shape.length_m > 0:
            km = shape.length_m / 1000.0
            st = RouteGeoStats(rid, st.addresses_count / km, st.street_light_count / km,
                               st.traffic_light_count / km)
        out[rid] = st
    return out
