"""Small spherical-geometry helpers shared by the GTFS and geodata modules."""
import numpy as np

EARTH_RADIUS_M = 6371000.0


def haversine_m(lat1, lon1, lat2, lon2):
    """Great-circle distance in meters. Accepts scalars or broadcastable arrays."""
    phi1 = np.radians(lat1)
    phi2 = np.radians(lat2)
    dphi = phi2 - phi1
    dlam = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dphi / 2.0) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def cumulative_length_m(lats, lons):
    """Cumulative polyline length per vertex, starting at 0."""
    lats = np.asarray(lats, dtype=float)
    lons = np.asarray(lons, dtype=float)
    out = np.zeros(len(lats))
    if len(lats) > 1:
        out[1:] = np.cumsum(haversine_m(lats[:-1], lons[:-1], lats[1:], lons[1:]))
    return out


def offset_point(lat, lon, north_m, east_m):
    """Move a point by a small local (north, east) offset in meters."""
    dlat = np.degrees(north_m / EARTH_RADIUS_M)
    dlon = np.degrees(east_m / (EARTH_RADIUS_M * np.cos(np.radians(lat))))
    return lat + dlat, lon + dlon
