"""The 15 predictors and the ordinal delta label for each joined boarding."""
from __future__ import annotations

from dataclasses import astuple, dataclass, fields
from datetime import date
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .afc import JoinedRecord
from .geodata import RouteGeoStats
from .gtfs import GtfsFeed, TripSchedule

FEATURE_NAMES = (
    "addresses_average",
    "street_light_average",
    "traffic_lights_average",
    "number_of_points",
    "average_distance_per_stop",
    "average_time_per_stop",
    "average_points_to_stops",
    "time_diff_of_trip",
    "time_from_boarding_to_last_stop",
    "time_from_departure_to_boarding",
    "predicted_sequence",
    "hourly_expected_lateness",
    "boardingtime_seconds_from_midnight",
    "boardingtime_weekday",
    "is_weekend",
)
LABEL_COLUMN = "delta"
DELTA_CLIP = 15
DEFAULT_WEEKEND = (4, 5)  # Friday, Saturday


@dataclass(frozen=True)
class FeatureVector:
    addresses_average: float
    street_light_average: float
    traffic_lights_average: float
    number_of_points: float
    average_distance_per_stop: float
    average_time_per_stop: float
    average_points_to_stops: float
    time_diff_of_trip: float
    time_from_boarding_to_last_stop: float
    time_from_departure_to_boarding: float
    predicted_sequence: float
    hourly_expected_lateness: float
    boardingtime_seconds_from_midnight: float
    boardingtime_weekday: float
    is_weekend: float

    def to_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)


assert tuple(f.name for f in fields(FeatureVector)) == FEATURE_NAMES


def compute_label(A: int, S: int, clip: int = DELTA_CLIP) -> int:
    """Ordinal class ``A - S`` clipped to ``[-clip, clip]``."""
    return int(max(-clip, min(clip, A - S)))


def hour_of(ts) -> np.ndarray:
    return (np.asarray(ts) // 3600) % 24


@dataclass(frozen=True)
class LatenessTable:
    """Mean lateness per hour of day, learned on training boardings."""

    hourly: Tuple[float, ...]
    global_mean: float
    observed: Tuple[bool, ...]

    def __getitem__(self, hour: int) -> float:
        return self.hourly[int(hour) % 24]

    def lookup(self, ts) -> np.ndarray:
        return np.asarray(self.hourly)[hour_of(ts)]

    def to_dict(self) -> dict:
        return {"hourly": list(self.hourly), "global_mean": self.global_mean,
                "observed": list(self.observed)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "LatenessTable":
        return cls(tuple(float(v) for v in d["hourly"]), float(d["global_mean"]),
                   tuple(bool(v) for v in d["observed"]))


def build_lateness_table(train_records: Sequence[JoinedRecord]) -> LatenessTable:
    ts = np.array([r.afc.boarding_ts for r in train_records if r.A is not None], dtype=np.int64)
    sched = np.array([r.trip.arrivals[r.A - 1] for r in train_records if r.A is not None], dtype=np.int64)
    if len(ts) == 0:
        raise ValueError("cannot build a lateness table from an empty training set")
    late = (ts - sched).astype(float)
    hours = hour_of(ts)
    sums = np.bincount(hours, weights=late, minlength=24)
    counts = np.bincount(hours, minlength=24)
    global_mean = float(late.mean())
    hourly = np.full(24, global_mean)
    seen = counts > 0
    hourly[seen] = sums[seen] / counts[seen]
    return LatenessTable(tuple(float(v) for v in hourly), global_mean, tuple(bool(v) for v in seen))


def _trip_constants(trip: TripSchedule, feed: GtfsFeed, geo: Optional[RouteGeoStats]):
    shape = feed.shapes[trip.shape_id]
    n_points = len(shape.points)
    total_len = float(shape.cum_dist[-1])
    total_time = float(trip.arrivals[-1] - trip.arrivals[0])
    g = geo.as_tuple() if geo is not None else (0.0, 0.0, 0.0)
    return (
        float(g[0]), float(g[1]), float(g[2]),
        float(n_points),
        total_len / n_points,
        total_time / n_points,
        n_points / len(trip.events),
        total_time,
        float(trip.arrivals[0]),
        float(trip.arrivals[-1]),
    )


def extract_features(record: JoinedRecord, feed: GtfsFeed, geo: Optional[RouteGeoStats],
                     lateness: LatenessTable, weekend_days: Sequence[int] = DEFAULT_WEEKEND) -> FeatureVector:
    """Feature vector of a single joined boarding (reference path)."""
    c = _trip_constants(record.trip, feed, geo)
    ts = record.afc.boarding_ts
    weekday = record.afc.service_date.weekday()
    return FeatureVector(
        addresses_average=c[0],
        street_light_average=c[1],
        traffic_lights_average=c[2],
        number_of_points=c[3],
        average_distance_per_stop=c[4],
        average_time_per_stop=c[5],
        average_points_to_stops=c[6],
        time_diff_of_trip=c[7],
        time_from_boarding_to_last_stop=c[9] - ts,
        time_from_departure_to_boarding=ts - c[8],
        predicted_sequence=float(record.S),
        hourly_expected_lateness=float(lateness[hour_of(ts)]),
        boardingtime_seconds_from_midnight=float(ts),
        boardingtime_weekday=float(weekday),
        is_weekend=float(weekday in weekend_days),
    )


def feature_matrix(records: Sequence[JoinedRecord], feed: GtfsFeed,
                   geo_stats: Optional[Mapping[str, RouteGeoStats]], lateness: LatenessTable,
                   weekend_days: Sequence[int] = DEFAULT_WEEKEND) -> np.ndarray:
    """Vectorized :func:`extract_features` over many records, rows in input order."""
    geo_stats = geo_stats or {}
    cache: Dict[int, int] = {}
    consts: List[tuple] = []
    idx = np.empty(len(records), dtype=np.int64)
    ts = np.empty(len(records), dtype=np.int64)
    S = np.empty(len(records), dtype=np.int64)
    wd = np.empty(len(records), dtype=np.int64)
    wd_cache: Dict[date, int] = {}
    for i, r in enumerate(records):
        key = id(r.trip.events)
        j = cache.get(key)
        if j is None:
            j = cache[key] = len(consts)
            consts.append(_trip_constants(r.trip, feed, geo_stats.get(r.trip.route_id)))
        idx[i] = j
        ts[i] = r.afc.boarding_ts
        S[i] = r.S
        d = r.afc.service_date
        w = wd_cache.get(d)
        if w is None:
            w = wd_cache[d] = d.weekday()
        wd[i] = w
    C = np.asarray(consts, dtype=float).reshape(-1, 10)[idx]
    X = np.empty((len(records), len(FEATURE_NAMES)), dtype=float)
    X[:, :8] = C[:, :8]
    X[:, 8] = C[:, 9] - ts
    X[:, 9] = ts - C[:, 8]
    X[:, 10] = S
    X[:, 11] = lateness.lookup(ts)
    X[:, 12] = ts
    X[:, 13] = wd
    X[:, 14] = np.isin(wd, list(weekend_days))
    return X


def labels(records: Sequence[JoinedRecord], clip: int = DELTA_CLIP) -> Tuple[np.ndarray, int]:
    """Clipped delta labels and the number of rows that were clipped."""
    raw = np.array([r.A - r.S for r in records], dtype=np.int64)
    return np.clip(raw, -clip, clip), int((np.abs(raw) > clip).sum())


class FeatureExtractor(TransformerMixin, BaseEstimator):
    """Turns joined records into the feature matrix.

    ``fit`` learns the hourly lateness table from training records; ``transform``
    needs nothing else, so a fitted extractor can featurize unseen cities.
    """

    def __init__(self, feed: Optional[GtfsFeed] = None, geo_stats=None,
                 weekend_days: Sequence[int] = DEFAULT_WEEKEND):
        self.feed = feed
        self.geo_stats = geo_stats
        self.weekend_days = weekend_days

    def fit(self, records, y=None):
        self.lateness_table_ = build_lateness_table(records)
        self.n_features_in_ = len(FEATURE_NAMES)
        return self

    def transform(self, records) -> np.ndarray:
        check_is_fitted(self, "lateness_table_")
        if self.feed is None:
            raise ValueError("FeatureExtractor needs a feed to transform records")
        return feature_matrix(records, self.feed, self.geo_stats, self.lateness_table_, self.weekend_days)

    def get_feature_names_out(self, input_features=None):
        return np.asarray(FEATURE_NAMES, dtype=object)


def _record_date(r) -> date:
    return r.afc.service_date if hasattr(r, "afc") else r.service_date


def split_by_date(records: Sequence, train_days: int = 21) -> Tuple[list, list]:
    """First ``train_days`` distinct service dates go to train, the rest to test."""
    dates = sorted({_record_date(r) for r in records})
    if train_days < 0 or len(dates) < train_days + 1:
        raise ValueError(f"need at least {train_days + 1} distinct dates, got {len(dates)}")
    cutoff = set(dates[:train_days])
    train = [r for r in records if _record_date(r) in cutoff]
    test = [r for r in records if _record_date(r) not in cutoff]
    return train, test


def write_feature_csv(path: str, X: np.ndarray, y: Optional[np.ndarray] = None) -> None:
    df = pd.DataFrame(X, columns=list(FEATURE_NAMES))
    if y is not None:
        df[LABEL_COLUMN] = np.asarray(y, dtype=np.int64)
    df.to_csv(path, index=False, float_format="%.17g")


def read_feature_csv(path: str) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    df = pd.read_csv(path, float_precision="round_trip")
    missing = [c for c in FEATURE_NAMES if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: missing feature columns {missing}")
    X = df[list(FEATURE_NAMES)].to_numpy(dtype=float)
    y = df[LABEL_COLUMN].to_numpy(dtype=np.int64) if LABEL_COLUMN in df.columns else None
    return X, y
