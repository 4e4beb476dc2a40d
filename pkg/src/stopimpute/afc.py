"""Smart-card (AFC) boarding records: loading, cleaning and joining to GTFS."""
from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .gtfs import GtfsFeed, TripSchedule, parse_gtfs_time, scheduled_position

logger = logging.getLogger(__name__)

AFC_COLUMNS = ("card_id", "trip_id", "service_date", "boarding_ts", "boarding_stop_id",
               "operator_id", "traveler_type")

# loop routes: earliest occurrence no more than this far before the tap counts
LOOP_LOOKBACK_S = 1800


class AfcFormatError(ValueError):
    pass


@dataclass(slots=True)
class AfcRecord:
    card_id: str
    trip_id: str
    service_date: date
    boarding_ts: int
    boarding_stop_id: Optional[str] = None
    operator_id: str = ""
    traveler_type: Optional[str] = None

    @property
    def stop_missing(self) -> bool:
        return not self.boarding_stop_id


@dataclass(slots=True)
class JoinedRecord:
    afc: AfcRecord
    trip: TripSchedule
    S: int
    A: Optional[int] = None
    loop_ambiguous: bool = False

    @property
    def n_stops(self) -> int:
        return len(self.trip.events)


@dataclass
class DropReport:
    input_count: int = 0
    retained: int = 0
    dropped: Dict[str, int] = field(default_factory=dict)
    loop_ambiguous: int = 0

    @property
    def retained_fraction(self) -> float:
        return self.retained / self.input_count if self.input_count else 0.0

    def to_dict(self) -> dict:
        return {
            "input_count": self.input_count,
            "retained": self.retained,
            "dropped": dict(sorted(self.dropped.items())),
            "retained_fraction": self.retained_fraction,
            "loop_ambiguous": self.loop_ambiguous,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class LoadReport:
    rows: int = 0
    malformed: int = 0


def _parse_ts(value: str) -> int:
    ts = parse_gtfs_time(value)
    if ts < 0:
        raise ValueError("negative boarding_ts")
    return ts


def load_afc(csv_path: str, report: Optional[LoadReport] = None) -> List[AfcRecord]:
    """Read an AFC CSV. Malformed rows are skipped and counted in ``report``."""
    df = pd.read_csv(csv_path, dtype=str, keep_default_na=False)
    df.columns = [c.strip() for c in df.columns]
    missing = [c for c in AFC_COLUMNS if c not in df.columns]
    if missing:
        raise AfcFormatError(f"{csv_path}: missing columns {missing}")
    report = report if report is not None else LoadReport()
    report.rows = len(df)
    date_cache: Dict[str, date] = {}
    out: List[AfcRecord] = []
    for card, trip_id, sdate, ts, stop, op, ttype in zip(*(df[c] for c in AFC_COLUMNS)):
        try:
            d = date_cache.get(sdate)
            if d is None:
                d = date_cache[sdate] = date.fromisoformat(sdate.strip())
            rec = AfcRecord(card, trip_id.strip(), d, _parse_ts(ts), stop.strip() or None, op,
                            ttype or None)
        except ValueError:
            report.malformed += 1
            continue
        out.append(rec)
    if report.malformed:
        logger.warning("%s: skipped %d malformed rows", csv_path, report.malformed)
    return out


def write_afc(records: Sequence[AfcRecord], csv_path: str) -> None:
    pd.DataFrame({
        "card_id": [r.card_id for r in records],
        "trip_id": [r.trip_id for r in records],
        "service_date": [r.service_date.isoformat() for r in records],
        "boarding_ts": [r.boarding_ts for r in records],
        "boarding_stop_id": [r.boarding_stop_id or "" for r in records],
        "operator_id": [r.operator_id for r in records],
        "traveler_type": [r.traveler_type or "" for r in records],
    }).to_csv(csv_path, index=False)


def locate_boarding(trip: TripSchedule, stop_id: str, boarding_ts: int) -> Tuple[Optional[int], bool]:
    """Sequence of ``stop_id`` on ``trip`` and whether the stop occurs more than once.

    On loop trips the earliest occurrence scheduled no earlier than
    ``boarding_ts - LOOP_LOOKBACK_S`` wins, else the first occurrence.
    """
    seqs = trip.positions.get(stop_id)
    if not seqs:
        return None, False
    if len(seqs) == 1:
        return seqs[0], False
    floor = boarding_ts - LOOP_LOOKBACK_S
    for seq in seqs:
        if trip.arrivals[seq - 1] >= floor:
            return seq, True
    return seqs[0], True


def preprocess_and_join(records: Sequence[AfcRecord], feed: GtfsFeed,
                        mode: str = "train") -> Tuple[List[JoinedRecord], DropReport]:
    """Drop unusable records and attach each survivor to its trip schedule.

    ``train`` mode drops records without a boarding stop; ``impute`` mode keeps
    them with ``A`` left as ``None``. Output preserves input order.
    """
    if mode not in ("train", "impute"):
        raise ValueError(f"mode must be 'train' or 'impute', got {mode!r}")
    report = DropReport(input_count=len(records))
    dropped: Dict[str, int] = defaultdict(int)
    out: List[JoinedRecord] = []
    trips = feed.trips
    for rec in records:
        if not rec.trip_id:
            dropped["missing_trip_id"] += 1
            continue
        if mode == "train" and not rec.boarding_stop_id:
            dropped["missing_stop"] += 1
            continue
        trip = trips.get((rec.trip_id, rec.service_date))
        if trip is None:
            dropped["unmatched_trip"] += 1
            continue
        A = None
        loop = False
        if rec.boarding_stop_id:
            A, loop = locate_boarding(trip, rec.boarding_stop_id, rec.boarding_ts)
            if A is None:
                dropped["stop_not_on_trip"] += 1
                continue
        report.loop_ambiguous += loop
        out.append(JoinedRecord(rec, trip, scheduled_position(trip, rec.boarding_ts), A, loop))
    report.dropped = dict(dropped)
    report.retained = len(out)
    return out, report


def missingness_by_operator(records: Sequence[AfcRecord]) -> Dict[str, np.ndarray]:
    """Per operator, the per-trip share of records lacking a boarding stop.

    Trips are trip instances, i.e. ``(trip_id, service_date)``; the arrays are
    ordered by that key.
    """
    counts: Dict[str, Dict[Tuple[str, date], List[int]]] = defaultdict(dict)
    for r in records:
        cell = counts[r.operator_id].setdefault((r.trip_id, r.service_date), [0, 0])
        cell[0] += r.stop_missing
        cell[1] += 1
    return {
        op: np.array([m / n for _, (m, n) in sorted(trips.items())])
        for op, trips in sorted(counts.items())
    }


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    values: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.values.mean()) if len(self.values) else float("nan")

    def density(self) -> np.ndarray:
        width = np.diff(self.edges)
        total = self.counts.sum()
        return self.counts / (total * width) if total else np.zeros_like(width, dtype=float)


def lateness_seconds(joined: Sequence[JoinedRecord]) -> np.ndarray:
    """Boarding time minus scheduled arrival at the actual boarding stop."""
    return np.array([r.afc.boarding_ts - int(r.trip.arrivals[r.A - 1])
                     for r in joined if r.A is not None], dtype=np.int64)


def lateness_density(joined: Sequence[JoinedRecord], feed: Optional[GtfsFeed] = None,
                     bin_s: int = 30) -> Histogram:
    values = lateness_seconds(joined)
    if len(values) == 0:
        return Histogram(np.array([0.0, float(bin_s)]), np.zeros(1, dtype=np.int64), values)
    lo = np.floor(values.min() / bin_s) * bin_s
    hi = (np.floor(values.max() / bin_s) + 1) * bin_s
    edges = np.arange(lo, hi + bin_s / 2, bin_s, dtype=float)
    counts, _ = np.histogram(values, bins=edges)
    return Histogram(edges, counts, values)
