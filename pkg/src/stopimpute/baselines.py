"""Comparison imputers: schedule position, passenger history, temporally close
co-boarders and frequency-weighted random guessing.

History and temporal closeness fall back to an ML imputation when their
condition does not hold; ``fallback`` is either that stop id or a callable
taking the record.
"""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .afc import JoinedRecord

HISTORY = "history"
CLOSE = "close"
FALLBACK = "fallback"
DEFAULT_CLOSENESS_S = 30

Fallback = Union[str, None, Callable[[JoinedRecord], str]]


def _resolve(fallback: Fallback, record: JoinedRecord) -> Optional[str]:
    return fallback(record) if callable(fallback) else fallback


def time_bucket(ts: int) -> int:
    return int(ts // 3600) % 24


def schedule_based_predict(record: JoinedRecord) -> int:
    """The scheduled vehicle position, i.e. a zero delta."""
    return record.S


# --------------------------------------------------------------------------- history


@dataclass(frozen=True)
class HistoryIndex:
    """(card, route, hour) -> most frequent boarding stop in the training data."""

    best: Dict[Tuple[str, str, int], str]

    def __contains__(self, key) -> bool:
        return key in self.best

    def __len__(self) -> int:
        return len(self.best)


def history_key(record: JoinedRecord) -> Tuple[str, str, int]:
    return (record.afc.card_id, record.trip.route_id, time_bucket(record.afc.boarding_ts))


def build_history_index(train_records: Sequence[JoinedRecord]) -> HistoryIndex:
    """Most frequent stop per key; ties go to the stop used most recently."""
    counts: Dict[tuple, Counter] = defaultdict(Counter)
    last_seen: Dict[tuple, Dict[str, tuple]] = defaultdict(dict)
    for r in train_records:
        stop = r.afc.boarding_stop_id
        if not stop:
            continue
        key = history_key(r)
        counts[key][stop] += 1
        when = (r.afc.service_date, r.afc.boarding_ts)
        prev = last_seen[key].get(stop)
        if prev is None or when > prev:
            last_seen[key][stop] = when
    best = {}
    for key, c in counts.items():
        seen = last_seen[key]
        best[key] = max(c, key=lambda s: (c[s], seen[s], s))
    return HistoryIndex(best)


def history_predict(record: JoinedRecord, index: HistoryIndex, fallback: Fallback) -> Tuple[str, str]:
    stop = index.best.get(history_key(record))
    if stop is not None:
        return stop, HISTORY
    return _resolve(fallback, record), FALLBACK


# --------------------------------------------------------------------------- temporal closeness


def temporal_closeness_predict(record: JoinedRecord, same_trip_records: Sequence[JoinedRecord],
                               fallback: Fallback,
                               threshold_s: float = DEFAULT_CLOSENESS_S) -> Tuple[str, str]:
    """Stop of the nearest-in-time co-boarder on the same trip instance.

    Only co-boarders strictly closer than ``threshold_s`` count; equal gaps go to
    the earlier boarding. ``record`` itself is ignored if present.
    """
    t = record.afc.boarding_ts
    best = None
    for j in same_trip_records:
        if j is record or not j.afc.boarding_stop_id:
            continue
        gap = abs(j.afc.boarding_ts - t)
        if gap < threshold_s:
            key = (gap, j.afc.boarding_ts)
            if best is None or key < best[0]:
                best = (key, j.afc.boarding_stop_id)
    if best is not None:
        return best[1], CLOSE
    return _resolve(fallback, record), FALLBACK


def trip_instance_key(record: JoinedRecord) -> Tuple[str, object]:
    return (record.trip.trip_id, record.afc.service_date)


def temporal_closeness_batch(records: Sequence[JoinedRecord], known_stops: Sequence[Optional[str]],
                             fallbacks: Sequence[Optional[str]],
                             threshold_s: float = DEFAULT_CLOSENESS_S) -> Tuple[List[str], List[str]]:
    """:func:`temporal_closeness_predict` for every record at once.

    ``known_stops[i]`` is the stop usable as a co-boarder answer for record i
    (``None`` if unknown); a record never answers for itself.
    """
    groups: Dict[tuple, List[int]] = defaultdict(list)
    for i, r in enumerate(records):
        if known_stops[i]:
            groups[trip_instance_key(r)].append(i)
    sorted_groups = {}
    for key, idx in groups.items():
        ts = np.array([records[i].afc.boarding_ts for i in idx], dtype=np.int64)
        order = np.argsort(ts, kind="mergesort")
        sorted_groups[key] = (ts[order], [idx[o] for o in order])
    out_stop: List[str] = []
    out_flag: List[str] = []
    for i, r in enumerate(records):
        g = sorted_groups.get(trip_instance_key(r))
        found = None
        if g is not None:
            ts, idx = g
            t = r.afc.boarding_ts
            lo = int(np.searchsorted(ts, t - threshold_s, side="right"))
            hi = int(np.searchsorted(ts, t + threshold_s, side="left"))
            best = None
            for p in range(lo, hi):
                j = idx[p]
                if j == i:
                    continue
                key = (abs(int(ts[p]) - t), int(ts[p]))
                if best is None or key < best[0]:
                    best = (key, j)
            if best is not None:
                found = known_stops[best[1]]
        if found is not None:
            out_stop.append(found)
            out_flag.append(CLOSE)
        else:
            out_stop.append(fallbacks[i])
            out_flag.append(FALLBACK)
    return out_stop, out_flag


# --------------------------------------------------------------------------- semi-random


@dataclass(frozen=True, eq=False)
class FrequencyTable:
    stops: Tuple[str, ...]
    probs: np.ndarray

    def __post_init__(self):
        lookup = {s: i for i, s in enumerate(self.stops)}
        object.__setattr__(self, "_index", lookup)

    def mass(self, stop_id: str) -> float:
        i = self._index.get(stop_id)
        return float(self.probs[i]) if i is not None else 0.0

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(self.stops, self.probs.tolist()))


def build_frequency_table(train_records: Sequence[JoinedRecord]) -> FrequencyTable:
    c = Counter(r.afc.boarding_stop_id for r in train_records if r.afc.boarding_stop_id)
    if not c:
        raise ValueError("no boardings with a known stop")
    stops = tuple(sorted(c))
    counts = np.array([c[s] for s in stops], dtype=float)
    return FrequencyTable(stops, counts / counts.sum())


def _unique_in_order(items):
    seen = set()
    return [x for x in items if not (x in seen or seen.add(x))]


def semi_random_candidates(record: JoinedRecord, freq: FrequencyTable,
                           restrict_to_trip: bool = True) -> Tuple[List[str], np.ndarray]:
    """Candidate stops and their sampling weights (normalized)."""
    if not restrict_to_trip:
        return list(freq.stops), freq.probs
    stops = _unique_in_order(record.trip.stop_ids)
    w = np.array([freq.mass(s) for s in stops])
    if w.sum() <= 0:
        w = np.ones(len(stops))
    return stops, w / w.sum()


def semi_random_predict(record: JoinedRecord, freq: FrequencyTable, seed: int, record_index: int,
                        restrict_to_trip: bool = True) -> str:
    """Draw a stop from the boarding frequencies, by inverse CDF on one uniform.

    The uniform comes from a generator seeded with ``(seed, record_index)`` so
    each record's draw is reproducible on its own.
    """
    stops, w = semi_random_candidates(record, freq, restrict_to_trip)
    u = np.random.default_rng([seed, record_index]).random()
    j = int(np.searchsorted(np.cumsum(w), u, side="right"))
    return stops[min(j, len(stops) - 1)]


def expected_semi_random_accuracy(records: Sequence[JoinedRecord], freq: FrequencyTable,
                                  restrict_to_trip: bool = True) -> Tuple[float, float]:
    """Closed-form mean accuracy of semi-random guessing and its standard error."""
    q = np.empty(len(records))
    for i, r in enumerate(records):
        stops, w = semi_random_candidates(r, freq, restrict_to_trip)
        q[i] = dict(zip(stops, w)).get(r.afc.boarding_stop_id, 0.0)
    return float(q.mean()), float(np.sqrt(np.sum(q * (1 - q))) / len(q))
