import os
import shutil
from datetime import date

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import DAY, make_trip, straight_shape, write_minimal_feed, write_text
from stopimpute.gtfs import (FeedFilter, GtfsError, format_gtfs_time, parse_feed, parse_gtfs_time,
                             scheduled_position, scheduled_positions, trip_stats, write_feed)
from stopimpute.synth import SynthConfig, generate_city


def test_minimal_feed_one_trip_three_events(minimal_feed_dir):
    feed = parse_feed(minimal_feed_dir)
    assert list(feed.trips) == [("T1", DAY)]
    trip = feed.trips[("T1", DAY)]
    assert [e.stop_id for e in trip.events] == ["A", "B", "C"]
    assert [e.sequence for e in trip.events] == [1, 2, 3]
    assert trip.arrivals.tolist() == [28800, 29100, 29400]
    assert feed.report.to_dict() == {}


def test_unknown_stop_row_dropped(tmp_path):
    d = write_minimal_feed(str(tmp_path / "g"), "T1,08:15:00,08:15:00,ZZZ,4")
    feed = parse_feed(d)
    assert feed.report.count("stop_times.txt", "unknown_stop") == 1
    assert feed.report.count("stop_times.txt") == 1
    assert len(feed.trips[("T1", DAY)].events) == 3


def test_missing_mandatory_file_is_fatal(minimal_feed_dir):
    os.remove(os.path.join(minimal_feed_dir, "shapes.txt"))
    with pytest.raises(GtfsError):
        parse_feed(minimal_feed_dir)


def test_unparseable_and_nonmonotone_rows(tmp_path):
    d = write_minimal_feed(str(tmp_path / "g"), "T1,xx:yy,,C,4\nT1,07:00:00,,A,5")
    feed = parse_feed(d)
    assert feed.report.count("stop_times.txt", "unparseable") == 1
    assert feed.report.count("stop_times.txt", "non_monotone_time") == 1


def test_sequences_renumbered_gap_free(tmp_path):
    d = str(tmp_path / "g")
    write_minimal_feed(d)
    write_text(d, "stop_times.txt", """
trip_id,arrival_time,departure_time,stop_id,stop_sequence
T1,08:00:00,,A,10
T1,08:05:00,,B,20
T1,25:10:00,,C,35
""")
    trip = parse_feed(d).trips[("T1", DAY)]
    assert [e.sequence for e in trip.events] == [1, 2, 3]
    # past-midnight times stay on the same service day
    assert trip.arrivals[-1] == 25 * 3600 + 600


def test_calendar_dates_exceptions(tmp_path):
    d = write_minimal_feed(str(tmp_path / "g"))
    write_text(d, "calendar_dates.txt", """
service_id,date,exception_type
WK,20181106,1
WK,20181105,2
""")
    assert parse_feed(d).service_dates() == [date(2018, 11, 6)]


def test_feed_filter_bbox(minimal_feed_dir):
    feed = parse_feed(minimal_feed_dir, FeedFilter(bbox=(31.0, 34.0, 31.255, 35.0)))
    assert feed.trips == {}
    assert feed.report.count("trips.txt", "filtered_out") == 1


def test_synthetic_feed_round_trips(tmp_path):
    city = generate_city(SynthConfig(seed=4, num_routes=3, stops_per_route=6, service_days=3,
                                     num_commuters=20))
    write_feed(city.feed, str(tmp_path / "g"))
    again = parse_feed(str(tmp_path / "g"))
    assert again.stops == city.feed.stops
    assert again.shapes == city.feed.shapes
    assert again.trips == city.feed.trips


def test_scheduled_position_examples():
    trip = make_trip([100, 200, 300])
    assert scheduled_position(trip, 250) == 2
    assert scheduled_position(trip, 50) == 1
    assert scheduled_position(trip, 10_000) == 3
    # vehicle scheduled at the second stop while the passenger boards at the third
    assert scheduled_position(trip, 200) == 2


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 5000), min_size=1, max_size=30),
       st.lists(st.integers(-100, 6000), min_size=1, max_size=20))
def test_scheduled_position_properties(raw, ts):
    arrivals = sorted(raw)
    trip = make_trip(arrivals)
    ts = sorted(ts)
    got = [scheduled_position(trip, t) for t in ts]
    assert all(a <= b for a, b in zip(got, got[1:]))  # monotone in t
    assert got == scheduled_positions(trip.arrivals, np.array(ts)).tolist()
    for t, s in zip(ts, got):
        # brute force: last arrival <= t, clamped to 1
        expect = max([k + 1 for k, a in enumerate(arrivals) if a <= t], default=1)
        assert s == expect
    distinct = [k + 1 for k in range(len(arrivals)) if k + 1 == len(arrivals) or arrivals[k] < arrivals[k + 1]]
    for k in distinct:
        assert scheduled_position(trip, arrivals[k - 1]) == k


def test_trip_stats_straight_shape():
    trip = make_trip([0, 600])
    s = trip_stats(trip, straight_shape(1000.0))
    assert s.number_of_points == 2
    assert s.total_length_m == pytest.approx(1000.0, abs=1e-6)
    assert s.total_time_s == 600
    assert trip_stats(trip, straight_shape(1000.0)) == s


def test_time_format_round_trip():
    for secs in (0, 59, 3600, 86399, 90061):
        assert parse_gtfs_time(format_gtfs_time(secs)) == secs
    with pytest.raises(ValueError):
        parse_gtfs_time("12:61:00")
