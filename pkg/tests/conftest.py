import os
from datetime import date

import pytest

from stopimpute.afc import AfcRecord, JoinedRecord
from stopimpute.gtfs import GtfsFeed, RouteShape, Stop, StopEvent, TripSchedule
from stopimpute._geometry import offset_point

BASE_LAT, BASE_LON = 31.25, 34.79
DAY = date(2018, 11, 5)  # a Monday


def write_text(directory, name, text):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, name), "w") as fh:
        fh.write(text.strip() + "\n")


def write_minimal_feed(directory, stop_times_extra=""):
    """One route, one trip T1 over three stops on 2018-11-05."""
    write_text(directory, "stops.txt", """
stop_id,stop_name,stop_lat,stop_lon
A,Alpha,31.2500,34.7900
B,Beta,31.2550,34.7900
C,Gamma,31.2600,34.7900
""")
    write_text(directory, "trips.txt", """
route_id,service_id,trip_id,shape_id
R1,WK,T1,SH1
""")
    write_text(directory, "stop_times.txt", """
trip_id,arrival_time,departure_time,stop_id,stop_sequence
T1,08:00:00,08:00:00,A,1
T1,08:05:00,08:05:00,B,2
T1,08:10:00,08:10:00,C,3
""" + stop_times_extra)
    write_text(directory, "shapes.txt", """
shape_id,shape_pt_lat,shape_pt_lon,shape_pt_sequence
SH1,31.2500,34.7900,1
SH1,31.2600,34.7900,2
""")
    write_text(directory, "calendar.txt", """
service_id,monday,tuesday,wednesday,thursday,friday,saturday,sunday,start_date,end_date
WK,1,0,0,0,0,0,0,20181105,20181105
""")
    return directory


def make_trip(arrivals, stop_ids=None, trip_id="T", route_id="R", service_date=DAY, shape_id="SH"):
    stop_ids = stop_ids or [f"S{i + 1}" for i in range(len(arrivals))]
    events = tuple(StopEvent(s, i + 1, int(a)) for i, (s, a) in enumerate(zip(stop_ids, arrivals)))
    return TripSchedule(trip_id, route_id, service_date, shape_id, events)


def straight_shape(length_m, n_points=2, shape_id="SH"):
    pts = [offset_point(BASE_LAT, BASE_LON, length_m * k / (n_points - 1), 0.0) for k in range(n_points)]
    return RouteShape.from_points(shape_id, pts)


def make_feed(trips, shapes):
    stops = {}
    for t in trips:
        for k, s in enumerate(t.stop_ids):
            stops.setdefault(s, Stop(s, s, BASE_LAT + 0.001 * k, BASE_LON))
    return GtfsFeed(stops, {(t.trip_id, t.service_date): t for t in trips}, {s.shape_id: s for s in shapes})


def joined(trip, ts, stop=None, card="c1", A=None, S=None, service_date=None):
    from stopimpute.gtfs import scheduled_position

    d = service_date or trip.service_date
    rec = AfcRecord(card, trip.trip_id, d, int(ts), stop)
    if A is None and stop is not None:
        A = trip.positions[stop][0]
    return JoinedRecord(rec, trip, S if S is not None else scheduled_position(trip, ts), A)


@pytest.fixture
def minimal_feed_dir(tmp_path):
    return write_minimal_feed(str(tmp_path / "gtfs"))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
