import filecmp
import os
from collections import defaultdict

import numpy as np
import pytest

from stopimpute.afc import lateness_seconds, load_afc, preprocess_and_join
from stopimpute.baselines import schedule_based_predict
from stopimpute.synth import (LatenessModel, SynthConfig, SynthConfigError, generate, generate_city, mask,
                              peak_profile, read_truth)

SMALL = dict(num_routes=3, stops_per_route=8, service_days=3, num_commuters=150)


def test_same_seed_gives_identical_files(tmp_path):
    cfg = SynthConfig(seed=5, missing_ratio=0.2, lateness=LatenessModel.drift(15, 30), **SMALL)
    a = generate(cfg, str(tmp_path / "a"))
    b = generate(cfg, str(tmp_path / "b"))
    for x, y in ((a.afc_csv, b.afc_csv), (a.geo_csv, b.geo_csv), (a.truth_csv, b.truth_csv)):
        assert filecmp.cmp(x, y, shallow=False)
    for name in sorted(os.listdir(a.gtfs_dir)):
        assert filecmp.cmp(os.path.join(a.gtfs_dir, name), os.path.join(b.gtfs_dir, name), shallow=False)
    c = generate(SynthConfig(seed=6, **SMALL), str(tmp_path / "c"))
    assert not filecmp.cmp(a.afc_csv, c.afc_csv, shallow=False)


def test_files_are_consistent(tmp_path):
    city = generate_city(SynthConfig(seed=1, missing_ratio=0.3, **SMALL))
    paths = generate(city.config, str(tmp_path))
    recs = load_afc(paths.afc_csv)
    assert len(recs) == len(city.records)
    truth = read_truth(paths.truth_csv)
    assert truth.true_stop_id == city.truth.true_stop_id
    assert np.array_equal(truth.one_time, city.truth.one_time)
    for r, s, q in zip(city.records, truth.true_stop_id, truth.true_sequence):
        trip = city.feed.trips[(r.trip_id, r.service_date)]
        assert trip.stop_ids[q - 1] == s
        assert r.boarding_stop_id in (None, s)


def test_zero_lateness_boards_on_schedule():
    city = generate_city(SynthConfig(seed=2, **SMALL))
    joined, _ = preprocess_and_join(city.records, city.feed)
    assert len(joined) == len(city.records)
    assert np.all(lateness_seconds(joined) == 0)
    assert all(schedule_based_predict(r) == r.A for r in joined)


def test_deterministic_drift():
    city = generate_city(SynthConfig(seed=3, lateness=LatenessModel.drift(10, 0), **SMALL))
    assert np.array_equal(city.truth.lateness_s, 10 * city.truth.true_sequence)


def test_hourly_peak_mean():
    cfg = SynthConfig(seed=4, num_routes=4, stops_per_route=10, service_days=7, num_commuters=4500,
                      lateness=LatenessModel.hourly(peak_profile(300.0), sigma_s=30.0))
    city = generate_city(cfg)
    joined, _ = preprocess_and_join(city.records, city.feed)
    late = lateness_seconds(joined)
    hour = np.array([r.afc.boarding_ts // 3600 for r in joined])
    at8 = late[hour == 8]
    assert len(at8) >= 10_000
    assert abs(at8.mean() - 300.0) <= 10.0
    assert abs(late[hour == 12].mean()) < 30.0


def test_one_time_share_and_card_prefixes():
    city = generate_city(SynthConfig(seed=7, **SMALL))
    share = city.truth.one_time.mean()
    assert abs(share - 0.2) < 0.02
    assert all(r.card_id.startswith("O") == bool(o) for r, o in zip(city.records, city.truth.one_time))


def _per_trip_rates(records):
    by = defaultdict(list)
    for r in records:
        by[(r.trip_id, r.service_date)].append(r.boarding_stop_id is None)
    return np.array([np.mean(v) for v in by.values() if len(v) >= 5])


def test_mask_mechanisms():
    city = generate_city(SynthConfig(seed=8, **SMALL))
    recs = city.records
    assert mask(recs, 0.0) == recs
    assert all(r.boarding_stop_id is None for r in mask(recs, 1.0))
    rnd = mask(recs, 0.3, "random", seed=1)
    biased = mask(recs, 0.3, "operator_biased", seed=1)
    for m in (rnd, biased):
        assert abs(np.mean([r.boarding_stop_id is None for r in m]) - 0.3) < 0.05
    assert _per_trip_rates(biased).var() > 2 * _per_trip_rates(rnd).var()
    assert mask(recs, 0.3, "operator_biased", seed=1) == biased
    with pytest.raises(ValueError):
        mask(recs, 1.5)


def test_config_validation_and_round_trip():
    with pytest.raises(SynthConfigError):
        SynthConfig(stops_per_route=2)
    with pytest.raises(SynthConfigError):
        SynthConfig(headway_s=10 ** 6)
    with pytest.raises(SynthConfigError):
        SynthConfig(missing_ratio=1.2)
    cfg = SynthConfig(seed=3, lateness=LatenessModel.drift(15, 30, peak_profile(120)))
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg
    d = {"seed": 1, "lateness": {"kind": "drift", "mu_per_stop_s": 15, "sigma_s": 30, "peak_s": 120}}
    assert SynthConfig.from_dict(d).lateness == cfg.lateness
