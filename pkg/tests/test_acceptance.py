"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
import filecmp
import os
import time
from collections import Counter
from datetime import timedelta

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, DAY, joined, make_trip
from stopimpute import report as rp
from stopimpute.afc import load_afc, preprocess_and_join
from stopimpute.baselines import (FrequencyTable, build_frequency_table, build_history_index,
                                  history_predict, semi_random_predict, temporal_closeness_batch)
from stopimpute.cli import main as cli_main
from stopimpute.features import FeatureExtractor, feature_matrix, labels, split_by_date
from stopimpute.geodata import load_geo_csv, route_geo_stats
from stopimpute.gtfs import parse_feed
from stopimpute.learn import Dataset, GradientBoostedClassifier, TrainConfig, fine_tune, train
from stopimpute.learn.logreg import softmax_loss_grad
from stopimpute.metrics import accuracy, evaluate, pareto_accuracy, pareto_curve, rmse
from stopimpute.synth import LatenessModel, SynthConfig, generate_city, peak_profile, write_city


def record(n, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


DRIFT = LatenessModel.drift(15.0, 30.0, peak_profile(120.0))


def drift_config(seed=1, commuters=1500):
    # commuters ride both legs every day, so single-boarding card-days are exactly the one-time travelers
    return SynthConfig(seed=seed, num_routes=5, stops_per_route=15, service_days=28, num_commuters=commuters,
                       commuter_ride_prob=1.0, lateness=DRIFT)


@pytest.fixture(scope="module")
def drift_pipeline(tmp_path_factory):
    """Criterion 4 run: files on disk, parsed back, split 21/7, GBT trained, both predictors evaluated."""
    out = str(tmp_path_factory.mktemp("drift"))
    t0 = time.perf_counter()
    city = generate_city(drift_config())
    paths = write_city(city, out)
    feed = parse_feed(paths.gtfs_dir)
    records = load_afc(paths.afc_csv)
    prep = rp.prepare(feed, records, load_geo_csv(paths.geo_csv), rp.PipelineConfig())
    model = train(Dataset(prep.X_train, prep.y_train), TrainConfig(), prep.extractor.lateness_table_)
    sched, _ = rp.evaluate_model(rp.SCHEDULE, prep.test)
    ml, ml_frame = rp.evaluate_model(model, prep.test, prep.X_test)
    elapsed = time.perf_counter() - t0
    return dict(city=city, prep=prep, model=model, sched=sched, ml=ml, ml_frame=ml_frame,
                elapsed=elapsed, n=len(records))


# --------------------------------------------------------------------------- 1


def test_criterion_1_pareto_worked_example():
    t0 = time.perf_counter()
    actual = [-2, 0, 3, 20, -3, 4, 3, 2]
    a = [-2, 0, 4, 3, -2, 3, 2, 2]
    b = [3, 0, 3, 7, 1, 1, 3, 2]
    vals = (accuracy(actual, a), accuracy(actual, b), pareto_accuracy(actual, a, 1),
            pareto_accuracy(actual, b, 1), rmse(actual, a), rmse(actual, b))
    dt = time.perf_counter() - t0
    ok = (vals[0] == 0.375 and vals[1] == 0.5 and vals[2] == 0.875 and vals[3] == 0.5
          and abs(vals[4] - 6.05) <= 0.01 and abs(vals[5] - 5.23) <= 0.01 and dt < 1.0)
    record(1, ok, f"acc A/B {vals[0]}/{vals[1]}, PA1 A/B {vals[2]}/{vals[3]}, "
                  f"RMSE A/B {vals[4]:.3f}/{vals[5]:.3f}, {dt * 1000:.1f} ms")


# --------------------------------------------------------------------------- 2


def test_criterion_2_metric_identities():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    failures = []
    for i in range(1000):
        n = int(rng.integers(1, 200))
        a = rng.integers(-15, 16, n)
        p = np.where(rng.random(n) < rng.random(), a, rng.integers(-15, 16, n))
        rep = evaluate(a, p, max_l=8)
        curve = [v for _, v in pareto_curve(a, p, 8)]
        perm = rng.permutation(n)
        other = evaluate(a[perm], p[perm], max_l=8)
        checks = (rep.pareto[0] == rep.accuracy,
                  all(x <= y for x, y in zip(curve, curve[1:])),
                  rep.recall == rep.accuracy,
                  other.to_dict() == rep.to_dict() or _same_with_nan(other.to_dict(), rep.to_dict()))
        if not all(checks):
            failures.append((i, checks))
    dt = time.perf_counter() - t0
    record(2, not failures and dt < 10.0, f"1000 label sets, {len(failures)} violations, {dt:.2f} s")


def _same_with_nan(x, y):
    if x.keys() != y.keys():
        return False
    for k in x:
        u, v = x[k], y[k]
        if isinstance(u, float) and isinstance(v, float) and np.isnan(u) and np.isnan(v):
            continue
        if u != v:
            return False
    return True


# --------------------------------------------------------------------------- 3


def test_criterion_3_zero_lateness_city():
    t0 = time.perf_counter()
    city = generate_city(SynthConfig(seed=3, num_routes=5, stops_per_route=15, service_days=7,
                                     num_commuters=1200))
    recs, _ = preprocess_and_join(city.records, city.feed)
    D, _ = labels(recs)
    S = np.array([r.S for r in recs])
    A = np.array([r.A for r in recs])
    pa0 = pareto_accuracy(A, S, 0)
    dt = time.perf_counter() - t0
    ok = pa0 == 1.0 and np.all(D == 0) and 18_000 <= len(recs) <= 22_000 and dt < 30.0
    record(3, ok, f"{len(recs)} boardings, schedule PA0 {pa0}, nonzero D {int(np.sum(D != 0))}, {dt:.1f} s")


# --------------------------------------------------------------------------- 4


def test_criterion_4_gbt_beats_schedule(drift_pipeline):
    r = drift_pipeline
    gain = r["ml"].pareto[1] - r["sched"].pareto[1]
    ok = gain >= 0.10 and r["elapsed"] < 120.0 and 95_000 <= r["n"] <= 105_000
    record(4, ok, f"{r['n']} boardings, GBT PA1 {r['ml'].pareto[1]:.4f} vs schedule "
                  f"{r['sched'].pareto[1]:.4f} (gain {gain:.4f}), {r['elapsed']:.1f} s end to end")


# --------------------------------------------------------------------------- 5


def test_criterion_5_learner_numerics():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        n, d, k = int(rng.integers(5, 40)), int(rng.integers(1, 8)), int(rng.integers(2, 6))
        X = np.hstack([rng.normal(size=(n, d)), np.ones((n, 1))])
        Y = np.eye(k)[rng.integers(0, k, n)]
        W = rng.normal(size=(d + 1, k))
        l2 = float(rng.uniform(0.0, 3.0))
        _, g = softmax_loss_grad(W, X, Y, l2)
        num = np.zeros_like(W)
        eps = 1e-6
        for idx in np.ndindex(W.shape):
            Wp, Wm = W.copy(), W.copy()
            Wp[idx] += eps
            Wm[idx] -= eps
            num[idx] = (softmax_loss_grad(Wp, X, Y, l2)[0] - softmax_loss_grad(Wm, X, Y, l2)[0]) / (2 * eps)
        worst = max(worst, np.linalg.norm(g - num) / max(np.linalg.norm(num), 1e-12))

    X = rng.normal(size=(200, 15))
    y = np.digitize(X[:, 0] + 0.3 * X[:, 1] ** 2, [-0.7, 0.0, 0.7])
    curve = np.array(GradientBoostedClassifier(n_rounds=100).fit(X, y).loss_curve_)
    max_rise = float(np.max(np.diff(curve)))

    y2 = rng.integers(-3, 4, 1000)
    m0 = GradientBoostedClassifier(n_rounds=1, max_depth=0, learning_rate=1.0).fit(rng.normal(size=(1000, 15)), y2)
    priors = np.bincount(y2 + 3) / len(y2)
    prior_err = float(np.max(np.abs(m0.predict_proba(rng.normal(size=(20, 15))) - priors)))
    ok = worst < 1e-5 and max_rise <= 1e-12 and len(curve) == 100 and prior_err < 1e-6
    record(5, ok, f"worst FD rel err {worst:.2e}, max loss rise {max_rise:.2e}, prior err {prior_err:.2e}")


# --------------------------------------------------------------------------- 6


def _instance(seed, n=1000, span_s=86400, n_trips=4, n_days=3):
    rng = np.random.default_rng(seed)
    trips = [make_trip(list(range(0, 1200, 100)), [f"S{(k * 3 + j) % 15}" for j in range(12)],
                       trip_id=f"T{k}", route_id=f"R{k % 2}") for k in range(n_trips)]
    recs = []
    for _ in range(n):
        t = trips[int(rng.integers(n_trips))]
        d = DAY + timedelta(days=int(rng.integers(n_days)))
        stop = t.stop_ids[int(rng.integers(12))]
        recs.append(joined(t.with_date(d), int(rng.integers(0, span_s)), stop, card=f"c{int(rng.integers(150))}"))
    return recs


def _history_bf(train, r):
    hits = [t for t in train if (t.afc.card_id, t.trip.route_id, t.afc.boarding_ts // 3600 % 24)
            == (r.afc.card_id, r.trip.route_id, r.afc.boarding_ts // 3600 % 24)]
    if not hits:
        return "FB"
    c = Counter(t.afc.boarding_stop_id for t in hits)
    return max(c, key=lambda s: (c[s], max((t.afc.service_date, t.afc.boarding_ts) for t in hits
                                            if t.afc.boarding_stop_id == s), s))


def _close_bf(recs, i, thr=30):
    r, best = recs[i], None
    for j, o in enumerate(recs):
        if j != i and (o.trip.trip_id, o.afc.service_date) == (r.trip.trip_id, r.afc.service_date):
            gap = abs(o.afc.boarding_ts - r.afc.boarding_ts)
            if gap < thr and (best is None or (gap, o.afc.boarding_ts, j) < best[0]):
                best = ((gap, o.afc.boarding_ts, j), o.afc.boarding_stop_id)
    return "FB" if best is None else best[1]


def _semi_bf(r, probs, seed, i):
    stops = list(dict.fromkeys(r.trip.stop_ids))
    w = np.array([probs.get(s, 0.0) for s in stops])
    w = w if w.sum() > 0 else np.ones(len(stops))
    u = np.random.default_rng([seed, i]).random()
    cdf = np.cumsum(w / w.sum())
    return stops[min(int(np.sum(cdf <= u)), len(stops) - 1)]


def test_criterion_6_baseline_oracles():
    recs = _instance(61)
    train_r, test_r = recs[:500], recs[500:]
    index = build_history_index(train_r)
    mism1 = sum(history_predict(r, index, "FB")[0] != _history_bf(train_r, r) for r in test_r)

    dense = _instance(62, span_s=1500, n_trips=2, n_days=1)
    got, _ = temporal_closeness_batch(dense, [r.afc.boarding_stop_id for r in dense], ["FB"] * len(dense))
    mism2 = sum(g != _close_bf(dense, i) for i, g in enumerate(got))

    freq = build_frequency_table(train_r)
    probs = freq.as_dict()
    mism3 = sum(semi_random_predict(r, freq, 3, i) != _semi_bf(r, probs, 3, i) for i, r in enumerate(recs))

    rng = np.random.default_rng(63)
    stops = [f"S{j}" for j in range(10)]
    p = rng.dirichlet(np.ones(10))
    trip = make_trip(list(range(0, 1000, 100)), stops)
    n = 20_000
    truth = rng.choice(10, n, p=p)
    table = FrequencyTable(tuple(stops), p)
    hits = np.mean([semi_random_predict(joined(trip, 5, stops[k]), table, 9, i) == stops[k]
                    for i, k in enumerate(truth)])
    expect = float(np.sum(p ** 2))
    sigma = np.sqrt(expect * (1 - expect) / n)
    z = abs(hits - expect) / sigma
    ok = mism1 == 0 and mism2 == 0 and mism3 == 0 and z < 3
    record(6, ok, f"mismatches history/closeness/semi-random {mism1}/{mism2}/{mism3} on 1000 records; semi-random "
                  f"{hits:.4f} vs sum p^2 {expect:.4f} ({z:.2f} sigma)")


# --------------------------------------------------------------------------- 7


def _city_features(cfg, train_days):
    city = generate_city(cfg)
    recs, _ = preprocess_and_join(city.records, city.feed)
    geo = route_geo_stats(city.feed, city.geo_points)
    tr, te = split_by_date(recs, train_days)
    fx = FeatureExtractor(city.feed, geo).fit(tr)
    return fx.transform(tr), labels(tr)[0], fx.transform(te), labels(te)[0], te


def test_criterion_7_transfer_learning():
    cfg_a = SynthConfig(seed=71, num_routes=5, stops_per_route=15, service_days=28, num_commuters=800,
                        lateness=DRIFT)
    Xa, ya, _, _, _ = _city_features(cfg_a, 21)
    model = train(Dataset(Xa, ya), TrainConfig(rounds=60))
    # city B: different network, heavier drift and peaks; 10 days to tune, the rest to test
    cfg_b = SynthConfig(seed=72, num_routes=4, stops_per_route=12, service_days=17, num_commuters=500,
                        headway_s=900, lateness=LatenessModel.drift(30.0, 40.0, peak_profile(240.0, 150.0)))
    Xb, yb, Xt, yt, te = _city_features(cfg_b, 10)
    tuned = fine_tune(model, Dataset(Xb, yb), 40)

    def pa1(m):
        S = np.array([r.S for r in te])
        n_stops = np.array([r.n_stops for r in te])
        pred = np.clip(S + m.predict_delta(Xt), 1, n_stops)
        return pareto_accuracy(np.array([r.A for r in te]), pred, 1)

    base, after = pa1(model), pa1(tuned)
    zero = fine_tune(model, Dataset(Xb, yb), 0)
    identical = (np.array_equal(zero.predict_proba(Xt), model.predict_proba(Xt))
                 and np.array_equal(zero.predict_delta(Xt), model.predict_delta(Xt)))
    record(7, after > base and identical,
           f"city-B PA1 untuned {base:.4f} -> tuned {after:.4f} (gain {after - base:+.4f}); "
           f"extra_rounds=0 bit-identical: {identical}")


# --------------------------------------------------------------------------- 8


def test_criterion_8_one_time_robustness(drift_pipeline):
    r = drift_pipeline
    prep, model = r["prep"], r["model"]
    comp = rp.compare_methods(prep.test, model, prep.X_test, prep.train)
    subs = rp.robustness_subsets(prep.test, model, prep.X_test, comp)
    once = rp.one_time_mask(prep.test)
    generator_once = np.array([c.startswith("O") for c in (x.afc.card_id for x in prep.test)])
    coverage = float((comp.frames["history"]["flag"][once] != "fallback").mean())
    overall = r["ml"].pareto[1]
    sub_pa1 = subs["one_time"].pareto[1]
    ok = abs(sub_pa1 - overall) <= 0.05 and coverage == 0.0 and np.array_equal(once, generator_once)
    record(8, ok, f"one-time subset n={int(once.sum())}, PA1 {sub_pa1:.4f} vs overall {overall:.4f}; "
                  f"history coverage on subset {coverage}")


# --------------------------------------------------------------------------- 9


def test_criterion_9_throughput(drift_pipeline):
    model = drift_pipeline["model"]
    city = generate_city(drift_config(seed=9, commuters=4500))
    geo = route_geo_stats(city.feed, city.geo_points)
    t0 = time.perf_counter()
    recs, _ = preprocess_and_join(city.records, city.feed)
    X = feature_matrix(recs, city.feed, geo, model.lateness)
    dhat = model.predict_delta(X)
    dt = time.perf_counter() - t0
    ok = len(recs) >= 300_000 and len(dhat) == len(recs) and dt <= 60.0
    record(9, ok, f"{len(recs)} records joined, featurized and predicted in {dt:.1f} s")


# --------------------------------------------------------------------------- 10


def _tree_files(root):
    out = []
    for d, _, files in os.walk(root):
        out += [os.path.relpath(os.path.join(d, f), root) for f in files]
    return sorted(out)


def test_criterion_10_determinism(tmp_path):
    synth_args = ["synth", "--seed", "10", "--routes", "4", "--stops-per-route", "10", "--days", "28",
                  "--commuters", "250", "--lateness", "drift", "--mu", "15", "--sigma", "30",
                  "--peak", "120", "--missing-ratio", "0.1", "--mechanism", "operator_biased"]
    cli_main(synth_args + ["--out", str(tmp_path / "c1")])
    cli_main(synth_args + ["--out", str(tmp_path / "c2")])
    c = tmp_path / "c1"
    run = ["report", "--seed", "10", "--rounds", "30", "--gtfs", str(c / "gtfs"), "--afc", str(c / "afc.csv"),
           "--geo", str(c / "geo.csv"), "--truth", str(c / "ground_truth.csv")]
    cli_main(run + ["--out", str(tmp_path / "r1")])
    cli_main(run + ["--out", str(tmp_path / "r2")])
    mismatched = []
    for a, b in (("c1", "c2"), ("r1", "r2")):
        fa, fb = _tree_files(tmp_path / a), _tree_files(tmp_path / b)
        if fa != fb:
            mismatched.append(f"{a}/{b} file lists")
            continue
        mismatched += [f for f in fa if not filecmp.cmp(tmp_path / a / f, tmp_path / b / f, shallow=False)]
    n_files = len(_tree_files(tmp_path / "r1")) + len(_tree_files(tmp_path / "c1"))
    record(10, not mismatched, f"{n_files} CSV/JSON/text outputs compared, mismatches: {mismatched or 'none'}")
