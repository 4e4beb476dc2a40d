"""Command-line interface: ``stopimpute <command> [options]``.

Every command writes CSV/JSON files into ``--out``. A ``--config`` file (JSON or
TOML) may hold ``[synth]``, ``[train]`` and ``[pipeline]`` tables; explicit flags
win over the file.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from typing import List, Optional

import numpy as np
import pandas as pd

from . import report as rp
from .afc import lateness_density, load_afc, preprocess_and_join
from .features import FeatureExtractor, read_feature_csv, write_feature_csv
from .geodata import load_geo_csv, route_geo_stats
from .gtfs import parse_feed
from .learn.model import Dataset, TrainConfig, fine_tune, impute_sequences, load_model, save_model, train
from .metrics import evaluate, pareto_curve, write_pareto_csv
from .synth import SynthConfig, generate, read_truth

logger = logging.getLogger("stopimpute")


def load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path) as fh:
        return json.load(fh)


def _merge(section: dict, overrides: dict, allowed) -> dict:
    names = {f.name for f in fields(allowed)}
    out = {k: v for k, v in section.items() if k in names}
    unknown = set(section) - names
    if unknown:
        raise SystemExit(f"unknown {allowed.__name__} keys in config: {sorted(unknown)}")
    out.update({k: v for k, v in overrides.items() if v is not None and k in names})
    return out


def train_config(args) -> TrainConfig:
    over = {"learner": args.learner, "rounds": args.rounds, "max_depth": args.max_depth,
            "learning_rate": args.learning_rate, "l2_lambda": args.l2_lambda,
            "min_child_weight": args.min_child_weight, "seed": args.seed}
    return TrainConfig(**_merge(args.config_data.get("train", {}), over, TrainConfig))


def pipeline_config(args) -> rp.PipelineConfig:
    over = {k: getattr(args, k, None) for k in ("train_days", "buffer_m", "closeness_s", "min_support",
                                               "max_l")}
    if getattr(args, "normalize_geo", False):
        over["normalize_geo_by_length"] = True
    if getattr(args, "unrestricted_semi_random", False):
        over["restrict_semi_random"] = False
    if getattr(args, "no_importance", False):
        over["importance"] = False
    if getattr(args, "weekend", None):
        over["weekend_days"] = tuple(int(v) for v in args.weekend.split(","))
    return rp.PipelineConfig.from_dict(_merge(args.config_data.get("pipeline", {}), over, rp.PipelineConfig))


def _dump(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _load_records(args):
    recs = load_afc(args.afc)
    if getattr(args, "truth", None):
        recs = rp.restore_truth(recs, read_truth(args.truth).true_stop_id)
    return recs


def _prepare(args, cfg: rp.PipelineConfig, lateness=None) -> rp.PreparedData:
    feed = parse_feed(args.gtfs)
    geo = load_geo_csv(args.geo) if args.geo else []
    return rp.prepare(feed, _load_records(args), geo, cfg, lateness)


def _manifest(args, cfg, tcfg=None, prep=None) -> rp.RunManifest:
    inputs = {}
    for key in ("gtfs", "afc", "geo", "truth", "model"):
        path = getattr(args, key, None)
        if path:
            inputs[key] = {"path": os.path.abspath(path), "sha256": rp.file_digest(path)}
    hashes = {"pipeline": rp.config_hash(asdict(cfg))}
    if tcfg is not None:
        hashes["train"] = rp.config_hash(asdict(tcfg))
    stamps = {}
    if prep is not None:
        dates = sorted({r.afc.service_date for r in prep.train + prep.test})
        stamps["data_first_date"], stamps["data_last_date"] = dates[0].isoformat(), dates[-1].isoformat()
    if args.timestamp:
        from datetime import datetime, timezone

        stamps["created_utc"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return rp.RunManifest(inputs, hashes, int(args.seed or 0), stamps, rp.library_versions())


# --------------------------------------------------------------------------- commands


def cmd_synth(args) -> None:
    d = dict(args.config_data.get("synth", {}))
    over = {"num_routes": args.routes, "stops_per_route": args.stops_per_route,
            "service_days": args.days, "num_commuters": args.commuters,
            "missing_ratio": args.missing_ratio, "missing_mechanism": args.mechanism, "seed": args.seed}
    d.update({k: v for k, v in over.items() if v is not None})
    if args.lateness:
        lat = dict(d.get("lateness", {}))
        lat["kind"] = args.lateness
        for k, v in (("mu_per_stop_s", args.mu), ("sigma_s", args.sigma), ("peak_s", args.peak)):
            if v is not None:
                lat[k] = v
        d["lateness"] = lat
    cfg = SynthConfig.from_dict(d)
    paths = generate(cfg, args.out)
    _dump(os.path.join(args.out, "synth_config.json"), cfg.to_dict())
    print(json.dumps(asdict(paths), indent=2))


def cmd_ingest(args) -> None:
    feed = parse_feed(args.gtfs)
    joined, drops = preprocess_and_join(_load_records(args), feed, mode=args.mode)
    _dump(os.path.join(args.out, "parse_report.json"), feed.report.to_dict())
    _dump(os.path.join(args.out, "drop_report.json"), drops.to_dict())
    pd.DataFrame({
        "card_id": [r.afc.card_id for r in joined],
        "trip_id": [r.trip.trip_id for r in joined],
        "route_id": [r.trip.route_id for r in joined],
        "service_date": [r.afc.service_date.isoformat() for r in joined],
        "boarding_ts": [r.afc.boarding_ts for r in joined],
        "boarding_stop_id": [r.afc.boarding_stop_id or "" for r in joined],
        "S": [r.S for r in joined],
        "A": pd.array([r.A for r in joined], dtype="Int64"),
        "loop_ambiguous": [r.loop_ambiguous for r in joined],
    }).to_csv(os.path.join(args.out, "joined.csv"), index=False, lineterminator="\n")
    known = [r for r in joined if r.A is not None]
    if known:
        h = lateness_density(known, feed)
        pd.DataFrame({"bin_left_s": h.edges[:-1], "count": h.counts}).to_csv(
            os.path.join(args.out, "lateness_histogram.csv"), index=False, lineterminator="\n")
    print(drops.to_json())


def cmd_features(args) -> None:
    cfg = pipeline_config(args)
    prep = _prepare(args, cfg)
    write_feature_csv(os.path.join(args.out, "features_train.csv"), prep.X_train, prep.y_train)
    if len(prep.test):
        write_feature_csv(os.path.join(args.out, "features_test.csv"), prep.X_test, prep.y_test)
    _dump(os.path.join(args.out, "lateness.json"), prep.extractor.lateness_table_.to_dict())
    _dump(os.path.join(args.out, "drop_report.json"), prep.drop_report.to_dict())
    print(f"train rows {len(prep.train)}, test rows {len(prep.test)}, clipped {prep.clipped_train}")


def _read_dataset(path: str) -> Dataset:
    X, y = read_feature_csv(path)
    if y is None:
        raise SystemExit(f"{path}: no label column")
    return Dataset(X, y)


def cmd_train(args) -> None:
    from .features import LatenessTable

    tcfg = train_config(args)
    lateness = None
    if args.lateness_table:
        with open(args.lateness_table) as fh:
            lateness = LatenessTable.from_dict(json.load(fh))
    model = train(_read_dataset(args.features), tcfg, lateness)
    save_model(model, os.path.join(args.out, "model.json"))
    print(f"trained {tcfg.learner} on {model.metadata['n_train']} rows, classes {model.classes.tolist()}")


def cmd_finetune(args) -> None:
    model = fine_tune(load_model(args.model), _read_dataset(args.features), args.extra_rounds)
    save_model(model, os.path.join(args.out, "model.json"))


def cmd_impute(args) -> None:
    cfg = pipeline_config(args)
    model = load_model(args.model)
    if model.lateness is None:
        raise SystemExit("model carries no lateness table; train it from the features command output")
    feed = parse_feed(args.gtfs)
    joined, drops = preprocess_and_join(load_afc(args.afc), feed, mode="impute")
    targets = [r for r in joined if r.A is None]
    geo = route_geo_stats(feed, load_geo_csv(args.geo) if args.geo else [], cfg.buffer_m,
                          cfg.normalize_geo_by_length)
    fx = FeatureExtractor(feed, geo, cfg.weekend_days)
    fx.lateness_table_ = model.lateness
    rows = {"card_id": [], "trip_id": [], "service_date": [], "boarding_ts": [], "S": [],
            "imputed_sequence": [], "imputed_stop_id": []}
    if targets:
        X = fx.transform(targets)
        S = np.array([r.S for r in targets])
        seq = impute_sequences(S, model.predict_delta(X), np.array([r.n_stops for r in targets]))
        for r, q in zip(targets, seq):
            rows["card_id"].append(r.afc.card_id)
            rows["trip_id"].append(r.trip.trip_id)
            rows["service_date"].append(r.afc.service_date.isoformat())
            rows["boarding_ts"].append(r.afc.boarding_ts)
            rows["S"].append(r.S)
            rows["imputed_sequence"].append(int(q))
            rows["imputed_stop_id"].append(r.trip.stop_ids[int(q) - 1])
    pd.DataFrame(rows).to_csv(os.path.join(args.out, "imputed.csv"), index=False, lineterminator="\n")
    _dump(os.path.join(args.out, "drop_report.json"), drops.to_dict())
    print(f"imputed {len(targets)} boardings")


def cmd_evaluate(args) -> None:
    cfg = pipeline_config(args)
    if args.features:
        # delta-level evaluation straight from a labeled feature file
        data = _read_dataset(args.features)
        if args.baseline:
            pred, scores, classes = np.zeros_like(data.y), None, None
        else:
            model = load_model(args.model)
            pred = model.predict_delta(data.X)
            scores, classes = model.predict_proba(data.X), model.classes
        rep = evaluate(data.y, pred, scores, classes, cfg.max_l)
        name = "schedule_based" if args.baseline else "ml"
        _dump(os.path.join(args.out, f"metrics_{name}.json"), rep.to_dict())
        write_pareto_csv(os.path.join(args.out, f"pareto_{name}.csv"), pareto_curve(data.y, pred, cfg.max_l))
        print(rep.to_json())
        return
    model = None if args.baseline else load_model(args.model)
    prep = _prepare(args, cfg, model.lateness if model else None)
    target = rp.SCHEDULE if args.baseline else model
    rep, df = rp.evaluate_model(target, prep.test, prep.X_test, cfg.max_l, cfg.weekend_days)
    name = rp.SCHEDULE if args.baseline else "ml"
    _dump(os.path.join(args.out, f"metrics_{name}.json"), rep.to_dict())
    rp._csv(df, os.path.join(args.out, f"predictions_{name}.csv"))
    print(rep.to_json())


def cmd_compare(args) -> None:
    cfg = pipeline_config(args)
    model = load_model(args.model)
    prep = _prepare(args, cfg, model.lateness)
    comp = rp.compare_methods(prep.test, model, prep.X_test, prep.train, int(args.seed or 0), cfg)
    rp._csv(comp.table(), os.path.join(args.out, "comparison.csv"))
    _dump(os.path.join(args.out, "comparison.json"), [r.to_dict() for r in comp.rows])
    for name, df in comp.frames.items():
        rp._csv(df, os.path.join(args.out, f"predictions_{name}.csv"))
    robust = rp.robustness_subsets(prep.test, model, prep.X_test, comp, max_l=cfg.max_l)
    _dump(os.path.join(args.out, "robustness.json"),
          {k: (v.to_dict() if v else None) for k, v in robust.items()})
    print(comp.table().to_string(index=False))


def cmd_report(args) -> None:
    cfg = pipeline_config(args)
    tcfg = train_config(args)
    model = load_model(args.model) if args.model else None
    prep = _prepare(args, cfg, model.lateness if model else None)
    summary = rp.run_report(prep, args.out, tcfg, cfg, model, _manifest(args, cfg, tcfg, prep))
    print(pd.DataFrame(summary["comparison"])[["method", "percent_predicted", "accuracy_predicted"]]
          .to_string(index=False))
    print(f"schedule PA_1 {summary[rp.SCHEDULE]['pareto']['PA_1']:.4f}  "
          f"ml PA_1 {summary['ml']['pareto']['PA_1']:.4f}")


# --------------------------------------------------------------------------- parser


def _data_args(p, geo=True, truth=True) -> None:
    p.add_argument("--gtfs", required=True, help="GTFS directory")
    p.add_argument("--afc", required=True, help="AFC boardings CSV")
    if geo:
        p.add_argument("--geo", help="geospatial points CSV (addresses, street/traffic lights)")
    if truth:
        p.add_argument("--truth", help="ground-truth CSV; restores masked stops before evaluation")


def _pipeline_args(p) -> None:
    p.add_argument("--train-days", type=int, help="distinct service dates used for training (21)")
    p.add_argument("--buffer-m", type=float, help="route buffer for geo point counts (50)")
    p.add_argument("--normalize-geo", action="store_true", help="geo counts per km of route")
    p.add_argument("--weekend", help="comma-separated weekday numbers, Monday=0 (default 4,5)")
    p.add_argument("--closeness-s", type=float, help="temporal closeness threshold in seconds (30)")
    p.add_argument("--min-support", type=int, help="minimum boardings for the good-stops subset (10)")
    p.add_argument("--max-l", type=int, help="largest Pareto limit reported (5)")
    p.add_argument("--unrestricted-semi-random", action="store_true",
                   help="sample semi-random guesses over all stops, not just the trip's")
    p.add_argument("--no-importance", action="store_true", help="skip permutation importance")


def _train_args(p) -> None:
    p.add_argument("--learner", choices=("gbt", "logreg"))
    p.add_argument("--rounds", type=int, help="boosting rounds or LogReg epochs (100)")
    p.add_argument("--max-depth", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--l2-lambda", type=float)
    p.add_argument("--min-child-weight", type=float)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON or TOML config file")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="stopimpute", parents=[common],
                                     description="Impute missing smart-card boarding stops.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic city")
    p.add_argument("--routes", type=int)
    p.add_argument("--stops-per-route", type=int)
    p.add_argument("--days", type=int)
    p.add_argument("--commuters", type=int)
    p.add_argument("--missing-ratio", type=float)
    p.add_argument("--mechanism", choices=("random", "operator_biased"))
    p.add_argument("--lateness", choices=("none", "drift", "hourly"))
    p.add_argument("--mu", type=float, help="drift per stop in seconds")
    p.add_argument("--sigma", type=float, help="random-walk step in seconds")
    p.add_argument("--peak", type=float, help="extra mean lateness at peak hours in seconds")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", parents=[common], help="clean and join AFC records to GTFS")
    _data_args(p, geo=False)
    p.add_argument("--mode", choices=("train", "impute"), default="train")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("features", parents=[common], help="write train/test feature matrices")
    _data_args(p)
    _pipeline_args(p)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", parents=[common], help="train a model on a feature CSV")
    p.add_argument("--features", required=True)
    p.add_argument("--lateness-table", help="lateness.json from the features command")
    _train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", parents=[common], help="continue training on new data")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--extra-rounds", type=int, required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("impute", parents=[common], help="fill in missing boarding stops")
    p.add_argument("--model", required=True)
    _data_args(p, truth=False)
    _pipeline_args(p)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("evaluate", parents=[common], help="metrics for a model or the schedule baseline")
    p.add_argument("--model")
    p.add_argument("--baseline", action="store_true", help="evaluate the schedule-based predictor")
    p.add_argument("--features", help="labeled feature CSV (delta-level evaluation, no data files)")
    p.add_argument("--gtfs")
    p.add_argument("--afc")
    p.add_argument("--geo")
    p.add_argument("--truth")
    _pipeline_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", parents=[common], help="ML against the baseline imputers")
    p.add_argument("--model", required=True)
    _data_args(p)
    _pipeline_args(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", parents=[common], help="full run: train, evaluate, compare, break down")
    p.add_argument("--model", help="use this model instead of training one")
    p.add_argument("--timestamp", action="store_true", help="record wall-clock time in the manifest")
    _data_args(p)
    _pipeline_args(p)
    _train_args(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("seed", None), ("config", None), ("out", "."), ("verbose", False),
                          ("timestamp", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.config_data = load_config(args.config)
    if args.command == "evaluate" and not args.features:
        if not (args.gtfs and args.afc):
            parser.error("evaluate needs --features or --gtfs and --afc")
    if args.command == "evaluate" and not args.baseline and not args.model:
        parser.error("evaluate needs --model unless --baseline is given")
    os.makedirs(args.out, exist_ok=True)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
