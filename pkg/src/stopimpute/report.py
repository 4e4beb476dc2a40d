"""End-to-end runs: preparation, model evaluation, baseline comparison,
temporal/spatial breakdowns and robustness subsets."""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import __version__
from .afc import AfcRecord, DropReport, JoinedRecord, locate_boarding, preprocess_and_join
from .baselines import (FALLBACK, build_frequency_table, build_history_index, history_predict,
                        semi_random_predict, temporal_closeness_batch)
from .features import DEFAULT_WEEKEND, FeatureExtractor, LatenessTable, labels, split_by_date
from .geodata import DEFAULT_BUFFER_M, GeoPoint, route_geo_stats
from .gtfs import GtfsFeed
from .learn.model import Dataset, ModelArtifact, TrainConfig, permutation_importance, train
from .metrics import MetricsReport, evaluate, pareto_curve, write_pareto_csv

logger = logging.getLogger(__name__)

SCHEDULE = "schedule_based"


@dataclass
class PipelineConfig:
    train_days: int = 21
    buffer_m: float = DEFAULT_BUFFER_M
    normalize_geo_by_length: bool = False
    weekend_days: Tuple[int, ...] = DEFAULT_WEEKEND
    closeness_s: float = 30.0
    restrict_semi_random: bool = True
    min_support: int = 10
    max_l: int = 5
    importance: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        if "weekend_days" in d:
            d["weekend_days"] = tuple(int(v) for v in d["weekend_days"])
        return cls(**d)


@dataclass
class RunManifest:
    inputs: Dict[str, dict]
    config_hashes: Dict[str, str]
    seed: int
    timestamps: Dict[str, str]
    versions: Dict[str, str]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def config_hash(obj) -> str:
    payload = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(payload).hexdigest()


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    if os.path.isdir(path):
        for name in sorted(os.listdir(path)):
            h.update(name.encode())
            h.update(bytes.fromhex(file_digest(os.path.join(path, name))))
        return h.hexdigest()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def library_versions() -> Dict[str, str]:
    import numba
    import sklearn

    return {"stopimpute": __version__, "numpy": np.__version__, "pandas": pd.__version__,
            "scikit-learn": sklearn.__version__, "numba": numba.__version__}


# --------------------------------------------------------------------------- preparation


@dataclass
class PreparedData:
    feed: GtfsFeed
    geo_stats: dict
    train: List[JoinedRecord]
    test: List[JoinedRecord]
    extractor: FeatureExtractor
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    drop_report: DropReport
    clipped_train: int = 0


def prepare(feed: GtfsFeed, records: Sequence[AfcRecord], geo_points: Sequence[GeoPoint],
            cfg: PipelineConfig = PipelineConfig(), lateness: Optional[LatenessTable] = None
            ) -> PreparedData:
    """Join, split by date, learn the lateness table on train and featurize both halves.

    A given ``lateness`` table (e.g. the one stored with a trained model)
    replaces the one learned from the training days.
    """
    joined, drops = preprocess_and_join(records, feed, mode="train")
    geo = route_geo_stats(feed, geo_points, cfg.buffer_m, cfg.normalize_geo_by_length)
    tr, te = split_by_date(joined, cfg.train_days)
    fx = FeatureExtractor(feed, geo, cfg.weekend_days).fit(tr)
    if lateness is not None:
        fx.lateness_table_ = lateness
    X_tr = fx.transform(tr)
    X_te = fx.transform(te) if te else np.empty((0, X_tr.shape[1]))
    y_tr, clipped = labels(tr)
    y_te, _ = labels(te) if te else (np.empty(0, np.int64), 0)
    if clipped:
        logger.info("clipped %d training labels to the delta range", clipped)
    return PreparedData(feed, geo, tr, te, fx, X_tr, y_tr, X_te, y_te, drops, clipped)


def restore_truth(records: Sequence[AfcRecord], true_stop_ids: Sequence[str]) -> List[AfcRecord]:
    """Copies of ``records`` with the boarding stop set from ground truth (row aligned)."""
    if len(records) != len(true_stop_ids):
        raise ValueError("ground truth must have one row per AFC record")
    return [replace(r, boarding_stop_id=s or None) for r, s in zip(records, true_stop_ids)]


# --------------------------------------------------------------------------- predictions


def _actual_sequences(records: Sequence[JoinedRecord]) -> np.ndarray:
    return np.array([np.nan if r.A is None else r.A for r in records], dtype=float)


def _seq_of_stop(record: JoinedRecord, stop_id: Optional[str]) -> float:
    if stop_id is None:
        return np.nan
    seq, _ = locate_boarding(record.trip, stop_id, record.afc.boarding_ts)
    return np.nan if seq is None else float(seq)


def prediction_frame(records: Sequence[JoinedRecord], pred_seq: np.ndarray, method: str,
                     flags: Optional[Sequence[str]] = None,
                     weekend_days: Sequence[int] = DEFAULT_WEEKEND) -> pd.DataFrame:
    pred_seq = np.asarray(pred_seq, dtype=float)
    stop_of = [r.trip.stop_ids[int(p) - 1] if not np.isnan(p) else "" for r, p in zip(records, pred_seq)]
    actual = _actual_sequences(records)
    wd = np.array([r.afc.service_date.weekday() for r in records], dtype=np.int64)
    ts = np.array([r.afc.boarding_ts for r in records], dtype=np.int64)
    df = pd.DataFrame({
        "record_index": np.arange(len(records)),
        "method": method,
        "card_id": [r.afc.card_id for r in records],
        "trip_id": [r.trip.trip_id for r in records],
        "route_id": [r.trip.route_id for r in records],
        "service_date": [r.afc.service_date.isoformat() for r in records],
        "weekday": wd,
        "is_weekend": np.isin(wd, list(weekend_days)),
        "hour": (ts // 3600) % 24,
        "boarding_ts": ts,
        "S": [r.S for r in records],
        "actual_seq": actual,
        "actual_stop": [r.afc.boarding_stop_id or "" for r in records],
        "pred_seq": pred_seq,
        "pred_stop": stop_of,
        "flag": list(flags) if flags is not None else "model",
    })
    df["correct"] = df["pred_seq"] == df["actual_seq"]
    return df


def _metrics_on_frame(df: pd.DataFrame, scores=None, classes=None, max_l: int = 5) -> MetricsReport:
    S = df["S"].to_numpy(float)
    return evaluate(df["actual_seq"].to_numpy(float) - S, df["pred_seq"].to_numpy(float) - S,
                    scores=scores, classes=classes, max_l=max_l)


def evaluate_model(model, records: Sequence[JoinedRecord], X: Optional[np.ndarray] = None,
                   max_l: int = 5, weekend_days: Sequence[int] = DEFAULT_WEEKEND
                   ) -> Tuple[MetricsReport, pd.DataFrame]:
    """Metrics and per-record predictions for a model or the schedule baseline.

    ``model`` is a :class:`ModelArtifact` (needs ``X``) or the string
    ``"schedule_based"``. Labels are delta classes relative to the scheduled
    position, so RMSE and Pareto accuracy are in stops.
    """
    if not len(records):
        raise ValueError("evaluation needs a non-empty test set")
    S = np.array([r.S for r in records], dtype=np.int64)
    n_stops = np.array([len(r.trip.events) for r in records], dtype=np.int64)
    if isinstance(model, str):
        if model != SCHEDULE:
            raise ValueError(f"unknown baseline {model!r}")
        df = prediction_frame(records, S.astype(float), SCHEDULE, weekend_days=weekend_days)
        return _metrics_on_frame(df, max_l=max_l), df
    if X is None:
        raise ValueError("a model evaluation needs the feature matrix")
    P = model.predict_proba(X)
    dhat = model.predict_delta(X)
    pred = np.clip(S + dhat, 1, n_stops)
    df = prediction_frame(records, pred.astype(float), model.learner, weekend_days=weekend_days)
    return _metrics_on_frame(df, scores=P, classes=model.classes, max_l=max_l), df


# --------------------------------------------------------------------------- breakdowns


def temporal_breakdown(predictions: pd.DataFrame) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Accuracy per weekday (0-6) and per hour (0-23, non-weekend days only).

    Cells without records hold NaN and n = 0.
    """
    daily = predictions.groupby("weekday")["correct"].agg(["size", "mean"])
    daily = daily.reindex(range(7)).rename(columns={"size": "n", "mean": "accuracy"})
    daily["n"] = daily["n"].fillna(0).astype(int)
    wk = predictions[~predictions["is_weekend"]]
    hourly = wk.groupby("hour")["correct"].agg(["size", "mean"])
    hourly = hourly.reindex(range(24)).rename(columns={"size": "n", "mean": "accuracy"})
    hourly["n"] = hourly["n"].fillna(0).astype(int)
    daily.index.name, hourly.index.name = "weekday", "hour"
    return daily.reset_index(), hourly.reset_index()


def spatial_breakdown(predictions: pd.DataFrame, feed: GtfsFeed,
                      min_support: int = 10) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Per true stop: support, accuracy and location; plus the well-predicted subset
    (accuracy >= 0.5 with at least ``min_support`` boardings)."""
    known = predictions[predictions["actual_stop"] != ""]
    g = known.groupby("actual_stop")["correct"].agg(["size", "mean"]).reset_index()
    g.columns = ["stop_id", "n", "accuracy"]
    g["lat"] = [feed.stops[s].lat for s in g["stop_id"]]
    g["lon"] = [feed.stops[s].lon for s in g["stop_id"]]
    g = g.sort_values("stop_id", kind="mergesort").reset_index(drop=True)
    good = g[(g["accuracy"] >= 0.5) & (g["n"] >= min_support)].reset_index(drop=True)
    return g, good


# --------------------------------------------------------------------------- comparison


@dataclass
class ComparisonRow:
    method: str
    percent_predicted: float
    accuracy_predicted: float
    report: MetricsReport

    def to_dict(self) -> dict:
        return {"method": self.method, "percent_predicted": self.percent_predicted,
                "accuracy_predicted": self.accuracy_predicted, "metrics": self.report.to_dict()}


@dataclass
class Comparison:
    rows: List[ComparisonRow]
    frames: Dict[str, pd.DataFrame] = field(default_factory=dict)

    def table(self) -> pd.DataFrame:
        return pd.DataFrame([{
            "method": r.method, "percent_predicted": r.percent_predicted,
            "accuracy_predicted": r.accuracy_predicted, "accuracy": r.report.accuracy,
            "PA_1": r.report.pareto.get(1), "PA_2": r.report.pareto.get(2), "f1": r.report.f1,
        } for r in self.rows])


def _row(method: str, df: pd.DataFrame, max_l: int, scores=None, classes=None) -> ComparisonRow:
    covered = (df["flag"] != FALLBACK).to_numpy()
    correct = df["correct"].to_numpy()
    acc_pred = float(correct[covered].mean()) if covered.any() else float("nan")
    return ComparisonRow(method, float(covered.mean()), acc_pred,
                         _metrics_on_frame(df, scores, classes, max_l))


def compare_methods(test: Sequence[JoinedRecord], model: ModelArtifact, X_test: np.ndarray,
                    train_records: Sequence[JoinedRecord], seed: int = 0,
                    cfg: PipelineConfig = PipelineConfig()) -> Comparison:
    """ML model against passenger history, temporal closeness and semi-random
    guessing. History and closeness fall back to the ML imputation."""
    _, ml_df = evaluate_model(model, test, X_test, cfg.max_l, cfg.weekend_days)
    ml_stops = ml_df["pred_stop"].tolist()
    frames = {"ml": ml_df}
    rows = [_row("ml", ml_df, cfg.max_l, model.predict_proba(X_test), model.classes)]

    index = build_history_index(train_records)
    hist = [history_predict(r, index, ml_stops[i]) for i, r in enumerate(test)]
    df = prediction_frame(test, [_seq_of_stop(r, s) for r, (s, _) in zip(test, hist)], "history",
                          [f for _, f in hist], cfg.weekend_days)
    frames["history"] = df
    rows.append(_row("history", df, cfg.max_l))

    known = [r.afc.boarding_stop_id for r in test]
    close_stops, close_flags = temporal_closeness_batch(test, known, ml_stops, cfg.closeness_s)
    df = prediction_frame(test, [_seq_of_stop(r, s) for r, s in zip(test, close_stops)],
                          "temporal_closeness", close_flags, cfg.weekend_days)
    frames["temporal_closeness"] = df
    rows.append(_row("temporal_closeness", df, cfg.max_l))

    freq = build_frequency_table(train_records)
    sr = [semi_random_predict(r, freq, seed, i, cfg.restrict_semi_random) for i, r in enumerate(test)]
    df = prediction_frame(test, [_seq_of_stop(r, s) for r, s in zip(test, sr)], "semi_random",
                          None, cfg.weekend_days)
    frames["semi_random"] = df
    rows.append(_row("semi_random", df, cfg.max_l))
    return Comparison(rows, frames)


# --------------------------------------------------------------------------- robustness


def one_time_mask(records: Sequence[JoinedRecord]) -> np.ndarray:
    """True for boardings that are their card's only boarding that service day."""
    keys = [(r.afc.card_id, r.afc.service_date) for r in records]
    counts: Dict[tuple, int] = {}
    for k in keys:
        counts[k] = counts.get(k, 0) + 1
    return np.array([counts[k] == 1 for k in keys], dtype=bool)


def robustness_subsets(test: Sequence[JoinedRecord], model: ModelArtifact, X_test: np.ndarray,
                       comparison: Optional[Comparison] = None, train_records=None,
                       max_l: int = 5) -> Dict[str, Optional[MetricsReport]]:
    """ML metrics on one-time travelers and on records the history / closeness
    baselines could not cover. Empty subsets map to ``None``."""
    if comparison is None:
        if train_records is None:
            raise ValueError("need a comparison or the training records")
        comparison = compare_methods(test, model, X_test, train_records)
    P = model.predict_proba(X_test)
    ml = comparison.frames["ml"]
    subsets = {
        "one_time": one_time_mask(test),
        "not_covered_by_history": (comparison.frames["history"]["flag"] == FALLBACK).to_numpy(),
        "not_covered_by_closeness": (comparison.frames["temporal_closeness"]["flag"] == FALLBACK).to_numpy(),
    }
    out: Dict[str, Optional[MetricsReport]] = {}
    for name, m in subsets.items():
        out[name] = _metrics_on_frame(ml[m], P[m], model.classes, max_l) if m.any() else None
    return out


# --------------------------------------------------------------------------- full run


def _dump_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _csv(df: pd.DataFrame, path: str) -> None:
    df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def run_report(prep: PreparedData, out_dir: str, train_cfg: TrainConfig = TrainConfig(),
               cfg: PipelineConfig = PipelineConfig(), model: Optional[ModelArtifact] = None,
               manifest: Optional[RunManifest] = None) -> dict:
    """Train (unless ``model`` is given), evaluate and write every report file.

    Returns the headline numbers as a dict.
    """
    os.makedirs(out_dir, exist_ok=True)
    if model is None:
        model = train(Dataset(prep.X_train, prep.y_train), train_cfg, prep.extractor.lateness_table_)
        model.metadata["clipped_train_rows"] = prep.clipped_train
    from .learn.model import save_model

    save_model(model, os.path.join(out_dir, "model.json"))
    _dump_json(os.path.join(out_dir, "drop_report.json"), prep.drop_report.to_dict())
    _dump_json(os.path.join(out_dir, "parse_report.json"), prep.feed.report.to_dict())

    summary = {}
    frames = {}
    for name, m, X in ((SCHEDULE, SCHEDULE, None), ("ml", model, prep.X_test)):
        rep, df = evaluate_model(m, prep.test, X, cfg.max_l, cfg.weekend_days)
        frames[name] = df
        summary[name] = rep.to_dict()
        _dump_json(os.path.join(out_dir, f"metrics_{name}.json"), rep.to_dict())
        _csv(df, os.path.join(out_dir, f"predictions_{name}.csv"))
        S = df["S"].to_numpy(float)
        write_pareto_csv(os.path.join(out_dir, f"pareto_{name}.csv"),
                         pareto_curve(df["actual_seq"].to_numpy(float) - S,
                                      df["pred_seq"].to_numpy(float) - S, cfg.max_l))
        daily, hourly = temporal_breakdown(df)
        _csv(daily, os.path.join(out_dir, f"temporal_daily_{name}.csv"))
        _csv(hourly, os.path.join(out_dir, f"temporal_hourly_{name}.csv"))
        per_stop, good = spatial_breakdown(df, prep.feed, cfg.min_support)
        _csv(per_stop, os.path.join(out_dir, f"spatial_{name}.csv"))
        _csv(good, os.path.join(out_dir, f"spatial_good_{name}.csv"))
        summary[name]["good_stops"] = int(len(good))

    seed = int(model.metadata.get("train_config", {}).get("seed", 0))
    comp = compare_methods(prep.test, model, prep.X_test, prep.train, seed, cfg)
    _csv(comp.table(), os.path.join(out_dir, "comparison.csv"))
    _dump_json(os.path.join(out_dir, "comparison.json"), [r.to_dict() for r in comp.rows])
    robust = robustness_subsets(prep.test, model, prep.X_test, comp, max_l=cfg.max_l)
    _dump_json(os.path.join(out_dir, "robustness.json"),
               {k: (v.to_dict() if v is not None else None) for k, v in robust.items()})
    summary["comparison"] = [r.to_dict() for r in comp.rows]
    summary["robustness"] = {k: (v.to_dict() if v else None) for k, v in robust.items()}

    if cfg.importance:
        ranked = permutation_importance(model, Dataset(prep.X_test, prep.y_test), seed=seed)
        _csv(pd.DataFrame(ranked, columns=["feature", "mean_accuracy_drop"]),
             os.path.join(out_dir, "importance.csv"))
        summary["importance"] = ranked
    if manifest is not None:
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            fh.write(manifest.to_json() + "\n")
    _dump_json(os.path.join(out_dir, "summary.json"), summary)
    return summary
