"""Study orchestration: source models, transfer / baseline arms, reports."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment as aug
from . import backtest as bt
from . import data as D
from . import network as nn
from .config import ArmSpec, ExperimentConfig, parse_arm

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("arm", "Ann ret", "Ann vol", "IR", "D. Risk", "DIR", "Acc", "Acc std",
                  "Macro-F1", "Macro-F1 std", "config_hash", "seed")


class ExperimentError(RuntimeError):
    pass


def derive_seed(*parts) -> int:
    """Stable 32-bit seed from a mix of ints and strings."""
    words = [p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

def load_panel(config: ExperimentConfig) -> D.ReturnsPanel:
    if config.data_path:
        return D.load_returns_csv(config.data_path)
    return D.generate_synthetic_panel(config.synthetic_n_days, config.synthetic_n_stocks,
                                      config.synthetic_signal_strength, config.synthetic_seed)


@dataclass
class SplitData:
    period: D.StudyPeriod
    train: D.SequenceSet
    val: D.SequenceSet
    test: D.SequenceSet


class Study:
    """Panel, study periods and lazily built per-split sequence sets."""

    def __init__(self, config: ExperimentConfig, panel: D.ReturnsPanel | None = None):
        self.config = config
        self.panel = panel if panel is not None else load_panel(config)
        self.periods = D.generate_splits(self.panel, config.split_length, config.split_stride,
                                         config.split_train_length)
        self._labels = None
        self._splits = {}
        self._features = {}

    @property
    def labels(self):
        if self._labels is None:
            self._labels = D.label_arrays(self.panel, self.config.label_k)
        return self._labels

    def split(self, i: int) -> SplitData:
        if i not in self._splits:
            period = self.periods[i]
            train_all = D.build_sequences(self.panel, period, "train", self.config.window,
                                          self.config.label_k, self.labels)
            train, val = D.chronological_train_val_split(train_all, self.config.val_fraction)
            test = D.build_sequences(self.panel, period, "test", self.config.window,
                                     self.config.label_k, self.labels)
            self._splits[i] = SplitData(period, train, val, test)
        return self._splits[i]

    def features(self, i: int, encoder: nn.LstmParams, part: str) -> np.ndarray:
        key = (i, encoder.digest(), part)
        if key not in self._features:
            seqs = getattr(self.split(i), part)
            self._features[key] = nn.extract_features(seqs.windows, encoder)
        return self._features[key]


def train_config(config: ExperimentConfig, loss_kind: str, seed: int) -> nn.TrainConfig:
    return nn.TrainConfig(learning_rate=config.learning_rate, batch_size=config.batch_size,
                          patience=config.patience, max_epochs=config.max_epochs,
                          loss_kind=loss_kind, alpha=config.alpha_value, seed=seed,
                          rho=config.rmsprop_rho, eps=config.rmsprop_eps)


# ---------------------------------------------------------------------------
# source models
# ---------------------------------------------------------------------------

@dataclass
class SourceRecord:
    split: int
    status: str
    checkpoint: str | None = None
    val_accuracy: float | None = None
    val_loss: float | None = None
    epochs: int = 0
    encoder_hash: str | None = None
    error: str | None = None
    training_log: list = field(default_factory=list)


def run_source_training(config: ExperimentConfig, study: Study, out_dir) -> list[SourceRecord]:
    """Train one median-label binary classifier per study period."""
    out_dir = Path(out_dir)
    records = []
    for i in range(len(study.periods)):
        sd = study.split(i)
        seed = derive_seed(config.seed, "source", i)
        model = nn.init_params(config.hidden_size, 2, None, seed=seed)
        tcfg = train_config(config, "CE", derive_seed(config.seed, "source-sampler", i))
        try:
            best, tlog = nn.train(model, nn.TrainingData.from_sequences(sd.train, "binary"),
                                  nn.TrainingData.from_sequences(sd.val, "binary"), tcfg)
        except nn.TrainingDivergedError as exc:
            log.warning("source split %d diverged: %s", i, exc)
            records.append(SourceRecord(i, "failed", error=str(exc),
                                        training_log=exc.training_log))
            continue
        best_entry = min(tlog, key=lambda e: e["val_loss"])
        rel = f"source/split_{i:02d}.json"
        nn.save_checkpoint(best, out_dir / rel, config.hash(),
                           extra={"split": i, "best_epoch": best_entry["epoch"]})
        records.append(SourceRecord(i, "ok", rel, best_entry["val_accuracy"],
                                    best_entry["val_loss"], len(tlog), best.encoder.digest(),
                                    training_log=tlog))
        log.info("source split %d: val acc %.4f after %d epochs", i,
                 best_entry["val_accuracy"], len(tlog))
    return records


def load_sources(records, out_dir) -> dict:
    out_dir = Path(out_dir)
    models = {}
    for rec in records:
        if rec.status != "ok":
            continue
        path = out_dir / rec.checkpoint
        if not path.exists():
            raise ExperimentError(f"missing source checkpoint for split {rec.split}: {path}")
        models[rec.split], _ = nn.load_checkpoint(path)
    return models


# ---------------------------------------------------------------------------
# arms
# ---------------------------------------------------------------------------

@dataclass
class ArmResult:
    arm: str
    kind: str
    report: bt.MetricsReport
    per_seed: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    predictions: dict | None = None  # first seed, all splits

    def to_json(self, config_hash: str) -> dict:
        return {
            "arm": self.arm, "kind": self.kind, "config_hash": config_hash,
            "report": _report_dict(self.report),
            "per_seed": self.per_seed, "failures": self.failures,
            "warnings": self.warnings[:50],
        }

    @classmethod
    def from_json(cls, payload) -> "ArmResult":
        return cls(payload["arm"], payload["kind"], _report_from_dict(payload["report"]),
                   payload["per_seed"], payload["failures"], payload.get("warnings", []))


def _report_dict(r: bt.MetricsReport) -> dict:
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v)
            for k, v in vars(r).items()}


def _report_from_dict(d) -> bt.MetricsReport:
    d = dict(d)
    for k in ("ann_return", "ann_vol", "information_ratio", "downside_risk", "downside_ir"):
        if d.get(k) is None:
            d[k] = math.nan
    return bt.MetricsReport(**d)


def _confusion(pred, truth, n_classes=3):
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (truth, pred), 1)
    return m


def _predictions_table(study, split_idx, seqs, probs, buy_col, sell_col):
    return {
        "split": np.full(len(seqs), split_idx, dtype=np.int64),
        "day": np.array([study.panel.dates[d + 1] for d in seqs.end_day], dtype=object),
        "ticker": np.array([study.panel.tickers[s] for s in seqs.stock], dtype=object),
        "p_buy": probs[:, buy_col],
        "p_sell": probs[:, sell_col],
        "p_nothing": probs[:, 2] if probs.shape[1] == 3 else np.zeros(len(seqs)),
        "next_return": seqs.next_return,
    }


def evaluate_split(config, study, split_idx, probs, buy_col=D.BUY, sell_col=D.SELL,
                   classify=True):
    """Backtest one split's test predictions; returns (SplitResult, info, table)."""
    sd = study.split(split_idx)
    table = _predictions_table(study, split_idx, sd.test, probs, buy_col, sell_col)
    ledger = bt.build_ledger(table, config.portfolio_k, config.cost_per_trade)
    info = {"split": split_idx, "n_test": len(sd.test), "n_days": len(ledger.days),
            "mean_turnover": float(ledger.turnover.mean()) if ledger.days else None}
    acc = f1 = None
    if classify:
        pred = probs.argmax(axis=1)
        acc, f1 = bt.classification_metrics(pred, sd.test.ternary_label)
        info.update(accuracy=acc, macro_f1=f1,
                    confusion=_confusion(pred, sd.test.ternary_label).tolist())
    return bt.SplitResult(split_idx, ledger.net, acc, f1), info, table, ledger.warnings


def _concat_tables(tables):
    if not tables:
        return None
    return {k: np.concatenate([t[k] for t in tables]) for k in tables[0]}


def run_krauss_arm(config, study, sources: dict, arm: ArmSpec | None = None) -> ArmResult:
    """Binary source model ranked directly: long top-k p_up, short top-k p_down."""
    arm = arm or parse_arm("lstm_krauss")
    results, infos, tables, warnings, failures = [], [], [], [], []
    for i in range(len(study.periods)):
        if i not in sources:
            failures.append({"split": i, "reason": "source model unavailable"})
            continue
        feats = study.features(i, sources[i].encoder, "test")
        probs = nn.head_forward(feats, sources[i].head)
        res, info, table, warn = evaluate_split(config, study, i, probs, buy_col=1, sell_col=0,
                                                classify=False)
        results.append(res)
        infos.append(info)
        tables.append(table)
        warnings += warn
    if not results:
        raise ExperimentError(f"arm {arm.name}: no split produced results")
    report = bt.aggregate_splits(results)
    per_seed = [{"seed": None, "report": _report_dict(report), "splits": infos}]
    return ArmResult(arm.name, arm.kind, report, per_seed, failures, warnings,
                     _concat_tables(tables))


def _train_set_for_transfer(config, study, i, model, arm, seed):
    sd = study.split(i)
    feats = study.features(i, model.encoder, "train")
    labels = sd.train.ternary_label
    nxt = sd.train.next_return
    n_before = len(labels)
    if arm.augmentation is None:
        return nn.TrainingData(labels, nxt, features=feats), n_before, n_before
    spec = config.augmentation_spec(arm.augmentation, derive_seed(seed, "augment", i))
    if spec.space == "feature":
        out = aug.augment_dataset(feats, labels, nxt, spec, space="feature")
        x, y, r = out.combined()
        return nn.TrainingData(y, r, features=x), n_before, len(out)
    out = aug.augment_dataset(sd.train.windows, labels, nxt, spec, space="input")
    extra = nn.extract_features(out.augmented, model.encoder)
    x = np.concatenate([feats, extra])
    return nn.TrainingData(np.concatenate([labels, labels]), np.concatenate([nxt, nxt]),
                           features=x), n_before, len(out)


def run_transfer_arm(config, study, sources: dict, arm: ArmSpec) -> ArmResult:
    """Frozen source encoder plus a freshly trained ternary head, per split and seed."""
    if arm.kind != "transfer":
        raise ExperimentError(f"{arm.name} is not a transfer arm")
    per_seed, seed_reports, failures, warnings = [], [], [], []
    first_tables = None
    for s_pos, seed in enumerate(config.seeds):
        results, infos, tables = [], [], []
        for i in range(len(study.periods)):
            if i not in sources:
                failures.append({"seed": seed, "split": i, "reason": "source model unavailable"})
                continue
            run_seed = derive_seed(config.seed, arm.name, seed)
            model = nn.transfer(sources[i], arm.n_hidden, derive_seed(run_seed, "head", i))
            train_data, n_before, n_after = _train_set_for_transfer(
                config, study, i, model, arm, run_seed)
            sd = study.split(i)
            val_data = nn.TrainingData(sd.val.ternary_label, sd.val.next_return,
                                       features=study.features(i, model.encoder, "val"))
            tcfg = train_config(config, arm.loss_kind, derive_seed(run_seed, "sampler", i))
            try:
                best, tlog = nn.train(model, train_data, val_data, tcfg)
            except nn.TrainingDivergedError as exc:
                failures.append({"seed": seed, "split": i, "reason": str(exc)})
                continue
            if best.encoder.digest() != sources[i].encoder.digest():
                raise ExperimentError(f"{arm.name}: encoder changed during target training")
            probs = nn.head_forward(study.features(i, model.encoder, "test"), best.head)
            res, info, table, warn = evaluate_split(config, study, i, probs)
            info.update(n_train=n_before, n_train_augmented=n_after, epochs=len(tlog),
                        alpha=tlog[0]["alpha"])
            results.append(res)
            infos.append(info)
            tables.append(table)
            warnings += warn
        if not results:
            continue
        rep = bt.aggregate_splits(results)
        seed_reports.append(rep)
        per_seed.append({"seed": seed, "report": _report_dict(rep), "splits": infos})
        if s_pos == 0:
            first_tables = _concat_tables(tables)
    if not seed_reports:
        raise ExperimentError(f"arm {arm.name}: no split produced results")
    return ArmResult(arm.name, arm.kind, bt.average_reports(seed_reports), per_seed,
                     failures, warnings, first_tables)


def run_baseline_arm(config, study, arm: ArmSpec) -> ArmResult:
    """Same topology trained from random initialization, averaged over seeds."""
    if arm.kind != "baseline":
        raise ExperimentError(f"{arm.name} is not a baseline arm")
    per_seed, seed_reports, failures, warnings = [], [], [], []
    first_tables = None
    for s_pos, seed in enumerate(config.seeds):
        results, infos, tables = [], [], []
        run_seed = derive_seed(config.seed, arm.name, seed)
        for i in range(len(study.periods)):
            sd = study.split(i)
            model = nn.init_params(config.hidden_size, 3, arm.n_hidden,
                                   seed=derive_seed(run_seed, "init", i))
            tcfg = train_config(config, arm.loss_kind, derive_seed(run_seed, "sampler", i))
            try:
                best, tlog = nn.train(model, nn.TrainingData.from_sequences(sd.train, "ternary"),
                                      nn.TrainingData.from_sequences(sd.val, "ternary"), tcfg)
            except nn.TrainingDivergedError as exc:
                failures.append({"seed": seed, "split": i, "reason": str(exc)})
                continue
            probs = nn.predict_proba(best, windows=sd.test.windows)
            res, info, table, warn = evaluate_split(config, study, i, probs)
            info.update(n_train=len(sd.train), epochs=len(tlog), alpha=tlog[0]["alpha"])
            results.append(res)
            infos.append(info)
            tables.append(table)
            warnings += warn
            log.info("%s seed %s split %d: acc %.4f", arm.name, seed, i, info["accuracy"])
        if not results:
            continue
        rep = bt.aggregate_splits(results)
        seed_reports.append(rep)
        per_seed.append({"seed": seed, "report": _report_dict(rep), "splits": infos})
        if s_pos == 0:
            first_tables = _concat_tables(tables)
    if not seed_reports:
        raise ExperimentError(f"arm {arm.name}: no split produced results")
    return ArmResult(arm.name, arm.kind, bt.average_reports(seed_reports), per_seed,
                     failures, warnings, first_tables)


def run_arm(config, study, sources, arm: ArmSpec) -> ArmResult:
    if arm.kind == "krauss":
        return run_krauss_arm(config, study, sources, arm)
    if arm.kind == "transfer":
        return run_transfer_arm(config, study, sources, arm)
    return run_baseline_arm(config, study, arm)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_predictions(table, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ("split", "day", "ticker", "p_buy", "p_sell", "p_nothing", "next_return")
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in zip(*(table[c] for c in cols)):
            w.writerow([_fmt(v.item() if hasattr(v, "item") else v) for v in row])


def read_predictions(path) -> dict:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ExperimentError(f"{path}: no prediction rows")
    required = ("day", "ticker", "p_buy", "p_sell", "p_nothing", "next_return")
    missing = [c for c in required if c not in rows[0]]
    if missing:
        raise ExperimentError(f"{path}: missing columns {missing}")
    table = {"day": np.array([r["day"] for r in rows], dtype=object),
             "ticker": np.array([r["ticker"] for r in rows], dtype=object)}
    for c in ("p_buy", "p_sell", "p_nothing", "next_return"):
        table[c] = np.array([float(r[c]) for r in rows])
    if "split" in rows[0]:
        table["split"] = np.array([int(r["split"]) for r in rows])
    return table


def backtest_predictions(table, k=10, cost_per_trade=bt.DEFAULT_COST) -> bt.MetricsReport:
    """Standalone backtest of a prediction table (per-split ledgers if a split column exists)."""
    splits = table.get("split")
    groups = [np.arange(len(table["day"]))] if splits is None else \
        [np.flatnonzero(splits == s) for s in np.unique(splits)]
    results = []
    for n, idx in enumerate(groups):
        part = {c: v[idx] for c, v in table.items()}
        ledger = bt.build_ledger(part, k, cost_per_trade)
        results.append(bt.SplitResult(n, ledger.net))
    return bt.aggregate_splits(results)


def save_arm_result(result: ArmResult, out_dir, config_hash: str) -> Path:
    path = Path(out_dir) / "arms" / f"{result.arm}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result.to_json(config_hash), indent=1, sort_keys=True))
    if result.predictions is not None:
        write_predictions(result.predictions, Path(out_dir) / "predictions" / f"{result.arm}.csv")
    return path


def load_arm_results(out_dir, arms) -> list[ArmResult]:
    out = []
    for name in arms:
        path = Path(out_dir) / "arms" / f"{name}.json"
        if path.exists():
            out.append(ArmResult.from_json(json.loads(path.read_text())))
    return out


def emit_report(results, out_dir, config: ExperimentConfig):
    """Write ``report.csv`` and ``report.json`` with one row per arm."""
    results = list(results)
    if not results:
        raise ExperimentError("no completed arms to report")
    rows = []
    for r in results:
        row = {"arm": r.arm, **r.report.row(), "config_hash": config.hash(), "seed": config.seed}
        rows.append(row)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "report.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
    payload = {"config_hash": config.hash(), "seed": config.seed,
               "columns": list(REPORT_COLUMNS), "rows": rows}
    (out_dir / "report.json").write_text(json.dumps(payload, indent=1) + "\n")
    return rows


def save_source_manifest(records, out_dir, config):
    path = Path(out_dir) / "source" / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"config_hash": config.hash(), "splits": [vars(r) for r in records]}
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))


def load_source_manifest(out_dir):
    path = Path(out_dir) / "source" / "manifest.json"
    if not path.exists():
        raise ExperimentError(f"no source manifest at {path}; run train-source first")
    payload = json.loads(path.read_text())
    return [SourceRecord(**r) for r in payload["splits"]]


# ---------------------------------------------------------------------------
# whole study
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    config_hash: str
    config_text: str
    sources: list
    arms: dict
    report_rows: list
    timings: dict

    def save(self, path):
        Path(path).write_text(json.dumps(vars(self), indent=1, sort_keys=True))


def run_arms(config, study, records, out_dir, kinds=("krauss", "transfer", "baseline"),
             timings=None):
    sources = load_sources(records, out_dir) if any(k != "baseline" for k in kinds) else {}
    results = []
    for arm in config.arm_specs():
        if arm.kind not in kinds:
            continue
        t0 = time.perf_counter()
        result = run_arm(config, study, sources, arm)
        if timings is not None:
            timings[arm.name] = time.perf_counter() - t0
        save_arm_result(result, out_dir, config.hash())
        results.append(result)
        log.info("arm %s: IR %.3f", arm.name, result.report.information_ratio)
    return results


def run_all(config: ExperimentConfig, out_dir=None) -> RunManifest:
    out_dir = Path(out_dir or config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    timings = {}
    t0 = time.perf_counter()
    study = Study(config)
    records = run_source_training(config, study, out_dir)
    save_source_manifest(records, out_dir, config)
    timings["source"] = time.perf_counter() - t0
    if not any(r.status == "ok" for r in records):
        raise ExperimentError("every source split failed")
    results = run_arms(config, study, records, out_dir, timings=timings)
    rows = emit_report(results, out_dir, config)
    timings["total"] = time.perf_counter() - t0
    manifest = RunManifest(
        config.hash(), config.to_text(),
        [{k: v for k, v in vars(r).items() if k != "training_log"} | {"epochs_log": r.training_log}
         for r in records],
        {r.arm: r.to_json(config.hash()) for r in results}, rows, timings)
    manifest.save(out_dir / "manifest.json")
    return manifest
