"""
Configuration, per-record orchestration and on-disk artifacts for the CLI.
"""

from __future__ import annotations

import contextlib
import csv
import hashlib
import io
import json
import logging
import math
import os
import platform
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from . import __version__
from . import classify_eval as ce
from . import readout as ro
from .mitdb_protocol import HEADLINE_EXCLUDED, PROTOCOLS, ClassProtocol, protocol_for
from .preprocessing import FilterSpec, default_window_policy, filter_record
from .reservoir import ReservoirParams, ReservoirWeights, build_reservoir, load_reservoir_sidecar, reservoir_sidecar
from .synthetic import bundled_dir
from .wfdb_ingest import AnnotatedRecord, load_record, record_available

logger = logging.getLogger(__name__)

FETCH_INSTRUCTIONS = """\
The MIT-BIH arrhythmia database is not bundled. Download it from PhysioNet, e.g.

    wget -r -N -c -np https://physionet.org/files/mitdb/1.0.0/

and point `data_dir` (or --data-dir) at the directory holding 100.hea, 100.dat, 100.atr, ...
The bundled synthetic record is always available as record id `synth`.
"""


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

@dataclass
class CvSettings:
    mode: str = "seeded"  # seeded | grid | fixed
    num_folds: int = 5
    gammas: List[float] = field(default_factory=lambda: [1e-6, 1e-5, 1e-4, 1e-3])
    weightings: List = field(default_factory=lambda: ["none", [1.5, 1.0], [2.5, 1.0]])
    taus: List[float] = field(default_factory=lambda: [0.5, 0.8, 1.0])
    beat_rule: str = "modal"

    def __post_init__(self):
        if self.mode not in ("seeded", "grid", "fixed"):
            raise ValueError(f"unknown cv mode {self.mode!r}")


@dataclass
class PipelineConfig:
    data_dir: str = "data/mitdb"
    records: List[str] = field(default_factory=lambda: sorted(PROTOCOLS))
    seed: int = 1
    output_dir: str = "out"
    reservoir: ReservoirParams = field(default_factory=ReservoirParams)
    filter: FilterSpec = field(default_factory=FilterSpec)
    window_policy: Dict[str, Tuple[float, float]] = field(default_factory=default_window_policy)
    cv: CvSettings = field(default_factory=CvSettings)
    train_minutes: float = 7.5
    exclude: List[str] = field(default_factory=lambda: list(HEADLINE_EXCLUDED))
    jobs: int = 1
    protocols: Dict[str, List[dict]] = field(default_factory=dict)

    def reservoir_params(self) -> ReservoirParams:
        return replace(self.reservoir, seed=self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window_policy"] = {k: list(v) for k, v in sorted(self.window_policy.items())}
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _build(cls, data: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} field(s): {sorted(unknown)}")
    return cls(**data)


def load_config(path=None, **overrides) -> PipelineConfig:
    """Read a YAML (or JSON) config; missing fields take their defaults.

    Keyword overrides with value ``None`` are ignored.
    """
    raw = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    raw.update({k: v for k, v in overrides.items() if v is not None})
    raw = dict(raw)
    if "reservoir" in raw:
        raw["reservoir"] = _build(ReservoirParams, raw["reservoir"])
    if "filter" in raw:
        raw["filter"] = _build(FilterSpec, raw["filter"])
    if "cv" in raw:
        raw["cv"] = _build(CvSettings, raw["cv"])
    if "window_policy" in raw:
        policy = default_window_policy()
        policy.update({k: tuple(v) for k, v in raw["window_policy"].items()})
        raw["window_policy"] = policy
    if "records" in raw:
        raw["records"] = [str(r) for r in raw["records"]]
    if "exclude" in raw:
        raw["exclude"] = [str(r) for r in raw["exclude"]]
    return _build(PipelineConfig, raw)


# ---------------------------------------------------------------------------
# records and protocols
# ---------------------------------------------------------------------------

def record_stem(cfg: PipelineConfig, record_id: str) -> Path:
    if record_available(cfg.data_dir, record_id):
        return Path(cfg.data_dir) / record_id
    if record_available(bundled_dir(), record_id):
        return bundled_dir() / record_id
    raise FileNotFoundError(f"record {record_id} not found under {cfg.data_dir}\n{FETCH_INSTRUCTIONS}")


def _source_digest(stem: Path) -> str:
    h = hashlib.sha256()
    for ext in (".hea", ".dat", ".atr"):
        h.update(Path(f"{stem}{ext}").read_bytes())
    return h.hexdigest()


def load(cfg: PipelineConfig, record_id: str) -> AnnotatedRecord:
    return load_record(record_stem(cfg, record_id))


def cache_record(cfg: PipelineConfig, record: AnnotatedRecord, stem: Path) -> Path:
    """Store decoded lead II and beat annotations as ``.npz`` under the output dir."""
    path = Path(cfg.output_dir) / "cache" / f"{record.name}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    with _atomic(path, "wb") as fh:
        np.savez(
            fh,
            signals=np.stack([s.samples for s in record.signals]),
            channels=np.array([s.channel_name for s in record.signals]),
            fs=record.fs,
            ann_sample=np.array([a.sample_index for a in record.annotations], dtype=np.int64),
            ann_code=np.array([a.beat_code for a in record.annotations]),
            source_sha256=_source_digest(stem),
        )
    return path


def record_protocol(cfg: PipelineConfig, record_id: str) -> List[ClassProtocol]:
    if record_id in cfg.protocols:
        out = []
        for entry in cfg.protocols[record_id]:
            e = dict(entry)
            e.setdefault("description", e["symbol"])
            e.setdefault("test_beats", 0)
            e.setdefault("ratio", None)
            e.setdefault("reference", (math.nan,) * 4)
            e.setdefault("class_beats", 0)
            e["test_slot_min"] = tuple(e["test_slot_min"])
            e["reference"] = tuple(e["reference"])
            out.append(ClassProtocol(**e))
        return out
    return protocol_for(record_id)


@dataclass
class SplitPlan:
    split: ce.Split
    targets: List[ClassProtocol]

    @property
    def class_order(self) -> Tuple[str, ...]:
        return (ce.REST,) + tuple(t.symbol for t in self.targets)

    @property
    def tag(self) -> str:
        a, b = self.split.test
        return f"test_{a / 60:g}-{b / 60:g}min"


def split_plans(cfg: PipelineConfig, record_id: str) -> List[SplitPlan]:
    """Group a record's target classes by test slot."""
    groups: Dict[Tuple[float, float], List[ClassProtocol]] = {}
    for cp in record_protocol(cfg, record_id):
        groups.setdefault(cp.test_slot, []).append(cp)
    return [
        SplitPlan(ce.Split.preceding(slot, cfg.train_minutes * 60.0), targets)
        for slot, targets in groups.items()
    ]


def cv_plan(cfg: PipelineConfig, plan: SplitPlan) -> ce.CvPlan:
    s = cfg.cv
    if s.mode == "grid":
        weightings = tuple(
            None if (w is None or w == "none") else ro.RobustConfig(float(w[0]), float(w[1]))
            for w in s.weightings
        )
        return ce.CvPlan(s.num_folds, tuple(s.gammas), weightings, tuple(s.taus), s.beat_rule)
    # seeded: a small neighbourhood of the published per-class settings
    # rounding merges products such as 1e-5 * 0.1 and 1e-6 that differ in the last bit
    gammas = sorted({float(f"{t.gamma * f:.6g}") for t in plan.targets for f in (0.1, 1.0, 10.0)})
    ratios = sorted({t.ratio for t in plan.targets if t.ratio is not None})
    weightings = (None,) + tuple(ro.RobustConfig(r, 1.0) for r in ratios)
    taus = sorted({t.tau for t in plan.targets})
    return ce.CvPlan(s.num_folds, tuple(gammas), weightings, tuple(taus), s.beat_rule)


def fixed_choices(plan: SplitPlan) -> Dict[str, ce.ClassChoice]:
    choices = {}
    for t in plan.targets:
        robust = None if t.ratio is None else ro.RobustConfig(t.ratio, 1.0)
        choices[t.symbol] = ce.ClassChoice(t.symbol, t.gamma, robust, t.tau)
    first = plan.targets[0].symbol
    choices[ce.REST] = replace(choices[first], label=ce.REST)
    return choices


# ---------------------------------------------------------------------------
# run bookkeeping
# ---------------------------------------------------------------------------

class WarningCollector(logging.Handler):
    def __init__(self):
        super().__init__(level=logging.WARNING)
        self.messages: List[str] = []

    def emit(self, record):
        self.messages.append(f"{record.name}: {record.getMessage()}")


@contextlib.contextmanager
def collect_warnings():
    handler = WarningCollector()
    root = logging.getLogger("rcecg")
    root.addHandler(handler)
    try:
        yield handler.messages
    finally:
        root.removeHandler(handler)


@contextlib.contextmanager
def _atomic(path: Path, mode: str = "w"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_text(path, text: str) -> None:
    with _atomic(Path(path), "w") as fh:
        fh.write(text)


def write_bytes(path, blob: bytes) -> None:
    with _atomic(Path(path), "wb") as fh:
        fh.write(blob)


def versions() -> dict:
    import matplotlib
    import scipy

    return {"rcecg": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "matplotlib": matplotlib.__version__, "python": platform.python_version()}


def write_manifest(path, cfg: PipelineConfig, command: str, timings: dict, warnings: Sequence[str]) -> None:
    doc = {
        "command": command,
        "config_sha256": cfg.config_hash(),
        "seed": cfg.seed,
        "versions": versions(),
        "timings_s": {k: round(v, 3) for k, v in timings.items()},
        "warnings": list(warnings),
    }
    write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def record_dir(cfg: PipelineConfig, record_id: str) -> Path:
    return Path(cfg.output_dir) / record_id


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------

def reservoir_for(cfg: PipelineConfig) -> ReservoirWeights:
    return build_reservoir(cfg.reservoir_params())


def prepare(cfg: PipelineConfig, record_id: str) -> AnnotatedRecord:
    record = load(cfg, record_id)
    return filter_record(record, replace(cfg.filter, sampling_frequency=record.fs))


def train_split(cfg: PipelineConfig, record: AnnotatedRecord, plan: SplitPlan,
                weights: ReservoirWeights) -> ce.TrainedModel:
    fixed = fixed_choices(plan) if cfg.cv.mode == "fixed" else None
    return ce.train_record(record, plan.split, weights, plan.class_order,
                           plan=cv_plan(cfg, plan), fixed=fixed, window_policy=cfg.window_policy)


def save_model(path: Path, model: ce.TrainedModel, weights: ReservoirWeights, plan: SplitPlan) -> None:
    path.mkdir(parents=True, exist_ok=True)
    write_text(path / "reservoir.json", reservoir_sidecar(weights))
    extra = {"train_slot_s": list(plan.split.train), "test_slot_s": list(plan.split.test),
             "targets": [t.symbol for t in plan.targets]}
    write_bytes(path / "readout.bin", ro.dump_readout(model.W_out, model.rows, extra))
    np.save(path / "final_state.npy", model.final_state)
    if model.cv is not None:
        write_text(path / "cv.json", json.dumps(
            {"choices": {c: asdict(ch.row_config()) | {"cv_f1": ch.cv_f1} for c, ch in model.cv.choices.items()},
             "grid": model.cv.table}, indent=1, sort_keys=True) + "\n")


def load_model(path: Path) -> Tuple[ce.TrainedModel, ReservoirWeights, ce.Split, List[str]]:
    path = Path(path)
    W_out, rows, header = ro.load_readout((path / "readout.bin").read_bytes())
    weights = load_reservoir_sidecar((path / "reservoir.json").read_text())
    final_state = np.load(path / "final_state.npy")
    split = ce.Split(tuple(header["train_slot_s"]), tuple(header["test_slot_s"]))
    model = ce.TrainedModel(W_out, rows, tuple(header["class_order"]), None, final_state)
    return model, weights, split, header["targets"]


def run_train(cfg: PipelineConfig, record_id: str, weights: Optional[ReservoirWeights] = None) -> List[Path]:
    t0 = time.perf_counter()
    timings = {}
    with collect_warnings() as warns:
        weights = weights or reservoir_for(cfg)
        record = prepare(cfg, record_id)
        out = []
        for plan in split_plans(cfg, record_id):
            ts = time.perf_counter()
            model = train_split(cfg, record, plan, weights)
            path = record_dir(cfg, record_id) / plan.tag
            save_model(path, model, weights, plan)
            timings[plan.tag] = time.perf_counter() - ts
            out.append(path)
        timings["total"] = time.perf_counter() - t0
    write_manifest(record_dir(cfg, record_id) / "manifest_train.json", cfg, f"train {record_id}", timings, warns)
    return out


def model_dirs(cfg: PipelineConfig, record_id: str, model_path=None) -> List[Path]:
    base = Path(model_path) if model_path else record_dir(cfg, record_id)
    if (base / "readout.bin").exists():
        return [base]
    found = sorted(p.parent for p in base.glob("*/readout.bin"))
    if not found:
        raise FileNotFoundError(f"no trained model under {base}; run `rcecg train` first")
    return found


REPORT_FIELDS = ["record", "class", "slot_min", "n_beats", "n_class_beats", "gamma", "weighting", "tau",
                 "tp", "fp", "tn", "fn", "acc", "se", "p", "f1"]


def _fmt(v):
    if isinstance(v, float):
        return "undefined" if math.isnan(v) else repr(v)
    return str(v)


def reports_csv(rows: Sequence[dict], columns=REPORT_FIELDS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def table_row_csv(rows: Sequence[dict]) -> str:
    """Rows shaped like the published per-record table."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["record", "class", "slot_min", "n_beats", "gamma", "a_over_s", "tau", "acc", "se", "p", "f1"])
    for r in rows:
        w.writerow([r["record"], r["class"], r["slot_min"], r["n_beats"], _fmt(r["gamma"]), r["weighting"],
                    _fmt(r["tau"])] + [("undefined" if math.isnan(r[k]) else f"{r[k]:.4f}")
                                       for k in ("acc", "se", "p", "f1")])
    return buf.getvalue()


def _json_safe(row: dict) -> dict:
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()}


def run_eval(cfg: PipelineConfig, record_id: str, model_path=None, figures: bool = True) -> List[dict]:
    t0 = time.perf_counter()
    rows: List[dict] = []
    with collect_warnings() as warns:
        record = prepare(cfg, record_id)
        for path in model_dirs(cfg, record_id, model_path):
            model, weights, split, targets = load_model(path)
            reports = ce.evaluate_record(record, split, weights, model, targets,
                                         cfg.window_policy, cfg.cv.beat_rule)
            rows.extend(r.as_row() for r in reports)
    out = record_dir(cfg, record_id)
    write_text(out / "metrics.csv", reports_csv(rows))
    write_text(out / "table_row.csv", table_row_csv(rows))
    write_text(out / "metrics.json", json.dumps(
        {"record": record_id, "reports": [_json_safe(r) for r in rows]}, indent=2, sort_keys=True) + "\n")
    if figures:
        from .plotting import plot_metrics

        plot_metrics(rows, out / "metrics.png", title=f"record {record_id}")
    write_manifest(out / "manifest_eval.json", cfg, f"eval {record_id}",
                   {"total": time.perf_counter() - t0}, warns)
    return rows


def train_and_eval(cfg: PipelineConfig, record_id: str) -> Tuple[List[dict], List[str], float]:
    t0 = time.perf_counter()
    with collect_warnings() as warns:
        run_train(cfg, record_id)
        rows = run_eval(cfg, record_id)
    return rows, list(warns), time.perf_counter() - t0


def global_metrics(rows: Sequence[dict], exclude: Sequence[str] = ()) -> dict:
    """Unweighted mean over (record, class) rows; NaN entries are skipped."""
    kept = [r for r in rows if r["record"] not in set(exclude)]
    out = {"n_rows": len(kept)}
    for k in ("acc", "se", "p", "f1"):
        vals = [r[k] for r in kept if not math.isnan(r[k])]
        out[k] = float(np.mean(vals)) if vals else None
    return out


def run_sweep(cfg: PipelineConfig, figures: bool = True) -> dict:
    from concurrent.futures import ProcessPoolExecutor

    t0 = time.perf_counter()
    records = list(cfg.records)
    results: Dict[str, Tuple[List[dict], List[str], float]] = {}
    if cfg.jobs > 1 and len(records) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            futures = {rid: pool.submit(train_and_eval, cfg, rid) for rid in records}
            results = {rid: f.result() for rid, f in futures.items()}
    else:
        results = {rid: train_and_eval(cfg, rid) for rid in records}

    rows = [r for rid in records for r in results[rid][0]]
    summary = {
        "records": records,
        "global": global_metrics(rows),
        "excluded": list(cfg.exclude),
        "global_excluding": global_metrics(rows, cfg.exclude),
    }
    out = Path(cfg.output_dir)
    write_text(out / "sweep.csv", reports_csv(rows))
    write_text(out / "sweep_summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if figures:
        from .plotting import plot_sweep

        plot_sweep(rows, out / "sweep.png")
    timings = {rid: results[rid][2] for rid in records}
    timings["total"] = time.perf_counter() - t0
    warns = [w for rid in records for w in results[rid][1]]
    write_manifest(out / "manifest_sweep.json", cfg, "sweep", timings, warns)
    return summary


def weighting_ablation(cfg: PipelineConfig, record_id: str, symbol: str,
                       weights: Optional[ReservoirWeights] = None) -> dict:
    """Test F1 of ``symbol`` with robust weighting vs. plain ridge at the CV-selected regularization.

    The weighted variant uses the CV choice when it is weighted, otherwise
    the published ratio for that class (or a/s = 2).
    """
    weights = weights or reservoir_for(cfg)
    record = prepare(cfg, record_id)
    plan = next(p for p in split_plans(cfg, record_id) if symbol in [t.symbol for t in p.targets])
    target = next(t for t in plan.targets if t.symbol == symbol)
    slot = ce.harvest_slot(record, *plan.split.train, weights, plan.class_order, cfg.window_policy)
    choices = ce.kfold_cv(slot, cv_plan(cfg, plan)).choices
    robust = choices[symbol].robust or ro.RobustConfig(target.ratio or 2.0, 1.0)
    out = {}
    for name, rob in (("plain", None), ("weighted", robust)):
        variant = {c: replace(ch, robust=rob) for c, ch in choices.items()}
        W_out, rows = ce.fit_rows(slot, variant)
        model = ce.TrainedModel(W_out, rows, plan.class_order, None, slot.final_state)
        rep = next(r for r in ce.evaluate_record(record, plan.split, weights, model, [symbol],
                                                 cfg.window_policy, cfg.cv.beat_rule))
        out[name] = rep.as_row()
        logger.info("ablation %s %s %s: gamma=%g F1=%.4f", record_id, symbol, name,
                    choices[symbol].gamma, rep.metrics.f1)
    return out


# ---------------------------------------------------------------------------
# activation export
# ---------------------------------------------------------------------------

N_TRACED_NEURONS = 4


def traced_neurons(seed: int, size: int, count: int = N_TRACED_NEURONS) -> List[int]:
    rng = np.random.default_rng([seed, 4])
    return sorted(int(i) for i in rng.choice(size, size=count, replace=False))


def activations_csv(time_s, u, neurons, neuron_ids, outputs, labels) -> str:
    cols = ["time_s", "u"] + [f"x_{i}" for i in neuron_ids] + [f"y_{c}" for c in labels]
    buf = io.StringIO()
    buf.write(",".join(cols) + "\n")
    if len(time_s):
        table = np.column_stack([time_s, u, *neurons, *outputs])
        np.savetxt(buf, table, fmt="%.9g", delimiter=",")
    return buf.getvalue()


def export_activations(cfg: PipelineConfig, record_id: str, start: float, duration: float,
                       model_path=None, figures: bool = True) -> Path:
    """CSV of input, seeded-random neuron traces and raw readout outputs over ``[start, start+duration)``."""
    path = model_dirs(cfg, record_id, model_path)[0]
    model, weights, _, _ = load_model(path)
    ids = traced_neurons(cfg.seed, weights.size)
    labels = list(model.class_order)
    out = record_dir(cfg, record_id)
    csv_path = out / f"activations_{start:g}s_{duration:g}s.csv"
    if duration <= 0:
        write_text(csv_path, activations_csv([], [], [], ids, [], labels))
        return csv_path
    record = prepare(cfg, record_id)
    slot = ce.harvest_slot(record, start, start + duration, weights, model.class_order, cfg.window_policy)
    Z = slot.Z
    t = start + np.arange(Z.shape[1]) * slot.dt
    y = model.W_out @ Z
    neurons = Z[ids]
    write_text(csv_path, activations_csv(t, Z[-1], neurons, ids, y, labels))
    if figures:
        from .plotting import plot_activations

        plot_activations(t, Z[-1], neurons, ids, y, labels, csv_path.with_suffix(".png"),
                         title=f"record {record_id}")
    return csv_path
