"""
Beat decisions, per-class metrics and the per-record training/evaluation harness.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import readout as ro
from .preprocessing import (
    BeatSegment,
    ConfigurationError,
    build_targets,
    relabel,
    segment_beats,
    select_time_slot,
)
from .reservoir import ReservoirWeights, harvest

logger = logging.getLogger(__name__)

REST = "N"


# ---------------------------------------------------------------------------
# decisions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecisionConfig:
    tau: Union[float, Sequence[float]]
    class_order: Tuple[str, ...]
    beat_rule: str = "modal"  # or "mass"


@dataclass(frozen=True)
class BeatDecision:
    fiducial_sample: int
    true_label: str
    predicted_label: str


def smooth_outputs(y: np.ndarray, tau, dt: float) -> np.ndarray:
    """Time-average each output row over its centered ``tau`` window."""
    y = np.asarray(y, dtype=float)
    if np.ndim(tau) == 0:
        return ro.moving_average(y, ro.half_width(float(tau), dt), axis=1)
    taus = list(tau)
    if len(taus) != y.shape[0]:
        raise ValueError(f"{len(taus)} windows for {y.shape[0]} output rows")
    out = np.empty_like(y)
    for j, t in enumerate(taus):
        out[j] = ro.moving_average(y[j:j + 1], ro.half_width(float(t), dt), axis=1)[0]
    return out


def _argmax_rows(ys: np.ndarray) -> np.ndarray:
    pred = np.argmax(ys, axis=0)
    if ys.shape[0] > 1:
        top = np.take_along_axis(ys, pred[None, :], axis=0)[0]
        ties = int(np.count_nonzero((ys == top).sum(axis=0) > 1))
        if ties:
            logger.info("argmax ties at %d sample(s); lower class index chosen", ties)
    return pred


def predict_labels(y: np.ndarray, config: DecisionConfig, dt: float) -> np.ndarray:
    """Per-sample class index: argmax over rows of the time-averaged outputs."""
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("non-finite readout outputs")
    return _argmax_rows(smooth_outputs(y, config.tau, dt))


def beat_majority_label(predictions: np.ndarray, segments: Sequence[BeatSegment],
                        class_order: Sequence[str], y_smoothed: Optional[np.ndarray] = None,
                        rule: str = "modal", offset: int = 0) -> List[BeatDecision]:
    """Label each beat by the dominant per-sample prediction over its segment.

    ``rule="modal"`` takes the most frequent class, breaking ties by the
    larger summed output over the segment; ``rule="mass"`` uses the summed
    output alone. ``offset`` is the sample index of ``predictions[0]``.
    """
    if rule not in ("modal", "mass"):
        raise ValueError(f"unknown beat rule {rule!r}")
    k = len(class_order)
    n = len(predictions)
    out = []
    for seg in segments:
        lo, hi = seg.start_sample - offset, seg.end_sample - offset
        if lo < 0 or hi > n or hi <= lo:
            raise IndexError(f"segment [{seg.start_sample}, {seg.end_sample}) outside predictions")
        mass = y_smoothed[:, lo:hi].sum(axis=1) if y_smoothed is not None else None
        if rule == "mass":
            if mass is None:
                raise ValueError("mass rule needs the smoothed outputs")
            j = int(np.argmax(mass))
        else:
            votes = np.bincount(predictions[lo:hi], minlength=k)
            best = np.flatnonzero(votes == votes.max())
            if len(best) > 1 and mass is not None:
                j = int(best[np.argmax(mass[best])])
            else:
                j = int(best[0])
        out.append(BeatDecision(seg.fiducial_sample, seg.class_label, class_order[j]))
    return out


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(decisions: Iterable[BeatDecision], class_order: Sequence[str]) -> Dict[str, ConfusionCounts]:
    """One-vs-rest counts for every class in ``class_order``."""
    decisions = list(decisions)
    out = {}
    for c in class_order:
        tp = sum(1 for d in decisions if d.true_label == c and d.predicted_label == c)
        fp = sum(1 for d in decisions if d.true_label != c and d.predicted_label == c)
        fn = sum(1 for d in decisions if d.true_label == c and d.predicted_label != c)
        out[c] = ConfusionCounts(tp, fp, len(decisions) - tp - fp - fn, fn)
    return out


@dataclass(frozen=True)
class Metrics:
    acc: float
    se: float
    p: float
    f1: float

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.acc, self.se, self.p, self.f1)


def _ratio(num: int, den: int) -> float:
    return num / den if den else math.nan


def compute_metrics(counts: ConfusionCounts) -> Metrics:
    """Accuracy, sensitivity, precision and F1; NaN marks an undefined value."""
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    m = Metrics(
        acc=_ratio(tp + tn, tp + fp + tn + fn),
        se=_ratio(tp, tp + fn),
        p=_ratio(tp, tp + fp),
        f1=_ratio(2 * tp, 2 * tp + fp + fn),
    )
    if any(math.isnan(v) for v in m.as_tuple()):
        logger.warning("undefined metric(s) for counts %s", counts)
    return m


# ---------------------------------------------------------------------------
# training slots
# ---------------------------------------------------------------------------

@dataclass
class HarvestedSlot:
    """Reservoir states over one time slot with its beat segments.

    ``Z`` is (features x samples) and column 0 is slot sample 0.
    """

    Z: np.ndarray
    segments: List[BeatSegment]
    class_order: Tuple[str, ...]
    dt: float
    final_state: Optional[np.ndarray] = None

    @property
    def num_samples(self) -> int:
        return self.Z.shape[1]

    def targets(self) -> np.ndarray:
        return build_targets(self.segments, self.class_order, self.num_samples).values


def harvest_slot(record, start: float, end: float, weights: ReservoirWeights, class_order: Sequence[str],
                 window_policy=None, x0: Optional[np.ndarray] = None, rest: str = REST) -> HarvestedSlot:
    """Harvest states over ``[start, end)`` s of a (filtered) record.

    Without ``x0`` the reservoir is warmed up on the samples preceding the
    slot (up to the configured washout); with ``x0`` it continues from
    that state with no warm-up.
    """
    params = weights.params
    slot = select_time_slot(record, start, end, window_policy)
    segs = relabel(segment_beats(slot, window_policy), class_order, rest)
    fs = record.fs
    i0 = int(round(start * fs))
    i1 = i0 + slot.num_samples
    lead = record.lead_ii.samples
    if x0 is None:
        pre = min(params.washout, i0)
        if pre < params.washout:
            logger.warning("slot at %.1f s: only %d warm-up samples available", start, pre)
        traj = harvest(weights, params, lead[i0 - pre:i1], washout=pre, sampling_period=1 / fs)
    else:
        traj = harvest(weights, params, lead[i0:i1], washout=0, x0=x0, sampling_period=1 / fs)
    return HarvestedSlot(traj.Z, segs, tuple(class_order), 1.0 / fs, traj.final_state)


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CvPlan:
    num_folds: int = 5
    gammas: Tuple[float, ...] = (1e-6, 1e-5, 1e-4, 1e-3)
    weightings: Tuple[Optional[ro.RobustConfig], ...] = (None, ro.RobustConfig(1.5), ro.RobustConfig(2.5))
    taus: Tuple[float, ...] = (0.5, 0.8, 1.0)
    beat_rule: str = "modal"

    def __post_init__(self):
        if self.num_folds < 2:
            raise ValueError("need at least two folds")
        if not (self.gammas and self.weightings and self.taus):
            raise ValueError("every grid axis needs at least one value")


@dataclass(frozen=True)
class ClassChoice:
    label: str
    gamma: float
    robust: Optional[ro.RobustConfig]
    tau: float
    cv_f1: float = math.nan

    def row_config(self) -> ro.RowConfig:
        a = self.robust.a if self.robust else None
        s = self.robust.s if self.robust else None
        return ro.RowConfig(self.label, self.gamma, a, s, self.tau)


@dataclass
class CvResult:
    choices: Dict[str, ClassChoice]
    table: List[dict] = field(default_factory=list)


def fold_bounds(num_samples: int, num_folds: int) -> List[Tuple[int, int]]:
    edges = [round(k * num_samples / num_folds) for k in range(num_folds + 1)]
    return list(zip(edges[:-1], edges[1:]))


def _weighting_key(w: Optional[ro.RobustConfig]) -> Tuple[int, float, float]:
    return (0, 0.0, 0.0) if w is None else (1, w.ratio, w.a)


def _decide(W: np.ndarray, Za: np.ndarray, segments: Sequence[BeatSegment], class_order, rule) -> List[BeatDecision]:
    if not segments:
        return []
    lo = min(s.start_sample for s in segments)
    hi = max(s.end_sample for s in segments)
    y = W @ Za[:, lo:hi]
    pred = _argmax_rows(y)
    return beat_majority_label(pred, segments, class_order, y, rule, offset=lo)


def kfold_cv(slot: HarvestedSlot, plan: CvPlan) -> CvResult:
    """Per-class hyperparameter search over contiguous time-block folds.

    Every grid point trains all output rows jointly on the states averaged
    with that point's window, then scores each class by its mean validation
    F1 over the folds where it occurs. Each class keeps its own best point;
    ties go to the smaller regularization, then the shorter window.
    """
    classes = slot.class_order
    counts = {c: sum(1 for s in slot.segments if s.class_label == c) for c in classes}
    short = [c for c, n in counts.items() if n < plan.num_folds]
    if short:
        raise ConfigurationError(f"classes with fewer than {plan.num_folds} training beats: {short}")

    Y = slot.targets()
    bounds = fold_bounds(slot.num_samples, plan.num_folds)
    val_segments = [[s for s in slot.segments if lo <= s.fiducial_sample < hi] for lo, hi in bounds]
    scores: Dict[tuple, Dict[str, List[float]]] = {}

    for tau in plan.taus:
        Za = ro.time_average_states(slot.Z, tau, slot.dt)
        blocks = [(Za[:, lo:hi], Y[:, lo:hi]) for lo, hi in bounds]
        G_blk = [ro.gram(z) for z, _ in blocks]
        B_blk = [ro.cross(y, z) for z, y in blocks]
        for k in range(plan.num_folds):
            others = [b for b in range(plan.num_folds) if b != k]
            G = sum(G_blk[b] for b in others)
            B = sum(B_blk[b] for b in others)
            present = {s.class_label for s in val_segments[k]}
            for c in classes:
                if c not in present:
                    logger.warning("class %s absent from validation fold %d; fold skipped for it", c, k)
            for gamma in plan.gammas:
                W0 = ro.solve_normal(G, B, gamma)
                for weighting in plan.weightings:
                    if weighting is None:
                        W = W0
                    else:
                        W = W0
                        for _ in range(weighting.max_irls_rounds):
                            Gw = np.zeros_like(G)
                            Bw = np.zeros_like(B)
                            for b in others:
                                z, y = blocks[b]
                                v = ro.robust_weights(y - W @ z, weighting.a, weighting.s)
                                Gw += ro.gram(z, v)
                                Bw += ro.cross(y, z, v)
                            W = ro.solve_normal(Gw, Bw, gamma)
                    dec = _decide(W, Za, val_segments[k], classes, plan.beat_rule)
                    conf = confusion(dec, classes)
                    key = (gamma, weighting, tau)
                    per = scores.setdefault(key, {c: [] for c in classes})
                    for c in classes:
                        if c in present:
                            cc = conf[c]
                            per[c].append(_ratio(2 * cc.tp, 2 * cc.tp + cc.fp + cc.fn))
        del Za, blocks

    table = []
    choices: Dict[str, ClassChoice] = {}
    for c in classes:
        best = None
        for (gamma, weighting, tau), per in scores.items():
            vals = per[c]
            if not vals:
                continue
            mean_f1 = float(np.mean(vals))
            table.append({"class": c, "gamma": gamma,
                          "weighting": "no weights" if weighting is None else f"{weighting.ratio:g}",
                          "a": None if weighting is None else weighting.a,
                          "s": None if weighting is None else weighting.s,
                          "tau": tau, "mean_f1": mean_f1, "folds": len(vals)})
            rank = (-mean_f1, gamma, tau, _weighting_key(weighting))
            if best is None or rank < best[0]:
                best = (rank, ClassChoice(c, gamma, weighting, tau, mean_f1))
        if best is None:
            raise ConfigurationError(f"class {c!r} absent from every validation fold")
        choices[c] = best[1]
    return CvResult(choices, table)


# ---------------------------------------------------------------------------
# final fit and evaluation
# ---------------------------------------------------------------------------

def fit_rows(slot: HarvestedSlot, choices: Mapping[str, ClassChoice]) -> Tuple[np.ndarray, List[ro.RowConfig]]:
    """Train every output row with its class's hyperparameters and stack the rows."""
    classes = slot.class_order
    Y = slot.targets()
    W_out = np.zeros((len(classes), slot.Z.shape[0]))
    by_tau: Dict[float, List[int]] = {}
    for j, c in enumerate(classes):
        by_tau.setdefault(choices[c].tau, []).append(j)
    for tau in sorted(by_tau):
        Za = ro.time_average_states(slot.Z, tau, slot.dt)
        G = ro.gram(Za)
        B = ro.cross(Y, Za)
        fits: Dict[tuple, np.ndarray] = {}
        for j in by_tau[tau]:
            ch = choices[classes[j]]
            key = (ch.gamma, ch.robust)
            if key not in fits:
                W = ro.solve_normal(G, B, ch.gamma)
                if ch.robust is not None:
                    for _ in range(ch.robust.max_irls_rounds):
                        v = ro.robust_weights(Y - W @ Za, ch.robust.a, ch.robust.s)
                        W = ro.solve_normal(ro.gram(Za, v), ro.cross(Y, Za, v), ch.gamma)
                    _log_weight_balance(v, Y, classes)
                fits[key] = W
            W_out[j] = fits[key][j]
        del Za
    return W_out, [choices[c].row_config() for c in classes]


def _log_weight_balance(v: np.ndarray, Y: np.ndarray, classes: Sequence[str]) -> None:
    # whether reweighting favours minority beats depends on the initial fit; record it
    parts = []
    for j, c in enumerate(classes):
        mask = Y[j] > 0
        if mask.any():
            parts.append(f"{c}={v[mask].mean():.4f}")
    logger.info("mean robust weight per class: %s", ", ".join(parts))


@dataclass(frozen=True)
class Split:
    train: Tuple[float, float]
    test: Tuple[float, float]

    @classmethod
    def preceding(cls, test: Tuple[float, float], train_length: float) -> "Split":
        """Train on the ``train_length`` seconds just before ``test``."""
        start = max(0.0, test[0] - train_length)
        return cls((start, test[0]), tuple(test))


@dataclass
class MetricsReport:
    record: str
    label: str
    test_slot: Tuple[float, float]
    n_beats: int
    n_class_beats: int
    gamma: float
    weighting: str
    tau: float
    counts: ConfusionCounts
    metrics: Metrics

    def as_row(self) -> dict:
        m = self.metrics
        return {
            "record": self.record,
            "class": self.label,
            "slot_min": f"[{self.test_slot[0] / 60:g},{self.test_slot[1] / 60:g}]",
            "n_beats": self.n_beats,
            "n_class_beats": self.n_class_beats,
            "gamma": self.gamma,
            "weighting": self.weighting,
            "tau": self.tau,
            "tp": self.counts.tp, "fp": self.counts.fp, "tn": self.counts.tn, "fn": self.counts.fn,
            "acc": m.acc, "se": m.se, "p": m.p, "f1": m.f1,
        }


@dataclass
class TrainedModel:
    W_out: np.ndarray
    rows: List[ro.RowConfig]
    class_order: Tuple[str, ...]
    cv: Optional[CvResult] = None
    final_state: Optional[np.ndarray] = None

    @property
    def taus(self) -> List[float]:
        return [r.tau for r in self.rows]


def train_record(record, split: Split, weights: ReservoirWeights, class_order: Sequence[str],
                 plan: Optional[CvPlan] = None, fixed: Optional[Mapping[str, ClassChoice]] = None,
                 window_policy=None) -> TrainedModel:
    """Cross-validate (unless ``fixed`` choices are given) and fit on the training slot."""
    slot = harvest_slot(record, *split.train, weights, class_order, window_policy)
    cv = None
    if fixed is None:
        cv = kfold_cv(slot, plan or CvPlan())
        choices = cv.choices
    else:
        choices = dict(fixed)
    for c in class_order:
        if c not in choices:
            raise ConfigurationError(f"no hyperparameters for class {c!r}")
    W_out, rows = fit_rows(slot, choices)
    return TrainedModel(W_out, rows, tuple(class_order), cv, slot.final_state)


def harvest_test_outputs(record, split: Split, weights: ReservoirWeights, model: TrainedModel,
                 window_policy=None) -> Tuple[HarvestedSlot, np.ndarray]:
    x0 = model.final_state if split.test[0] == split.train[1] else None
    slot = harvest_slot(record, *split.test, weights, model.class_order, window_policy, x0=x0)
    return slot, model.W_out @ slot.Z


def evaluate_record(record, split: Split, weights: ReservoirWeights, model: TrainedModel,
                    targets: Optional[Sequence[str]] = None, window_policy=None,
                    beat_rule: str = "modal") -> List[MetricsReport]:
    """Score ``model`` on the test slot; one report per target (pathological) class."""
    slot, y = harvest_test_outputs(record, split, weights, model, window_policy)
    ys = smooth_outputs(y, model.taus, slot.dt)
    pred = _argmax_rows(ys)
    decisions = beat_majority_label(pred, slot.segments, model.class_order, ys, beat_rule)
    conf = confusion(decisions, model.class_order)
    targets = [c for c in model.class_order if c != REST] if targets is None else list(targets)
    reports = []
    for c in targets:
        j = model.class_order.index(c)
        row = model.rows[j]
        n_class = conf[c].tp + conf[c].fn
        if n_class == 0:
            logger.warning("record %s: no %s beats in the test slot", record.name, c)
        reports.append(MetricsReport(
            record=record.name, label=c, test_slot=tuple(split.test), n_beats=len(decisions),
            n_class_beats=n_class, gamma=row.gamma, weighting=row.weighting, tau=row.tau,
            counts=conf[c], metrics=compute_metrics(conf[c]),
        ))
    return reports
