"""
ECG conditioning and beat labelling.

Band-pass filtering, time-slot cropping, segmentation of annotated beats
into rectangular windows and construction of the binary target signals
used to train the readout.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import signal as sps

from .wfdb_ingest import AnnotatedRecord, BeatAnnotation, SignalBuffer

logger = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class FilterSpec:
    order: int = 3
    low_cutoff: float = 0.4
    high_cutoff: float = 45.0
    sampling_frequency: float = 360.0

    def validate(self) -> None:
        if self.order < 1:
            raise ValueError(f"filter order must be positive, got {self.order}")
        nyq = self.sampling_frequency / 2.0
        if not 0 < self.low_cutoff < self.high_cutoff < nyq:
            raise ValueError(
                f"cutoffs must satisfy 0 < {self.low_cutoff} < {self.high_cutoff} < {nyq}"
            )


@dataclass(frozen=True)
class SecondOrderSection:
    b: Tuple[float, float, float]
    a: Tuple[float, float, float]

    def poles(self) -> np.ndarray:
        return np.roots(self.a)

    def response(self, w: np.ndarray) -> np.ndarray:
        zi = np.exp(-1j * np.asarray(w))
        num = self.b[0] + self.b[1] * zi + self.b[2] * zi * zi
        den = self.a[0] + self.a[1] * zi + self.a[2] * zi * zi
        return num / den


@dataclass(frozen=True)
class IirCascade:
    sections: Tuple[SecondOrderSection, ...]

    def frequency_response(self, freqs_hz, fs: float) -> np.ndarray:
        w = 2 * np.pi * np.asarray(freqs_hz, dtype=float) / fs
        h = np.ones_like(w, dtype=complex)
        for sec in self.sections:
            h *= sec.response(w)
        return h

    def poles(self) -> np.ndarray:
        return np.concatenate([s.poles() for s in self.sections])

    def as_sos(self) -> np.ndarray:
        return np.array([list(s.b) + list(s.a) for s in self.sections])


def _pair_poles(poles: np.ndarray) -> List[Tuple[complex, complex]]:
    """Group digital poles into conjugate or real pairs, by ascending magnitude."""
    poles = list(poles)
    complex_p = sorted([p for p in poles if p.imag > 1e-12], key=abs)
    real_p = sorted([p.real for p in poles if abs(p.imag) <= 1e-12], key=abs)
    pairs = [(p, np.conj(p)) for p in complex_p]
    if len(real_p) % 2:
        real_p.append(None)
    pairs += [(real_p[i], real_p[i + 1]) for i in range(0, len(real_p), 2)]
    return sorted(pairs, key=lambda pr: max(abs(x) for x in pr if x is not None))


def design_butterworth_bandpass(spec: FilterSpec) -> IirCascade:
    """Design a digital Butterworth band-pass as a cascade of biquads.

    The analog low-pass prototype is mapped to a band-pass around the
    pre-warped edges and discretised with the bilinear transform, so the
    -3 dB points land exactly on the requested cutoffs.
    """
    spec.validate()
    n = spec.order
    fs = spec.sampling_frequency
    fs2 = 2.0 * fs
    w_lo = fs2 * np.tan(np.pi * spec.low_cutoff / fs)
    w_hi = fs2 * np.tan(np.pi * spec.high_cutoff / fs)
    bw = w_hi - w_lo
    w0sq = w_lo * w_hi

    k = np.arange(1, n + 1)
    proto = np.exp(1j * np.pi * (2 * k + n - 1) / (2 * n))

    # s -> (s^2 + w0^2) / (s bw): each prototype pole splits into two
    analog = []
    for p in proto:
        pb = p * bw
        disc = np.sqrt(pb * pb - 4 * w0sq + 0j)
        analog.extend([(pb + disc) / 2, (pb - disc) / 2])
    analog = np.array(analog)
    gain = bw**n  # n zeros at s=0, n at infinity

    digital = (fs2 + analog) / (fs2 - analog)
    gain = gain * np.real(np.prod(fs2 - np.zeros(n)) / np.prod(fs2 - analog))

    sections = []
    for p1, p2 in _pair_poles(digital):
        if p2 is None:
            a = (1.0, -float(np.real(p1)), 0.0)
            b = (1.0, -1.0, 0.0)
        else:
            a = (1.0, -float(np.real(p1 + p2)), float(np.real(p1 * p2)))
            # one zero at DC and one at Nyquist per section
            b = (1.0, 0.0, -1.0)
        sections.append([list(b), a])
    sections[0][0] = [gain * c for c in sections[0][0]]
    return IirCascade(tuple(SecondOrderSection(tuple(b), tuple(a)) for b, a in sections))


def _filter_array(cascade: IirCascade, x: np.ndarray) -> np.ndarray:
    y = np.asarray(x, dtype=np.float64)
    for sec in cascade.sections:
        y = sps.lfilter(sec.b, sec.a, y)
    return y


def apply_filter(cascade: IirCascade, signal: SignalBuffer) -> SignalBuffer:
    """Run the cascade causally over ``signal`` from a zero initial state."""
    if len(signal) == 0:
        raise ValueError("cannot filter an empty signal")
    y = _filter_array(cascade, signal.samples)
    return SignalBuffer(y, signal.channel_name, signal.sampling_period)


def filter_record(record: AnnotatedRecord, spec: Optional[FilterSpec] = None) -> AnnotatedRecord:
    spec = spec or FilterSpec(sampling_frequency=record.fs)
    if spec.sampling_frequency != record.fs:
        spec = replace(spec, sampling_frequency=record.fs)
    cascade = design_butterworth_bandpass(spec)
    signals = tuple(apply_filter(cascade, s) for s in record.signals)
    return AnnotatedRecord(record.header, signals, record.annotations)


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------

NARROW_WINDOW = (0.25, 0.40)
WIDE_WINDOW = (0.30, 0.50)
WIDE_CLASSES = frozenset("VLR!EFfr")


def default_window_policy() -> Dict[str, Tuple[float, float]]:
    """Per-class (pre, post) fiducial window lengths in seconds."""
    from .wfdb_ingest import BEAT_SYMBOLS

    return {
        code: (WIDE_WINDOW if code in WIDE_CLASSES else NARROW_WINDOW)
        for code in sorted(BEAT_SYMBOLS)
    }


@dataclass(frozen=True)
class BeatSegment:
    start_sample: int
    end_sample: int
    fiducial_sample: int
    class_label: str

    def __len__(self) -> int:
        return self.end_sample - self.start_sample


def _window(policy: Mapping[str, Tuple[float, float]], code: str, fs: float) -> Tuple[int, int]:
    try:
        pre, post = policy[code]
    except KeyError:
        raise ConfigurationError(f"no window policy for beat class {code!r}") from None
    return int(round(pre * fs)), int(round(post * fs))


def select_time_slot(
    record: AnnotatedRecord,
    start: float,
    end: float,
    window_policy: Optional[Mapping[str, Tuple[float, float]]] = None,
) -> AnnotatedRecord:
    """Crop ``record`` to ``[start, end)`` seconds.

    Annotation indices are rebased to the slot start. Beats whose window
    (under ``window_policy``) would cross a slot edge are dropped.
    """
    duration = record.duration
    if not (0 <= start < end <= duration + 1e-9):
        raise ValueError(f"slot [{start}, {end}) s outside record of {duration:.3f} s")
    fs = record.fs
    i0 = int(round(start * fs))
    i1 = min(int(round(end * fs)), record.num_samples)
    policy = window_policy if window_policy is not None else default_window_policy()

    kept = []
    for ann in record.annotations:
        if not i0 <= ann.sample_index < i1:
            continue
        pre, post = _window(policy, ann.beat_code, fs)
        if ann.sample_index - pre < i0 or ann.sample_index + post > i1:
            continue
        kept.append(BeatAnnotation(ann.sample_index - i0, ann.beat_code, ann.channel))
    signals = tuple(
        SignalBuffer(s.samples[i0:i1], s.channel_name, s.sampling_period) for s in record.signals
    )
    header = replace(record.header, num_samples=i1 - i0)
    return AnnotatedRecord(header, signals, tuple(kept))


def segment_beats(
    record: AnnotatedRecord,
    window_policy: Optional[Mapping[str, Tuple[float, float]]] = None,
) -> List[BeatSegment]:
    """One rectangular segment per annotated beat.

    Overlapping neighbours share a boundary at the midpoint between their
    fiducial samples.
    """
    policy = window_policy if window_policy is not None else default_window_policy()
    fs = record.fs
    n = record.num_samples
    raw = []
    for ann in record.annotations:
        pre, post = _window(policy, ann.beat_code, fs)
        raw.append([max(0, ann.sample_index - pre), min(n, ann.sample_index + post),
                    ann.sample_index, ann.beat_code])
    for prev, cur in zip(raw, raw[1:]):
        if prev[1] > cur[0]:
            mid = (prev[2] + cur[2] + 1) // 2
            prev[1] = mid
            cur[0] = mid
    return [BeatSegment(int(s), int(e), int(f), c) for s, e, f, c in raw]


def relabel(segments: Iterable[BeatSegment], class_order: Sequence[str], rest: str) -> List[BeatSegment]:
    """Map labels outside ``class_order`` onto the ``rest`` class."""
    known = set(class_order)
    return [s if s.class_label in known else replace(s, class_label=rest) for s in segments]


@dataclass(frozen=True)
class TargetMatrix:
    values: np.ndarray
    class_order: Tuple[str, ...]


def build_targets(segments: Sequence[BeatSegment], class_order: Sequence[str], num_samples: int) -> TargetMatrix:
    index = {c: j for j, c in enumerate(class_order)}
    Y = np.zeros((len(class_order), num_samples))
    for seg in segments:
        try:
            j = index[seg.class_label]
        except KeyError:
            raise ConfigurationError(
                f"segment class {seg.class_label!r} not in class order {list(class_order)}"
            ) from None
        Y[:, seg.start_sample:seg.end_sample] = 0.0
        Y[j, seg.start_sample:seg.end_sample] = 1.0
    return TargetMatrix(Y, tuple(class_order))


def segments_csv(segments: Sequence[BeatSegment]) -> str:
    rows = ["start,end,fiducial,class"]
    rows += [f"{s.start_sample},{s.end_sample},{s.fiducial_sample},{s.class_label}" for s in segments]
    return "\n".join(rows) + "\n"
