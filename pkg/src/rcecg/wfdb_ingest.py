"""
Readers for MIT-BIH arrhythmia records stored in WFDB files.

Supports the subset of the WFDB formats used by the MIT-BIH arrhythmia
database: text headers (``.hea``), format 212 signal files (``.dat``) and
MIT binary annotation files (``.atr``).
"""

from __future__ import annotations

import io
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_FS = 250.0
DEFAULT_GAIN = 200.0
MITDB_FS = 360.0

LEAD_II_NAMES = ("MLII", "II", "ML2", "LEAD II")

# MIT annotation type codes (WFDB ecgcodes.h)
ANNOTATION_SYMBOLS = {
    0: "NOTQRS", 1: "N", 2: "L", 3: "R", 4: "a", 5: "V", 6: "F", 7: "J",
    8: "A", 9: "S", 10: "E", 11: "j", 12: "/", 13: "Q", 14: "~", 16: "|",
    18: "s", 19: "T", 20: "*", 21: "D", 22: '"', 23: "=", 24: "p", 25: "B",
    26: "^", 27: "t", 28: "+", 29: "u", 30: "?", 31: "!", 32: "[", 33: "]",
    34: "e", 35: "n", 36: "@", 37: "x", 38: "f", 39: "(", 40: ")", 41: "r",
}
SYMBOL_CODES = {sym: code for code, sym in ANNOTATION_SYMBOLS.items()}
BEAT_SYMBOLS = frozenset("NLRaVFJASEj/Q!enfBr")

SKIP, NUM, SUB, CHN, AUX = 59, 60, 61, 62, 63


class WfdbError(ValueError):
    """Raised for malformed WFDB input."""


class HeaderParseError(WfdbError):
    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class UnsupportedFormatError(WfdbError):
    def __init__(self, fmt):
        self.format_code = fmt
        super().__init__(f"unsupported WFDB storage format {fmt!r} (only 212 is supported)")


class AnnotationParseError(WfdbError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"byte offset {offset}: {message}")


class IntegrityError(WfdbError):
    """Header and signal file disagree."""


@dataclass(frozen=True)
class SignalSpec:
    file_name: str
    storage_format: int
    adc_gain: float
    baseline: int
    units: str
    adc_resolution: int
    adc_zero: int
    initial_value: Optional[int]
    checksum: Optional[int]
    block_size: int
    description: str


@dataclass(frozen=True)
class RecordHeader:
    record_name: str
    num_signals: int
    sampling_frequency: float
    num_samples: Optional[int]
    signals: Tuple[SignalSpec, ...]
    fs_defaulted: bool = False


@dataclass(frozen=True)
class SignalBuffer:
    samples: np.ndarray
    channel_name: str
    sampling_period: float

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def fs(self) -> float:
        return 1.0 / self.sampling_period


@dataclass(frozen=True)
class BeatAnnotation:
    sample_index: int
    beat_code: str
    channel: int = 0


@dataclass(frozen=True)
class AnnotatedRecord:
    header: RecordHeader
    signals: Tuple[SignalBuffer, ...]
    annotations: Tuple[BeatAnnotation, ...]

    @property
    def name(self) -> str:
        return self.header.record_name

    @property
    def fs(self) -> float:
        return self.header.sampling_frequency

    @property
    def num_samples(self) -> int:
        return len(self.signals[0]) if self.signals else 0

    @property
    def duration(self) -> float:
        return self.num_samples / self.fs

    @property
    def lead_ii_index(self) -> int:
        for i, sig in enumerate(self.signals):
            if sig.channel_name.strip().upper() in LEAD_II_NAMES:
                return i
        return 0

    def channel(self, name: str) -> SignalBuffer:
        for sig in self.signals:
            if sig.channel_name == name:
                return sig
        available = ", ".join(s.channel_name for s in self.signals)
        raise KeyError(f"unknown channel {name!r}; available channels: {available}")

    @property
    def lead_ii(self) -> SignalBuffer:
        return self.signals[self.lead_ii_index]

    def beat_counts(self) -> dict:
        counts: dict = {}
        for ann in self.annotations:
            counts[ann.beat_code] = counts.get(ann.beat_code, 0) + 1
        return dict(sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])))


# ---------------------------------------------------------------------------
# header
# ---------------------------------------------------------------------------

def _parse_int(token: str, what: str, line_number: int) -> int:
    try:
        return int(token)
    except ValueError:
        raise HeaderParseError(f"invalid {what} {token!r}", line_number) from None


def _parse_signal_line(tokens: Sequence[str], line_number: int) -> SignalSpec:
    if len(tokens) < 2:
        raise HeaderParseError("signal line needs at least file name and format", line_number)
    file_name = tokens[0]
    fmt_token = tokens[1]
    digits = ""
    for ch in fmt_token:
        if not ch.isdigit():
            break
        digits += ch
    if not digits:
        raise HeaderParseError(f"invalid storage format {fmt_token!r}", line_number)
    fmt = int(digits)
    if fmt != 212 or digits != fmt_token:
        raise UnsupportedFormatError(fmt_token)

    gain, baseline, units = DEFAULT_GAIN, None, "mV"
    if len(tokens) > 2:
        g = tokens[2]
        if "/" in g:
            g, units = g.split("/", 1)
        if "(" in g:
            g, rest = g.split("(", 1)
            baseline = _parse_int(rest.rstrip(")"), "baseline", line_number)
        try:
            gain = float(g)
        except ValueError:
            raise HeaderParseError(f"invalid gain {tokens[2]!r}", line_number) from None
        if gain == 0:
            gain = DEFAULT_GAIN
        if gain < 0:
            raise HeaderParseError(f"adc gain must be positive, got {gain}", line_number)
    adc_res = _parse_int(tokens[3], "adc resolution", line_number) if len(tokens) > 3 else 12
    adc_zero = _parse_int(tokens[4], "adc zero", line_number) if len(tokens) > 4 else 0
    init = _parse_int(tokens[5], "initial value", line_number) if len(tokens) > 5 else None
    checksum = _parse_int(tokens[6], "checksum", line_number) if len(tokens) > 6 else None
    block = _parse_int(tokens[7], "block size", line_number) if len(tokens) > 7 else 0
    description = " ".join(tokens[8:]) if len(tokens) > 8 else ""
    return SignalSpec(
        file_name=file_name,
        storage_format=fmt,
        adc_gain=gain,
        baseline=adc_zero if baseline is None else baseline,
        units=units,
        adc_resolution=adc_res,
        adc_zero=adc_zero,
        initial_value=init,
        checksum=checksum,
        block_size=block,
        description=description,
    )


def parse_header(data) -> RecordHeader:
    """Parse the text of a WFDB ``.hea`` file.

    Parameters
    ----------
    data : bytes or str
        Header file content.

    Returns
    -------
    RecordHeader

    Raises
    ------
    HeaderParseError
        On malformed lines; the message carries the 1-based line number.
    UnsupportedFormatError
        When a signal uses a storage format other than 212.
    """
    text = data.decode("ascii", errors="replace") if isinstance(data, (bytes, bytearray)) else data
    lines = [
        (i, line.split("#", 1)[0].strip())
        for i, line in enumerate(text.splitlines(), start=1)
    ]
    lines = [(i, line) for i, line in lines if line]
    if not lines:
        raise HeaderParseError("empty header")

    line_number, record_line = lines[0]
    tokens = record_line.split()
    if len(tokens) < 2:
        raise HeaderParseError("record line needs at least name and signal count", line_number)
    name = tokens[0]
    if "/" in name:
        raise HeaderParseError("multi-segment records are not supported", line_number)
    num_signals = _parse_int(tokens[1], "number of signals", line_number)
    if num_signals < 1:
        raise HeaderParseError("record must contain at least one signal", line_number)

    fs_defaulted = len(tokens) < 3
    fs = DEFAULT_FS
    if not fs_defaulted:
        fs_token = tokens[2].split("/", 1)[0].split("(", 1)[0]
        try:
            fs = float(fs_token)
        except ValueError:
            raise HeaderParseError(f"invalid sampling frequency {tokens[2]!r}", line_number) from None
        if fs <= 0:
            raise HeaderParseError(f"sampling frequency must be positive, got {fs}", line_number)
    num_samples = _parse_int(tokens[3], "number of samples", line_number) if len(tokens) > 3 else None

    signal_lines = lines[1:]
    if len(signal_lines) < num_signals:
        raise HeaderParseError(
            f"expected {num_signals} signal lines, found {len(signal_lines)}",
            signal_lines[-1][0] if signal_lines else line_number,
        )
    signals = tuple(
        _parse_signal_line(line.split(), i) for i, line in signal_lines[:num_signals]
    )
    return RecordHeader(
        record_name=name,
        num_signals=num_signals,
        sampling_frequency=fs,
        num_samples=num_samples,
        signals=signals,
        fs_defaulted=fs_defaulted,
    )


# ---------------------------------------------------------------------------
# format 212
# ---------------------------------------------------------------------------

def decode_format212(data, num_signals: int = 2) -> List[np.ndarray]:
    """Unpack format 212 bytes into one int16 array per signal.

    Each 3-byte group holds two 12-bit two's-complement samples; samples
    are interleaved across signals in frame order.
    """
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    extra = len(buf) % 3
    if extra:
        logger.warning("format 212 stream has %d trailing byte(s); dropped", extra)
        buf = buf[: len(buf) - extra]
    triplets = buf.reshape(-1, 3).astype(np.int16)
    first = ((triplets[:, 1] & 0x0F) << 8) | triplets[:, 0]
    second = ((triplets[:, 1] & 0xF0) << 4) | triplets[:, 2]
    flat = np.empty(2 * len(triplets), dtype=np.int16)
    flat[0::2] = first
    flat[1::2] = second
    flat[flat > 2047] -= 4096
    nframes = len(flat) // num_signals
    if len(flat) % num_signals:
        flat = flat[: nframes * num_signals]
    frames = flat.reshape(nframes, num_signals)
    return [frames[:, k].copy() for k in range(num_signals)]


def _encode_format212(channels: Sequence[np.ndarray]) -> bytes:
    # test/fixture helper; inverse of decode_format212
    frames = np.column_stack([np.asarray(c, dtype=np.int64) for c in channels]).ravel()
    if len(frames) % 2:
        frames = np.append(frames, 0)
    if frames.min(initial=0) < -2048 or frames.max(initial=0) > 2047:
        raise ValueError("sample outside 12-bit range")
    u = frames & 0xFFF
    a, b = u[0::2], u[1::2]
    out = np.empty((len(a), 3), dtype=np.uint8)
    out[:, 0] = a & 0xFF
    out[:, 1] = ((a >> 8) & 0x0F) | ((b >> 4) & 0xF0)
    out[:, 2] = b & 0xFF
    return out.tobytes()


# ---------------------------------------------------------------------------
# annotations
# ---------------------------------------------------------------------------

def parse_annotations(data) -> List[BeatAnnotation]:
    """Decode an MIT-format annotation stream, keeping beat annotations only.

    Each annotation is a little-endian 16-bit word whose top six bits hold
    the type code and low ten bits the sample increment. SKIP, NUM, SUB,
    CHN and AUX pseudo-annotations modify the running state; a zero word
    terminates the stream.
    """
    buf = bytes(data)
    n = len(buf)
    pos = 0
    cursor = 0
    chan = 0
    out: List[BeatAnnotation] = []
    last_beat = False

    while True:
        if pos + 2 > n:
            raise AnnotationParseError("stream ended without end-of-file marker", pos)
        word = buf[pos] | (buf[pos + 1] << 8)
        code, value = word >> 10, word & 0x3FF
        if code == 0 and value == 0:
            break
        if code == SKIP:
            if pos + 6 > n:
                raise AnnotationParseError("truncated SKIP interval", pos)
            hi = buf[pos + 2] | (buf[pos + 3] << 8)
            lo = buf[pos + 4] | (buf[pos + 5] << 8)
            interval = (hi << 16) | lo
            if interval >= 1 << 31:
                interval -= 1 << 32
            cursor += interval
            pos += 6
            continue
        if code == AUX:
            end = pos + 2 + value + (value & 1)
            if end > n:
                raise AnnotationParseError("truncated AUX string", pos)
            pos = end
            continue
        if code == CHN:
            chan = value
            if last_beat:
                out[-1] = BeatAnnotation(out[-1].sample_index, out[-1].beat_code, chan)
            pos += 2
            continue
        if code in (NUM, SUB):
            pos += 2
            continue

        cursor += value
        pos += 2
        symbol = ANNOTATION_SYMBOLS.get(code)
        if symbol is None:
            logger.warning("unknown annotation type code %d at byte offset %d; skipped", code, pos - 2)
            last_beat = False
            continue
        if symbol in BEAT_SYMBOLS:
            out.append(BeatAnnotation(cursor, symbol, chan))
            last_beat = True
        else:
            last_beat = False
    return out


def _encode_annotations(entries: Sequence[Tuple[int, str]], aux: Optional[dict] = None) -> bytes:
    # fixture helper: entries are (sample, symbol) in nondecreasing sample order;
    # aux maps entry index -> text attached as an AUX field
    aux = aux or {}
    out = io.BytesIO()

    def word(code, value):
        out.write(int((code << 10) | (value & 0x3FF)).to_bytes(2, "little"))

    cursor = 0
    for i, (sample, symbol) in enumerate(entries):
        delta = sample - cursor
        if delta < 0:
            raise ValueError("annotation samples must be nondecreasing")
        if delta > 1023:
            word(SKIP, 0)
            out.write(int(delta >> 16).to_bytes(2, "little"))
            out.write(int(delta & 0xFFFF).to_bytes(2, "little"))
            delta = 0
        word(SYMBOL_CODES[symbol], delta)
        cursor = sample
        if i in aux:
            text = aux[i].encode("ascii")
            word(AUX, len(text))
            out.write(text + (b"\0" if len(text) % 2 else b""))
    word(0, 0)
    return out.getvalue()


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

def _read(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"missing WFDB file: {path}") from None


def _checksum16(raw: np.ndarray) -> int:
    total = int(raw.astype(np.int64).sum()) & 0xFFFF
    return total - 0x10000 if total >= 0x8000 else total


def load_record(path_stem, annotator: str = "atr") -> AnnotatedRecord:
    """Load ``<stem>.hea``, its format 212 data file and ``<stem>.<annotator>``.

    Raw ADC values are converted to millivolts with each signal's gain and
    baseline.
    """
    stem = Path(path_stem)
    header = parse_header(_read(stem.with_name(stem.name + ".hea")))
    if header.fs_defaulted:
        logger.warning("record %s: sampling frequency missing from header, using %g Hz",
                       header.record_name, header.sampling_frequency)
    elif header.sampling_frequency != MITDB_FS:
        logger.warning("record %s: sampling frequency %g Hz differs from the MIT-BIH %g Hz",
                       header.record_name, header.sampling_frequency, MITDB_FS)

    files = sorted({s.file_name for s in header.signals})
    if len(files) != 1:
        raise WfdbError("all signals must share one format 212 data file")
    raw = decode_format212(_read(stem.parent / files[0]), header.num_signals)

    num_samples = len(raw[0])
    if header.num_samples is not None and header.num_samples != num_samples:
        raise IntegrityError(
            f"record {header.record_name}: header declares {header.num_samples} samples, "
            f"data file holds {num_samples}"
        )
    dt = 1.0 / header.sampling_frequency
    signals = []
    for spec, adc in zip(header.signals, raw):
        if spec.checksum is not None and _checksum16(adc) != spec.checksum:
            raise IntegrityError(
                f"record {header.record_name}: checksum mismatch on {spec.description or spec.file_name}"
            )
        mv = (adc.astype(np.float64) - spec.baseline) / spec.adc_gain
        mv.flags.writeable = False
        signals.append(SignalBuffer(mv, spec.description, dt))

    annotations = parse_annotations(_read(stem.with_name(f"{stem.name}.{annotator}")))
    previous = -1
    for ann in annotations:
        if ann.sample_index <= previous:
            raise IntegrityError(
                f"record {header.record_name}: annotation indices not strictly increasing at {ann.sample_index}"
            )
        if ann.sample_index >= num_samples:
            raise IntegrityError(
                f"record {header.record_name}: annotation at {ann.sample_index} beyond {num_samples} samples"
            )
        previous = ann.sample_index
    return AnnotatedRecord(header, tuple(signals), tuple(annotations))


def to_adc(values: np.ndarray, spec: SignalSpec) -> np.ndarray:
    """Invert the millivolt conversion back to integer ADC units."""
    return np.rint(np.asarray(values) * spec.adc_gain + spec.baseline).astype(np.int64)


def export_csv(record: AnnotatedRecord, channel: str) -> Tuple[bytes, bytes]:
    """Render one channel and the beat annotations as CSV.

    Returns
    -------
    (signal_csv, annotation_csv) : tuple of bytes
        ``time_s,amplitude_mV`` per sample, and ``sample_index,beat_code``
        per annotation.
    """
    sig = record.channel(channel)
    out = io.StringIO()
    out.write("time_s,amplitude_mV\n")
    t = np.arange(len(sig)) * sig.sampling_period
    for ti, v in zip(t, sig.samples):
        out.write(f"{ti:.6f},{v:.6f}\n")
    ann = io.StringIO()
    ann.write("sample_index,beat_code\n")
    for a in record.annotations:
        ann.write(f"{a.sample_index},{a.beat_code}\n")
    return out.getvalue().encode(), ann.getvalue().encode()


def find_record(data_dir, record_id: str) -> Path:
    stem = Path(data_dir) / str(record_id)
    if not stem.with_name(stem.name + ".hea").exists():
        raise FileNotFoundError(f"record {record_id} not found under {data_dir} (expected {stem}.hea)")
    return stem


def record_available(data_dir, record_id: str) -> bool:
    stem = Path(data_dir) / str(record_id)
    return all(os.path.exists(f"{stem}{ext}") for ext in (".hea", ".dat", ".atr"))
