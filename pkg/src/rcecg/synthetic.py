"""
Synthetic ECG-like mini-record written in the MIT-BIH file layout.

Used when the real database is not available: normal sinus beats with
occasional premature ventricular contractions, baseline wander, mains
interference and white noise, plus a generation manifest listing every
annotation written.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .wfdb_ingest import _checksum16, _encode_annotations, _encode_format212

FS = 360
GAIN = 200.0
ADC_ZERO = 0

# (offset s, amplitude mV, width s) Gaussian components of each beat shape
NORMAL_WAVES = [(-0.20, 0.15, 0.025), (-0.035, -0.12, 0.010), (0.0, 1.10, 0.012),
                (0.035, -0.28, 0.012), (0.26, 0.32, 0.050)]
PVC_WAVES = [(-0.02, -0.35, 0.030), (0.03, 1.55, 0.035), (0.11, -0.60, 0.040),
             (0.32, -0.45, 0.070)]


def _beat_times(duration: float, rng: np.random.Generator, pvc_prob: float) -> List[Tuple[float, str]]:
    t = 3.0
    rr = 0.8
    beats = []
    prev_pvc = False
    while t < duration - 1.0:
        pvc = not prev_pvc and len(beats) > 1 and rng.random() < pvc_prob
        if pvc:
            t_b = beats[-1][0] + 0.58 * rr
            beats.append((t_b, "V"))
            t = beats[-1][0] + 1.42 * rr  # compensatory pause
        else:
            beats.append((t, "N"))
            t += rr * (1 + 0.04 * rng.standard_normal())
        prev_pvc = pvc
    return beats


def _render(beats, n: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / FS
    x = np.zeros(n)
    for tb, sym in beats:
        waves = PVC_WAVES if sym == "V" else NORMAL_WAVES
        lo, hi = int((tb - 0.5) * FS), int((tb + 0.7) * FS)
        sl = slice(max(lo, 0), min(hi, n))
        for off, amp, width in waves:
            x[sl] += amp * np.exp(-0.5 * ((t[sl] - tb - off) / width) ** 2)
    x += 0.12 * np.sin(2 * np.pi * 0.23 * t + rng.uniform(0, 2 * np.pi))
    x += 0.02 * np.sin(2 * np.pi * 60.0 * t)
    x += 0.01 * rng.standard_normal(n)
    return x


def generate_record(out_dir, name: str = "synth", duration: float = 180.0,
                    seed: int = 7, pvc_prob: float = 0.15) -> Dict:
    """Write ``name.hea/.dat/.atr`` plus ``name.manifest.json`` into ``out_dir``.

    Returns the manifest.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration * FS))
    beats = _beat_times(duration, rng, pvc_prob)
    lead2 = _render(beats, n, rng)
    v1 = -0.6 * lead2 + 0.02 * rng.standard_normal(n)

    adc = [np.clip(np.rint(x * GAIN + ADC_ZERO), -2048, 2047).astype(np.int64) for x in (lead2, v1)]

    samples = [(int(round(tb * FS)), sym) for tb, sym in beats]
    # non-beat annotations exercise the parser's skipping: rhythm label with
    # AUX text at the start, and a noise marker mid-record
    entries = [(0, "+")] + samples
    noise_at = samples[len(samples) // 2][0] + 40
    entries.append((noise_at, "~"))
    entries.sort(key=lambda e: e[0])
    aux = {0: "(N"}

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.dat").write_bytes(_encode_format212(adc))
    lines = [f"{name} 2 {FS} {n}"]
    for a, desc in zip(adc, ("MLII", "V1")):
        lines.append(f"{name}.dat 212 {GAIN:g} 11 {ADC_ZERO} {int(a[0])} {_checksum16(a)} 0 {desc}")
    lines.append(f"# synthetic record, seed {seed}")
    (out / f"{name}.hea").write_text("\n".join(lines) + "\n")
    (out / f"{name}.atr").write_bytes(_encode_annotations(entries, aux))

    manifest = {
        "record": name,
        "seed": seed,
        "fs": FS,
        "num_samples": n,
        "duration_s": duration,
        "pvc_prob": pvc_prob,
        "beats": [[s, sym] for s, sym in samples],
        "non_beat": [[s, sym] for s, sym in entries if sym not in ("N", "V")],
    }
    (out / f"{name}.manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest


def bundled_dir() -> Path:
    return Path(__file__).parent / "data"


def bundled_record_stem() -> Path:
    return bundled_dir() / "synth"
