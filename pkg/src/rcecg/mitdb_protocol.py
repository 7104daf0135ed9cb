"""
Per-record experiment protocol for the 17 MIT-BIH arrhythmia records.

Each entry fixes the 7.5-minute (occasionally shorter) test slot, the
targeted beat class, the published hyperparameters and the published
test metrics, so runs can be seeded with and compared against them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple


@dataclass(frozen=True)
class ClassProtocol:
    symbol: str
    description: str
    test_slot_min: Tuple[float, float]
    test_beats: int
    gamma: float
    ratio: Optional[float]  # a/s, None means plain ridge
    tau: float
    reference: Tuple[float, float, float, float]  # Acc, Se, P, F1
    class_beats: int

    @property
    def test_slot(self) -> Tuple[float, float]:
        return (self.test_slot_min[0] * 60.0, self.test_slot_min[1] * 60.0)


def _c(symbol, desc, slot, beats, gamma, ratio, tau, ref, n):
    return ClassProtocol(symbol, desc, slot, beats, gamma, ratio, tau, ref, n)


PVC, LBBB, RBBB, APB = "V", "L", "R", "A"
PACED, FUSION_PACED, FUSION_V, VFLUTTER, VESCAPE = "/", "f", "F", "!", "E"

PROTOCOLS: Dict[str, List[ClassProtocol]] = {
    "104": [
        _c(PACED, "paced", (22.5, 30), 554, 1e-5, None, 0.91, (0.9928, 0.9947, 0.9947, 0.9947), 380),
        _c(FUSION_PACED, "fusion of paced and normal", (22.5, 30), 554, 1e-6, 3.0, 0.83,
           (0.9856, 0.9934, 0.9554, 0.9740), 151),
    ],
    "106": [_c(PVC, "PVC", (17.5, 25), 501, 1e-3, 1.5, 0.52, (0.9940, 0.9932, 0.9866, 0.9899), 148)],
    "119": [_c(PVC, "PVC", (17.5, 25), 499, 1e-5, None, 1.0, (0.9980, 1.0000, 0.9936, 0.9968), 156)],
    "200": [_c(PVC, "PVC", (12.5, 20), 663, 1e-2, None, 0.5, (0.9910, 0.9951, 0.9761, 0.9855), 205)],
    "201": [_c(PVC, "PVC", (11.5, 19), 396, 1e-7, None, 1.0, (0.9924, 1.0000, 0.9717, 0.9856), 103)],
    "203": [_c(PVC, "PVC", (12.5, 20), 483, 1e-6, None, 0.02, (0.9814, 1.0000, 0.9032, 0.9492), 84)],
    "207": [
        _c(LBBB, "LBBB", (7.5, 15), 523, 1e-6, None, 1.22, (1.0, 1.0, 1.0, 1.0), 523),
        _c(APB, "APB", (29, 30), 65, 1e-6, None, 1.22, (1.0, 1.0, 1.0, 1.0), 65),
        _c(PVC, "PVC", (2.5, 5), 218, 1e-6, 1.5, 1.22, (0.9404, 0.9608, 0.8167, 0.8829), 51),
        _c(VFLUTTER, "ventricular flutter", (26.5, 29), 283, 1e-7, None, 1.5, (0.9894, 0.9840, 1.0000, 0.9919), 187),
        _c(VESCAPE, "ventricular escape", (28, 30), 178, 0.1, None, 1.5, (0.9944, 0.9853, 1.0000, 0.9926), 68),
    ],
    "208": [
        _c(PVC, "PVC", (7.5, 15), 728, 1e-6, None, 0.64, (0.9918, 0.9934, 0.9869, 0.9901), 303),
        _c(FUSION_V, "fusion of ventricular and normal", (7.5, 15), 728, 1e-5, 2.0, 0.78,
           (0.9959, 0.9933, 0.9867, 0.9900), 149),
    ],
    "209": [_c(APB, "APB", (10, 17.5), 774, 1e-3, 2.5, 0.92, (0.9483, 0.8485, 0.9032, 0.8750), 165)],
    "212": [_c(RBBB, "RBBB", (7.5, 15), 702, 1e-6, None, 0.92, (1.0, 1.0, 1.0, 1.0), 519)],
    "213": [
        _c(PVC, "PVC", (9, 16.5), 814, 1e-4, 2.5, 0.78, (0.9840, 0.9245, 0.8448, 0.8829), 53),
        _c(FUSION_V, "fusion of ventricular and normal", (9, 16.5), 814, 1e-6, 1.5, 1.0,
           (0.9668, 0.8200, 0.8200, 0.8200), 78),
    ],
    "217": [
        _c(PVC, "PVC", (21.5, 29), 543, 1e-5, 2.5, 0.72, (1.0, 1.0, 1.0, 1.0), 30),
        _c(PACED, "paced", (21.5, 29), 543, 1e-5, 2.5, 1.0, (0.9908, 0.9706, 0.8919, 0.9296), 31),
        _c(FUSION_PACED, "fusion of paced and normal", (21.5, 29), 543, 1e-5, None, 0.78,
           (0.9945, 0.9978, 0.9956, 0.9967), 454),
    ],
    "221": [_c(PVC, "PVC", (21.5, 29), 569, 1e-7, 1.5, 0.78, (1.0, 1.0, 1.0, 1.0), 50)],
    "223": [_c(PVC, "PVC", (21.5, 29), 649, 0.8e-5, 1.3, 0.56, (0.9908, 0.9803, 0.9900, 0.9851), 203)],
    "231": [_c(RBBB, "RBBB", (7.5, 15), 507, 1e-4, None, 0.92, (0.9980, 1.0000, 0.9963, 0.9981), 269)],
    "232": [_c(APB, "APB", (7.5, 15), 465, 1e-4, 1.5, 1.5, (0.9763, 0.9837, 0.9863, 0.9850), 366)],
    "233": [_c(PVC, "PVC", (16.5, 24), 770, 1e-3, None, 0.17, (0.9987, 1.0000, 0.9952, 0.9976), 207)],
}

HEADLINE_EXCLUDED = ("207", "209")
REFERENCE_GLOBAL = {"acc": 0.9911, "se": 0.9638, "p": 0.9725}

# bundled synthetic record: train on the first 90 s, test on the last 90 s
SYNTHETIC_PROTOCOL = [
    ClassProtocol(PVC, "PVC", (1.5, 3.0), 0, 1e-4, None, 0.1, (float("nan"),) * 4, 0),
]


def protocol_for(record_id: str) -> List[ClassProtocol]:
    if record_id in PROTOCOLS:
        return PROTOCOLS[record_id]
    if record_id == "synth":
        return SYNTHETIC_PROTOCOL
    raise KeyError(f"no built-in protocol for record {record_id!r}; define one in the config")
