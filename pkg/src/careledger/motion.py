"""Joint-angle time series from wearable devices.

Canonical motion format (the wire/file form devices produce)::

    #careledger-motion v1
    {"device_id":...,"joint_names":[...],"patient_id":...,
     "sample_rate_hz":...,"samples":[[t_s,a1,a2,...],...]}

The JSON line is canonical JSON.  ``samples`` rows carry the time offset in
seconds followed by one angle in degrees per joint, strictly increasing in
time, at least two rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import canonical
from .errors import ValidationError

HEADER = b"#careledger-motion v1"


@dataclass(frozen=True)
class MotionCapture:
    device_id: str
    patient_id: str
    sample_rate_hz: float
    joint_names: tuple
    samples: tuple  # rows of (t_s, angle_1, ..., angle_J)

    def __post_init__(self):
        if not self.joint_names:
            raise ValidationError("at least one joint is required")
        if len(self.samples) < 2:
            raise ValidationError("a capture needs at least 2 samples")
        if self.sample_rate_hz <= 0:
            raise ValidationError("sample_rate_hz must be positive")
        width = 1 + len(self.joint_names)
        prev_t = -math.inf
        for row in self.samples:
            if len(row) != width:
                raise ValidationError(
                    f"sample row has {len(row) - 1} angles, expected {len(self.joint_names)}"
                )
            if not all(math.isfinite(v) for v in row):
                raise ValidationError("samples must be finite")
            if row[0] <= prev_t:
                raise ValidationError("sample times must be strictly increasing")
            prev_t = row[0]

    @property
    def times(self) -> np.ndarray:
        return np.asarray([r[0] for r in self.samples], dtype=float)

    @property
    def angles(self) -> np.ndarray:
        """(n_samples, n_joints) array of angles in degrees."""
        return np.asarray([r[1:] for r in self.samples], dtype=float)


def encode(mc: MotionCapture) -> bytes:
    body = canonical.dumps(
        {
            "device_id": mc.device_id,
            "patient_id": mc.patient_id,
            "sample_rate_hz": float(mc.sample_rate_hz),
            "joint_names": list(mc.joint_names),
            "samples": [[float(v) for v in row] for row in mc.samples],
        }
    )
    return HEADER + b"\n" + body


def parse(data: bytes) -> MotionCapture:
    head, _, body = data.partition(b"\n")
    if head.strip() != HEADER:
        raise ValidationError("missing canonical motion header")
    try:
        d = canonical.loads(body)
        return MotionCapture(
            device_id=d["device_id"],
            patient_id=d["patient_id"],
            sample_rate_hz=float(d["sample_rate_hz"]),
            joint_names=tuple(d["joint_names"]),
            samples=tuple(tuple(float(v) for v in row) for row in d["samples"]),
        )
    except ValidationError:
        raise
    except Exception as exc:
        raise ValidationError(f"malformed motion capture: {exc}") from exc


def simulate_tremor(
    device_id: str,
    patient_id: str,
    joint_names: tuple,
    sample_rate_hz: float = 50.0,
    seconds: float = 10.0,
    tremor_hz: float = 5.0,
    amplitude_deg: float = 3.0,
    noise_deg: float = 0.1,
    baseline_deg: float = 20.0,
    seed=None,
) -> MotionCapture:
    """Synthesize sinusoid-plus-noise joint angles mimicking a tremor band.

    Each joint gets a fixed phase offset so channels are correlated but not
    identical.  With ``noise_deg=0`` the signal is a pure sinusoid, for which
    the mean absolute first difference scales linearly with amplitude.
    """
    n = int(round(sample_rate_hz * seconds))
    if n < 2:
        raise ValidationError("simulation too short: needs at least 2 samples")
    rng = np.random.default_rng(seed)
    t = np.arange(n) / sample_rate_hz
    rows = []
    phases = [j * math.pi / 4 for j in range(len(joint_names))]
    columns = []
    for phase in phases:
        angles = baseline_deg + amplitude_deg * np.sin(2 * math.pi * tremor_hz * t + phase)
        if noise_deg > 0:
            angles = angles + rng.normal(0.0, noise_deg, size=n)
        columns.append(angles)
    for i in range(n):
        rows.append((float(t[i]), *(float(c[i]) for c in columns)))
    return MotionCapture(
        device_id=device_id,
        patient_id=patient_id,
        sample_rate_hz=float(sample_rate_hz),
        joint_names=tuple(joint_names),
        samples=tuple(rows),
    )
