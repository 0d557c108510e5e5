"""Canonical motion format, validation, and the tremor simulator."""

import math

import numpy as np
import pytest

from careledger import motion
from careledger.errors import ValidationError


def capture(samples, joints=("wrist",)):
    return motion.MotionCapture(
        device_id="dev1",
        patient_id="p1",
        sample_rate_hz=10.0,
        joint_names=joints,
        samples=tuple(samples),
    )


class TestMotionCapture:
    def test_encode_parse_round_trip(self):
        mc = capture([(0.0, 1.0), (0.1, 2.0), (0.2, 3.0)])
        again = motion.parse(motion.encode(mc))
        assert again == mc

    def test_header_line(self):
        raw = motion.encode(capture([(0.0, 1.0), (0.1, 2.0)]))
        assert raw.startswith(b"#careledger-motion v1\n")

    def test_missing_header_rejected(self):
        with pytest.raises(ValidationError):
            motion.parse(b'{"device_id": "x"}')

    def test_single_sample_rejected(self):
        with pytest.raises(ValidationError):
            capture([(0.0, 1.0)])

    def test_non_increasing_time_rejected(self):
        with pytest.raises(ValidationError):
            capture([(0.0, 1.0), (0.0, 2.0)])

    def test_wrong_angle_count_rejected(self):
        with pytest.raises(ValidationError):
            capture([(0.0, 1.0, 2.0), (0.1, 1.0, 2.0)], joints=("wrist",))

    def test_non_finite_rejected(self):
        with pytest.raises(ValidationError):
            capture([(0.0, float("nan")), (0.1, 2.0)])

    def test_angles_matrix_shape(self):
        mc = capture([(0.0, 1.0, 4.0), (0.1, 2.0, 5.0)], joints=("wrist", "elbow"))
        assert mc.angles.shape == (2, 2)
        assert mc.times.tolist() == [0.0, 0.1]


def brute_force_mean_abs_delta(amplitude, freq, rate, seconds):
    """Independent oracle: mean |first difference| of a pure sinusoid."""
    n = int(round(rate * seconds))
    xs = [amplitude * math.sin(2 * math.pi * freq * i / rate) for i in range(n)]
    return sum(abs(xs[i + 1] - xs[i]) for i in range(n - 1)) / (n - 1)


class TestSimulator:
    def test_seeded_determinism(self):
        a = motion.simulate_tremor("d", "p", ("wrist",), seconds=1.0, seed=42)
        b = motion.simulate_tremor("d", "p", ("wrist",), seconds=1.0, seed=42)
        assert a == b

    def test_sample_count_and_rate(self):
        mc = motion.simulate_tremor("d", "p", ("wrist", "elbow"), sample_rate_hz=50.0, seconds=2.0)
        assert len(mc.samples) == 100
        assert mc.sample_rate_hz == 50.0

    def test_amplitude_doubles_mean_abs_delta(self):
        """Pure sinusoid: the mean |delta| is linear in amplitude."""
        kw = dict(sample_rate_hz=50.0, seconds=10.0, tremor_hz=5.0, noise_deg=0.0)
        one = motion.simulate_tremor("d", "p", ("wrist",), amplitude_deg=3.0, **kw)
        two = motion.simulate_tremor("d", "p", ("wrist",), amplitude_deg=6.0, **kw)

        def mad(mc):
            return float(np.abs(np.diff(mc.angles[:, 0])).mean())

        assert mad(two) == pytest.approx(2.0 * mad(one), rel=1e-9)
        assert mad(one) == pytest.approx(
            brute_force_mean_abs_delta(3.0, 5.0, 50.0, 10.0), rel=1e-9
        )

    def test_noise_applied(self):
        quiet = motion.simulate_tremor("d", "p", ("wrist",), noise_deg=0.0, seconds=1.0, seed=3)
        noisy = motion.simulate_tremor("d", "p", ("wrist",), noise_deg=0.5, seconds=1.0, seed=3)
        assert quiet != noisy
