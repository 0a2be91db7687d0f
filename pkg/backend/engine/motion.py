"""
Pedestrian Dead Reckoning - step events and motion vectors from IMU traces

    - Step detection: moving-average smoothed accel magnitude, gravity removed,
      peaks above a threshold with a refractory interval
    - Heading: tilt-compensated compass from gravity (smoothed accel) and the
      geomagnetic vector
    - Motion vector per step: [theta, ell] with constant stride length

Heading convention: 0 rad is map north (+y), pi/2 is east (+x), range [-pi, pi).
"""

import json
import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.signal import find_peaks

from services.errors import CompassError, ParseError, ValidationError

logger = logging.getLogger(__name__)

# Below this horizontal field fraction the compass sample is unusable
MIN_HORIZONTAL_FRACTION = 1e-6


@dataclass(frozen=True)
class ImuSample:
    t: float
    accel: Tuple[float, float, float]
    mag: Tuple[float, float, float]


@dataclass(frozen=True)
class StepEvent:
    t: float


@dataclass(frozen=True)
class MotionVector:
    theta: float
    ell: float


@dataclass(frozen=True)
class PdrConfig:
    stride_length: float = 0.7
    peak_threshold: float = 1.5
    min_step_interval: float = 0.3
    smoothing_window: int = 5
    gravity_window: int = 25
    gravity: float = 9.81
    sample_rate: float = 50.0

    def __post_init__(self):
        if self.stride_length <= 0:
            raise ValidationError(f"stride_length must be > 0, got {self.stride_length}")
        if self.min_step_interval <= 0:
            raise ValidationError(f"min_step_interval must be > 0, got {self.min_step_interval}")
        if self.smoothing_window < 1 or self.gravity_window < 1:
            raise ValidationError("smoothing windows must be at least one sample")


def normalize_angle(a):
    """Wrap to [-pi, pi)"""
    wrapped = np.mod(np.asarray(a, dtype=float) + math.pi, 2 * math.pi) - math.pi
    return float(wrapped) if np.ndim(wrapped) == 0 else wrapped


def _arrays(trace: Sequence[ImuSample]):
    t = np.array([s.t for s in trace], dtype=float)
    accel = np.array([s.accel for s in trace], dtype=float).reshape(-1, 3)
    mag = np.array([s.mag for s in trace], dtype=float).reshape(-1, 3)
    return t, accel, mag


def _check_ordered(t: np.ndarray):
    if len(t) > 1 and np.any(np.diff(t) <= 0):
        raise ValidationError("IMU trace timestamps must be strictly increasing")


def detect_steps(trace: Sequence[ImuSample], cfg: PdrConfig = PdrConfig()) -> List[StepEvent]:
    """One StepEvent per accel-magnitude peak above cfg.peak_threshold"""
    if len(trace) == 0:
        return []
    t, accel, _ = _arrays(trace)
    _check_ordered(t)

    magnitude = np.linalg.norm(accel, axis=1)
    smoothed = uniform_filter1d(magnitude, size=cfg.smoothing_window, mode='nearest')
    dynamic = smoothed - cfg.gravity

    if len(t) > 1:
        dt = float(np.median(np.diff(t)))
        distance = max(1, int(math.ceil(cfg.min_step_interval / dt - 1e-9)))
    else:
        distance = 1

    peaks, _ = find_peaks(dynamic, height=cfg.peak_threshold, distance=distance)

    # find_peaks spaces peaks in samples; enforce the interval in time as well
    steps = []
    last = -math.inf
    for i in peaks:
        if t[i] - last >= cfg.min_step_interval - 1e-12:
            steps.append(StepEvent(float(t[i])))
            last = t[i]
    logger.debug(f"Detected {len(steps)} steps in {len(trace)} samples")
    return steps


def _heading(up: np.ndarray, mag: np.ndarray) -> float:
    up = up / np.linalg.norm(up)
    north = mag - np.dot(mag, up) * up
    if np.linalg.norm(north) <= MIN_HORIZONTAL_FRACTION * max(np.linalg.norm(mag), 1e-12):
        raise CompassError("magnetic vector is parallel to gravity")

    # device forward axis (+y) projected on the horizontal plane
    forward = np.array([0.0, 1.0, 0.0]) - up[1] * up
    if np.linalg.norm(forward) <= MIN_HORIZONTAL_FRACTION:
        raise CompassError("device forward axis is vertical")
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)

    return normalize_angle(math.atan2(np.dot(north, right), np.dot(north, forward)))


def heading_at(trace: Sequence[ImuSample], t: float, cfg: PdrConfig = PdrConfig()) -> float:
    """
    Tilt-compensated heading at time t.

    Gravity is the mean accel over cfg.gravity_window samples centred on t; the
    magnetic vector is projected onto the horizontal plane and the heading is the
    angle of that projected north, clockwise from the device forward axis.
    """
    if len(trace) == 0:
        raise ValidationError("heading_at needs a non-empty trace")
    return _heading_from_arrays(*_arrays(trace), t, cfg)


def _heading_from_arrays(times, accel, mag, t: float, cfg: PdrConfig) -> float:
    if t < times[0] - 1e-9 or t > times[-1] + 1e-9:
        raise ValidationError(f"t={t} is outside the trace span [{times[0]}, {times[-1]}]")

    i = int(np.clip(np.searchsorted(times, t), 0, len(times) - 1))
    if i > 0 and abs(times[i - 1] - t) < abs(times[i] - t):
        i -= 1
    half = cfg.gravity_window // 2
    lo, hi = max(0, i - half), min(len(times), i + half + 1)
    up = accel[lo:hi].mean(axis=0)
    if np.linalg.norm(up) == 0:
        raise CompassError("no gravity estimate (zero accel)")
    return _heading(up, mag[i])


def motion_vectors(trace: Sequence[ImuSample], cfg: PdrConfig = PdrConfig()) -> List[Tuple[StepEvent, MotionVector]]:
    """Pair every detected step with [heading, stride]"""
    steps = detect_steps(trace, cfg)
    if not steps:
        return []
    arrays = _arrays(trace)
    return [
        (step, MotionVector(_heading_from_arrays(*arrays, step.t, cfg), cfg.stride_length))
        for step in steps
    ]


# ===== Trace files (JSON lines) =====

def read_imu_trace(lines: Iterable[str]) -> List[ImuSample]:
    trace = []
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            raw = json.loads(line)
            trace.append(ImuSample(float(raw['t']), tuple(map(float, raw['accel'])), tuple(map(float, raw['mag']))))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ParseError(f"IMU trace line {n}: {e}")
    return trace


def write_imu_trace(trace: Sequence[ImuSample], f):
    for s in trace:
        f.write(json.dumps({'t': s.t, 'accel': list(s.accel), 'mag': list(s.mag)}) + '\n')
