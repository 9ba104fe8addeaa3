"""Per-vehicle trajectory buffers, noise filtering and arrival-time estimates."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from statistics import median
from typing import Deque, List, Optional, Tuple

BUFFER_CAPACITY = 50
MEDIAN_WINDOW = 5
EMA_ALPHA = 0.5
FIT_WINDOW = 10
ACCEL_LIMIT = 10.0
STALE_AFTER_MS = 2000


class EmptyBuffer(ValueError):
    pass


class InsufficientSamples(ValueError):
    pass


class _Unreachable:
    """Marker returned by :func:`eta_to_station` when the target is never reached."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "Unreachable"

    def __reduce__(self):
        return (_Unreachable, ())


Unreachable = _Unreachable()


@dataclass(frozen=True)
class TrajectorySample:
    timestamp_ms: int
    station: float
    speed: float
    raw_pos: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError(f"negative speed {self.speed}")


@dataclass
class TrajectoryBuffer:
    vehicle_id: int
    role: str
    samples: Deque[TrajectorySample] = field(
        default_factory=lambda: deque(maxlen=BUFFER_CAPACITY))
    last_update_ms: Optional[int] = None

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class MotionEstimate:
    speed_v: float
    accel_a: float
    stamp_ms: int


def ingest(buf: TrajectoryBuffer, s: TrajectorySample) -> bool:
    """Append ``s`` unless it is not newer than the newest sample. Returns acceptance."""
    if buf.samples and s.timestamp_ms <= buf.samples[-1].timestamp_ms:
        return False
    buf.samples.append(s)
    buf.last_update_ms = s.timestamp_ms
    return True


def _median_then_ema(values: List[float]) -> List[float]:
    half = MEDIAN_WINDOW // 2
    n = len(values)
    med = [median(values[max(0, i - half):min(n, i + half + 1)]) for i in range(n)]
    out = [med[0]]
    for v in med[1:]:
        out.append(EMA_ALPHA * v + (1.0 - EMA_ALPHA) * out[-1])
    return out


def smooth(buf: TrajectoryBuffer) -> List[TrajectorySample]:
    """Median-of-5 (truncated at the ends) followed by an EMA, on station and speed."""
    if not buf.samples:
        raise EmptyBuffer(f"no samples for vehicle {buf.vehicle_id}")
    samples = list(buf.samples)
    stations = _median_then_ema([s.station for s in samples])
    speeds = _median_then_ema([s.speed for s in samples])
    return [replace(s, station=st, speed=max(0.0, sp))
            for s, st, sp in zip(samples, stations, speeds)]


def estimate_motion(buf: TrajectoryBuffer) -> MotionEstimate:
    """Least-squares line through the newest reported speeds.

    The fit runs on the raw speed column; the regression is the speed filter.
    Speed is the fitted value at the newest timestamp, acceleration the slope.
    """
    if len(buf.samples) < 2:
        raise InsufficientSamples(f"need 2 samples, have {len(buf.samples)}")
    recent = list(buf.samples)[-FIT_WINDOW:]
    t0 = recent[-1].timestamp_ms
    ts = [(s.timestamp_ms - t0) / 1000.0 for s in recent]
    vs = [s.speed for s in recent]
    n = len(recent)
    t_mean = sum(ts) / n
    v_mean = sum(vs) / n
    stt = sum((t - t_mean) ** 2 for t in ts)
    slope = sum((t - t_mean) * (v - v_mean) for t, v in zip(ts, vs)) / stt
    speed = v_mean + slope * (0.0 - t_mean)
    accel = min(max(slope, -ACCEL_LIMIT), ACCEL_LIMIT)
    return MotionEstimate(max(0.0, speed), accel, t0)


def eta_to_station(d: float, m: MotionEstimate):
    """Seconds until distance ``d`` is covered at constant acceleration, or Unreachable."""
    if d < 0:
        raise ValueError(f"distance must be non-negative, got {d}")
    if d == 0:
        return 0.0
    v, a = m.speed_v, m.accel_a
    if a == 0:
        return d / v if v > 0 else Unreachable
    if a < 0 and v * v / (2.0 * -a) < d:
        return Unreachable
    disc = max(v * v + 2.0 * a * d, 0.0)
    # stable root of 0.5*a*t^2 + v*t - d = 0
    return 2.0 * d / (v + math.sqrt(disc))


def is_stale(buf: TrajectoryBuffer, now_ms: int) -> bool:
    if buf.last_update_ms is None:
        return True
    return now_ms - buf.last_update_ms > STALE_AFTER_MS
