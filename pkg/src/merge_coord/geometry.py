"""Road centerlines as arc-length parameterized polylines.

Freeway and ramp are both polylines in a local east/north plane (meters).
Positions are expressed as stations (distance along the path) so that
distances to the merge point follow ramp curvature instead of the chord.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np

EARTH_RADIUS_M = 6_371_000.0
MERGE_SNAP_TOLERANCE_M = 0.5

RAMP = "ramp"
FREEWAY = "freeway"
ROLES = (RAMP, FREEWAY)


class GeometryError(ValueError):
    pass


class PassedMerge(GeometryError):
    """Vehicle is already beyond the merge point."""


class Point2D(NamedTuple):
    x: float
    y: float


class PathPosition(NamedTuple):
    station: float
    lateral_offset: float


@dataclass(frozen=True)
class Polyline:
    vertices: Tuple[Point2D, ...]
    cumulative_lengths: Tuple[float, ...] = field(init=False)
    _xy: np.ndarray = field(init=False, repr=False, compare=False)
    _seg: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        verts = tuple(Point2D(float(x), float(y)) for x, y in self.vertices)
        if len(verts) < 2:
            raise GeometryError("polyline needs at least 2 vertices")
        xy = np.array(verts, dtype=float)
        if not np.all(np.isfinite(xy)):
            raise GeometryError("polyline vertices must be finite")
        seg = np.hypot(np.diff(xy[:, 0]), np.diff(xy[:, 1]))
        if np.any(seg <= 0.0):
            i = int(np.argmin(seg))
            raise GeometryError(f"zero-length segment between vertices {i} and {i + 1}")
        cum = [0.0]
        for s in seg:
            cum.append(cum[-1] + float(s))
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "cumulative_lengths", tuple(cum))
        object.__setattr__(self, "_xy", xy)
        a = xy[:-1]
        d = xy[1:] - a
        # segment starts, directions and squared lengths, reused by every projection
        object.__setattr__(self, "_seg", (a[:, 0].copy(), a[:, 1].copy(), d[:, 0].copy(),
                                          d[:, 1].copy(), d[:, 0] ** 2 + d[:, 1] ** 2))

    @property
    def length(self) -> float:
        return self.cumulative_lengths[-1]


def path_length(p: Polyline) -> float:
    return p.cumulative_lengths[-1]


def project_to_path(p: Polyline, q: Sequence[float]) -> PathPosition:
    """Closest point on ``p`` to ``q`` as (station, signed lateral offset).

    Lateral offset is positive to the left of the direction of travel.
    Among equally distant candidates the smallest station is returned.
    """
    ax, ay, dxs, dys, seg_len2 = p._seg
    qx, qy = float(q[0]), float(q[1])
    rel_x = qx - ax
    rel_y = qy - ay
    t = np.minimum(np.maximum((rel_x * dxs + rel_y * dys) / seg_len2, 0.0), 1.0)
    dx = rel_x - t * dxs
    dy = rel_y - t * dys
    dist2 = dx * dx + dy * dy
    # argmin returns the first minimum, i.e. the smallest station on ties
    i = int(np.argmin(dist2))
    station = p.cumulative_lengths[i] + float(t[i]) * math.sqrt(seg_len2[i])
    station = min(max(station, 0.0), p.length)
    cross = dxs[i] * rel_y[i] - dys[i] * rel_x[i]
    offset = math.sqrt(float(dist2[i]))
    return PathPosition(station, offset if cross >= 0 else -offset)


def station_to_point(p: Polyline, s: float) -> Point2D:
    if not (0.0 <= s <= p.length):
        raise GeometryError(f"station {s} outside [0, {p.length}]")
    cum = p.cumulative_lengths
    i = min(max(bisect_right(cum, s) - 1, 0), len(cum) - 2)
    seg = cum[i + 1] - cum[i]
    t = (s - cum[i]) / seg
    a, b = p.vertices[i], p.vertices[i + 1]
    return Point2D(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y))


def heading_at(p: Polyline, s: float) -> float:
    """Compass heading in degrees (0 = north, clockwise) of the segment at ``s``."""
    cum = p.cumulative_lengths
    i = min(max(bisect_right(cum, s) - 1, 0), len(cum) - 2)
    a, b = p.vertices[i], p.vertices[i + 1]
    return math.degrees(math.atan2(b.x - a.x, b.y - a.y)) % 360.0


def latlon_to_local(lat: float, lon: float, origin: Tuple[float, float]) -> Point2D:
    """Equirectangular projection about ``origin`` (lat, lon in degrees)."""
    lat0, lon0 = origin
    for la, lo in ((lat, lon), (lat0, lon0)):
        if not (math.isfinite(la) and math.isfinite(lo)) or abs(la) > 90 or abs(lo) > 180:
            raise GeometryError(f"invalid coordinates ({la}, {lo})")
    x = EARTH_RADIUS_M * math.cos(math.radians(lat0)) * math.radians(lon - lon0)
    y = EARTH_RADIUS_M * math.radians(lat - lat0)
    return Point2D(x, y)


@dataclass(frozen=True)
class RoadNetwork:
    freeway: Polyline
    ramp: Polyline
    merge_station: float
    origin_latlon: Optional[Tuple[float, float]] = None

    @classmethod
    def build(cls, freeway: Polyline, ramp: Polyline,
              origin_latlon: Optional[Tuple[float, float]] = None) -> "RoadNetwork":
        """Derive the merge station from the ramp terminus projected onto the freeway."""
        pos = project_to_path(freeway, ramp.vertices[-1])
        if abs(pos.lateral_offset) > MERGE_SNAP_TOLERANCE_M:
            raise GeometryError(
                f"ramp terminus is {abs(pos.lateral_offset):.3f} m from the freeway "
                f"(limit {MERGE_SNAP_TOLERANCE_M} m)")
        return cls(freeway, ramp, pos.station, origin_latlon)

    def path(self, role: str) -> Polyline:
        if role == RAMP:
            return self.ramp
        if role == FREEWAY:
            return self.freeway
        raise GeometryError(f"unknown role {role!r}")

    def point_at(self, role: str, station: float) -> Point2D:
        return station_to_point(self.path(role), station)

    def locate(self, role: str, q: Sequence[float]) -> float:
        """Station of ``q`` in the role's merge-relative coordinate.

        For the ramp role a point that has continued onto the freeway past
        the merge point gets a station beyond the ramp's end, so that
        :func:`distance_to_merge` reports it as passed.
        """
        if role == FREEWAY:
            return project_to_path(self.freeway, q).station
        on_ramp = project_to_path(self.ramp, q)
        if on_ramp.station < self.ramp.length:
            return on_ramp.station
        on_fwy = project_to_path(self.freeway, q)
        if on_fwy.station > self.merge_station and \
                abs(on_fwy.lateral_offset) <= abs(on_ramp.lateral_offset):
            return self.ramp.length + (on_fwy.station - self.merge_station)
        return on_ramp.station

    def classify(self, q: Sequence[float]) -> str:
        """Role of the path nearest to ``q``; ties go to the freeway."""
        fwy = abs(project_to_path(self.freeway, q).lateral_offset)
        rmp = abs(project_to_path(self.ramp, q).lateral_offset)
        return RAMP if rmp < fwy else FREEWAY


def distance_to_merge(net: RoadNetwork, role: str, pos: PathPosition | float) -> float:
    station = pos.station if isinstance(pos, PathPosition) else float(pos)
    if role == RAMP:
        d = net.ramp.length - station
    elif role == FREEWAY:
        d = net.merge_station - station
    else:
        raise GeometryError(f"unknown role {role!r}")
    if d < 0:
        raise PassedMerge(f"{role} station {station:.3f} is {-d:.3f} m past the merge point")
    return d


def arc_polyline(center: Tuple[float, float], radius: float, start_deg: float,
                 end_deg: float, step_deg: float = 1.0) -> Polyline:
    """Sample a circular arc into a polyline (``step_deg`` at most per segment)."""
    n = max(1, int(math.ceil(abs(end_deg - start_deg) / step_deg - 1e-9)))
    cx, cy = center
    pts = []
    for k in range(n + 1):
        ang = math.radians(start_deg + (end_deg - start_deg) * k / n)
        pts.append((cx + radius * math.cos(ang), cy + radius * math.sin(ang)))
    return Polyline(tuple(pts))
