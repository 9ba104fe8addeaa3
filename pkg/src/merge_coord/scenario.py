"""Scenario files and the built-in preset library.

Scenario files are sectioned ``key = value`` text; ``#`` starts a comment::

    [scenario]
    name = example
    seed = 7

    [geometry]
    units = meters            # or degrees (then vertices are "lat lon")
    freeway = 0 0; 2000 0
    ramp = 678.1 -98.1; ...; 900 0
    # origin = 36.35 -82.40   # required for degrees

    [vehicles]
    1 = freeway 624.5 29.0    # id = role station_m speed_mps
    3 = ramp 0 25.0

    [channel]                 # range (m), loss (0..1), latency (ms)
    [protocol]                # headway, collect_window, retransmit_ms, max_retries, slowdown_epsilon
    [sim]                     # dt, duration, noise, advisories

Omitted channel, protocol and sim keys take their defaults.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

from .geometry import (FREEWAY, RAMP, ROLES, GeometryError, Polyline, RoadNetwork,
                       latlon_to_local)
from .protocol import ProtocolParams
from .radio import ChannelConfig
from .sim import SimConfig, VehicleSpec

SEED_ENV = "MERGE_COORD_SEED"


class ScenarioError(ValueError):
    pass


class ScenarioSyntaxError(ScenarioError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class SemanticError(ScenarioError):
    pass


class UnknownPreset(KeyError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    units: str
    freeway_vertices: Tuple[Tuple[float, float], ...]
    ramp_vertices: Tuple[Tuple[float, float], ...]
    vehicles: Tuple[VehicleSpec, ...]
    sim: SimConfig
    origin: Optional[Tuple[float, float]] = None
    network: RoadNetwork = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "network", _build_network(self))
        _validate_vehicles(self.network, self.vehicles)

    @property
    def seed(self) -> int:
        return self.sim.seed


def _build_network(cfg: ScenarioConfig) -> RoadNetwork:
    if cfg.units not in ("meters", "degrees"):
        raise SemanticError(f"units must be 'meters' or 'degrees', got {cfg.units!r}")
    if cfg.units == "degrees":
        if cfg.origin is None:
            raise SemanticError("degree geometry needs an origin")
        conv = lambda pts: [latlon_to_local(lat, lon, cfg.origin) for lat, lon in pts]
    else:
        conv = list
    try:
        freeway = Polyline(tuple(conv(cfg.freeway_vertices)))
        ramp = Polyline(tuple(conv(cfg.ramp_vertices)))
        return RoadNetwork.build(freeway, ramp, cfg.origin if cfg.units == "degrees" else None)
    except GeometryError as exc:
        raise SemanticError(f"geometry: {exc}") from None


def _validate_vehicles(net: RoadNetwork, vehicles):
    seen = set()
    for v in vehicles:
        if v.vehicle_id in seen:
            raise SemanticError(f"duplicate vehicle id {v.vehicle_id}")
        seen.add(v.vehicle_id)
        if not 0 <= v.vehicle_id <= 0xFFFFFFFF:
            raise SemanticError(f"vehicle id {v.vehicle_id} is not an unsigned 32-bit value")
        if v.role not in ROLES:
            raise SemanticError(f"vehicle {v.vehicle_id}: unknown role {v.role!r}")
        length = net.path(v.role).length
        if not 0 <= v.station <= length:
            raise SemanticError(f"vehicle {v.vehicle_id}: station {v.station} outside "
                                f"its {v.role} path [0, {length:.3f}]")
        if not 0 <= v.speed <= 655.35:
            raise SemanticError(f"vehicle {v.vehicle_id}: speed {v.speed} out of range")


# -- parsing ----------------------------------------------------------------

_KEYS = {
    "scenario": {"name", "seed"},
    "geometry": {"units", "freeway", "ramp", "origin"},
    "vehicles": None,
    "channel": {"range", "loss", "latency"},
    "protocol": {"headway", "collect_window", "retransmit_ms", "max_retries",
                 "slowdown_epsilon"},
    "sim": {"dt", "duration", "noise", "advisories"},
}


def _tokenize(text: str) -> Dict[str, Dict[str, Tuple[str, int]]]:
    sections: Dict[str, Dict[str, Tuple[str, int]]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ScenarioSyntaxError(lineno, f"unterminated section header {raw.strip()!r}")
            current = line[1:-1].strip()
            if current not in _KEYS:
                raise ScenarioSyntaxError(lineno, f"unknown section [{current}]")
            if current in sections:
                raise ScenarioSyntaxError(lineno, f"duplicate section [{current}]")
            sections[current] = {}
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ScenarioSyntaxError(lineno, f"expected 'key = value', got {raw.strip()!r}")
        if current is None:
            raise ScenarioSyntaxError(lineno, "key outside of any section")
        allowed = _KEYS[current]
        if allowed is not None and key not in allowed:
            raise ScenarioSyntaxError(lineno, f"unknown key {key!r} in [{current}]")
        if key in sections[current] and allowed is None:
            raise SemanticError(f"line {lineno}: duplicate vehicle id {key}")
        if key in sections[current]:
            raise ScenarioSyntaxError(lineno, f"duplicate key {key!r} in [{current}]")
        sections[current][key] = (value, lineno)
    return sections


def _num(value: str, lineno: int, kind=float):
    try:
        x = kind(value)
    except ValueError:
        raise ScenarioSyntaxError(lineno, f"expected a number, got {value!r}") from None
    if kind is float and not math.isfinite(x):
        raise ScenarioSyntaxError(lineno, f"non-finite number {value!r}")
    return x


def _pair(text: str, lineno: int) -> Tuple[float, float]:
    parts = text.replace(",", " ").split()
    if len(parts) != 2:
        raise ScenarioSyntaxError(lineno, f"expected a coordinate pair, got {text.strip()!r}")
    return (_num(parts[0], lineno), _num(parts[1], lineno))


def _bool(value: str, lineno: int) -> bool:
    v = value.lower()
    if v in ("true", "yes", "on", "1"):
        return True
    if v in ("false", "no", "off", "0"):
        return False
    raise ScenarioSyntaxError(lineno, f"expected a boolean, got {value!r}")


def default_seed() -> int:
    env = os.environ.get(SEED_ENV)
    return int(env) if env else 0


def parse_scenario(text: str) -> ScenarioConfig:
    sec = _tokenize(text)
    get = lambda s, k: sec.get(s, {}).get(k)

    name = get("scenario", "name")
    seed = get("scenario", "seed")
    geo = sec.get("geometry")
    if geo is None:
        raise SemanticError("missing [geometry] section")
    for key in ("freeway", "ramp"):
        if key not in geo:
            raise SemanticError(f"[geometry] needs a '{key}' vertex list")
    units = geo["units"][0] if "units" in geo else "meters"
    origin = _pair(*geo["origin"]) if "origin" in geo else None
    verts = {key: tuple(_pair(p, geo[key][1]) for p in geo[key][0].split(";") if p.strip())
             for key in ("freeway", "ramp")}

    vehicles = []
    for key, (value, lineno) in sec.get("vehicles", {}).items():
        parts = value.split()
        if len(parts) != 3:
            raise ScenarioSyntaxError(lineno, "vehicle entries are 'id = role station speed'")
        vid = _num(key, lineno, int)
        vehicles.append(VehicleSpec(vid, parts[0], _num(parts[1], lineno),
                                    _num(parts[2], lineno)))

    def opt(section, key, default, kind=float):
        item = get(section, key)
        return default if item is None else _num(item[0], item[1], kind)

    try:
        channel = ChannelConfig(opt("channel", "range", 300.0), opt("channel", "loss", 0.0),
                                opt("channel", "latency", 20, int))
        d = ProtocolParams()
        protocol = ProtocolParams(opt("protocol", "headway", d.headway_s),
                                  opt("protocol", "collect_window", d.collect_window_s),
                                  opt("protocol", "retransmit_ms", d.retransmit_ms, int),
                                  opt("protocol", "max_retries", d.max_retries, int),
                                  opt("protocol", "slowdown_epsilon", d.slowdown_epsilon_s))
        adv = get("sim", "advisories")
        sim = SimConfig(dt=opt("sim", "dt", 0.1), duration_s=opt("sim", "duration", 25.0),
                        seed=default_seed() if seed is None else _num(seed[0], seed[1], int),
                        bsm_noise_sigma_m=opt("sim", "noise", 1.0),
                        channel=channel, protocol=protocol,
                        advisories_enabled=True if adv is None else _bool(*adv))
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise SemanticError(str(exc)) from None
    return ScenarioConfig(name[0] if name else "unnamed", units, verts["freeway"],
                          verts["ramp"], tuple(vehicles), sim, origin)


def serialize_scenario(cfg: ScenarioConfig) -> str:
    """Canonical text form; parsing it yields an equal config."""
    s, ch, pr = cfg.sim, cfg.sim.channel, cfg.sim.protocol
    verts = lambda pts: "; ".join(f"{x!r} {y!r}" for x, y in pts)
    lines = ["[scenario]", f"name = {cfg.name}", f"seed = {s.seed}", "",
             "[geometry]", f"units = {cfg.units}"]
    if cfg.origin is not None:
        lines.append(f"origin = {cfg.origin[0]!r} {cfg.origin[1]!r}")
    lines += [f"freeway = {verts(cfg.freeway_vertices)}", f"ramp = {verts(cfg.ramp_vertices)}",
              "", "[vehicles]"]
    lines += [f"{v.vehicle_id} = {v.role} {float(v.station)!r} {float(v.speed)!r}"
              for v in cfg.vehicles]
    lines += ["", "[channel]", f"range = {float(ch.range_m)!r}", f"loss = {float(ch.loss_prob)!r}",
              f"latency = {ch.latency_ms}", "",
              "[protocol]", f"headway = {float(pr.headway_s)!r}",
              f"collect_window = {float(pr.collect_window_s)!r}",
              f"retransmit_ms = {pr.retransmit_ms}", f"max_retries = {pr.max_retries}",
              f"slowdown_epsilon = {float(pr.slowdown_epsilon_s)!r}", "",
              "[sim]", f"dt = {float(s.dt)!r}", f"duration = {float(s.duration_s)!r}",
              f"noise = {float(s.bsm_noise_sigma_m)!r}",
              f"advisories = {str(s.advisories_enabled).lower()}"]
    return "\n".join(lines) + "\n"


def load_scenario(path) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(fh.read())


# -- presets ----------------------------------------------------------------

RAMP_LENGTH_M = 250.0
RAMP_RADIUS_M = 300.0
RAMP_SEGMENTS = 50
FREEWAY_LENGTH_M = 2000.0
MERGE_X_M = 900.0
FREEWAY_SPEED = 29.0
FOLLOW_SPACING_M = 75.0  # middle of the 50-100 m following band

F1, F2, R = 1, 2, 3


def diamond_ramp(merge_x: float, side: int) -> Tuple[Tuple[float, float], ...]:
    """Circular ramp of fixed arc length joining the freeway tangentially at ``merge_x``.

    ``side`` is -1 for a ramp south of the freeway, +1 for north. The arc is
    split into equal chords sized so the polyline length is exactly
    ``RAMP_LENGTH_M``.
    """
    half = math.asin(RAMP_LENGTH_M / RAMP_SEGMENTS / (2 * RAMP_RADIUS_M))
    sweep = 2 * half * RAMP_SEGMENTS
    pts = []
    for k in range(RAMP_SEGMENTS, 0, -1):
        phi = k * sweep / RAMP_SEGMENTS  # angle still to turn before the merge
        pts.append((merge_x - RAMP_RADIUS_M * math.sin(phi),
                    side * RAMP_RADIUS_M * (1 - math.cos(phi))))
    pts.append((merge_x, 0.0))
    return tuple(pts)


def _field_test(name: str, side: int, ramp_speed: float, ramp_lag_s: float,
                seed: Optional[int] = None) -> ScenarioConfig:
    """Two freeway vehicles 75 m apart plus one ramp vehicle entering the ramp.

    ``ramp_lag_s`` is how long after the lead freeway vehicle the ramp vehicle
    would reach the merge point if nobody adjusted speed.
    """
    eta_r = RAMP_LENGTH_M / ramp_speed
    eta_f1 = eta_r - ramp_lag_s
    s_f1 = MERGE_X_M - FREEWAY_SPEED * eta_f1
    vehicles = (VehicleSpec(F1, FREEWAY, s_f1, FREEWAY_SPEED),
                VehicleSpec(F2, FREEWAY, s_f1 - FOLLOW_SPACING_M, FREEWAY_SPEED),
                VehicleSpec(R, RAMP, 0.0, ramp_speed))
    return ScenarioConfig(name, "meters", ((0.0, 0.0), (FREEWAY_LENGTH_M, 0.0)),
                          diamond_ramp(MERGE_X_M, side), vehicles,
                          SimConfig(seed=default_seed() if seed is None else seed))


# ramp vehicle speed and lag behind the lead freeway vehicle per exit
_EXITS = {27: (25.0, -1.0), 32: (27.0, 1.3), 34: (25.0, 4.0), 36: (27.0, -3.0)}


def _make_presets():
    presets = {"conflict_sync": lambda: _field_test("conflict_sync", -1, 25.0, 0.5)}
    for exit_no, (speed, lag) in _EXITS.items():
        for bound, side in (("eb", -1), ("wb", 1)):
            name = f"diamond_{bound}_{exit_no}"
            presets[name] = (lambda n=name, s=side, v=speed, g=lag: _field_test(n, s, v, g))
    return presets


_PRESETS = _make_presets()
PRESET_NAMES = tuple(_PRESETS)


def preset(name: str) -> ScenarioConfig:
    try:
        return _PRESETS[name]()
    except KeyError:
        raise UnknownPreset(name) from None
