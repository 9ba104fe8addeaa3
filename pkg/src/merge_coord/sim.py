"""Deterministic world loop for the merge scenario.

Physics and safety-message emission share one fixed tick (100 ms). Radio
deliveries and protocol timeouts are handled as events at their exact
millisecond between ticks, so a full handshake fits well inside one
collect window plus a few channel latencies.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

from .codec import (BasicSafetyMessage, CodecError, MsgType, ProtocolMessage, decode_frame,
                    encode_frame)
from .geometry import FREEWAY, RAMP, PassedMerge, RoadNetwork, distance_to_merge, heading_at
from .protocol import (Ack, Advisory, AdvisoryKind, Confirm, Expiry, ForeignNotify,
                       ForeignProposal, MasterPhase, MasterState, MergePlan, Proposal,
                       ProtocolParams, ResponderPhase, ResponderState, StepResult, Timeout,
                       master_step, on_ramp_entry, responder_step)
from .radio import ChannelConfig, ChannelRng, DeliveryQueue, broadcast, in_range
from .trace import SummaryReport, Trace, metrics, record
from .trajectory import (InsufficientSamples, TrajectoryBuffer, TrajectorySample,
                         Unreachable, estimate_motion, eta_to_station, ingest, is_stale, smooth)

log = logging.getLogger(__name__)

NOISE_STREAM = 0xA5A5_5A5A_C3C3_3C3C


@dataclass(frozen=True)
class DriverParams:
    a_max: float = 1.0
    b_comfort: float = 1.5
    v_max: float = 35.0
    min_gap: float = 10.0


@dataclass(frozen=True)
class VehicleSpec:
    vehicle_id: int
    role: str
    station: float
    speed: float


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    duration_s: float = 25.0
    seed: int = 0
    bsm_noise_sigma_m: float = 1.0
    channel: ChannelConfig = ChannelConfig()
    protocol: ProtocolParams = ProtocolParams()
    advisories_enabled: bool = True

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.duration_s > 0:
            raise ValueError("duration_s must be positive")
        if self.bsm_noise_sigma_m < 0:
            raise ValueError("bsm_noise_sigma_m must be non-negative")

    @property
    def tick_ms(self) -> int:
        return round(self.dt * 1000)


@dataclass
class VehicleAgent:
    id: int
    role: str
    station: float
    speed: float
    accel: float = 0.0
    # path currently driven; ramp vehicles switch to the freeway after merging
    path: str = ""
    advisory: Optional[Advisory] = None
    plan: Optional[MergePlan] = None
    driver: DriverParams = DriverParams()
    active: bool = True
    seq: int = 0
    header: Optional[BasicSafetyMessage] = None
    master: Optional[MasterState] = None
    responder: Optional[ResponderState] = None
    buffers: Optional[Dict[int, TrajectoryBuffer]] = None

    def __post_init__(self):
        if not self.path:
            self.path = self.role


def step_kinematics(agent: VehicleAgent, dt: float) -> VehicleAgent:
    """Constant-acceleration update with speed clamped to [0, v_max]."""
    v, a = agent.speed, agent.accel
    if v + a * dt < 0:
        t_stop = v / -a
        ds = v * t_stop + 0.5 * a * t_stop * t_stop
        new_v = 0.0
    else:
        ds = v * dt + 0.5 * a * dt * dt
        new_v = min(v + a * dt, agent.driver.v_max)
    return replace(agent, station=agent.station + ds, speed=new_v)


def driver_accel(agent: VehicleAgent, distance_to_merge: Optional[float], now_s: float,
                 predecessor_gap: Optional[float] = None) -> float:
    """Acceleration command tracking the advised slot time.

    ``distance_to_merge`` is None once the vehicle is past the merge point.
    A predecessor closer than ``min_gap`` forces emergency braking.
    """
    p = agent.driver
    if predecessor_gap is not None and predecessor_gap < p.min_gap:
        return -2.0 * p.b_comfort
    adv = agent.advisory
    if adv is None or adv.kind is AdvisoryKind.MAINTAIN_SPEED or distance_to_merge is None:
        return 0.0
    epoch_s = agent.plan.plan_epoch_ms / 1000.0 if agent.plan is not None else 0.0
    remaining = epoch_s + adv.slot_s - now_s
    if remaining <= 0:
        return 0.0
    v_target = distance_to_merge / remaining
    return min(max(2.0 * (v_target - agent.speed) / 1.0, -p.b_comfort), p.a_max)


class Simulation:
    def __init__(self, network: RoadNetwork, vehicles: Sequence[VehicleSpec],
                 config: SimConfig = SimConfig()):
        self.net = network
        self.cfg = config
        self.params = config.protocol
        self.trace = Trace()
        self.queue = DeliveryQueue()
        self.channel_rng = ChannelRng(config.seed)
        self.noise_rng = ChannelRng(config.seed ^ NOISE_STREAM)
        self.agents: Dict[int, VehicleAgent] = {}
        for spec in sorted(vehicles, key=lambda v: v.vehicle_id):
            a = VehicleAgent(spec.vehicle_id, spec.role, float(spec.station), float(spec.speed))
            a.responder = ResponderState(a.id, a.role)
            if a.role == RAMP:
                a.master = MasterState(a.id, RAMP)
                a.buffers = {}
            self.agents[a.id] = a
        self.now_ms = 0
        self._positions = {}

    # -- helpers ------------------------------------------------------------

    def _active(self) -> List[VehicleAgent]:
        return [a for a in self.agents.values() if a.active]

    def _pos(self, a: VehicleAgent):
        # positions change only in _move, which drops the cached entry
        p = self._positions.get(a.id)
        if p is None:
            p = self._positions[a.id] = self.net.point_at(a.path, a.station)
        return p

    def _snapshot_header(self, a: VehicleAgent, t_ms: int):
        p = self._pos(a)
        sigma = self.cfg.bsm_noise_sigma_m
        nx = self.noise_rng.gauss(sigma) if sigma > 0 else 0.0
        ny = self.noise_rng.gauss(sigma) if sigma > 0 else 0.0
        heading = round(heading_at(self.net.path(a.path), a.station) * 100) % 36000
        a.header = BasicSafetyMessage(
            a.id, a.seq, t_ms, round((p.x + nx) * 100), round((p.y + ny) * 100),
            min(round(a.speed * 100), 0xFFFF), heading)

    def _ingest(self, a: VehicleAgent, h: BasicSafetyMessage):
        pos = (h.pos_x_cm / 100.0, h.pos_y_cm / 100.0)
        buf = a.buffers.get(h.vehicle_id)
        if buf is None:
            role = a.role if h.vehicle_id == a.id else self.net.classify(pos)
            buf = a.buffers[h.vehicle_id] = TrajectoryBuffer(h.vehicle_id, role)
        elif buf.samples and h.timestamp_ms <= buf.samples[-1].timestamp_ms:
            return
        station = self.net.locate(buf.role, pos)
        ingest(buf, TrajectorySample(h.timestamp_ms, station, h.speed_cms / 100.0, pos))

    def _etas(self, a: VehicleAgent, now_ms: int) -> Dict[int, float]:
        out = {}
        for vid, buf in sorted(a.buffers.items()):
            if is_stale(buf, now_ms) or len(buf) < 2:
                continue
            newest = smooth(buf)[-1]
            try:
                d = distance_to_merge(self.net, buf.role, newest.station)
                m = estimate_motion(buf)
            except (PassedMerge, InsufficientSamples):
                continue
            eta = eta_to_station(d, m)
            if eta is Unreachable:
                continue
            out[vid] = max(0.0, eta - (now_ms - m.stamp_ms) / 1000.0)
        return out

    def _transmit(self, a: VehicleAgent, tag: MsgType, payload, now_ms: int):
        a.seq += 1
        header = replace(a.header, seq=a.seq)
        frame = encode_frame(ProtocolMessage(tag, header, payload))
        self.trace.add(record(now_ms, "bsm_tx", a.id, tag=tag.name, seq=a.seq,
                              frame=frame.hex()))
        sender_pos = self._pos(a)
        nodes = [(b.id, self._pos(b)) for b in self._active()]
        packets = broadcast(a.id, sender_pos, nodes, frame, now_ms, self.cfg.channel,
                            self.channel_rng)
        delivered = {p.receiver_id for p in packets}
        for rid, pos in nodes:
            if rid != a.id and rid not in delivered and in_range(sender_pos, pos, self.cfg.channel):
                self.trace.add(record(now_ms, "drop", rid, **{"from": a.id},
                                      tag=tag.name, seq=a.seq))
        self.queue.extend(packets)
        if tag is MsgType.BSM and a.buffers is not None:
            self._ingest(a, header)

    def _apply(self, a: VehicleAgent, machine: str, result: StepResult, now_ms: int):
        old = a.master if machine == "master" else a.responder
        new = result.state
        if machine == "master":
            a.master = new
        else:
            a.responder = new
        if old.phase is not new.phase:
            detail = {"machine": machine, "from": old.phase.value, "to": new.phase.value}
            if new.plan is not None:
                detail["plan_id"] = new.plan.plan_id
            if new.phase.value == "Committed":
                detail["plan"] = new.plan.encode().hex()
            self.trace.add(record(now_ms, "state_transition", a.id, **detail))
        for tag, payload in result.emissions:
            self._transmit(a, tag, payload, now_ms)
        if result.advisory is not None:
            adv = result.advisory
            detail = {"advice": adv.kind.value}
            if adv.reference_vehicle_id is not None:
                detail["ref"] = adv.reference_vehicle_id
            detail["slot_s"] = f"{adv.slot_s:.3f}"
            self.trace.add(record(now_ms, "advisory", a.id, **detail))
            if self.cfg.advisories_enabled:
                a.advisory = adv
                a.plan = new.plan

    def _responding(self, a: VehicleAgent) -> bool:
        return a.master is None or a.master.phase in (MasterPhase.IDLE, MasterPhase.ABORTED)

    # -- event handling -----------------------------------------------------

    def _deliver(self, a: VehicleAgent, frame: bytes, sender: int, now_ms: int):
        try:
            msg = decode_frame(frame)
        except CodecError as exc:
            log.warning("vehicle %d discarded frame from %d: %s", a.id, sender, exc)
            return
        self.trace.add(record(now_ms, "rx", a.id, **{"from": sender},
                              tag=msg.tag.name, seq=msg.header.seq))
        if a.buffers is not None:
            self._ingest(a, msg.header)
        tag = msg.tag
        if tag is MsgType.RAMP_ENTRY_NOTIFY:
            if a.master is not None:
                self._apply(a, "master", master_step(a.master, ForeignNotify(sender), now_ms,
                                                     params=self.params), now_ms)
        elif tag in (MsgType.MERGE_PROPOSAL, MsgType.MERGE_CONFIRM):
            plan = MergePlan.from_wire(msg.payload)
            if a.master is not None:
                self._apply(a, "master", master_step(a.master, ForeignProposal(plan), now_ms,
                                                     params=self.params), now_ms)
            if not self._responding(a):
                return
            event = Proposal(plan) if tag is MsgType.MERGE_PROPOSAL else Confirm(plan.plan_id)
            self._apply(a, "responder", responder_step(a.responder, event, now_ms, self.params),
                        now_ms)
            if (tag is MsgType.MERGE_CONFIRM and a.master is not None
                    and a.master.yielded_to == plan.master_id and a.id not in plan.vehicle_ids):
                # the plan we yielded to committed without us; try again as master
                a.master = replace(a.master, yielded_to=None)
        elif tag is MsgType.PROPOSAL_ACK:
            if a.master is not None:
                ack = Ack(msg.payload.plan_id, msg.payload.acker_id)
                self._apply(a, "master", master_step(a.master, ack, now_ms, params=self.params),
                            now_ms)

    def _next_timeout(self) -> Optional[int]:
        times = []
        for a in self._active():
            for st in (a.master, a.responder):
                if st is not None and st.next_timeout_ms is not None:
                    times.append(st.next_timeout_ms)
        return min(times) if times else None

    def _fire_timeouts(self, now_ms: int):
        for a in self._active():
            if a.master is not None and a.master.next_timeout_ms is not None \
                    and a.master.next_timeout_ms <= now_ms:
                etas = self._etas(a, now_ms)
                self._apply(a, "master", master_step(a.master, Timeout(), now_ms, etas,
                                                     self.params), now_ms)
            r = a.responder
            if r.next_timeout_ms is not None and r.next_timeout_ms <= now_ms:
                self._apply(a, "responder", responder_step(r, Expiry(), now_ms, self.params),
                            now_ms)
                if a.master is not None and a.responder.phase is ResponderPhase.IDLE:
                    a.master = replace(a.master, yielded_to=None)

    def _process_events(self, until_ms: int):
        while True:
            due = [t for t in (self.queue.next_due_ms(), self._next_timeout()) if t is not None]
            if not due or min(due) > until_ms:
                return
            t = min(due)
            for p in self.queue.poll(t):
                rx = self.agents.get(p.receiver_id)
                if rx is not None and rx.active:
                    self._deliver(rx, p.frame, p.sender_id, t)
            self._fire_timeouts(t)

    # -- tick -----------------------------------------------------------------

    def _may_start_master(self, a: VehicleAgent) -> bool:
        m = a.master
        return (m is not None and a.path == RAMP and a.station >= 0
                and m.phase is MasterPhase.IDLE and m.yielded_to is None
                and a.responder.phase is ResponderPhase.IDLE
                and a.station < self.net.ramp.length)

    def _distance(self, a: VehicleAgent) -> Optional[float]:
        if a.path != a.role:
            return None
        try:
            return distance_to_merge(self.net, a.role, a.station)
        except PassedMerge:
            return None

    def _predecessor_gap(self, a: VehicleAgent, active: List[VehicleAgent]) -> Optional[float]:
        gaps = [b.station - a.station for b in active
                if b is not a and b.path == a.path and b.station > a.station]
        return min(gaps) if gaps else None

    def _move(self, a: VehicleAgent, t_ms: int):
        dt = self.cfg.dt
        self._positions.pop(a.id, None)
        before = a.station
        moved = step_kinematics(a, dt)
        a.station, a.speed = moved.station, moved.speed
        if a.path == RAMP:
            end = self.net.ramp.length
            if before < end <= a.station:
                self._crossing(a, t_ms, before, a.station, end)
                a.path = FREEWAY
                a.station = self.net.merge_station + (a.station - end)
        elif a.role == FREEWAY:
            m = self.net.merge_station
            if before < m <= a.station:
                self._crossing(a, t_ms, before, a.station, m)
        if a.path == FREEWAY and a.station > self.net.freeway.length:
            a.active = False

    def _crossing(self, a: VehicleAgent, t_ms: int, s0: float, s1: float, target: float):
        frac = (target - s0) / (s1 - s0)
        t = t_ms + frac * self.cfg.tick_ms
        self.trace.defer(record(math.floor(t), "crossing", a.id, t_s=f"{t / 1000:.6f}",
                                role=a.role))

    def step(self):
        t_ms = self.now_ms
        self._process_events(t_ms)
        active = self._active()
        for a in active:
            self._snapshot_header(a, t_ms)
        for a in active:
            if self._may_start_master(a):
                self._apply(a, "master", on_ramp_entry(a.master, t_ms, self.params), t_ms)
        for a in active:
            self._transmit(a, MsgType.BSM, None, t_ms)
        for a in active:
            self.trace.add(record(t_ms, "tick", a.id, path=a.path, station=f"{a.station:.3f}",
                                  speed=f"{a.speed:.3f}", accel=f"{a.accel:.3f}"))
        now_s = t_ms / 1000.0
        for a in active:
            a.accel = driver_accel(a, self._distance(a), now_s, self._predecessor_gap(a, active))
        for a in active:
            self._move(a, t_ms)
        self.now_ms += self.cfg.tick_ms

    def run(self) -> Tuple[Trace, SummaryReport]:
        end_ms = round(self.cfg.duration_s * 1000)
        while self.now_ms <= end_ms and self._active():
            self.step()
        self.trace.flush()
        return self.trace, metrics(self.trace.records)


def run(scenario) -> Tuple[Trace, SummaryReport]:
    """Run a scenario (anything with ``network``, ``vehicles`` and ``sim`` attributes)."""
    return Simulation(scenario.network, scenario.vehicles, scenario.sim).run()
