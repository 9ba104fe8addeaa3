"""Merge coordination handshake: master and responder state machines.

A ramp vehicle acts as master. On entering the ramp it announces itself,
collects trajectories for a short window, then proposes a merge plan
(per-vehicle arrival estimate and assigned slot at the merge point).
Every listed vehicle acknowledges; once all acknowledgements are in, the
master confirms and each vehicle derives its advisory from the plan::

    master                          responders
      |-- RAMP_ENTRY_NOTIFY ------------>|
      |        (collect window)          |
      |-- MERGE_PROPOSAL(plan) --------->|
      |<------------- PROPOSAL_ACK ------|   one per responder
      |-- MERGE_CONFIRM(plan) ---------->|

Both machines are pure step functions. They never read the clock or touch
the radio; the caller feeds events and transmits the returned emissions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import List, Mapping, NamedTuple, Optional, Tuple, Union

from .codec import AckPayload, MergePlanWire, MsgType, encode_plan
from .geometry import FREEWAY, RAMP


class ProtocolError(Exception):
    pass


class WrongPhase(ProtocolError):
    pass


class IllegalTransition(ProtocolError):
    pass


class EmptyInput(ProtocolError, ValueError):
    pass


class NotInPlan(ProtocolError, KeyError):
    pass


@dataclass(frozen=True)
class ProtocolParams:
    headway_s: float = 2.0
    collect_window_s: float = 1.0
    retransmit_ms: int = 300
    max_retries: int = 3
    slowdown_epsilon_s: float = 0.25

    def __post_init__(self):
        for name in ("headway_s", "collect_window_s", "retransmit_ms",
                     "max_retries", "slowdown_epsilon_s"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_retries > 3:
            raise ValueError("max_retries is limited to 3")

    @property
    def expiry_ms(self) -> int:
        return 10 * self.retransmit_ms


class PlanEntry(NamedTuple):
    vehicle_id: int
    eta_s: float
    slot_s: float


@dataclass(frozen=True)
class MergePlan:
    plan_id: int
    master_id: int
    plan_epoch_ms: int
    entries: Tuple[PlanEntry, ...]

    @property
    def vehicle_ids(self) -> Tuple[int, ...]:
        return tuple(e.vehicle_id for e in self.entries)

    def index_of(self, vehicle_id: int) -> int:
        for k, e in enumerate(self.entries):
            if e.vehicle_id == vehicle_id:
                return k
        raise NotInPlan(vehicle_id)

    def entry(self, vehicle_id: int) -> PlanEntry:
        return self.entries[self.index_of(vehicle_id)]

    def to_wire(self) -> MergePlanWire:
        return MergePlanWire(
            self.plan_id, self.master_id, self.plan_epoch_ms,
            tuple((e.vehicle_id, round(e.eta_s * 1000), round(e.slot_s * 1000))
                  for e in self.entries))

    @classmethod
    def from_wire(cls, w: MergePlanWire) -> "MergePlan":
        return cls(w.plan_id, w.master_id, w.plan_epoch_ms,
                   tuple(PlanEntry(vid, eta / 1000, slot / 1000) for vid, eta, slot in w.entries))

    def encode(self) -> bytes:
        return encode_plan(self.to_wire())


def compute_merge_order(etas: Mapping[int, float], h: float) -> List[PlanEntry]:
    """First-come order with slots pushed back to keep at least ``h`` between them.

    Ties in arrival estimate go to the smaller vehicle id.
    """
    if not etas:
        raise EmptyInput("no arrival estimates")
    order = sorted(etas.items(), key=lambda kv: (kv[1], kv[0]))
    entries = []
    prev_slot = None
    for vid, eta in order:
        slot = eta if prev_slot is None else max(eta, prev_slot + h)
        entries.append(PlanEntry(vid, eta, slot))
        prev_slot = slot
    return entries


# -- advisories -------------------------------------------------------------

class AdvisoryKind(Enum):
    SLOW_DOWN = "SlowDown"
    MAINTAIN_SPEED = "MaintainSpeed"
    MERGE_BEHIND = "MergeBehind"
    MERGE_AHEAD = "MergeAhead"


@dataclass(frozen=True)
class Advisory:
    kind: AdvisoryKind
    reference_vehicle_id: Optional[int]
    slot_s: float

    def __post_init__(self):
        needs_ref = self.kind is not AdvisoryKind.MAINTAIN_SPEED
        if needs_ref != (self.reference_vehicle_id is not None):
            raise ValueError(f"{self.kind.value} reference presence mismatch")


def advisory_for(plan: MergePlan, self_id: int, own_eta_s: float, role: str,
                 slowdown_epsilon_s: float = 0.25) -> Advisory:
    k = plan.index_of(self_id)
    slot = plan.entries[k].slot_s
    if role == RAMP:
        if k > 0:
            return Advisory(AdvisoryKind.MERGE_BEHIND, plan.entries[k - 1].vehicle_id, slot)
        if len(plan.entries) > 1:
            return Advisory(AdvisoryKind.MERGE_AHEAD, plan.entries[1].vehicle_id, slot)
    elif slot - own_eta_s > slowdown_epsilon_s:
        return Advisory(AdvisoryKind.SLOW_DOWN, plan.master_id, slot)
    return Advisory(AdvisoryKind.MAINTAIN_SPEED, None, slot)


# -- events and results -----------------------------------------------------

@dataclass(frozen=True)
class Timeout:
    pass


@dataclass(frozen=True)
class Ack:
    plan_id: int
    sender: int


@dataclass(frozen=True)
class ForeignNotify:
    sender: int


@dataclass(frozen=True)
class ForeignProposal:
    plan: MergePlan


@dataclass(frozen=True)
class Proposal:
    plan: MergePlan


@dataclass(frozen=True)
class Confirm:
    plan_id: int


@dataclass(frozen=True)
class Expiry:
    pass


MasterEvent = Union[Timeout, Ack, ForeignNotify, ForeignProposal]
ResponderEvent = Union[Proposal, Confirm, Expiry]
Emission = Tuple[MsgType, Union[None, MergePlanWire, AckPayload]]


class StepResult(NamedTuple):
    state: object
    emissions: List[Emission]
    advisory: Optional[Advisory] = None


# -- master -----------------------------------------------------------------

class MasterPhase(Enum):
    IDLE = "Idle"
    COLLECTING = "Collecting"
    PROPOSAL_SENT = "ProposalSent"
    COMMITTED = "Committed"
    ABORTED = "Aborted"


@dataclass(frozen=True)
class MasterState:
    vehicle_id: int
    role: str = RAMP
    phase: MasterPhase = MasterPhase.IDLE
    plan: Optional[MergePlan] = None
    acked_ids: frozenset = frozenset()
    retries_left: int = 0
    next_timeout_ms: Optional[int] = None
    plans_built: int = 0
    yielded_to: Optional[int] = None

    @property
    def others(self) -> frozenset:
        if self.plan is None:
            return frozenset()
        return frozenset(self.plan.vehicle_ids) - {self.vehicle_id}


def on_ramp_entry(master: MasterState, now_ms: int,
                  params: ProtocolParams = ProtocolParams()) -> StepResult:
    if master.role != RAMP:
        raise WrongPhase(f"vehicle {master.vehicle_id} is a {master.role} vehicle, not a ramp master")
    if master.phase is not MasterPhase.IDLE:
        raise WrongPhase(f"ramp entry while {master.phase.value}")
    state = replace(master, phase=MasterPhase.COLLECTING, plan=None, acked_ids=frozenset(),
                    yielded_to=None,
                    next_timeout_ms=now_ms + round(params.collect_window_s * 1000))
    return StepResult(state, [(MsgType.RAMP_ENTRY_NOTIFY, None)])


def _build_plan(state: MasterState, etas: Mapping[int, float], now_ms: int,
                params: ProtocolParams) -> MergePlan:
    # work in whole milliseconds so the plan survives the wire unchanged
    eta_ms = {vid: max(0, round(eta * 1000)) for vid, eta in etas.items()}
    entries = compute_merge_order(eta_ms, round(params.headway_s * 1000))
    n = state.plans_built + 1
    plan_id = ((state.vehicle_id & 0xFFFF) << 16) | (n & 0xFFFF)
    return MergePlan(plan_id, state.vehicle_id, now_ms,
                     tuple(PlanEntry(vid, eta / 1000, slot / 1000) for vid, eta, slot in entries))


def _propose(state: MasterState, etas: Mapping[int, float], now_ms: int,
             params: ProtocolParams) -> StepResult:
    plan = _build_plan(state, etas, now_ms, params)
    state = replace(state, phase=MasterPhase.PROPOSAL_SENT, plan=plan, acked_ids=frozenset(),
                    retries_left=params.max_retries, plans_built=state.plans_built + 1,
                    next_timeout_ms=now_ms + params.retransmit_ms)
    emissions = [(MsgType.MERGE_PROPOSAL, plan.to_wire())]
    if not state.others:
        return _commit(state, emissions, params)
    return StepResult(state, emissions)


def _commit(state: MasterState, emissions: List[Emission], params: ProtocolParams) -> StepResult:
    plan = state.plan
    state = replace(state, phase=MasterPhase.COMMITTED, next_timeout_ms=None)
    emissions = emissions + [(MsgType.MERGE_CONFIRM, plan.to_wire())]
    own = plan.entry(state.vehicle_id)
    adv = advisory_for(plan, state.vehicle_id, own.eta_s, state.role, params.slowdown_epsilon_s)
    return StepResult(state, emissions, adv)


def _abort(state: MasterState) -> StepResult:
    return StepResult(replace(state, phase=MasterPhase.ABORTED, next_timeout_ms=None), [])


_YIELDABLE = (MasterPhase.IDLE, MasterPhase.COLLECTING, MasterPhase.PROPOSAL_SENT)


def master_step(state: MasterState, event: MasterEvent, now_ms: int,
                etas: Optional[Mapping[int, float]] = None,
                params: ProtocolParams = ProtocolParams()) -> StepResult:
    """Advance the master by one event.

    ``etas`` maps vehicle id to seconds-from-now at the merge point for every
    fresh, reachable vehicle (including the master itself); it is only
    consulted on timeouts that (re)build a plan.
    """
    phase = state.phase

    if isinstance(event, (ForeignNotify, ForeignProposal)):
        other = event.sender if isinstance(event, ForeignNotify) else event.plan.master_id
        if other < state.vehicle_id and phase in _YIELDABLE and state.role == RAMP:
            return StepResult(replace(state, phase=MasterPhase.IDLE, plan=None,
                                      acked_ids=frozenset(), next_timeout_ms=None,
                                      yielded_to=other), [])
        return StepResult(state, [])

    if isinstance(event, Ack):
        if phase is not MasterPhase.PROPOSAL_SENT or event.plan_id != state.plan.plan_id \
                or event.sender not in state.others:
            return StepResult(state, [])
        state = replace(state, acked_ids=state.acked_ids | {event.sender})
        if state.acked_ids >= state.others:
            return _commit(state, [], params)
        return StepResult(state, [])

    if isinstance(event, Timeout):
        etas = etas or {}
        if phase is MasterPhase.COLLECTING:
            if state.vehicle_id not in etas:
                return _abort(state)
            return _propose(state, etas, now_ms, params)
        if phase is MasterPhase.PROPOSAL_SENT:
            if state.retries_left > 0:
                state = replace(state, retries_left=state.retries_left - 1,
                                next_timeout_ms=now_ms + params.retransmit_ms)
                return StepResult(state, [(MsgType.MERGE_PROPOSAL, state.plan.to_wire())])
            keep = {vid for vid in state.acked_ids if vid in etas}
            if not keep or state.vehicle_id not in etas:
                return _abort(state)
            keep.add(state.vehicle_id)
            return _propose(state, {vid: etas[vid] for vid in keep}, now_ms, params)
        raise IllegalTransition(f"timeout while {phase.value}")

    raise IllegalTransition(f"unsupported master event {event!r}")


# -- responder --------------------------------------------------------------

class ResponderPhase(Enum):
    IDLE = "Idle"
    ACK_SENT = "AckSent"
    COMMITTED = "Committed"


@dataclass(frozen=True)
class ResponderState:
    vehicle_id: int
    role: str = FREEWAY
    phase: ResponderPhase = ResponderPhase.IDLE
    plan: Optional[MergePlan] = None
    last_acked_plan_id: Optional[int] = None
    next_timeout_ms: Optional[int] = None


def responder_step(state: ResponderState, event: ResponderEvent, now_ms: int,
                   params: ProtocolParams = ProtocolParams()) -> StepResult:
    """Advance a responder. Inputs that do not concern this vehicle are ignored."""
    me = state.vehicle_id
    if isinstance(event, Proposal):
        plan = event.plan
        if me not in plan.vehicle_ids or state.phase is ResponderPhase.COMMITTED:
            return StepResult(state, [])
        ack = [(MsgType.PROPOSAL_ACK, AckPayload(plan.plan_id, me))]
        if state.phase is ResponderPhase.ACK_SENT and state.plan == plan:
            return StepResult(state, ack)
        state = replace(state, phase=ResponderPhase.ACK_SENT, plan=plan,
                        last_acked_plan_id=plan.plan_id,
                        next_timeout_ms=now_ms + params.expiry_ms)
        return StepResult(state, ack)

    if isinstance(event, Confirm):
        if state.phase is not ResponderPhase.ACK_SENT or event.plan_id != state.plan.plan_id:
            return StepResult(state, [])
        state = replace(state, phase=ResponderPhase.COMMITTED, next_timeout_ms=None)
        own = state.plan.entry(me)
        adv = advisory_for(state.plan, me, own.eta_s, state.role, params.slowdown_epsilon_s)
        return StepResult(state, [], adv)

    if isinstance(event, Expiry):
        if state.phase is ResponderPhase.ACK_SENT:
            return StepResult(replace(state, phase=ResponderPhase.IDLE, plan=None,
                                      next_timeout_ms=None), [])
        return StepResult(state, [])

    raise IllegalTransition(f"unsupported responder event {event!r}")

