"""Compact little-endian wire format for safety messages and handshake frames.

Frame layout::

    tag u8 | vehicle_id u32 | seq u32 | timestamp_ms u64 | pos_x_cm i32 |
    pos_y_cm i32 | speed_cms u16 | heading_cdeg u16 | payload_len u16 | payload

Plan payload (proposal and confirm)::

    plan_id u32 | master_id u32 | count u8 | plan_epoch_ms u64 |
    count x (vehicle_id u32 | eta_ms u32 | slot_ms u32)

Ack payload: ``plan_id u32 | acker_id u32``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Tuple, Union

HEADER = struct.Struct("<BIIQiiHHH")
HEADER_SIZE = HEADER.size  # 31
PLAN_PREAMBLE = struct.Struct("<IIBQ")
PLAN_ENTRY = struct.Struct("<III")
ACK = struct.Struct("<II")
MAX_HEADING_CDEG = 35999
MAX_PAYLOAD = 0xFFFF

assert HEADER_SIZE == 31


class MsgType(IntEnum):
    BSM = 0
    RAMP_ENTRY_NOTIFY = 1
    MERGE_PROPOSAL = 2
    PROPOSAL_ACK = 3
    MERGE_CONFIRM = 4


class CodecError(ValueError):
    pass


class Truncated(CodecError):
    pass


class UnknownTag(CodecError):
    pass


class MalformedPayload(CodecError):
    pass


class BadHeading(CodecError):
    pass


@dataclass(frozen=True)
class BasicSafetyMessage:
    vehicle_id: int
    seq: int
    timestamp_ms: int
    pos_x_cm: int
    pos_y_cm: int
    speed_cms: int
    heading_cdeg: int


@dataclass(frozen=True)
class MergePlanWire:
    plan_id: int
    master_id: int
    plan_epoch_ms: int
    # (vehicle_id, eta_ms, slot_ms), sorted by slot_ms
    entries: Tuple[Tuple[int, int, int], ...]

    def validate(self):
        if len(self.entries) > 255:
            raise MalformedPayload(f"{len(self.entries)} plan entries exceed 255")
        ids = [e[0] for e in self.entries]
        if len(set(ids)) != len(ids):
            raise MalformedPayload("duplicate vehicle id in plan")
        prev = None
        for vid, eta, slot in self.entries:
            if slot < eta:
                raise MalformedPayload(f"slot {slot} before eta {eta} for vehicle {vid}")
            if prev is not None and slot < prev:
                raise MalformedPayload("plan entries not sorted by slot")
            prev = slot


@dataclass(frozen=True)
class AckPayload:
    plan_id: int
    acker_id: int


Payload = Union[None, MergePlanWire, AckPayload]


@dataclass(frozen=True)
class ProtocolMessage:
    tag: MsgType
    header: BasicSafetyMessage
    payload: Payload = None


_PLAN_TAGS = (MsgType.MERGE_PROPOSAL, MsgType.MERGE_CONFIRM)


def encode_plan(plan: MergePlanWire) -> bytes:
    plan.validate()
    out = [PLAN_PREAMBLE.pack(plan.plan_id, plan.master_id, len(plan.entries),
                              plan.plan_epoch_ms)]
    out.extend(PLAN_ENTRY.pack(*e) for e in plan.entries)
    return b"".join(out)


def decode_plan(b: bytes) -> MergePlanWire:
    if len(b) < PLAN_PREAMBLE.size:
        raise MalformedPayload(f"plan payload of {len(b)} bytes is shorter than its preamble")
    plan_id, master_id, count, epoch = PLAN_PREAMBLE.unpack_from(b, 0)
    if len(b) != PLAN_PREAMBLE.size + count * PLAN_ENTRY.size:
        raise MalformedPayload(f"entry count {count} inconsistent with payload length {len(b)}")
    entries = tuple(PLAN_ENTRY.unpack_from(b, PLAN_PREAMBLE.size + k * PLAN_ENTRY.size)
                    for k in range(count))
    plan = MergePlanWire(plan_id, master_id, epoch, entries)
    plan.validate()
    return plan


def _encode_payload(m: ProtocolMessage) -> bytes:
    if m.tag in _PLAN_TAGS:
        if not isinstance(m.payload, MergePlanWire):
            raise ValueError(f"{m.tag.name} requires a plan payload")
        return encode_plan(m.payload)
    if m.tag == MsgType.PROPOSAL_ACK:
        if not isinstance(m.payload, AckPayload):
            raise ValueError("PROPOSAL_ACK requires an ack payload")
        return ACK.pack(m.payload.plan_id, m.payload.acker_id)
    if m.payload is not None:
        raise ValueError(f"{m.tag.name} carries no payload")
    return b""


def encode_frame(m: ProtocolMessage) -> bytes:
    h = m.header
    if not 0 <= h.heading_cdeg <= MAX_HEADING_CDEG:
        raise BadHeading(f"heading {h.heading_cdeg} cdeg out of range")
    payload = _encode_payload(m)
    if len(payload) > MAX_PAYLOAD:
        raise ValueError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    try:
        head = HEADER.pack(int(m.tag), h.vehicle_id, h.seq, h.timestamp_ms, h.pos_x_cm,
                           h.pos_y_cm, h.speed_cms, h.heading_cdeg, len(payload))
    except struct.error as exc:
        raise ValueError(f"header field out of range: {exc}") from None
    return head + payload


def decode_frame(b: bytes) -> ProtocolMessage:
    b = bytes(b)
    if len(b) < HEADER_SIZE:
        raise Truncated(f"{len(b)} bytes is shorter than the {HEADER_SIZE}-byte header")
    tag, vid, seq, ts, x, y, spd, hdg, plen = HEADER.unpack_from(b, 0)
    if tag > MsgType.MERGE_CONFIRM:
        raise UnknownTag(f"unknown tag {tag}")
    if hdg > MAX_HEADING_CDEG:
        raise BadHeading(f"heading {hdg} cdeg out of range")
    if len(b) < HEADER_SIZE + plen:
        raise Truncated(f"payload_len {plen} but only {len(b) - HEADER_SIZE} bytes follow")
    if len(b) > HEADER_SIZE + plen:
        raise MalformedPayload(f"{len(b) - HEADER_SIZE - plen} trailing bytes after payload")
    tag = MsgType(tag)
    raw = b[HEADER_SIZE:]
    payload: Payload = None
    if tag in _PLAN_TAGS:
        payload = decode_plan(raw)
    elif tag == MsgType.PROPOSAL_ACK:
        if plen != ACK.size:
            raise MalformedPayload(f"ack payload must be {ACK.size} bytes, got {plen}")
        payload = AckPayload(*ACK.unpack(raw))
    elif plen:
        raise MalformedPayload(f"{tag.name} must have an empty payload, got {plen} bytes")
    return ProtocolMessage(tag, BasicSafetyMessage(vid, seq, ts, x, y, spd, hdg), payload)

