"""Independent reference implementations and generators shared by the tests."""

import math
import random

import numpy as np

from merge_coord.codec import (AckPayload, BasicSafetyMessage, MergePlanWire, MsgType,
                               ProtocolMessage)
from merge_coord.geometry import Polyline
from merge_coord.trajectory import Unreachable

U32 = 2**32 - 1


def random_message(rng: random.Random) -> ProtocolMessage:
    h = BasicSafetyMessage(rng.randint(0, U32), rng.randint(0, U32), rng.randint(0, 2**64 - 1),
                           rng.randint(-2**31, 2**31 - 1), rng.randint(-2**31, 2**31 - 1),
                           rng.randint(0, 0xFFFF), rng.randint(0, 35999))
    tag = MsgType(rng.randint(0, 4))
    payload = None
    if tag in (MsgType.MERGE_PROPOSAL, MsgType.MERGE_CONFIRM):
        n = rng.randint(0, 12)
        ids = rng.sample(range(0, 10_000), n)
        slot = 0
        entries = []
        for vid in ids:
            slot += rng.randint(0, 5000)
            entries.append((vid, rng.randint(0, slot), slot))
        payload = MergePlanWire(rng.randint(0, U32), rng.randint(0, U32),
                                rng.randint(0, 2**64 - 1), tuple(entries))
    elif tag is MsgType.PROPOSAL_ACK:
        payload = AckPayload(rng.randint(0, U32), rng.randint(0, U32))
    return ProtocolMessage(tag, h, payload)


def forward_eta(d, v, a, dt=0.001, chunk=20_000):
    """Integrate position at 1 ms steps (midpoint speed, speed floored at 0)."""
    pos, t = 0.0, 0.0
    while True:
        k = np.arange(chunk, dtype=float)
        v0 = np.maximum(v + a * (t + k * dt), 0.0)
        v1 = np.maximum(v + a * (t + (k + 1) * dt), 0.0)
        step = 0.5 * (v0 + v1) * dt
        cum = pos + np.cumsum(step)
        hit = np.nonzero(cum >= d)[0]
        if hit.size:
            i = int(hit[0])
            before = cum[i - 1] if i else pos
            # linear interpolation inside the hitting step
            return t + i * dt + dt * (d - before) / step[i]
        if v1[-1] == 0.0 and a <= 0:
            return Unreachable
        pos, t = float(cum[-1]), t + chunk * dt


def random_polyline(rng: random.Random, n=None, box=50.0) -> Polyline:
    n = n or rng.randint(2, 6)
    pts = []
    while len(pts) < n:
        p = (rng.uniform(-box, box), rng.uniform(-box, box))
        if not pts or math.dist(p, pts[-1]) > 1e-3:
            pts.append(p)
    return Polyline(tuple(pts))
