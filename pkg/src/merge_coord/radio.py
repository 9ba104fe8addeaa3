"""Single-hop broadcast channel: hard range cutoff plus Bernoulli loss.

Randomness comes from :class:`ChannelRng`, a xorshift64* generator whose
state is seeded through splitmix64. Both algorithms are fixed here so that
draw sequences (and therefore traces) are reproducible bit for bit.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class ChannelConfig:
    range_m: float = 300.0
    loss_prob: float = 0.0
    latency_ms: int = 20

    def __post_init__(self):
        if not (1.0 <= self.range_m <= 10_000.0):
            raise ValueError(f"range_m must be in [1, 10000], got {self.range_m}")
        if not (0.0 <= self.loss_prob <= 1.0):
            raise ValueError(f"loss_prob must be in [0, 1], got {self.loss_prob}")
        if self.latency_ms < 0 or int(self.latency_ms) != self.latency_ms:
            raise ValueError(f"latency_ms must be a non-negative integer, got {self.latency_ms}")


def splitmix64(x: int) -> Tuple[int, int]:
    """One splitmix64 step: returns (new_state, output)."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


class ChannelRng:
    """xorshift64* seeded via splitmix64.

    ``uniform()`` takes the top 53 bits of each output; ``gauss()`` uses
    Box-Muller and caches the second variate.
    """

    def __init__(self, seed: int):
        self.seed = seed & MASK64
        _, state = splitmix64(self.seed)
        self.state = state or 0x9E3779B97F4A7C15
        self._spare = None

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & MASK64

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def gauss(self, sigma: float = 1.0) -> float:
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z * sigma
        u1 = 1.0 - self.uniform()  # (0, 1]
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2) * sigma


@dataclass(frozen=True)
class InFlightPacket:
    frame: bytes
    sender_id: int
    receiver_id: int
    deliver_at_ms: int


def in_range(a: Sequence[float], b: Sequence[float], cfg: ChannelConfig) -> bool:
    return math.hypot(a[0] - b[0], a[1] - b[1]) <= cfg.range_m


def broadcast(sender_id: int, sender_pos: Sequence[float],
              all_nodes: Iterable[Tuple[int, Sequence[float]]], frame: bytes,
              now_ms: int, cfg: ChannelConfig, rng: ChannelRng) -> List[InFlightPacket]:
    """Packets for every in-range receiver that survives its loss draw.

    One draw per in-range receiver, consumed in ascending receiver id.
    """
    packets = []
    for rid, pos in sorted(all_nodes, key=lambda n: n[0]):
        if rid == sender_id or not in_range(sender_pos, pos, cfg):
            continue
        if rng.uniform() < cfg.loss_prob:
            continue
        packets.append(InFlightPacket(frame, sender_id, rid, now_ms + cfg.latency_ms))
    return packets


class DeliveryQueue:
    """Packets in flight, released in (deliver_at_ms, sender_id, receiver_id) order."""

    def __init__(self):
        self._heap = []
        self._n = 0

    def __len__(self):
        return len(self._heap)

    def push(self, packet: InFlightPacket):
        heapq.heappush(self._heap, (packet.deliver_at_ms, packet.sender_id,
                                    packet.receiver_id, self._n, packet))
        self._n += 1

    def extend(self, packets: Iterable[InFlightPacket]):
        for p in packets:
            self.push(p)

    def next_due_ms(self):
        return self._heap[0][0] if self._heap else None

    def poll(self, now_ms: int) -> List[InFlightPacket]:
        out = []
        while self._heap and self._heap[0][0] <= now_ms:
            out.append(heapq.heappop(self._heap)[-1])
        return out


def poll(queue: DeliveryQueue, now_ms: int) -> List[InFlightPacket]:
    return queue.poll(now_ms)
