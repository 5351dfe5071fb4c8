"""
Classical digital channel between Alice and Bob.

The channel is a single-owner event queue driven by a logical clock. Latency
and jitter consume logical time only, so runs are deterministic for a given
seed. Messages from one sender are always delivered in the order they were
sent, even when the drawn jitter would reorder them.

The protocol premise is that no timing signal crosses the channel, so
payloads are restricted to counts, index lists, relative phase shifts and
iteration numbers. :func:`audit_transcript` checks a transcript for
anything that looks like a timestamp or an oscillator phase sample.
"""
from __future__ import annotations

import enum
import heapq
import json
import math
from dataclasses import dataclass
from typing import Any, Iterable

import numpy as np

from .errors import ChannelClosed


class Party(enum.Enum):
    ALICE = "alice"
    BOB = "bob"

    @property
    def other(self) -> "Party":
        return Party.BOB if self is Party.ALICE else Party.ALICE


class MessageKind(enum.Enum):
    EXCITATION_COMPLETE = "ExcitationComplete"
    INDEX_LIST = "IndexList"
    PHASE_SHIFT_ANNOUNCE = "PhaseShiftAnnounce"
    LOCK_ITERATION_SYNC = "LockIterationSync"
    ACK = "Ack"


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    sender: Party
    sequence: int
    payload: Any = None
    ref: int | None = None  # sequence of the original message when this is a resend or ack


@dataclass(frozen=True)
class ChannelModel:
    base_latency: float = 1.0
    jitter: float = 0.0
    drop_probability: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.base_latency < 0 or self.jitter < 0:
            raise ValueError("latency and jitter must be >= 0")
        if not 0.0 <= self.drop_probability < 1.0:
            raise ValueError("drop_probability must be in [0, 1)")
        if self.jitter > self.base_latency:
            raise ValueError("jitter half-width may not exceed base_latency (negative delays)")


@dataclass(frozen=True)
class DeliveryToken:
    sequence: int
    sender: Party
    send_time: float
    delivery_time: float
    dropped: bool


@dataclass
class TranscriptRecord:
    sequence: int
    sender: str
    kind: str
    payload: Any
    send_time: float
    delivery_time: float
    dropped: bool
    ref: int | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "sequence": self.sequence,
                "sender": self.sender,
                "kind": self.kind,
                "payload": self.payload,
                "send_time": self.send_time,
                "delivery_time": self.delivery_time,
                "dropped": self.dropped,
                "ref": self.ref,
            },
            separators=(",", ":"),
        )


def _jsonable(payload):
    if isinstance(payload, np.ndarray):
        return payload.tolist()
    if isinstance(payload, (np.integer,)):
        return int(payload)
    if isinstance(payload, (np.floating,)):
        return float(payload)
    return payload


def _validate(msg: Message):
    if msg.kind is MessageKind.INDEX_LIST:
        bound = None
        idx = msg.payload
        if isinstance(idx, dict):
            bound = idx.get("pairs")
            idx = idx["indices"]
        arr = np.asarray(idx)
        if arr.size and (arr.ndim != 1 or not np.issubdtype(arr.dtype, np.integer)):
            raise ValueError("IndexList payload must be a flat list of integers")
        if arr.size and np.any(np.diff(arr) <= 0):
            raise ValueError("IndexList entries must be unique and sorted")
        if arr.size and (arr[0] < 0 or (bound is not None and arr[-1] >= bound)):
            raise ValueError("IndexList entries out of range")
    elif msg.kind is MessageKind.LOCK_ITERATION_SYNC:
        if not isinstance(msg.payload, (int, np.integer)):
            raise ValueError("LockIterationSync payload must be an integer")
    elif msg.kind is MessageKind.PHASE_SHIFT_ANNOUNCE:
        if not isinstance(msg.payload, (float, int)) or not abs(msg.payload) < 2 * math.pi:
            raise ValueError("PhaseShiftAnnounce payload must be a relative shift in (-2pi, 2pi)")


class Channel:
    """Two-party message queue with latency, jitter and drops.

    ``now`` is the logical clock; the experiment runner advances it with
    :meth:`advance_to` or :meth:`advance_to_next`.
    """

    def __init__(self, model: ChannelModel | None = None):
        self.model = model or ChannelModel()
        self.now = 0.0
        self.closed = False
        self._rng = np.random.default_rng(self.model.seed)
        self._queue: list[tuple[float, int, Message]] = []
        self._order = 0
        self._next_seq = {Party.ALICE: 0, Party.BOB: 0}
        self._last_delivery = {Party.ALICE: -math.inf, Party.BOB: -math.inf}
        self.transcript: list[TranscriptRecord] = []

    def close(self):
        self.closed = True

    def send(self, kind: MessageKind, sender: Party, payload: Any = None, ref: int | None = None) -> DeliveryToken:
        """Enqueue a message from ``sender``; the channel assigns the sequence number."""
        if self.closed:
            raise ChannelClosed("send on a closed channel")
        msg = Message(kind, sender, self._next_seq[sender], payload, ref)
        _validate(msg)
        self._next_seq[sender] += 1
        m = self.model
        delay = m.base_latency
        if m.jitter > 0:
            delay += self._rng.uniform(-m.jitter, m.jitter)
        dropped = bool(m.drop_probability > 0 and self._rng.random() < m.drop_probability)
        # FIFO per sender: never deliver before an earlier message from the same sender
        t_deliver = max(self.now + delay, self._last_delivery[sender])
        token = DeliveryToken(msg.sequence, sender, self.now, t_deliver, dropped)
        if not dropped:
            self._last_delivery[sender] = t_deliver
            heapq.heappush(self._queue, (t_deliver, self._order, msg))
            self._order += 1
        self.transcript.append(
            TranscriptRecord(msg.sequence, sender.value, kind.value, _jsonable(payload), self.now, t_deliver, dropped, ref)
        )
        return token

    def recv(self, receiver: Party | None = None) -> Message | None:
        """Earliest message delivered at or before ``now`` (addressed to ``receiver``), if any."""
        ready = [e for e in self._queue if e[0] <= self.now and (receiver is None or e[2].sender is not receiver)]
        if not ready:
            return None
        entry = min(ready)
        self._queue.remove(entry)
        heapq.heapify(self._queue)
        return entry[2]

    def pending(self) -> int:
        return len(self._queue)

    def next_delivery_time(self, receiver: Party | None = None) -> float | None:
        times = [t for t, _, msg in self._queue if receiver is None or msg.sender is not receiver]
        return min(times) if times else None

    def advance_to(self, t: float):
        if t < self.now:
            raise ValueError("logical time cannot run backwards")
        self.now = t

    def advance_to_next(self, receiver: Party | None = None) -> bool:
        t = self.next_delivery_time(receiver)
        if t is None:
            return False
        self.now = max(self.now, t)
        return True

    def export_transcript(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            for rec in self.transcript:
                fh.write(rec.to_json() + "\n")


def reliable_send(
    channel: Channel,
    kind: MessageKind,
    sender: Party,
    payload: Any = None,
    max_retries: int = 20,
) -> Message:
    """Deliver one message with acknowledge-and-resend; returns the delivered message.

    The receiver acknowledges every copy it gets; the sender resends after a
    timeout of twice the worst-case round trip. Duplicates are resolved by
    the ``ref`` field, which always carries the first copy's sequence.
    Leaves ``channel.now`` at the time the sender holds the acknowledgement.
    """
    m = channel.model
    timeout = 2.0 * 2.0 * (m.base_latency + m.jitter) + 1e-9
    receiver = sender.other
    first = None
    delivered = None
    for _ in range(max_retries + 1):
        token = channel.send(kind, sender, payload, ref=first)
        if first is None:
            first = token.sequence
        deadline = channel.now + timeout
        acked = False
        while True:
            t = channel.next_delivery_time()
            if t is None or t > deadline:
                break
            channel.advance_to(max(channel.now, t))
            msg = channel.recv()
            if msg is None:
                continue
            if msg.sender is sender and msg.kind is kind:
                delivered = delivered or msg
                channel.send(MessageKind.ACK, receiver, None, ref=first)
            elif msg.sender is receiver and msg.kind is MessageKind.ACK and msg.ref == first:
                acked = True
                break
        if acked:
            return delivered
        channel.advance_to(deadline)
    raise ChannelClosed(f"no acknowledgement for {kind.value} after {max_retries} retries")


_FORBIDDEN_KEYS = {"t", "time", "timestamp", "clock", "phase", "phi", "chi", "sample", "samples"}


def audit_transcript(records: Iterable[TranscriptRecord | dict]) -> list[str]:
    """Return a list of violations; empty means no timing information was sent.

    Rules: only PhaseShiftAnnounce may carry a real number (a relative shift,
    bounded by 2 pi); dictionaries may not carry time- or phase-like keys;
    index lists must be integers.
    """
    problems = []
    for rec in records:
        if not isinstance(rec, dict):
            rec = rec.__dict__
        kind, payload, seq = rec["kind"], rec["payload"], rec["sequence"]
        label = f"{rec['sender']}#{seq} {kind}"

        def walk(x, path="payload"):
            if isinstance(x, dict):
                for k, v in x.items():
                    if str(k).lower() in _FORBIDDEN_KEYS:
                        problems.append(f"{label}: forbidden key {path}.{k}")
                    walk(v, f"{path}.{k}")
            elif isinstance(x, (list, tuple)):
                for k, v in enumerate(x[:8] if len(x) > 8 else x):
                    walk(v, f"{path}[{k}]")
                if len(x) > 8 and any(isinstance(v, float) for v in x):
                    problems.append(f"{label}: real-valued list in {path}")
            elif isinstance(x, float) and kind != MessageKind.PHASE_SHIFT_ANNOUNCE.value:
                problems.append(f"{label}: real-valued field {path}")
            elif isinstance(x, str) and kind != MessageKind.ACK.value:
                problems.append(f"{label}: free-text field {path}")

        walk(payload)
        if kind == MessageKind.PHASE_SHIFT_ANNOUNCE.value and not (
            isinstance(payload, (int, float)) and abs(payload) < 2 * math.pi
        ):
            problems.append(f"{label}: phase shift must be a bounded relative angle")
    return problems
