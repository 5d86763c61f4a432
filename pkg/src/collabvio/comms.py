"""Wire format, request/response protocol and a lockstep network model.

All integers and floats are little-endian.  Every message starts with an
8-byte magic naming its type followed by a ``u32`` format version.

RequestUAV::

    magic[8] version:u32 sender:u32 t:f64 vlad[2048]

MessageUAV::

    magic[8] version:u32 sender:u32 t:f64
    M:u32     M x (p[3] f64, q[4] f64)
    N:u32     N x (alpha, beta, rho f64, anchor:u16, descriptor[32])
    d:u32     d(d+1)/2 f64 (row-major lower triangle)
    T:u32     T x (id:u32, descriptor[32], n:u32, n x (u f64, v f64, frame:u16))
"""

from __future__ import annotations

import csv
import logging
import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .fusion import RemoteSnapshot
from .place import VLAD_BYTES, BinaryVlad, query_keyframes
from .state import InverseDepthFeature, SlidingWindow
from .vision import Observation, Track

logger = logging.getLogger(__name__)

WIRE_VERSION = 1
REQUEST_MAGIC = b"CVREQUAV"
MESSAGE_MAGIC = b"CVMSGUAV"
HEADER_BYTES = 12
DESCRIPTOR_BYTES = 32
REQUEST_SIZE = HEADER_BYTES + 4 + 8 + VLAD_BYTES  # 2072


class WireFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


# ---------------------------------------------------------------------------
# message types


@dataclass
class RequestUAV:
    sender_id: int
    timestamp: float
    vlad: bytes

    def __post_init__(self):
        if len(self.vlad) != VLAD_BYTES:
            raise ValueError(f"VLAD must be {VLAD_BYTES} bytes")
        self.vlad = bytes(self.vlad)


@dataclass
class WireTrack:
    track_id: int
    descriptor: bytes
    uv: np.ndarray  # (n, 2) f64
    frames: np.ndarray  # (n,) window indices

    def __eq__(self, other):
        return (
            isinstance(other, WireTrack)
            and self.track_id == other.track_id
            and self.descriptor == other.descriptor
            and np.array_equal(self.uv, other.uv)
            and np.array_equal(self.frames, other.frames)
        )


@dataclass
class MessageUAV:
    sender_id: int
    timestamp: float
    positions: np.ndarray  # (M, 3)
    quats: np.ndarray  # (M, 4)
    features: np.ndarray  # (N, 3) alpha, beta, rho
    anchors: np.ndarray  # (N,)
    feature_descriptors: np.ndarray  # (N, 32) uint8
    cov: np.ndarray  # (d, d)
    tracks: list = field(default_factory=list)

    def __eq__(self, other):
        if not isinstance(other, MessageUAV):
            return False
        arrays = ("positions", "quats", "features", "anchors", "feature_descriptors", "cov")
        return (
            self.sender_id == other.sender_id
            and self.timestamp == other.timestamp
            and all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
            and self.tracks == other.tracks
        )

    @classmethod
    def from_snapshot(cls, snap):
        feats = snap.features
        zero = np.zeros(DESCRIPTOR_BYTES, dtype=np.uint8)
        tracks = []
        for tr in snap.tracks:
            desc = zero if tr.descriptor is None else np.asarray(tr.descriptor, dtype=np.uint8)
            tracks.append(
                WireTrack(
                    int(tr.track_id),
                    desc.tobytes(),
                    np.array([[ob.u, ob.v] for ob in tr.observations], dtype=float).reshape(-1, 2),
                    np.array([ob.frame for ob in tr.observations], dtype=np.int64),
                )
            )
        return cls(
            int(snap.agent_id),
            float(snap.timestamp),
            np.asarray(snap.window.positions, float).reshape(-1, 3),
            np.asarray(snap.window.quats, float).reshape(-1, 4),
            np.array([[f.alpha, f.beta, f.rho] for f in feats], dtype=float).reshape(-1, 3),
            np.array([f.anchor_index for f in feats], dtype=np.int64),
            np.array([zero if f.descriptor is None else f.descriptor for f in feats], dtype=np.uint8).reshape(
                -1, DESCRIPTOR_BYTES
            ),
            np.asarray(snap.cov, float),
            tracks,
        )

    def to_snapshot(self):
        M = len(self.positions)
        window = SlidingWindow(max(M, 1), self.positions.copy(), self.quats.copy(), list(range(M)), [self.timestamp] * M)
        feats = [
            InverseDepthFeature(a, b, r, int(k), j, self.feature_descriptors[j].copy())
            for j, ((a, b, r), k) in enumerate(zip(self.features, self.anchors))
        ]
        tracks = [
            Track(
                wt.track_id,
                [Observation(float(u), float(v), int(f), self.timestamp) for (u, v), f in zip(wt.uv, wt.frames)],
                np.frombuffer(wt.descriptor, dtype=np.uint8).copy(),
            )
            for wt in self.tracks
        ]
        return RemoteSnapshot(self.sender_id, self.timestamp, window, feats, self.cov.copy(), tracks)


def message_size(M, N, d, track_obs=()):
    """Closed-form serialized size of a MessageUAV."""
    size = HEADER_BYTES + 4 + 8
    size += 4 + 56 * M
    size += 4 + N * (24 + 2 + DESCRIPTOR_BYTES)
    size += 4 + 8 * d * (d + 1) // 2
    size += 4 + sum(4 + DESCRIPTOR_BYTES + 4 + 18 * n for n in track_obs)
    return size


# ---------------------------------------------------------------------------
# serialization


def _header(magic):
    return magic + struct.pack("<I", WIRE_VERSION)


def serialize(msg):
    if isinstance(msg, RequestUAV):
        return _header(REQUEST_MAGIC) + struct.pack("<Id", msg.sender_id, msg.timestamp) + msg.vlad
    if not isinstance(msg, MessageUAV):
        raise TypeError(f"cannot serialize {type(msg).__name__}")
    parts = [_header(MESSAGE_MAGIC), struct.pack("<Id", msg.sender_id, msg.timestamp)]
    M = len(msg.positions)
    parts.append(struct.pack("<I", M))
    parts.append(np.hstack([msg.positions, msg.quats]).astype("<f8").tobytes())
    N = len(msg.features)
    parts.append(struct.pack("<I", N))
    for j in range(N):
        parts.append(msg.features[j].astype("<f8").tobytes())
        parts.append(struct.pack("<H", int(msg.anchors[j])))
        parts.append(msg.feature_descriptors[j].astype(np.uint8).tobytes())
    d = msg.cov.shape[0]
    parts.append(struct.pack("<I", d))
    parts.append(msg.cov[np.tril_indices(d)].astype("<f8").tobytes())
    parts.append(struct.pack("<I", len(msg.tracks)))
    rec = np.dtype([("u", "<f8"), ("v", "<f8"), ("f", "<u2")])
    for wt in msg.tracks:
        parts.append(struct.pack("<I", wt.track_id))
        parts.append(wt.descriptor)
        n = len(wt.frames)
        parts.append(struct.pack("<I", n))
        obs = np.zeros(n, dtype=rec)
        obs["u"], obs["v"], obs["f"] = wt.uv[:, 0], wt.uv[:, 1], wt.frames
        parts.append(obs.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise WireFormatError(f"truncated buffer: need {n} bytes", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count):
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize * count), dtype=dtype).copy()


def deserialize(buf):
    rd = _Reader(buf)
    magic = bytes(rd.take(8))
    if magic not in (REQUEST_MAGIC, MESSAGE_MAGIC):
        raise WireFormatError("bad magic", 0)
    (version,) = rd.unpack("<I")
    if version != WIRE_VERSION:
        raise WireFormatError(f"unsupported version {version}", 8)
    sender, t = rd.unpack("<Id")
    if magic == REQUEST_MAGIC:
        vlad = bytes(rd.take(VLAD_BYTES))
        msg = RequestUAV(sender, t, vlad)
    else:
        (M,) = rd.unpack("<I")
        poses = rd.array("<f8", 7 * M).reshape(M, 7)
        (N,) = rd.unpack("<I")
        feats, anchors, descs = np.zeros((N, 3)), np.zeros(N, dtype=np.int64), np.zeros((N, DESCRIPTOR_BYTES), np.uint8)
        for j in range(N):
            feats[j] = rd.array("<f8", 3)
            (anchors[j],) = rd.unpack("<H")
            descs[j] = rd.array(np.uint8, DESCRIPTOR_BYTES)
        (d,) = rd.unpack("<I")
        tri = rd.array("<f8", d * (d + 1) // 2)
        cov = np.zeros((d, d))
        cov[np.tril_indices(d)] = tri
        cov = cov + np.tril(cov, -1).T
        (T,) = rd.unpack("<I")
        rec = np.dtype([("u", "<f8"), ("v", "<f8"), ("f", "<u2")])
        tracks = []
        for _ in range(T):
            (tid,) = rd.unpack("<I")
            desc = bytes(rd.take(DESCRIPTOR_BYTES))
            (n,) = rd.unpack("<I")
            obs = rd.array(rec, n)
            tracks.append(
                WireTrack(tid, desc, np.column_stack([obs["u"], obs["v"]]).astype(float), obs["f"].astype(np.int64))
            )
        msg = MessageUAV(sender, t, poses[:, :3].copy(), poses[:, 3:].copy(), feats, anchors, descs, cov, tracks)
    if rd.pos != len(rd.buf):
        raise WireFormatError("trailing bytes", rd.pos)
    return msg


# ---------------------------------------------------------------------------
# network


@dataclass
class _InFlight:
    t_send: float
    t_arrive: float
    sender: int
    receiver: int
    msg_type: str
    payload: bytes
    seq: int


class LinkModel:
    """Fixed-latency lossy links with per-pair FIFO delivery and byte counters."""

    def __init__(self, agents, latency=0.01, drop_prob=0.0, seed=0):
        if not 0 <= drop_prob <= 1:
            raise ValueError("drop_prob must lie in [0, 1]")
        self.agents = set(agents)
        self.latency = latency
        self.drop_prob = drop_prob
        self.rng = np.random.default_rng(seed)
        self.queues = {}
        self.log = []  # (t, sender, receiver, msg_type, bytes)
        self.totals = {}  # msg_type -> [count, bytes]
        self.seq = 0
        self.t_last = -np.inf

    def send(self, t, sender, receiver, msg_type, payload):
        if receiver not in self.agents:
            logger.warning("dropping %s to unknown agent %s", msg_type, receiver)
            return False
        n = len(payload)
        self.log.append((t, sender, receiver, msg_type, n))
        tot = self.totals.setdefault(msg_type, [0, 0])
        tot[0] += 1
        tot[1] += n
        self.seq += 1
        if self.drop_prob > 0 and self.rng.random() < self.drop_prob:
            return False
        q = self.queues.setdefault((sender, receiver), deque())
        q.append(_InFlight(t, t + self.latency, sender, receiver, msg_type, payload, self.seq))
        return True

    def deliver(self, t_now):
        """Messages due by ``t_now``, ordered by arrival time then send order."""
        if t_now < self.t_last:
            raise ValueError("network time must be monotone")
        self.t_last = t_now
        due = []
        for key in sorted(self.queues):
            q = self.queues[key]
            while q and q[0].t_arrive <= t_now + 1e-9:
                due.append(q.popleft())
        due.sort(key=lambda m: (m.t_arrive, m.seq))
        return due

    def bytes_by_type(self):
        return {k: {"count": v[0], "bytes": v[1]} for k, v in sorted(self.totals.items())}

    def export_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "sender", "receiver", "msg_type", "bytes"])
            for t, s, r, k, n in self.log:
                w.writerow([repr(float(t)), s, r, k, n])


def network_deliver(link, t_now):
    return link.deliver(t_now)


# ---------------------------------------------------------------------------
# protocol


@dataclass
class Event:
    kind: str  # "frame-tick" | "request-received" | "response-received"
    t: float
    payload: object = None


class ProtocolNode:
    """Per-agent request/response state machine.

    ``keyframes`` is the agent's keyframe database; each keyframe carries the
    serialized MessageUAV in ``kf.snapshot`` form (converted on send).
    """

    def __init__(self, agent_id, peers, threshold=0.15, dedup_time=1.0):
        self.agent_id = agent_id
        self.peers = [p for p in peers if p != agent_id]
        self.threshold = threshold
        self.dedup_time = dedup_time
        self.keyframes = []
        self.inbox = []
        self.last_sent = {}  # (keyframe id, requester) -> t
        self.ignored_self = 0

    def step(self, event):
        """Returns a list of ``(receiver, message)``."""
        if event.kind == "frame-tick":
            vlad = event.payload
            data = vlad.tobytes() if isinstance(vlad, BinaryVlad) else bytes(vlad)
            req = RequestUAV(self.agent_id, event.t, data)
            return [(p, req) for p in self.peers]
        if event.kind == "request-received":
            req = event.payload
            if req.sender_id == self.agent_id:
                return []
            kf = query_keyframes(self.keyframes, BinaryVlad.frombytes(req.vlad), self.threshold)
            if kf is None:
                return []
            key = (kf.id, req.sender_id)
            last = self.last_sent.get(key)
            if last is not None and event.t - last < self.dedup_time:
                return []
            self.last_sent[key] = event.t
            return [(req.sender_id, MessageUAV.from_snapshot(kf.snapshot))]
        if event.kind == "response-received":
            msg = event.payload
            if msg.sender_id == self.agent_id:
                self.ignored_self += 1
                return []
            self.inbox.append((event.t, msg))
            return []
        raise ValueError(f"unknown protocol event {event.kind!r}")

    def drain(self):
        out, self.inbox = self.inbox, []
        return out


def protocol_step(node, event):
    return node.step(event)


def naive_broadcast_step(node, t, message):
    """Full MessageUAV to every peer (bandwidth baseline)."""
    return [(p, message) for p in node.peers]


def message_type(msg):
    return "request" if isinstance(msg, RequestUAV) else "message"


__all__ = [
    "RequestUAV",
    "MessageUAV",
    "WireTrack",
    "WireFormatError",
    "REQUEST_SIZE",
    "message_size",
    "serialize",
    "deserialize",
    "LinkModel",
    "network_deliver",
    "Event",
    "ProtocolNode",
    "protocol_step",
    "naive_broadcast_step",
]
