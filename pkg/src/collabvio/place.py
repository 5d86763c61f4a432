"""Binary VLAD place recognition over a 64-word Hamming vocabulary."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VOCAB_SIZE = 64
DESCRIPTOR_BYTES = 32
VLAD_BYTES = VOCAB_SIZE * DESCRIPTOR_BYTES  # 2048
D_MAX = VLAD_BYTES * 8  # 16384 bits
VOCAB_MAGIC = b"CVVOCAB\x00"
VOCAB_VERSION = 1


def popcount(a):
    return int(np.bitwise_count(np.asarray(a, dtype=np.uint8)).sum())


def hamming_to(descriptors, centroids):
    """Pairwise Hamming distances, shape ``(len(descriptors), len(centroids))``."""
    a = np.asarray(descriptors, dtype=np.uint8)
    b = np.asarray(centroids, dtype=np.uint8)
    return np.bitwise_count(a[:, None, :] ^ b[None, :, :]).sum(axis=2, dtype=np.int64)


@dataclass
class BinaryVocabulary:
    centroids: np.ndarray  # (k, nbytes) uint8
    seed: int = 0
    cost: int = 0

    def assign(self, descriptors):
        """Nearest centroid per descriptor; ties resolve to the lowest index."""
        if len(descriptors) == 0:
            return np.zeros(0, dtype=int)
        return np.argmin(hamming_to(descriptors, self.centroids), axis=1)

    def save(self, path):
        """Layout (little-endian): magic[8], u32 version, u32 k, u32 nbytes,
        u64 seed, k*nbytes centroid bytes."""
        k, nb = self.centroids.shape
        head = VOCAB_MAGIC + struct.pack("<IIIQ", VOCAB_VERSION, k, nb, self.seed)
        Path(path).write_bytes(head + self.centroids.astype(np.uint8).tobytes())

    @classmethod
    def load(cls, path):
        buf = Path(path).read_bytes()
        if buf[:8] != VOCAB_MAGIC:
            raise ValueError("not a vocabulary file (bad magic)")
        version, k, nb, seed = struct.unpack_from("<IIIQ", buf, 8)
        if version != VOCAB_VERSION:
            raise ValueError(f"unsupported vocabulary version {version}")
        body = buf[28:]
        if len(body) != k * nb:
            raise ValueError("truncated vocabulary file")
        return cls(np.frombuffer(body, dtype=np.uint8).reshape(k, nb).copy(), seed)


def train_vocabulary(descriptors, seed=0, k=VOCAB_SIZE, max_iters=30):
    """k-medoids in Hamming space (seeded k-medoids++ start, alternating updates).

    The corpus is deduplicated with multiplicities as weights, so repeating
    every descriptor leaves the result unchanged.  Centroids are returned in
    lexicographic byte order.
    """
    descriptors = np.asarray(descriptors, dtype=np.uint8)
    if len(descriptors) < k:
        raise ValueError(f"vocabulary training needs at least {k} descriptors, got {len(descriptors)}")
    uniq, counts = np.unique(descriptors, axis=0, return_counts=True)
    if len(uniq) < k:
        raise ValueError(f"vocabulary training needs at least {k} distinct descriptors")
    w = counts.astype(float)
    rng = np.random.default_rng(seed)

    medoids = [int(rng.choice(len(uniq), p=w / w.sum()))]
    d_near = hamming_to(uniq, uniq[medoids]).min(axis=1).astype(float)
    while len(medoids) < k:
        p = w * d_near**2
        nxt = int(rng.choice(len(uniq), p=p / p.sum()))
        medoids.append(nxt)
        d_near = np.minimum(d_near, hamming_to(uniq, uniq[[nxt]])[:, 0])
    medoids = np.array(medoids)

    for _ in range(max_iters):
        labels = np.argmin(hamming_to(uniq, uniq[medoids]), axis=1)
        new = medoids.copy()
        for c in range(k):
            members = np.flatnonzero(labels == c)
            if len(members) == 0:
                continue
            D = hamming_to(uniq[members], uniq[members])
            new[c] = members[np.argmin(D @ w[members])]
        if np.array_equal(new, medoids):
            break
        medoids = new
    D = hamming_to(uniq, uniq[medoids])
    cost = int((D.min(axis=1) * counts).sum())
    cents = uniq[medoids]
    order = np.lexsort(cents.T[::-1])
    return BinaryVocabulary(cents[order].copy(), int(seed), cost)


@dataclass
class BinaryVlad:
    blocks: np.ndarray  # (k, nbytes) uint8
    timestamp: float = 0.0
    agent_id: int = 0

    def tobytes(self):
        return self.blocks.astype(np.uint8).tobytes()

    @classmethod
    def frombytes(cls, buf, timestamp=0.0, agent_id=0, k=VOCAB_SIZE):
        arr = np.frombuffer(bytes(buf), dtype=np.uint8)
        return cls(arr.reshape(k, -1).copy(), timestamp, agent_id)

    def __eq__(self, other):
        return (
            isinstance(other, BinaryVlad)
            and np.array_equal(self.blocks, other.blocks)
            and self.timestamp == other.timestamp
            and self.agent_id == other.agent_id
        )


def build_vlad(descriptors, vocab, timestamp=0.0, agent_id=0):
    """OR-aggregate the descriptors assigned to each vocabulary word."""
    blocks = np.zeros_like(vocab.centroids)
    if len(descriptors):
        descriptors = np.asarray(descriptors, dtype=np.uint8)
        labels = vocab.assign(descriptors)
        np.bitwise_or.at(blocks, labels, descriptors)
    return BinaryVlad(blocks, timestamp, agent_id)


def score(a, b):
    """Fraction of all VLAD bits set in both ``a`` and ``b``."""
    ba = a.blocks if isinstance(a, BinaryVlad) else np.asarray(a, dtype=np.uint8)
    bb = b.blocks if isinstance(b, BinaryVlad) else np.asarray(b, dtype=np.uint8)
    if ba.shape != bb.shape:
        raise ValueError(f"VLAD shapes differ: {ba.shape} vs {bb.shape}")
    return popcount(ba & bb) / (ba.size * 8)


@dataclass
class Keyframe:
    id: int
    vlad: BinaryVlad
    snapshot: object  # fusion.RemoteSnapshot
    pose: np.ndarray = field(default_factory=lambda: np.zeros(3))


def query_keyframes(db, request, threshold):
    """Best-scoring keyframe if its score exceeds ``threshold``; lower id wins ties."""
    best, best_s = None, -1.0
    for kf in sorted(db, key=lambda kf: kf.id):
        s = score(kf.vlad, request)
        if s > best_s:
            best, best_s = kf, s
    if best is None or best_s <= threshold:
        return None
    return best


def should_create_keyframe(prev_position, position, depths, threshold=0.15):
    """Baseline to mean-depth ratio above ``threshold`` (always true without a
    previous keyframe or without tracked depths)."""
    if prev_position is None or len(depths) == 0:
        return True
    b = float(np.linalg.norm(np.asarray(position, float) - np.asarray(prev_position, float)))
    z = float(np.mean(depths))
    if z <= 0:
        return True
    return b / z > threshold


__all__ = [
    "BinaryVocabulary",
    "BinaryVlad",
    "Keyframe",
    "train_vocabulary",
    "build_vlad",
    "score",
    "query_keyframes",
    "should_create_keyframe",
    "popcount",
    "D_MAX",
    "VLAD_BYTES",
]
