import csv

import numpy as np
import pytest

from collabvio.comms import (
    REQUEST_SIZE,
    Event,
    LinkModel,
    MessageUAV,
    ProtocolNode,
    RequestUAV,
    WireFormatError,
    deserialize,
    message_size,
    naive_broadcast_step,
    network_deliver,
    protocol_step,
    serialize,
)
from collabvio.fusion import RemoteSnapshot
from collabvio.place import BinaryVlad, Keyframe
from collabvio.state import SlidingWindow
from conftest import random_message


def _request(rng, sender=0, t=1.0):
    return RequestUAV(sender, t, rng.integers(0, 256, 2048, dtype=np.uint8).tobytes())


def _snapshot(agent_id=1):
    win = SlidingWindow(8, np.zeros((2, 3)), np.tile([1.0, 0, 0, 0], (2, 1)), [0, 1], [0.0, 0.1])
    return RemoteSnapshot(agent_id, 0.1, win, [], np.eye(27), [])


def _node_with_keyframe(agent_id=1, peers=(0, 1, 2)):
    node = ProtocolNode(agent_id, list(peers))
    blocks = np.full((64, 32), 0xFF, dtype=np.uint8)
    node.keyframes.append(Keyframe(7, BinaryVlad(blocks), _snapshot(agent_id)))
    return node


def test_request_is_2072_bytes(rng):
    assert REQUEST_SIZE == 2072
    assert len(serialize(_request(rng))) == 2072


def test_empty_track_message_size_closed_form(rng):
    msg = random_message(rng, M=8, N=0, d=63, track_lens=())
    # 24 header+sender+t, 4+8*56 poses, 4 features, 4+2016*8 covariance, 4 tracks
    assert message_size(8, 0, 63) == 16616
    assert len(serialize(msg)) == 16616


def test_message_size_with_features_and_tracks(rng):
    lens = (3, 5, 1)
    msg = random_message(rng, M=5, N=4, track_lens=lens)
    assert len(serialize(msg)) == message_size(5, 4, msg.cov.shape[0], lens)


@pytest.mark.parametrize("seed", range(5))
def test_round_trip(seed):
    rng = np.random.default_rng(seed)
    msg = random_message(rng, M=int(rng.integers(0, 9)), N=int(rng.integers(0, 6)))
    assert deserialize(serialize(msg)) == msg
    req = _request(rng)
    assert deserialize(serialize(req)) == req


def test_snapshot_round_trip_via_wire(rng):
    msg = random_message(rng, M=3, N=2, track_lens=(2,))
    back = MessageUAV.from_snapshot(deserialize(serialize(msg)).to_snapshot())
    assert back == msg


def test_bad_magic(rng):
    buf = bytearray(serialize(_request(rng)))
    buf[0] ^= 0xFF
    with pytest.raises(WireFormatError) as err:
        deserialize(bytes(buf))
    assert err.value.offset == 0


def test_bad_version(rng):
    buf = bytearray(serialize(_request(rng)))
    buf[8] = 9
    with pytest.raises(WireFormatError) as err:
        deserialize(bytes(buf))
    assert err.value.offset == 8


def test_truncated_and_trailing(rng):
    buf = serialize(random_message(rng))
    for cut in (5, 20, len(buf) // 2, len(buf) - 1):
        with pytest.raises(WireFormatError) as err:
            deserialize(buf[:cut])
        assert err.value.offset <= cut
    with pytest.raises(WireFormatError):
        deserialize(buf + b"\x00")


def test_link_latency():
    link = LinkModel([0, 1], latency=0.01)
    link.send(1.0, 0, 1, "request", b"abc")
    assert network_deliver(link, 1.005) == []
    (m,) = network_deliver(link, 1.01)
    assert m.t_arrive == pytest.approx(1.01) and m.payload == b"abc"


def test_link_drop_all_still_counts():
    link = LinkModel([0, 1], drop_prob=1.0)
    for k in range(10):
        link.send(0.1 * k, 0, 1, "message", b"x" * 100)
    assert network_deliver(link, 10.0) == []
    assert link.bytes_by_type() == {"message": {"count": 10, "bytes": 1000}}


def test_link_deterministic_and_in_order():
    def delivered(seed):
        link = LinkModel([0, 1], drop_prob=0.3, seed=seed)
        for k in range(1000):
            link.send(0.001 * k, 0, 1, "request", k.to_bytes(2, "little"))
        return [int.from_bytes(m.payload, "little") for m in network_deliver(link, 5.0)]

    a, b = delivered(3), delivered(3)
    assert a == b and a == sorted(a)
    assert 600 < len(a) < 800


def test_link_rejects_unknown_and_backwards_time():
    link = LinkModel([0, 1])
    assert link.send(0.0, 0, 5, "request", b"x") is False
    network_deliver(link, 1.0)
    with pytest.raises(ValueError):
        network_deliver(link, 0.5)
    with pytest.raises(ValueError):
        LinkModel([0], drop_prob=1.5)


def test_csv_export(tmp_path):
    link = LinkModel([0, 1])
    link.send(0.5, 0, 1, "request", b"x" * 2072)
    path = tmp_path / "bytes.csv"
    link.export_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows == [["t", "sender", "receiver", "msg_type", "bytes"], ["0.5", "0", "1", "request", "2072"]]


def test_frame_tick_broadcasts_to_others(rng):
    node = ProtocolNode(0, [0, 1, 2])
    out = protocol_step(node, Event("frame-tick", 0.0, rng.integers(0, 256, 2048, dtype=np.uint8).tobytes()))
    assert [r for r, _ in out] == [1, 2]
    assert all(isinstance(m, RequestUAV) for _, m in out)


def test_request_without_match_is_silent():
    node = _node_with_keyframe()
    req = RequestUAV(0, 1.0, bytes(2048))
    assert protocol_step(node, Event("request-received", 1.0, req)) == []


def test_request_hit_and_dedup():
    node = _node_with_keyframe()
    req = RequestUAV(0, 1.0, b"\xff" * 2048)
    (resp,) = protocol_step(node, Event("request-received", 1.0, req))
    assert resp[0] == 0 and isinstance(resp[1], MessageUAV)
    assert protocol_step(node, Event("request-received", 1.5, req)) == []
    assert len(protocol_step(node, Event("request-received", 2.0, req))) == 1
    # a different requester is not suppressed
    other = RequestUAV(2, 1.5, b"\xff" * 2048)
    assert len(protocol_step(node, Event("request-received", 1.5, other))) == 1


def test_response_enqueued_and_self_ignored(rng):
    node = ProtocolNode(0, [0, 1])
    msg = random_message(rng, sender=1)
    protocol_step(node, Event("response-received", 1.0, msg))
    protocol_step(node, Event("response-received", 1.0, random_message(rng, sender=0)))
    assert node.drain() == [(1.0, msg)] and node.ignored_self == 1
    with pytest.raises(ValueError):
        protocol_step(node, Event("bogus", 0.0))


def test_naive_broadcast_accounting(rng):
    node = ProtocolNode(0, [0, 1, 2, 3])
    msg = random_message(rng)
    out = naive_broadcast_step(node, 0.0, msg)
    assert len(out) == 3
    link = LinkModel([0, 1, 2, 3])
    for r, m in out:
        link.send(0.0, 0, r, "message", serialize(m))
    assert link.bytes_by_type()["message"]["bytes"] == 3 * len(serialize(msg))


def test_request_bytes_per_second():
    # U agents at 30 Hz for 20 s: each direction carries exactly 600 requests
    U, rate, secs = 3, 30, 20
    nodes = [ProtocolNode(a, list(range(U))) for a in range(U)]
    link = LinkModel(range(U))
    for k in range(rate * secs):
        t = k / rate
        for n in nodes:
            for r, m in protocol_step(n, Event("frame-tick", t, bytes(2048))):
                link.send(t, n.agent_id, r, "request", serialize(m))
    per_pair = {}
    for _, s, r, _, _ in link.log:
        per_pair[(s, r)] = per_pair.get((s, r), 0) + 1
    assert set(per_pair.values()) == {600}
    assert link.bytes_by_type()["request"]["bytes"] == U * rate * secs * (U - 1) * REQUEST_SIZE


def test_no_unsolicited_messages(rng):
    """Every MessageUAV goes to an agent whose request arrived within t_dedup."""
    U = 3
    nodes = [_node_with_keyframe(a, range(U)) for a in range(U)]
    link = LinkModel(range(U), latency=0.02, drop_prob=0.2, seed=1)
    last_request = {}
    for k in range(200):
        t = k / 30
        for n in nodes:
            vlad = b"\xff" * 2048 if rng.random() < 0.3 else bytes(2048)
            for r, m in protocol_step(n, Event("frame-tick", t, vlad)):
                link.send(t, n.agent_id, r, "request", serialize(m))
        for m in network_deliver(link, t):
            msg = deserialize(m.payload)
            if isinstance(msg, RequestUAV):
                last_request[(m.sender, m.receiver)] = t
                outs = protocol_step(nodes[m.receiver], Event("request-received", t, msg))
                for r, out in outs:
                    assert t - last_request[(r, m.receiver)] <= 1.0
                    link.send(t, m.receiver, r, "message", serialize(out))
    assert link.bytes_by_type()["message"]["count"] > 0
