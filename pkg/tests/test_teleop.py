import asyncio
import json
import socket
from pathlib import Path

import numpy as np
import pytest

from hilt.dataset import Mode, load_episode, validate_episode
from hilt.executor import ControllerLimits
from hilt.pointcloud import nearest_point_index
from hilt.simworld import Env, ObserveConfig
from hilt.teleop import (
    FRAME_QUEUE_DEPTH,
    MESSAGE_TYPES,
    PROTOCOL_VERSION,
    ProtocolError,
    TeleopSession,
    cloud_payload,
    decode_message,
    decode_wrist_payload,
    encode_message,
    run_connection,
    serve,
    wrist_payload,
)

FIXTURES = Path(__file__).parent / "fixtures" / "protocol"
FAST_OBS = ObserveConfig(point_budget=24)


def fresh_session(task="precise_place", seed=3, **kw):
    env = Env(task, FAST_OBS).reset(seed)
    return TeleopSession(task=task, seed=seed, env=env, **kw)


def say_hello(sess):
    sess.handle_message({"type": "hello", "seq": 0,
                         "protocol_version": PROTOCOL_VERSION})
    return sess.drain_outgoing()


# ---------------------------------------------------------------------------
# codec

def test_encode_hand_computed_bytes():
    msg = {"type": "segment_done", "seq": 5, "segment_start": 0, "segment_len": 4}
    expect = b'65\n{"segment_len":4,"segment_start":0,"seq":5,"type":"segment_done"}'
    assert encode_message(msg) == expect


def test_codec_round_trip():
    msgs = [
        {"type": "hello", "seq": 0, "protocol_version": 1},
        {"type": "error", "seq": 12, "message": "uh oh ümlaut", "in_reply_to": None},
        {"type": "dense_delta", "seq": 3, "delta": [0.1, 0, 0, 0, 0, 0], "gripper": 1.0},
        {"type": "episode_end", "seq": 10 ** 12},
    ]
    for msg in msgs:
        assert decode_message(encode_message(msg)) == msg


def test_decode_accepts_str_input():
    raw = encode_message({"type": "episode_end", "seq": 1})
    assert decode_message(raw.decode()) == {"type": "episode_end", "seq": 1}


def test_encode_rejects_bad_messages():
    with pytest.raises(ProtocolError):
        encode_message(["not", "a", "dict"])
    with pytest.raises(ProtocolError):
        encode_message({"type": "teleport", "seq": 0})
    for bad_seq in (-1, None, 1.5, True, "3"):
        with pytest.raises(ProtocolError):
            encode_message({"type": "hello", "seq": bad_seq})


def test_decode_rejects_malformed_wire_data():
    good = encode_message({"type": "hello", "seq": 0, "protocol_version": 1})
    with pytest.raises(ProtocolError):
        decode_message(good.replace(b"\n", b" ", 1))  # no prefix newline
    with pytest.raises(ProtocolError):
        decode_message(b"xx\n{}")  # non-decimal prefix
    with pytest.raises(ProtocolError):
        decode_message(good[:-4])  # truncated body
    with pytest.raises(ProtocolError):
        decode_message(good + b"garbage")  # trailing bytes
    with pytest.raises(ProtocolError):
        decode_message(b"9\n{invalid}")
    with pytest.raises(ProtocolError):
        decode_message(b"2\n[]")  # not an object
    with pytest.raises(ProtocolError):
        decode_message(encode_message({"type": "hello", "seq": 0}).replace(b"hello", b"jello"))


def test_wrist_payload_round_trip():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (8, 6, 3))
    payload = wrist_payload(img)
    assert payload["height"] == 8 and payload["width"] == 6
    back = decode_wrist_payload(payload)
    expect = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    assert np.array_equal(back, expect)
    # already-quantized images survive exactly
    assert np.array_equal(decode_wrist_payload(wrist_payload(back / 255.0)), back)


def test_wrist_payload_rejects_bad_size_or_encoding():
    payload = wrist_payload(np.zeros((4, 4, 3)))
    with pytest.raises(ProtocolError):
        decode_wrist_payload({**payload, "height": 5})
    with pytest.raises(ProtocolError):
        decode_wrist_payload({**payload, "encoding": "u16"})


def test_cloud_payload_stride():
    env = Env("reach_grasp", FAST_OBS).reset(0)
    cloud, _ = env.observe()
    full = cloud_payload(cloud, 7, stride=1)
    assert full["frame_index"] == 7
    assert len(full["positions"]) == len(cloud)
    half = cloud_payload(cloud, 7, stride=2)
    assert len(half["positions"]) == (len(cloud) + 1) // 2
    assert half["positions"][1] == [float(x) for x in cloud.positions[2]]
    with pytest.raises(ValueError):
        cloud_payload(cloud, 0, stride=0)


GOLDEN_NAMES = sorted(p.stem for p in FIXTURES.glob("*.json"))


def test_goldens_cover_every_message_type():
    covered = set()
    for name in GOLDEN_NAMES:
        covered.add(json.loads((FIXTURES / f"{name}.json").read_text())["type"])
    assert covered == MESSAGE_TYPES


@pytest.mark.parametrize("name", GOLDEN_NAMES)
def test_golden_fixture_pair(name):
    msg = json.loads((FIXTURES / f"{name}.json").read_text())
    wire = (FIXTURES / f"{name}.bin").read_bytes()
    assert encode_message(msg) == wire
    assert decode_message(wire) == msg


# ---------------------------------------------------------------------------
# session state machine

def test_hello_handshake_and_initial_frames():
    sess = fresh_session()
    out = say_hello(sess)
    assert [m["type"] for m in out] == ["hello", "cloud_frame", "wrist_frame"]
    assert [m["seq"] for m in out] == [0, 1, 2]
    assert out[0]["protocol_version"] == PROTOCOL_VERSION
    assert out[0]["task"] == "precise_place"
    assert sess.phase == "idle"
    img = decode_wrist_payload(out[2])
    assert img.shape == (64, 64, 3)
    assert len(out[1]["positions"]) == len(sess.latest_cloud)


def test_hello_must_come_first():
    sess = fresh_session()
    sess.handle_message({"type": "episode_end", "seq": 0})
    (err,) = sess.drain_outgoing()
    assert err["type"] == "error"
    assert not sess.hello_done


def test_version_mismatch_fails_closed():
    sess = fresh_session()
    sess.handle_message({"type": "hello", "seq": 0, "protocol_version": 2})
    (err,) = sess.drain_outgoing()
    assert err["type"] == "error"
    assert sess.closed
    # closed sessions drop everything silently
    sess.handle_message({"type": "hello", "seq": 1,
                         "protocol_version": PROTOCOL_VERSION})
    assert sess.drain_outgoing() == []


def test_client_seq_must_increase():
    sess = fresh_session()
    say_hello(sess)
    sess.handle_message({"type": "switch_mode", "seq": 0, "mode": "dense"})
    (err,) = sess.drain_outgoing()
    assert err["type"] == "error" and "seq" in err["message"]
    assert sess.phase == "idle"
    # a proper seq still works afterwards
    sess.handle_message({"type": "switch_mode", "seq": 1, "mode": "dense"})
    (ok,) = sess.drain_outgoing()
    assert ok["type"] == "switch_mode"
    assert sess.phase == "dense_control"


def test_server_seq_strictly_increases_across_drains():
    sess = fresh_session()
    seqs = [m["seq"] for m in say_hello(sess)]
    sess.handle_message({"type": "switch_mode", "seq": 1, "mode": "dense"})
    seqs += [m["seq"] for m in sess.drain_outgoing()]
    sess.handle_message({"type": "dense_delta", "seq": 2,
                         "delta": [0, 0, 0.001, 0, 0, 0], "gripper": 1.0})
    seqs += [m["seq"] for m in sess.drain_outgoing()]
    assert seqs == list(range(len(seqs)))


def test_click_snaps_to_nearest_point():
    sess = fresh_session()
    say_hello(sess)
    cloud = sess.latest_cloud
    probe = cloud.positions[5] + [0.002, -0.001, 0.001]
    sess.handle_message({"type": "click_salient", "seq": 1, "frame_index": 0,
                         "point": [float(x) for x in probe]})
    (reply,) = sess.drain_outgoing()
    assert reply["type"] == "click_salient"
    assert reply["index"] == nearest_point_index(cloud, probe)
    assert reply["point"] == [float(x) for x in cloud.positions[reply["index"]]]
    assert reply["stale"] is False
    assert "warning" not in reply
    assert sess.phase == "await_waypoint_input"


def test_stale_click_warns_and_resnaps():
    sess = fresh_session()
    say_hello(sess)
    pt = [float(x) for x in sess.latest_cloud.positions[0]]
    sess.handle_message({"type": "click_salient", "seq": 1, "frame_index": 99,
                         "point": pt})
    (reply,) = sess.drain_outgoing()
    assert reply["stale"] is True
    assert "re-snapped" in reply["warning"]
    assert reply["frame_index"] == sess.frame_index


def test_click_rejects_bad_point():
    sess = fresh_session()
    say_hello(sess)
    sess.handle_message({"type": "click_salient", "seq": 1, "frame_index": 0,
                         "point": [1.0, 2.0]})
    (err,) = sess.drain_outgoing()
    assert err["type"] == "error"
    assert sess.phase == "idle"


def test_set_waypoint_requires_click():
    sess = fresh_session()
    say_hello(sess)
    sess.handle_message({"type": "set_waypoint", "seq": 1,
                         "position": [0, -0.26, 0.31], "rotation": [0, 0, 0],
                         "gripper": 1.0})
    (err,) = sess.drain_outgoing()
    assert err["type"] == "error"


def _click_and_set(sess, offset, next_seq=1):
    pt = [float(x) for x in sess.latest_cloud.positions[0]]
    sess.handle_message({"type": "click_salient", "seq": next_seq,
                         "frame_index": sess.frame_index, "point": pt})
    sess.drain_outgoing()
    pos = sess.env.proprio.pos + np.asarray(offset)
    sess.handle_message({"type": "set_waypoint", "seq": next_seq + 1,
                         "position": [float(x) for x in pos],
                         "rotation": [0.0, 0.0, 0.0], "gripper": 1.0})


def test_waypoint_segment_executes_over_ticks():
    sess = fresh_session()
    say_hello(sess)
    head_cloud = sess.latest_cloud
    _click_and_set(sess, [0.03, 0.0, 0.0])  # 3 steps at the 0.01 default
    assert sess.phase == "executing_waypoint"
    assert sess.drain_outgoing() == []
    # mid-execution, other inputs are rejected
    sess.handle_message({"type": "switch_mode", "seq": 3, "mode": "dense"})
    (err,) = sess.drain_outgoing()
    assert err["type"] == "error"
    for _ in range(3):
        assert sess.phase == "executing_waypoint"
        sess.tick()
    assert sess.phase == "idle"
    out = sess.drain_outgoing()
    assert [m["type"] for m in out] == ["cloud_frame", "wrist_frame", "segment_done"]
    assert out[2]["segment_start"] == 0 and out[2]["segment_len"] == 3
    steps = sess.rec.steps
    assert len(steps) == 3
    assert all(s.mode == int(Mode.WAYPT) for s in steps)
    assert all(s.segment_start == 0 and s.segment_len == 3 for s in steps)
    assert steps[0].cloud is head_cloud  # head observation is the clicked cloud
    assert np.allclose(sess.env.proprio.pos[0],
                       steps[0].waypoint[0], atol=1e-12)


def test_tick_noop_outside_plan():
    sess = fresh_session()
    say_hello(sess)
    sess.drain_outgoing()
    sess.tick()
    assert sess.drain_outgoing() == []


def test_dense_control_flow():
    sess = fresh_session()
    say_hello(sess)
    sess.handle_message({"type": "switch_mode", "seq": 1, "mode": "dense"})
    (sw,) = sess.drain_outgoing()
    assert sw == {"type": "switch_mode", "mode": "dense", "phase": "dense_control",
                  "seq": sw["seq"]}
    before = sess.env.proprio.pos.copy()
    sess.handle_message({"type": "dense_delta", "seq": 2,
                         "delta": [0.004, 0, 0, 0, 0, 0], "gripper": 1.0})
    out = sess.drain_outgoing()
    assert [m["type"] for m in out] == ["cloud_frame", "wrist_frame"]
    assert np.isclose(sess.env.proprio.pos[0], before[0] + 0.004)
    assert sess.rec.steps[-1].mode == int(Mode.DENSE)
    sess.handle_message({"type": "switch_mode", "seq": 3, "mode": "waypt"})
    (back,) = sess.drain_outgoing()
    assert back["phase"] == "idle"
    assert sess.phase == "idle"


def test_session_persists_valid_episode(tmp_path):
    sess = fresh_session(out_root=tmp_path)
    say_hello(sess)
    _click_and_set(sess, [0.01, 0.0, 0.0])
    sess.tick()
    sess.handle_message({"type": "switch_mode", "seq": 3, "mode": "dense"})
    sess.handle_message({"type": "dense_delta", "seq": 4,
                         "delta": [0, 0, -0.003, 0, 0, 0], "gripper": 1.0})
    sess.handle_message({"type": "switch_mode", "seq": 5, "mode": "terminate"})
    out = sess.drain_outgoing()
    end = out[-1]
    assert end["type"] == "episode_end"
    assert end["step_count"] == 3  # 1 waypoint + 1 dense + terminate
    assert sess.phase == "done"
    path = Path(end["path"])
    assert path.exists()
    assert path.name == "precise_place_human_00000003"
    ep = load_episode(path)
    validate_episode(ep)
    assert ep.collector == "human"
    assert ep.task == "precise_place"
    assert [s.mode for s in ep.steps] == [int(Mode.WAYPT), int(Mode.DENSE),
                                          int(Mode.TERMINATE)]
    # finished sessions reject further input
    sess.handle_message({"type": "switch_mode", "seq": 6, "mode": "dense"})
    (err,) = sess.drain_outgoing()
    assert err["type"] == "error"


def test_session_abort_truncates_segment(tmp_path):
    sess = fresh_session(out_root=tmp_path)
    say_hello(sess)
    _click_and_set(sess, [0.05, 0.0, 0.0])  # 5-step plan
    sess.tick()
    sess.tick()
    assert sess.phase == "executing_waypoint"
    sess.handle_message({"type": "episode_end", "seq": 3})
    end = sess.drain_outgoing()[-1]
    assert end["type"] == "episode_end"
    ep = load_episode(end["path"])
    validate_episode(ep)
    # the two executed steps were re-labeled with the truncated length
    assert [s.segment_len for s in ep.steps[:2]] == [2, 2]
    assert ep.steps[-1].mode == int(Mode.TERMINATE)


def test_episode_id_collision_gets_suffix(tmp_path):
    for expect in ("precise_place_human_00000003", "precise_place_human_00000003_1"):
        sess = fresh_session(out_root=tmp_path)
        say_hello(sess)
        sess.handle_message({"type": "episode_end", "seq": 1})
        end = sess.drain_outgoing()[-1]
        assert Path(end["path"]).name == expect


def test_custom_limits_shape_plans():
    sess = fresh_session(limits=ControllerLimits(max_trans_delta=0.005))
    say_hello(sess)
    _click_and_set(sess, [0.02, 0.0, 0.0])
    while sess.phase == "executing_waypoint":
        sess.tick()
    assert len(sess.rec.steps) == 4  # 0.02 / 0.005
    for s in sess.rec.steps:
        assert np.linalg.norm(s.action[0:3]) <= 0.005 * (1 + 1e-12)


def test_frame_queue_bounded_drop_oldest():
    sess = fresh_session()
    say_hello(sess)
    for _ in range(10):
        sess._push_frames()
    assert sess.pending_frames() == FRAME_QUEUE_DEPTH
    assert sess.frames_dropped == 2 * 10 - FRAME_QUEUE_DEPTH
    retained = sess.drain_outgoing()
    # survivors are the newest frames, in order
    assert [m["frame_index"] for m in retained] == [9, 9, 10, 10]


def test_control_messages_never_dropped():
    sess = fresh_session()
    say_hello(sess)
    sess.drain_outgoing()
    for i in range(6):
        sess._push_frames()
        sess._error(f"probe {i}", None)
    out = sess.drain_outgoing()
    errors = [m for m in out if m["type"] == "error"]
    assert [m["message"] for m in errors] == [f"probe {i}" for i in range(6)]
    assert sum(1 for m in out if m["type"] != "error") == FRAME_QUEUE_DEPTH


def test_default_env_construction():
    sess = TeleopSession(task="reach_grasp", seed=1, observe_config=FAST_OBS)
    out = say_hello(sess)
    assert out[0]["task"] == "reach_grasp"
    assert len(out[1]["positions"]) == FAST_OBS.point_budget


def test_protocol_error_reply():
    sess = fresh_session()
    reply = sess.protocol_error("bad frame")
    assert reply["type"] == "error"
    assert "protocol error" in reply["message"]
    assert reply["in_reply_to"] is None


# ---------------------------------------------------------------------------
# phase/message legality table

CLICK = lambda s: {"type": "click_salient", "seq": 50,
                   "frame_index": s.frame_index,
                   "point": [float(x) for x in s.latest_cloud.positions[0]]}
SET_WP = lambda s: {"type": "set_waypoint", "seq": 50,
                    "position": [float(x) for x in s.env.proprio.pos],
                    "rotation": [0.0, 0.0, 0.0], "gripper": 1.0}
DELTA = lambda s: {"type": "dense_delta", "seq": 50,
                   "delta": [0, 0, 0.001, 0, 0, 0], "gripper": 1.0}
SWITCH = lambda mode: (lambda s: {"type": "switch_mode", "seq": 50, "mode": mode})
END = lambda s: {"type": "episode_end", "seq": 50}

# accepted probes by phase; everything else must produce an error reply
LEGAL = {
    "idle": {"click", "dense", "terminate", "end"},
    "await_waypoint_input": {"click", "set_wp", "dense", "terminate", "end"},
    "executing_waypoint": {"end"},
    "dense_control": {"delta", "waypt", "terminate", "end"},
    "done": set(),
}
PROBES = {
    "click": CLICK, "set_wp": SET_WP, "delta": DELTA,
    "dense": SWITCH("dense"), "waypt": SWITCH("waypt"),
    "terminate": SWITCH("terminate"), "end": END, "bogus": SWITCH("hover"),
}


def drive_to(phase):
    sess = fresh_session()
    say_hello(sess)
    if phase == "await_waypoint_input":
        sess.handle_message(CLICK(sess) | {"seq": 1})
    elif phase == "executing_waypoint":
        _click_and_set(sess, [0.05, 0.0, 0.0])
    elif phase == "dense_control":
        sess.handle_message({"type": "switch_mode", "seq": 1, "mode": "dense"})
    elif phase == "done":
        sess.handle_message({"type": "episode_end", "seq": 1})
    sess.drain_outgoing()
    assert sess.phase == phase
    return sess


@pytest.mark.parametrize("phase", sorted(LEGAL))
def test_phase_legality_table(phase):
    for probe_name, build in PROBES.items():
        sess = drive_to(phase)
        sess.handle_message(build(sess))
        out = sess.drain_outgoing()
        rejected = any(m["type"] == "error" for m in out)
        expect_ok = probe_name in LEGAL[phase]
        assert rejected != expect_ok, (phase, probe_name, out)


# ---------------------------------------------------------------------------
# websocket loopback

def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


async def recv_typed(ws, wanted):
    """Receive until a message of the wanted type arrives; return it."""
    while True:
        msg = decode_message(await ws.recv())
        if msg["type"] == "error":
            raise AssertionError(f"server error: {msg['message']}")
        if msg["type"] == wanted:
            return msg


def test_websocket_full_episode(tmp_path):
    import websockets

    port = free_port()

    async def main():
        ready = asyncio.Event()
        factory = lambda i: fresh_session(out_root=tmp_path, seed=100 + i)
        server = asyncio.create_task(
            serve("127.0.0.1", port, factory, max_episodes=1, ready_event=ready)
        )
        await asyncio.wait_for(ready.wait(), 10)
        seq = 0
        async with websockets.connect(f"ws://127.0.0.1:{port}") as ws:
            await ws.send(encode_message(
                {"type": "hello", "seq": seq, "protocol_version": PROTOCOL_VERSION}
            ))
            hello = await recv_typed(ws, "hello")
            assert hello["task"] == "precise_place"
            cloud = await recv_typed(ws, "cloud_frame")
            await recv_typed(ws, "wrist_frame")
            seq += 1
            await ws.send(encode_message(
                {"type": "click_salient", "seq": seq,
                 "frame_index": cloud["frame_index"],
                 "point": cloud["positions"][0]}
            ))
            click = await recv_typed(ws, "click_salient")
            assert click["stale"] is False
            seq += 1
            await ws.send(encode_message(
                {"type": "set_waypoint", "seq": seq,
                 "position": [0.0, -0.26, 0.32], "rotation": [0.0, 0.0, 0.0],
                 "gripper": 1.0}
            ))
            done = await recv_typed(ws, "segment_done")
            assert done["segment_len"] >= 1
            seq += 1
            await ws.send(encode_message(
                {"type": "switch_mode", "seq": seq, "mode": "terminate"}
            ))
            end = await recv_typed(ws, "episode_end")
            assert end["path"] is not None
        await asyncio.wait_for(server, 10)
        return end

    end = asyncio.run(asyncio.wait_for(main(), 30))
    ep = load_episode(end["path"])
    validate_episode(ep)
    assert ep.collector == "human"
    assert ep.seed == 100


def test_websocket_rejects_concurrent_sessions(tmp_path):
    import websockets

    port = free_port()

    async def main():
        ready = asyncio.Event()
        factory = lambda i: fresh_session(out_root=tmp_path, seed=200 + i)
        server = asyncio.create_task(
            serve("127.0.0.1", port, factory, max_episodes=1, ready_event=ready)
        )
        await asyncio.wait_for(ready.wait(), 10)
        async with websockets.connect(f"ws://127.0.0.1:{port}") as ws1:
            await ws1.send(encode_message(
                {"type": "hello", "seq": 0, "protocol_version": PROTOCOL_VERSION}
            ))
            await recv_typed(ws1, "wrist_frame")
            async with websockets.connect(f"ws://127.0.0.1:{port}") as ws2:
                busy = decode_message(await ws2.recv())
                assert busy["type"] == "error"
                assert "another session" in busy["message"]
            await ws1.send(encode_message({"type": "episode_end", "seq": 1}))
            await recv_typed(ws1, "episode_end")
        await asyncio.wait_for(server, 10)

    asyncio.run(asyncio.wait_for(main(), 30))


def test_websocket_disconnect_discards_unfinished(tmp_path):
    import websockets

    port = free_port()

    async def main():
        ready = asyncio.Event()
        sessions = []

        def factory(i):
            s = fresh_session(out_root=tmp_path, seed=300 + i)
            sessions.append(s)
            return s

        server = asyncio.create_task(
            serve("127.0.0.1", port, factory, max_episodes=1, ready_event=ready)
        )
        await asyncio.wait_for(ready.wait(), 10)
        # first client vanishes mid-session: no episode is counted or saved
        async with websockets.connect(f"ws://127.0.0.1:{port}") as ws:
            await ws.send(encode_message(
                {"type": "hello", "seq": 0, "protocol_version": PROTOCOL_VERSION}
            ))
            await recv_typed(ws, "wrist_frame")
        assert not server.done()
        # second client finishes properly and satisfies max_episodes
        async with websockets.connect(f"ws://127.0.0.1:{port}") as ws:
            await ws.send(encode_message(
                {"type": "hello", "seq": 0, "protocol_version": PROTOCOL_VERSION}
            ))
            await recv_typed(ws, "wrist_frame")
            await ws.send(encode_message({"type": "episode_end", "seq": 1}))
            end = await recv_typed(ws, "episode_end")
        await asyncio.wait_for(server, 10)
        assert sessions[0].saved_path is None
        return end

    end = asyncio.run(asyncio.wait_for(main(), 30))
    assert Path(end["path"]).exists()
