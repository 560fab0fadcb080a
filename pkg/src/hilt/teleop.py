"""Teleoperation protocol and server-side session for human collection.

Wire format: each message is an ASCII decimal byte length, a newline, then
that many bytes of UTF-8 JSON with sorted keys.  Every message carries a
"type" and a per-direction monotonically increasing "seq".  The session
state machine is synchronous and fully testable without a socket; the
websocket server is a thin async shell that pumps it.
"""

from __future__ import annotations

import asyncio
import base64
import json
from pathlib import Path

import numpy as np

from .dataset import DemoStep, Mode, save_episode
from .executor import ControllerLimits, plan_interpolation
from .pointcloud import nearest_point_index
from .pose import Pose7
from .simworld import Env, ObserveConfig, _episode_from, _Recorder

PROTOCOL_VERSION = 1
FRAME_QUEUE_DEPTH = 4
TICK_INTERVAL = 0.2  # idle ticker period, seconds

MESSAGE_TYPES = frozenset(
    {
        "hello",
        "cloud_frame",
        "wrist_frame",
        "click_salient",
        "set_waypoint",
        "dense_delta",
        "switch_mode",
        "segment_done",
        "episode_end",
        "error",
    }
)

PHASES = ("idle", "await_waypoint_input", "executing_waypoint", "dense_control", "done")


class ProtocolError(Exception):
    pass


# ---------------------------------------------------------------------------
# codec

def encode_message(msg: dict) -> bytes:
    if not isinstance(msg, dict):
        raise ProtocolError("message must be an object")
    if msg.get("type") not in MESSAGE_TYPES:
        raise ProtocolError(f"unknown message type {msg.get('type')!r}")
    seq = msg.get("seq")
    if not isinstance(seq, int) or isinstance(seq, bool) or seq < 0:
        raise ProtocolError("seq must be a non-negative integer")
    body = json.dumps(msg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return str(len(body)).encode("ascii") + b"\n" + body


def decode_message(raw: bytes) -> dict:
    if isinstance(raw, str):
        raw = raw.encode("utf-8")
    head, sep, body = raw.partition(b"\n")
    if not sep:
        raise ProtocolError("missing length prefix")
    if not head.isdigit():
        raise ProtocolError("length prefix is not a decimal integer")
    length = int(head)
    if len(body) < length:
        raise ProtocolError(f"truncated body: expected {length} bytes, got {len(body)}")
    if len(body) > length:
        raise ProtocolError("trailing bytes after message body")
    try:
        msg = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise ProtocolError(f"malformed JSON body: {exc}") from exc
    if not isinstance(msg, dict):
        raise ProtocolError("message must be an object")
    if msg.get("type") not in MESSAGE_TYPES:
        raise ProtocolError(f"unknown message type {msg.get('type')!r}")
    seq = msg.get("seq")
    if not isinstance(seq, int) or isinstance(seq, bool) or seq < 0:
        raise ProtocolError("seq must be a non-negative integer")
    return msg


def wrist_payload(image: np.ndarray) -> dict:
    """Quantize a float wrist image to u8 RGB; round-trips bit-exactly."""
    q = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape[0], q.shape[1]
    return {
        "height": int(h),
        "width": int(w),
        "encoding": "u8",
        "data": base64.b64encode(q.tobytes()).decode("ascii"),
    }


def decode_wrist_payload(payload: dict) -> np.ndarray:
    if payload.get("encoding") != "u8":
        raise ProtocolError(f"unknown wrist encoding {payload.get('encoding')!r}")
    h, w = int(payload["height"]), int(payload["width"])
    flat = np.frombuffer(base64.b64decode(payload["data"]), dtype=np.uint8)
    if flat.size != h * w * 3:
        raise ProtocolError("wrist payload size mismatch")
    return flat.reshape(h, w, 3).copy()


def cloud_payload(cloud, frame_index: int, stride: int = 1) -> dict:
    """Cloud as float lists, optionally decimated by index stride."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    pos = cloud.positions[::stride]
    col = cloud.colors[::stride]
    return {
        "frame_index": int(frame_index),
        "stride": int(stride),
        "positions": [[float(x) for x in p] for p in pos],
        "colors": [[float(x) for x in c] for c in col],
    }


# ---------------------------------------------------------------------------
# session state machine

class TeleopSession:
    """One human collection episode: phase machine over a live Env.

    Outgoing messages accumulate in an internal list; `drain_outgoing`
    stamps their seq numbers in send order.  Frames are dropped oldest-first
    beyond a bounded depth, control replies are never dropped.
    """

    def __init__(
        self,
        task: str = "precise_place",
        seed: int = 0,
        out_root=None,
        observe_config: ObserveConfig | None = None,
        limits: ControllerLimits | None = None,
        queue_depth: int = FRAME_QUEUE_DEPTH,
        cloud_stride: int = 1,
        env: Env | None = None,
        timestamp: str = "1970-01-01T00:00:00Z",
    ):
        self.task = task
        self.seed = seed
        self.out_root = out_root
        self.limits = limits or ControllerLimits()
        self.queue_depth = queue_depth
        self.cloud_stride = cloud_stride
        self.timestamp = timestamp
        if env is None:
            env = Env(task, observe_config).reset(seed)
        self.env = env
        self.rec = _Recorder(env, record_cloud=True, record_wrist=True)

        self.phase = "idle"
        self.hello_done = False
        self.closed = False
        self.recv_seq = -1
        self._send_seq = -1
        self._outgoing: list = []  # (kind, message) with kind in {ctrl, frame}
        self.frames_dropped = 0
        self.frame_index = -1
        self.latest_cloud = None
        self.latest_obs = None
        self.pending_click = None
        self._plan = None
        self.episode = None
        self.saved_path = None

    # -- outgoing plumbing

    def _ctrl(self, type_: str, **fields):
        self._outgoing.append(("ctrl", {"type": type_, **fields}))

    def _frame(self, msg: dict):
        frame_slots = [i for i, (k, _) in enumerate(self._outgoing) if k == "frame"]
        if len(frame_slots) >= self.queue_depth:
            del self._outgoing[frame_slots[0]]
            self.frames_dropped += 1
        self._outgoing.append(("frame", msg))

    def _error(self, message: str, in_reply_to):
        self._ctrl("error", message=message, in_reply_to=in_reply_to, phase=self.phase)

    def pending_frames(self) -> int:
        return sum(1 for k, _ in self._outgoing if k == "frame")

    def drain_outgoing(self) -> list:
        out = []
        for _, msg in self._outgoing:
            self._send_seq += 1
            msg["seq"] = self._send_seq
            out.append(msg)
        self._outgoing = []
        return out

    def _push_frames(self):
        cloud, obs = self.env.observe()
        self.frame_index += 1
        self.latest_cloud, self.latest_obs = cloud, obs
        self._frame(
            {
                "type": "cloud_frame",
                **cloud_payload(cloud, self.frame_index, self.cloud_stride),
            }
        )
        self._frame(
            {
                "type": "wrist_frame",
                "frame_index": self.frame_index,
                **wrist_payload(obs.wrist_image),
            }
        )

    # -- message handling

    def protocol_error(self, message: str) -> dict:
        """Error reply for transport-level decode failures (seq echo only)."""
        self._error(f"protocol error: {message}", self.recv_seq if self.recv_seq >= 0 else None)
        return self.drain_outgoing()[-1]

    def handle_message(self, msg: dict):
        if self.closed:
            return
        t, seq = msg["type"], msg["seq"]
        if seq <= self.recv_seq:
            self._error(f"non-monotonic seq {seq} (last {self.recv_seq})", seq)
            return
        self.recv_seq = seq
        if not self.hello_done:
            if t != "hello":
                self._error("hello required before any other message", seq)
                return
            self._handle_hello(msg)
            return
        if self.phase == "done":
            self._error("session is finished", seq)
            return
        if self.phase == "executing_waypoint" and t != "episode_end":
            self._error("segment executing: only episode_end (abort) is accepted", seq)
            return
        handler = getattr(self, f"_handle_{t}", None)
        if handler is None:
            self._error(f"unexpected message type {t!r}", seq)
            return
        handler(msg)

    def _handle_hello(self, msg):
        version = msg.get("protocol_version")
        if version != PROTOCOL_VERSION:
            self._error(
                f"unsupported protocol version {version!r}, server speaks {PROTOCOL_VERSION}",
                msg["seq"],
            )
            self.closed = True  # version mismatch fails closed
            return
        self.hello_done = True
        self._ctrl(
            "hello",
            protocol_version=PROTOCOL_VERSION,
            task=self.task,
            phase=self.phase,
        )
        self._push_frames()

    def _handle_click_salient(self, msg):
        if self.phase not in ("idle", "await_waypoint_input"):
            self._error(f"click_salient not valid in phase {self.phase}", msg["seq"])
            return
        point = np.asarray(msg.get("point", ()), dtype=np.float64).reshape(-1)
        if point.shape != (3,):
            self._error("click_salient needs a 3-vector point", msg["seq"])
            return
        stale = msg.get("frame_index") != self.frame_index
        idx = nearest_point_index(self.latest_cloud, point)
        snapped = self.latest_cloud.positions[idx]
        self.pending_click = {"index": int(idx), "point": snapped.copy()}
        self.phase = "await_waypoint_input"
        reply = {
            "frame_index": self.frame_index,
            "index": int(idx),
            "point": [float(x) for x in snapped],
            "stale": bool(stale),
        }
        if stale:
            reply["warning"] = "click referenced a stale frame; re-snapped on the current cloud"
        self._ctrl("click_salient", **reply)

    def _handle_set_waypoint(self, msg):
        if self.phase != "await_waypoint_input" or self.pending_click is None:
            self._error("set_waypoint requires a pending salient click", msg["seq"])
            return
        try:
            pos = np.asarray(msg["position"], dtype=np.float64).reshape(3)
            rot = np.asarray(msg["rotation"], dtype=np.float64).reshape(3)
            grip = float(msg["gripper"])
        except (KeyError, TypeError, ValueError):
            self._error("set_waypoint needs position[3], rotation[3], gripper", msg["seq"])
            return
        target = Pose7(pos, rot, grip)
        plan = plan_interpolation(self.env.proprio, target, self.limits)
        self._plan = {
            "steps": plan,
            "head": (self.latest_cloud, self.latest_obs),
            "salient_index": self.pending_click["index"],
            "w": target.to_array(),
            "t0": len(self.rec.steps),
            "i": 0,
        }
        self.pending_click = None
        self.phase = "executing_waypoint"

    def _handle_dense_delta(self, msg):
        if self.phase != "dense_control":
            self._error(f"dense_delta not valid in phase {self.phase}", msg["seq"])
            return
        try:
            delta = np.asarray(msg["delta"], dtype=np.float64).reshape(6)
            grip = float(msg["gripper"])
        except (KeyError, TypeError, ValueError):
            self._error("dense_delta needs delta[6] and gripper", msg["seq"])
            return
        self.rec.dense_step(delta, grip)
        self._push_frames()

    def _handle_switch_mode(self, msg):
        mode = msg.get("mode")
        if mode == "dense":
            if self.phase not in ("idle", "await_waypoint_input"):
                self._error(f"cannot enter dense control from {self.phase}", msg["seq"])
                return
            self.pending_click = None
            self.phase = "dense_control"
        elif mode == "waypt":
            if self.phase != "dense_control":
                self._error(f"cannot leave dense control from {self.phase}", msg["seq"])
                return
            self.phase = "idle"
        elif mode == "terminate":
            if self.phase not in ("idle", "await_waypoint_input", "dense_control"):
                self._error(f"cannot terminate from {self.phase}", msg["seq"])
                return
            self._finish()
            return
        else:
            self._error(f"unknown mode {mode!r}", msg["seq"])
            return
        self._ctrl("switch_mode", mode=mode, phase=self.phase)

    def _handle_episode_end(self, msg):
        # abort: discard any partially executed plan, then persist
        self._finish()

    def _finish(self):
        if self._plan is not None:
            i, t0 = self._plan["i"], self._plan["t0"]
            # steps of a truncated segment keep their real recorded length
            for s in self.rec.steps[t0:]:
                s.segment_len = i
            self._plan = None
        self.rec.terminate()
        ep = _episode_from(self.env, self.rec, self.task, self.seed, self.timestamp)
        ep.collector = "human"
        path = None
        if self.out_root is not None:
            base = f"{self.task}_human_{self.seed:08d}"
            episode_id, n = base, 1
            while (Path(self.out_root) / episode_id).exists():
                episode_id = f"{base}_{n}"
                n += 1
            path = str(save_episode(ep, self.out_root, episode_id=episode_id))
        self.episode = ep
        self.saved_path = path
        self.phase = "done"
        self._ctrl(
            "episode_end",
            success=bool(ep.success),
            step_count=len(ep.steps),
            path=path,
        )

    # -- time

    def tick(self):
        """Advance a pending waypoint plan by one controller step."""
        if self.closed or self._plan is None:
            return
        p = self._plan
        steps, i, k = p["steps"], p["i"], len(p["steps"])
        if i == 0:
            cloud, obs = p["head"]
        else:
            cloud, obs = self.env.observe()
        ps = steps[i]
        self.rec.steps.append(
            DemoStep(
                proprio=self.env.proprio.to_array(),
                action=ps.action(),
                mode=int(Mode.WAYPT),
                cloud=cloud,
                wrist=obs.wrist_image,
                waypoint=p["w"],
                salient_index=p["salient_index"],
                segment_start=p["t0"],
                segment_len=k,
            )
        )
        self.env.step(ps.action())
        p["i"] = i + 1
        if p["i"] == k:
            self._plan = None
            self.phase = "idle"
            self._push_frames()
            self._ctrl("segment_done", segment_start=p["t0"], segment_len=k)


# ---------------------------------------------------------------------------
# websocket server

async def run_connection(ws, session: TeleopSession):
    """Pump one websocket connection through a session until it finishes."""
    try:
        while not session.closed:
            for msg in session.drain_outgoing():
                await ws.send(encode_message(msg))
            if session.phase == "done":
                break
            interval = 0.02 if session.phase == "executing_waypoint" else TICK_INTERVAL
            try:
                raw = await asyncio.wait_for(ws.recv(), timeout=interval)
            except asyncio.TimeoutError:
                session.tick()
                continue
            try:
                msg = decode_message(raw)
            except ProtocolError as exc:
                await ws.send(encode_message(session.protocol_error(str(exc))))
                continue
            session.handle_message(msg)
        for msg in session.drain_outgoing():
            await ws.send(encode_message(msg))
    finally:
        await ws.close()


async def serve(
    host: str,
    port: int,
    session_factory,
    *,
    max_episodes: int | None = None,
    ready_event: asyncio.Event | None = None,
):
    """Serve teleop sessions, one connection at a time.

    session_factory(episode_index) -> TeleopSession.  Returns after
    max_episodes sessions have finished (None serves forever).
    """
    import websockets

    busy = asyncio.Lock()
    done = asyncio.Event()
    count = 0

    async def handler(ws):
        nonlocal count
        if busy.locked():
            sess_err = {
                "type": "error",
                "seq": 0,
                "message": "another session is active",
                "in_reply_to": None,
                "phase": "idle",
            }
            await ws.send(encode_message(sess_err))
            await ws.close()
            return
        async with busy:
            session = session_factory(count)
            try:
                await run_connection(ws, session)
            except (websockets.exceptions.ConnectionClosed, OSError):
                pass  # client vanished; an unfinished episode is discarded
            if session.phase == "done":
                count += 1
                if max_episodes is not None and count >= max_episodes:
                    done.set()

    async with websockets.serve(handler, host, port):
        if ready_event is not None:
            ready_event.set()
        if max_episodes is None:
            await asyncio.Future()
        else:
            await done.wait()
