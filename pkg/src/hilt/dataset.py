"""Episode recording, on-disk persistence, and training-view construction.

An episode is a flat list of per-step tuples: observation references,
proprioception, action, and the control mode the step ran in.  Waypoint-mode
steps additionally carry the segment annotation (target waypoint, salient
click index, segment start, segment length) shared by every step of that
segment.

On disk each episode is one directory holding ``manifest.json`` plus
``arrays.bin``.  The manifest lists every array with dtype, shape, and byte
offset; arrays are little-endian float32 (int32 for indices).  The binary
file starts with a magic tag and the sha256 of the manifest so either file
being tampered with is detected on read.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .pointcloud import (
    PointCloud,
    SALIENT_RADIUS,
    build_salient_target,
    crop_workspace,
    fps_downsample,
    nearest_point_index,
)

SCHEMA_VERSION = 1
ARRAYS_MAGIC = b"HILTARR1"


class Mode(IntEnum):
    WAYPT = 0
    DENSE = 1
    TERMINATE = 2


# Legal successor modes. Terminate is absorbing: nothing may follow it.
MODE_TRANSITIONS: dict[int, tuple[int, ...]] = {
    int(Mode.WAYPT): (0, 1, 2),
    int(Mode.DENSE): (0, 1, 2),
    int(Mode.TERMINATE): (),
}


class DatasetError(Exception):
    """Base for all persistence and validation failures."""


class SchemaVersionError(DatasetError):
    pass


class IntegrityError(DatasetError):
    pass


class InvariantError(DatasetError):
    pass


@dataclass
class DemoStep:
    proprio: np.ndarray
    action: np.ndarray
    mode: int
    cloud: PointCloud | None = None
    wrist: np.ndarray | None = None
    waypoint: np.ndarray | None = None
    salient_index: int | None = None
    segment_start: int | None = None
    segment_len: int | None = None

    def __post_init__(self):
        self.proprio = np.asarray(self.proprio, dtype=np.float64).reshape(7)
        self.action = np.asarray(self.action, dtype=np.float64).reshape(7)
        self.mode = int(self.mode)
        if self.waypoint is not None:
            self.waypoint = np.asarray(self.waypoint, dtype=np.float64).reshape(7)
        if self.wrist is not None:
            self.wrist = np.asarray(self.wrist, dtype=np.float32)


@dataclass
class Episode:
    steps: list[DemoStep]
    task: str
    seed: int
    collector: str = "scripted"
    timestamp: str = "1970-01-01T00:00:00Z"
    final_object_poses: np.ndarray = field(
        default_factory=lambda: np.zeros((0, 6), dtype=np.float64)
    )
    final_attached: int = -1
    success: int = -1

    def __len__(self) -> int:
        return len(self.steps)


def validate_episode(ep: Episode) -> None:
    """Raise InvariantError unless the episode satisfies the step schema.

    Checks: modes in range with terminate only as the final step, waypoint
    annotations present exactly on waypoint-mode steps, annotations constant
    within a segment, segment bookkeeping consistent with step indices, and
    salient indices in range of the segment-start cloud when that cloud is
    recorded.
    """
    n = len(ep.steps)
    for t, s in enumerate(ep.steps):
        if s.mode not in (0, 1, 2):
            raise InvariantError(f"step {t}: mode {s.mode} out of range")
        if s.mode == Mode.TERMINATE and t != n - 1:
            raise InvariantError(f"step {t}: terminate before the final step")
        annotated = s.waypoint is not None
        fields_ok = (
            (s.salient_index is not None) == annotated
            and (s.segment_start is not None) == annotated
            and (s.segment_len is not None) == annotated
        )
        if not fields_ok:
            raise InvariantError(f"step {t}: partial waypoint annotation")
        if annotated != (s.mode == Mode.WAYPT):
            raise InvariantError(
                f"step {t}: waypoint annotation {'present' if annotated else 'missing'} "
                f"for mode {s.mode}"
            )
        if not annotated:
            continue
        t0, k = s.segment_start, s.segment_len
        if not (0 <= t0 <= t < t0 + k <= n):
            raise InvariantError(f"step {t}: segment bounds ({t0}, {k}) invalid")
        head = ep.steps[t0]
        if head.mode != Mode.WAYPT or head.segment_start != t0 or head.segment_len != k:
            raise InvariantError(f"step {t}: segment head mismatch at {t0}")
        if (
            not np.array_equal(s.waypoint, head.waypoint)
            or s.salient_index != head.salient_index
        ):
            raise InvariantError(f"step {t}: segment annotation drifts from step {t0}")
        if head.cloud is not None and not 0 <= s.salient_index < len(head.cloud):
            raise InvariantError(f"step {t}: salient index {s.salient_index} out of range")


def waypoint_segments(ep: Episode) -> list[tuple[int, int]]:
    """(start, length) for each waypoint segment, in episode order."""
    out = []
    for t, s in enumerate(ep.steps):
        if s.mode == Mode.WAYPT and s.segment_start == t:
            out.append((t, s.segment_len))
    return out


# ---------------------------------------------------------------------------
# persistence

def _manifest_bytes(manifest: dict) -> bytes:
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()


def _pack_arrays(ep: Episode) -> list[tuple[str, np.ndarray]]:
    n = len(ep.steps)
    f32 = lambda a: np.asarray(a, dtype="<f4")
    i32 = lambda a: np.asarray(a, dtype="<i4")
    opt = lambda v, default: default if v is None else v
    arrays: list[tuple[str, np.ndarray]] = [
        ("proprio", f32([s.proprio for s in ep.steps]).reshape(n, 7)),
        ("action", f32([s.action for s in ep.steps]).reshape(n, 7)),
        ("mode", i32([s.mode for s in ep.steps])),
        (
            "waypoint",
            f32([opt(s.waypoint, np.zeros(7)) for s in ep.steps]).reshape(n, 7),
        ),
        ("salient_index", i32([opt(s.salient_index, -1) for s in ep.steps])),
        ("segment_start", i32([opt(s.segment_start, -1) for s in ep.steps])),
        ("segment_len", i32([opt(s.segment_len, -1) for s in ep.steps])),
        ("final_object_poses", f32(ep.final_object_poses).reshape(-1, 6)),
        ("final_attached", i32([ep.final_attached])),
        ("success", i32([ep.success])),
    ]
    for t, s in enumerate(ep.steps):
        if s.cloud is not None:
            arrays.append((f"cloud_pos_{t:06d}", f32(s.cloud.positions)))
            arrays.append((f"cloud_col_{t:06d}", f32(s.cloud.colors)))
        if s.wrist is not None:
            arrays.append((f"wrist_{t:06d}", f32(s.wrist)))
    return arrays


def save_episode(ep: Episode, root, episode_id: str | None = None) -> Path:
    """Write one episode directory under root and return its path."""
    validate_episode(ep)
    episode_id = episode_id or f"{ep.task}_{ep.seed:08d}"
    out = Path(root) / episode_id
    out.mkdir(parents=True, exist_ok=False)

    arrays = _pack_arrays(ep)
    payload = b"".join(a.tobytes() for _, a in arrays)
    table, offset = [], 0
    for name, a in arrays:
        table.append(
            {
                "name": name,
                "dtype": str(a.dtype.name),
                "shape": list(a.shape),
                "offset": offset,
            }
        )
        offset += a.nbytes
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "task": ep.task,
        "seed": ep.seed,
        "collector": ep.collector,
        "timestamp": ep.timestamp,
        "step_count": len(ep.steps),
        "payload_bytes": offset,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "arrays": table,
    }
    mbytes = _manifest_bytes(manifest)
    (out / "manifest.json").write_bytes(mbytes)
    (out / "arrays.bin").write_bytes(
        ARRAYS_MAGIC + hashlib.sha256(mbytes).digest() + payload
    )
    return out


def load_episode(path) -> Episode:
    """Read one episode directory; raises typed DatasetError subclasses."""
    path = Path(path)
    try:
        mbytes = (path / "manifest.json").read_bytes()
        manifest = json.loads(mbytes)
    except FileNotFoundError as e:
        raise DatasetError(f"missing manifest in {path}") from e
    except json.JSONDecodeError as e:
        raise IntegrityError(f"manifest in {path} is not valid JSON") from e
    if not isinstance(manifest, dict) or "schema_version" not in manifest:
        raise IntegrityError(f"manifest in {path} lacks a schema version")
    if manifest["schema_version"] != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"unsupported schema version {manifest['schema_version']}"
        )

    blob = (path / "arrays.bin").read_bytes()
    head = len(ARRAYS_MAGIC) + 32
    if blob[: len(ARRAYS_MAGIC)] != ARRAYS_MAGIC:
        raise IntegrityError(f"bad magic in {path}/arrays.bin")
    if blob[len(ARRAYS_MAGIC) : head] != hashlib.sha256(mbytes).digest():
        raise IntegrityError(f"manifest does not match arrays.bin in {path}")
    payload = blob[head:]
    if len(payload) != manifest["payload_bytes"]:
        raise IntegrityError(f"truncated arrays.bin in {path}")
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise IntegrityError(f"array payload corrupted in {path}")

    arrays: dict[str, np.ndarray] = {}
    for row in manifest["arrays"]:
        dt = np.dtype(row["dtype"]).newbyteorder("<")
        count = int(np.prod(row["shape"], dtype=np.int64))
        a = np.frombuffer(
            payload, dtype=dt, count=count, offset=row["offset"]
        ).reshape(row["shape"])
        arrays[row["name"]] = a

    n = manifest["step_count"]
    steps = []
    for t in range(n):
        annotated = arrays["salient_index"][t] >= 0
        cloud = None
        if f"cloud_pos_{t:06d}" in arrays:
            cloud = PointCloud(
                arrays[f"cloud_pos_{t:06d}"], arrays[f"cloud_col_{t:06d}"]
            )
        wname = f"wrist_{t:06d}"
        steps.append(
            DemoStep(
                proprio=arrays["proprio"][t],
                action=arrays["action"][t],
                mode=int(arrays["mode"][t]),
                cloud=cloud,
                wrist=arrays[wname].copy() if wname in arrays else None,
                waypoint=arrays["waypoint"][t] if annotated else None,
                salient_index=int(arrays["salient_index"][t]) if annotated else None,
                segment_start=int(arrays["segment_start"][t]) if annotated else None,
                segment_len=int(arrays["segment_len"][t]) if annotated else None,
            )
        )
    ep = Episode(
        steps=steps,
        task=manifest["task"],
        seed=manifest["seed"],
        collector=manifest["collector"],
        timestamp=manifest["timestamp"],
        final_object_poses=np.asarray(arrays["final_object_poses"], dtype=np.float64),
        final_attached=int(arrays["final_attached"][0]),
        success=int(arrays["success"][0]),
    )
    try:
        validate_episode(ep)
    except InvariantError as e:
        raise InvariantError(f"{path}: {e}") from e
    return ep


def episode_dirs(root) -> list[Path]:
    root = Path(root)
    return sorted(p for p in root.iterdir() if (p / "manifest.json").exists())


def load_dataset(root) -> list[Episode]:
    dirs = episode_dirs(root)
    if not dirs:
        raise DatasetError(f"no episodes under {root}")
    return [load_episode(p) for p in dirs]


def dataset_hash(root) -> str:
    """Content hash of every episode under root, stable across copies.

    The collection timestamp is excluded so the hash identifies the data
    itself rather than when it was recorded.
    """
    h = hashlib.sha256()
    for p in episode_dirs(root):
        manifest = json.loads((p / "manifest.json").read_bytes())
        manifest.pop("timestamp", None)
        h.update(p.name.encode())
        h.update(_manifest_bytes(manifest))
        h.update((p / "arrays.bin").read_bytes()[len(ARRAYS_MAGIC) + 32 :])
    return h.hexdigest()


# ---------------------------------------------------------------------------
# training views

def expand_waypoint_view(
    episodes: list[Episode],
    alpha: float,
    point_budget: int | None = None,
    workspace: tuple | None = None,
    radius: float = SALIENT_RADIUS,
    fps_start: int = 0,
) -> list:
    """Waypoint training pairs with temporal augmentation.

    Each waypoint segment (start t', length k) contributes the steps
    t' .. t' + floor(alpha * k), every one labeled with the segment's
    waypoint, its salient 3D location re-snapped to that step's own cloud,
    and the mode the demonstration switched to after the segment.  alpha = 0
    keeps only the segment-start step.

    When point_budget is given, each cloud is cropped to the workspace box
    and farthest-point sampled down to the budget before the salient target
    is built, mirroring the inference-time pipeline.
    """
    from .waypoint_policy import WaypointTarget

    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    out = []
    for ep in episodes:
        n = len(ep.steps)
        for t0, k in waypoint_segments(ep):
            head = ep.steps[t0]
            if head.cloud is None:
                raise DatasetError(
                    f"segment at step {t0} has no recorded cloud; "
                    "cannot build a waypoint view"
                )
            salient_pos = head.cloud.positions[head.salient_index]
            nxt = ep.steps[t0 + k].mode if t0 + k < n else int(Mode.TERMINATE)
            last = min(int(np.floor(alpha * k)), k - 1)
            for j in range(last + 1):
                step = ep.steps[t0 + j]
                if step.cloud is None:
                    raise DatasetError(f"step {t0 + j} has no recorded cloud")
                cloud = step.cloud
                if workspace is not None:
                    cloud = crop_workspace(cloud, workspace[0], workspace[1])
                if point_budget is not None:
                    idx = fps_downsample(cloud, point_budget, start=fps_start)
                    cloud = cloud.select(idx)
                snapped = nearest_point_index(cloud, salient_pos)
                target = WaypointTarget(
                    position=head.waypoint[0:3],
                    rotation=head.waypoint[3:6],
                    gripper_open=float(head.waypoint[6]),
                    next_mode=int(nxt),
                    salient=build_salient_target(
                        cloud, snapped, head.waypoint[0:3], radius
                    ),
                )
                out.append((cloud, target))
    return out


def build_dense_view(episodes: list[Episode], t_pred: int = 16) -> list:
    """Sliding dense-policy windows, one per step, stride 1.

    A window starting at step t conditions on that step's wrist image and
    proprioception and stacks the next t_pred action rows, each row being
    the 6-dim pose delta, the gripper command, and the step's mode as a
    scalar.  Windows running past the end of the episode repeat the final
    step's row, so trailing windows are dominated by the terminate step.
    """
    from .dense_policy import DenseObservation

    if t_pred < 1:
        raise ValueError("t_pred must be positive")
    out = []
    for ep in episodes:
        n = len(ep.steps)
        rows = np.zeros((n, 8), dtype=np.float64)
        for t, s in enumerate(ep.steps):
            rows[t, 0:6] = s.action[0:6]
            rows[t, 6] = s.action[6]
            rows[t, 7] = float(s.mode)
        for t in range(n):
            s = ep.steps[t]
            if s.wrist is None:
                raise DatasetError(f"step {t} has no wrist image; dense view needs one")
            idx = np.minimum(np.arange(t, t + t_pred), n - 1)
            obs = DenseObservation(wrist_image=s.wrist, proprio=s.proprio.copy())
            out.append((obs, rows[idx].copy()))
    return out
