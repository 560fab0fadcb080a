"""Quasistatic desk-scale manipulation world with synthetic sensing.

Kinematic only: the gripper teleports by bounded deltas, a grasped object
follows rigidly, a released object rests where it was let go.  Observation
is a surface-sampled colored point cloud of every object, the table, and
the gripper body (finger gap encodes open/closed), plus a top-down
orthographic wrist crop centered and yaw-aligned on the gripper.

Scenes are value-like: step_env returns a new Scene.  Observation noise is
drawn from a generator keyed by (scene noise seed, step index), so
observing the same scene twice gives identical clouds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import DemoStep, Episode, Mode
from .dense_policy import DenseObservation
from .executor import ControllerLimits, plan_interpolation
from .pointcloud import PointCloud, nearest_point_index
from .pose import GRIPPER_CLOSED, GRIPPER_OPEN, Pose7, euler_to_matrix

WORKSPACE_LO = np.array([-0.35, -0.35, 0.0])
WORKSPACE_HI = np.array([0.35, 0.35, 0.45])
ATTACH_TOLERANCE = 0.01
TABLE_COLOR = (0.55, 0.5, 0.45)
GRIPPER_COLOR = (0.2, 0.25, 0.35)
HOME_POSE = (0.0, -0.26, 0.30)

# gripper body proportions used for both cloud sampling and attach geometry
_PALM_SIZE = np.array([0.04, 0.016, 0.016])
_FINGER_SIZE = np.array([0.008, 0.014, 0.032])
_FINGER_GAP_OPEN = 0.016
_FINGER_GAP_CLOSED = 0.005


class SceneGenerationError(Exception):
    pass


@dataclass
class SceneObject:
    name: str
    shape: str  # box | cylinder | ring
    pos: np.ndarray
    rot: np.ndarray
    size: np.ndarray  # box: (sx,sy,sz); cylinder: (r,r,h); ring: (R,minor,0)
    color: np.ndarray
    anchor_local: np.ndarray

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=np.float64).reshape(3).copy()
        self.rot = np.asarray(self.rot, dtype=np.float64).reshape(3).copy()
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3).copy()
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3).copy()
        self.anchor_local = (
            np.asarray(self.anchor_local, dtype=np.float64).reshape(3).copy()
        )

    def copy(self) -> "SceneObject":
        return SceneObject(
            self.name, self.shape, self.pos, self.rot, self.size, self.color,
            self.anchor_local,
        )

    def horizontal_radius(self) -> float:
        if self.shape == "box":
            return float(math.hypot(self.size[0], self.size[1]) / 2)
        if self.shape == "cylinder":
            return float(self.size[0])
        return float(self.size[0] + self.size[1])  # ring


def world_anchor(obj: SceneObject) -> np.ndarray:
    return euler_to_matrix(obj.rot) @ obj.anchor_local + obj.pos


@dataclass
class Scene:
    objects: list
    gripper: Pose7
    attached: int = -1  # object index, -1 when nothing held
    attach_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    attach_rel_rot: np.ndarray = field(default_factory=lambda: np.zeros(3))
    noise_seed: int = 0
    step_index: int = 0
    table_z: float = 0.0
    table_bounds: tuple = ((-0.35, -0.35), (0.35, 0.35))

    def copy(self) -> "Scene":
        return Scene(
            objects=[o.copy() for o in self.objects],
            gripper=self.gripper.copy(),
            attached=self.attached,
            attach_offset=self.attach_offset.copy(),
            attach_rel_rot=self.attach_rel_rot.copy(),
            noise_seed=self.noise_seed,
            step_index=self.step_index,
            table_z=self.table_z,
            table_bounds=self.table_bounds,
        )


@dataclass
class TaskSpec:
    name: str
    bounds_lo: tuple
    bounds_hi: tuple
    success_tol: float


TASKS = {
    "reach_grasp": TaskSpec("reach_grasp", (-0.16, -0.14), (0.16, 0.14), 0.05),
    "stack": TaskSpec("stack", (-0.15, -0.12), (0.15, 0.12), 0.01),
    "precise_place": TaskSpec("precise_place", (-0.14, -0.12), (0.14, 0.12), 0.005),
}


@dataclass
class ObserveConfig:
    point_budget: int = 1024
    noise_sigma: float = 0.002
    table_weight: float = 0.15
    wrist_size: int = 64
    wrist_halfwidth: float = 0.08
    include_gripper: bool = True


# ---------------------------------------------------------------------------
# scene generation

def _rejection_place(rng, spec, radii, existing, tries=1000):
    """Uniform placement with >= 3cm surface clearance to existing objects."""
    lo, hi = np.asarray(spec.bounds_lo), np.asarray(spec.bounds_hi)
    r_new = radii[-1]
    for _ in range(tries):
        xy = rng.uniform(lo, hi)
        ok = True
        for (exy, er) in existing:
            if np.linalg.norm(xy - exy) < er + r_new + 0.03:
                ok = False
                break
        if ok:
            return xy
    raise SceneGenerationError(
        f"could not place an object with 3cm clearance after {tries} tries"
    )


def generate_scene(task: str, seed: int) -> Scene:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    spec = TASKS[task]
    rng = np.random.default_rng([seed, 7])
    objects = []
    placed = []  # (xy, horizontal radius)

    def add(obj):
        objects.append(obj)
        placed.append((obj.pos[0:2].copy(), obj.horizontal_radius()))

    def place(obj_builder, radius, yaw_range=0.0):
        xy = _rejection_place(rng, spec, [r for _, r in placed] + [radius], placed)
        yaw = rng.uniform(-yaw_range, yaw_range) if yaw_range else 0.0
        add(obj_builder(xy, yaw))

    if task == "reach_grasp":
        place(
            lambda xy, yaw: SceneObject(
                "target", "box", (xy[0], xy[1], 0.02), (0, 0, yaw),
                (0.04, 0.04, 0.04), (0.85, 0.15, 0.1), (0, 0, 0.02),
            ),
            math.hypot(0.04, 0.04) / 2, yaw_range=math.pi / 4,
        )
        place(
            lambda xy, yaw: SceneObject(
                "distractor_cyl", "cylinder", (xy[0], xy[1], 0.025), (0, 0, 0),
                (0.025, 0.025, 0.05), (0.15, 0.3, 0.8), (0, 0, 0.025),
            ),
            0.025,
        )
        place(
            lambda xy, yaw: SceneObject(
                "distractor_box", "box", (xy[0], xy[1], 0.015), (0, 0, yaw),
                (0.05, 0.03, 0.03), (0.2, 0.7, 0.25), (0, 0, 0.015),
            ),
            math.hypot(0.05, 0.03) / 2, yaw_range=math.pi / 4,
        )
    elif task == "stack":
        place(
            lambda xy, yaw: SceneObject(
                "cup_a", "cylinder", (xy[0], xy[1], 0.03), (0, 0, 0),
                (0.03, 0.03, 0.06), (0.85, 0.15, 0.1), (0, 0, 0.03),
            ),
            0.03,
        )
        place(
            lambda xy, yaw: SceneObject(
                "cup_b", "cylinder", (xy[0], xy[1], 0.025), (0, 0, 0),
                (0.035, 0.035, 0.05), (0.15, 0.3, 0.8), (0, 0, 0.025),
            ),
            0.035,
        )
    elif task == "precise_place":
        place(
            lambda xy, yaw: SceneObject(
                "part", "box", (xy[0], xy[1], 0.015), (0, 0, 0),
                (0.03, 0.03, 0.03), (0.85, 0.15, 0.1), (0, 0, 0.015),
            ),
            math.hypot(0.03, 0.03) / 2,
        )
        place(
            lambda xy, yaw: SceneObject(
                "plate", "box", (xy[0], xy[1], 0.005), (0, 0, 0),
                (0.09, 0.09, 0.01), (0.9, 0.85, 0.55), (0, 0, 0.005),
            ),
            math.hypot(0.09, 0.09) / 2,
        )
        plate = objects[-1]
        # contrast marker sits on the plate, exempt from clearance checks
        objects.append(
            SceneObject(
                "slot_marker", "box",
                (plate.pos[0], plate.pos[1], plate.pos[2] + 0.005 + 0.002),
                (0, 0, 0), (0.016, 0.016, 0.004), (0.08, 0.08, 0.12), (0, 0, 0.002),
            )
        )

    return Scene(
        objects=objects,
        gripper=Pose7(pos=HOME_POSE, rot=(0, 0, 0), gripper=GRIPPER_OPEN),
        noise_seed=seed,
    )


def translate_scene(scene: Scene, offset) -> Scene:
    offset = np.asarray(offset, dtype=np.float64).reshape(3)
    out = scene.copy()
    for o in out.objects:
        o.pos = o.pos + offset
    out.gripper = Pose7(
        pos=out.gripper.pos + offset, rot=out.gripper.rot, gripper=out.gripper.gripper
    )
    out.table_z = out.table_z + offset[2]
    (lo, hi) = out.table_bounds
    out.table_bounds = (
        (lo[0] + offset[0], lo[1] + offset[1]),
        (hi[0] + offset[0], hi[1] + offset[1]),
    )
    return out


# ---------------------------------------------------------------------------
# stepping

def _gripper_is_open(g: float) -> bool:
    return g > 0.5


def step_env(scene: Scene, action) -> Scene:
    """Apply one 7-dim action (6 pose delta + gripper command).

    Move, drag any attached object rigidly, then resolve the gripper
    command: an open-to-close transition within ATTACH_TOLERANCE of some
    object's anchor grabs it, close-to-open releases in place.
    """
    action = np.asarray(action, dtype=np.float64).reshape(7)
    if not np.all(np.isfinite(action)):
        raise ValueError("non-finite action")
    out = scene.copy()
    out.step_index = scene.step_index + 1

    g = out.gripper
    new_pos = np.clip(g.pos + action[0:3], WORKSPACE_LO, WORKSPACE_HI)
    new_rot = g.rot + action[3:6]
    was_open = _gripper_is_open(g.gripper)
    cmd = float(action[6])
    out.gripper = Pose7(pos=new_pos, rot=new_rot, gripper=cmd)

    if out.attached >= 0:
        obj = out.objects[out.attached]
        obj.pos = euler_to_matrix(new_rot) @ out.attach_offset + new_pos
        obj.rot = new_rot + out.attach_rel_rot

    now_open = _gripper_is_open(cmd)
    if was_open and not now_open and out.attached < 0:
        best, best_d = -1, ATTACH_TOLERANCE
        for i, obj in enumerate(out.objects):
            d = float(np.linalg.norm(world_anchor(obj) - new_pos))
            if d <= best_d:
                best, best_d = i, d
        if best >= 0:
            obj = out.objects[best]
            out.attached = best
            out.attach_offset = euler_to_matrix(new_rot).T @ (obj.pos - new_pos)
            out.attach_rel_rot = obj.rot - new_rot
    elif not was_open and now_open:
        out.attached = -1
        out.attach_offset = np.zeros(3)
        out.attach_rel_rot = np.zeros(3)
    return out


def check_success(scene: Scene, task: str) -> bool:
    objs = {o.name: o for o in scene.objects}
    if task == "reach_grasp":
        target = objs["target"]
        idx = next(i for i, o in enumerate(scene.objects) if o.name == "target")
        rest_z = target.size[2] / 2
        return scene.attached == idx and target.pos[2] - rest_z >= 0.05 - 1e-9
    if task == "stack":
        a, b = objs["cup_a"], objs["cup_b"]
        idx_a = next(i for i, o in enumerate(scene.objects) if o.name == "cup_a")
        xy = float(np.linalg.norm(a.pos[0:2] - b.pos[0:2]))
        gap = (a.pos[2] - a.size[2] / 2) - (b.pos[2] + b.size[2] / 2)
        return xy <= TASKS[task].success_tol and abs(gap) <= 0.01 and scene.attached != idx_a
    if task == "precise_place":
        part, plate = objs["part"], objs["plate"]
        idx_p = next(i for i, o in enumerate(scene.objects) if o.name == "part")
        slot = plate.pos + np.array([0.0, 0.0, plate.size[2] / 2 + part.size[2] / 2])
        return (
            float(np.linalg.norm(part.pos - slot)) <= TASKS[task].success_tol
            and scene.attached != idx_p
        )
    raise ValueError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# observation

def _box_faces(size):
    sx, sy, sz = size
    # (area, axis, sign) for the 6 faces
    return [
        (sy * sz, 0, +1), (sy * sz, 0, -1),
        (sx * sz, 1, +1), (sx * sz, 1, -1),
        (sx * sy, 2, +1), (sx * sy, 2, -1),
    ]


def _sample_box(rng, size, n):
    faces = _box_faces(size)
    areas = np.array([f[0] for f in faces])
    counts = _apportion(areas, n)
    half = np.asarray(size) / 2
    pts = []
    for (area, axis, sign), c in zip(faces, counts):
        if c == 0:
            continue
        p = rng.uniform(-half, half, size=(c, 3))
        p[:, axis] = sign * half[axis]
        pts.append(p)
    if not pts:
        return np.zeros((0, 3))
    return np.concatenate(pts, axis=0)


def _sample_cylinder(rng, size, n):
    r, _, h = size
    lateral = 2 * math.pi * r * h
    cap = math.pi * r * r
    counts = _apportion(np.array([lateral, cap, cap]), n)
    pts = []
    if counts[0]:
        th = rng.uniform(0, 2 * math.pi, counts[0])
        z = rng.uniform(-h / 2, h / 2, counts[0])
        pts.append(np.stack([r * np.cos(th), r * np.sin(th), z], axis=1))
    for sign, c in ((+1, counts[1]), (-1, counts[2])):
        if c:
            th = rng.uniform(0, 2 * math.pi, c)
            rad = r * np.sqrt(rng.uniform(0, 1, c))
            pts.append(
                np.stack(
                    [rad * np.cos(th), rad * np.sin(th), np.full(c, sign * h / 2)],
                    axis=1,
                )
            )
    if not pts:
        return np.zeros((0, 3))
    return np.concatenate(pts, axis=0)


def _sample_ring(rng, size, n):
    major, minor = size[0], size[1]
    out = np.zeros((n, 3))
    got = 0
    while got < n:
        m = (n - got) * 2 + 8
        u = rng.uniform(0, 2 * math.pi, m)
        v = rng.uniform(0, 2 * math.pi, m)
        accept = rng.uniform(0, 1, m) < (major + minor * np.cos(v)) / (major + minor)
        u, v = u[accept], v[accept]
        take = min(len(u), n - got)
        ring_r = major + minor * np.cos(v[:take])
        out[got : got + take] = np.stack(
            [ring_r * np.cos(u[:take]), ring_r * np.sin(u[:take]),
             minor * np.sin(v[:take])],
            axis=1,
        )
        got += take
    return out


def _apportion(weights, total):
    """Largest-remainder allocation of `total` into len(weights) buckets."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.sum() <= 0 or total <= 0:
        return np.zeros(len(weights), dtype=np.int64)
    quota = weights / weights.sum() * total
    counts = np.floor(quota).astype(np.int64)
    rem = total - counts.sum()
    if rem > 0:
        order = np.argsort(-(quota - counts), kind="stable")
        counts[order[:rem]] += 1
    return counts


def _gripper_parts(g: Pose7):
    """Boxes (size, local offset) making up the gripper body."""
    gap = _FINGER_GAP_OPEN if _gripper_is_open(g.gripper) else _FINGER_GAP_CLOSED
    palm_z = _FINGER_SIZE[2] + _PALM_SIZE[2] / 2
    return [
        (_PALM_SIZE, np.array([0.0, 0.0, palm_z])),
        (_FINGER_SIZE, np.array([+gap, 0.0, _FINGER_SIZE[2] / 2])),
        (_FINGER_SIZE, np.array([-gap, 0.0, _FINGER_SIZE[2] / 2])),
    ]


def _surface_area(obj: SceneObject) -> float:
    if obj.shape == "box":
        sx, sy, sz = obj.size
        return 2 * (sx * sy + sy * sz + sx * sz)
    if obj.shape == "cylinder":
        r, _, h = obj.size
        return 2 * math.pi * r * h + 2 * math.pi * r * r
    return 4 * math.pi * math.pi * obj.size[0] * obj.size[1]


def observe(scene: Scene, config: ObserveConfig | None = None):
    """Render (point cloud, DenseObservation) for the current scene."""
    cfg = config or ObserveConfig()
    rng = np.random.default_rng([scene.noise_seed, 104729 + scene.step_index])

    (blo, bhi) = scene.table_bounds
    table_area = (bhi[0] - blo[0]) * (bhi[1] - blo[1]) * cfg.table_weight
    entries = [("table", table_area)]
    for o in scene.objects:
        entries.append((o, _surface_area(o)))
    grip_parts = _gripper_parts(scene.gripper) if cfg.include_gripper else []
    for size, off in grip_parts:
        area = 2 * (size[0] * size[1] + size[1] * size[2] + size[0] * size[2])
        entries.append((("gripper", size, off), float(area)))

    counts = _apportion(np.array([a for _, a in entries]), cfg.point_budget)
    pos_chunks, col_chunks = [], []
    for (entry, _), n in zip(entries, counts):
        if n == 0:
            continue
        if entry == "table":
            xy = rng.uniform((blo[0], blo[1]), (bhi[0], bhi[1]), size=(n, 2))
            p = np.concatenate([xy, np.full((n, 1), scene.table_z)], axis=1)
            c = np.tile(TABLE_COLOR, (n, 1))
        elif isinstance(entry, tuple) and entry[0] == "gripper":
            _, size, off = entry
            local = _sample_box(rng, size, n) + off
            rm = euler_to_matrix(scene.gripper.rot)
            p = local @ rm.T + scene.gripper.pos
            c = np.tile(GRIPPER_COLOR, (n, 1))
        else:
            o = entry
            if o.shape == "box":
                local = _sample_box(rng, o.size, n)
            elif o.shape == "cylinder":
                local = _sample_cylinder(rng, o.size, n)
            else:
                local = _sample_ring(rng, o.size, n)
            p = local @ euler_to_matrix(o.rot).T + o.pos
            c = np.tile(o.color, (n, 1))
        pos_chunks.append(p)
        col_chunks.append(c)

    positions = np.concatenate(pos_chunks, axis=0)
    colors = np.concatenate(col_chunks, axis=0)
    if cfg.noise_sigma > 0:
        positions = positions + rng.normal(0.0, cfg.noise_sigma, positions.shape)

    wrist = render_wrist(scene, cfg)
    obs = DenseObservation(wrist_image=wrist, proprio=scene.gripper.to_array())
    return PointCloud(positions, colors), obs


def render_wrist(scene: Scene, config: ObserveConfig | None = None) -> np.ndarray:
    """Top-down orthographic crop centered and yaw-aligned on the gripper.

    Pure z-buffer over analytic footprints (objects are upright in all
    tasks); brightness encodes surface height so the image carries depth.
    Anything outside the crop cannot affect any pixel.
    """
    cfg = config or ObserveConfig()
    n = cfg.wrist_size
    g = scene.gripper
    yaw = g.rot[2]
    u = np.array([math.cos(yaw), math.sin(yaw)])
    v = np.array([-math.sin(yaw), math.cos(yaw)])
    s = np.linspace(-cfg.wrist_halfwidth, cfg.wrist_halfwidth, n)
    # rows top-to-bottom span +v .. -v, columns left-to-right -u .. +u
    px = g.pos[0] + s[None, :] * u[0] - s[:, None] * v[0]
    py = g.pos[1] + s[None, :] * u[1] - s[:, None] * v[1]

    zbuf = np.full((n, n), -np.inf)
    img = np.zeros((n, n, 3), dtype=np.float64)

    def paint(mask, z, color):
        hit = mask & (z > zbuf)
        if not np.any(hit):
            return
        zbuf[hit] = np.broadcast_to(z, (n, n))[hit]
        shade = 0.55 + 0.45 * np.clip(np.broadcast_to(z, (n, n))[hit] / 0.25, 0, 1)
        img[hit] = np.asarray(color)[None, :] * shade[:, None]

    (blo, bhi) = scene.table_bounds
    table_mask = (px >= blo[0]) & (px <= bhi[0]) & (py >= blo[1]) & (py <= bhi[1])
    paint(table_mask, scene.table_z, TABLE_COLOR)

    for o in scene.objects:
        dx, dy = px - o.pos[0], py - o.pos[1]
        if o.shape == "box":
            c, si = math.cos(o.rot[2]), math.sin(o.rot[2])
            lx = c * dx + si * dy
            ly = -si * dx + c * dy
            mask = (np.abs(lx) <= o.size[0] / 2) & (np.abs(ly) <= o.size[1] / 2)
            paint(mask, o.pos[2] + o.size[2] / 2, o.color)
        elif o.shape == "cylinder":
            mask = dx * dx + dy * dy <= o.size[0] ** 2
            paint(mask, o.pos[2] + o.size[2] / 2, o.color)
        else:
            rad = np.sqrt(dx * dx + dy * dy)
            mask = np.abs(rad - o.size[0]) <= o.size[1]
            paint(mask, o.pos[2] + o.size[1], o.color)

    return img.astype(np.float32)


# ---------------------------------------------------------------------------
# environment wrapper

class Env:
    """Mutable convenience wrapper tying a task to a live Scene."""

    def __init__(self, task: str, observe_config: ObserveConfig | None = None):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        self.task = task
        self.cfg = observe_config or ObserveConfig()
        self.scene: Scene | None = None

    def reset(self, seed: int):
        self.scene = generate_scene(self.task, seed)
        return self

    def observe(self):
        return observe(self.scene, self.cfg)

    def step(self, action):
        self.scene = step_env(self.scene, action)

    @property
    def proprio(self) -> Pose7:
        return self.scene.gripper.copy()

    def success(self) -> bool:
        return check_success(self.scene, self.task)


def scene_pose_errors(a: Scene, b: Scene) -> float:
    """Max absolute difference across gripper and object poses."""
    errs = [np.max(np.abs(a.gripper.to_array() - b.gripper.to_array()))]
    for oa, ob in zip(a.objects, b.objects):
        errs.append(np.max(np.abs(oa.pos - ob.pos)))
        errs.append(np.max(np.abs(oa.rot - ob.rot)))
    if a.attached != b.attached:
        errs.append(np.inf)
    return float(max(errs))


# ---------------------------------------------------------------------------
# scripted demonstrations

class _Recorder:
    """Builds DemoSteps while driving the env.

    record_cloud: True stores a cloud at every waypoint step, False only at
    segment starts (the salient index always needs its reference cloud), and
    a float x stores the first floor(x*k)+1 steps of each segment, which is
    all that temporal augmentation up to alpha = x can consume.
    """

    def __init__(self, env: Env, record_cloud=True, record_wrist=True):
        self.env = env
        self.steps: list[DemoStep] = []
        self.record_cloud = record_cloud
        self.record_wrist = record_wrist

    def _want_cloud(self, i: int, k: int) -> bool:
        if self.record_cloud is True:
            return True
        if self.record_cloud is False:
            return i == 0
        return i <= int(math.floor(float(self.record_cloud) * k))

    def waypoint_segment(self, salient_world, waypoint: Pose7, limits):
        cloud, obs = self.env.observe()
        salient_index = nearest_point_index(cloud, salient_world)
        plan = plan_interpolation(self.env.proprio, waypoint, limits)
        t0, k = len(self.steps), len(plan)
        w = waypoint.to_array()
        for i, ps in enumerate(plan):
            want_cloud = self._want_cloud(i, k)
            if i == 0:
                c, o = cloud, obs
            elif want_cloud or self.record_wrist:
                c, o = self.env.observe()
            else:
                c, o = None, None
            self.steps.append(
                DemoStep(
                    proprio=self.env.proprio.to_array(),
                    action=ps.action(),
                    mode=int(Mode.WAYPT),
                    cloud=c if want_cloud else None,
                    wrist=o.wrist_image if (self.record_wrist and o is not None) else None,
                    waypoint=w,
                    salient_index=salient_index,
                    segment_start=t0,
                    segment_len=k,
                )
            )
            self.env.step(ps.action())

    def dense_step(self, delta6, gripper_cmd):
        wrist = self.env.observe()[1].wrist_image if self.record_wrist else None
        action = np.concatenate([np.asarray(delta6, dtype=np.float64), [gripper_cmd]])
        self.steps.append(
            DemoStep(
                proprio=self.env.proprio.to_array(),
                action=action,
                mode=int(Mode.DENSE),
                wrist=wrist,
            )
        )
        self.env.step(action)

    def terminate(self):
        wrist = self.env.observe()[1].wrist_image if self.record_wrist else None
        self.steps.append(
            DemoStep(
                proprio=self.env.proprio.to_array(),
                action=np.zeros(7),
                mode=int(Mode.TERMINATE),
                wrist=wrist,
            )
        )


def _episode_from(env: Env, rec: _Recorder, task, seed, timestamp) -> Episode:
    scene = env.scene
    finals = np.stack(
        [np.concatenate([o.pos, o.rot]) for o in scene.objects], axis=0
    ) if scene.objects else np.zeros((0, 6))
    return Episode(
        steps=rec.steps,
        task=task,
        seed=seed,
        collector="scripted",
        timestamp=timestamp,
        final_object_poses=finals,
        final_attached=scene.attached,
        success=int(check_success(scene, task)),
    )


def scripted_demo(
    task: str,
    seed: int,
    observe_config: ObserveConfig | None = None,
    limits: ControllerLimits | None = None,
    record_cloud: bool = True,
    record_wrist: bool = True,
    timestamp: str = "1970-01-01T00:00:00Z",
) -> Episode:
    """Oracle demonstration with salient/waypoint/mode annotations.

    reach_grasp and stack are pure waypoint recipes; precise_place ends with
    a dense corrective segment whose per-step deltas carry small seeded
    jitter, standing in for human fine control.
    """
    env = Env(task, observe_config).reset(seed)
    limits = limits or ControllerLimits()
    rec = _Recorder(env, record_cloud=record_cloud, record_wrist=record_wrist)
    rng = np.random.default_rng([seed, 12345])
    objs = {o.name: o for o in env.scene.objects}

    if task == "reach_grasp":
        target = objs["target"]
        yaw = float(target.rot[2])
        a = world_anchor(target)
        rot = np.array([0.0, 0.0, yaw])
        rec.waypoint_segment(a, Pose7(a + [0, 0, 0.08], rot, GRIPPER_OPEN), limits)
        rec.waypoint_segment(a, Pose7(a, rot, GRIPPER_CLOSED), limits)
        lift = env.proprio.pos + np.array([0.0, 0.0, 0.12])
        rec.waypoint_segment(a, Pose7(lift, rot, GRIPPER_CLOSED), limits)
        rec.terminate()
    elif task == "stack":
        a_obj, b_obj = objs["cup_a"], objs["cup_b"]
        aa = world_anchor(a_obj)
        rot = np.zeros(3)
        rec.waypoint_segment(aa, Pose7(aa + [0, 0, 0.07], rot, GRIPPER_OPEN), limits)
        rec.waypoint_segment(aa, Pose7(aa, rot, GRIPPER_CLOSED), limits)
        rec.waypoint_segment(aa, Pose7(aa + [0, 0, 0.12], rot, GRIPPER_CLOSED), limits)
        # gripper holds cup A by its rim: placed pose puts A's base on B's top
        bb = world_anchor(b_obj)
        place = np.array([bb[0], bb[1], bb[2] + a_obj.size[2]])
        rec.waypoint_segment(bb, Pose7(place + [0, 0, 0.07], rot, GRIPPER_CLOSED), limits)
        rec.waypoint_segment(bb, Pose7(place, rot, GRIPPER_OPEN), limits)
        rec.waypoint_segment(bb, Pose7(place + [0, 0, 0.10], rot, GRIPPER_OPEN), limits)
        rec.terminate()
    elif task == "precise_place":
        part, plate = objs["part"], objs["plate"]
        a = world_anchor(part)
        rot = np.zeros(3)
        rec.waypoint_segment(a, Pose7(a + [0, 0, 0.07], rot, GRIPPER_OPEN), limits)
        rec.waypoint_segment(a, Pose7(a, rot, GRIPPER_CLOSED), limits)
        # coarse pre-place: deliberately jittered so waypoint mode alone
        # cannot satisfy the tight tolerance; dense correction finishes
        slot_grip = plate.pos + np.array(
            [0.0, 0.0, plate.size[2] / 2 + part.size[2]]
        )
        jitter = rng.uniform(-0.025, 0.025, 2)
        coarse = slot_grip + np.array([jitter[0], jitter[1], 0.03])
        rec.waypoint_segment(a, Pose7(coarse, rot, GRIPPER_CLOSED), limits)
        # dense correction toward the slot, then release and back off; the
        # descent decelerates and settles so the recorded rows concentrate
        # where precision matters most
        hover = slot_grip + np.array([0.0, 0.0, 0.012])
        for goal, tol, clip in ((hover, 0.004, 0.008), (slot_grip, 0.0012, 0.005)):
            for _ in range(60):
                err = goal - env.proprio.pos
                if np.linalg.norm(err) <= tol:
                    break
                delta = np.clip(err, -clip, clip)
                delta = delta + rng.uniform(-0.0008, 0.0008, 3)
                rec.dense_step(np.concatenate([delta, np.zeros(3)]), GRIPPER_CLOSED)
        for _ in range(2):
            err = slot_grip - env.proprio.pos
            delta = np.clip(err, -0.002, 0.002) + rng.uniform(-0.0004, 0.0004, 3)
            rec.dense_step(np.concatenate([delta, np.zeros(3)]), GRIPPER_CLOSED)
        rec.dense_step(np.zeros(6), GRIPPER_OPEN)
        for _ in range(3):
            rec.dense_step(np.array([0, 0, 0.006, 0, 0, 0.0]), GRIPPER_OPEN)
        rec.terminate()
    else:
        raise ValueError(f"unknown task {task!r}")

    ep = _episode_from(env, rec, task, seed, timestamp)
    if not ep.success:
        raise SceneGenerationError(f"scripted demo failed for task {task} seed {seed}")
    return ep
