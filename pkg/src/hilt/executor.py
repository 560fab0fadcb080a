"""Hybrid execution: interpolating controller, mode machine, episode rollout.

The controller turns a target waypoint into a sequence of bounded delta
actions; the mode machine arbitrates between waypoint prediction, dense
chunk execution, and termination.  Episode rollouts run open loop within a
planned segment: deltas are computed from the plan, not re-measured, which
makes recorded actions replayable verbatim.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import MODE_TRANSITIONS, DemoStep, Mode
from .pointcloud import crop_workspace, fps_downsample
from .pose import Pose7
from .waypoint_policy import WaypointInference

DEFAULT_STEP_BUDGET = 400


class ExecutorError(Exception):
    pass


@dataclass
class ControllerLimits:
    max_trans_delta: float = 0.01
    max_rot_delta: float = 0.05
    rate_hz: float = 10.0
    speed_multiplier: float = 1.0

    def __post_init__(self):
        for name in ("max_trans_delta", "max_rot_delta", "rate_hz", "speed_multiplier"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class PlanStep:
    target: Pose7
    delta: np.ndarray
    gripper: float

    def action(self) -> np.ndarray:
        out = np.empty(7)
        out[0:6] = self.delta
        out[6] = self.gripper
        return out


def plan_interpolation(
    current: Pose7, waypoint: Pose7, limits: ControllerLimits
) -> list[PlanStep]:
    """Linear interpolation from current to waypoint under per-step limits.

    Step count k = max(ceil(|translation| / dt), ceil(max axis rotation / dr), 1)
    with dt, dr the per-step limits scaled by the speed multiplier.  Steps
    are equal fractions of the full delta; the final step's target is the
    waypoint itself (no accumulated rounding), and only the final step
    carries the waypoint's gripper command.
    """
    dt = limits.max_trans_delta * limits.speed_multiplier
    dr = limits.max_rot_delta * limits.speed_multiplier
    dpos = waypoint.pos - current.pos
    drot = waypoint.rot - current.rot
    k = max(
        math.ceil(float(np.linalg.norm(dpos)) / dt),
        math.ceil(float(np.max(np.abs(drot))) / dr),
        1,
    )
    start = np.concatenate([current.pos, current.rot])
    full = np.concatenate([dpos, drot])
    prev = start.copy()
    steps = []
    for i in range(1, k + 1):
        if i == k:
            tgt = np.concatenate([waypoint.pos, waypoint.rot])
            grip = waypoint.gripper
        else:
            tgt = start + (i / k) * full
            grip = current.gripper
        steps.append(
            PlanStep(
                target=Pose7(pos=tgt[0:3], rot=tgt[3:6], gripper=grip),
                delta=tgt - prev,
                gripper=grip,
            )
        )
        prev = tgt
    return steps


def step_mode_machine(mode: Mode, event: str, next_mode: int) -> Mode:
    """Advance the mode machine; raises ExecutorError on illegal transitions.

    Events: "segment_done" after a waypoint plan fully executes,
    "chunk_done" after a dense chunk's execution horizon.  Terminate is
    absorbing and accepts no event.
    """
    mode = Mode(mode)
    if mode == Mode.TERMINATE:
        raise ExecutorError("terminate is absorbing")
    expected = "segment_done" if mode == Mode.WAYPT else "chunk_done"
    if event != expected:
        raise ExecutorError(f"event {event!r} invalid in mode {mode.name}")
    if next_mode not in MODE_TRANSITIONS[int(mode)]:
        raise ExecutorError(f"mode {next_mode} unreachable from {mode.name}")
    return Mode(next_mode)


@dataclass
class RolloutRecord:
    steps: list[DemoStep]
    outcome: str  # success | failure | timeout
    wall_steps: int
    diagnostic: str = ""


@dataclass
class ExecutorConfig:
    point_budget: int = 256
    workspace: tuple = ((-0.35, -0.35, -0.01), (0.35, 0.35, 0.45))
    exec_horizon: int = 8
    fps_start: int = 0
    record_obs: bool = False
    # extra inferences per waypoint decision on re-downsampled views of the
    # same observation; positions and rotations average, discrete heads take
    # a majority.  Cuts the subsampling noise share of the waypoint error
    infer_views: int = 1
    # what to do when the policy asks for dense mode but no dense model is
    # loaded: "terminate" gives the waypoint-only ablation, "error" raises
    dense_fallback: str = "terminate"
    limits: ControllerLimits = field(default_factory=ControllerLimits)


def _observe_processed(env, cfg: ExecutorConfig):
    cloud, dense_obs = env.observe()
    cloud = crop_workspace(cloud, cfg.workspace[0], cfg.workspace[1])
    idx = fps_downsample(cloud, cfg.point_budget, start=cfg.fps_start)
    return cloud.select(idx), dense_obs


def _infer_waypoint(env, waypoint_model, cfg: ExecutorConfig):
    """One waypoint decision; optionally an average over subsampled views."""
    cloud, dense_obs = env.observe()
    cloud = crop_workspace(cloud, cfg.workspace[0], cfg.workspace[1])
    views = max(1, cfg.infer_views)
    preds = []
    first = None
    for k in range(views):
        idx = fps_downsample(cloud, cfg.point_budget, start=cfg.fps_start + k)
        sub = cloud.select(idx)
        if first is None:
            first = sub
        preds.append(waypoint_model.infer(sub))
    if len(preds) == 1:
        return first, dense_obs, preds[0]
    pred = WaypointInference(
        position=np.mean([q.position for q in preds], axis=0),
        rotation=np.mean([q.rotation for q in preds], axis=0),
        gripper_open=float(
            np.round(np.mean([q.gripper_open for q in preds]))
        ),
        next_mode=int(np.bincount([q.next_mode for q in preds]).argmax()),
        salient_index=preds[0].salient_index,
    )
    return first, dense_obs, pred


def run_episode(
    env,
    waypoint_model,
    dense_model=None,
    config: ExecutorConfig | None = None,
    seed: int = 0,
    budget: int = DEFAULT_STEP_BUDGET,
) -> RolloutRecord:
    """Roll out the hybrid policy until terminate, success, or budget.

    Starts in waypoint mode.  Waypoint mode: observe, downsample, infer a
    waypoint, execute the full interpolation plan.  Dense mode: sample an
    action chunk, execute its first exec_horizon steps, then let the decoded
    mode decide what runs next.  Every executed env step is recorded.
    """
    cfg = config or ExecutorConfig()
    env.reset(seed)
    steps: list[DemoStep] = []
    wall = 0
    mode = Mode.WAYPT
    chunk_counter = 0

    def done():
        return env.success()

    try:
        while wall < budget:
            if mode == Mode.TERMINATE:
                steps.append(
                    DemoStep(
                        proprio=env.proprio.to_array(),
                        action=np.zeros(7),
                        mode=int(Mode.TERMINATE),
                    )
                )
                outcome = "success" if done() else "failure"
                return RolloutRecord(steps, outcome, wall)

            if mode == Mode.WAYPT:
                cloud, dense_obs, pred = _infer_waypoint(env, waypoint_model, cfg)
                target = Pose7(
                    pos=pred.position, rot=pred.rotation, gripper=pred.gripper_open
                )
                plan = plan_interpolation(env.proprio, target, cfg.limits)
                t0, k = len(steps), len(plan)
                for i, ps in enumerate(plan):
                    if wall >= budget:
                        return RolloutRecord(steps, "timeout", wall)
                    steps.append(
                        DemoStep(
                            proprio=env.proprio.to_array(),
                            action=ps.action(),
                            mode=int(Mode.WAYPT),
                            cloud=cloud if (cfg.record_obs and i == 0) else None,
                            wrist=dense_obs.wrist_image if cfg.record_obs else None,
                            waypoint=target.to_array(),
                            salient_index=pred.salient_index,
                            segment_start=t0,
                            segment_len=k,
                        )
                    )
                    env.step(ps.action())
                    wall += 1
                    if done():
                        return RolloutRecord(steps, "success", wall)
                    if cfg.record_obs and i + 1 < k:
                        _, dense_obs = env.observe()
                mode = step_mode_machine(mode, "segment_done", pred.next_mode)

            elif mode == Mode.DENSE:
                if dense_model is None:
                    if cfg.dense_fallback == "terminate":
                        mode = Mode.TERMINATE
                        continue
                    raise ExecutorError("dense mode requested but no dense model loaded")
                _, dense_obs = env.observe()
                chunk, next_mode = dense_model.sample(
                    dense_obs, seed=(seed * 100003 + chunk_counter)
                )
                chunk_counter += 1
                for row in chunk[: cfg.exec_horizon]:
                    if wall >= budget:
                        return RolloutRecord(steps, "timeout", wall)
                    action = np.asarray(row[0:7], dtype=np.float64)
                    steps.append(
                        DemoStep(
                            proprio=env.proprio.to_array(),
                            action=action,
                            mode=int(Mode.DENSE),
                            wrist=dense_obs.wrist_image if cfg.record_obs else None,
                        )
                    )
                    env.step(action)
                    wall += 1
                    if done():
                        return RolloutRecord(steps, "success", wall)
                    _, dense_obs = env.observe()
                mode = step_mode_machine(mode, "chunk_done", int(next_mode))
    except ExecutorError:
        raise
    except Exception as e:  # env fault -> failure outcome with diagnostic
        return RolloutRecord(steps, "failure", wall, diagnostic=f"{type(e).__name__}: {e}")
    return RolloutRecord(steps, "timeout", wall)


def replay_episode(env, episode, seed: int | None = None):
    """Re-execute a stored episode's actions; returns the final scene.

    Stops before the terminate step (it carries no motion).  The caller is
    responsible for resetting with the episode's task; the seed defaults to
    the one recorded in the episode so the initial scene matches.
    """
    env.reset(episode.seed if seed is None else seed)
    for step in episode.steps:
        if step.mode == Mode.TERMINATE:
            break
        env.step(step.action)
    return env.scene
