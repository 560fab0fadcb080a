import math

import numpy as np
import pytest

from hilt.dataset import Mode, validate_episode
from hilt.executor import ControllerLimits
from hilt.pose import GRIPPER_CLOSED, GRIPPER_OPEN, Pose7, euler_to_matrix
from hilt.simworld import (
    ATTACH_TOLERANCE,
    GRIPPER_COLOR,
    TABLE_COLOR,
    TASKS,
    WORKSPACE_HI,
    WORKSPACE_LO,
    Env,
    ObserveConfig,
    Scene,
    SceneObject,
    check_success,
    generate_scene,
    observe,
    render_wrist,
    scene_pose_errors,
    scripted_demo,
    step_env,
    translate_scene,
    world_anchor,
)
from hilt.simworld import _apportion, _gripper_parts  # noqa: F401  (oracle needs geometry)


# ---------------------------------------------------------------------------
# geometry oracles

def box_sdf(local, size):
    q = np.abs(local) - np.asarray(size) / 2
    outside = np.linalg.norm(np.maximum(q, 0))
    inside = min(q.max(), 0.0)
    return outside + inside


def cylinder_sdf(local, size):
    r, _, h = size
    d = np.array([math.hypot(local[0], local[1]) - r, abs(local[2]) - h / 2])
    outside = np.linalg.norm(np.maximum(d, 0))
    inside = min(d.max(), 0.0)
    return outside + inside


def ring_sdf(local, size):
    major, minor = size[0], size[1]
    q = math.hypot(math.hypot(local[0], local[1]) - major, local[2])
    return q - minor


def surface_distance(scene: Scene, p) -> float:
    """Distance from p to the nearest rendered surface in the scene."""
    dists = []
    (blo, bhi) = scene.table_bounds
    if blo[0] <= p[0] <= bhi[0] and blo[1] <= p[1] <= bhi[1]:
        dists.append(abs(p[2] - scene.table_z))
    for o in scene.objects:
        local = euler_to_matrix(o.rot).T @ (p - o.pos)
        if o.shape == "box":
            dists.append(abs(box_sdf(local, o.size)))
        elif o.shape == "cylinder":
            dists.append(abs(cylinder_sdf(local, o.size)))
        else:
            dists.append(abs(ring_sdf(local, o.size)))
    rm = euler_to_matrix(scene.gripper.rot)
    for size, off in _gripper_parts(scene.gripper):
        local = rm.T @ (p - scene.gripper.pos) - off
        dists.append(abs(box_sdf(local, size)))
    return min(dists)


# ---------------------------------------------------------------------------
# scene generation

@pytest.mark.parametrize("task", sorted(TASKS))
def test_generate_scene_deterministic(task):
    a = generate_scene(task, 42)
    b = generate_scene(task, 42)
    assert scene_pose_errors(a, b) == 0.0
    c = generate_scene(task, 43)
    assert scene_pose_errors(a, c) > 0


def test_generate_scene_unknown_task():
    with pytest.raises(ValueError):
        generate_scene("juggle", 0)


@pytest.mark.parametrize("task", sorted(TASKS))
def test_generated_objects_keep_clearance(task):
    for seed in range(150):
        scene = generate_scene(task, seed)
        objs = [o for o in scene.objects if o.name != "slot_marker"]
        for i in range(len(objs)):
            for j in range(i + 1, len(objs)):
                d = np.linalg.norm(objs[i].pos[0:2] - objs[j].pos[0:2])
                lim = objs[i].horizontal_radius() + objs[j].horizontal_radius() + 0.03
                assert d >= lim - 1e-12, f"{task} seed {seed}: {objs[i].name}/{objs[j].name}"


@pytest.mark.parametrize("task", sorted(TASKS))
def test_generated_objects_inside_task_bounds(task):
    spec = TASKS[task]
    for seed in range(50):
        scene = generate_scene(task, seed)
        for o in scene.objects:
            if o.name == "slot_marker":
                continue
            assert np.all(o.pos[0:2] >= np.asarray(spec.bounds_lo) - 1e-12)
            assert np.all(o.pos[0:2] <= np.asarray(spec.bounds_hi) + 1e-12)


# ---------------------------------------------------------------------------
# stepping and attachment

def _single_box_scene(box_pos, gripper_pos, gripper_open=GRIPPER_OPEN):
    obj = SceneObject(
        "thing", "box", box_pos, (0, 0, 0), (0.04, 0.04, 0.04),
        (0.8, 0.2, 0.2), (0, 0, 0.02),
    )
    return Scene(
        objects=[obj],
        gripper=Pose7(pos=gripper_pos, rot=(0, 0, 0), gripper=gripper_open),
    )


def test_attach_within_tolerance():
    anchor = np.array([0.0, 0.0, 0.04])
    scene = _single_box_scene((0, 0, 0.02), anchor + [0.009, 0, 0])
    closed = step_env(scene, [0, 0, 0, 0, 0, 0, GRIPPER_CLOSED])
    assert closed.attached == 0


def test_attach_beyond_tolerance_fails():
    anchor = np.array([0.0, 0.0, 0.04])
    scene = _single_box_scene((0, 0, 0.02), anchor + [0.011, 0, 0])
    closed = step_env(scene, [0, 0, 0, 0, 0, 0, GRIPPER_CLOSED])
    assert closed.attached == -1


def test_attach_uses_post_motion_gripper_position():
    anchor = np.array([0.0, 0.0, 0.04])
    # starts far away but the same action moves it within reach and closes
    scene = _single_box_scene((0, 0, 0.02), anchor + [0.009, 0, 0.008])
    closed = step_env(scene, [0, 0, -0.008, 0, 0, 0, GRIPPER_CLOSED])
    assert closed.attached == 0


def test_attach_requires_open_to_close_transition():
    anchor = np.array([0.0, 0.0, 0.04])
    scene = _single_box_scene((0, 0, 0.02), anchor, gripper_open=GRIPPER_CLOSED)
    again = step_env(scene, [0, 0, 0, 0, 0, 0, GRIPPER_CLOSED])
    assert again.attached == -1


def test_attached_object_follows_rigidly():
    anchor = np.array([0.0, 0.0, 0.04])
    scene = _single_box_scene((0, 0, 0.02), anchor)
    s = step_env(scene, [0, 0, 0, 0, 0, 0, GRIPPER_CLOSED])
    assert s.attached == 0
    rng = np.random.default_rng(4)
    for _ in range(20):
        d = np.concatenate([rng.uniform(-0.01, 0.01, 3), rng.uniform(-0.05, 0.05, 3)])
        s = step_env(s, np.concatenate([d, [GRIPPER_CLOSED]]))
        g = s.gripper
        expect_pos = euler_to_matrix(g.rot) @ s.attach_offset + g.pos
        assert np.allclose(s.objects[0].pos, expect_pos, atol=1e-12)
        assert np.allclose(s.objects[0].rot, g.rot + s.attach_rel_rot, atol=1e-12)


def test_release_rests_in_place():
    anchor = np.array([0.0, 0.0, 0.04])
    scene = _single_box_scene((0, 0, 0.02), anchor)
    s = step_env(scene, [0, 0, 0, 0, 0, 0, GRIPPER_CLOSED])
    s = step_env(s, [0.02, 0, 0.05, 0, 0, 0, GRIPPER_CLOSED])
    held_pos = s.objects[0].pos.copy()
    s = step_env(s, [0, 0, 0, 0, 0, 0, GRIPPER_OPEN])
    assert s.attached == -1
    s = step_env(s, [0.03, 0.02, 0.01, 0, 0, 0, GRIPPER_OPEN])
    assert np.array_equal(s.objects[0].pos, held_pos)


def test_step_clips_gripper_to_workspace():
    scene = _single_box_scene((0.1, 0.1, 0.02), (0.3, 0.3, 0.4))
    s = step_env(scene, [0.2, 0.2, 0.2, 0, 0, 0, GRIPPER_OPEN])
    assert np.all(s.gripper.pos <= WORKSPACE_HI + 1e-15)
    assert np.all(s.gripper.pos >= WORKSPACE_LO - 1e-15)


def test_step_rejects_non_finite_action():
    scene = _single_box_scene((0, 0, 0.02), (0, 0, 0.2))
    with pytest.raises(ValueError):
        step_env(scene, [np.nan, 0, 0, 0, 0, 0, 1.0])


def test_step_does_not_mutate_input_scene():
    scene = _single_box_scene((0, 0, 0.02), (0, 0, 0.2))
    before = scene.gripper.pos.copy()
    step_env(scene, [0.01, 0, 0, 0, 0, 0, GRIPPER_OPEN])
    assert np.array_equal(scene.gripper.pos, before)
    assert scene.step_index == 0


# ---------------------------------------------------------------------------
# success predicates

def test_success_reach_grasp_cases():
    scene = _single_box_scene((0, 0, 0.071), (0, 0, 0.1))
    scene.objects[0].name = "target"
    scene.attached = 0
    assert check_success(scene, "reach_grasp")  # 0.071 - 0.02 = 0.051 >= 0.05
    scene.attached = -1
    assert not check_success(scene, "reach_grasp")
    scene.attached = 0
    scene.objects[0].pos[2] = 0.05
    assert not check_success(scene, "reach_grasp")


def _stack_scene(axy, az, bxy, attached=-1):
    a = SceneObject("cup_a", "cylinder", (axy[0], axy[1], az), (0, 0, 0),
                    (0.03, 0.03, 0.06), (0.8, 0.2, 0.1), (0, 0, 0.03))
    b = SceneObject("cup_b", "cylinder", (bxy[0], bxy[1], 0.025), (0, 0, 0),
                    (0.035, 0.035, 0.05), (0.2, 0.3, 0.8), (0, 0, 0.025))
    return Scene(objects=[a, b], gripper=Pose7(), attached=attached)


def test_success_stack_cases():
    # resting exactly on cup_b: z = 0.05 + 0.03
    assert check_success(_stack_scene((0.1, 0.1), 0.08, (0.1, 0.1)), "stack")
    assert check_success(_stack_scene((0.105, 0.1), 0.085, (0.1, 0.1)), "stack")
    # too far sideways
    assert not check_success(_stack_scene((0.12, 0.1), 0.08, (0.1, 0.1)), "stack")
    # hovering above
    assert not check_success(_stack_scene((0.1, 0.1), 0.095, (0.1, 0.1)), "stack")
    # still held
    assert not check_success(_stack_scene((0.1, 0.1), 0.08, (0.1, 0.1), attached=0), "stack")


def _place_scene(part_pos, attached=-1):
    part = SceneObject("part", "box", part_pos, (0, 0, 0), (0.03, 0.03, 0.03),
                       (0.8, 0.2, 0.1), (0, 0, 0.015))
    plate = SceneObject("plate", "box", (0.05, -0.02, 0.005), (0, 0, 0),
                        (0.09, 0.09, 0.01), (0.9, 0.85, 0.55), (0, 0, 0.005))
    return Scene(objects=[part, plate], gripper=Pose7(), attached=attached)


def test_success_precise_place_cases():
    slot = np.array([0.05, -0.02, 0.005 + 0.005 + 0.015])
    assert check_success(_place_scene(slot), "precise_place")
    assert check_success(_place_scene(slot + [0.004, 0, 0]), "precise_place")
    assert not check_success(_place_scene(slot + [0.006, 0, 0]), "precise_place")
    assert not check_success(_place_scene(slot, attached=0), "precise_place")


# ---------------------------------------------------------------------------
# observation

def test_observe_deterministic_per_state():
    scene = generate_scene("reach_grasp", 5)
    c1, o1 = observe(scene)
    c2, o2 = observe(scene)
    assert np.array_equal(c1.positions, c2.positions)
    assert np.array_equal(c1.colors, c2.colors)
    assert np.array_equal(o1.wrist_image, o2.wrist_image)
    stepped = step_env(scene, [0.001, 0, 0, 0, 0, 0, GRIPPER_OPEN])
    c3, _ = observe(stepped)
    assert not np.array_equal(c1.positions, c3.positions)


def test_observe_exact_point_budget():
    scene = generate_scene("stack", 1)
    for budget in (64, 257, 1024):
        cloud, _ = observe(scene, ObserveConfig(point_budget=budget))
        assert len(cloud) == budget


def test_observe_noise_free_points_lie_on_surfaces():
    for task in sorted(TASKS):
        scene = generate_scene(task, 2)
        cloud, _ = observe(scene, ObserveConfig(point_budget=600, noise_sigma=0.0))
        for p in cloud.positions:
            assert surface_distance(scene, p) <= 1e-9


def test_observe_ring_objects_supported():
    ring = SceneObject("hoop", "ring", (0.05, 0.0, 0.03), (0, 0, 0),
                       (0.05, 0.01, 0.0), (0.9, 0.4, 0.1), (0, 0, 0))
    scene = Scene(objects=[ring], gripper=Pose7(pos=(0, -0.2, 0.3)))
    cloud, _ = observe(scene, ObserveConfig(point_budget=400, noise_sigma=0.0))
    assert len(cloud) == 400
    for p in cloud.positions:
        assert surface_distance(scene, p) <= 1e-9


def test_observe_translation_equivariant():
    scene = generate_scene("reach_grasp", 9)
    shift = np.array([0.013, -0.021, 0.017])
    moved = translate_scene(scene, shift)
    base_cloud, _ = observe(scene, ObserveConfig(noise_sigma=0.001))
    moved_cloud, _ = observe(moved, ObserveConfig(noise_sigma=0.001))
    assert np.allclose(moved_cloud.positions, base_cloud.positions + shift, atol=1e-9)
    assert np.array_equal(moved_cloud.colors, base_cloud.colors)


def test_observe_gripper_state_changes_cloud():
    scene = generate_scene("reach_grasp", 3)
    open_cloud, _ = observe(scene, ObserveConfig(noise_sigma=0.0))
    closed = scene.copy()
    closed.gripper = Pose7(pos=scene.gripper.pos, rot=scene.gripper.rot,
                           gripper=GRIPPER_CLOSED)
    closed_cloud, _ = observe(closed, ObserveConfig(noise_sigma=0.0))
    # finger gap differs, so the sampled gripper points move
    assert not np.array_equal(open_cloud.positions, closed_cloud.positions)
    grip_mask = np.all(open_cloud.colors == np.asarray(GRIPPER_COLOR), axis=1)
    assert grip_mask.sum() > 0


def test_observe_proprio_matches_gripper():
    scene = generate_scene("stack", 4)
    _, obs = observe(scene)
    assert np.array_equal(obs.proprio, scene.gripper.to_array())


def test_apportion_exact_total_largest_remainder():
    counts = _apportion(np.array([1.0, 1.0, 1.0]), 10)
    assert counts.sum() == 10
    assert sorted(counts.tolist()) == [3, 3, 4]
    counts = _apportion(np.array([0.5, 0.25, 0.25]), 8)
    assert counts.tolist() == [4, 2, 2]
    assert _apportion(np.array([0.0, 0.0]), 5).tolist() == [0, 0]


# ---------------------------------------------------------------------------
# wrist camera

def test_wrist_shape_and_range():
    scene = generate_scene("precise_place", 6)
    img = render_wrist(scene)
    assert img.shape == (64, 64, 3)
    assert img.dtype == np.float32
    assert img.min() >= 0.0
    assert img.max() <= 1.0


def test_wrist_ignores_objects_fully_outside_crop():
    base = _single_box_scene((0.0, 0.0, 0.02), (0.0, 0.0, 0.15))
    # corner pixel reach is halfwidth * sqrt(2) = 0.113; put the extra box
    # beyond that plus its own horizontal extent
    far = SceneObject("far_box", "box", (0.2, 0.0, 0.02), (0, 0, 0),
                      (0.05, 0.05, 0.04), (0.1, 0.9, 0.1), (0, 0, 0.02))
    with_far = Scene(objects=base.objects + [far], gripper=base.gripper)
    assert np.array_equal(render_wrist(base), render_wrist(with_far))


def test_wrist_sees_objects_inside_crop():
    base = _single_box_scene((0.0, 0.0, 0.02), (0.0, 0.0, 0.15))
    near = SceneObject("near_box", "box", (0.04, 0.0, 0.02), (0, 0, 0),
                       (0.05, 0.05, 0.04), (0.1, 0.9, 0.1), (0, 0, 0.02))
    with_near = Scene(objects=base.objects + [near], gripper=base.gripper)
    assert not np.array_equal(render_wrist(base), render_wrist(with_near))


def test_wrist_yaw_alignment_rotates_with_gripper():
    # an off-axis box lands in a different image region once the camera yaws
    scene = _single_box_scene((0.05, 0.0, 0.02), (0.0, 0.0, 0.15))
    img0 = render_wrist(scene)
    yawed = scene.copy()
    yawed.gripper = Pose7(pos=scene.gripper.pos, rot=(0, 0, np.pi / 2),
                          gripper=scene.gripper.gripper)
    img90 = render_wrist(yawed)
    # rotating the camera a quarter turn maps the box to the rotated image
    assert np.allclose(img90, np.rot90(img0, k=-1), atol=1e-6)


# ---------------------------------------------------------------------------
# env wrapper and scripted demos

def test_env_reset_and_success_flow():
    env = Env("reach_grasp")
    env.reset(3)
    assert not env.success()
    cloud, obs = env.observe()
    assert len(cloud) == 1024
    env.step(np.zeros(7))
    assert env.scene.step_index == 1


@pytest.mark.parametrize("task", sorted(TASKS))
def test_scripted_demo_succeeds_across_seeds(task):
    for seed in range(10):
        ep = scripted_demo(task, seed, record_cloud=False, record_wrist=False)
        assert ep.success == 1
        validate_episode(ep)
        assert ep.steps[-1].mode == int(Mode.TERMINATE)


def test_scripted_demo_deterministic():
    a = scripted_demo("stack", 17, record_cloud=False, record_wrist=False)
    b = scripted_demo("stack", 17, record_cloud=False, record_wrist=False)
    assert len(a.steps) == len(b.steps)
    for sa, sb in zip(a.steps, b.steps):
        assert np.array_equal(sa.action, sb.action)
        assert np.array_equal(sa.proprio, sb.proprio)
    assert np.array_equal(a.final_object_poses, b.final_object_poses)


def test_scripted_demo_respects_custom_limits():
    fine = scripted_demo("reach_grasp", 2, record_cloud=False, record_wrist=False,
                         limits=ControllerLimits(max_trans_delta=0.005))
    coarse = scripted_demo("reach_grasp", 2, record_cloud=False, record_wrist=False)
    assert len(fine.steps) > len(coarse.steps)
    for s in fine.steps:
        assert np.linalg.norm(s.action[0:3]) <= 0.005 * (1 + 1e-12)


def test_scripted_demo_partial_cloud_recording():
    ep = scripted_demo("reach_grasp", 4, record_cloud=0.25, record_wrist=False)
    for t0, k in [(s.segment_start, s.segment_len) for s in ep.steps
                  if s.segment_start is not None]:
        keep = int(np.floor(0.25 * k))
        for i in range(k):
            has = ep.steps[t0 + i].cloud is not None
            assert has == (i <= keep)


def test_scene_pose_errors_metric():
    a = generate_scene("stack", 0)
    assert scene_pose_errors(a, a.copy()) == 0.0
    b = a.copy()
    b.objects[0].pos[0] += 0.25
    assert np.isclose(scene_pose_errors(a, b), 0.25)
    c = a.copy()
    c.attached = 0
    assert scene_pose_errors(a, c) == np.inf


def test_world_anchor_rotates_with_object():
    obj = SceneObject("o", "box", (0.1, 0.0, 0.02), (0, 0, np.pi / 2),
                      (0.04, 0.02, 0.04), (1, 0, 0), (0.02, 0, 0))
    a = world_anchor(obj)
    assert np.allclose(a, [0.1, 0.02, 0.02], atol=1e-12)
