import json
import shutil

import numpy as np
import pytest

from hilt.dataset import (
    DatasetError,
    DemoStep,
    Episode,
    IntegrityError,
    InvariantError,
    Mode,
    SchemaVersionError,
    build_dense_view,
    dataset_hash,
    expand_waypoint_view,
    load_dataset,
    load_episode,
    save_episode,
    validate_episode,
    waypoint_segments,
)
from hilt.pointcloud import PointCloud, nearest_point_index


def synthetic_episode(segment_lens=(10,), tail_dense=0, n_cloud=20, seed=0):
    """Hand-built episode: waypoint segments, optional dense tail, terminate."""
    rng = np.random.default_rng(seed)
    steps = []
    for k in segment_lens:
        t0 = len(steps)
        cloud = PointCloud(rng.uniform(-0.2, 0.2, (n_cloud, 3)), rng.uniform(0, 1, (n_cloud, 3)))
        w = np.concatenate([rng.uniform(-0.2, 0.2, 3), rng.uniform(-1, 1, 3), [1.0]])
        si = int(rng.integers(0, n_cloud))
        for _ in range(k):
            steps.append(
                DemoStep(
                    proprio=rng.uniform(-1, 1, 7),
                    action=rng.uniform(-0.01, 0.01, 7),
                    mode=int(Mode.WAYPT),
                    cloud=cloud,
                    waypoint=w,
                    salient_index=si,
                    segment_start=t0,
                    segment_len=k,
                )
            )
    for _ in range(tail_dense):
        steps.append(
            DemoStep(
                proprio=rng.uniform(-1, 1, 7),
                action=rng.uniform(-0.01, 0.01, 7),
                mode=int(Mode.DENSE),
                wrist=rng.uniform(0, 1, (8, 8, 3)),
            )
        )
    steps.append(DemoStep(proprio=rng.uniform(-1, 1, 7), action=np.zeros(7), mode=int(Mode.TERMINATE)))
    return Episode(steps=steps, task="reach_grasp", seed=seed)


# ---------------------------------------------------------------------------
# validation

def test_validate_accepts_real_demo(reach_episode):
    validate_episode(reach_episode)


def test_validate_rejects_terminate_mid_episode():
    ep = synthetic_episode()
    ep.steps[2].mode = int(Mode.TERMINATE)
    with pytest.raises(InvariantError):
        validate_episode(ep)


def test_validate_rejects_missing_annotation():
    ep = synthetic_episode()
    ep.steps[3].waypoint = None
    with pytest.raises(InvariantError):
        validate_episode(ep)


def test_validate_rejects_annotation_on_dense_step():
    ep = synthetic_episode(tail_dense=2)
    d = ep.steps[10]
    d.waypoint = np.zeros(7)
    d.salient_index = 0
    d.segment_start = 10
    d.segment_len = 2
    with pytest.raises(InvariantError):
        validate_episode(ep)


def test_validate_rejects_annotation_drift():
    ep = synthetic_episode()
    ep.steps[5].waypoint = ep.steps[5].waypoint + 1.0
    with pytest.raises(InvariantError):
        validate_episode(ep)


def test_validate_rejects_salient_out_of_range():
    ep = synthetic_episode(n_cloud=20)
    for s in ep.steps[:-1]:
        s.salient_index = 20
    with pytest.raises(InvariantError):
        validate_episode(ep)


def test_validate_rejects_bad_segment_bounds():
    ep = synthetic_episode(segment_lens=(4,))
    for s in ep.steps[:-1]:
        s.segment_len = 9  # segment would run past the end
    with pytest.raises(InvariantError):
        validate_episode(ep)


def test_waypoint_segments_listing(stack_episode):
    segs = waypoint_segments(stack_episode)
    assert len(segs) == 6  # stacking recipe: approach, grasp, lift, move, open, retreat
    t = 0
    for t0, k in segs:
        assert t0 == t
        assert all(stack_episode.steps[t0 + i].segment_start == t0 for i in range(k))
        t += k


# ---------------------------------------------------------------------------
# persistence

def test_round_trip_preserves_content(tmp_path, reach_episode):
    p = save_episode(reach_episode, tmp_path)
    back = load_episode(p)
    assert back.task == reach_episode.task
    assert back.seed == reach_episode.seed
    assert back.collector == reach_episode.collector
    assert len(back.steps) == len(reach_episode.steps)
    for orig, got in zip(reach_episode.steps, back.steps):
        # payload arrays are stored float32
        assert np.array_equal(got.proprio, orig.proprio.astype(np.float32))
        assert np.array_equal(got.action, orig.action.astype(np.float32))
        assert got.mode == orig.mode
        assert (got.cloud is None) == (orig.cloud is None)
        if orig.cloud is not None:
            assert np.array_equal(
                got.cloud.positions, orig.cloud.positions.astype(np.float32)
            )
        if orig.wrist is not None:
            assert np.array_equal(got.wrist, orig.wrist)
        if orig.waypoint is not None:
            assert np.array_equal(got.waypoint, orig.waypoint.astype(np.float32))
            assert got.salient_index == orig.salient_index
            assert got.segment_start == orig.segment_start
            assert got.segment_len == orig.segment_len
    assert back.final_attached == reach_episode.final_attached
    assert back.success == reach_episode.success


def test_second_round_trip_is_bit_exact(tmp_path, reach_episode):
    p1 = save_episode(reach_episode, tmp_path / "a")
    ep1 = load_episode(p1)
    p2 = save_episode(ep1, tmp_path / "b")
    assert (p1 / "manifest.json").read_bytes() == (p2 / "manifest.json").read_bytes()
    assert (p1 / "arrays.bin").read_bytes() == (p2 / "arrays.bin").read_bytes()


def test_save_refuses_existing_directory(tmp_path, reach_episode):
    save_episode(reach_episode, tmp_path)
    with pytest.raises(FileExistsError):
        save_episode(reach_episode, tmp_path)


def test_save_validates_first(tmp_path):
    ep = synthetic_episode()
    ep.steps[2].mode = int(Mode.TERMINATE)
    with pytest.raises(InvariantError):
        save_episode(ep, tmp_path)
    assert list(tmp_path.iterdir()) == []


def test_flipped_payload_byte_detected(tmp_path, reach_episode):
    p = save_episode(reach_episode, tmp_path)
    blob = bytearray((p / "arrays.bin").read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    (p / "arrays.bin").write_bytes(bytes(blob))
    with pytest.raises(IntegrityError):
        load_episode(p)


def test_edited_manifest_detected(tmp_path, reach_episode):
    p = save_episode(reach_episode, tmp_path)
    manifest = json.loads((p / "manifest.json").read_text())
    manifest["seed"] = 999
    (p / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(IntegrityError):
        load_episode(p)


def test_truncated_payload_detected(tmp_path, reach_episode):
    p = save_episode(reach_episode, tmp_path)
    blob = (p / "arrays.bin").read_bytes()
    (p / "arrays.bin").write_bytes(blob[:-10])
    with pytest.raises(IntegrityError):
        load_episode(p)


def test_bad_magic_detected(tmp_path, reach_episode):
    p = save_episode(reach_episode, tmp_path)
    blob = bytearray((p / "arrays.bin").read_bytes())
    blob[0] ^= 0xFF
    (p / "arrays.bin").write_bytes(bytes(blob))
    with pytest.raises(IntegrityError):
        load_episode(p)


def test_unknown_schema_version(tmp_path, reach_episode):
    p = save_episode(reach_episode, tmp_path)
    manifest = json.loads((p / "manifest.json").read_text())
    manifest["schema_version"] = 99
    (p / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(SchemaVersionError):
        load_episode(p)


def test_corrupt_manifest_json(tmp_path, reach_episode):
    p = save_episode(reach_episode, tmp_path)
    (p / "manifest.json").write_text("{not json")
    with pytest.raises(IntegrityError):
        load_episode(p)


def test_load_dataset_orders_by_name(tmp_path, reach_episode, stack_episode):
    save_episode(stack_episode, tmp_path)
    save_episode(reach_episode, tmp_path)
    eps = load_dataset(tmp_path)
    assert [e.task for e in eps] == ["reach_grasp", "stack"]


def test_load_dataset_empty_root(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)


def test_dataset_hash_ignores_timestamp(tmp_path, reach_episode):
    save_episode(reach_episode, tmp_path / "a")
    shifted = Episode(
        steps=reach_episode.steps,
        task=reach_episode.task,
        seed=reach_episode.seed,
        collector=reach_episode.collector,
        timestamp="2026-08-22T12:00:00Z",
        final_object_poses=reach_episode.final_object_poses,
        final_attached=reach_episode.final_attached,
        success=reach_episode.success,
    )
    save_episode(shifted, tmp_path / "b")
    assert dataset_hash(tmp_path / "a") == dataset_hash(tmp_path / "b")


def test_dataset_hash_stable_across_copies(tmp_path, reach_episode):
    save_episode(reach_episode, tmp_path / "a")
    shutil.copytree(tmp_path / "a", tmp_path / "b")
    assert dataset_hash(tmp_path / "a") == dataset_hash(tmp_path / "b")


def test_dataset_hash_sees_payload_changes(tmp_path, reach_episode, stack_episode):
    save_episode(reach_episode, tmp_path / "a")
    save_episode(stack_episode, tmp_path / "b")
    assert dataset_hash(tmp_path / "a") != dataset_hash(tmp_path / "b")


# ---------------------------------------------------------------------------
# waypoint view expansion

def test_expand_alpha_zero_one_pair_per_segment(reach_episode):
    view = expand_waypoint_view([reach_episode], alpha=0.0)
    assert len(view) == len(waypoint_segments(reach_episode))


def test_expand_counting_formula(stack_episode):
    for alpha in (0.0, 0.1, 0.2, 0.5):
        expected = sum(
            1 + min(int(np.floor(alpha * k)), k - 1)
            for _, k in waypoint_segments(stack_episode)
        )
        view = expand_waypoint_view([stack_episode], alpha=alpha)
        assert len(view) == expected


def test_expand_k10_alpha02_gives_three():
    ep = synthetic_episode(segment_lens=(10,))
    view = expand_waypoint_view([ep], alpha=0.2)
    assert len(view) == 3


def test_expand_alpha_one_capped_inside_segment():
    ep = synthetic_episode(segment_lens=(6,))
    view = expand_waypoint_view([ep], alpha=1.0)
    # the step at t0 + k would belong to the next segment, so the expansion
    # stops one short of it
    assert len(view) == 6


def test_expand_targets_match_annotation():
    ep = synthetic_episode(segment_lens=(5,), tail_dense=3)
    view = expand_waypoint_view([ep], alpha=0.4)
    w = ep.steps[0].waypoint
    for cloud, target in view:
        assert np.allclose(target.position, w[0:3])
        assert np.allclose(target.rotation, w[3:6])
        assert target.gripper_open == w[6]
        # the segment is followed by dense steps
        assert target.next_mode == int(Mode.DENSE)


def test_expand_final_segment_next_mode_terminate():
    ep = synthetic_episode(segment_lens=(4,))
    view = expand_waypoint_view([ep], alpha=0.0)
    assert view[0][1].next_mode == int(Mode.TERMINATE)


def test_expand_resnaps_salient_per_step():
    ep = synthetic_episode(segment_lens=(8,), seed=3)
    head = ep.steps[0]
    salient_pos = head.cloud.positions[head.salient_index]
    view = expand_waypoint_view([ep], alpha=0.5)
    for j, (cloud, target) in enumerate(view):
        expect = nearest_point_index(cloud, salient_pos)
        assert target.salient.salient_index == expect


def test_expand_requires_cloud_for_augmented_steps():
    ep = synthetic_episode(segment_lens=(10,))
    for s in ep.steps[1:-1]:
        s.cloud = None  # heads only, as lean recording would leave it
    assert len(expand_waypoint_view([ep], alpha=0.0)) == 1
    with pytest.raises(DatasetError):
        expand_waypoint_view([ep], alpha=0.2)


def test_expand_applies_point_budget():
    ep = synthetic_episode(segment_lens=(3,), n_cloud=50)
    view = expand_waypoint_view([ep], alpha=0.0, point_budget=16)
    cloud, target = view[0]
    assert len(cloud) == 16
    assert target.salient.probs.shape == (16,)


# ---------------------------------------------------------------------------
# dense view

def test_dense_view_window_per_step(place_episode):
    t_pred = 16
    view = build_dense_view([place_episode], t_pred=t_pred)
    assert len(view) == len(place_episode.steps)


def test_dense_view_rows_and_padding(place_episode):
    t_pred = 8
    view = build_dense_view([place_episode], t_pred=t_pred)
    n = len(place_episode.steps)
    for t, (obs, chunk) in enumerate(view):
        assert chunk.shape == (t_pred, 8)
        step_t = place_episode.steps[t]
        assert np.array_equal(obs.wrist_image, step_t.wrist)
        for j in range(t_pred):
            src = place_episode.steps[min(t + j, n - 1)]
            assert np.array_equal(chunk[j, 0:6], src.action[0:6])
            assert chunk[j, 6] == src.action[6]
            assert chunk[j, 7] == float(src.mode)


def test_dense_view_window_inside_dense_segment_is_all_dense(place_episode):
    modes = [s.mode for s in place_episode.steps]
    first_dense = modes.index(int(Mode.DENSE))
    view = build_dense_view([place_episode], t_pred=8)
    chunk = view[first_dense][1]
    # the scripted correction phase runs much longer than 8 steps
    assert np.all(chunk[:, 7] == 1.0)


def test_dense_view_requires_wrist():
    ep = synthetic_episode(segment_lens=(4,))
    with pytest.raises(DatasetError):
        build_dense_view([ep], t_pred=4)
