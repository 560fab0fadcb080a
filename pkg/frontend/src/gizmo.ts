/**
 * Virtual-gripper gizmo: spawns above the selected salient point, is posed
 * with per-axis translation handles and rotation rings, and commits to a
 * set_waypoint message.
 */

import type { TeleopMessage } from "./protocol.js";

export const GRIPPER_OPEN = 1.0;
export const GRIPPER_CLOSED = 0.0;

// default spawn: 8 cm above the salient point, gripper pointing down,
// matching the pre-grasp convention of scripted demonstrations
export const SPAWN_OFFSET: [number, number, number] = [0, 0, 0.08];

export interface GizmoState {
  position: [number, number, number];
  rotation: [number, number, number];
  gripper: number;
  visible: boolean;
}

export function hiddenGizmo(): GizmoState {
  return { position: [0, 0, 0], rotation: [0, 0, 0], gripper: GRIPPER_OPEN, visible: false };
}

export function spawnGizmo(salient: number[]): GizmoState {
  return {
    position: [
      salient[0] + SPAWN_OFFSET[0],
      salient[1] + SPAWN_OFFSET[1],
      salient[2] + SPAWN_OFFSET[2],
    ],
    rotation: [0, 0, 0],
    gripper: GRIPPER_OPEN,
    visible: true,
  };
}

/** Translate along one world axis (handle drag). */
export function dragAxis(g: GizmoState, axis: 0 | 1 | 2, delta: number): GizmoState {
  const position: [number, number, number] = [...g.position];
  position[axis] += delta;
  return { ...g, position };
}

/** Rotate about one world axis (ring drag). */
export function rotateRing(g: GizmoState, axis: 0 | 1 | 2, angle: number): GizmoState {
  const rotation: [number, number, number] = [...g.rotation];
  rotation[axis] += angle;
  return { ...g, rotation };
}

export function setGripper(g: GizmoState, gripper: number): GizmoState {
  return { ...g, gripper };
}

/** Place the gizmo at an absolute pose (scripted clients skip the drags). */
export function poseGizmo(
  g: GizmoState,
  position: number[],
  rotation: number[],
  gripper: number,
): GizmoState {
  return {
    position: [position[0], position[1], position[2]],
    rotation: [rotation[0], rotation[1], rotation[2]],
    gripper,
    visible: g.visible,
  };
}

export function commitMessage(g: GizmoState, seq: number): TeleopMessage {
  if (!g.visible) {
    throw new Error("cannot commit a hidden gizmo");
  }
  return {
    type: "set_waypoint",
    seq,
    position: [...g.position],
    rotation: [...g.rotation],
    gripper: g.gripper,
  };
}
