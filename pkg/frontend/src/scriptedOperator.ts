/**
 * Scripted stand-in for a human demonstrator on the reach_grasp task.
 *
 * Works only from what the GUI can see: the streamed point cloud.  The
 * target is the red box; its grasp anchor is estimated as the centroid of
 * the top face of the red cluster.  The waypoint script mirrors what a
 * person does: approach above the anchor with the gripper open, descend
 * and close, lift.
 */

import { GRIPPER_CLOSED, GRIPPER_OPEN, poseGizmo, spawnGizmo, type GizmoState } from "./gizmo.js";
import type { CloudFrame, TeleopMessage } from "./protocol.js";
import type { TeleopClient } from "./client.js";

export function isTargetColor(c: number[]): boolean {
  return c[0] > 0.6 && c[1] < 0.35 && c[2] < 0.35;
}

/**
 * Grasp anchor from a cloud frame: centroid of the top 1 cm band of
 * red points.  Null when no red points are visible.
 */
export function findGraspAnchor(frame: CloudFrame): number[] | null {
  const pts: number[][] = [];
  for (let i = 0; i < frame.positions.length; i++) {
    if (isTargetColor(frame.colors[i])) {
      pts.push(frame.positions[i]);
    }
  }
  if (pts.length === 0) {
    return null;
  }
  let zMax = -Infinity;
  for (const p of pts) {
    zMax = Math.max(zMax, p[2]);
  }
  const top = pts.filter((p) => p[2] > zMax - 0.01);
  const c = [0, 0, 0];
  for (const p of top) {
    c[0] += p[0];
    c[1] += p[1];
    c[2] += p[2];
  }
  return [c[0] / top.length, c[1] / top.length, c[2] / top.length];
}

async function clickAndCommit(
  client: TeleopClient,
  anchor: number[],
  pose: (g: GizmoState) => GizmoState,
): Promise<void> {
  client.send("click_salient", { point: anchor });
  const reply = await client.waitForType("click_salient");
  // gizmo spawns at the snapped point; the scripted drag poses it directly
  let gizmo = spawnGizmo(reply["point"] as number[]);
  gizmo = pose(gizmo);
  client.send("set_waypoint", {
    position: [...gizmo.position],
    rotation: [...gizmo.rotation],
    gripper: gizmo.gripper,
  });
  await client.waitForType("segment_done");
}

/** Drive one full reach_grasp episode; resolves with the episode_end message. */
export async function runReachGraspEpisode(client: TeleopClient): Promise<TeleopMessage> {
  client.hello();
  await client.waitForType("hello");
  await client.waitFor((_, s) => s.cloud !== null);
  const anchor = findGraspAnchor(client.state.cloud!);
  if (anchor === null) {
    throw new Error("no target visible in the first cloud frame");
  }

  // approach: the default spawn pose, 8 cm above the anchor, open
  await clickAndCommit(client, anchor, (g) => g);
  // grasp: descend to the anchor and close
  await clickAndCommit(client, anchor, (g) =>
    poseGizmo(g, anchor, [0, 0, 0], GRIPPER_CLOSED),
  );
  // lift: straight up, stay closed
  await clickAndCommit(client, anchor, (g) =>
    poseGizmo(g, [anchor[0], anchor[1], anchor[2] + 0.12], [0, 0, 0], GRIPPER_CLOSED),
  );

  client.send("switch_mode", { mode: "terminate" });
  return client.waitForType("episode_end");
}
