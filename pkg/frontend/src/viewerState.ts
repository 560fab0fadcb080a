/**
 * Client-side session state: mirrors the server phase machine, tracks the
 * latest frames, the selected salient point, and the gizmo.  All mutation
 * happens through `applyServer` / `applyLocal` so the UI never sends a
 * message that is illegal in its mirrored phase.
 */

import { hiddenGizmo, spawnGizmo, type GizmoState } from "./gizmo.js";
import {
  legalClientTypes,
  type CloudFrame,
  type Phase,
  type TeleopMessage,
  type WristFrame,
} from "./protocol.js";

export interface ViewerState {
  connection: "connecting" | "open" | "closed";
  helloDone: boolean;
  phase: Phase;
  task: string | null;
  frameIndex: number;
  cloud: CloudFrame | null;
  wrist: WristFrame | null;
  salientIndex: number | null;
  salientPoint: number[] | null;
  gizmo: GizmoState;
  recording: boolean;
  lastError: string | null;
  episodeDone: { success: boolean; stepCount: number; path: string | null } | null;
}

export function initialViewerState(): ViewerState {
  return {
    connection: "connecting",
    helloDone: false,
    phase: "idle",
    task: null,
    frameIndex: -1,
    cloud: null,
    wrist: null,
    salientIndex: null,
    salientPoint: null,
    gizmo: hiddenGizmo(),
    recording: false,
    lastError: null,
    episodeDone: null,
  };
}

export function canSend(s: ViewerState, type: string): boolean {
  return legalClientTypes(s.phase, s.helloDone).has(type);
}

/** Fold one server message into the state. */
export function applyServer(s: ViewerState, msg: TeleopMessage): void {
  switch (msg.type) {
    case "hello":
      s.helloDone = true;
      s.phase = msg["phase"] as Phase;
      s.task = (msg["task"] as string) ?? null;
      s.recording = true;
      break;
    case "cloud_frame": {
      const frame = msg as CloudFrame;
      s.cloud = frame;
      s.frameIndex = frame.frame_index;
      break;
    }
    case "wrist_frame":
      s.wrist = msg as WristFrame;
      break;
    case "click_salient":
      s.salientIndex = msg["index"] as number;
      s.salientPoint = msg["point"] as number[];
      s.phase = "await_waypoint_input";
      // a fresh click is required per waypoint; the gizmo follows the snap
      s.gizmo = spawnGizmo(s.salientPoint);
      break;
    case "segment_done":
      s.phase = "idle";
      s.salientIndex = null;
      s.salientPoint = null;
      s.gizmo = hiddenGizmo();
      break;
    case "switch_mode":
      s.phase = msg["phase"] as Phase;
      if (s.phase !== "await_waypoint_input") {
        s.salientIndex = null;
        s.salientPoint = null;
        s.gizmo = hiddenGizmo();
      }
      break;
    case "episode_end":
      s.phase = "done";
      s.recording = false;
      s.episodeDone = {
        success: Boolean(msg["success"]),
        stepCount: (msg["step_count"] as number) ?? 0,
        path: (msg["path"] as string | null) ?? null,
      };
      break;
    case "error":
      s.lastError = msg["message"] as string;
      break;
  }
}

/** Fold one locally sent message into the state (optimistic mirror). */
export function applyLocal(s: ViewerState, msg: TeleopMessage): void {
  if (msg.type === "set_waypoint") {
    // the server sends no direct reply; segment_done ends this phase
    s.phase = "executing_waypoint";
    s.gizmo = hiddenGizmo();
  }
}
