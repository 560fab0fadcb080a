/**
 * Browser entry: canvas viewer + input wiring around the session client.
 *
 * Query parameters: ?server=ws://host:port&budget=2048 (budget thins the
 * rendered points; the wire cloud is untouched).
 */

import { TeleopClient } from "./client.js";
import { DENSE_RATE_HZ, denseDeltaMessage, denseInputState, keyDown, keyUp, toggleGripper } from "./denseInput.js";
import { dragAxis, rotateRing, setGripper, GRIPPER_CLOSED, GRIPPER_OPEN } from "./gizmo.js";
import { defaultCamera, pickPoint, projectPoint } from "./picking.js";
import { decodeWristData, type WristFrame } from "./protocol.js";

const params = new URLSearchParams(location.search);
const server = params.get("server") ?? `ws://${location.hostname || "127.0.0.1"}:8765`;
const renderBudget = parseInt(params.get("budget") ?? "4096", 10);

const canvas = document.getElementById("viewer") as HTMLCanvasElement;
const ctx = canvas.getContext("2d")!;
const hud = document.getElementById("hud")!;
const wristCanvas = document.getElementById("wrist") as HTMLCanvasElement;
const wristCtx = wristCanvas.getContext("2d")!;

const cam = defaultCamera(canvas.width, canvas.height);
const ws = new WebSocket(server);
ws.binaryType = "arraybuffer";
const client = new TeleopClient((bytes) => ws.send(bytes));
const dense = denseInputState();
let flashUntil = 0; // missed-pick feedback

ws.addEventListener("open", () => {
  client.state.connection = "open";
  client.hello();
});
ws.addEventListener("close", () => {
  client.state.connection = "closed";
});
ws.addEventListener("message", (ev) => {
  const msg = client.feed(ev.data as ArrayBuffer);
  if (msg.type === "wrist_frame") {
    drawWrist();
  }
});

function drawWrist(): void {
  const frame = client.state.wrist;
  if (!frame) {
    return;
  }
  try {
    const flat = decodeWristData(frame as WristFrame);
    const img = wristCtx.createImageData(frame.width, frame.height);
    for (let i = 0, j = 0; i < flat.length; i += 3, j += 4) {
      img.data[j] = flat[i];
      img.data[j + 1] = flat[i + 1];
      img.data[j + 2] = flat[i + 2];
      img.data[j + 3] = 255;
    }
    wristCtx.putImageData(img, 0, 0);
  } catch {
    // wrist preview is best-effort
  }
}

function render(): void {
  const s = client.state;
  ctx.fillStyle = "#11131a";
  ctx.fillRect(0, 0, canvas.width, canvas.height);
  if (s.cloud) {
    const n = s.cloud.positions.length;
    const step = Math.max(1, Math.ceil(n / renderBudget));
    for (let i = 0; i < n; i += step) {
      const proj = projectPoint(cam, s.cloud.positions[i]);
      if (proj.depth <= 0) {
        continue;
      }
      const c = s.cloud.colors[i];
      ctx.fillStyle = `rgb(${(c[0] * 255) | 0},${(c[1] * 255) | 0},${(c[2] * 255) | 0})`;
      const r = i === s.salientIndex ? 5 : 2;
      ctx.fillRect(proj.x - r / 2, proj.y - r / 2, r, r);
    }
    if (s.salientPoint) {
      const proj = projectPoint(cam, s.salientPoint);
      ctx.strokeStyle = "#ffd54a";
      ctx.beginPath();
      ctx.arc(proj.x, proj.y, 8, 0, 2 * Math.PI);
      ctx.stroke();
    }
    if (s.gizmo.visible) {
      drawGizmo();
    }
  }
  if (performance.now() < flashUntil) {
    ctx.strokeStyle = "#e0524d";
    ctx.lineWidth = 3;
    ctx.strokeRect(1, 1, canvas.width - 2, canvas.height - 2);
    ctx.lineWidth = 1;
  }
  const dot = s.recording ? "●" : "○";
  hud.textContent =
    `${dot} ${s.connection} | task ${s.task ?? "-"} | phase ${s.phase} | frame ${s.frameIndex}` +
    (s.gizmo.visible ? ` | gizmo grip ${s.gizmo.gripper > 0.5 ? "open" : "closed"}` : "") +
    (s.episodeDone ? ` | episode done: success=${s.episodeDone.success}` : "") +
    (s.lastError ? ` | ${s.lastError}` : "");
  requestAnimationFrame(render);
}

function drawGizmo(): void {
  const g = client.state.gizmo;
  const o = projectPoint(cam, g.position);
  const axes: Array<[number[], string]> = [
    [[0.05, 0, 0], "#e0524d"],
    [[0, 0.05, 0], "#58c469"],
    [[0, 0, 0.05], "#4f86e0"],
  ];
  for (const [d, color] of axes) {
    const tip = projectPoint(cam, [g.position[0] + d[0], g.position[1] + d[1], g.position[2] + d[2]]);
    ctx.strokeStyle = color;
    ctx.beginPath();
    ctx.moveTo(o.x, o.y);
    ctx.lineTo(tip.x, tip.y);
    ctx.stroke();
  }
  ctx.strokeStyle = g.gripper > 0.5 ? "#ffffff" : "#888888";
  ctx.strokeRect(o.x - 6, o.y - 6, 12, 12);
}

canvas.addEventListener("mousedown", (ev) => {
  const s = client.state;
  if (ev.shiftKey) {
    // orbit drag
    const startAz = cam.azimuth;
    const startEl = cam.elevation;
    const sx = ev.clientX;
    const sy = ev.clientY;
    const move = (m: MouseEvent) => {
      cam.azimuth = startAz - (m.clientX - sx) * 0.01;
      cam.elevation = Math.max(-1.4, Math.min(1.4, startEl + (m.clientY - sy) * 0.01));
    };
    const up = () => {
      window.removeEventListener("mousemove", move);
      window.removeEventListener("mouseup", up);
    };
    window.addEventListener("mousemove", move);
    window.addEventListener("mouseup", up);
    return;
  }
  if (!s.cloud || !(s.phase === "idle" || s.phase === "await_waypoint_input")) {
    return;
  }
  const rect = canvas.getBoundingClientRect();
  const idx = pickPoint(cam, s.cloud.positions, ev.clientX - rect.left, ev.clientY - rect.top);
  if (idx < 0) {
    flashUntil = performance.now() + 250; // no point near the click
    return;
  }
  client.send("click_salient", { point: s.cloud.positions[idx] });
});

canvas.addEventListener("wheel", (ev) => {
  cam.distance = Math.max(0.2, Math.min(3, cam.distance * (ev.deltaY > 0 ? 1.1 : 0.9)));
  ev.preventDefault();
});

// gizmo nudges: axis keys translate, shift+keys rotate, g toggles gripper
const NUDGE = 0.01;
window.addEventListener("keydown", (ev) => {
  const s = client.state;
  if (s.phase === "await_waypoint_input" && s.gizmo.visible) {
    const map: Record<string, [0 | 1 | 2, number]> = {
      x: [0, NUDGE],
      X: [0, -NUDGE],
      y: [1, NUDGE],
      Y: [1, -NUDGE],
      z: [2, NUDGE],
      Z: [2, -NUDGE],
    };
    if (ev.key in map) {
      const [axis, d] = map[ev.key];
      s.gizmo = ev.altKey ? rotateRing(s.gizmo, axis, d * 5) : dragAxis(s.gizmo, axis, d);
      return;
    }
    if (ev.key === "g") {
      s.gizmo = setGripper(s.gizmo, s.gizmo.gripper > 0.5 ? GRIPPER_CLOSED : GRIPPER_OPEN);
      return;
    }
    if (ev.key === "Enter") {
      client.send("set_waypoint", {
        position: [...s.gizmo.position],
        rotation: [...s.gizmo.rotation],
        gripper: s.gizmo.gripper,
      });
      return;
    }
  }
  if (s.phase === "dense_control") {
    if (ev.key === "g") {
      toggleGripper(dense);
    } else {
      keyDown(dense, ev.key);
    }
  }
  if (ev.key === "m" && (s.phase === "idle" || s.phase === "await_waypoint_input")) {
    client.send("switch_mode", { mode: "dense" });
  }
  if (ev.key === "M" && s.phase === "dense_control") {
    client.send("switch_mode", { mode: "waypt" });
  }
  if (ev.key === "Escape") {
    if (client.state.phase !== "done") {
      client.send("switch_mode", { mode: "terminate" });
    }
  }
});
window.addEventListener("keyup", (ev) => keyUp(dense, ev.key));

// dense deltas tick at a uniform rate, zeros included
setInterval(() => {
  const s = client.state;
  if (s.phase === "dense_control" && s.connection === "open") {
    const msg = denseDeltaMessage(dense, 0);
    client.send("dense_delta", { delta: msg.delta, gripper: msg.gripper });
  }
}, 1000 / DENSE_RATE_HZ);

requestAnimationFrame(render);
