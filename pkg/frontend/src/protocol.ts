/**
 * Wire codec for the teleop session protocol.
 *
 * Each frame is an ASCII decimal byte length, a newline, then that many
 * bytes of UTF-8 JSON.  Objects are serialized with sorted keys so both
 * ends produce canonical bytes.  Every message carries a "type" and a
 * per-direction monotonically increasing "seq".
 */

export const PROTOCOL_VERSION = 1;

export const MESSAGE_TYPES = new Set([
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
]);

export const PHASES = [
  "idle",
  "await_waypoint_input",
  "executing_waypoint",
  "dense_control",
  "done",
] as const;

export type Phase = (typeof PHASES)[number];

export interface TeleopMessage {
  type: string;
  seq: number;
  [field: string]: unknown;
}

export interface CloudFrame extends TeleopMessage {
  type: "cloud_frame";
  frame_index: number;
  stride: number;
  positions: number[][];
  colors: number[][];
}

export interface WristFrame extends TeleopMessage {
  type: "wrist_frame";
  frame_index: number;
  height: number;
  width: number;
  encoding: string;
  data: string;
}

export class ProtocolError extends Error {}

const encoder = new TextEncoder();
const decoder = new TextDecoder("utf-8", { fatal: true });

/** JSON.stringify with object keys emitted in sorted order, no spaces. */
export function canonicalJson(value: unknown): string {
  if (value === null || typeof value !== "object") {
    return JSON.stringify(value);
  }
  if (Array.isArray(value)) {
    return "[" + value.map(canonicalJson).join(",") + "]";
  }
  const obj = value as Record<string, unknown>;
  const keys = Object.keys(obj).sort();
  const parts = keys.map((k) => JSON.stringify(k) + ":" + canonicalJson(obj[k]));
  return "{" + parts.join(",") + "}";
}

function validate(msg: Record<string, unknown>): TeleopMessage {
  if (typeof msg !== "object" || msg === null || Array.isArray(msg)) {
    throw new ProtocolError("message must be an object");
  }
  const type = msg["type"];
  if (typeof type !== "string" || !MESSAGE_TYPES.has(type)) {
    throw new ProtocolError(`unknown message type ${JSON.stringify(type)}`);
  }
  const seq = msg["seq"];
  if (typeof seq !== "number" || !Number.isInteger(seq) || seq < 0) {
    throw new ProtocolError("seq must be a non-negative integer");
  }
  return msg as TeleopMessage;
}

export function encodeMessage(msg: TeleopMessage): Uint8Array {
  validate(msg);
  const body = encoder.encode(canonicalJson(msg));
  const head = encoder.encode(String(body.length) + "\n");
  const out = new Uint8Array(head.length + body.length);
  out.set(head, 0);
  out.set(body, head.length);
  return out;
}

export function decodeMessage(raw: Uint8Array | ArrayBuffer | string): TeleopMessage {
  let bytes: Uint8Array;
  if (typeof raw === "string") {
    bytes = encoder.encode(raw);
  } else if (raw instanceof ArrayBuffer) {
    bytes = new Uint8Array(raw);
  } else {
    bytes = raw;
  }
  const nl = bytes.indexOf(0x0a);
  if (nl < 0) {
    throw new ProtocolError("missing length prefix");
  }
  const head = bytes.subarray(0, nl);
  if (head.length === 0 || !/^[0-9]+$/.test(decoder.decode(head))) {
    throw new ProtocolError("length prefix is not a decimal integer");
  }
  const length = parseInt(decoder.decode(head), 10);
  const body = bytes.subarray(nl + 1);
  if (body.length < length) {
    throw new ProtocolError(`truncated body: expected ${length} bytes, got ${body.length}`);
  }
  if (body.length > length) {
    throw new ProtocolError("trailing bytes after message body");
  }
  let parsed: unknown;
  try {
    parsed = JSON.parse(decoder.decode(body));
  } catch (exc) {
    throw new ProtocolError(`malformed JSON body: ${exc}`);
  }
  return validate(parsed as Record<string, unknown>);
}

/** Decode the base64 u8 wrist payload into RGB bytes (row-major h*w*3). */
export function decodeWristData(frame: WristFrame): Uint8Array {
  if (frame.encoding !== "u8") {
    throw new ProtocolError(`unknown wrist encoding ${JSON.stringify(frame.encoding)}`);
  }
  const bin =
    typeof atob === "function"
      ? atob(frame.data)
      : // node fallback
        Buffer.from(frame.data, "base64").toString("binary");
  const flat = new Uint8Array(bin.length);
  for (let i = 0; i < bin.length; i++) {
    flat[i] = bin.charCodeAt(i);
  }
  if (flat.length !== frame.height * frame.width * 3) {
    throw new ProtocolError("wrist payload size mismatch");
  }
  return flat;
}

/** Client-side phase gating: which outgoing types are legal in a phase. */
export function legalClientTypes(phase: Phase, helloDone: boolean): Set<string> {
  if (!helloDone) {
    return new Set(["hello"]);
  }
  switch (phase) {
    case "idle":
      return new Set(["click_salient", "switch_mode", "episode_end"]);
    case "await_waypoint_input":
      return new Set(["click_salient", "set_waypoint", "switch_mode", "episode_end"]);
    case "executing_waypoint":
      return new Set(["episode_end"]);
    case "dense_control":
      return new Set(["dense_delta", "switch_mode", "episode_end"]);
    case "done":
      return new Set();
  }
}
