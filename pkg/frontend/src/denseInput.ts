/**
 * Dense-mode input: maps held keys to 6-DoF deltas emitted at a fixed
 * rate.  Released keys still produce zero-delta messages so recorded
 * segments have a uniform step rate.
 */

export const DENSE_RATE_HZ = 10;

/** key -> [delta index 0..5, sign]; configurable, defaults below. */
export type KeyMap = Record<string, [number, number]>;

export const DEFAULT_KEYMAP: KeyMap = {
  w: [0, +1],
  s: [0, -1],
  a: [1, +1],
  d: [1, -1],
  r: [2, +1],
  f: [2, -1],
  ArrowUp: [3, +1],
  ArrowDown: [3, -1],
  ArrowLeft: [4, +1],
  ArrowRight: [4, -1],
  q: [5, +1],
  e: [5, -1],
};

export interface DenseLimits {
  maxTransDelta: number;
  maxRotDelta: number;
}

// mirror of the server-side controller limits
export const DEFAULT_LIMITS: DenseLimits = { maxTransDelta: 0.01, maxRotDelta: 0.05 };

export interface DenseInputState {
  held: Set<string>;
  gripper: number;
  transStep: number;
  rotStep: number;
}

export function denseInputState(transStep = 0.008, rotStep = 0.04): DenseInputState {
  return { held: new Set(), gripper: 1.0, transStep, rotStep };
}

export function keyDown(s: DenseInputState, key: string): void {
  s.held.add(key);
}

export function keyUp(s: DenseInputState, key: string): void {
  s.held.delete(key);
}

export function toggleGripper(s: DenseInputState): void {
  s.gripper = s.gripper > 0.5 ? 0.0 : 1.0;
}

/**
 * One tick's delta from the currently held keys, clamped so the message
 * never exceeds the controller limits: translation by vector norm,
 * rotation per axis.
 */
export function tickDelta(
  s: DenseInputState,
  keymap: KeyMap = DEFAULT_KEYMAP,
  limits: DenseLimits = DEFAULT_LIMITS,
): number[] {
  const delta = [0, 0, 0, 0, 0, 0];
  for (const key of s.held) {
    const m = keymap[key];
    if (!m) {
      continue;
    }
    const [idx, sign] = m;
    delta[idx] += sign * (idx < 3 ? s.transStep : s.rotStep);
  }
  const tn = Math.hypot(delta[0], delta[1], delta[2]);
  if (tn > limits.maxTransDelta) {
    const scale = limits.maxTransDelta / tn;
    delta[0] *= scale;
    delta[1] *= scale;
    delta[2] *= scale;
  }
  for (let i = 3; i < 6; i++) {
    delta[i] = Math.max(-limits.maxRotDelta, Math.min(limits.maxRotDelta, delta[i]));
  }
  return delta;
}

export function denseDeltaMessage(s: DenseInputState, seq: number, keymap?: KeyMap) {
  return {
    type: "dense_delta",
    seq,
    delta: tickDelta(s, keymap),
    gripper: s.gripper,
  };
}
