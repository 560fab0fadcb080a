/**
 * Orbit camera and point picking.
 *
 * The viewer projects the streamed cloud with a simple pinhole model; a
 * click picks the cloud point nearest to the view ray, restricted to
 * points whose projection falls within a pixel radius of the cursor.
 */

export interface OrbitCamera {
  target: [number, number, number];
  azimuth: number; // radians around +z
  elevation: number; // radians above the xy plane
  distance: number;
  fovY: number; // radians
  width: number;
  height: number;
}

export interface CameraBasis {
  eye: [number, number, number];
  forward: [number, number, number];
  right: [number, number, number];
  up: [number, number, number];
}

export function defaultCamera(width: number, height: number): OrbitCamera {
  return {
    target: [0, 0, 0.1],
    azimuth: -Math.PI / 4,
    elevation: Math.PI / 5,
    distance: 0.9,
    fovY: Math.PI / 4,
    width,
    height,
  };
}

function sub(a: number[], b: number[]): [number, number, number] {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

function cross(a: number[], b: number[]): [number, number, number] {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

function dot(a: number[], b: number[]): number {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

function norm(a: number[]): number {
  return Math.sqrt(dot(a, a));
}

function normalize(a: number[]): [number, number, number] {
  const n = norm(a) || 1;
  return [a[0] / n, a[1] / n, a[2] / n];
}

export function cameraBasis(cam: OrbitCamera): CameraBasis {
  const ce = Math.cos(cam.elevation);
  const eye: [number, number, number] = [
    cam.target[0] + cam.distance * ce * Math.cos(cam.azimuth),
    cam.target[1] + cam.distance * ce * Math.sin(cam.azimuth),
    cam.target[2] + cam.distance * Math.sin(cam.elevation),
  ];
  const forward = normalize(sub(cam.target, eye));
  // world up is +z; degenerate straight-down views fall back to +y
  let right = cross(forward, [0, 0, 1]);
  if (norm(right) < 1e-9) {
    right = cross(forward, [0, 1, 0]);
  }
  right = normalize(right);
  const up = normalize(cross(right, forward));
  return { eye, forward, right, up };
}

export interface Projected {
  x: number;
  y: number;
  depth: number; // distance along forward; <= 0 means behind the camera
}

export function projectPoint(cam: OrbitCamera, p: number[]): Projected {
  const b = cameraBasis(cam);
  const rel = sub(p, b.eye);
  const depth = dot(rel, b.forward);
  const fy = cam.height / 2 / Math.tan(cam.fovY / 2);
  const x = cam.width / 2 + (dot(rel, b.right) / depth) * fy;
  const y = cam.height / 2 - (dot(rel, b.up) / depth) * fy;
  return { x, y, depth };
}

export interface Ray {
  origin: [number, number, number];
  dir: [number, number, number];
}

export function screenRay(cam: OrbitCamera, px: number, py: number): Ray {
  const b = cameraBasis(cam);
  const fy = cam.height / 2 / Math.tan(cam.fovY / 2);
  const dx = (px - cam.width / 2) / fy;
  const dy = (cam.height / 2 - py) / fy;
  const dir = normalize([
    b.forward[0] + dx * b.right[0] + dy * b.up[0],
    b.forward[1] + dx * b.right[1] + dy * b.up[1],
    b.forward[2] + dx * b.right[2] + dy * b.up[2],
  ]);
  return { origin: b.eye, dir };
}

export function rayPointDistance(ray: Ray, p: number[]): number {
  const rel = sub(p, ray.origin);
  const along = dot(rel, ray.dir);
  const perp: [number, number, number] = [
    rel[0] - along * ray.dir[0],
    rel[1] - along * ray.dir[1],
    rel[2] - along * ray.dir[2],
  ];
  return norm(perp);
}

/**
 * Pick the cloud point nearest the click ray.  Only points projecting
 * within `radiusPx` pixels of the cursor count; returns -1 when the click
 * lands on empty sky (caller gives visual feedback, sends nothing).
 */
export function pickPoint(
  cam: OrbitCamera,
  positions: number[][],
  px: number,
  py: number,
  radiusPx = 12,
): number {
  const ray = screenRay(cam, px, py);
  let best = -1;
  let bestDist = Infinity;
  for (let i = 0; i < positions.length; i++) {
    const proj = projectPoint(cam, positions[i]);
    if (proj.depth <= 0) {
      continue;
    }
    const dpx = Math.hypot(proj.x - px, proj.y - py);
    if (dpx > radiusPx) {
      continue;
    }
    const d = rayPointDistance(ray, positions[i]);
    if (d < bestDist) {
      bestDist = d;
      best = i;
    }
  }
  return best;
}
