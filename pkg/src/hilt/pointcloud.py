"""Point cloud container and the small set of ops the waypoint pipeline needs.

Clouds are stored as two parallel float arrays, positions (N, 3) in meters
and colors (N, 3) in [0, 1].  All ops are pure: they return new clouds and
never mutate their input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Soft-label support radius in meters: points farther than this from the
# salient point get probability exactly zero.
SALIENT_RADIUS = 0.05


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.positions) != len(self.colors):
            raise ValueError(
                f"positions ({len(self.positions)}) and colors "
                f"({len(self.colors)}) must have the same length"
            )

    def __len__(self) -> int:
        return len(self.positions)

    def features(self) -> np.ndarray:
        """Concatenated (N, 6) [position, color] feature rows."""
        return np.concatenate([self.positions, self.colors], axis=1)

    def select(self, idx) -> "PointCloud":
        return PointCloud(self.positions[idx].copy(), self.colors[idx].copy())

    def translated(self, offset) -> "PointCloud":
        offset = np.asarray(offset, dtype=np.float64).reshape(3)
        return PointCloud(self.positions + offset, self.colors.copy())


@dataclass
class SalientTarget:
    """Soft classification target over cloud points plus regression targets.

    probs sums to 1 and is supported only on points within SALIENT_RADIUS of
    the chosen salient point.  offsets[i] is the vector from point i to the
    waypoint translation, defined for every point but only supervised where
    probs > 0.
    """

    probs: np.ndarray
    offsets: np.ndarray
    salient_index: int


def fps_downsample(cloud: PointCloud, count: int, start: int = 0) -> np.ndarray:
    """Farthest point sampling over cloud positions.

    Greedy maximin: seed with ``start``, then repeatedly take the point
    whose distance to the nearest already-selected point is largest.
    Distance ties resolve to the lowest index.  Returns the selected indices
    in selection order; if the cloud has fewer than ``count`` points every
    index is returned in selection order.

    Parameters
    ----------
    cloud : PointCloud
        Cloud to sample from, at least one point.
    count : int
        Number of points to select.
    start : int
        Index of the seed point.
    """
    n = len(cloud)
    if n == 0:
        raise ValueError("cannot sample from an empty cloud")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range for {n} points")
    count = min(count, n)
    pos = cloud.positions
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = start
    # min squared distance from each point to the chosen set
    best = np.sum((pos - pos[start]) ** 2, axis=1)
    for i in range(1, count):
        # argmax returns the first maximum, which is the lowest index on ties
        nxt = int(np.argmax(best))
        chosen[i] = nxt
        d = np.sum((pos - pos[nxt]) ** 2, axis=1)
        np.minimum(best, d, out=best)
    return chosen


def crop_workspace(cloud: PointCloud, lo, hi) -> PointCloud:
    """Keep points inside the closed axis-aligned box [lo, hi].

    Preserves input order, so cropping is idempotent and composes with
    itself.  Boundary points are kept.
    """
    lo = np.asarray(lo, dtype=np.float64).reshape(3)
    hi = np.asarray(hi, dtype=np.float64).reshape(3)
    keep = np.all((cloud.positions >= lo) & (cloud.positions <= hi), axis=1)
    return cloud.select(np.flatnonzero(keep))


def nearest_point_index(cloud: PointCloud, query) -> int:
    """Index of the cloud point closest to ``query``; lowest index on ties."""
    if len(cloud) == 0:
        raise ValueError("cannot query an empty cloud")
    query = np.asarray(query, dtype=np.float64).reshape(3)
    d = np.sum((cloud.positions - query) ** 2, axis=1)
    return int(np.argmin(d))


def build_salient_target(
    cloud: PointCloud,
    salient_index: int,
    waypoint_pos,
    radius: float = SALIENT_RADIUS,
) -> SalientTarget:
    """Soft salient label and per-point offsets for one training example.

    Each point gets unnormalized weight max(0, radius - d_i) where d_i is
    its Euclidean distance to the salient point; weights normalize to a
    distribution.  The salient point itself always has the maximum weight
    (radius, at distance zero), so the distribution is never empty.
    """
    if not 0 <= salient_index < len(cloud):
        raise ValueError(f"salient index {salient_index} out of range")
    waypoint_pos = np.asarray(waypoint_pos, dtype=np.float64).reshape(3)
    d = np.linalg.norm(cloud.positions - cloud.positions[salient_index], axis=1)
    u = np.maximum(0.0, radius - d)
    probs = u / u.sum()
    offsets = waypoint_pos[None, :] - cloud.positions
    return SalientTarget(probs=probs, offsets=offsets, salient_index=int(salient_index))
