"""Point-cloud kernels: sampling, distances and contour resampling.

Point clouds are plain ``(N, 3)`` float arrays in cm. Every kernel is a pure
function of its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

ELECTRODE_NAMES = ("LA", "RA", "LL", "RL", "V1", "V2", "V3", "V4", "V5", "V6")
N_ELECTRODES = len(ELECTRODE_NAMES)

VIEW_LABELS = (
    "SAX",
    "LAX-2ch",
    "LAX-3ch",
    "LAX-4ch",
    "localizer-sagittal",
    "localizer-coronal",
    "localizer-axial",
)


class EmptyInputError(ValueError):
    pass


class SizeError(ValueError):
    pass


def as_cloud(points) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise SizeError(f"expected an (N, 3) array, got shape {arr.shape}")
    if len(arr) == 0:
        raise EmptyInputError("point cloud is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point cloud contains non-finite coordinates")
    return arr


class SpatialIndex:
    """Immutable nearest-neighbour index over a point cloud.

    Backed by a k-d tree; queries return Euclidean distances and indices.
    """

    def __init__(self, points):
        self.points = as_cloud(points).copy()
        self.points.setflags(write=False)
        self._tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def nearest(self, queries) -> tuple[np.ndarray, np.ndarray]:
        q = np.asarray(queries, dtype=float).reshape(-1, 3)
        dist, idx = self._tree.query(q, k=1)
        return dist, idx.astype(np.int64)

    def knn(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        q = np.asarray(queries, dtype=float).reshape(-1, 3)
        dist, idx = self._tree.query(q, k=k)
        return dist.reshape(len(q), k), idx.reshape(len(q), k).astype(np.int64)


def fps(cloud, k: int, seed_index: int = 0) -> np.ndarray:
    """Farthest point sampling; returns the selected indices in selection order."""
    pts = as_cloud(cloud)
    n = len(pts)
    if not 1 <= k <= n:
        raise SizeError(f"cannot select k={k} points from a cloud of {n}")
    if not 0 <= seed_index < n:
        raise IndexError(f"seed_index {seed_index} out of range for {n} points")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = seed_index
    min_d2 = np.sum((pts - pts[seed_index]) ** 2, axis=1)
    for i in range(1, k):
        # np.argmax returns the lowest index on ties
        nxt = int(np.argmax(min_d2))
        chosen[i] = nxt
        np.minimum(min_d2, np.sum((pts - pts[nxt]) ** 2, axis=1), out=min_d2)
    return chosen


def fps_points(cloud, k: int, seed_index: int = 0) -> np.ndarray:
    pts = as_cloud(cloud)
    return pts[fps(pts, k, seed_index)]


def nearest_pairs(a, b) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Nearest neighbours in both directions: (d_ab, idx_ab, d_ba, idx_ba)."""
    a = as_cloud(a)
    b = as_cloud(b)
    d_ab, i_ab = SpatialIndex(b).nearest(a)
    d_ba, i_ba = SpatialIndex(a).nearest(b)
    return d_ab, i_ab, d_ba, i_ba


def chamfer(a, b, squared: bool = False) -> float:
    """Symmetric Chamfer distance: mean NN distance a->b plus mean b->a.

    With ``squared=True`` the NN distances are squared before averaging
    (the variant used as a training loss).
    """
    d_ab, _, d_ba, _ = nearest_pairs(a, b)
    if squared:
        d_ab = d_ab**2
        d_ba = d_ba**2
    return float(np.mean(d_ab) + np.mean(d_ba))


def mae_points(pred, gt, variant: str = "l1") -> float:
    """Index-wise error between equally sized clouds.

    ``variant="l1"`` averages absolute coordinate differences over points and
    axes; ``variant="norm"`` averages per-point Euclidean norms instead.
    """
    p = as_cloud(pred)
    g = as_cloud(gt)
    if p.shape != g.shape:
        raise SizeError(f"size mismatch: {p.shape} vs {g.shape}")
    if variant == "l1":
        return float(np.mean(np.abs(p - g)))
    if variant == "norm":
        return float(np.mean(np.linalg.norm(p - g, axis=1)))
    raise ValueError(f"unknown MAE variant {variant!r}")


def euclidean_error(pred, gt) -> tuple[np.ndarray, float]:
    """Per-electrode Euclidean distances and their mean."""
    p = np.asarray(pred, dtype=float)
    g = np.asarray(gt, dtype=float)
    if p.shape != (N_ELECTRODES, 3) or g.shape != (N_ELECTRODES, 3):
        raise SizeError(f"electrode sets must be (10, 3), got {p.shape} and {g.shape}")
    per = np.linalg.norm(p - g, axis=1)
    return per, float(np.mean(per))


@dataclass(frozen=True)
class Transform:
    """Similarity transform used by :func:`normalize_cloud`."""

    centroid: np.ndarray
    scale: float
    degenerate: bool = False

    def apply(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.centroid) / self.scale

    def invert(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) * self.scale + self.centroid


def normalize_cloud(cloud) -> tuple[np.ndarray, Transform]:
    """Center on the centroid and scale so the farthest point has radius 1."""
    pts = as_cloud(cloud)
    centroid = pts.mean(axis=0)
    radius = float(np.max(np.linalg.norm(pts - centroid, axis=1)))
    degenerate = radius == 0.0
    tf = Transform(centroid=centroid, scale=1.0 if degenerate else radius, degenerate=degenerate)
    return tf.apply(pts), tf


def denormalize_cloud(cloud, transform: Transform) -> np.ndarray:
    return transform.invert(cloud)


@dataclass
class Contour:
    """A 2D polyline living in a 3D plane.

    ``origin`` plus ``u``/``v`` in-plane unit axes map polyline coordinates
    (cm) to world space.
    """

    origin: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    points2d: np.ndarray
    view: str = "SAX"
    closed: bool = False

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self.axis_u = np.asarray(self.axis_u, dtype=float).reshape(3)
        self.axis_v = np.asarray(self.axis_v, dtype=float).reshape(3)
        self.points2d = np.asarray(self.points2d, dtype=float).reshape(-1, 2)
        if len(self.points2d) < 3:
            raise SizeError("a contour polyline needs at least 3 points")
        gram = np.array(
            [
                [self.axis_u @ self.axis_u, self.axis_u @ self.axis_v],
                [self.axis_v @ self.axis_u, self.axis_v @ self.axis_v],
            ]
        )
        if np.max(np.abs(gram - np.eye(2))) > 1e-9:
            raise ValueError("contour plane axes must be orthonormal")

    def lift(self) -> np.ndarray:
        """World coordinates of the polyline vertices."""
        return self.origin + self.points2d[:, :1] * self.axis_u + self.points2d[:, 1:] * self.axis_v

    def segments3d(self) -> tuple[np.ndarray, np.ndarray]:
        pts = self.lift()
        if self.closed:
            return pts, np.roll(pts, -1, axis=0)
        return pts[:-1], pts[1:]


@dataclass
class ContourSet:
    contours: list[Contour] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.contours)

    def all_points(self) -> np.ndarray:
        return np.concatenate([c.lift() for c in self.contours], axis=0)

    def arc_lengths(self) -> np.ndarray:
        out = []
        for c in self.contours:
            s, e = c.segments3d()
            out.append(float(np.sum(np.linalg.norm(e - s, axis=1))))
        return np.array(out)


def resample_contours(contours: ContourSet, n: int, rng_seed=0, mode: str = "random") -> np.ndarray:
    """Draw ``n`` points uniformly by arc length over the union of all contours.

    ``mode="random"`` draws i.i.d. arc-length positions from ``rng_seed``;
    ``mode="equal"`` places them at equally spaced positions (cell centres).
    """
    if len(contours) == 0:
        raise EmptyInputError("contour set is empty")
    if n < 1:
        raise SizeError("n must be at least 1")
    starts, ends = [], []
    for c in contours.contours:
        s, e = c.segments3d()
        starts.append(s)
        ends.append(e)
    starts = np.concatenate(starts)
    ends = np.concatenate(ends)
    seg_len = np.linalg.norm(ends - starts, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    if total <= 0:
        raise ValueError("total contour arc length must be positive")
    if mode == "random":
        pos = np.random.default_rng(rng_seed).uniform(0.0, total, size=n)
    elif mode == "equal":
        pos = (np.arange(n) + 0.5) * (total / n)
    else:
        raise ValueError(f"unknown resampling mode {mode!r}")
    seg = np.searchsorted(cum, pos, side="right") - 1
    seg = np.clip(seg, 0, len(seg_len) - 1)
    # zero-length segments are never hit by searchsorted(right) except at the end
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(seg_len[seg] > 0, (pos - cum[seg]) / seg_len[seg], 0.0)
    t = np.clip(t, 0.0, 1.0)[:, None]
    return starts[seg] * (1.0 - t) + ends[seg] * t
