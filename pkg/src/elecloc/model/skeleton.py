"""Surface skeleton: curves and triangle patches spanning the keypoints.

Each skeleton sample is a convex combination of at most three keypoints,
optionally pulled toward its nearest coarse point. The connectivity and the
nearest-point choice are fixed during a forward pass, so the sample
positions are linear in the keypoints and coarse points; :func:`backward`
applies the transpose of that map.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

DEGENERATE_EPS = 1e-9


@dataclass
class SurfaceSkeleton:
    samples: np.ndarray  # (S, 3) final sample positions
    raw: np.ndarray  # (S, 3) samples before projection
    segments: np.ndarray  # (n_seg, 2) keypoint indices
    triangles: np.ndarray  # (n_tri, 3) keypoint indices
    elem_idx: np.ndarray  # (S, 3) keypoint indices per sample
    weights: np.ndarray  # (S, 3) convex weights per sample
    nn_idx: np.ndarray  # (S,) nearest coarse point, -1 when unprojected
    alpha: float
    flags: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)


def segment_weights(density: int) -> np.ndarray:
    """Evenly spaced linear weights along a segment, endpoints included."""
    if density == 1:
        t = np.array([0.5])
    else:
        t = np.linspace(0.0, 1.0, density)
    return np.column_stack([1.0 - t, t, np.zeros_like(t)])


def triangle_weights(density: int) -> np.ndarray:
    """Deterministic barycentric samples spread over a triangle."""
    # 2D Halton points warped to uniform barycentric coordinates
    def halton(i, base):
        f, r = 1.0, 0.0
        while i > 0:
            f /= base
            r += f * (i % base)
            i //= base
        return r

    uv = np.array([[halton(i + 1, 2), halton(i + 1, 3)] for i in range(density)])
    su = np.sqrt(uv[:, 0])
    w = np.column_stack([1.0 - su, su * (1.0 - uv[:, 1]), su * uv[:, 1]])
    return w / w.sum(axis=1, keepdims=True)


def keypoint_graph(keypoints, k: int = 3) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Symmetric k-nearest-neighbour graph; returns (segments, triangles, flags)."""
    kp = np.asarray(keypoints, dtype=float)
    n = len(kp)
    flags = []
    if n < 2:
        return np.zeros((0, 2), np.int64), np.zeros((0, 3), np.int64), ["fewer than 2 keypoints"]
    kk = min(k, n - 1)
    d2 = np.sum((kp[:, None, :] - kp[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    # stable sort: lowest index wins among equal distances
    nbrs = np.argsort(d2, axis=1, kind="stable")[:, :kk]
    adj = np.zeros((n, n), dtype=bool)
    rows = np.repeat(np.arange(n), kk)
    adj[rows, nbrs.ravel()] = True
    adj |= adj.T
    seg = np.argwhere(np.triu(adj, 1))
    lengths = np.sqrt(d2[seg[:, 0], seg[:, 1]]) if len(seg) else np.zeros(0)
    bad = lengths < DEGENERATE_EPS
    if bad.any():
        flags.append(f"skipped {int(bad.sum())} degenerate segments")
    tris = []
    for i, j in seg:
        common = np.nonzero(adj[i] & adj[j])[0]
        for m in common[common > j]:
            tris.append((i, j, m))
    tris = np.array(tris, dtype=np.int64).reshape(-1, 3)
    if len(tris):
        e1 = kp[tris[:, 1]] - kp[tris[:, 0]]
        e2 = kp[tris[:, 2]] - kp[tris[:, 0]]
        area = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
        tbad = area < DEGENERATE_EPS
        if tbad.any():
            flags.append(f"skipped {int(tbad.sum())} degenerate triangles")
        tris = tris[~tbad]
    return seg[~bad].astype(np.int64), tris, flags


def build_skeleton(keypoints, coarse=None, k: int = 3, alpha: float = 0.5, density: int = 8) -> SurfaceSkeleton:
    """Interpolate samples on the keypoint graph and blend them toward the coarse cloud."""
    kp = np.asarray(keypoints, dtype=float)
    segments, triangles, flags = keypoint_graph(kp, k)
    sw = segment_weights(density)
    tw = triangle_weights(density)
    idx_parts, w_parts = [], []
    if len(segments):
        seg3 = np.column_stack([segments, segments[:, :1]])
        idx_parts.append(np.repeat(seg3, density, axis=0))
        w_parts.append(np.tile(sw, (len(segments), 1)))
    if len(triangles):
        idx_parts.append(np.repeat(triangles, density, axis=0))
        w_parts.append(np.tile(tw, (len(triangles), 1)))
    if idx_parts:
        elem_idx = np.concatenate(idx_parts)
        weights = np.concatenate(w_parts)
    else:
        elem_idx = np.zeros((0, 3), np.int64)
        weights = np.zeros((0, 3))
        flags.append("empty skeleton")
    raw = np.einsum("sk,skd->sd", weights, kp[elem_idx]) if len(elem_idx) else np.zeros((0, 3))
    if coarse is not None and alpha != 0.0 and len(raw):
        c = np.asarray(coarse, dtype=float)
        _, nn = cKDTree(c).query(raw)
        nn = nn.astype(np.int64)
        samples = (1.0 - alpha) * raw + alpha * c[nn]
    else:
        nn = np.full(len(raw), -1, dtype=np.int64)
        samples = raw
    return SurfaceSkeleton(samples, raw, segments, triangles, elem_idx, weights, nn, alpha, flags)


def backward(skel: SurfaceSkeleton, d_samples, n_keypoints: int, n_coarse: int) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. keypoints and coarse points given d(loss)/d(samples)."""
    ds = np.asarray(d_samples)
    dkp = np.zeros((n_keypoints, 3), dtype=ds.dtype)
    dc = np.zeros((n_coarse, 3), dtype=ds.dtype)
    if len(ds) == 0:
        return dkp, dc
    projected = skel.nn_idx >= 0
    scale = np.where(projected, 1.0 - skel.alpha, 1.0)[:, None]
    contrib = (skel.weights[:, :, None] * (scale * ds)[:, None, :]).reshape(-1, 3)
    np.add.at(dkp, skel.elem_idx.ravel(), contrib)
    if projected.any():
        np.add.at(dc, skel.nn_idx[projected], skel.alpha * ds[projected])
    return dkp, dc
