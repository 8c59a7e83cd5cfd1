"""Fast marching on the 26-neighbour voxel stencil.

When a node y is accepted, every unaccepted mask neighbour x is offered
  * the edge update     tau(y) + |x - y|_M(x), and
  * segment updates     min over p on segment [y, z] of
                        interp(tau, p) + |x - p|_M(x)
    for each accepted z adjacent to both x and y, and
  * face updates        the same minimum over triangles [y, z, w] of
                        mutually adjacent accepted neighbours,
where |d|_M = sqrt(d^T M d) with the metric M of voxel x (M = I / v^2 when
isotropic). Candidates are clamped to at least tau(y), so nodes are accepted
in non-decreasing tau order. Because the edge update is always among the
candidates, tau never exceeds the 26-neighbour Dijkstra distance under the
same edge costs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .phantom import HeartPhantom

_OFFSETS = np.array(
    [(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1) if (i, j, k) != (0, 0, 0)],
    dtype=np.int64,
)


@dataclass
class ActivationMap:
    tau: np.ndarray  # ms, inf outside the myocardium and on unreachable voxels
    unreachable: list = field(default_factory=list)  # voxel indices of unreachable mask voxels
    order: np.ndarray | None = None  # flat indices in acceptance order

    @property
    def max_time(self) -> float:
        finite = self.tau[np.isfinite(self.tau)]
        return float(finite.max()) if finite.size else 0.0


@numba.njit(cache=True)
def _heap_push(keys, vals, size, key, val):
    i = size
    keys[i] = key
    vals[i] = val
    while i > 0:
        parent = (i - 1) // 2
        if keys[parent] < keys[i] or (keys[parent] == keys[i] and vals[parent] <= vals[i]):
            break
        keys[parent], keys[i] = keys[i], keys[parent]
        vals[parent], vals[i] = vals[i], vals[parent]
        i = parent
    return size + 1


@numba.njit(cache=True)
def _heap_pop(keys, vals, size):
    key = keys[0]
    val = vals[0]
    size -= 1
    keys[0] = keys[size]
    vals[0] = vals[size]
    i = 0
    while True:
        left = 2 * i + 1
        right = left + 1
        best = i
        if left < size and (keys[left] < keys[best] or (keys[left] == keys[best] and vals[left] < vals[best])):
            best = left
        if right < size and (keys[right] < keys[best] or (keys[right] == keys[best] and vals[right] < vals[best])):
            best = right
        if best == i:
            break
        keys[best], keys[i] = keys[i], keys[best]
        vals[best], vals[i] = vals[i], vals[best]
        i = best
    return key, val, size


@numba.njit(cache=True)
def _qform(M, n, a0, a1, a2, b0, b1, b2):
    return (
        a0 * (M[n, 0, 0] * b0 + M[n, 0, 1] * b1 + M[n, 0, 2] * b2)
        + a1 * (M[n, 1, 0] * b0 + M[n, 1, 1] * b1 + M[n, 1, 2] * b2)
        + a2 * (M[n, 2, 0] * b0 + M[n, 2, 1] * b1 + M[n, 2, 2] * b2)
    )


@numba.njit(cache=True)
def _segment_update(ty, tz, A, B, C):
    """min over lam in [0,1] of (1-lam) ty + lam tz + sqrt(A + 2 lam C + lam^2 B).

    A = |a|^2, B = |b|^2, C = a.b in the metric, with a = y - x and b = z - y.
    """
    best = min(ty + np.sqrt(A), tz + np.sqrt(max(A + 2.0 * C + B, 0.0)))
    s = ty - tz  # derivative condition: (C + lam B) / |a + lam b| = s
    if B <= 0.0 or s * s >= B:
        return best
    k = (C * C - s * s * A) / (B - s * s)
    disc = C * C - B * k
    if disc < 0.0:
        return best
    r = np.sqrt(disc)
    for lam in ((-C + r) / B, (-C - r) / B):
        if 0.0 < lam < 1.0:
            q = A + 2.0 * lam * C + lam * lam * B
            if q >= 0.0:
                val = ty + lam * (tz - ty) + np.sqrt(q)
                if val < best:
                    best = val
    return best


@numba.njit(cache=True)
def _face_update(ty, tz, tw, A, B11, B12, B22, C1, C2):
    """Interior minimum over the triangle p = y + l1 (z - y) + l2 (w - y) of
    ty + l1 (tz - ty) + l2 (tw - ty) + |p - x|_M; inf when it lies outside.

    A = |a|^2, B = Gram matrix of (z - y, w - y), C = their products with a = y - x.
    """
    det = B11 * B22 - B12 * B12
    if det <= 1e-300:
        return np.inf
    i11 = B22 / det
    i12 = -B12 / det
    i22 = B11 / det
    d1 = tz - ty
    d2 = tw - ty
    dGd = d1 * (i11 * d1 + i12 * d2) + d2 * (i12 * d1 + i22 * d2)
    cGc = C1 * (i11 * C1 + i12 * C2) + C2 * (i12 * C1 + i22 * C2)
    den = 1.0 - dGd
    num = A - cGc
    if den <= 0.0 or num < 0.0:
        return np.inf
    sdist = np.sqrt(num / den)
    g1 = C1 + d1 * sdist
    g2 = C2 + d2 * sdist
    l1 = -(i11 * g1 + i12 * g2)
    l2 = -(i12 * g1 + i22 * g2)
    if l1 <= 0.0 or l2 <= 0.0 or l1 + l2 >= 1.0:
        return np.inf
    return ty + l1 * d1 + l2 * d2 + sdist


@numba.njit(cache=True)
def _march(mask, M, h, roots, root_times, offsets, use_triangles):
    nx, ny, nz = mask.shape
    n = nx * ny * nz
    tau = np.full(n, np.inf)
    state = np.zeros(n, dtype=np.int8)  # 0 far, 1 trial, 2 accepted
    cap = n * 27 + len(roots) + 1
    keys = np.empty(cap)
    vals = np.empty(cap, dtype=np.int64)
    size = 0
    order = np.empty(n, dtype=np.int64)
    n_acc = 0
    zs = np.empty(26, dtype=np.int64)
    zb = np.empty((26, 3))
    zB = np.empty(26)
    zC = np.empty(26)
    zijk = np.empty((26, 3), dtype=np.int64)
    for r in range(len(roots)):
        i, j, k = roots[r, 0], roots[r, 1], roots[r, 2]
        f = (i * ny + j) * nz + k
        if root_times[r] < tau[f]:
            tau[f] = root_times[r]
            state[f] = 1
            size = _heap_push(keys, vals, size, tau[f], f)
    while size > 0:
        key, y, size = _heap_pop(keys, vals, size)
        if state[y] == 2 or key > tau[y]:
            continue
        state[y] = 2
        order[n_acc] = y
        n_acc += 1
        ty = tau[y]
        yi = y // (ny * nz)
        yj = (y // nz) % ny
        yk = y % nz
        for o in range(offsets.shape[0]):
            xi = yi + offsets[o, 0]
            xj = yj + offsets[o, 1]
            xk = yk + offsets[o, 2]
            if xi < 0 or xj < 0 or xk < 0 or xi >= nx or xj >= ny or xk >= nz:
                continue
            if not mask[xi, xj, xk]:
                continue
            x = (xi * ny + xj) * nz + xk
            if state[x] == 2:
                continue
            a0 = (yi - xi) * h
            a1 = (yj - xj) * h
            a2 = (yk - xk) * h
            A = _qform(M, x, a0, a1, a2, a0, a1, a2)
            cand = ty + np.sqrt(A)
            if use_triangles:
                nz_acc = 0
                for p in range(offsets.shape[0]):
                    zi = xi + offsets[p, 0]
                    zj = xj + offsets[p, 1]
                    zk = xk + offsets[p, 2]
                    if zi < 0 or zj < 0 or zk < 0 or zi >= nx or zj >= ny or zk >= nz:
                        continue
                    if abs(zi - yi) > 1 or abs(zj - yj) > 1 or abs(zk - yk) > 1:
                        continue
                    zf = (zi * ny + zj) * nz + zk
                    if zf == y or state[zf] != 2:
                        continue
                    b0 = (zi - yi) * h
                    b1 = (zj - yj) * h
                    b2 = (zk - yk) * h
                    B = _qform(M, x, b0, b1, b2, b0, b1, b2)
                    C = _qform(M, x, a0, a1, a2, b0, b1, b2)
                    v = _segment_update(ty, tau[zf], A, B, C)
                    if v < cand:
                        cand = v
                    zs[nz_acc] = zf
                    zb[nz_acc, 0] = b0
                    zb[nz_acc, 1] = b1
                    zb[nz_acc, 2] = b2
                    zB[nz_acc] = B
                    zC[nz_acc] = C
                    zijk[nz_acc, 0] = zi
                    zijk[nz_acc, 1] = zj
                    zijk[nz_acc, 2] = zk
                    nz_acc += 1
                # face updates over mutually adjacent accepted pairs (z, w)
                for q1 in range(nz_acc):
                    for q2 in range(q1 + 1, nz_acc):
                        if (
                            abs(zijk[q1, 0] - zijk[q2, 0]) > 1
                            or abs(zijk[q1, 1] - zijk[q2, 1]) > 1
                            or abs(zijk[q1, 2] - zijk[q2, 2]) > 1
                        ):
                            continue
                        B12 = _qform(M, x, zb[q1, 0], zb[q1, 1], zb[q1, 2], zb[q2, 0], zb[q2, 1], zb[q2, 2])
                        v = _face_update(ty, tau[zs[q1]], tau[zs[q2]], A, zB[q1], B12, zB[q2], zC[q1], zC[q2])
                        if v < cand:
                            cand = v
            if cand < ty:
                cand = ty
            if cand < tau[x]:
                tau[x] = cand
                state[x] = 1
                size = _heap_push(keys, vals, size, cand, x)
    return tau, order[:n_acc]


def _source_ball(mask, M, h, roots, root_times, radius):
    """Mask voxels within ``radius`` cm of a root, seeded with the straight-line metric travel time."""
    rmax = int(np.floor(radius / h))
    seeds, times = [], []
    for r, t0 in zip(roots, root_times):
        lo = np.maximum(r - rmax, 0)
        hi = np.minimum(r + rmax + 1, mask.shape)
        grid = np.stack(np.meshgrid(*[np.arange(lo[d], hi[d]) for d in range(3)], indexing="ij"), axis=-1).reshape(-1, 3)
        d = (grid - r) * h
        inside = mask[tuple(grid.T)] & (np.linalg.norm(d, axis=1) <= radius)
        grid, d = grid[inside], d[inside]
        Mr = M[np.ravel_multi_index(tuple(r), mask.shape)]
        seeds.append(grid)
        times.append(t0 + np.sqrt(np.einsum("ni,ij,nj->n", d, Mr, d)))
    return np.concatenate(seeds), np.concatenate(times)


def solve_eikonal(
    phantom: HeartPhantom, roots=None, root_times=None, triangles: bool = True, source_radius: float = 0.0
) -> ActivationMap:
    """Activation times (ms) from the phantom's root nodes (or explicit voxel ``roots``).

    ``source_radius`` (cm) seeds mask voxels within that distance of a root
    with the straight-line travel time, which removes the first-order
    point-source error. Straight lines are never longer than grid paths, so
    the Dijkstra upper bound still holds.
    """
    mask = np.ascontiguousarray(phantom.mask, dtype=np.bool_)
    roots = np.asarray(phantom.roots if roots is None else roots, dtype=np.int64).reshape(-1, 3)
    if len(roots) == 0:
        raise ValueError("at least one root node is required")
    for r in roots:
        if not mask[tuple(r)]:
            raise ValueError(f"root {tuple(int(x) for x in r)} is outside the myocardium")
    rt = np.zeros(len(roots)) if root_times is None else np.asarray(root_times, dtype=float)
    M = np.ascontiguousarray(phantom.metric())
    if source_radius > 0:
        roots, rt = _source_ball(mask, M, float(phantom.spacing), roots, rt, float(source_radius))
    tau, order = _march(mask, M, float(phantom.spacing), roots, rt, _OFFSETS, bool(triangles))
    tau = tau.reshape(mask.shape)
    tau[~mask] = np.inf
    unreachable = [tuple(int(v) for v in ijk) for ijk in np.argwhere(mask & ~np.isfinite(tau))]
    return ActivationMap(tau, unreachable, order)


def edge_graph(phantom: HeartPhantom):
    """Directed 26-neighbour graph with the solver's edge costs (for Dijkstra comparisons)."""
    from scipy.sparse import coo_matrix

    mask = phantom.mask
    shape = mask.shape
    M = phantom.metric()
    flat = np.flatnonzero(mask.ravel())
    ijk = np.array(np.unravel_index(flat, shape)).T
    rows, cols, w = [], [], []
    for off in _OFFSETS:
        nb = ijk + off
        ok = np.all((nb >= 0) & (nb < np.array(shape)), axis=1)
        src, dst = ijk[ok], nb[ok]
        ok2 = mask[tuple(dst.T)]
        src, dst = src[ok2], dst[ok2]
        x = np.ravel_multi_index(tuple(dst.T), shape)
        d = -off * phantom.spacing  # y - x with y = src
        cost = np.sqrt(np.einsum("i,nij,j->n", d, M[x], d))
        rows.append(np.ravel_multi_index(tuple(src.T), shape))
        cols.append(x)
        w.append(cost)
    n = mask.size
    return coo_matrix((np.concatenate(w), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
