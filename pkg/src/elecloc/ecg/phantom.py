"""Biventricular voxel phantom: two truncated nested ellipsoid shells.

The heart frame has its long axis along local +w (base at w = base_cut,
apex at negative w); the LV sits at the origin and the RV shell wraps around
the LV's +u side. Local coordinates map to world space through an origin
and an orthonormal frame, so a phantom can be placed inside any torso.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .. import io

SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


class PhantomError(ValueError):
    pass


@dataclass
class PhantomSpec:
    spacing: float = 0.2  # cm
    velocity: float = 0.07  # cm/ms
    fiber_factor: float = 1.0  # speed-up along the fiber direction; 1 = isotropic
    fiber_dir: tuple = (0.0, 0.0, 1.0)  # local frame, used when fiber_factor != 1
    lv_outer: tuple = (2.6, 2.6, 4.6)  # semi-axes (u, v, w), cm
    lv_inner: tuple = (1.7, 1.7, 3.8)
    rv_outer: tuple = (3.4, 3.0, 4.2)
    rv_inner: tuple = (2.9, 2.5, 3.7)
    rv_offset: tuple = (1.5, 0.0, 0.3)  # RV centre relative to the LV centre
    base_cut: float = 1.2  # truncate everything with w > base_cut
    margin: float = 0.6  # empty border around the myocardium, cm
    roots: tuple = ((-0.9, 0.0, -1.0), (-2.1, 0.6, -1.8), (4.4, 0.0, -1.2))  # septum, LV free wall, RV free wall (local cm)

    def to_kv(self) -> dict:
        def vec(v):
            return ",".join(repr(float(x)) for x in v)

        return {
            "spacing": repr(self.spacing),
            "velocity": repr(self.velocity),
            "fiber_factor": repr(self.fiber_factor),
            "fiber_dir": vec(self.fiber_dir),
            "lv_outer": vec(self.lv_outer),
            "lv_inner": vec(self.lv_inner),
            "rv_outer": vec(self.rv_outer),
            "rv_inner": vec(self.rv_inner),
            "rv_offset": vec(self.rv_offset),
            "base_cut": repr(self.base_cut),
            "margin": repr(self.margin),
            "roots": ";".join(vec(r) for r in self.roots),
        }

    @classmethod
    def from_kv(cls, kv: dict) -> "PhantomSpec":
        known = set(cls().to_kv())
        extra = set(kv) - known
        if extra:
            raise PhantomError(f"unknown phantom keys: {sorted(extra)}")
        out = {}
        for k, v in kv.items():
            if k == "roots":
                out[k] = tuple(tuple(float(x) for x in r.split(",")) for r in v.split(";") if r.strip())
            elif "," in v or k in ("fiber_dir", "lv_outer", "lv_inner", "rv_outer", "rv_inner", "rv_offset"):
                out[k] = tuple(float(x) for x in v.split(","))
            else:
                out[k] = float(v)
        return cls(**out)


@dataclass
class HeartPhantom:
    """Regular voxel grid; voxel (i, j, k) centre = origin + frame @ ((i, j, k) * spacing) in world cm."""

    mask: np.ndarray  # bool (nx, ny, nz)
    spacing: float
    origin: np.ndarray  # world position of voxel (0, 0, 0)
    frame: np.ndarray  # (3, 3) columns = grid axes in world coordinates
    velocity: np.ndarray  # (nx, ny, nz) cm/ms, > 0 on the mask
    roots: np.ndarray  # (R, 3) voxel indices
    fiber: np.ndarray | None = None  # (3,) grid-frame unit fiber direction
    fiber_factor: float = 1.0
    flags: list = field(default_factory=list)

    @property
    def shape(self):
        return self.mask.shape

    def validate(self) -> None:
        if self.spacing <= 0:
            raise PhantomError("spacing must be positive")
        if not np.all(self.velocity[self.mask] > 0):
            raise PhantomError("velocities must be positive on the myocardium")
        _, n = ndimage.label(self.mask, structure=SIX_CONNECTED)
        if n != 1:
            raise PhantomError(f"myocardium mask must be one 6-connected component, found {n}")
        if len(self.roots) == 0:
            raise PhantomError("phantom needs at least one root node")
        for r in self.roots:
            if not self.mask[tuple(r)]:
                raise PhantomError(f"root {tuple(int(x) for x in r)} is outside the myocardium")

    def grid_coords(self) -> np.ndarray:
        """Grid-frame coordinates (cm) of every voxel centre, shape (nx, ny, nz, 3)."""
        idx = np.stack(np.meshgrid(*[np.arange(n) for n in self.shape], indexing="ij"), axis=-1)
        return idx * self.spacing

    def to_grid(self, world_points) -> np.ndarray:
        """World points -> grid-frame cm coordinates."""
        p = np.asarray(world_points, dtype=float)
        return (p - self.origin) @ self.frame

    def to_world(self, grid_points) -> np.ndarray:
        return np.asarray(grid_points, dtype=float) @ self.frame.T + self.origin

    def voxel_of(self, world_point) -> tuple[int, ...] | None:
        g = self.to_grid(world_point) / self.spacing
        ijk = np.round(g).astype(int)
        if np.any(ijk < 0) or np.any(ijk >= np.array(self.shape)):
            return None
        return tuple(int(v) for v in ijk)

    def metric(self) -> np.ndarray:
        """Per-voxel metric tensors M with travel time |d|_M = sqrt(d^T M d), flattened to (n, 3, 3)."""
        n = self.mask.size
        slow2 = 1.0 / np.square(self.velocity.reshape(-1))
        M = np.zeros((n, 3, 3))
        M[:, 0, 0] = M[:, 1, 1] = M[:, 2, 2] = slow2
        if self.fiber is not None and self.fiber_factor != 1.0:
            f = np.asarray(self.fiber, dtype=float)
            f = f / np.linalg.norm(f)
            ff = np.outer(f, f)
            # along-fiber speed v*factor, transverse speed v
            M += (slow2 * (1.0 / self.fiber_factor**2 - 1.0))[:, None, None] * ff[None]
        return M


def _ellipsoid(p, centre, axes):
    q = (p - np.asarray(centre)) / np.asarray(axes)
    return np.sum(q * q, axis=-1) <= 1.0


def build_phantom(spec: PhantomSpec | None = None, centre=None, frame=None) -> HeartPhantom:
    """Voxelize the biventricular phantom.

    ``centre`` is the world position of the LV centre (default origin);
    ``frame`` is a (3, 3) matrix whose columns are the local u, v, w axes in
    world coordinates (default identity).
    """
    spec = spec or PhantomSpec()
    centre = np.zeros(3) if centre is None else np.asarray(centre, dtype=float)
    frame = np.eye(3) if frame is None else np.asarray(frame, dtype=float)
    if not np.allclose(frame.T @ frame, np.eye(3), atol=1e-9):
        raise PhantomError("frame must be orthonormal")
    h = spec.spacing
    lv_o = np.array(spec.lv_outer)
    rv_o = np.array(spec.rv_outer)
    off = np.array(spec.rv_offset)
    lo = np.minimum(-lv_o, off - rv_o) - spec.margin
    hi = np.maximum(lv_o, off + rv_o) + spec.margin
    hi[2] = min(hi[2], spec.base_cut + spec.margin)
    shape = tuple(int(np.ceil((hi[d] - lo[d]) / h)) + 1 for d in range(3))
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"), axis=-1)
    local = lo + idx * h
    lv_wall = _ellipsoid(local, 0, spec.lv_outer) & ~_ellipsoid(local, 0, spec.lv_inner)
    rv_wall = _ellipsoid(local, off, spec.rv_outer) & ~_ellipsoid(local, off, spec.rv_inner)
    mask = (lv_wall | rv_wall) & ~_ellipsoid(local, 0, spec.lv_inner) & (local[..., 2] <= spec.base_cut)
    labels, n = ndimage.label(mask, structure=SIX_CONNECTED)
    flags = []
    if n > 1:
        sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, n + 1))
        mask = labels == (1 + int(np.argmax(sizes)))
        flags.append(f"dropped {n - 1} small disconnected mask components")
    roots = []
    for r in spec.roots:
        g = (np.asarray(r, dtype=float) - lo) / h
        d2 = np.sum((idx - g) ** 2, axis=-1)
        d2 = np.where(mask, d2, np.inf)
        roots.append(np.unravel_index(int(np.argmin(d2)), shape))
    origin = centre + frame @ lo
    fiber = np.asarray(spec.fiber_dir, dtype=float) if spec.fiber_factor != 1.0 else None
    ph = HeartPhantom(
        mask=mask,
        spacing=h,
        origin=origin,
        frame=frame,
        velocity=np.full(shape, float(spec.velocity)),
        roots=np.array(roots, dtype=np.int64),
        fiber=fiber,
        fiber_factor=float(spec.fiber_factor),
        flags=flags,
    )
    ph.validate()
    return ph


def write_phantom_spec(path, spec: PhantomSpec) -> None:
    io.write_kv(path, spec.to_kv())


def read_phantom_spec(path) -> PhantomSpec:
    return PhantomSpec.from_kv(io.read_kv(path))


def frame_from_axis(long_axis) -> np.ndarray:
    """Orthonormal frame whose third column is the base-to-apex direction reversed (w points to the base)."""
    w = -np.asarray(long_axis, dtype=float)
    w = w / np.linalg.norm(w)
    ref = np.array([1.0, 0.0, 0.0]) if abs(w[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = ref - (ref @ w) * w
    u /= np.linalg.norm(u)
    v = np.cross(w, u)
    return np.column_stack([u, v, w])
