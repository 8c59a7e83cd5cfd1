"""Synthetic torsos, electrode placement and MRI-like contour slicing.

The torso is a stack of superellipse cross-sections whose half-axes and
squareness are interpolated (PCHIP) between control levels. Coordinates are
in cm with ``+x`` toward the subject's left, ``+y`` anterior and ``+z`` up;
``z = 0`` is the lower abdomen and ``z = height`` the top of the shoulders.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator
from skimage.measure import find_contours

from . import io
from .geometry import ELECTRODE_NAMES, Contour, ContourSet, fps_points

log = logging.getLogger(__name__)

# Control levels (fraction of height) and the population-mean profile.
LEVELS = np.array([0.0, 0.15, 0.3, 0.45, 0.6, 0.72, 0.84, 0.93, 1.0])
MEAN_A = np.array([16.5, 15.0, 14.6, 15.4, 16.3, 17.0, 18.0, 19.0, 17.5])
MEAN_B_FRONT = np.array([11.0, 10.6, 10.2, 10.8, 11.4, 11.2, 10.2, 8.6, 7.2])
MEAN_B_BACK = np.array([10.0, 9.4, 9.2, 9.6, 10.0, 10.0, 9.6, 8.4, 7.4])
MEAN_P = np.array([2.3, 2.2, 2.2, 2.3, 2.4, 2.5, 2.7, 3.0, 3.0])

# Electrode stations: (fraction of height, parametric angle in degrees).
# Chest stations are given for a left-sided heart; angle 90 is the sternum
# line and angle 0 the left mid-axillary line.
ELECTRODE_RULES = {
    "LA": (0.93, 20.0),
    "RA": (0.93, 160.0),
    "LL": (0.07, 25.0),
    "RL": (0.07, 155.0),
    "V1": (0.70, 98.0),
    "V2": (0.70, 82.0),
    "V3": (0.66, 68.5),
    "V4": (0.62, 55.0),
    "V5": (0.62, 28.0),
    "V6": (0.62, 0.0),
}
CHEST_LEADS = ("V1", "V2", "V3", "V4", "V5", "V6")

# Heart placement: centre as (height fraction, fraction of half-width toward
# the heart side, fraction of anterior half-depth).
HEART_CENTER = (0.66, 0.12, 0.15)
HEART_APEX_DIR = (0.55, 0.45, -0.70)


@dataclass
class TorsoSpec:
    height: float
    levels: np.ndarray
    a_left: np.ndarray
    a_right: np.ndarray
    b_front: np.ndarray
    b_back: np.ndarray
    squareness: np.ndarray
    scale: float = 1.0
    seed: int = 0
    lateral: int = 1  # +1: heart and chest leads on the subject's left

    def validate(self) -> None:
        if not 40.0 <= self.height <= 80.0:
            raise ValueError(f"torso height {self.height} outside [40, 80] cm")
        for name in ("a_left", "a_right", "b_front", "b_back"):
            if np.any(np.asarray(getattr(self, name)) <= 0):
                raise ValueError(f"{name} must be positive")
        p = np.asarray(self.squareness)
        if np.any(p < 1.5) or np.any(p > 4.0):
            raise ValueError("squareness must lie in [1.5, 4]")
        if self.lateral not in (1, -1):
            raise ValueError("lateral must be +1 or -1")

    def to_kv(self) -> dict:
        def arr(x):
            return " ".join("%.9f" % v for v in x)

        return {
            "height": "%.9f" % self.height,
            "scale": "%.9f" % self.scale,
            "seed": str(self.seed),
            "lateral": str(self.lateral),
            "levels": arr(self.levels),
            "a_left": arr(self.a_left),
            "a_right": arr(self.a_right),
            "b_front": arr(self.b_front),
            "b_back": arr(self.b_back),
            "squareness": arr(self.squareness),
        }

    @classmethod
    def from_kv(cls, kv: dict) -> "TorsoSpec":
        def arr(key):
            return np.array([float(v) for v in kv[key].split()])

        return cls(
            height=float(kv["height"]),
            levels=arr("levels"),
            a_left=arr("a_left"),
            a_right=arr("a_right"),
            b_front=arr("b_front"),
            b_back=arr("b_back"),
            squareness=arr("squareness"),
            scale=float(kv["scale"]),
            seed=int(kv["seed"]),
            lateral=int(kv["lateral"]),
        )


def mirror_spec(spec: TorsoSpec) -> TorsoSpec:
    """Left-right mirror image of a torso (the heart side flips as well)."""
    return replace(spec, a_left=spec.a_right.copy(), a_right=spec.a_left.copy(), lateral=-spec.lateral)


class TorsoSurface:
    """Analytic evaluator for a :class:`TorsoSpec` plus dense surface samples."""

    def __init__(self, spec: TorsoSpec, n_samples: int = 4096, sample_seed: int = 0):
        spec.validate()
        self.spec = spec
        z = spec.levels * spec.height
        self._interp = {
            name: PchipInterpolator(z, getattr(spec, name))
            for name in ("a_left", "a_right", "b_front", "b_back", "squareness")
        }
        self.samples = self.sample(n_samples, np.random.default_rng(sample_seed))

    @property
    def height(self) -> float:
        return self.spec.height

    def params(self, z):
        zc = np.clip(np.asarray(z, dtype=float), 0.0, self.spec.height)
        return {k: f(zc) for k, f in self._interp.items()}

    def point(self, z, theta) -> np.ndarray:
        """Surface point at height ``z`` and parametric angle ``theta`` (radians)."""
        z, theta = np.broadcast_arrays(np.asarray(z, dtype=float), np.asarray(theta, dtype=float))
        p = self.params(z)
        c, s = np.cos(theta), np.sin(theta)
        e = 2.0 / p["squareness"]
        a = np.where(c >= 0, p["a_left"], p["a_right"])
        b = np.where(s >= 0, p["b_front"], p["b_back"])
        x = a * np.sign(c) * np.abs(c) ** e
        y = b * np.sign(s) * np.abs(s) ** e
        return np.stack([x, y, z], axis=-1)

    def radial_value(self, points) -> np.ndarray:
        """Superellipse gauge: 1 on the surface, <1 inside, homogeneous in (x, y)."""
        pts = np.asarray(points, dtype=float)
        x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
        p = self.params(z)
        a = np.where(x >= 0, p["a_left"], p["a_right"])
        b = np.where(y >= 0, p["b_front"], p["b_back"])
        q = p["squareness"]
        return (np.abs(x / a) ** q + np.abs(y / b) ** q) ** (1.0 / q)

    def radial_residual(self, points) -> np.ndarray:
        """Distance along the in-level ray from the axis to the surface.

        This bounds the true distance to the surface from above.
        """
        pts = np.asarray(points, dtype=float)
        r = np.hypot(pts[..., 0], pts[..., 1])
        f = self.radial_value(pts)
        with np.errstate(divide="ignore", invalid="ignore"):
            res = np.where(f > 0, r * np.abs(1.0 - 1.0 / f), np.inf)
        out_of_range = (pts[..., 2] < 0) | (pts[..., 2] > self.spec.height)
        return np.where(out_of_range, np.inf, res)

    def sample(self, n: int, rng, nz: int = 160, nt: int = 256) -> np.ndarray:
        """Area-weighted random points on the lateral surface."""
        zs = np.linspace(0.0, self.spec.height, nz + 1)
        ts = np.linspace(0.0, 2 * np.pi, nt + 1)
        grid = self.point(zs[:, None], ts[None, :])
        d1 = grid[1:, 1:] - grid[:-1, :-1]
        d2 = grid[1:, :-1] - grid[:-1, 1:]
        area = 0.5 * np.linalg.norm(np.cross(d1, d2), axis=-1).ravel()
        cell = rng.choice(area.size, size=n, p=area / area.sum())
        iz, it = np.divmod(cell, nt)
        z = zs[iz] + rng.uniform(size=n) * (zs[1] - zs[0])
        t = ts[it] + rng.uniform(size=n) * (ts[1] - ts[0])
        return self.point(z, t)


def sample_torso(seed: int) -> tuple[TorsoSpec, TorsoSurface]:
    """Draw one torso from the synthetic population."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x70350]))
    k = len(LEVELS)
    height = rng.uniform(50.0, 70.0)
    scale = rng.uniform(0.85, 1.25)

    def smooth_noise(sd):
        raw = rng.normal(0.0, sd, size=k)
        return np.convolve(np.pad(raw, 1, mode="edge"), [0.25, 0.5, 0.25], mode="valid")

    width = scale * (1.0 + smooth_noise(0.06))
    asym = 1.0 + rng.uniform(-0.03, 0.03)
    depth_front = scale * (1.0 + smooth_noise(0.06))
    depth_back = scale * (1.0 + smooth_noise(0.05))
    spec = TorsoSpec(
        height=float(height),
        levels=LEVELS.copy(),
        a_left=MEAN_A * width * asym,
        a_right=MEAN_A * width / asym,
        b_front=MEAN_B_FRONT * depth_front,
        b_back=MEAN_B_BACK * depth_back,
        squareness=np.clip(MEAN_P + smooth_noise(0.15), 1.6, 3.8),
        scale=float(scale),
        seed=int(seed),
    )
    return spec, TorsoSurface(spec, sample_seed=int(seed))


def electrode_station(spec: TorsoSpec, name: str) -> tuple[float, float]:
    """(z in cm, parametric angle in radians) of an electrode."""
    frac, deg = ELECTRODE_RULES[name]
    if name in CHEST_LEADS and spec.lateral < 0:
        deg = 180.0 - deg
    return frac * spec.height, np.deg2rad(deg)


def place_electrodes(spec: TorsoSpec, surface: TorsoSurface | None = None) -> np.ndarray:
    """The 10 electrodes (LA, RA, LL, RL, V1..V6) on the analytic surface."""
    surface = surface if surface is not None else TorsoSurface(spec, n_samples=1)
    out = np.empty((len(ELECTRODE_NAMES), 3))
    for i, name in enumerate(ELECTRODE_NAMES):
        z, t = electrode_station(spec, name)
        out[i] = surface.point(z, t)
    return out


def heart_frame(spec: TorsoSpec, surface: TorsoSurface | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Heart centre and unit base-to-apex direction for a torso."""
    surface = surface if surface is not None else TorsoSurface(spec, n_samples=1)
    fz, fx, fy = HEART_CENTER
    z = fz * spec.height
    p = surface.params(z)
    a_side = p["a_left"] if spec.lateral > 0 else p["a_right"]
    center = np.array([spec.lateral * fx * float(a_side), fy * float(p["b_front"]), z])
    d = np.array(HEART_APEX_DIR) * np.array([spec.lateral, 1.0, 1.0])
    return center, d / np.linalg.norm(d)


@dataclass
class PlaneSpec:
    """A slice plane with its field of view ``(umin, umax, vmin, vmax)`` in cm."""

    view: str
    origin: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    fov: tuple[float, float, float, float]

    def __post_init__(self):
        if not (self.fov[1] > self.fov[0] and self.fov[3] > self.fov[2]):
            raise ValueError("field-of-view extents must be positive")


def plane_axes(normal) -> tuple[np.ndarray, np.ndarray]:
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    ref = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(ref, n)
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    return u, v


def _centered_plane(view, normal, center, fov_w, fov_h) -> PlaneSpec:
    u, v = plane_axes(normal)
    return PlaneSpec(view, np.asarray(center, float), u, v, (-fov_w / 2, fov_w / 2, -fov_h / 2, fov_h / 2))


@dataclass
class SliceProtocol:
    sax_count: int = 9
    sax_spacing: float = 1.0
    lax_angles: tuple[float, float, float] = (0.0, 50.0, 110.0)
    n_sagittal: int = 1
    n_coronal: int = 1
    n_axial: int = 1
    localizer_spacing: float = 5.0
    fov_heart: tuple[float, float] = (26.0, 26.0)
    fov_localizer: tuple[float, float] = (40.0, 40.0)
    p_drop_sax: float = 0.05
    p_drop_lax: float = 0.15
    p_drop_localizer: float = 0.1
    gap_prob: float = 0.7
    gap_frac: tuple[float, float] = (0.1, 0.3)
    shoulder_bias: float = 0.5
    grid: float = 0.4
    cap_margin: float = 0.5
    planes: list[PlaneSpec] | None = None  # explicit planes replace the heart-relative set

    def validate(self) -> None:
        if self.fov_heart[0] <= 0 or self.fov_heart[1] <= 0 or self.fov_localizer[0] <= 0 or self.fov_localizer[1] <= 0:
            raise ValueError("field-of-view extents must be positive")
        if self.grid <= 0:
            raise ValueError("grid spacing must be positive")

    def build_planes(self, spec: TorsoSpec, surface: TorsoSurface | None = None) -> list[tuple[PlaneSpec, float]]:
        """Planes paired with their dropout probability."""
        self.validate()
        if self.planes is not None:
            return [(p, 0.0) for p in self.planes]
        center, axis = heart_frame(spec, surface)
        out = []
        offsets = (np.arange(self.sax_count) - (self.sax_count - 1) / 2) * self.sax_spacing
        for off in offsets:
            out.append((_centered_plane("SAX", axis, center + off * axis, *self.fov_heart), self.p_drop_sax))
        # LAX planes contain the long axis; rotate a reference normal about it.
        ref_u, ref_v = plane_axes(axis)
        for label, ang in zip(("LAX-2ch", "LAX-3ch", "LAX-4ch"), self.lax_angles):
            a = np.deg2rad(ang)
            normal = np.cos(a) * ref_u + np.sin(a) * ref_v
            out.append((_centered_plane(label, normal, center, *self.fov_heart), self.p_drop_lax))
        for view, normal, count in (
            ("localizer-sagittal", (1.0, 0.0, 0.0), self.n_sagittal),
            ("localizer-coronal", (0.0, 1.0, 0.0), self.n_coronal),
            ("localizer-axial", (0.0, 0.0, 1.0), self.n_axial),
        ):
            n = np.array(normal)
            for off in (np.arange(count) - (count - 1) / 2) * self.localizer_spacing:
                out.append((_centered_plane(view, n, center + off * n, *self.fov_localizer), self.p_drop_localizer))
        return out


def _project_to_surface(surface, plane: PlaneSpec, uv, iters=40):
    """Newton steps inside the plane toward the surface gauge level 1."""
    uv = uv.copy()
    o, eu, ev = plane.origin, plane.axis_u, plane.axis_v
    h = 1e-6

    def f(q):
        return surface.radial_value(o + q[:, :1] * eu + q[:, 1:] * ev) - 1.0

    for _ in range(iters):
        g = f(uv)
        if np.all(np.abs(g) < 1e-14):
            break
        gu = (f(uv + [h, 0.0]) - f(uv - [h, 0.0])) / (2 * h)
        gv = (f(uv + [0.0, h]) - f(uv - [0.0, h])) / (2 * h)
        den = gu * gu + gv * gv
        step = np.where(den > 0, g / np.where(den > 0, den, 1.0), 0.0)
        step = np.clip(step, -1.0, 1.0)  # cm scale; avoid overshooting across the tube
        uv[:, 0] -= step * gu
        uv[:, 1] -= step * gv
    return uv


def _split_runs(mask) -> list[tuple[int, int]]:
    """Maximal runs of True as half-open index ranges."""
    runs, start = [], None
    for i, m in enumerate(mask):
        if m and start is None:
            start = i
        elif not m and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(mask)))
    return runs


def _polylines_on_plane(surface, plane: PlaneSpec, grid: float, cap_margin: float):
    """Intersect the torso with a plane; yields (uv points, closed flag)."""
    umin, umax, vmin, vmax = plane.fov
    nu = max(int(np.ceil((umax - umin) / grid)) + 1, 3)
    nv = max(int(np.ceil((vmax - vmin) / grid)) + 1, 3)
    us = np.linspace(umin, umax, nu)
    vs = np.linspace(vmin, vmax, nv)
    pts = plane.origin + us[:, None, None] * plane.axis_u + vs[None, :, None] * plane.axis_v
    field = surface.radial_value(pts) - 1.0
    z = pts[..., 2]
    field = np.where((z < 0) | (z > surface.height), 1.0, field)
    out = []
    for cont in find_contours(field, 0.0):
        closed = len(cont) > 3 and np.allclose(cont[0], cont[-1])
        if closed:
            cont = cont[:-1]
        uv = np.column_stack([np.interp(cont[:, 0], np.arange(nu), us), np.interp(cont[:, 1], np.arange(nv), vs)])
        uv = _project_to_surface(surface, plane, uv)
        xyz = plane.origin + uv[:, :1] * plane.axis_u + uv[:, 1:] * plane.axis_v
        ok = (
            (surface.radial_residual(xyz) < 1e-7)
            & (xyz[:, 2] > cap_margin)
            & (xyz[:, 2] < surface.height - cap_margin)
            & (uv[:, 0] >= umin - 1e-9)
            & (uv[:, 0] <= umax + 1e-9)
            & (uv[:, 1] >= vmin - 1e-9)
            & (uv[:, 1] <= vmax + 1e-9)
        )
        if ok.all():
            out.append((uv, closed))
            continue
        if closed and ok.any():
            # rotate so the polyline starts right after a removed point
            first_bad = int(np.argmin(ok))
            uv = np.roll(uv, -first_bad, axis=0)
            ok = np.roll(ok, -first_bad)
        for s, e in _split_runs(ok):
            out.append((uv[s:e], False))
    return out


def _arc_positions(pts, closed):
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1] + (np.linalg.norm(pts[0] - pts[-1]) if closed else 0.0)
    return cum, total


def _apply_gap(uv, closed, xyz, protocol: SliceProtocol, rng):
    """Remove one contiguous arc near the highest or lowest point of a polyline."""
    if rng.uniform() >= protocol.gap_prob:
        return [(uv, closed)]
    frac = rng.uniform(*protocol.gap_frac)
    centre = int(np.argmax(xyz[:, 2])) if rng.uniform() < protocol.shoulder_bias else int(np.argmin(xyz[:, 2]))
    cum, total = _arc_positions(xyz, closed)
    half = 0.5 * frac * total
    d = np.abs(cum - cum[centre])
    if closed:
        d = np.minimum(d, total - d)
    keep = d > half
    if closed and keep.any() and not keep.all():
        first_bad = int(np.argmin(keep))
        uv = np.roll(uv, -first_bad, axis=0)
        keep = np.roll(keep, -first_bad)
    elif keep.all():
        return [(uv, closed)]
    return [(uv[s:e], False) for s, e in _split_runs(keep)]


def slice_contours(surface: TorsoSurface, protocol: SliceProtocol | None = None, seed: int = 0) -> ContourSet:
    """Sparse, incomplete contours from the surviving slice planes."""
    protocol = protocol or SliceProtocol()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x511CE]))
    planes = protocol.build_planes(surface.spec, surface)
    survive = [rng.uniform() >= p_drop for _, p_drop in planes]
    flags = []
    if not any(survive):
        loc = [i for i, (p, _) in enumerate(planes) if p.view.startswith("localizer")]
        survive[loc[0] if loc else 0] = True
        flags.append("all planes dropped; one localizer restored")
        log.warning("subject seed %s: %s", seed, flags[-1])
    contours = []
    for (plane, _), alive in zip(planes, survive):
        if not alive:
            continue
        for uv, closed in _polylines_on_plane(surface, plane, protocol.grid, protocol.cap_margin):
            if len(uv) < 3:
                continue
            xyz = plane.origin + uv[:, :1] * plane.axis_u + uv[:, 1:] * plane.axis_v
            for piece, pclosed in _apply_gap(uv, closed, xyz, protocol, rng):
                if len(piece) >= 3:
                    contours.append(Contour(plane.origin, plane.axis_u, plane.axis_v, piece, view=plane.view, closed=pclosed))
    return ContourSet(contours, flags)


@dataclass
class Subject:
    id: str
    contours: ContourSet
    electrodes: np.ndarray
    coarse: np.ndarray
    dense: np.ndarray
    topology: np.ndarray
    spec: TorsoSpec | None = None


N_COARSE_GT = 1024
N_DENSE_GT = 4096
N_TOPOLOGY = 128
DEFAULT_SPLIT = (0.6, 0.1, 0.3)


def subject_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


def make_subject(sid: str, sseed: int, protocol: SliceProtocol | None = None) -> Subject:
    spec, surface = sample_torso(sseed)
    electrodes = place_electrodes(spec, surface)
    contours = slice_contours(surface, protocol, seed=sseed)
    rng = np.random.default_rng(np.random.SeedSequence([sseed, 0xD3]))
    dense = surface.sample(N_DENSE_GT, rng)
    coarse = surface.sample(N_COARSE_GT, rng)
    topology = fps_points(dense, N_TOPOLOGY, 0)
    return Subject(sid, contours, electrodes, coarse, dense, topology, spec)


def split_counts(n: int, split=DEFAULT_SPLIT) -> tuple[int, int, int]:
    if all(isinstance(s, (int, np.integer)) for s in split) and sum(split) == n:
        return tuple(int(s) for s in split)
    n_train = int(round(split[0] * n))
    n_val = int(round(split[1] * n))
    return n_train, n_val, n - n_train - n_val


def format_id(i: int) -> str:
    return f"{i:04d}"


def make_dataset(out_dir, n_subjects: int, protocol: SliceProtocol | None = None, seed: int = 0, split=DEFAULT_SPLIT, threads: int = 1) -> Path:
    """Write a complete synthetic dataset and its manifest; returns the root."""
    if n_subjects < 3:
        raise ValueError("a dataset needs at least 3 subjects")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    n_train, n_val, n_test = split_counts(n_subjects, split)
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5917])).permutation(n_subjects)
    split_of = {}
    for rank, i in enumerate(perm):
        split_of[int(i)] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    seeds = [subject_seed(seed, i) for i in range(n_subjects)]

    def build(i):
        sid = format_id(i)
        try:
            subj = make_subject(sid, seeds[i], protocol)
            write_subject(root / "subjects" / sid, subj)
        except OSError as exc:
            raise OSError(f"subject {sid}: {exc}") from exc
        return sid

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(build, range(n_subjects)))
    else:
        for i in range(n_subjects):
            build(i)
    rows = ["# id split seed"] + [f"{format_id(i)} {split_of[i]} {seeds[i]}" for i in range(n_subjects)]
    io.atomic_write_text(root / "manifest.txt", "\n".join(rows) + "\n")
    return root


def write_subject(path, subj: Subject) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    io.write_contours(path / "contours.txt", subj.contours)
    io.write_electrodes(path / "electrodes.txt", subj.electrodes)
    io.write_xyz(path / "coarse.xyz", subj.coarse)
    io.write_xyz(path / "dense.xyz", subj.dense)
    io.write_xyz(path / "topology.xyz", subj.topology)
    if subj.spec is not None:
        io.write_kv(path / "torso.txt", subj.spec.to_kv())


@dataclass
class Dataset:
    """Read access to a dataset directory written by :func:`make_dataset`."""

    root: Path
    splits: dict[str, str] = field(default_factory=dict)
    seeds: dict[str, int] = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def open(cls, root) -> "Dataset":
        root = Path(root)
        manifest = root / "manifest.txt"
        if not manifest.exists():
            raise FileNotFoundError(f"no manifest.txt under {root}")
        ds = cls(root)
        with open(manifest) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                sid, split, sseed = line.split()
                ds.splits[sid] = split
                ds.seeds[sid] = int(sseed)
        return ds

    def ids(self, split: str | None = None) -> list[str]:
        return sorted(s for s, sp in self.splits.items() if split is None or sp == split)

    def resolve_id(self, sid) -> str:
        sid = str(sid)
        if sid in self.splits:
            return sid
        if sid.isdigit() and format_id(int(sid)) in self.splits:
            return format_id(int(sid))
        raise KeyError(f"unknown subject {sid!r}")

    def subject(self, sid) -> Subject:
        sid = self.resolve_id(sid)
        if sid not in self._cache:
            d = self.root / "subjects" / sid
            spec = TorsoSpec.from_kv(io.read_kv(d / "torso.txt")) if (d / "torso.txt").exists() else None
            self._cache[sid] = Subject(
                id=sid,
                contours=io.read_contours(d / "contours.txt"),
                electrodes=io.read_electrodes(d / "electrodes.txt"),
                coarse=io.read_xyz(d / "coarse.xyz")[0],
                dense=io.read_xyz(d / "dense.xyz")[0],
                topology=io.read_xyz(d / "topology.xyz")[0],
                spec=spec,
            )
        return self._cache[sid]
