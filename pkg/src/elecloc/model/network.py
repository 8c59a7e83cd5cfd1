"""Topology-informed keypoint network in plain numpy.

Forward passes keep every activation needed by the hand-written reverse
pass. Max-pool and nearest-neighbour selections are fixed during a pass
(lowest index wins on ties), so gradients are exact subgradients of the
piecewise-smooth loss.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields

import numpy as np

from ..geometry import N_ELECTRODES, SizeError
from . import skeleton as skel_mod


class NumericError(FloatingPointError):
    """A non-finite value appeared; the message names the layer."""


@dataclass
class ModelConfig:
    n_in: int = 2048
    n_kp: int = 64
    n_coarse: int = 1024
    n_dense: int = 4096
    enc_widths: tuple = (128, 256, 512, 1024)
    head_widths: tuple = (256, 256)
    coarse_widths: tuple = (1024, 1024)
    refine_widths: tuple = (128, 128)
    head: str = "keypoint"  # "keypoint" or "fc" (global-feature regression baseline)
    kp_anchor_input: bool = False  # feed anchor coordinates to the keypoint MLP next to F_g
    kp_skip: str = "gate"  # anchor -> offset path: "full" (3K x 3K matrix at -I), "gate" (per-keypoint scalar), "none"
    use_skeleton: bool = True
    use_recon: bool = True
    skeleton_k: int = 3
    skeleton_alpha: float = 0.5
    skeleton_density: int = 8
    grid_size: int = 2
    grid_scale: float = 0.05
    dtype: str = "float64"
    n_electrodes: int = N_ELECTRODES  # leading keypoint slots supervised as electrodes; < 10 only for toy models

    def __post_init__(self):
        for name in ("enc_widths", "head_widths", "coarse_widths", "refine_widths"):
            setattr(self, name, tuple(int(w) for w in getattr(self, name)))
        if len(self.enc_widths) != 4:
            raise ValueError("enc_widths needs four entries (c1, c2, c3, c4)")
        if self.kp_skip not in ("full", "gate", "none"):
            raise ValueError(f"unknown kp_skip {self.kp_skip!r}")
        if self.head not in ("keypoint", "fc"):
            raise ValueError(f"unknown head {self.head!r}")
        if not 1 <= self.n_electrodes <= N_ELECTRODES:
            raise ValueError(f"n_electrodes must be in 1..{N_ELECTRODES}")
        if self.head == "keypoint" and self.n_kp < self.n_electrodes:
            raise ValueError(f"n_kp must be at least {self.n_electrodes}: the leading keypoints are the electrodes")
        if self.n_kp > self.n_in and self.head == "keypoint":
            raise SizeError(f"n_kp={self.n_kp} exceeds n_in={self.n_in}")

    @property
    def n_keypoints(self) -> int:
        return self.n_kp if self.head == "keypoint" else self.n_electrodes

    @property
    def skeleton_on(self) -> bool:
        return self.use_recon and self.use_skeleton and self.head == "keypoint"

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _dense_init(rng, fan_in, fan_out, gain=2.0):
    return rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_in, fan_out))


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """He-normal hidden layers; output layers start small."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1417]))
    c1, c2, c3, c4 = cfg.enc_widths
    p = {
        "enc.w1": _dense_init(rng, 3, c1),
        "enc.b1": np.zeros(c1),
        "enc.w2": _dense_init(rng, c1, c2),
        "enc.b2": np.zeros(c2),
    }
    w3 = _dense_init(rng, 2 * c2, c3)
    p.update({
        "enc.w3a": w3[:c2],
        "enc.w3b": w3[c2:],
        "enc.b3": np.zeros(c3),
        "enc.w4": _dense_init(rng, c3, c4),
        "enc.b4": np.zeros(c4),
    })
    k3 = 3 * cfg.n_keypoints
    head_in = c4 + (k3 if cfg.head == "keypoint" and cfg.kp_anchor_input else 0)
    widths = (head_in,) + cfg.head_widths
    for i in range(len(cfg.head_widths)):
        p[f"kp.w{i + 1}"] = _dense_init(rng, widths[i], widths[i + 1])
        p[f"kp.b{i + 1}"] = np.zeros(widths[i + 1])
    last = len(cfg.head_widths) + 1
    p[f"kp.w{last}"] = _dense_init(rng, widths[-1], k3, gain=0.01)
    p[f"kp.b{last}"] = np.zeros(k3)
    if cfg.head == "keypoint" and cfg.kp_skip == "full":
        # linear path from anchor coordinates to offsets, starting at -I: the untrained head
        # regresses keypoints from the global feature and learns how much to trust each anchor
        p["kp.skip"] = -np.eye(k3)
    elif cfg.head == "keypoint" and cfg.kp_skip == "gate":
        # keypoint k = MLP_k + g_k * anchor_k, g starting at 0 (offset path -(1 - g_k) I per keypoint)
        p["kp.gate"] = np.zeros(cfg.n_keypoints)
    if cfg.use_recon:
        widths = (c4,) + cfg.coarse_widths
        for i in range(len(cfg.coarse_widths)):
            p[f"coarse.w{i + 1}"] = _dense_init(rng, widths[i], widths[i + 1])
            p[f"coarse.b{i + 1}"] = np.zeros(widths[i + 1])
        last = len(cfg.coarse_widths) + 1
        p[f"coarse.w{last}"] = _dense_init(rng, widths[-1], 3 * cfg.n_coarse, gain=0.5)
        p[f"coarse.b{last}"] = np.zeros(3 * cfg.n_coarse)
        r = cfg.refine_widths
        w1 = _dense_init(rng, 5 + c4, r[0])
        p["ref.w1p"], p["ref.w1g"], p["ref.w1f"] = w1[:3], w1[3:5], w1[5:]
        p["ref.b1"] = np.zeros(r[0])
        for i in range(1, len(r)):
            p[f"ref.w{i + 1}"] = _dense_init(rng, r[i - 1], r[i])
            p[f"ref.b{i + 1}"] = np.zeros(r[i])
        p[f"ref.w{len(r) + 1}"] = _dense_init(rng, r[-1], 3, gain=0.01)
        p[f"ref.b{len(r) + 1}"] = np.zeros(3)
    dt = np.dtype(cfg.dtype)
    return {k: v.astype(dt) for k, v in p.items()}


def feature_fps(features, k: int) -> np.ndarray:
    """Farthest-first traversal in feature space.

    Starts from the point with the largest feature norm (lowest index on
    ties), then repeatedly takes the point farthest from everything chosen.
    """
    f = np.asarray(features, dtype=np.float64)
    n = len(f)
    if k > n:
        raise SizeError(f"cannot select {k} anchors from {n} points")
    sq = np.einsum("ij,ij->i", f, f)
    chosen = np.empty(k, dtype=np.int64)
    cur = int(np.argmax(sq))
    mind = np.full(n, np.inf)
    for i in range(k):
        chosen[i] = cur
        d = sq - 2.0 * (f @ f[cur]) + sq[cur]
        np.minimum(mind, d, out=mind)
        mind[cur] = -np.inf
        cur = int(np.argmax(mind))
    return chosen


def grid_offsets(grid_size: int) -> np.ndarray:
    """``grid_size x grid_size`` folding grid in [-0.5, 0.5]^2 (centre for size 1)."""
    if grid_size == 1:
        return np.zeros((1, 2))
    g = np.linspace(-0.5, 0.5, grid_size)
    uu, vv = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([uu.ravel(), vv.ravel()])


def seed_assignment(n_seeds: int, n_grid: int, n_dense: int) -> tuple[np.ndarray, np.ndarray]:
    """Spread ``n_dense`` outputs evenly over the ``n_seeds * n_grid`` candidates."""
    c = (np.arange(n_dense, dtype=np.int64) * (n_seeds * n_grid)) // n_dense
    return c // n_grid, c % n_grid


def _relu(x):
    return np.maximum(x, 0)


def _check(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")


@dataclass
class Outputs:
    keypoints: np.ndarray  # (B, K, 3); electrodes are keypoints[:, :10]
    coarse: np.ndarray | None = None  # (B, n_coarse, 3)
    dense: np.ndarray | None = None  # (B, n_dense, 3)
    global_feature: np.ndarray | None = None
    local_features: np.ndarray | None = None
    anchors: np.ndarray | None = None  # (B, K) input indices
    skeletons: list = field(default_factory=list)

    @property
    def electrodes(self) -> np.ndarray:
        return self.keypoints[:, :N_ELECTRODES]


def _mlp_forward(x, params, prefix, n_hidden, cache):
    hs = [x]
    for i in range(1, n_hidden + 1):
        z = hs[-1] @ params[f"{prefix}.w{i}"] + params[f"{prefix}.b{i}"]
        hs.append(_relu(z))
    out = hs[-1] @ params[f"{prefix}.w{n_hidden + 1}"] + params[f"{prefix}.b{n_hidden + 1}"]
    cache[prefix] = hs
    return out


def _mlp_backward(dout, params, prefix, n_hidden, cache, grads):
    hs = cache[prefix]
    last = n_hidden + 1
    grads[f"{prefix}.w{last}"] = hs[-1].T @ dout
    grads[f"{prefix}.b{last}"] = dout.sum(axis=0)
    dh = dout @ params[f"{prefix}.w{last}"].T
    for i in range(n_hidden, 0, -1):
        dz = dh * (hs[i] > 0)
        grads[f"{prefix}.w{i}"] = hs[i - 1].T @ dz
        grads[f"{prefix}.b{i}"] = dz.sum(axis=0)
        dh = dz @ params[f"{prefix}.w{i}"].T
    return dh


def encode(cloud, params) -> tuple[np.ndarray, np.ndarray]:
    """Single-cloud convenience wrapper: (local features, global feature)."""
    x = np.asarray(cloud)[None]
    cache = {}
    f_l, f_g = _encode(x, params, cache)
    return f_l[0], f_g[0]


def _encode(x, p, cache):
    z1 = x @ p["enc.w1"] + p["enc.b1"]
    h1 = _relu(z1)
    f1 = h1 @ p["enc.w2"] + p["enc.b2"]
    i1 = np.argmax(f1, axis=1)
    g1 = np.take_along_axis(f1, i1[:, None, :], axis=1)[:, 0]
    z3 = f1 @ p["enc.w3a"] + (g1 @ p["enc.w3b"] + p["enc.b3"])[:, None, :]
    h3 = _relu(z3)
    f4 = h3 @ p["enc.w4"] + p["enc.b4"]
    i4 = np.argmax(f4, axis=1)
    fg = np.take_along_axis(f4, i4[:, None, :], axis=1)[:, 0]
    cache.update(x=x, h1=h1, f1=f1, i1=i1, g1=g1, h3=h3, i4=i4, fg=fg)
    return f1, fg


def _encode_backward(dfg, p, cache, grads):
    x, h1, f1, i1, g1, h3, i4 = (cache[k] for k in ("x", "h1", "f1", "i1", "g1", "h3", "i4"))
    B = x.shape[0]
    c4 = dfg.shape[1]
    names = ("enc.w1", "enc.b1", "enc.w2", "enc.b2", "enc.w3a", "enc.w3b", "enc.b3", "enc.w4", "enc.b4")
    for n in names:
        grads[n] = np.zeros_like(p[n])
    cols = np.arange(c4)
    for b in range(B):
        # only rows that won a max-pool receive gradient
        rows4, inv4 = np.unique(i4[b], return_inverse=True)
        m4 = np.zeros((len(rows4), c4), dtype=dfg.dtype)
        m4[inv4, cols] = dfg[b]
        grads["enc.w4"] += h3[b, rows4].T @ m4
        grads["enc.b4"] += dfg[b]
        dz3 = (m4 @ p["enc.w4"].T) * (h3[b, rows4] > 0)
        grads["enc.w3a"] += f1[b, rows4].T @ dz3
        s3 = dz3.sum(axis=0)
        grads["enc.w3b"] += np.outer(g1[b], s3)
        grads["enc.b3"] += s3
        dg1 = p["enc.w3b"] @ s3
        rows = np.union1d(rows4, i1[b])
        df1 = np.zeros((len(rows), f1.shape[2]), dtype=dfg.dtype)
        df1[np.searchsorted(rows, rows4)] += dz3 @ p["enc.w3a"].T
        np.add.at(df1, (np.searchsorted(rows, i1[b]), np.arange(f1.shape[2])), dg1)
        grads["enc.w2"] += h1[b, rows].T @ df1
        grads["enc.b2"] += df1.sum(axis=0)
        dz1 = (df1 @ p["enc.w2"].T) * (h1[b, rows] > 0)
        grads["enc.w1"] += x[b, rows].T @ dz1
        grads["enc.b1"] += dz1.sum(axis=0)


def forward(params, x, cfg: ModelConfig, cache: dict | None = None) -> Outputs:
    """Run the network on a batch ``x`` of shape (B, n_in, 3) in normalized coordinates."""
    cache = {} if cache is None else cache
    dt = np.dtype(cfg.dtype)
    x = np.asarray(x, dtype=dt)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != (cfg.n_in, 3):
        raise SizeError(f"expected input clouds of shape ({cfg.n_in}, 3), got {x.shape[1:]}")
    B = x.shape[0]
    f1, fg = _encode(x, params, cache)
    _check("encoder", fg)
    K = cfg.n_keypoints
    anchors = None
    if cfg.head == "keypoint":
        anchors = np.stack([feature_fps(f1[b], K) for b in range(B)])
        a_xyz = np.take_along_axis(x, anchors[:, :, None], axis=1)
        a_flat = a_xyz.reshape(B, 3 * K)
        head_in = np.concatenate([fg, a_flat], axis=1) if cfg.kp_anchor_input else fg
        offsets = _mlp_forward(head_in, params, "kp", len(cfg.head_widths), cache)
        if cfg.kp_skip == "full":
            offsets = offsets + a_flat @ params["kp.skip"]
        elif cfg.kp_skip == "gate":
            offsets = offsets + (a_xyz * (params["kp.gate"] - 1.0)[None, :, None]).reshape(B, 3 * K)
        cache["a_flat"] = a_flat
        keypoints = a_xyz + offsets.reshape(B, K, 3)
    else:
        keypoints = _mlp_forward(fg, params, "kp", len(cfg.head_widths), cache).reshape(B, K, 3)
    _check("keypoint head", keypoints)
    out = Outputs(keypoints=keypoints, global_feature=fg, local_features=f1, anchors=anchors)
    if cfg.use_recon:
        coarse = _mlp_forward(fg, params, "coarse", len(cfg.coarse_widths), cache).reshape(B, cfg.n_coarse, 3)
        _check("coarse decoder", coarse)
        out.coarse = coarse
        out.dense = _refine_forward(params, cfg, keypoints, coarse, fg, cache, out)
        _check("refinement", out.dense)
    return out


def _refine_forward(p, cfg, keypoints, coarse, fg, cache, out):
    B = keypoints.shape[0]
    grid = grid_offsets(cfg.grid_size).astype(fg.dtype)
    seeds_pos, seed_idx, grid_idx, n_skel = [], [], [], []
    for b in range(B):
        if cfg.skeleton_on:
            sk = skel_mod.build_skeleton(keypoints[b], coarse[b], cfg.skeleton_k, cfg.skeleton_alpha, cfg.skeleton_density)
            out.skeletons.append(sk)
            seeds = np.concatenate([sk.samples.astype(fg.dtype), coarse[b]])
        else:
            seeds = coarse[b]
        si, gi = seed_assignment(len(seeds), len(grid), cfg.n_dense)
        seeds_pos.append(seeds[si])
        seed_idx.append(si)
        grid_idx.append(gi)
        n_skel.append(len(seeds) - cfg.n_coarse)
    P = np.stack(seeds_pos)
    UV = grid[np.stack(grid_idx)]
    n_hidden = len(cfg.refine_widths)
    z = P @ p["ref.w1p"] + UV @ p["ref.w1g"] + (fg @ p["ref.w1f"] + p["ref.b1"])[:, None, :]
    hs = [_relu(z)]
    for i in range(2, n_hidden + 1):
        hs.append(_relu(hs[-1] @ p[f"ref.w{i}"] + p[f"ref.b{i}"]))
    disp = hs[-1] @ p[f"ref.w{n_hidden + 1}"] + p[f"ref.b{n_hidden + 1}"]
    lift = np.concatenate([UV, np.zeros_like(UV[..., :1])], axis=-1) * cfg.grid_scale
    cache["ref"] = dict(P=P, UV=UV, hs=hs, seed_idx=seed_idx, n_skel=n_skel)
    return P + lift + disp


def _refine_backward(ddense, p, cfg, cache, grads, out):
    c = cache["ref"]
    P, UV, hs = c["P"], c["UV"], c["hs"]
    n_hidden = len(cfg.refine_widths)
    B, Nd, _ = ddense.shape
    last = n_hidden + 1
    flat = ddense.reshape(-1, 3)
    grads[f"ref.w{last}"] = hs[-1].reshape(B * Nd, -1).T @ flat
    grads[f"ref.b{last}"] = flat.sum(axis=0)
    dh = ddense @ p[f"ref.w{last}"].T
    for i in range(n_hidden, 1, -1):
        dz = dh * (hs[i - 1] > 0)
        grads[f"ref.w{i}"] = hs[i - 2].reshape(B * Nd, -1).T @ dz.reshape(B * Nd, -1)
        grads[f"ref.b{i}"] = dz.sum(axis=(0, 1))
        dh = dz @ p[f"ref.w{i}"].T
    dz = dh * (hs[0] > 0)
    dzf = dz.reshape(B * Nd, -1)
    grads["ref.w1p"] = P.reshape(B * Nd, 3).T @ dzf
    grads["ref.w1g"] = UV.reshape(B * Nd, 2).T @ dzf
    s = dz.sum(axis=1)
    fg = cache["fg"]
    grads["ref.w1f"] = fg.T @ s
    grads["ref.b1"] = s.sum(axis=0)
    dfg = s @ p["ref.w1f"].T
    dP = ddense + dz @ p["ref.w1p"].T
    K = out.keypoints.shape[1]
    dkp = np.zeros_like(out.keypoints)
    dcoarse = np.zeros_like(out.coarse)
    for b in range(B):
        n_seeds = c["n_skel"][b] + cfg.n_coarse
        dseeds = np.zeros((n_seeds, 3), dtype=ddense.dtype)
        np.add.at(dseeds, c["seed_idx"][b], dP[b])
        ns = c["n_skel"][b]
        dcoarse[b] += dseeds[ns:]
        if ns:
            dk, dc = skel_mod.backward(out.skeletons[b], dseeds[:ns], K, cfg.n_coarse)
            dkp[b] += dk
            dcoarse[b] += dc
    return dfg, dkp, dcoarse


def backward(params, cfg: ModelConfig, cache: dict, out: Outputs, d_keypoints, d_coarse=None, d_dense=None) -> dict[str, np.ndarray]:
    """Parameter gradients from upstream gradients on the three outputs."""
    grads: dict[str, np.ndarray] = {}
    dt = np.dtype(cfg.dtype)
    dkp = np.asarray(d_keypoints, dtype=dt).copy()
    dfg = np.zeros_like(cache["fg"])
    if cfg.use_recon:
        dcoarse = np.zeros_like(out.coarse) if d_coarse is None else np.asarray(d_coarse, dtype=dt).copy()
        if d_dense is not None:
            dfg_r, dkp_r, dc_r = _refine_backward(np.asarray(d_dense, dtype=dt), params, cfg, cache, grads, out)
            dfg += dfg_r
            dkp += dkp_r
            dcoarse += dc_r
        else:
            for n in params:
                if n.startswith("ref."):
                    grads[n] = np.zeros_like(params[n])
        B = dcoarse.shape[0]
        dfg += _mlp_backward(dcoarse.reshape(B, -1), params, "coarse", len(cfg.coarse_widths), cache, grads)
    B, K, _ = dkp.shape
    dh = _mlp_backward(dkp.reshape(B, 3 * K), params, "kp", len(cfg.head_widths), cache, grads)
    if "kp.skip" in params:
        grads["kp.skip"] = cache["a_flat"].T @ dkp.reshape(B, 3 * K)
    if "kp.gate" in params:
        grads["kp.gate"] = np.einsum("bkc,bkc->k", cache["a_flat"].reshape(B, K, 3), dkp)
    dfg += dh[:, : dfg.shape[1]]
    _encode_backward(dfg, params, cache, grads)
    for name, g in grads.items():
        _check(f"gradient of {name}", g)
    return grads


def param_count(params) -> int:
    return int(sum(v.size for v in params.values()))

