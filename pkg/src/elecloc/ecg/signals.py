"""Transmembrane template, pseudo-ECG and 12-lead derivation.

The pseudo-ECG is linear in Vm: phi(e, t) = sum_x grad Vm(x, t) . grad(1/|x - e|) h^3.
Gradients use central differences over the myocardium; a neighbour outside
the mask takes the centre voxel's value (zero-flux boundary). Collecting the
linear map once per electrode gives a weight vector w with phi(t) = Vm(t) . w.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ..geometry import SizeError
from .phantom import HeartPhantom

LEADS = ("I", "II", "V1", "V2", "V3", "V4", "V5", "V6")
EXTRA_LEADS = ("III", "aVR", "aVL", "aVF")
CHANNELS = ("LA", "RA", "LL", "V1", "V2", "V3", "V4", "V5", "V6")  # RL is the ground


class ElectrodeInsideError(ValueError):
    pass


def smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def transmembrane(tau, t, upstroke_ms: float = 10.0) -> np.ndarray:
    """Vm rising 0 -> 1 by a cubic smoothstep over [tau, tau + upstroke]; 0 where tau is infinite."""
    if upstroke_ms <= 0:
        raise ValueError("upstroke_ms must be positive")
    tau = np.asarray(tau, dtype=float)
    with np.errstate(invalid="ignore"):
        s = (float(t) - tau) / upstroke_ms
    s = np.where(np.isfinite(tau), s, 0.0)
    return smoothstep(s)


def _gradient_operator_weights(mask: np.ndarray, g: np.ndarray, h: float) -> np.ndarray:
    """Adjoint of the masked central-difference gradient applied to the field ``g`` (n_mask-shaped grid, 3)."""
    w = np.zeros(mask.shape)
    gm = np.where(mask[..., None], g, 0.0)
    for axis in range(3):
        comp = gm[..., axis] / (2.0 * h)
        # D Vm(x) = (Vm(x+) - Vm(x-)) / 2h with out-of-mask neighbours replaced by Vm(x)
        fwd_in = np.zeros_like(mask)
        bwd_in = np.zeros_like(mask)
        sl_a = [slice(None)] * 3
        sl_b = [slice(None)] * 3
        sl_a[axis] = slice(0, -1)
        sl_b[axis] = slice(1, None)
        fwd_in[tuple(sl_a)] = mask[tuple(sl_b)]
        bwd_in[tuple(sl_b)] = mask[tuple(sl_a)]
        fwd_in &= mask
        bwd_in &= mask
        # contribution of neighbour values
        tmp = np.zeros(mask.shape)
        tmp[tuple(sl_b)] += np.where(fwd_in, comp, 0.0)[tuple(sl_a)]
        tmp[tuple(sl_a)] -= np.where(bwd_in, comp, 0.0)[tuple(sl_b)]
        # centre-value substitution for missing neighbours: +Vm(x) when x+ missing, -Vm(x) when x- missing
        tmp += np.where(mask & ~fwd_in, comp, 0.0)
        tmp -= np.where(mask & ~bwd_in, comp, 0.0)
        w += tmp
    return w


def lead_field(phantom: HeartPhantom, electrode) -> np.ndarray:
    """Weights ``w`` over mask voxels (flat, mask order) with phi(t) = Vm[mask](t) @ w."""
    e = phantom.to_grid(np.asarray(electrode, dtype=float).reshape(3))
    vox = phantom.voxel_of(np.asarray(electrode, dtype=float).reshape(3))
    if vox is not None and phantom.mask[vox]:
        raise ElectrodeInsideError("electrode lies inside the myocardium")
    x = phantom.grid_coords()
    d = x - e
    r = np.linalg.norm(d, axis=-1)
    if np.any(r[phantom.mask] == 0.0):
        raise ElectrodeInsideError("electrode coincides with a myocardial voxel centre")
    with np.errstate(divide="ignore", invalid="ignore"):
        g = -d / (r**3)[..., None]  # grad of 1/|x - e|
    g[~phantom.mask] = 0.0
    w = _gradient_operator_weights(phantom.mask, g, phantom.spacing) * phantom.spacing**3
    return w[phantom.mask]


def vm_matrix(tau, mask, times, upstroke_ms: float = 10.0) -> np.ndarray:
    """(T, n_mask) transmembrane potentials."""
    if upstroke_ms <= 0:
        raise ValueError("upstroke_ms must be positive")
    tm = np.asarray(tau, dtype=float)[mask][None, :]
    t = np.asarray(times, dtype=float)[:, None]
    s = np.where(np.isfinite(tm), (t - np.where(np.isfinite(tm), tm, 0.0)) / upstroke_ms, 0.0)
    return smoothstep(s)


def pseudo_ecg(phantom: HeartPhantom, tau, electrode, times, upstroke_ms: float = 10.0) -> np.ndarray:
    """Single-channel potential series at ``electrode`` (world cm)."""
    w = lead_field(phantom, electrode)
    return vm_matrix(tau, phantom.mask, times, upstroke_ms) @ w


@dataclass
class EcgTrace:
    dt: float  # ms
    leads: dict  # name -> (T,) series, ordered as LEADS
    t0: float = 0.0
    flags: list = field(default_factory=list)

    def __post_init__(self):
        lengths = {len(v) for v in self.leads.values()}
        if len(lengths) > 1:
            raise SizeError("all leads must have equal length")
        for k, v in self.leads.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"lead {k} contains non-finite samples")

    @property
    def times(self) -> np.ndarray:
        n = len(next(iter(self.leads.values())))
        return self.t0 + self.dt * np.arange(n)

    def lead(self, name: str) -> np.ndarray:
        if name in self.leads:
            return self.leads[name]
        I, II = self.leads["I"], self.leads["II"]
        if name == "III":
            return II - I
        if name == "aVR":
            return -(I + II) / 2.0
        if name == "aVL":
            return I - II / 2.0
        if name == "aVF":
            return II - I / 2.0
        raise KeyError(name)

    def matrix(self, names=LEADS) -> np.ndarray:
        return np.stack([self.lead(n) for n in names])


def derive_leads(potentials, dt: float = 1.0, t0: float = 0.0) -> EcgTrace:
    """Leads I, II and V1..V6 (Wilson reference) from 9 channels LA, RA, LL, V1..V6.

    ``potentials`` is a mapping from channel name or a (9, T) array in CHANNELS order.
    """
    if isinstance(potentials, dict):
        missing = [c for c in CHANNELS if c not in potentials]
        if missing:
            raise SizeError(f"missing channels {missing}")
        chans = [np.asarray(potentials[c], dtype=float) for c in CHANNELS]
    else:
        arr = potentials if isinstance(potentials, list) else np.asarray(potentials)
        if len(arr) != len(CHANNELS):
            raise SizeError(f"expected {len(CHANNELS)} channels, got {len(arr)}")
        chans = [np.asarray(c, dtype=float) for c in arr]
    if len({len(c) for c in chans}) != 1:
        raise SizeError("channel lengths differ")
    p = dict(zip(CHANNELS, chans))
    wct = (p["RA"] + p["LA"] + p["LL"]) / 3.0
    leads = {"I": p["LA"] - p["RA"], "II": p["LL"] - p["RA"]}
    for v in ("V1", "V2", "V3", "V4", "V5", "V6"):
        leads[v] = p[v] - wct
    return EcgTrace(dt, leads, t0)


def write_ecg_csv(path, trace: EcgTrace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_ms"] + list(LEADS))
        m = trace.matrix()
        for i, t in enumerate(trace.times):
            w.writerow([f"{t:.3f}"] + [f"{v:.9e}" for v in m[:, i]])


def read_ecg_csv(path) -> EcgTrace:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    if header[:1] != ["t_ms"] or tuple(header[1:]) != LEADS:
        raise ValueError(f"{path}: unexpected ECG header {header}")
    data = np.array([[float(x) for x in r] for r in rows[1:]])
    t = data[:, 0]
    dt = float(t[1] - t[0]) if len(t) > 1 else 1.0
    return EcgTrace(dt, {n: data[:, i + 1] for i, n in enumerate(LEADS)}, float(t[0]) if len(t) else 0.0)
