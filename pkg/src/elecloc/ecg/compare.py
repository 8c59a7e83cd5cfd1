"""Trace comparison: DTW, Pearson, QRS duration and R/S ratio."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from ..geometry import SizeError
from .signals import LEADS, EcgTrace


@dataclass
class DtwResult:
    distance: float
    path_length: int
    flags: list = field(default_factory=list)


def znorm(x) -> tuple[np.ndarray, bool]:
    """Zero-mean unit-sd copy and whether it was normalized (zero-variance series are returned unchanged)."""
    x = np.asarray(x, dtype=float)
    sd = float(np.std(x))
    if sd == 0.0 or not math.isfinite(sd):
        return x.copy(), False
    return (x - x.mean()) / sd, True


@numba.njit(cache=True)
def _dtw_table(a, b):
    n, m = len(a), len(b)
    D = np.full((n + 1, m + 1), np.inf)
    L = np.zeros((n + 1, m + 1), dtype=np.int64)
    D[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            # predecessor with the lowest (cost, path length); symmetric under swapping a and b
            bc, bl = D[i - 1, j - 1], L[i - 1, j - 1]
            c, l = D[i - 1, j], L[i - 1, j]
            if c < bc or (c == bc and l < bl):
                bc, bl = c, l
            c, l = D[i, j - 1], L[i, j - 1]
            if c < bc or (c == bc and l < bl):
                bc, bl = c, l
            D[i, j] = bc + abs(a[i - 1] - b[j - 1])
            L[i, j] = bl + 1
    return D, L


def dtw(a, b, normalize: bool = True) -> DtwResult:
    """Classic DTW with |a_i - b_j| cost and symmetric steps, divided by the warping-path length.

    Each series is z-normalized first; a zero-variance series is left as is and flagged.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if len(a) == 0 or len(b) == 0:
        raise SizeError("DTW needs nonempty series")
    flags = []
    if normalize:
        a, ok_a = znorm(a)
        b, ok_b = znorm(b)
        if not ok_a:
            flags.append("first series has zero variance; normalization skipped")
        if not ok_b:
            flags.append("second series has zero variance; normalization skipped")
    D, L = _dtw_table(a, b)
    n, m = len(a), len(b)
    return DtwResult(float(D[n, m] / L[n, m]), int(L[n, m]), flags)


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    da, db = a - a.mean(), b - b.mean()
    den = math.sqrt(float(da @ da) * float(db @ db))
    if den == 0.0:
        return float("nan")
    return float(np.clip((da @ db) / den, -1.0, 1.0))


def qrs_window(trace: EcgTrace, frac: float = 0.05, leads=LEADS) -> tuple[float, float]:
    """First and last time (ms) at which any lead's |derivative| exceeds ``frac`` of that lead's maximum."""
    t = trace.times
    first, last = math.inf, -math.inf
    for name in leads:
        x = trace.lead(name)
        if len(x) < 2:
            continue
        d = np.abs(np.gradient(x, trace.dt))
        peak = d.max()
        if peak <= 0:
            continue
        idx = np.flatnonzero(d > frac * peak)
        first = min(first, t[idx[0]])
        last = max(last, t[idx[-1]])
    if not math.isfinite(first):
        return 0.0, 0.0
    return float(first), float(last)


def qrs_duration(trace: EcgTrace, frac: float = 0.05) -> float:
    a, b = qrs_window(trace, frac)
    return b - a


RS_MIN_FRAC = 0.01


def rs_ratio(x) -> float:
    """Max positive deflection over max negative deflection magnitude.

    nan when there is no S wave, i.e. the negative deflection is below
    ``RS_MIN_FRAC`` of the peak-to-peak amplitude (round-off would otherwise
    produce arbitrarily large ratios).
    """
    x = np.asarray(x, dtype=float)
    r = max(float(x.max()), 0.0)
    s = max(float(-x.min()), 0.0)
    if s == 0.0 or s <= RS_MIN_FRAC * (r + s):
        return float("nan")
    return r / s


@dataclass
class EcgComparison:
    dtw: dict
    pearson: dict
    qrs_pred: float
    qrs_gt: float
    rs_diff: dict

    @property
    def mean_dtw(self) -> float:
        return float(np.mean(list(self.dtw.values())))

    @property
    def mean_pearson(self) -> float:
        v = [x for x in self.pearson.values() if math.isfinite(x)]
        return float(np.mean(v)) if v else float("nan")

    @property
    def qrs_diff(self) -> float:
        return self.qrs_pred - self.qrs_gt

    @property
    def mean_rs_diff(self) -> float:
        v = [x for x in self.rs_diff.values() if math.isfinite(x)]
        return float(np.mean(v)) if v else float("nan")


def compare_ecgs(pred: EcgTrace, gt: EcgTrace, frac: float = 0.05, leads=LEADS) -> EcgComparison:
    if pred.dt != gt.dt:
        raise SizeError("traces must share a sample period")
    missing = [n for n in leads if n not in pred.leads or n not in gt.leads]
    if missing:
        raise SizeError(f"lead sets differ: {missing}")
    d, p, rs = {}, {}, {}
    for n in leads:
        a, b = pred.lead(n), gt.lead(n)
        d[n] = dtw(a, b).distance
        p[n] = pearson(a, b)
        rs[n] = abs(rs_ratio(a) - rs_ratio(b))
    return EcgComparison(d, p, qrs_duration(pred, frac), qrs_duration(gt, frac), rs)
