"""Electrode, keypoint-topology and reconstruction losses with gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import nearest_pairs
from .network import Outputs


class ConfigurationError(ValueError):
    pass


@dataclass
class LossWeights:
    beta: float = 5.0
    lambda_keypoint: float = 0.05
    lambda_rec: float = 0.05
    squared_cd: bool = True

    def __post_init__(self):
        if min(self.beta, self.lambda_keypoint, self.lambda_rec) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class GroundTruth:
    """Batched targets in the same normalized frame as the inputs."""

    electrodes: np.ndarray  # (B, 10, 3)
    topology: np.ndarray | None = None  # (B, T, 3)
    coarse: np.ndarray | None = None
    dense: np.ndarray | None = None


@dataclass
class LossTerms:
    total: float
    electrode: float
    keypoint: float
    coarse: float
    dense: float

    def as_row(self) -> list[float]:
        return [self.total, self.electrode, self.keypoint, self.coarse, self.dense]


def chamfer_with_grad(a, b, squared: bool = True) -> tuple[float, np.ndarray]:
    """Chamfer value and its gradient w.r.t. ``a`` (nearest pairs held fixed)."""
    d_ab, i_ab, d_ba, i_ba = nearest_pairs(a, b)
    na, nb = len(a), len(b)
    diff_ab = a - b[i_ab]
    diff_ba = a[i_ba] - b
    grad = np.zeros_like(a)
    if squared:
        value = float(np.mean(d_ab**2) + np.mean(d_ba**2))
        grad += 2.0 * diff_ab / na
        np.add.at(grad, i_ba, 2.0 * diff_ba / nb)
    else:
        value = float(np.mean(d_ab) + np.mean(d_ba))
        with np.errstate(invalid="ignore", divide="ignore"):
            u_ab = np.where(d_ab[:, None] > 0, diff_ab / d_ab[:, None], 0.0)
            u_ba = np.where(d_ba[:, None] > 0, diff_ba / d_ba[:, None], 0.0)
        grad += u_ab / na
        np.add.at(grad, i_ba, u_ba / nb)
    return value, grad


def loss_total(out: Outputs, gt: GroundTruth, w: LossWeights) -> tuple[LossTerms, dict[str, np.ndarray]]:
    """Batch-mean loss terms and gradients w.r.t. keypoints, coarse and dense outputs."""
    kp = out.keypoints
    B = kp.shape[0]
    ne = gt.electrodes.shape[1]
    if ne > kp.shape[1]:
        raise ConfigurationError(f"{ne} electrode targets but only {kp.shape[1]} keypoints")
    need_topo = w.lambda_keypoint > 0
    need_rec = w.lambda_rec > 0
    if need_topo and gt.topology is None:
        raise ConfigurationError("keypoint loss enabled but no topology target given")
    if need_rec and (gt.coarse is None or gt.dense is None):
        raise ConfigurationError("reconstruction loss enabled but coarse/dense targets missing")
    if need_rec and (out.coarse is None or out.dense is None):
        raise ConfigurationError("reconstruction loss enabled but the model has no reconstruction branch")

    dkp = np.zeros_like(kp)
    dcoarse = np.zeros_like(out.coarse) if out.coarse is not None else None
    ddense = np.zeros_like(out.dense) if out.dense is not None else None
    sums = np.zeros(4)
    have = [True, gt.topology is not None, out.coarse is not None and gt.coarse is not None, out.dense is not None and gt.dense is not None]
    for b in range(B):
        diff = kp[b, :ne] - gt.electrodes[b]
        sums[0] += np.mean(np.abs(diff))
        dkp[b, :ne] += np.sign(diff) / (diff.size * B)
        if have[1]:
            v, g = chamfer_with_grad(kp[b], gt.topology[b], w.squared_cd)
            sums[1] += v
            dkp[b] += w.lambda_keypoint * g / B
        if have[2]:
            v, g = chamfer_with_grad(out.coarse[b], gt.coarse[b], w.squared_cd)
            sums[2] += v
            dcoarse[b] = w.lambda_rec * g / B
        if have[3]:
            v, g = chamfer_with_grad(out.dense[b], gt.dense[b], w.squared_cd)
            sums[3] += v
            ddense[b] = w.lambda_rec * w.beta * g / B
    means = [s / B if h else float("nan") for s, h in zip(sums, have)]
    total = means[0]
    if need_topo:
        total += w.lambda_keypoint * means[1]
    if need_rec:
        total += w.lambda_rec * (means[2] + w.beta * means[3])
    terms = LossTerms(float(total), *(float(m) for m in means))
    return terms, {"keypoints": dkp, "coarse": dcoarse, "dense": ddense}
