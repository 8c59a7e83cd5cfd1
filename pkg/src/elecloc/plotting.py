"""Deterministic SVG figures: per-electrode boxplot, regression scatter and ECG overlay.

Figures use 72 dpi so display coordinates equal SVG user units, a fixed
hash salt and no date stamp, so identical inputs give identical bytes.
Glyphs that tests or downstream tools need to find carry SVG ids.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import ELECTRODE_NAMES  # noqa: E402

PLOT_KINDS = ("boxplot", "scatter", "ecg-overlay")
DPI = 72

_RC = {
    "svg.hashsalt": "elecloc",
    "svg.fonttype": "none",
    "path.simplify": False,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, out) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="svg", metadata={"Date": None, "Creator": "elecloc"})
    plt.close(fig)
    return out


def plot_boxplot(per_subject_ed: np.ndarray, out, title: str = "Electrode localization error") -> Path:
    """One box per electrode in canonical order; ``per_subject_ed`` is (n_subjects, 10) cm."""
    ed = np.asarray(per_subject_ed, dtype=float)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(7, 3.5), dpi=DPI)
        # whis=(0, 100): whiskers span the full range, matching the min/max columns of electrodes.csv
        bp = ax.boxplot([ed[:, j] for j in range(ed.shape[1])], whis=(0, 100), patch_artist=True, widths=0.6)
        for name, box in zip(ELECTRODE_NAMES, bp["boxes"]):
            box.set_gid(f"box-{name}")
            box.set_facecolor("#9ecae1")
            box.set_edgecolor("#08519c")
        for med in bp["medians"]:
            med.set_color("#08519c")
        ax.set_xticks(range(1, ed.shape[1] + 1), ELECTRODE_NAMES[: ed.shape[1]])
        ax.set_ylabel("Euclidean distance (cm)")
        ax.set_title(title)
        fig.tight_layout()
        return _save(fig, out)


def plot_scatter(x, y, out, xlabel: str = "x", ylabel: str = "y", title: str = "") -> tuple[Path, dict]:
    """Scatter plus least-squares line (SVG id ``regression-line``).

    Also returns the data-to-SVG scale factors so the line geometry can be checked.
    """
    from .evaluation import UndefinedCorrelationError, correlate

    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    try:
        rep = correlate(x, y)
        slope, intercept = rep.slope, rep.intercept
        default_title = f"r = {rep.pearson_r:.3f}, rho = {rep.spearman_rho:.3f}, r2 = {rep.r2:.3f}"
    except UndefinedCorrelationError:
        # constant y: the least-squares line is still defined (slope 0), r is not
        slope, intercept = 0.0, float(y.mean())
        default_title = "r = n/a (zero variance)"
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 4), dpi=DPI)
        pts = ax.scatter(x, y, s=14, color="#3182bd")
        pts.set_gid("points")
        xs = np.array([x.min(), x.max()])
        (line,) = ax.plot(xs, slope * xs + intercept, color="#de2d26", lw=1.5)
        line.set_gid("regression-line")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title or default_title)
        fig.tight_layout()
        fig.canvas.draw()
        t = ax.transData
        o = t.transform((0.0, 0.0))
        sx = t.transform((1.0, 0.0))[0] - o[0]
        sy = t.transform((0.0, 1.0))[1] - o[1]
        return _save(fig, out), {"sx": float(sx), "sy": float(sy), "slope": slope, "intercept": intercept}


def plot_ecg_overlay(pred, gt, out, labels=("predicted electrodes", "ground-truth electrodes")) -> Path:
    """Eight panels (I, II, V1..V6); polylines carry ids ``gt-<lead>`` and ``pred-<lead>``."""
    from .ecg.signals import LEADS

    with plt.rc_context(_RC):
        fig, axes = plt.subplots(2, 4, figsize=(10, 4.5), dpi=DPI, sharex=True)
        for ax, name in zip(axes.ravel(), LEADS):
            (lg,) = ax.plot(gt.times, gt.lead(name), color="#252525", lw=1.2, label=labels[1])
            (lp,) = ax.plot(pred.times, pred.lead(name), color="#e6550d", lw=1.0, ls="--", label=labels[0])
            lg.set_gid(f"gt-{name}")
            lp.set_gid(f"pred-{name}")
            ax.set_title(name)
            ax.tick_params(labelsize=7)
        for ax in axes[1]:
            ax.set_xlabel("t (ms)")
        axes[0, 0].legend(fontsize=7, frameon=False)
        fig.tight_layout()
        return _save(fig, out)
