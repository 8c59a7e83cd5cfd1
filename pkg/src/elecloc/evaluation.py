"""Test-set metrics and statistics.

Standard deviations are sample (n-1) deviations; quartiles use linear
interpolation between order statistics (the "type 7" convention).
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special, stats

from . import io
from .geometry import ELECTRODE_NAMES, chamfer, euclidean_error
from .synth import Dataset, Subject

log = logging.getLogger(__name__)

RESULTS_HEADER = ["id", "mean_ED", "CD"] + [f"ED_{n}" for n in ELECTRODE_NAMES] + ["scale"]
ELECTRODES_HEADER = ["electrode", "n", "mean", "sd", "min", "q1", "median", "q3", "max"]
CORRELATIONS_HEADER = ["x", "y", "n", "pearson_r", "spearman_rho", "slope", "intercept", "r2"]


class UndefinedCorrelationError(ValueError):
    pass


@dataclass
class SubjectResult:
    id: str
    ed: np.ndarray  # (10,) cm
    mean_ed: float
    cd: float = float("nan")  # cm; nan when no dense prediction exists
    scale: float = float("nan")
    dtw: dict = field(default_factory=dict)


@dataclass
class CorrelationReport:
    n: int
    pearson_r: float
    spearman_rho: float
    slope: float
    intercept: float
    r2: float


def score_subject(subject: Subject, electrodes, dense=None) -> SubjectResult:
    per, mean = euclidean_error(electrodes, subject.electrodes)
    cd = chamfer(dense, subject.dense) if dense is not None else float("nan")
    scale = subject.spec.scale if subject.spec is not None else float("nan")
    return SubjectResult(subject.id, per, mean, cd, scale)


def _sd(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0


def summarize(results: list[SubjectResult]) -> dict:
    """Mean and sample sd of subject-mean ED and CD."""
    if not results:
        raise ValueError("no results to summarize")
    ed = np.array([r.mean_ed for r in results])
    cd = np.array([r.cd for r in results])
    has_cd = bool(np.all(np.isfinite(cd)))
    return {
        "n": len(results),
        "ED_mean": float(ed.mean()),
        "ED_sd": _sd(ed),
        "CD_mean": float(cd.mean()) if has_cd else float("nan"),
        "CD_sd": _sd(cd) if has_cd else float("nan"),
    }


def evaluate_predictions(ds: Dataset, split: str, predictions: dict) -> tuple[list[SubjectResult], list[str]]:
    """Score ``{subject id: (electrodes, dense_or_None)}``; subjects without predictions or ground truth are skipped."""
    results, skipped = [], []
    for sid in ds.ids(split):
        if sid not in predictions:
            skipped.append(f"{sid}: no prediction")
            continue
        try:
            subj = ds.subject(sid)
        except (OSError, ValueError) as exc:
            skipped.append(f"{sid}: missing ground truth ({exc})")
            continue
        el, dense = predictions[sid]
        results.append(score_subject(subj, el, dense))
    for s in skipped:
        log.warning("skipped %s", s)
    return results, skipped


def evaluate_checkpoint(path, ds: Dataset, split: str = "test", seed: int | None = None) -> list[SubjectResult]:
    """Run a checkpoint on every subject of ``split`` and score it."""
    from .training import eval_cloud, load_model, predict

    params, mcfg, tcfg = load_model(path)
    seed = tcfg.seed if seed is None else seed
    ids = ds.ids(split)
    if not ids:
        raise ValueError(f"split {split!r} is empty")
    subjects = [ds.subject(s) for s in ids]
    preds = predict(params, mcfg, [eval_cloud(s, seed, mcfg.n_in) for s in subjects])
    return [score_subject(s, p.electrodes, p.dense) for s, p in zip(subjects, preds)]


def read_prediction_dir(pred_dir) -> dict:
    """Load ``<dir>/<id>/electrodes.txt`` (+ optional ``dense.xyz``) as written by ``infer``."""
    out = {}
    root = Path(pred_dir)
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        f = d / "electrodes.txt"
        if not f.exists():
            continue
        dense = io.read_xyz(d / "dense.xyz")[0] if (d / "dense.xyz").exists() else None
        out[d.name] = (io.read_electrodes(f), dense)
    return out


def quartiles(x) -> tuple[float, float, float, float, float]:
    q = np.percentile(np.asarray(x, dtype=float), [0, 25, 50, 75, 100], method="linear")
    return tuple(float(v) for v in q)


def per_electrode_stats(results: list[SubjectResult]) -> list[dict]:
    """Five-number summary, mean and sample sd for each electrode, canonical order."""
    ed = np.stack([r.ed for r in results])
    rows = []
    for j, name in enumerate(ELECTRODE_NAMES):
        col = ed[:, j]
        mn, q1, med, q3, mx = quartiles(col)
        rows.append({"electrode": name, "n": len(col), "mean": float(col.mean()), "sd": _sd(col),
                     "min": mn, "q1": q1, "median": med, "q3": q3, "max": mx})
    return rows


def correlate(x, y) -> CorrelationReport:
    """Pearson, Spearman (average ranks), least-squares line and r^2."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and of equal length")
    if len(x) < 3:
        raise ValueError("correlation needs at least 3 pairs")
    if np.all(x == x[0]):
        raise UndefinedCorrelationError("x is constant; correlation is undefined")

    def pearson(a, b):
        da, db = a - a.mean(), b - b.mean()
        den = math.sqrt(float(da @ da) * float(db @ db))
        if den == 0.0:
            raise UndefinedCorrelationError("zero variance; correlation is undefined")
        return float(np.clip((da @ db) / den, -1.0, 1.0))

    r = pearson(x, y)
    rho = pearson(stats.rankdata(x, method="average"), stats.rankdata(y, method="average"))
    dx = x - x.mean()
    slope = float(dx @ (y - y.mean()) / (dx @ dx))
    intercept = float(y.mean() - slope * x.mean())
    fitted = slope * x + intercept
    r2 = pearson(fitted, y) ** 2 if np.ptp(fitted) > 0 else 0.0
    return CorrelationReport(len(x), r, rho, slope, intercept, float(r2))


def welch(a, b) -> tuple[float, float, float]:
    """Welch's t statistic, Welch-Satterthwaite degrees of freedom and two-sided p."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each group needs at least 2 values")
    va, vb = np.var(a, ddof=1) / len(a), np.var(b, ddof=1) / len(b)
    diff = float(a.mean() - b.mean())
    se2 = va + vb
    if se2 == 0.0:
        return (0.0 if diff == 0.0 else math.copysign(math.inf, diff)), float("nan"), (1.0 if diff == 0.0 else 0.0)
    t = diff / math.sqrt(se2)
    df = se2**2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    # two-sided tail of Student's t via the regularized incomplete beta function
    p = float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))
    return float(t), float(df), min(1.0, p)


def significance(a, b) -> float:
    return welch(a, b)[2]


def _fmt(v) -> str:
    return "nan" if isinstance(v, float) and math.isnan(v) else (f"{v:.6f}" if isinstance(v, float) else str(v))


def write_results_csv(path, results: list[SubjectResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_HEADER)
        for r in results:
            w.writerow([r.id, _fmt(r.mean_ed), _fmt(r.cd)] + [_fmt(float(v)) for v in r.ed] + [_fmt(r.scale)])


def read_results_csv(path) -> list[SubjectResult]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ed = np.array([float(row[f"ED_{n}"]) for n in ELECTRODE_NAMES])
            out.append(SubjectResult(row["id"], ed, float(row["mean_ED"]), float(row["CD"]), float(row.get("scale", "nan"))))
    return out


def write_electrodes_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ELECTRODES_HEADER)
        for r in rows:
            w.writerow([r[k] if k in ("electrode", "n") else _fmt(r[k]) for k in ELECTRODES_HEADER])


def correlation_table(results: list[SubjectResult]) -> list[tuple[str, str, CorrelationReport | None]]:
    """Per-subject correlations written to ``correlations.csv``: scale vs ED, scale vs CD, CD vs ED."""
    cols = {
        "scale": np.array([r.scale for r in results]),
        "mean_ED": np.array([r.mean_ed for r in results]),
        "CD": np.array([r.cd for r in results]),
    }
    out = []
    for xn, yn in (("scale", "mean_ED"), ("scale", "CD"), ("CD", "mean_ED")):
        x, y = cols[xn], cols[yn]
        try:
            if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
                raise UndefinedCorrelationError("missing values")
            rep = correlate(x, y)
        except (UndefinedCorrelationError, ValueError):
            rep = None
        out.append((xn, yn, rep))
    return out


def write_correlations_csv(path, table) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CORRELATIONS_HEADER)
        for xn, yn, rep in table:
            if rep is None:
                w.writerow([xn, yn, 0] + ["nan"] * 5)
            else:
                w.writerow([xn, yn, rep.n] + [_fmt(v) for v in (rep.pearson_r, rep.spearman_rho, rep.slope, rep.intercept, rep.r2)])


def write_report(out_dir, results: list[SubjectResult]) -> dict:
    """Write results.csv, electrodes.csv, correlations.csv and return the aggregate."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_results_csv(out_dir / "results.csv", results)
    write_electrodes_csv(out_dir / "electrodes.csv", per_electrode_stats(results))
    write_correlations_csv(out_dir / "correlations.csv", correlation_table(results))
    return summarize(results)
