"""ASCII file formats shared by the dataset, CLI and evaluation code."""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .geometry import ELECTRODE_NAMES, Contour, ContourSet

FLOAT_FMT = "%.6f"


class DataFormatError(ValueError):
    """Raised when an input file does not parse."""


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt_row(row) -> str:
    return " ".join(FLOAT_FMT % v for v in row)


def write_xyz(path, points, features=None, comments=()) -> None:
    """One ``x y z [f1 ... fW]`` row per point; ``#`` lines are comments."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    lines = [f"# {c}" for c in comments]
    if features is not None:
        feats = np.asarray(features, dtype=float).reshape(len(pts), -1)
        lines.append(f"# features={feats.shape[1]}")
        rows = np.hstack([pts, feats])
    else:
        rows = pts
    lines.extend(_fmt_row(r) for r in rows)
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_xyz(path) -> tuple[np.ndarray, np.ndarray | None]:
    width = 0
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("features="):
                    width = int(body.split("=", 1)[1])
                continue
            vals = line.split()
            if len(vals) != 3 + width:
                raise DataFormatError(f"{path}:{lineno}: expected {3 + width} columns, got {len(vals)}")
            rows.append([float(v) for v in vals])
    arr = np.array(rows, dtype=float).reshape(-1, 3 + width)
    return arr[:, :3], (arr[:, 3:] if width else None)


def write_electrodes(path, electrodes, comments=()) -> None:
    e = np.asarray(electrodes, dtype=float)
    if e.shape != (len(ELECTRODE_NAMES), 3):
        raise ValueError(f"electrode array must be (10, 3), got {e.shape}")
    lines = [f"# {c}" for c in comments]
    lines += [f"{name} {_fmt_row(p)}" for name, p in zip(ELECTRODE_NAMES, e)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_electrodes(path) -> np.ndarray:
    found = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4 or parts[0] not in ELECTRODE_NAMES:
                raise DataFormatError(f"{path}: bad electrode row {line!r}")
            found[parts[0]] = [float(v) for v in parts[1:]]
    missing = [n for n in ELECTRODE_NAMES if n not in found]
    if missing:
        raise DataFormatError(f"{path}: missing electrodes {missing}")
    return np.array([found[n] for n in ELECTRODE_NAMES])


def write_contours(path, contours: ContourSet, comments=()) -> None:
    """Key-value blocks, one per contour, each followed by its ``u v`` rows."""
    lines = [f"# {c}" for c in comments]
    lines.append(f"n_contours {len(contours)}")
    for i, c in enumerate(contours.contours):
        lines.append(f"contour {i}")
        lines.append(f"view {c.view}")
        lines.append(f"closed {int(c.closed)}")
        lines.append("origin " + " ".join("%.12f" % v for v in c.origin))
        lines.append("axis_u " + " ".join("%.12f" % v for v in c.axis_u))
        lines.append("axis_v " + " ".join("%.12f" % v for v in c.axis_v))
        lines.append(f"n_points {len(c.points2d)}")
        lines.extend(" ".join("%.9f" % v for v in p) for p in c.points2d)
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_contours(path) -> ContourSet:
    with open(path) as fh:
        tokens = [ln.strip() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    pos = 0

    def take(key):
        nonlocal pos
        if pos >= len(tokens):
            raise DataFormatError(f"{path}: unexpected end of file, wanted {key!r}")
        parts = tokens[pos].split()
        if parts[0] != key:
            raise DataFormatError(f"{path}: expected {key!r}, got {tokens[pos]!r}")
        pos += 1
        return parts[1:]

    n = int(take("n_contours")[0])
    out = []
    for _ in range(n):
        take("contour")
        view = take("view")[0]
        closed = bool(int(take("closed")[0]))
        origin = [float(v) for v in take("origin")]
        au = [float(v) for v in take("axis_u")]
        av = [float(v) for v in take("axis_v")]
        m = int(take("n_points")[0])
        pts = np.array([[float(v) for v in tokens[pos + j].split()] for j in range(m)])
        pos += m
        out.append(Contour(origin, au, av, pts, view=view, closed=closed))
    return ContourSet(out)


def read_kv(path) -> dict[str, str]:
    """Flat ``key = value`` (or ``key value``) text; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" in line:
                key, val = (s.strip() for s in line.split("=", 1))
            else:
                parts = line.split(None, 1)
                if len(parts) != 2:
                    raise DataFormatError(f"{path}:{lineno}: cannot parse {line!r}")
                key, val = parts
            out[key] = val
    return out


def write_kv(path, mapping: dict) -> None:
    atomic_write_text(path, "".join(f"{k} = {v}\n" for k, v in mapping.items()))
