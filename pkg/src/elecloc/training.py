"""Deterministic training loop: Adam with decoupled weight decay, step lr schedule,
contour-resampling augmentation, checkpoints and the N_rr / N_kp sweeps.

All randomness derives from ``(seed, purpose, index)`` seed sequences, so an
iteration's batch depends only on the iteration counter. That makes resume
from any saved iteration bit-exact.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import io
from .geometry import chamfer, euclidean_error, normalize_cloud, resample_contours
from .model import checkpoint as ckpt
from .model.losses import GroundTruth, LossWeights, loss_total
from .model.network import ModelConfig, NumericError, backward, forward, init_params
from .synth import Dataset, Subject

log = logging.getLogger(__name__)

METRICS_HEADER = ["iter", "epoch", "lr", "L_total", "L_electrode", "L_keypoint", "L_coarse", "L_dense"]
VAL_HEADER = ["epoch", "iter", "val_ED", "val_CD"]

_AUG_TAG = 0xA11
_SHUFFLE_TAG = 0x5F1
_EVAL_TAG = 0xE7A


class ConfigKeyError(KeyError):
    """Unknown or malformed configuration key."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class TrainingAborted(NumericError):
    """Training hit a non-finite loss or gradient; the last good state was saved."""


@dataclass
class TrainConfig:
    batch_size: int = 6
    initial_lr: float = 1e-4
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 9000
    weight_decay: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 120
    n_rr: int = 30
    n_kp: int = 64
    beta: float = 5.0
    lambda_keypoint: float = 0.05
    lambda_rec: float = 0.05
    squared_cd: bool = True
    seed: int = 0
    # model architecture
    n_in: int = 2048
    n_coarse: int = 1024
    n_dense: int = 4096
    enc_widths: tuple = (128, 256, 512, 1024)
    head_widths: tuple = (256, 256)
    coarse_widths: tuple = (1024, 1024)
    refine_widths: tuple = (128, 128)
    head: str = "keypoint"
    kp_anchor_input: bool = False
    kp_skip: str = "gate"
    use_skeleton: bool = True
    use_recon: bool = True
    skeleton_k: int = 3
    skeleton_alpha: float = 0.5
    skeleton_density: int = 8
    grid_size: int = 2
    grid_scale: float = 0.05
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("enc_widths", "head_widths", "coarse_widths", "refine_widths"):
            setattr(self, name, tuple(int(w) for w in getattr(self, name)))
        positive = ("batch_size", "initial_lr", "lr_decay_factor", "lr_decay_every", "epochs", "n_rr", "n_kp", "n_in")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        kw = {k: v for k, v in self.to_dict().items() if k in names}
        kw["n_kp"] = self.n_kp
        return ModelConfig(**kw)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.beta, self.lambda_keypoint, self.lambda_rec, self.squared_cd)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def lr_at(self, iteration: int) -> float:
        """Learning rate used by the step with 0-based index ``iteration``."""
        return self.initial_lr * self.lr_decay_factor ** (iteration // self.lr_decay_every)


TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))


def _parse_value(default, text: str, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigKeyError(f"bad value for {key}: {text!r}") from None
    return text


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def config_from_mapping(kv: dict, base: TrainConfig | None = None) -> TrainConfig:
    """Apply string (or typed) overrides; unknown keys are hard errors."""
    base = base or TrainConfig()
    defaults = base.to_dict()
    out = {}
    for k, v in kv.items():
        if k not in defaults:
            raise ConfigKeyError(f"unknown config key {k!r}")
        out[k] = _parse_value(defaults[k], v, k) if isinstance(v, str) else v
    return replace(base, **out)


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    return config_from_mapping(io.read_kv(path), base)


def save_config(path, cfg: TrainConfig) -> None:
    io.write_kv(path, {k: format_value(v) for k, v in cfg.to_dict().items()})


# --------------------------------------------------------------------------- data


def _sid_int(sid: str) -> int:
    return int(sid) if sid.isdigit() else int.from_bytes(sid.encode()[:8], "little")


def augment_resample(subject: Subject, n_rr: int, seed: int, n_points: int = 2048) -> list[np.ndarray]:
    """``n_rr`` independent arc-length resamplings of the subject's contours."""
    if n_rr < 1:
        raise ValueError("n_rr must be at least 1")
    sidn = _sid_int(subject.id)
    return [
        resample_contours(subject.contours, n_points, np.random.SeedSequence([int(seed), _AUG_TAG, sidn, r]))
        for r in range(n_rr)
    ]


def eval_cloud(subject: Subject, seed: int, n_points: int = 2048) -> np.ndarray:
    """The single deterministic resampling used for validation, test and inference."""
    return resample_contours(subject.contours, n_points, np.random.SeedSequence([int(seed), _EVAL_TAG, _sid_int(subject.id)]))


@dataclass
class Sample:
    subject: Subject
    cloud: np.ndarray  # world coordinates


def build_samples(ds: Dataset, split: str, cfg: TrainConfig) -> list[Sample]:
    out = []
    for sid in ds.ids(split):
        subj = ds.subject(sid)
        out.extend(Sample(subj, c) for c in augment_resample(subj, cfg.n_rr, cfg.seed, cfg.n_in))
    return out


def make_batch(samples: list[Sample], mcfg: ModelConfig, need_rec: bool):
    dt = np.dtype(mcfg.dtype)
    xs, el, topo, co, de = [], [], [], [], []
    for s in samples:
        x, tf = normalize_cloud(s.cloud)
        xs.append(x)
        el.append(tf.apply(s.subject.electrodes[: mcfg.n_electrodes]))
        topo.append(tf.apply(s.subject.topology))
        if need_rec:
            co.append(tf.apply(s.subject.coarse))
            de.append(tf.apply(s.subject.dense))
    gt = GroundTruth(
        np.stack(el),
        np.stack(topo),
        np.stack(co) if need_rec else None,
        np.stack(de) if need_rec else None,
    )
    return np.stack(xs).astype(dt), gt


def batch_order(n_samples: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), _SHUFFLE_TAG, int(epoch)])).permutation(n_samples)
    return [perm[i : i + batch_size] for i in range(0, n_samples, batch_size)]


# --------------------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0


def adam_init(params: dict) -> AdamState:
    return AdamState({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0) -> None:
    """One in-place Adam update with decoupled weight decay (``p -= lr*wd*p``)."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            update = update + weight_decay * p
        p -= (lr * update).astype(p.dtype, copy=False)


# --------------------------------------------------------------------------- state & checkpoints


@dataclass
class TrainState:
    params: dict
    adam: AdamState
    iteration: int = 0
    best_val_ed: float = math.inf
    best_epoch: int = -1
    history: list = field(default_factory=list)  # per-epoch (epoch, iter, val_ED, val_CD)


def save_state(path, state: TrainState, cfg: TrainConfig) -> None:
    mcfg = cfg.model_config()
    tensors = {f"param/{k}": v for k, v in state.params.items()}
    tensors.update({f"adam_m/{k}": v for k, v in state.adam.m.items()})
    tensors.update({f"adam_v/{k}": v for k, v in state.adam.v.items()})
    meta = {
        "train_config": {k: format_value(v) for k, v in cfg.to_dict().items()},
        "iteration": state.iteration,
        "adam_step": state.adam.step,
        "best_val_ed": state.best_val_ed if math.isfinite(state.best_val_ed) else None,
        "best_epoch": state.best_epoch,
        "history": state.history,
    }
    ckpt.save_checkpoint(path, tensors, mcfg.to_dict(), mcfg.hash(), meta)


def save_params(path, params: dict, cfg: TrainConfig, meta: dict | None = None) -> None:
    mcfg = cfg.model_config()
    m = {"train_config": {k: format_value(v) for k, v in cfg.to_dict().items()}}
    m.update(meta or {})
    ckpt.save_checkpoint(path, {f"param/{k}": v for k, v in params.items()}, mcfg.to_dict(), mcfg.hash(), m)


def load_model(path) -> tuple[dict, ModelConfig, TrainConfig]:
    """Parameters, model config and training config stored in a checkpoint."""
    tensors, header = ckpt.load_checkpoint(path)
    mcfg = ModelConfig.from_dict(header["config"])
    if mcfg.hash() != header["config_hash"]:
        raise ckpt.CheckpointError(f"{path}: stored config does not match its hash")
    tcfg = config_from_mapping(header["meta"].get("train_config", {}))
    params = {k[len("param/") :]: v for k, v in tensors.items() if k.startswith("param/")}
    return params, mcfg, tcfg


def load_state(path, cfg: TrainConfig) -> TrainState:
    mcfg = cfg.model_config()
    tensors, header = ckpt.load_checkpoint(path, expect_hash=mcfg.hash())
    meta = header["meta"]

    def group(prefix):
        return {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}

    adam = AdamState(group("adam_m/"), group("adam_v/"), meta["adam_step"])
    best = meta["best_val_ed"]
    return TrainState(
        group("param/"),
        adam,
        meta["iteration"],
        math.inf if best is None else best,
        meta["best_epoch"],
        [list(h) for h in meta["history"]],
    )


# --------------------------------------------------------------------------- prediction


@dataclass
class Prediction:
    electrodes: np.ndarray  # (10, 3) world cm
    dense: np.ndarray | None = None  # (n_dense, 3) world cm
    keypoints: np.ndarray | None = None


def predict(params: dict, mcfg: ModelConfig, clouds: list[np.ndarray], batch_size: int = 8) -> list[Prediction]:
    """Normalize each world-space cloud, run the network and map outputs back to cm."""
    out = []
    for i in range(0, len(clouds), batch_size):
        chunk = clouds[i : i + batch_size]
        normed = [normalize_cloud(c) for c in chunk]
        x = np.stack([n[0] for n in normed]).astype(mcfg.dtype)
        res = forward(params, x, mcfg, {})
        for j, (_, tf) in enumerate(normed):
            kp = tf.invert(res.keypoints[j].astype(np.float64))
            dense = tf.invert(res.dense[j].astype(np.float64)) if res.dense is not None else None
            out.append(Prediction(kp[: mcfg.n_electrodes], dense, kp))
    return out


def validate(params, mcfg: ModelConfig, subjects: list[Subject], seed: int) -> tuple[float, float]:
    """Mean electrode ED and mean dense CD (cm, unsquared) over ``subjects``."""
    clouds = [eval_cloud(s, seed, mcfg.n_in) for s in subjects]
    preds = predict(params, mcfg, clouds)
    eds, cds = [], []
    for s, p in zip(subjects, preds):
        if mcfg.n_electrodes == len(s.electrodes):
            eds.append(euclidean_error(p.electrodes, s.electrodes)[1])
        else:
            eds.append(float(np.mean(np.linalg.norm(p.electrodes - s.electrodes[: mcfg.n_electrodes], axis=1))))
        if p.dense is not None:
            cds.append(chamfer(p.dense, s.dense))
    return float(np.mean(eds)), (float(np.mean(cds)) if cds else float("nan"))


# --------------------------------------------------------------------------- training


@dataclass
class TrainResult:
    state: TrainState
    out_dir: Path
    best_path: Path
    last_path: Path


def _read_rows(path: Path, keep) -> list[list[str]]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [r for r in rows[1:] if keep(r)]


def train(
    dataset: Dataset | str | Path,
    cfg: TrainConfig,
    out_dir,
    resume: str | Path | None = None,
    max_iters: int | None = None,
) -> TrainResult:
    """Train and write ``metrics.csv``, ``val.csv``, ``best.ckpt`` and ``last.ckpt`` under ``out_dir``.

    ``max_iters`` stops after that many total iterations (the state is saved
    to ``last.ckpt`` so a later ``resume`` continues bit-exactly).
    """
    ds = dataset if isinstance(dataset, Dataset) else Dataset.open(dataset)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mcfg = cfg.model_config()
    weights = cfg.loss_weights()
    need_rec = mcfg.use_recon and weights.lambda_rec > 0
    samples = build_samples(ds, "train", cfg)
    val_subjects = [ds.subject(s) for s in ds.ids("val")]
    if not samples:
        raise ValueError("dataset has no training subjects")
    if not val_subjects:
        raise ValueError("dataset has no validation subjects")
    n_batches = math.ceil(len(samples) / cfg.batch_size)
    total_iters = cfg.epochs * n_batches
    stop = total_iters if max_iters is None else min(total_iters, max_iters)

    best_path = out_dir / "best.ckpt"
    last_path = out_dir / "last.ckpt"
    metrics_path = out_dir / "metrics.csv"
    val_path = out_dir / "val.csv"
    if resume is not None:
        state = load_state(resume, cfg)
        start = state.iteration
        metric_rows = _read_rows(metrics_path, lambda r: int(r[0]) < start)
        val_rows = [[str(h[0]), str(h[1]), format_value(h[2]), format_value(h[3])] for h in state.history]
    else:
        params = init_params(mcfg, cfg.seed)
        state = TrainState(params, adam_init(params))
        metric_rows, val_rows = [], []
    save_config(out_dir / "config.txt", cfg)

    mfh = open(metrics_path, "w", newline="")
    mw = csv.writer(mfh, lineterminator="\n")
    mw.writerow(METRICS_HEADER)
    mw.writerows(metric_rows)
    try:
        order_epoch, order = -1, None
        while state.iteration < stop:
            it = state.iteration
            epoch, bi = divmod(it, n_batches)
            if epoch != order_epoch:
                order, order_epoch = batch_order(len(samples), cfg.batch_size, cfg.seed, epoch), epoch
            x, gt = make_batch([samples[i] for i in order[bi]], mcfg, need_rec)
            lr = cfg.lr_at(it)
            try:
                cache = {}
                out = forward(state.params, x, mcfg, cache)
                terms, g = loss_total(out, gt, weights)
                if not math.isfinite(terms.total):
                    raise NumericError(f"non-finite loss at iteration {it}")
                grads = backward(state.params, mcfg, cache, out, g["keypoints"], g["coarse"], g["dense"])
            except NumericError as exc:
                save_state(last_path, state, cfg)
                raise TrainingAborted(f"{exc}; last good state saved to {last_path}") from exc
            adam_step(state.params, grads, state.adam, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)
            state.iteration += 1
            mw.writerow([it, epoch, format_value(lr)] + [format_value(v) for v in terms.as_row()])
            if bi == n_batches - 1:
                ved, vcd = validate(state.params, mcfg, val_subjects, cfg.seed)
                state.history.append([epoch, state.iteration, ved, vcd])
                val_rows.append([str(epoch), str(state.iteration), format_value(ved), format_value(vcd)])
                log.info("epoch %d iter %d loss %.5f val ED %.4f cm CD %.4f cm", epoch, state.iteration, terms.total, ved, vcd)
                if ved < state.best_val_ed:
                    state.best_val_ed, state.best_epoch = ved, epoch
                    save_params(best_path, state.params, cfg, {"epoch": epoch, "val_ED": ved, "val_CD": vcd})
        save_state(last_path, state, cfg)
        if not best_path.exists():
            save_params(best_path, state.params, cfg, {"epoch": -1})
    finally:
        mfh.close()
        with open(val_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(VAL_HEADER)
            w.writerows(val_rows)
    return TrainResult(state, out_dir, best_path, last_path)


# --------------------------------------------------------------------------- sweeps

SWEEP_AXES = {"N_rr": "n_rr", "N_kp": "n_kp"}
SWEEP_HEADER = ["value", "CD_mean", "CD_sd", "ED_mean", "ED_sd", "status"]


def sweep(dataset, axis: str, values, cfg: TrainConfig, out_dir) -> list[list]:
    """Train and test one model per value; failures are recorded and the sweep continues."""
    from .evaluation import evaluate_checkpoint, summarize

    if axis not in SWEEP_AXES:
        raise ConfigKeyError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    ds = dataset if isinstance(dataset, Dataset) else Dataset.open(dataset)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for v in values:
        run_dir = out_dir / f"{axis}_{v}"
        try:
            vcfg = replace(cfg, **{SWEEP_AXES[axis]: int(v)})
            res = train(ds, vcfg, run_dir)
            results = evaluate_checkpoint(res.best_path, ds, "test")
            agg = summarize(results)
            rows.append([v, agg["CD_mean"], agg["CD_sd"], agg["ED_mean"], agg["ED_sd"], "ok"])
        except Exception as exc:  # noqa: BLE001 - a failed value must not stop the sweep
            log.error("sweep %s=%s failed: %s", axis, v, exc)
            rows.append([v, float("nan"), float("nan"), float("nan"), float("nan"), f"error: {exc}".replace(",", ";")])
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([r[0]] + [format_value(float(x)) for x in r[1:5]] + [r[5]])
    return rows
