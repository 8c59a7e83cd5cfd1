import csv
from dataclasses import replace

import numpy as np
import pytest

from elecloc.evaluation import evaluate_checkpoint, summarize
from elecloc.training import (
    METRICS_HEADER,
    ConfigKeyError,
    TrainConfig,
    TrainingAborted,
    adam_init,
    adam_step,
    augment_resample,
    batch_order,
    config_from_mapping,
    load_config,
    load_model,
    save_config,
    sweep,
    train,
)

from conftest import tiny_config


def _point_segment_distance(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / max(ab @ ab, 1e-300), 0, 1)
    return np.linalg.norm(a + t * ab - p)


def test_augment_resample_counts_and_distinct(small_dataset):
    s = small_dataset.subject(small_dataset.ids("train")[0])
    assert len(augment_resample(s, 1, 0)) == 1
    clouds = augment_resample(s, 30, 0)
    assert len(clouds) == 30 and all(c.shape == (2048, 3) for c in clouds)
    assert len({c.tobytes() for c in clouds}) == 30
    again = augment_resample(s, 30, 0)
    assert all(np.array_equal(a, b) for a, b in zip(clouds, again))


def test_augment_points_on_contours(small_dataset):
    s = small_dataset.subject(small_dataset.ids("train")[0])
    cloud = augment_resample(s, 1, 0, n_points=200)[0]
    segs = [c.segments3d() for c in s.contours.contours]
    starts = np.concatenate([a for a, _ in segs])
    ends = np.concatenate([b for _, b in segs])
    for p in cloud:
        d = min(_point_segment_distance(p, a, b) for a, b in zip(starts, ends))
        assert d < 1e-9


def test_adam_matches_reference_on_quadratic():
    A = np.diag([1.0, 10.0, 0.1])
    x = {"x": np.array([1.0, -2.0, 3.0])}
    st = adam_init(x)
    # hand-rolled reference
    xr, m, v = np.array([1.0, -2.0, 3.0]), np.zeros(3), np.zeros(3)
    lr, b1, b2, eps, wd = 1e-2, 0.9, 0.999, 1e-8, 1e-3
    for t in range(1, 201):
        adam_step(x, {"x": A @ x["x"]}, st, lr, b1, b2, eps, wd)
        g = A @ xr
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        xr = xr - lr * ((m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps) + wd * xr)
        np.testing.assert_allclose(x["x"], xr, rtol=0, atol=1e-8)


def test_lr_schedule_step_function():
    cfg = TrainConfig()
    assert cfg.lr_at(0) == cfg.lr_at(8999) == 1e-4
    assert cfg.lr_at(9000) == pytest.approx(0.5 * cfg.lr_at(8999))
    assert cfg.lr_at(18000) == pytest.approx(0.25e-4)


def test_batch_order_is_permutation():
    batches = batch_order(20, 6, 0, 3)
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == list(range(20))
    assert [len(b) for b in batches] == [6, 6, 6, 2]


def test_config_file_round_trip_and_unknown_keys(tmp_path):
    cfg = tiny_config(seed=9)
    save_config(tmp_path / "c.txt", cfg)
    assert load_config(tmp_path / "c.txt") == cfg
    with pytest.raises(ConfigKeyError):
        config_from_mapping({"learning_rate": "1"})
    with pytest.raises(ConfigKeyError):
        config_from_mapping({"epochs": "many"})
    with pytest.raises(ValueError):
        TrainConfig(n_rr=0)


def test_train_is_deterministic(small_dataset, tmp_path):
    cfg = tiny_config()
    train(small_dataset, cfg, tmp_path / "a")
    train(small_dataset, cfg, tmp_path / "b")
    for f in ("metrics.csv", "val.csv", "best.ckpt", "last.ckpt", "config.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    with open(tmp_path / "a" / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == METRICS_HEADER
    assert len(rows) - 1 == 2 * 4  # 12 samples / batch 3 = 4 iterations per epoch


def test_resume_is_bit_exact(small_dataset, tmp_path):
    cfg = tiny_config(epochs=3)
    full = train(small_dataset, cfg, tmp_path / "full")
    part = tmp_path / "part"
    train(small_dataset, cfg, part, max_iters=5)
    res = train(small_dataset, cfg, part, resume=part / "last.ckpt")
    assert res.state.iteration == full.state.iteration
    for k, v in full.state.params.items():
        assert v.tobytes() == res.state.params[k].tobytes()
    for f in ("metrics.csv", "val.csv", "best.ckpt", "last.ckpt"):
        assert (tmp_path / "full" / f).read_bytes() == (part / f).read_bytes(), f


def test_resume_one_step_matches(small_dataset, tmp_path):
    cfg = tiny_config()
    a = train(small_dataset, cfg, tmp_path / "a", max_iters=3)
    b = train(small_dataset, cfg, tmp_path / "b", max_iters=2)
    b = train(small_dataset, cfg, tmp_path / "b", resume=tmp_path / "b" / "last.ckpt", max_iters=3)
    for k in a.state.params:
        assert a.state.params[k].tobytes() == b.state.params[k].tobytes()
        assert a.state.adam.m[k].tobytes() == b.state.adam.m[k].tobytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_aborts_with_last_good_checkpoint(small_dataset, tmp_path):
    cfg = tiny_config(initial_lr=1e30, dtype="float32")
    with pytest.raises(TrainingAborted):
        train(small_dataset, cfg, tmp_path / "r")
    params, mcfg, _ = load_model(tmp_path / "r" / "last.ckpt")
    assert all(np.all(np.isfinite(v)) for v in params.values())


def test_training_reduces_validation_error(small_dataset, tmp_path):
    cfg = tiny_config(epochs=6)
    res = train(small_dataset, cfg, tmp_path / "r")
    first = res.state.history[0][2]
    untrained = tmp_path / "u"
    train(small_dataset, cfg, untrained, max_iters=0)
    ed0 = summarize(evaluate_checkpoint(untrained / "best.ckpt", small_dataset, "val"))["ED_mean"]
    assert res.state.best_val_ed < ed0
    assert res.state.best_val_ed <= first


def test_sweep_rows_and_single_value_equivalence(small_dataset, tmp_path):
    cfg = tiny_config(epochs=1)
    rows = sweep(small_dataset, "N_kp", [10, 12, 16], cfg, tmp_path / "s")
    assert [r[0] for r in rows] == [10, 12, 16] and all(r[5] == "ok" for r in rows)
    lines = (tmp_path / "s" / "sweep.csv").read_text().splitlines()
    assert lines[0] == "value,CD_mean,CD_sd,ED_mean,ED_sd,status" and len(lines) == 4
    one = sweep(small_dataset, "N_rr", [2], cfg, tmp_path / "one")[0]
    res = train(small_dataset, replace(cfg, n_rr=2), tmp_path / "direct")
    agg = summarize(evaluate_checkpoint(res.best_path, small_dataset, "test"))
    assert one[3] == agg["ED_mean"] and one[1] == agg["CD_mean"]


def test_sweep_records_failures(small_dataset, tmp_path):
    rows = sweep(small_dataset, "N_kp", [4, 12], tiny_config(epochs=1), tmp_path / "s")
    assert rows[0][5].startswith("error") and rows[1][5] == "ok"
    with pytest.raises(ConfigKeyError):
        sweep(small_dataset, "N_layers", [1], tiny_config(), tmp_path / "x")
