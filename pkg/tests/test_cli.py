import hashlib
import json
import re
from pathlib import Path

import numpy as np
import pytest

from elecloc import io
from elecloc.cli import main
from elecloc.ecg import derive_leads, write_ecg_csv
from elecloc.plotting import plot_boxplot, plot_ecg_overlay, plot_scatter

TINY_CFG = """\
# tiny model for CLI tests
n_in = 128
n_kp = 12
n_coarse = 32
n_dense = 128
enc_widths = 8,8,16,16
head_widths = 16
coarse_widths = 32
refine_widths = 8
n_rr = 2
epochs = 2
batch_size = 3
initial_lr = 1e-3
"""


def tree_hash(root: Path, exclude=("run_manifest.json",)) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in exclude:
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def trained(tmp_path_factory, small_dataset):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.txt").write_text(TINY_CFG)
    assert main(["train", "--data", str(small_dataset.root), "--config", str(root / "tiny.txt"), "--out", str(root / "run")]) == 0
    return root


def test_generate_prints_split_and_creates_out(tmp_path, capsys):
    out = tmp_path / "new" / "nested"
    assert main(["generate", "--subjects", "10", "--seed", "7", "--out", str(out)]) == 0
    assert "train 6 / val 1 / test 3" in capsys.readouterr().out
    assert (out / "manifest.txt").exists()
    manifest = json.loads((out / "run_manifest.json").read_text())
    for key in ("command", "config_hash", "seeds", "inputs", "outputs", "tool_version", "wall_clock_s"):
        assert key in manifest
    assert manifest["seeds"] == {"seed": 7}


def test_generate_default_split_200(tmp_path):
    assert main(["generate", "--subjects", "200", "--seed", "7", "--out", str(tmp_path)]) == 0
    splits = [l.split()[1] for l in (tmp_path / "manifest.txt").read_text().splitlines() if not l.startswith("#")]
    assert (splits.count("train"), splits.count("val"), splits.count("test")) == (120, 20, 60)


def test_generate_rerun_identical_hash(tmp_path):
    for d in ("a", "b"):
        assert main(["generate", "--subjects", "4", "--seed", "2", "--threads", "1", "--out", str(tmp_path / d)]) == 0
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")


def test_generate_config_keys(tmp_path):
    (tmp_path / "g.txt").write_text("subjects = 5\nsplit = 3,1,1\ngap_prob = 0\n")
    assert main(["generate", "--config", str(tmp_path / "g.txt"), "--out", str(tmp_path / "d")]) == 0
    assert len((tmp_path / "d" / "manifest.txt").read_text().splitlines()) == 6
    (tmp_path / "bad.txt").write_text("subjectz = 5\n")
    assert main(["generate", "--config", str(tmp_path / "bad.txt"), "--out", str(tmp_path / "e")]) == 2


def test_train_outputs(trained):
    run = trained / "run"
    for f in ("best.ckpt", "last.ckpt", "metrics.csv", "val.csv", "config.txt", "run_manifest.json"):
        assert (run / f).exists()
    assert (run / "metrics.csv").read_text().splitlines()[0] == "iter,epoch,lr,L_total,L_electrode,L_keypoint,L_coarse,L_dense"


def test_flags_override_config(small_dataset, trained, tmp_path):
    rc = main(["train", "--data", str(small_dataset.root), "--config", str(trained / "tiny.txt"), "--set", "epochs=1",
               "--seed", "5", "--out", str(tmp_path / "r")])
    assert rc == 0
    cfg = io.read_kv(tmp_path / "r" / "config.txt")
    assert cfg["epochs"] == "1" and cfg["seed"] == "5"


def test_unknown_config_key_is_usage_error(small_dataset, trained, tmp_path, capsys):
    rc = main(["train", "--data", str(small_dataset.root), "--config", str(trained / "tiny.txt"), "--set", "epoch=3",
               "--out", str(tmp_path / "r")])
    assert rc == 2
    assert "epoch" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(small_dataset, trained, tmp_path):
    rc = main(["train", "--data", str(small_dataset.root), "--config", str(trained / "tiny.txt"), "--set", "initial_lr=1e30",
               "--set", "dtype=float32", "--out", str(tmp_path / "r")])
    assert rc == 4
    assert (tmp_path / "r" / "last.ckpt").exists()


def test_missing_data_exit_code(tmp_path):
    assert main(["evaluate", "--data", str(tmp_path / "nope"), "--predictions", str(tmp_path), "--out", str(tmp_path / "o")]) == 3


def test_help_documents_every_key(capsys):
    from elecloc.training import TRAIN_KEYS

    with pytest.raises(SystemExit) as e:
        main(["train", "--help"])
    assert e.value.code == 0
    text = capsys.readouterr().out
    for k in TRAIN_KEYS:
        assert re.search(rf"^\s+{k}\s", text, re.M), k


def test_infer_single_subject(small_dataset, trained, tmp_path):
    sid = small_dataset.ids("test")[0]
    rc = main(["infer", "--checkpoint", str(trained / "run" / "best.ckpt"), "--data", str(small_dataset.root),
               "--subject", str(int(sid)), "--out", str(tmp_path)])
    assert rc == 0
    rows = [l.split() for l in (tmp_path / sid / "electrodes.txt").read_text().splitlines() if l and not l.startswith("#")]
    assert [r[0] for r in rows] == ["LA", "RA", "LL", "RL", "V1", "V2", "V3", "V4", "V5", "V6"]
    assert (tmp_path / sid / "dense.xyz").exists()


def test_infer_from_contours_file(small_dataset, trained, tmp_path):
    sid = small_dataset.ids("test")[0]
    rc = main(["infer", "--checkpoint", str(trained / "run" / "best.ckpt"),
               "--contours", str(small_dataset.root / "subjects" / sid / "contours.txt"), "--out", str(tmp_path)])
    assert rc == 0 and io.read_electrodes(tmp_path / "input" / "electrodes.txt").shape == (10, 3)


def test_evaluate_perfect_oracle_predictions(small_dataset, tmp_path, capsys):
    for sid in small_dataset.ids("test"):
        d = tmp_path / "pred" / sid
        d.mkdir(parents=True)
        s = small_dataset.subject(sid)
        io.write_electrodes(d / "electrodes.txt", s.electrodes)
        io.write_xyz(d / "dense.xyz", s.dense)
    rc = main(["evaluate", "--data", str(small_dataset.root), "--predictions", str(tmp_path / "pred"), "--out", str(tmp_path / "ev")])
    assert rc == 0
    assert "ED 0.0000 ± 0.0000 cm" in capsys.readouterr().out
    for f in ("results.csv", "electrodes.csv", "correlations.csv", "electrodes_boxplot.svg"):
        assert (tmp_path / "ev" / f).exists()


def test_evaluate_checkpoint_matches_infer_then_evaluate(small_dataset, trained, tmp_path):
    ckpt = str(trained / "run" / "best.ckpt")
    data = str(small_dataset.root)
    assert main(["evaluate", "--data", data, "--checkpoint", ckpt, "--out", str(tmp_path / "a")]) == 0
    assert main(["infer", "--checkpoint", ckpt, "--data", data, "--out", str(tmp_path / "p")]) == 0
    assert main(["evaluate", "--data", data, "--predictions", str(tmp_path / "p"), "--out", str(tmp_path / "b")]) == 0
    a = np.loadtxt(tmp_path / "a" / "results.csv", delimiter=",", skiprows=1, usecols=range(1, 14))
    b = np.loadtxt(tmp_path / "b" / "results.csv", delimiter=",", skiprows=1, usecols=range(1, 14))
    np.testing.assert_allclose(a, b, atol=1e-5)  # predictions files hold 6 decimals


def test_evaluate_needs_exactly_one_source(small_dataset, tmp_path):
    assert main(["evaluate", "--data", str(small_dataset.root), "--out", str(tmp_path)]) == 2


def test_sweep_five_rows(small_dataset, trained, tmp_path):
    rc = main(["sweep", "--data", str(small_dataset.root), "--config", str(trained / "tiny.txt"), "--set", "epochs=1",
               "--axis", "N_kp", "--values", "10,16,32,64,128", "--out", str(tmp_path)])
    assert rc == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert len(lines) == 6 and [l.split(",")[0] for l in lines[1:]] == ["10", "16", "32", "64", "128"]


def test_simulate_ecg_with_predictions(small_dataset, tmp_path, capsys):
    sid = small_dataset.ids("test")[0]
    s = small_dataset.subject(sid)
    d = tmp_path / "pred" / sid
    d.mkdir(parents=True)
    io.write_electrodes(d / "electrodes.txt", s.electrodes)
    rc = main(["simulate-ecg", "--data", str(small_dataset.root), "--subject", sid, "--predictions", str(tmp_path / "pred"),
               "--out", str(tmp_path / "ecg")])
    assert rc == 0
    out = tmp_path / "ecg"
    for f in ("phantom.txt", f"{sid}/ecg_gt.csv", f"{sid}/ecg_pred.csv", f"{sid}/ecg_overlay.svg", "ecg_comparison.csv"):
        assert (out / f).exists(), f
    row = (out / "ecg_comparison.csv").read_text().splitlines()[1].split(",")
    assert float(row[9]) == pytest.approx(0, abs=1e-6)  # DTW_mean at (6-decimal) ground-truth electrodes


# --------------------------------------------------------------------------- plots


def test_plot_unknown_kind_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["plot", "--kind", "histogram", "--out", str(tmp_path / "x.svg")])
    assert e.value.code == 2


def test_boxplot_ten_boxes_in_order(tmp_path, rng):
    p = plot_boxplot(rng.uniform(0, 3, size=(8, 10)), tmp_path / "b.svg")
    ids = re.findall(r'id="box-([A-Z0-9]+)"', p.read_text())
    assert ids == ["LA", "RA", "LL", "RL", "V1", "V2", "V3", "V4", "V5", "V6"]


def _path_coords(svg: str, gid: str) -> np.ndarray:
    m = re.search(rf'<g id="{re.escape(gid)}">\s*<path d="([^"]+)"', svg)
    return np.array([[float(a), float(b)] for a, b in re.findall(r"[ML] ([-\d.]+) ([-\d.]+)", m.group(1))])


def test_ecg_overlay_identical_traces_overlap(tmp_path, rng):
    tr = derive_leads(np.cumsum(rng.normal(size=(9, 60)), axis=1))
    svg = plot_ecg_overlay(tr, tr, tmp_path / "o.svg").read_text()
    for lead in ("I", "II", "V1", "V6"):
        np.testing.assert_array_equal(_path_coords(svg, f"gt-{lead}"), _path_coords(svg, f"pred-{lead}"))


def test_scatter_regression_slope_renders_two(tmp_path):
    x = np.arange(1.0, 11.0)
    p, info = plot_scatter(x, 2 * x, tmp_path / "s.svg")
    c = _path_coords(p.read_text(), "regression-line")
    svg_slope = -(c[-1, 1] - c[0, 1]) / (c[-1, 0] - c[0, 0])
    assert svg_slope * info["sx"] / info["sy"] == pytest.approx(2.0, rel=1e-4)


def test_plot_cli_deterministic_bytes(tmp_path, rng):
    tr = derive_leads(rng.normal(size=(9, 40)))
    write_ecg_csv(tmp_path / "e.csv", tr)
    for name in ("a.svg", "b.svg"):
        assert main(["plot", "--kind", "ecg-overlay", "--pred", str(tmp_path / "e.csv"), "--gt", str(tmp_path / "e.csv"),
                     "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    (tmp_path / "r.csv").write_text("id,mean_ED,CD," + ",".join(f"ED_{n}" for n in
                                    ("LA", "RA", "LL", "RL", "V1", "V2", "V3", "V4", "V5", "V6")) + ",scale\n"
                                    + "\n".join(f"{i},{i}.5,1,{','.join(['1'] * 10)},{1 + i / 10}" for i in range(5)) + "\n")
    for kind in ("boxplot", "scatter"):
        outs = []
        for name in ("x", "y"):
            assert main(["plot", "--kind", kind, "--results", str(tmp_path / "r.csv"), "--out", str(tmp_path / f"{kind}{name}.svg")]) == 0
            outs.append((tmp_path / f"{kind}{name}.svg").read_bytes())
        assert outs[0] == outs[1]
