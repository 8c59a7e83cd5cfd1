"""Command-line interface: generate, train, sweep, infer, evaluate, simulate-ecg, plot.

Exit codes: 0 ok, 2 usage/configuration error, 3 data error, 4 numeric failure.
Every command writes ``run_manifest.json`` into its output directory.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__, io
from .geometry import EmptyInputError, SizeError
from .plotting import PLOT_KINDS

log = logging.getLogger("elecloc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- helpers


def _config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_manifest(out_dir, command: str, argv, config: dict, seeds: dict, inputs: list, outputs: list, started: float) -> Path:
    out_dir = Path(out_dir)
    rel = sorted(str(Path(p).relative_to(out_dir)) if Path(p).is_relative_to(out_dir) else str(p) for p in outputs)
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "config_hash": _config_hash(config),
        "seeds": seeds,
        "inputs": [str(p) for p in inputs],
        "outputs": rel,
        "tool": "elecloc",
        "tool_version": __version__,
        "wall_clock_s": round(time.perf_counter() - started, 3),
    }
    path = out_dir / "run_manifest.json"
    io.atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _parse_sets(pairs) -> dict:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise UsageError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _train_config(args):
    from .training import TrainConfig, config_from_mapping, load_config

    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = _parse_sets(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    try:
        cfg = config_from_mapping(overrides, cfg)
        cfg.model_config()
        cfg.loss_weights()
    except ValueError as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return cfg


def _config_keys_help() -> str:
    from .training import TrainConfig, format_value

    lines = ["training config keys (flat 'key = value' file via --config, or --set key=value):"]
    for f in fields(TrainConfig):
        lines.append(f"  {f.name:<18} default {format_value(getattr(TrainConfig(), f.name))}")
    return "\n".join(lines)


def _generate_keys_help() -> str:
    from .synth import SliceProtocol

    lines = ["generate config keys: subjects, split, plus acquisition-protocol keys:"]
    for f in fields(SliceProtocol):
        if f.name != "planes":
            lines.append(f"  {f.name:<18} default {getattr(SliceProtocol(), f.name)}")
    return "\n".join(lines)


def _limit_threads(n):
    if n is None:
        return None
    if n < 1:
        raise UsageError("--threads must be at least 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# --------------------------------------------------------------------------- commands


def cmd_generate(args, argv) -> int:
    from dataclasses import replace

    from .synth import SliceProtocol, make_dataset, split_counts

    started = time.perf_counter()
    kv = io.read_kv(args.config) if args.config else {}
    kv.update(_parse_sets(args.set))
    proto_defaults = SliceProtocol()
    proto_fields = {f.name for f in fields(SliceProtocol)} - {"planes"}
    n = args.subjects
    split = None
    proto_kw = {}
    for k, v in kv.items():
        if k == "subjects":
            n = int(v) if args.subjects is None else n
        elif k == "split":
            split = v
        elif k in proto_fields:
            default = getattr(proto_defaults, k)
            if isinstance(default, tuple):
                proto_kw[k] = tuple(float(x) for x in v.split(","))
            elif isinstance(default, int):
                proto_kw[k] = int(v)
            else:
                proto_kw[k] = float(v)
        else:
            raise UsageError(f"unknown config key {k!r} for generate")
    if args.split:
        split = args.split
    n = 200 if n is None else n
    seed = 0 if args.seed is None else args.seed
    if split is None:
        split_t = (0.6, 0.1, 0.3)
    else:
        parts = [p.strip() for p in split.split(",")]
        if len(parts) != 3:
            raise UsageError("--split needs three comma-separated values")
        split_t = tuple(int(p) for p in parts) if all(p.isdigit() for p in parts) else tuple(float(p) for p in parts)
    protocol = replace(proto_defaults, **proto_kw)
    out = Path(args.out)
    make_dataset(out, n, protocol, seed=seed, split=split_t, threads=args.threads or 1)
    tr, va, te = split_counts(n, split_t)
    print(f"generated {n} subjects in {out}: train {tr} / val {va} / test {te}")
    outputs = [out / "manifest.txt"] + sorted((out / "subjects").iterdir())
    write_manifest(out, "generate", argv, {"subjects": n, "split": list(split_t), **{k: str(v) for k, v in proto_kw.items()}},
                   {"seed": seed}, [], outputs, started)
    return EXIT_OK


def cmd_train(args, argv) -> int:
    from .training import train

    started = time.perf_counter()
    cfg = _train_config(args)
    res = train(args.data, cfg, args.out, resume=args.resume, max_iters=args.max_iters)
    st = res.state
    best = f"{st.best_val_ed:.4f} cm (epoch {st.best_epoch})" if np.isfinite(st.best_val_ed) else "n/a"
    print(f"trained {st.iteration} iterations; best validation ED {best}; checkpoint {res.best_path}")
    out = Path(args.out)
    write_manifest(out, "train", argv, cfg.to_dict(), {"seed": cfg.seed}, [args.data] + ([args.resume] if args.resume else []),
                   [res.best_path, res.last_path, out / "metrics.csv", out / "val.csv", out / "config.txt"], started)
    return EXIT_OK


def cmd_sweep(args, argv) -> int:
    from .training import sweep

    started = time.perf_counter()
    cfg = _train_config(args)
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise UsageError("--values must be comma-separated integers") from None
    rows = sweep(args.data, args.axis, values, cfg, args.out)
    print(f"{'value':>6} {'CD':>16} {'ED':>16} status")
    for r in rows:
        print(f"{r[0]:>6} {r[1]:8.3f} ± {r[2]:5.3f} {r[3]:8.3f} ± {r[4]:5.3f} {r[5]}")
    out = Path(args.out)
    write_manifest(out, "sweep", argv, {**cfg.to_dict(), "axis": args.axis, "values": values}, {"seed": cfg.seed}, [args.data],
                   [out / "sweep.csv"], started)
    return EXIT_OK if all(r[5] == "ok" for r in rows) else EXIT_NUMERIC


def _select_ids(ds, args) -> list[str]:
    if args.subject:
        return [ds.resolve_id(s) for s in args.subject]
    ids = ds.ids(args.split)
    if not ids:
        raise UsageError(f"split {args.split!r} is empty")
    return ids


def cmd_infer(args, argv) -> int:
    from .synth import Dataset
    from .training import eval_cloud, load_model, predict

    started = time.perf_counter()
    params, mcfg, tcfg = load_model(args.checkpoint)
    seed = tcfg.seed if args.seed is None else args.seed
    out = Path(args.out)
    outputs = []
    if args.contours:
        from .geometry import resample_contours
        from .training import _EVAL_TAG

        cs = io.read_contours(args.contours)
        cloud = resample_contours(cs, mcfg.n_in, np.random.SeedSequence([seed, _EVAL_TAG]))
        targets = [("input", cloud)]
    else:
        if not args.data:
            raise UsageError("infer needs --data (with --subject/--split) or --contours")
        ds = Dataset.open(args.data)
        targets = [(sid, eval_cloud(ds.subject(sid), seed, mcfg.n_in)) for sid in _select_ids(ds, args)]
    preds = predict(params, mcfg, [c for _, c in targets])
    for (sid, _), p in zip(targets, preds):
        d = out / sid
        d.mkdir(parents=True, exist_ok=True)
        io.write_electrodes(d / "electrodes.txt", p.electrodes)
        outputs.append(d / "electrodes.txt")
        if p.dense is not None and not args.no_dense:
            io.write_xyz(d / "dense.xyz", p.dense)
            outputs.append(d / "dense.xyz")
    print(f"wrote predictions for {len(targets)} subject(s) under {out}")
    write_manifest(out, "infer", argv, {"checkpoint_config": mcfg.to_dict()}, {"seed": seed},
                   [args.checkpoint] + [x for x in (args.data, args.contours) if x], outputs, started)
    return EXIT_OK


def cmd_evaluate(args, argv) -> int:
    from . import plotting
    from .evaluation import evaluate_checkpoint, evaluate_predictions, read_prediction_dir, write_report
    from .synth import Dataset

    started = time.perf_counter()
    if bool(args.checkpoint) == bool(args.predictions):
        raise UsageError("evaluate needs exactly one of --checkpoint or --predictions")
    ds = Dataset.open(args.data)
    skipped = []
    if args.checkpoint:
        results = evaluate_checkpoint(args.checkpoint, ds, args.split, args.seed)
    else:
        results, skipped = evaluate_predictions(ds, args.split, read_prediction_dir(args.predictions))
    if not results:
        raise EmptyInputError("no subject could be evaluated")
    out = Path(args.out)
    agg = write_report(out, results)
    ed = np.stack([r.ed for r in results])
    figs = [plotting.plot_boxplot(ed, out / "electrodes_boxplot.svg")]
    scale = np.array([r.scale for r in results])
    if len(results) >= 3 and np.all(np.isfinite(scale)) and np.ptp(scale) > 0:
        figs.append(plotting.plot_scatter(scale, [r.mean_ed for r in results], out / "scale_vs_ed.svg",
                                          "torso scale factor", "mean ED (cm)")[0])
    print(f"{agg['n']} subjects: ED {agg['ED_mean']:.4f} ± {agg['ED_sd']:.4f} cm, CD {agg['CD_mean']:.4f} ± {agg['CD_sd']:.4f} cm")
    for s in skipped:
        print(f"skipped {s}")
    write_manifest(out, "evaluate", argv, {"split": args.split}, {"seed": args.seed},
                   [args.data, args.checkpoint or args.predictions],
                   [out / "results.csv", out / "electrodes.csv", out / "correlations.csv"] + figs, started)
    return EXIT_OK


def cmd_simulate_ecg(args, argv) -> int:
    import csv

    from . import plotting
    from .ecg import ElectrodeInsideError, compare_ecgs, phantom_for_torso, read_phantom_spec, simulate_ecg, solve_eikonal, write_ecg_csv
    from .ecg.phantom import PhantomSpec, write_phantom_spec
    from .ecg.signals import LEADS
    from .synth import Dataset

    started = time.perf_counter()
    ds = Dataset.open(args.data)
    pspec = read_phantom_spec(args.phantom) if args.phantom else PhantomSpec()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_phantom_spec(out / "phantom.txt", pspec)
    outputs = [out / "phantom.txt"]
    rows = []
    for sid in _select_ids(ds, args):
        subj = ds.subject(sid)
        if subj.spec is None:
            raise FileNotFoundError(f"subject {sid} has no torso.txt; cannot place the heart")
        ph = phantom_for_torso(subj.spec, pspec)
        act = solve_eikonal(ph)
        gt = simulate_ecg(ph, subj.electrodes, act, dt=args.dt, upstroke_ms=args.upstroke)
        d = out / sid
        d.mkdir(parents=True, exist_ok=True)
        write_ecg_csv(d / "ecg_gt.csv", gt)
        outputs.append(d / "ecg_gt.csv")
        pred_file = Path(args.predictions) / sid / "electrodes.txt" if args.predictions else None
        if pred_file is not None and pred_file.exists():
            try:
                pred = simulate_ecg(ph, io.read_electrodes(pred_file), act, dt=args.dt, upstroke_ms=args.upstroke, times=gt.times)
            except ElectrodeInsideError as exc:
                print(f"{sid}: skipped: predicted {exc}")
                rows.append([sid] + [""] * (len(LEADS) + 4) + ["electrode inside myocardium"])
                continue
            write_ecg_csv(d / "ecg_pred.csv", pred)
            cmp = compare_ecgs(pred, gt)
            outputs += [d / "ecg_pred.csv", plotting.plot_ecg_overlay(pred, gt, d / "ecg_overlay.svg")]
            rows.append([sid] + [f"{cmp.dtw[n]:.6f}" for n in LEADS] + [f"{cmp.mean_dtw:.6f}", f"{cmp.mean_pearson:.6f}",
                        f"{cmp.qrs_diff:.3f}", f"{cmp.mean_rs_diff:.6f}", "ok"])
            print(f"{sid}: mean DTW {cmp.mean_dtw:.4f}, mean Pearson {cmp.mean_pearson:.4f}, "
                  f"QRS diff {cmp.qrs_diff:+.1f} ms, R/S diff {cmp.mean_rs_diff:.4f}")
        else:
            print(f"{sid}: ground-truth ECG written (no predicted electrodes)")
    if rows:
        with open(out / "ecg_comparison.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id"] + [f"DTW_{n}" for n in LEADS] + ["DTW_mean", "pearson_mean", "QRS_diff_ms", "RS_diff_mean", "status"])
            w.writerows(rows)
        outputs.append(out / "ecg_comparison.csv")
    write_manifest(out, "simulate-ecg", argv, {**pspec.to_kv(), "dt": args.dt, "upstroke": args.upstroke}, {},
                   [x for x in (args.data, args.phantom, args.predictions) if x], outputs, started)
    return EXIT_OK


def cmd_plot(args, argv) -> int:
    from . import plotting
    from .ecg import read_ecg_csv
    from .evaluation import read_results_csv

    started = time.perf_counter()
    out = Path(args.out)
    if args.kind == "boxplot":
        if not args.results:
            raise UsageError("boxplot needs --results")
        results = read_results_csv(args.results)
        plotting.plot_boxplot(np.stack([r.ed for r in results]), out)
        inputs = [args.results]
    elif args.kind == "scatter":
        if not args.results:
            raise UsageError("scatter needs --results")
        import csv

        with open(args.results, newline="") as fh:
            rows = list(csv.DictReader(fh))
        for col in (args.x, args.y):
            if rows and col not in rows[0]:
                raise UsageError(f"column {col!r} not in {args.results}")
        x = [float(r[args.x]) for r in rows]
        y = [float(r[args.y]) for r in rows]
        plotting.plot_scatter(x, y, out, args.x, args.y)
        inputs = [args.results]
    else:
        if not (args.pred and args.gt):
            raise UsageError("ecg-overlay needs --pred and --gt")
        plotting.plot_ecg_overlay(read_ecg_csv(args.pred), read_ecg_csv(args.gt), out)
        inputs = [args.pred, args.gt]
    print(f"wrote {out}")
    write_manifest(out.parent, "plot", argv, {"kind": args.kind}, {}, inputs, [out], started)
    return EXIT_OK


# --------------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(prog="elecloc", description="Electrode localization from sparse torso contours.", formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"elecloc {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True, seed=True):
        if config:
            sp.add_argument("--config", metavar="PATH", help="flat key = value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (wins over --config)")
        if seed:
            sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--threads", type=int, default=1, help="worker/BLAS thread cap; 1 guarantees bit-exact reruns")
        sp.add_argument("--out", required=True, metavar="DIR", help="output directory (created if missing)")

    g = sub.add_parser("generate", help="write a synthetic dataset", epilog=_generate_keys_help(), formatter_class=fmt)
    g.add_argument("--subjects", type=int, help="number of subjects (default 200)")
    g.add_argument("--split", help="train,val,test fractions or counts (default 0.6,0.1,0.3)")
    common(g)

    t = sub.add_parser("train", help="train a model", epilog=_config_keys_help(), formatter_class=fmt)
    t.add_argument("--data", required=True, metavar="DIR")
    t.add_argument("--resume", metavar="CKPT", help="continue from a last.ckpt state")
    t.add_argument("--max-iters", type=int, help="stop after this many total iterations")
    common(t)

    s = sub.add_parser("sweep", help="N_rr or N_kp parameter study", epilog=_config_keys_help(), formatter_class=fmt)
    s.add_argument("--data", required=True, metavar="DIR")
    s.add_argument("--axis", required=True, choices=["N_rr", "N_kp"])
    s.add_argument("--values", required=True, help="comma-separated integers, e.g. 10,16,32,64,128")
    common(s)

    i = sub.add_parser("infer", help="predict electrodes (and dense torso) for subjects")
    i.add_argument("--checkpoint", required=True, metavar="CKPT")
    i.add_argument("--data", metavar="DIR")
    i.add_argument("--subject", action="append", help="subject id (repeatable); default: every subject of --split")
    i.add_argument("--split", default="test")
    i.add_argument("--contours", metavar="FILE", help="predict for a single contours.txt instead of a dataset")
    i.add_argument("--no-dense", action="store_true", help="skip writing dense.xyz")
    common(i, config=False)

    e = sub.add_parser("evaluate", help="score a checkpoint or a predictions directory")
    e.add_argument("--data", required=True, metavar="DIR")
    e.add_argument("--split", default="test")
    e.add_argument("--checkpoint", metavar="CKPT")
    e.add_argument("--predictions", metavar="DIR", help="directory written by infer")
    common(e, config=False)

    c = sub.add_parser("simulate-ecg", help="simulate ECGs at ground-truth (and predicted) electrodes")
    c.add_argument("--data", required=True, metavar="DIR")
    c.add_argument("--subject", action="append")
    c.add_argument("--split", default="test")
    c.add_argument("--predictions", metavar="DIR", help="directory written by infer")
    c.add_argument("--phantom", metavar="PATH", help="phantom spec file (key = value)")
    c.add_argument("--dt", type=float, default=1.0, help="sample period in ms")
    c.add_argument("--upstroke", type=float, default=10.0, help="action-potential upstroke in ms")
    common(c, config=False, seed=False)

    pl = sub.add_parser("plot", help="render an SVG figure")
    pl.add_argument("--kind", required=True, choices=list(PLOT_KINDS))
    pl.add_argument("--results", metavar="CSV", help="results.csv from evaluate")
    pl.add_argument("--x", default="scale")
    pl.add_argument("--y", default="mean_ED")
    pl.add_argument("--pred", metavar="CSV", help="predicted-electrode ECG csv")
    pl.add_argument("--gt", metavar="CSV", help="ground-truth ECG csv")
    pl.add_argument("--out", required=True, metavar="SVG")
    return p


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "simulate-ecg": cmd_simulate_ecg,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    from .ecg.phantom import PhantomError
    from .io import DataFormatError
    from .model.checkpoint import CheckpointError
    from .model.losses import ConfigurationError
    from .model.network import NumericError
    from .training import ConfigKeyError

    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        limiter = _limit_threads(getattr(args, "threads", None))
        try:
            return COMMANDS[args.command](args, argv)
        finally:
            if limiter is not None:
                limiter.unregister()
    except (UsageError, ConfigKeyError, ConfigurationError) as exc:
        print(f"elecloc {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"elecloc {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DataFormatError, CheckpointError, PhantomError, EmptyInputError, SizeError, KeyError, ValueError) as exc:
        print(f"elecloc {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
