"""Command-line interface.

Subcommands exchange data only through files. Each writes its outputs to
``--out-dir`` together with ``<subcommand>.manifest.json`` holding the
resolved flags, the seed and SHA-256 hashes of inputs and outputs.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .detection import DetectionReport, ThresholdCalibration
from .experiment import (
    KINDS,
    PROTOCOL,
    SIGMA_FALLBACK,
    AnomalyLabel,
    ScalerState,
    SyntheticConfig,
    draw_label,
    fit_scale,
    generate_synthetic,
    inject_anomaly,
    read_externals_csv,
    read_series_csv,
    split_index,
    write_externals_csv,
    write_labels_csv,
    write_series_csv,
)
from .graph import GraphError, ScaledLaplacian, WeightedGraph, read_edge_list, write_edge_list
from .model import GraphVRNN, ModelConfig, init_params
from .pipeline import (
    WARMUP,
    PreparedData,
    benchmark_all,
    build_model,
    calibrate,
    detect_test,
    fit,
    predictive_sigma,
    prepare,
)
from .plotting import choose_nodes, write_plot
from .training import TrainConfig

log = logging.getLogger("graphvrnn")


class UsageError(ValueError):
    """Bad flag combination; reported with exit code 2."""


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _flag_dict(args) -> dict:
    return {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in sorted(vars(args).items())
        if k not in ("handler", "resolve")
    }


def write_manifest(args, argv, inputs: dict, outputs: dict, elapsed: float) -> Path:
    out = Path(args.out_dir) / f"{args.command}.manifest.json"
    doc = {
        "command": args.command,
        "version": __version__,
        "argv": list(argv),
        "seed": getattr(args, "seed", None),
        "flags": _flag_dict(args),
        "inputs": {k: {"path": str(p), "sha256": sha256(p)} for k, p in inputs.items() if p},
        "outputs": {k: {"path": str(p), "sha256": sha256(p)} for k, p in outputs.items()},
        "elapsed_seconds": round(elapsed, 3),
    }
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out


# -- checkpoint bundle -----------------------------------------------------


def _load_bundle(path):
    params, cfg, aux = load_checkpoint(path)
    try:
        graph = WeightedGraph(aux["graph"])
        scaler = ScalerState(aux["scaler_min"], aux["scaler_max"])
        thr, q, od = aux["calibration"]
        split = float(aux["split"][0])
    except KeyError as exc:
        raise UsageError(f"{path}: checkpoint lacks detector metadata {exc}") from None
    calib = None if np.isnan(thr) else ThresholdCalibration(float(thr), float(q), float(od))
    model = GraphVRNN(cfg, ScaledLaplacian.from_graph(graph))
    return model, params, scaler, calib, split, graph


def _grid(args, n: int) -> tuple[int, int]:
    if args.rows is not None and args.cols is not None:
        rows, cols = args.rows, args.cols
    else:
        side = int(round(np.sqrt(n)))
        if side * side != n:
            raise UsageError(f"{n} nodes is not a square grid; pass --rows and --cols")
        rows, cols = side, side
    if rows * cols != n:
        raise UsageError(f"grid {rows}x{cols} does not match {n} nodes")
    return rows, cols


def _load_data(series_path, externals_path, scaler, split, graph) -> PreparedData:
    values, t0 = read_series_csv(series_path)
    if t0 != 0:
        raise UsageError(f"{series_path}: series must start at t=0")
    cal = read_externals_csv(externals_path)
    if values.shape[2] != graph.n_nodes:
        raise UsageError(f"series has {values.shape[2]} nodes, graph has {graph.n_nodes}")
    return prepare(values, cal, graph, split, scaler)


# -- generate --------------------------------------------------------------


def resolve_generate(args):
    return SyntheticConfig(
        rows=args.rows, cols=args.cols, days=args.days, steps_per_day=args.steps_per_day,
        noise_std=args.noise_std, seed=args.seed, weekend_damping=args.weekend_damping,
        holiday_damping=args.holiday_damping, holiday_rate=args.holiday_rate,
        night_level=args.night_level, ramp_steps=args.ramp_steps, temp_coef=args.temp_coef,
        wind_coef=args.wind_coef, modulate=not args.no_modulate,
    )


def run_generate(args, cfg):
    series, cal = generate_synthetic(cfg)
    out = Path(args.out_dir)
    paths = {"series": out / "series.csv", "externals": out / "externals.csv", "graph": out / "graph.txt"}
    write_series_csv(series.values, paths["series"])
    write_externals_csv(cal, paths["externals"])
    write_edge_list(series.graph, paths["graph"])
    return {}, paths


# -- train -----------------------------------------------------------------


def resolve_train(args):
    model_kw = dict(cheb_order=args.cheb_order, graph_features=args.graph_features,
                    latent_dim=args.latent_dim, hidden_dim=args.hidden_dim,
                    sigma_floor=args.sigma_floor)
    ModelConfig(n_nodes=2, **model_kw)
    tc = TrainConfig(learning_rate=args.lr, epochs=args.epochs, window=args.window,
                     batch_size=args.batch_size, clip_norm=args.clip_norm, seed=args.seed,
                     val_fraction=args.val_fraction)
    ThresholdCalibration(0.0, args.quantile, args.od_threshold)
    if not 0 < args.split < 1:
        raise UsageError("--split must lie in (0, 1)")
    return model_kw, tc


def run_train(args, plan):
    model_kw, tc = plan
    graph = read_edge_list(args.graph)
    values, _ = read_series_csv(args.series)
    data = prepare(values, read_externals_csv(args.externals), graph, args.split)
    model = build_model(graph, channels=values.shape[1], **model_kw)
    params, report = fit(model, data, tc, init_params(model.config, args.seed))
    calib = calibrate(model, params, data, tc, args.quantile, args.od_threshold,
                      args.samples, args.seed, args.warmup)
    log.info("threshold %.4f at quantile %g", calib.threshold, calib.quantile)
    out = Path(args.out_dir)
    paths = {"checkpoint": out / "checkpoint.bin", "report": out / "train_report.csv"}
    aux = {
        "graph": graph.weights,
        "scaler_min": data.scaler.minimum,
        "scaler_max": data.scaler.maximum,
        "calibration": [calib.threshold, calib.quantile, calib.od_threshold],
        "split": [args.split],
    }
    save_checkpoint(params, model.config, paths["checkpoint"], aux)
    report.to_csv(paths["report"])
    return {"series": args.series, "externals": args.externals, "graph": args.graph}, paths


# -- inject ----------------------------------------------------------------


def resolve_inject(args):
    kind = args.type.upper()
    if kind not in KINDS:
        raise UsageError(f"unknown anomaly type {args.type!r}")
    if args.random:
        return kind, None
    missing = [f for f in ("p", "q", "t0", "t1") if getattr(args, f) is None]
    if missing:
        raise UsageError("without --random, pass " + ", ".join("--" + m for m in missing))
    hw, _, (lo, hi) = PROTOCOL[kind]
    label = AnomalyLabel(
        kind, args.k, args.p, args.q, hw if args.halfwidth is None else args.halfwidth,
        args.t0, args.t1, 0.5 * (lo + hi) if args.magnitude is None else args.magnitude,
    )
    if kind in ("GAC", "LAC") and args.checkpoint and not args.externals:
        raise UsageError("--checkpoint needs --externals to compute predictive sigma")
    return kind, label


def run_inject(args, plan):
    kind, label = plan
    values, t0 = read_series_csv(args.series)
    if t0 != 0:
        raise UsageError(f"{args.series}: series must start at t=0")
    sigma = SIGMA_FALLBACK
    if args.checkpoint:
        model, params, scaler, _, split, graph = _load_bundle(args.checkpoint)
        cut = split_index(len(values), split)
        if kind in ("GAC", "LAC") and args.externals:
            data = prepare(values, read_externals_csv(args.externals), graph, split, scaler)
            clean = detect_test(model, params, data, None, args.samples, args.seed, args.warmup)
            sigma = predictive_sigma(clean, data)
    else:
        cut = split_index(len(values), args.split)
        scaler = fit_scale(values[:cut])
    grid = _grid(args, values.shape[2])
    test = scaler.apply(values[cut:])
    rng = np.random.default_rng(args.seed)
    if label is None:
        label = draw_label(kind, grid, len(test), rng, values.shape[1])
    dirty, _, cell_mask = inject_anomaly(test, label, grid, int(rng.integers(2**31)), sigma)
    raw = values.copy()
    # only touched cells go through the inverse transform, the rest stay bitwise equal
    raw[cut:][cell_mask] = scaler.invert(dirty)[cell_mask]
    out = Path(args.out_dir)
    paths = {"series": out / "series.csv", "labels": out / "labels.csv"}
    write_series_csv(raw, paths["series"])
    write_labels_csv([label], paths["labels"])
    return {"series": args.series, "checkpoint": args.checkpoint, "externals": args.externals}, paths


# -- detect ----------------------------------------------------------------


def resolve_detect(args):
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    if args.od_threshold is not None and not 0 < args.od_threshold < 1:
        raise UsageError("--od-threshold must lie in (0, 1)")
    return None


def run_detect(args, _):
    model, params, scaler, calib, split, graph = _load_bundle(args.checkpoint)
    data = _load_data(args.series, args.externals, scaler, split, graph)
    od = args.od_threshold if args.od_threshold is not None else (calib.od_threshold if calib else 0.95)
    if args.threshold is not None:
        calib = ThresholdCalibration(args.threshold, calib.quantile if calib else 0.01, od)
    elif calib is not None:
        calib = ThresholdCalibration(calib.threshold, calib.quantile, od)
    if calib is None:
        raise UsageError("checkpoint holds no calibrated threshold; pass --threshold")
    report = detect_test(model, params, data, calib, args.samples, args.seed, args.warmup)
    out = Path(args.out_dir)
    paths = {"report": out / "report.csv", "plot": out / "plot.svg", "plot_data": out / "plot.csv"}
    report.to_csv(paths["report"])
    values, _ = read_series_csv(args.series)
    _plot(values, report, args.plot_nodes, args.channel, paths["plot"], paths["plot_data"])
    return {"series": args.series, "externals": args.externals, "checkpoint": args.checkpoint}, paths


def _plot(values, report: DetectionReport, nodes, channel, svg, data_csv):
    n = values.shape[2]
    if nodes:
        bad = [v for v in nodes if not 0 <= v < n]
        if bad:
            raise UsageError(f"nodes {bad} out of range for {n} nodes")
    else:
        nodes = choose_nodes(report.nodes, n)
    if not 0 <= channel < values.shape[1]:
        raise UsageError(f"channel {channel} out of range")
    t = report.t0 + np.arange(len(report.scores))
    if t[-1] >= len(values):
        raise UsageError("report extends past the end of the series")
    series = values[t][:, channel, :][:, nodes].T
    write_plot(svg, data_csv, t, series, [f"node{v}_ch{channel}" for v in nodes], report.flags)


def run_plot(args, _):
    values, _t0 = read_series_csv(args.series)
    report = DetectionReport.from_csv(args.report)
    out = Path(args.out_dir)
    paths = {"plot": out / "plot.svg", "plot_data": out / "plot.csv"}
    _plot(values, report, args.nodes, args.channel, paths["plot"], paths["plot_data"])
    return {"series": args.series, "report": args.report}, paths


# -- evaluate --------------------------------------------------------------


def resolve_evaluate(args):
    kinds = [k.strip().upper() for k in args.types.split(",") if k.strip()]
    bad = [k for k in kinds if k not in KINDS]
    if bad or not kinds:
        raise UsageError(f"unknown anomaly types {bad or args.types!r}")
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    return kinds


def run_evaluate(args, kinds):
    model, params, scaler, calib, split, graph = _load_bundle(args.checkpoint)
    if calib is None:
        raise UsageError("checkpoint holds no calibrated threshold")
    data = _load_data(args.series, args.externals, scaler, split, graph)
    grid = _grid(args, graph.n_nodes)
    results = benchmark_all(model, params, data, calib, grid, args.trials, args.seed, kinds,
                            args.samples, args.warmup)
    out = Path(args.out_dir)
    paths = {"metrics": out / "metrics.csv", "trials": out / "trials.csv"}
    with open(paths["metrics"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["type", "trials", "mean_ap", "sd_ap", "mean_auc", "sd_auc"])
        for kind, r in results.items():
            w.writerow([kind, len(r.trials), repr(r.mean_ap), repr(r.sd_ap), repr(r.mean_auc), repr(r.sd_auc)])
    with open(paths["trials"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["type", "trial", "ap", "auc", "localized", "localized_inside",
                    "k", "p", "q", "halfwidth", "t0", "t1", "magnitude"])
        for kind, r in results.items():
            for tr in r.trials:
                lb = tr.label
                w.writerow([kind, tr.trial, repr(tr.ap), repr(tr.auc), tr.localized, tr.localized_inside,
                            lb.k, lb.p, lb.q, lb.halfwidth, lb.t0, lb.t1, repr(lb.magnitude)])
    return {"series": args.series, "externals": args.externals, "checkpoint": args.checkpoint}, paths


# -- parser ----------------------------------------------------------------


def _node_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated node indices, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphvrnn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_, resolve, handler):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(resolve=resolve, handler=handler)
        p.add_argument("--out-dir", type=Path, required=True)
        p.add_argument("--seed", type=int, default=0)
        return p

    syn = SyntheticConfig()
    g = add("generate", "synthetic grid traffic with external factors", resolve_generate, run_generate)
    g.add_argument("--rows", type=int, default=syn.rows)
    g.add_argument("--cols", type=int, default=syn.cols)
    g.add_argument("--days", type=int, default=syn.days)
    g.add_argument("--steps-per-day", type=int, default=syn.steps_per_day)
    g.add_argument("--noise-std", type=float, default=syn.noise_std)
    g.add_argument("--weekend-damping", type=float, default=syn.weekend_damping)
    g.add_argument("--holiday-damping", type=float, default=syn.holiday_damping)
    g.add_argument("--holiday-rate", type=float, default=syn.holiday_rate)
    g.add_argument("--night-level", type=float, default=syn.night_level)
    g.add_argument("--ramp-steps", type=int, default=syn.ramp_steps)
    g.add_argument("--temp-coef", type=float, default=syn.temp_coef)
    g.add_argument("--wind-coef", type=float, default=syn.wind_coef)
    g.add_argument("--no-modulate", action="store_true", help="disable all day-level factors")

    mc = {f.name: f.default for f in fields(ModelConfig) if f.name != "n_nodes"}
    tc = TrainConfig()
    t = add("train", "fit the model and calibrate the detection threshold", resolve_train, run_train)
    t.add_argument("--series", type=Path, required=True)
    t.add_argument("--externals", type=Path, required=True)
    t.add_argument("--graph", type=Path, required=True)
    t.add_argument("--split", type=float, default=0.8, help="training fraction of the series")
    t.add_argument("--epochs", type=int, default=tc.epochs)
    t.add_argument("--lr", type=float, default=tc.learning_rate)
    t.add_argument("--window", type=int, default=tc.window)
    t.add_argument("--batch-size", type=int, default=tc.batch_size)
    t.add_argument("--clip-norm", type=float, default=tc.clip_norm)
    t.add_argument("--val-fraction", type=float, default=tc.val_fraction)
    t.add_argument("--cheb-order", type=int, default=mc["cheb_order"])
    t.add_argument("--graph-features", type=int, default=mc["graph_features"])
    t.add_argument("--latent-dim", type=int, default=mc["latent_dim"])
    t.add_argument("--hidden-dim", type=int, default=mc["hidden_dim"])
    t.add_argument("--sigma-floor", type=float, default=mc["sigma_floor"])
    t.add_argument("--quantile", type=float, default=0.01)
    t.add_argument("--od-threshold", type=float, default=0.95)
    t.add_argument("--samples", type=int, default=16)
    t.add_argument("--warmup", type=int, default=WARMUP)

    i = add("inject", "add one anomaly to the test span", resolve_inject, run_inject)
    i.add_argument("--series", type=Path, required=True)
    i.add_argument("--type", required=True, help="gms, lms, gac or lac")
    i.add_argument("--random", action="store_true", help="draw position, duration and magnitude")
    i.add_argument("--k", type=int, default=0, help="channel")
    i.add_argument("--p", type=int)
    i.add_argument("--q", type=int)
    i.add_argument("--halfwidth", type=int)
    i.add_argument("--t0", type=int, help="first affected step, relative to the test span")
    i.add_argument("--t1", type=int, help="last affected step (inclusive)")
    i.add_argument("--magnitude", "--mu", dest="magnitude", type=float)
    i.add_argument("--rows", type=int)
    i.add_argument("--cols", type=int)
    i.add_argument("--split", type=float, default=0.8)
    i.add_argument("--checkpoint", type=Path, help="scaler and predictive sigma source")
    i.add_argument("--externals", type=Path)
    i.add_argument("--samples", type=int, default=16)
    i.add_argument("--warmup", type=int, default=WARMUP)

    d = add("detect", "score the test span and localise flagged steps", resolve_detect, run_detect)
    d.add_argument("--series", type=Path, required=True)
    d.add_argument("--externals", type=Path, required=True)
    d.add_argument("--checkpoint", type=Path, required=True)
    d.add_argument("--samples", type=int, default=16)
    d.add_argument("--warmup", type=int, default=WARMUP)
    d.add_argument("--threshold", type=float, help="override the calibrated score threshold")
    d.add_argument("--od-threshold", type=float)
    d.add_argument("--plot-nodes", type=_node_list)
    d.add_argument("--channel", type=int, default=0)

    pl = add("plot", "redraw a detection report", None, run_plot)
    pl.add_argument("--series", type=Path, required=True)
    pl.add_argument("--report", type=Path, required=True)
    pl.add_argument("--nodes", type=_node_list)
    pl.add_argument("--channel", type=int, default=0)

    e = add("evaluate", "AP/AUC benchmark over injected anomalies", resolve_evaluate, run_evaluate)
    e.add_argument("--series", type=Path, required=True)
    e.add_argument("--externals", type=Path, required=True)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--types", default=",".join(k.lower() for k in KINDS))
    e.add_argument("--trials", type=int, default=20)
    e.add_argument("--samples", type=int, default=16)
    e.add_argument("--warmup", type=int, default=WARMUP)
    e.add_argument("--rows", type=int)
    e.add_argument("--cols", type=int)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        plan = args.resolve(args) if args.resolve else None
    except (ValueError, GraphError) as exc:
        print(f"graphvrnn {args.command}: {exc}", file=sys.stderr)
        return 2
    start = time.perf_counter()
    try:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        inputs, outputs = args.handler(args, plan)
        write_manifest(args, argv, inputs, outputs, time.perf_counter() - start)
    except UsageError as exc:
        print(f"graphvrnn {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surface any failure as exit 1
        log.debug("failure", exc_info=True)
        print(f"graphvrnn {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
