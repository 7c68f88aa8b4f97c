"""Spiking sampling experiments; every run writes CSV metrics and a manifest to --out."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .boltzmann import read_rbm, write_rbm, write_table_csv
from .datasets import write_rbin
from .network import build_network
from .substrate import write_calibration_csv

log = logging.getLogger("lifsampling")


def _common(suppress: bool = False) -> argparse.ArgumentParser:
    # the subcommand copy must not overwrite values given before the subcommand
    def d(value):
        return argparse.SUPPRESS if suppress else value

    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=d(None), help="JSON file with ExperimentConfig fields")
    p.add_argument("--seed", type=int, default=d(None))
    p.add_argument("--preset", choices=sorted(ex.PRESETS), default=d(None))
    p.add_argument("--out", default=d("runs/latest"), help="output directory")
    p.add_argument("--threads", type=int, default=d(1), help="worker processes for batch commands")
    return p


def _config(args, **extra) -> ex.ExperimentConfig:
    overrides = {k: v for k, v in extra.items() if v is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.config:
        if args.preset:
            overrides["preset"] = args.preset
        return ex.ExperimentConfig.from_file(args.config, **overrides)
    return ex.ExperimentConfig.from_preset(args.preset or "small", **overrides)


def _parse_evidence(text):
    if text is None:
        return None
    out = {}
    for item in text.split(","):
        k, v = item.split("=")
        out[int(k)] = int(v)
    return out


def _finish(record: ex.RunRecord, out: Path, extra_files=()):
    files = ex.emit_plot_data(record, out) + [Path(f) for f in extra_files]
    manifest = ex.write_manifest(out, record, files)
    print(f"wrote {len(files)} files and {manifest}")


def _weights(path):
    data = np.load(path)
    return data["W"], data["b"]


def _data_network(cfg, train, args):
    """Trained data network from --weights, or by running pre-training and in-the-loop training."""
    net = ex.data_network(cfg, train.flat.shape[1], train.n_classes)
    if getattr(args, "weights", None):
        net.set_shadow(*_weights(args.weights))
        return net, None
    rbm = read_rbm(args.rbm) if getattr(args, "rbm", None) else ex.pretrain(cfg, train)
    net, result, _ = ex.train_data_network(cfg, train, rbm, net)
    return net, result


def cmd_calibrate(args):
    cfg = _config(args, noise=args.noise)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with ex.Timer() as timer:
        if args.data:
            net = ex.data_network(cfg, 144, len(cfg.class_ids()))
        else:
            net = build_network(ex.draw_target([cfg.seed, 0], cfg.n_units), cfg.substrate(),
                                noise=cfg.noise_backend())
        fits, avg = ex.calibrate(cfg, net)
    write_calibration_csv(out / "calibration.csv", fits)
    with open(out / "average_fit.json", "w") as fh:
        json.dump(avg.as_dict(), fh, indent=2, sort_keys=True)
    record = ex.RunRecord(cfg, "calibrate", metrics=[{"trial_seed": cfg.seed, **avg.as_dict()}],
                          wall_clock=timer.elapsed)
    print(f"average fit: nu_0={avg.nu_0:.1f} Hz  w_b0={avg.w_b0:.2f}  s={avg.s:.2f}  "
          f"residual={avg.residual:.3f}")
    _finish(record, out, [out / "calibration.csv", out / "average_fit.json"])


def _tables(out: Path, tables: dict):
    files = []
    for name, table in tables.items():
        path = out / f"table_{name}.csv"
        write_table_csv(path, table)
        files.append(path)
    return files


def cmd_sample_target(args):
    cfg = _config(args, noise=args.noise)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with ex.Timer() as timer:
        res = ex.sample_untrained(cfg, args.target_id)
    record = ex.RunRecord(cfg, "sample-target", wall_clock=timer.elapsed)
    record.add_target_results([res])
    print(f"target {args.target_id}: untrained DKL = {res['test_dkl']:.4f}")
    _finish(record, out, _tables(out, res["_tables"]))


def _train_target(args, kind):
    cfg = _config(args, noise=args.noise, evidence=_parse_evidence(getattr(args, "evidence", None)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with ex.Timer() as timer:
        res = ex.run_target_experiment(cfg, args.target_id, args.repetition)
    record = ex.RunRecord(cfg, kind, wall_clock=timer.elapsed)
    record.add_target_results([res])
    W, b = res["_weights"]
    np.savez(out / "shadow_weights.npz", W=W, b=b)
    tables = res["_tables"] if kind == "infer" else {k: v for k, v in res["_tables"].items()
                                                      if not k.startswith("cond")}
    print(f"target {args.target_id}: test DKL = {res['test_dkl']:.4f}  "
          f"conditional DKL = {res['conditional_dkl']:.4f}  clamp on-fraction = {res['clamp_on']:.3f}")
    _finish(record, out, _tables(out, tables) + [out / "shadow_weights.npz"])


def cmd_train_target(args):
    _train_target(args, "train-target")


def cmd_infer(args):
    _train_target(args, "infer")


def cmd_bench_targets(args):
    cfg = _config(args, noise=args.noise, n_targets=args.targets, repetitions=args.repetitions)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with ex.Timer() as timer:
        results = ex.bench_targets(cfg, threads=args.threads)
    record = ex.RunRecord(cfg, "bench-targets", wall_clock=timer.elapsed)
    record.add_target_results(results)
    dk = np.array([r["test_dkl"] for r in results])
    print(f"{len(results)} runs: median test DKL = {np.median(dk):.4f}, "
          f"{np.mean(dk <= 5e-2):.0%} at or below 5e-2")
    _finish(record, out)


def cmd_pretrain(args):
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with ex.Timer() as timer:
        train, test = ex.load_data(cfg)
        rbm = ex.pretrain(cfg, train)
        err = ex.reference_error(rbm, test, seed=[cfg.seed, 22])
    write_rbm(out / "pretrained.rbm", rbm)
    write_rbin(out / "train.rbin", train)
    write_rbin(out / "test.rbin", test)
    record = ex.RunRecord(cfg, "pretrain", metrics=[{"trial_seed": cfg.seed, "error": err,
                                                     "train_sha256": train.sha256(),
                                                     "test_sha256": test.sha256()}],
                          wall_clock=timer.elapsed)
    print(f"reference RBM Gibbs error: {err:.2%}")
    _finish(record, out, [out / "pretrained.rbm", out / "train.rbin", out / "test.rbin"])


def cmd_train_data(args):
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with ex.Timer() as timer:
        train, test = ex.load_data(cfg)
        rbm = read_rbm(args.rbm) if args.rbm else ex.pretrain(cfg, train)
        net, result, fit = ex.train_data_network(cfg, train, rbm, checkpoint_dir=out / "checkpoints")
        cls = ex.classify(net, test, cfg.classify_duration, seed=[cfg.seed, 71])
    np.savez(out / "shadow_weights.npz", W=net.W, b=net.b)
    result.write_trace(out / "trace.csv")
    record = ex.RunRecord(cfg, "train-data", metrics=[{"trial_seed": cfg.seed, "error": cls.error,
                                                       "best_iteration": result.best_iteration,
                                                       "validation_error": result.best_metric}],
                          confusion=cls.confusion, wall_clock=timer.elapsed)
    print(f"emulated network test error after training: {cls.error:.2%}")
    _finish(record, out, [out / "shadow_weights.npz", out / "trace.csv"])


def cmd_classify(args):
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with ex.Timer() as timer:
        train, test = ex.load_data(cfg)
        net, _ = _data_network(cfg, train, args)
        cls = ex.classify(net, test, cfg.classify_duration, seed=[cfg.seed, 71])
    record = ex.RunRecord(cfg, "classify", metrics=[{"trial_seed": cfg.seed, "error": cls.error,
                                                     "ties": cls.ties}],
                          confusion=cls.confusion, wall_clock=timer.elapsed)
    print(f"test error: {cls.error:.2%} ({cls.ties} tied readouts)")
    _finish(record, out)


def cmd_complete(args):
    cfg = _config(args, occlusion_scheme=args.scheme, occlusion_fraction=args.fraction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with ex.Timer() as timer:
        train, test = ex.load_data(cfg)
        net, _ = _data_network(cfg, train, args)
        subset = test.per_class(cfg.completion_per_class) if cfg.completion_per_class else test
        comp = ex.pattern_complete(net, subset, cfg.occlusion_scheme, cfg.occlusion_fraction,
                                   cfg.completion_duration, cfg.gap_duration, seed=[cfg.seed, 81])
    med = np.median(comp.mse, axis=0)
    record = ex.RunRecord(cfg, "complete", wall_clock=timer.elapsed)
    record.mse_traces = [{"scheme": cfg.occlusion_scheme, "trial_seed": cfg.seed, "time_ms": t,
                          "median_mse": m, "label_error": e}
                         for t, m, e in zip(comp.times, med, comp.label_error)]
    record.metrics = [{"trial_seed": cfg.seed, "onset_mse": float(med[0]),
                       "mse_100ms": float(med[min(99, med.size - 1)]), "final_mse": float(med[-1]),
                       "final_label_error": float(comp.label_error[-1])}]
    print(f"median MSE: onset {med[0]:.3f}, 100 ms {med[min(99, med.size - 1)]:.3f}, end {med[-1]:.3f}")
    _finish(record, out)


def cmd_dream(args):
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with ex.Timer() as timer:
        train, _ = ex.load_data(cfg)
        net, _ = _data_network(cfg, train, args)
        schedule = list(range(train.n_classes)) * cfg.dream_cycles
        dream = ex.guided_dream(net, schedule, cfg.dream_dwell, cfg.gap_duration, cfg.dream_box,
                                seed=[cfg.seed, 91])
        closest = ex.dream_match(dream, train)
    path = out / "dream_states.csv"
    with open(path, "w") as fh:
        fh.write("sample,label," + ",".join(f"gray_{k}" for k in range(dream.grayscale.shape[1])) + "\n")
        for i, (lab, row) in enumerate(zip(dream.labels, dream.grayscale)):
            fh.write(f"{i},{lab}," + ",".join(f"{v:.3f}" for v in row) + "\n")
    matched = int(np.sum(closest == np.arange(closest.size)))
    record = ex.RunRecord(cfg, "dream", metrics=[{"trial_seed": cfg.seed, "labels_matched": matched,
                                                  "labels": int(closest.size)}],
                          wall_clock=timer.elapsed)
    print(f"dream means closest to their own class for {matched} of {closest.size} labels")
    _finish(record, out, [path])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lifsampling", description=__doc__, parents=[_common()])
    common = _common(suppress=True)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, parents=[common])
        p.set_defaults(func=func)
        return p

    p = add("calibrate", cmd_calibrate, "measure activation functions and their average fit")
    p.add_argument("--noise", choices=["poisson", "rn"])
    p.add_argument("--data", action="store_true", help="calibrate the 144-60-label data network")
    for name, func, help_ in (("sample-target", cmd_sample_target, "sample a translated, untrained target"),
                              ("train-target", cmd_train_target, "train on one target and test it"),
                              ("infer", cmd_infer, "train on one target and test conditional inference")):
        p = add(name, func, help_)
        p.add_argument("--noise", choices=["poisson", "rn"])
        p.add_argument("--target-id", type=int, default=0)
        if name != "sample-target":
            p.add_argument("--repetition", type=int, default=0)
        if name == "infer":
            p.add_argument("--evidence", help="clamped units, e.g. 0=0,1=1")
    p = add("bench-targets", cmd_bench_targets, "train and test a batch of targets")
    p.add_argument("--noise", choices=["poisson", "rn"])
    p.add_argument("--targets", type=int)
    p.add_argument("--repetitions", type=int)
    add("pretrain", cmd_pretrain, "pre-train the reference RBM")
    p = add("train-data", cmd_train_data, "in-the-loop training on images")
    p.add_argument("--rbm", help="pre-trained RBM record")
    for name, func, help_ in (("classify", cmd_classify, "classify the test set"),
                              ("complete", cmd_complete, "pattern completion of occluded images"),
                              ("dream", cmd_dream, "guided dreaming with clamped labels")):
        p = add(name, func, help_)
        p.add_argument("--weights", help="shadow_weights.npz from train-data")
        p.add_argument("--rbm", help="pre-trained RBM record (used when --weights is absent)")
        if name == "complete":
            p.add_argument("--scheme", choices=["salt_pepper", "patch"])
            p.add_argument("--fraction", type=float)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ex.ConfigurationError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
