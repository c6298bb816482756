"""Command-line interface.

Every command takes an optional INI config; the effective configuration,
defaults included, is written next to the outputs as ``config.ini``. Failures
print one ``error: <kind>: <message>`` line to stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench
from .config import ConfigError, dump_ini, from_section, read_ini, section
from .estimator import (
    EstimatorConfig,
    estimate_pose,
    format_diagnostics,
    read_correspondences,
)
from .geometry import DegenerateError, pose_error
from .matcher import MatcherConfig, match, read_keypoints, write_keypoints, write_matches
from .prior import PriorConfig
from .scorer import TrainConfig, read_training_file, save_weights, train, write_training_file
from .simulator import GridConfig, SceneConfig, generate_dataset, read_dataset, write_dataset

DATASET_FILE = "dataset.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dataset_path(path) -> Path:
    p = Path(path)
    return p / DATASET_FILE if p.is_dir() else p


def _load_pairs(path):
    p = _dataset_path(path)
    if not p.is_file():
        raise FileNotFoundError(f"dataset not found: {p}")
    return read_dataset(p)


def _pick(pairs, pair_id):
    for p in pairs:
        if p.pair_id == pair_id:
            return p
    raise KeyError(f"pair {pair_id} not in dataset")


def _configs(path):
    parser = read_ini(path) if path else None
    return {
        "scene": from_section(SceneConfig, section(parser, "scene")),
        "grid": from_section(GridConfig, section(parser, "grid")),
        "prior": from_section(PriorConfig, section(parser, "prior")),
        "matcher": from_section(MatcherConfig, section(parser, "matcher")),
        "estimator": from_section(EstimatorConfig, section(parser, "estimator")),
        "train": from_section(TrainConfig, section(parser, "train")),
        "bench": from_section(bench.BenchConfig, section(parser, "bench")),
        "dataset": dict(section(parser, "dataset")),
    }


def _prior_for(pair, source, prior_cfg, seed):
    if source == "none":
        return None
    return bench.make_prior(pair, source, replace(prior_cfg, source=source), seed)


def _out(path):
    return open(path, "w") if path else sys.stdout


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args, cfgs):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    count = int(cfgs["dataset"].get("count", args.count))
    pairs = generate_dataset(cfgs["scene"], count)
    write_dataset(out / DATASET_FILE, pairs, cfgs["scene"])
    dump_ini(out / "config.ini", {"scene": cfgs["scene"], "dataset": {"count": count}})
    print(f"wrote {count} pairs to {out / DATASET_FILE}")


def cmd_match(args, cfgs):
    pairs, _ = _load_pairs(args.dataset)
    pair = _pick(pairs, args.pair)
    kA = read_keypoints(args.keypoints_a) if args.keypoints_a else pair.keypoints_a
    kB = read_keypoints(args.keypoints_b) if args.keypoints_b else pair.keypoints_b
    mcfg = cfgs["matcher"] if args.weight is None else replace(cfgs["matcher"], weight=args.weight)
    prior = _prior_for(pair, args.prior, cfgs["prior"], cfgs["prior"].seed + pair.pair_id)
    result = match(kA, kB, pair.K_A, pair.K_B, prior, mcfg)
    if args.export_keypoints:
        d = Path(args.export_keypoints)
        d.mkdir(parents=True, exist_ok=True)
        write_keypoints(d / f"pair{pair.pair_id}_a.txt", kA)
        write_keypoints(d / f"pair{pair.pair_id}_b.txt", kB)
    fh = _out(args.out)
    try:
        write_matches(fh, result)
    finally:
        if fh is not sys.stdout:
            fh.close()


def cmd_estimate(args, cfgs):
    pairs, _ = _load_pairs(args.dataset)
    ecfg = cfgs["estimator"]
    if args.hypotheses is not None:
        ecfg = replace(ecfg, hypotheses=args.hypotheses, top_k=min(ecfg.top_k, args.hypotheses))
    if args.scorer is not None:
        ecfg = replace(ecfg, scorer=args.scorer)
    if args.weights is not None:
        ecfg = replace(ecfg, weights=args.weights)
    if ecfg.scorer == "learned" and not ecfg.weights:
        raise UsageError("--scorer learned needs --weights")
    mcfg = cfgs["matcher"] if args.weight is None else replace(cfgs["matcher"], weight=args.weight)
    if args.pair is not None:
        pairs = [_pick(pairs, args.pair)]
    if args.correspondences and len(pairs) != 1:
        raise UsageError("--correspondences needs --pair")
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    rows, diag_lines = [], []
    for pair in pairs:
        prior = _prior_for(pair, args.prior, cfgs["prior"], cfgs["prior"].seed + pair.pair_id)
        if args.correspondences:
            uvA, uvB, _ = read_correspondences(args.correspondences)
            dA = dB = None
        else:
            m = match(pair.keypoints_a, pair.keypoints_b, pair.K_A, pair.K_B, prior, mcfg)
            uvA, uvB = pair.keypoints_a.positions[m.index_a], pair.keypoints_b.positions[m.index_b]
            dA, dB = pair.keypoints_a.descriptors[m.index_a], pair.keypoints_b.descriptors[m.index_b]
        try:
            res = estimate_pose(uvA, uvB, dA, dB, prior, pair.K_A, pair.K_B, replace(ecfg, seed=ecfg.seed + pair.pair_id))
        except DegenerateError as exc:
            rows.append(f"{pair.pair_id} failed")
            diag_lines.append(f"[pair {pair.pair_id}]\nstatus failed\nreason {' '.join(str(exc).split())}\n")
            continue
        r_err, t_err, err = pose_error(res.pose, pair.pose)
        vals = np.concatenate([res.pose.quaternion, res.pose.translation, [r_err, t_err]])
        rows.append(f"{pair.pair_id} " + " ".join(repr(float(v)) for v in vals))
        diag = dict(res.diagnostics, status="ok", rotation_error_deg=r_err,
                    translation_error_deg=t_err, pose_error_deg=err, inliers=int(res.inlier_mask.sum()))
        diag_lines.append(f"[pair {pair.pair_id}]\n" + format_diagnostics(diag))
    header = "# pair_id qx qy qz qw tx ty tz rotation_error_deg translation_error_deg\n"
    text = header + "\n".join(rows) + "\n"
    if out:
        (out / "poses.txt").write_text(text)
        (out / "diagnostics.txt").write_text("".join(diag_lines))
        dump_ini(out / "config.ini", {"prior": cfgs["prior"], "matcher": mcfg, "estimator": ecfg,
                                      "run": {"prior_source": args.prior}})
    else:
        sys.stdout.write(text)
        sys.stdout.write("".join(diag_lines))


def cmd_train(args, cfgs):
    tcfg = cfgs["train"]
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    ecfg = cfgs["estimator"]
    if args.hypotheses is not None:
        ecfg = replace(ecfg, hypotheses=args.hypotheses, top_k=min(ecfg.top_k, args.hypotheses))
    mcfg = cfgs["matcher"] if args.weight is None else replace(cfgs["matcher"], weight=args.weight)
    if args.features and Path(args.features).is_file() and not args.dataset:
        records = read_training_file(args.features)
    else:
        if not args.dataset:
            raise UsageError("train-scorer needs --dataset or an existing --features file")
        pairs, _ = _load_pairs(args.dataset)
        records = []
        for pair in pairs:
            prior = _prior_for(pair, args.prior, cfgs["prior"], cfgs["prior"].seed + pair.pair_id)
            if prior is None:
                raise UsageError("training features need a prior")
            group = bench.pair_training_group(pair, prior, mcfg, replace(ecfg, seed=ecfg.seed + pair.pair_id))
            if group is not None:
                records.append((pair.pair_id, *group))
        if args.features:
            write_training_file(args.features, records)
    if not records:
        raise DegenerateError("no training records could be built")
    weights, curve = train([(X, y) for _, X, y in records], tcfg)
    save_weights(weights, args.out)
    dump_ini(Path(args.out).with_suffix(".ini"), {"train": tcfg, "estimator": ecfg, "matcher": mcfg,
                                                 "prior": cfgs["prior"]})
    for i, loss in enumerate(curve):
        print(f"epoch {i + 1} loss {loss!r}")


def cmd_bench(args, cfgs):
    bcfg = cfgs["bench"]
    if args.variants:
        bcfg = replace(bcfg, variants=args.variants)
    parser = read_ini(args.config) if args.config else None
    scene = from_section(SceneConfig, section(parser, "scene"), base=bench.STANDARD_SCENE)
    ecfg = None
    if parser is not None and parser.has_section("estimator"):
        ecfg = from_section(EstimatorConfig, section(parser, "estimator"),
                            base=EstimatorConfig(hypotheses=bcfg.hypotheses, top_k=min(100, bcfg.hypotheses)))
    report = bench.run_benchmark(bcfg, scene, cfgs["prior"], cfgs["matcher"], ecfg)
    paths = bench.emit_report(report, args.out, "csv")
    c = report.config
    dump_ini(Path(args.out) / "config.ini", {k: c[k] for k in ("bench", "scene", "prior", "matcher", "estimator")})
    for rep in report.variants:
        aucs = " ".join(f"{a:.4f}" for a in rep.auc(report.thresholds))
        print(f"{rep.variant.name:10s} auc {aucs} precision {rep.precision():.4f} recall {rep.recall():.4f}")
    print("wrote " + " ".join(str(p) for p in paths))


def cmd_report(args, cfgs):
    thresholds = (5.0, 10.0, 20.0)
    echo = Path(args.input) / "config.ini"
    if echo.is_file():
        thresholds = from_section(bench.BenchConfig, section(read_ini(echo), "bench")).thresholds
    report = bench.read_report(args.input, thresholds)
    if args.format == "csv":
        cols = [f"auc{t:g}" for t in thresholds]
        print(",".join(["variant", *cols, "precision", "recall"]))
        for rep in report.variants:
            vals = [*rep.auc(thresholds), rep.precision(), rep.recall()]
            print(",".join([rep.variant.name, *(repr(float(v)) for v in vals)]))
    else:
        for rep in report.variants:
            print(f"[{rep.variant.name}]")
            for t, a in zip(thresholds, rep.auc(thresholds)):
                print(f"auc{t:g} {a!r}")
            print(f"precision {rep.precision()!r}\nrecall {rep.recall()!r}\npairs {len(rep.records)}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="priorpose", description="Motion-prior guided two-view pose estimation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=10)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("match", help="match one pair and print 'i j confidence' lines")
    s.add_argument("--dataset", required=True)
    s.add_argument("--pair", type=int, required=True)
    s.add_argument("--prior", choices=("oracle", "correlation", "none"), default="oracle")
    s.add_argument("--lambda", dest="weight", type=float)
    s.add_argument("--config")
    s.add_argument("--keypoints-a")
    s.add_argument("--keypoints-b")
    s.add_argument("--export-keypoints")
    s.add_argument("--out")
    s.set_defaults(func=cmd_match)

    s = sub.add_parser("estimate", help="estimate poses and write diagnostics")
    s.add_argument("--dataset", required=True)
    s.add_argument("--scorer", choices=("inlier", "learned"))
    s.add_argument("--weights")
    s.add_argument("--hypotheses", type=int)
    s.add_argument("--pair", type=int)
    s.add_argument("--prior", choices=("oracle", "correlation", "none"), default="oracle")
    s.add_argument("--lambda", dest="weight", type=float)
    s.add_argument("--correspondences")
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("train-scorer", help="train the hypothesis scorer")
    s.add_argument("--dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--hypotheses", type=int)
    s.add_argument("--prior", choices=("oracle", "correlation"), default="oracle")
    s.add_argument("--lambda", dest="weight", type=float)
    s.add_argument("--features", help="training record file to write (or read when no dataset is given)")
    s.add_argument("--config")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("bench", help="run the ablation benchmark")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--variants", help="all, or a comma-separated subset of " + ",".join(bench.VARIANTS))
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("report", help="summarize a bench output directory")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--format", choices=("csv", "text"), default="csv")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfgs = _configs(getattr(args, "config", None))
        args.func(args, cfgs)
    except UsageError as exc:
        print(f"error: usage: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, KeyError, OSError, DegenerateError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {type(exc).__name__}: {' '.join(str(msg).split())}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
