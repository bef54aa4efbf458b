"""Command-line entry point: ``ipcd <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from ipcd import pcio
from ipcd.config import Config, load_config

log = logging.getLogger("ipcd")

COMMANDS = ("gen", "pld", "train", "infer", "retinex", "eval", "register", "relight", "edit")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _floats(text: str, n: int | None = None) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise UsageError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def _summary_path(out: Path) -> Path:
    return (out if out.is_dir() else out.parent) / "run_summary.json"


def _write_summary(out: Path, command: str, args, cfg: Config, results: dict) -> None:
    payload = {
        "command": command,
        "seed": args.seed,
        "arguments": {k: str(v) for k, v in sorted(vars(args).items()) if k not in ("func", "quiet")},
        "config": cfg.as_dict(),
        "results": results,
    }
    pcio.write_json_atomic(_summary_path(out), payload)


def _pld_grid(cfg: Config):
    from ipcd.projection import HemisphereGrid

    s = cfg.section("pld")
    return HemisphereGrid.regular(float(s["theta_step"]), float(s["phi_step"]), float(s["theta_max"]))


def _load_cloud(path) -> pcio.PointCloud:
    return pcio.load_ply(path)


# --------------------------------------------------------------------------- subcommands

def cmd_gen(args, cfg: Config) -> dict:
    from ipcd.dataset import GenConfig, generate_dataset

    g, p = cfg.section("gen"), cfg.section("pld")
    seed = args.seed if args.seed is not None else int(g["seed"])
    gcfg = GenConfig(assets=int(g["assets"]), train_assets=int(g["train_assets"]),
                     times=tuple(t.strip() for t in str(g["times"]).split(",") if t.strip()),
                     n_points=int(g["n_points"]), seed=seed, buildings_min=int(g["buildings_min"]),
                     buildings_max=int(g["buildings_max"]), compute_pld=bool(g["compute_pld"]),
                     image_size=int(p["image_size"]), point_size=float(p["point_size"]),
                     theta_step=float(p["theta_step"]), theta_max=float(p["theta_max"]), phi_step=float(p["phi_step"]))
    index = generate_dataset(args.out, gcfg)
    return {"train": index.train, "test": index.test, "times": index.times}


def cmd_pld(args, cfg: Config) -> dict:
    from ipcd.projection import compute_pld, save_luma_png, save_pld_csv

    p = cfg.section("pld")
    cloud = _load_cloud(args.input)
    pld = compute_pld(cloud, _pld_grid(cfg), int(p["image_size"]), float(p["point_size"]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_pld_csv(pld, out)
    if args.png:
        save_luma_png(pld, args.png)
    return {"cells": int(pld.grid.K), "csv": str(out)}


def _train_config(cfg: Config, seed):
    from ipcd.model import TrainConfig

    t = cfg.section("train")
    names = {f.name for f in fields(TrainConfig)}
    kw = {k: v for k, v in t.items() if k in names}
    if seed is not None:
        kw["seed"] = seed
    return TrainConfig(**kw)


def cmd_train(args, cfg: Config) -> dict:
    from ipcd.dataset import load_samples
    from ipcd.model import save_params, train, write_history_csv

    tcfg = _train_config(cfg, args.seed)
    samples = load_samples(args.data, "train")

    def progress(rec):
        log.info("iteration %d (%s) loss %.5f", rec["iteration"] + 1, rec["phase"], rec["total"])

    result = train(samples, tcfg, progress)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_params(result.params, out)
    write_history_csv(result.history, out.with_suffix(".history.csv"))
    tail = result.history[-min(100, len(result.history)):]
    return {"params": str(out), "iterations": tcfg.iterations, "final_loss": float(np.mean([r["total"] for r in tail]))}


def _write_prediction(out: Path, cloud: pcio.PointCloud, pred) -> None:
    out.mkdir(parents=True, exist_ok=True)
    pcio.save_ply(pcio.PointCloud(cloud.positions, np.clip(pred.albedo, 0, 1)), out / "albedo.ply", color_type="double")
    pcio.save_ply(pcio.PointCloud(cloud.positions, np.clip(pred.shade, 0, 1)), out / "shade.ply", color_type="double")
    pcio.save_ply(cloud, out / "decomposed.ply", color_type="double",
                  extra={"albedo": np.clip(pred.albedo, 0, 1), "shade": np.clip(pred.shade, 0, 1)})


def cmd_infer(args, cfg: Config) -> dict:
    from ipcd.model import infer, load_params
    from ipcd.projection import load_pld_csv

    params = load_params(args.params)
    cloud = _load_cloud(args.input)
    pld = load_pld_csv(args.pld) if args.pld else None
    pred = infer(cloud, pld, params, seed=args.seed or 0)
    _write_prediction(Path(args.out), cloud, pred)
    return {"points": len(cloud), "variant": params.config.variant}


def cmd_retinex(args, cfg: Config) -> dict:
    from ipcd.baselines import retinex_points

    r = cfg.section("retinex")
    cloud = _load_cloud(args.input)
    pred = retinex_points(cloud, int(r["k"]), float(r["tau"]), float(r["mu"]))
    _write_prediction(Path(args.out), cloud, pred)
    return {"points": len(cloud)}


def _predictor(model: str, params_path, cfg: Config, seed: int):
    """Map a model name to ``f(triplet, pld) -> Prediction``."""
    from ipcd import baselines
    from ipcd.model import Prediction, infer, load_params

    if model == "baseline_a":
        return lambda tr, pld: baselines.baseline_a(tr.cloud)
    if model == "baseline_s":
        return lambda tr, pld: baselines.baseline_s(tr.cloud)
    if model == "retinex":
        r = cfg.section("retinex")
        return lambda tr, pld: baselines.retinex_points(tr.cloud, int(r["k"]), float(r["tau"]), float(r["mu"]))
    if model == "truth":
        return lambda tr, pld: Prediction(tr.albedo, tr.shade)
    if model == "params":
        if not params_path:
            raise UsageError("--model params needs --params")
        params = load_params(params_path)
        return lambda tr, pld: infer(tr.cloud, pld, params, seed=seed)
    raise UsageError(f"unknown model {model!r}; choose baseline_a, baseline_s, retinex, truth or params")


def cmd_eval(args, cfg: Config) -> dict:
    from ipcd.dataset import load_entries
    from ipcd.evaluation import MetricReport, pair_f1, synthesize_annotations, write_annotations

    e = cfg.section("eval")
    model = args.model or str(e["model"])
    predict = _predictor(model, args.params, cfg, args.seed or 0)
    report = MetricReport()
    f1 = []
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, triplet, pld in load_entries(args.data, args.split or str(e["split"])):
        pred = predict(triplet, pld)
        report.add(name, pred.albedo, pred.shade, triplet.albedo, triplet.shade)
        if args.pairs:
            ann = synthesize_annotations(triplet.albedo, args.pairs, seed=args.seed or 0, delta=float(e["delta"]))
            write_annotations(ann, out / f"pairs_{name.replace('/', '_')}.csv")
            f1.append(pair_f1(pred.albedo, ann, float(e["delta"])))
    if not report.rows:
        raise DataError("the requested split has no entries")
    report.write_csv(out / "metrics.csv")
    if not args.quiet:
        print(report.table())
    results = {"model": model, **report.mean()}
    if f1:
        results["pair_f1"] = float(np.mean(f1))
        if not args.quiet:
            print(f"pair f1: {results['pair_f1']:.4f}")
    return results


def cmd_register(args, cfg: Config) -> dict:
    from ipcd.model import infer, load_params
    from ipcd.registration import ICPParams, make_registration_cases, register_cases, transform_error
    from ipcd.registration import registration_recall

    r = cfg.section("register")
    index = pcio.read_index(args.data)
    split = args.split or str(r["split"])
    colors_kind = args.colors or str(r["colors"])
    if colors_kind not in ("input", "albedo", "params"):
        raise UsageError(f"unknown color source {colors_kind!r}; choose input, albedo or params")
    if colors_kind == "params" and not args.params:
        raise UsageError("--colors params needs --params")
    params = load_params(args.params) if colors_kind == "params" else None
    assets, colors = {}, {}
    for asset, time in index.entries(split):
        d = index.path(asset, time)
        triplet = pcio.load_triplet(d)
        assets.setdefault(asset, {})[time] = triplet.cloud
        if colors_kind == "input":
            colors[(asset, time)] = triplet.cloud.colors
        elif colors_kind == "albedo":
            colors[(asset, time)] = triplet.albedo
        else:
            from ipcd.dataset import load_pld_for

            colors[(asset, time)] = infer(triplet.cloud, load_pld_for(d), params, seed=args.seed or 0).albedo
    seed = args.seed if args.seed is not None else int(r["seed"])
    cases = make_registration_cases(assets, tuple(_floats(str(r["overlaps"]))), seed=seed,
                                    max_points=int(r["max_points"]))
    icp = ICPParams(max_iterations=int(r["max_iterations"]), radius=float(r["radius"]),
                    color_weight=float(r["color_weight"]))
    results = register_cases(cases, colors, icp)
    rot, trans = float(r["rotation_threshold"]), float(r["translation_threshold"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "transforms.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["case", "overlap", "rotation_error_deg", "translation_error", "success",
                    *[f"t{i}{j}" for i in range(4) for j in range(4)]])
        for c, T in zip(cases, results):
            if T is None:
                w.writerow([c.name, c.overlap, "", "", 0, *[""] * 16])
                continue
            re_, te = transform_error(T, c.ground_truth)
            w.writerow([c.name, c.overlap, repr(re_), repr(te), int(re_ <= rot and te <= trans),
                        *map(repr, T.ravel().tolist())])
    recall = registration_recall(cases, results, rot, trans)
    by_overlap = {}
    for o in sorted({c.overlap for c in cases}, reverse=True):
        sel = [i for i, c in enumerate(cases) if c.overlap == o]
        by_overlap[o] = registration_recall([cases[i] for i in sel], [results[i] for i in sel], rot, trans)
    with open(out / "recall.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["overlap", "recall", "cases"])
        for o, v in by_overlap.items():
            w.writerow([o, repr(v), sum(c.overlap == o for c in cases)])
        w.writerow(["all", repr(recall), len(cases)])
    if not args.quiet:
        print(f"registration recall ({colors_kind} colors): {recall:.4f} over {len(cases)} cases")
    return {"colors": colors_kind, "recall": recall, "cases": len(cases),
            "recall_by_overlap": {str(k): v for k, v in by_overlap.items()}}


def cmd_relight(args, cfg: Config) -> dict:
    from ipcd.apps import relight

    alb = _load_cloud(args.albedo)
    shd = _load_cloud(args.shade)
    if len(alb) != len(shd):
        raise DataError(f"albedo has {len(alb)} points but shade has {len(shd)}")
    colors = relight(alb.colors, shd.colors)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pcio.save_ply(pcio.PointCloud(alb.positions, colors), out, color_type="double")
    return {"points": len(alb)}


def cmd_edit(args, cfg: Config) -> dict:
    from ipcd.apps import Box, edit_texture

    if (args.box is None) == (args.indices is None):
        raise UsageError("give exactly one of --box or --indices")
    if (args.color is None) == (args.hue is None):
        raise UsageError("give exactly one of --color or --hue")
    alb = _load_cloud(args.albedo)
    if args.box is not None:
        b = _floats(args.box, 6)
        selection = Box(tuple(b[:3]), tuple(b[3:]))
    elif Path(args.indices).is_file():
        selection = np.loadtxt(args.indices, dtype=np.int64, ndmin=1)
    else:
        selection = [int(v) for v in _floats(args.indices)]
    color = _floats(args.color, 3) if args.color is not None else None
    edited = edit_texture(alb.colors, selection, alb.positions, color=color, hue_shift=args.hue)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pcio.save_ply(pcio.PointCloud(alb.positions, edited), out, color_type="double")
    return {"points": len(alb), "edited": int(np.any(edited != alb.colors, axis=1).sum())}


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("--out", required=True, help="output file or directory")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--quiet", action="store_true")

    parser = _Parser(prog="ipcd", description="Intrinsic decomposition of colored point clouds.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="generate the synthetic dataset")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pld", parents=[common], help="compute a PLD map for a PLY cloud")
    p.add_argument("input")
    p.add_argument("--png", help="also write a luma heatmap")
    p.set_defaults(func=cmd_pld)

    p = sub.add_parser("train", parents=[common], help="train a model on a generated dataset")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="decompose a PLY cloud with trained parameters")
    p.add_argument("input")
    p.add_argument("--params", required=True)
    p.add_argument("--pld", help="PLD CSV for the input (needed by the full variant)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("retinex", parents=[common], help="decompose a PLY cloud with graph Retinex")
    p.add_argument("input")
    p.set_defaults(func=cmd_retinex)

    p = sub.add_parser("eval", parents=[common], help="metric report on a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--model", help="baseline_a | baseline_s | retinex | truth | params")
    p.add_argument("--params")
    p.add_argument("--split")
    p.add_argument("--pairs", type=int, default=0, help="synthesize this many annotation pairs per entry")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("register", parents=[common], help="colored ICP recall over generated cases")
    p.add_argument("--data", required=True)
    p.add_argument("--colors", help="input | albedo | params")
    p.add_argument("--params")
    p.add_argument("--split")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("relight", parents=[common], help="combine an albedo cloud with a new shade cloud")
    p.add_argument("--albedo", required=True)
    p.add_argument("--shade", required=True)
    p.set_defaults(func=cmd_relight)

    p = sub.add_parser("edit", parents=[common], help="recolor part of an albedo cloud")
    p.add_argument("--albedo", required=True)
    p.add_argument("--box", help="x0,y0,z0,x1,y1,z1")
    p.add_argument("--indices", help="comma list or a file of point indices")
    p.add_argument("--color", help="r,g,b in [0,1]")
    p.add_argument("--hue", type=float, help="hue rotation in degrees")
    p.set_defaults(func=cmd_edit)
    return parser


def main(argv=None) -> int:
    from ipcd.apps import SelectionError
    from ipcd.model import ConfigError, MissingPLDError

    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
        try:
            cfg = load_config(args.config, args.overrides)
        except FileNotFoundError as e:
            raise DataError(str(e)) from e
        except ValueError as e:
            raise UsageError(str(e)) from e
        results = args.func(args, cfg)
        _write_summary(Path(args.out), args.command, args, cfg, results)
        return 0
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"ipcd: configuration error: {e}", file=sys.stderr)
        return 1
    except (DataError, MissingPLDError, SelectionError, pcio.PLYFormatError, pcio.EmptyCloudError,
            FileNotFoundError, KeyError, ValueError) as e:
        print(f"ipcd: data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
