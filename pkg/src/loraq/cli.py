"""Command-line front end.

Four subcommands: ``quantize`` turns LQT1 weight files into LRQB bundles,
``evaluate`` reports reconstruction/matmul errors for a bundle against its
source weight, ``ablate`` runs the 2x2 optimization/rotation toggle grid,
and ``inspect`` dumps a bundle's manifest and bit accounting.

Every flag has a config-file twin (JSON, see ``CONFIG_KEYS``); flags win
over the file.  Results go to stdout, diagnostics to stderr.  On failure
the last stderr line is machine-parsable: ``error: [E_XXX] message``.
Exit codes: 0 success, 2 usage/config, 3 file or codec format, 4 shape
mismatch, 5 numeric failure, 1 internal.

``LORAQ_THREADS`` caps parallelism across input weights; output order is
always input order.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bundle_io
from .errors import (
    FormatError,
    LoraqError,
    NumericError,
    ParameterError,
    ShapeError,
)
from .formats import FormatSpec, make_format
from .pipeline import (
    DEFAULT_ABSORB_STEPS,
    DEFAULT_ROTATION_STEPS,
    LayerBundle,
    assemble_layer,
    error_report,
    reconstruct_weight,
)
from .smoothing import compute_channel_stats

__all__ = ["main", "entrypoint", "CONFIG_KEYS"]

CONFIG_KEYS = (
    "q1",
    "q2",
    "budget",
    "rank",
    "act_format",
    "lr_act_format",
    "optimized_lr",
    "rotations",
    "steps",
    "lr",
    "rot_steps",
    "rot_lr",
    "seed",
    "stats",
    "out",
)

_DEFAULT_BUDGET = 512


@dataclass
class RunConfig:
    q1: FormatSpec
    q2: FormatSpec
    budget: int | None
    rank: int | None
    act_format: FormatSpec | None
    lr_act_format: FormatSpec | None
    optimized_lr: bool
    rotations: bool
    steps: int | None
    lr: float | None
    rot_steps: int | None
    rot_lr: float | None
    seed: int
    stats: str | None
    out: str | None


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ParameterError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise FormatError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(data) - set(CONFIG_KEYS))
    if unknown:
        raise ParameterError(f"unknown config keys: {', '.join(unknown)}")
    return data


def _merge_config(args: argparse.Namespace) -> RunConfig:
    file_cfg = _load_config_file(getattr(args, "config", None))

    def pick(flag_value, key, default=None):
        if flag_value is not None:
            return flag_value
        if key in file_cfg and file_cfg[key] is not None:
            return file_cfg[key]
        return default

    budget = pick(getattr(args, "budget", None), "budget")
    rank = pick(getattr(args, "rank", None), "rank")
    if budget is not None and rank is not None:
        raise ParameterError("budget and rank are mutually exclusive")
    if budget is None and rank is None:
        budget = _DEFAULT_BUDGET

    # boolean toggles: the --no-* flag forces False, else the file decides
    if getattr(args, "no_optimize", None):
        optimized_lr = False
    else:
        optimized_lr = bool(file_cfg.get("optimized_lr", True))
    if getattr(args, "no_rotate", None):
        rotations = False
    else:
        rotations = bool(file_cfg.get("rotations", True))

    act_name = pick(getattr(args, "act_format", None), "act_format")
    lr_act_name = pick(getattr(args, "lr_act_format", None), "lr_act_format")
    return RunConfig(
        q1=make_format(str(pick(getattr(args, "q1", None), "q1", "SINT4"))),
        q2=make_format(str(pick(getattr(args, "q2", None), "q2", "SINT4"))),
        budget=None if budget is None else int(budget),
        rank=None if rank is None else int(rank),
        act_format=None if act_name is None else make_format(str(act_name)),
        lr_act_format=None if lr_act_name is None else make_format(str(lr_act_name)),
        optimized_lr=optimized_lr,
        rotations=rotations,
        steps=_maybe_int(pick(getattr(args, "steps", None), "steps")),
        lr=_maybe_float(pick(getattr(args, "lr", None), "lr")),
        rot_steps=_maybe_int(pick(getattr(args, "rot_steps", None), "rot_steps")),
        rot_lr=_maybe_float(pick(getattr(args, "rot_lr", None), "rot_lr")),
        seed=int(pick(getattr(args, "seed", None), "seed", 0)),
        stats=pick(getattr(args, "stats", None), "stats"),
        out=pick(getattr(args, "out", None), "out"),
    )


def _maybe_int(v):
    return None if v is None else int(v)


def _maybe_float(v):
    return None if v is None else float(v)


def _load_calibration(path: str | None):
    if path is None:
        return None
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"LQS1":
        return bundle_io.load_stats(path)
    return bundle_io.load_tensor(path)


def _assemble_from_config(w: np.ndarray, cfg: RunConfig, seed: int) -> LayerBundle:
    bundle = assemble_layer(
        w,
        cfg.q1,
        cfg.q2,
        budget=cfg.budget,
        rank=cfg.rank,
        optimized_lr=cfg.optimized_lr,
        rotations=cfg.rotations,
        calibration=_load_calibration(cfg.stats),
        seed=seed,
        absorb_steps=cfg.steps,
        absorb_lr=cfg.lr,
        rotation_steps=cfg.rot_steps,
        rotation_lr=cfg.rot_lr,
    )
    bundle.meta.act_format = None if cfg.act_format is None else cfg.act_format.name
    bundle.meta.lowrank_act_format = (
        None if cfg.lr_act_format is None else cfg.lr_act_format.name
    )
    return bundle


def _out_path(inputs: list[str], out: str | None, index: int) -> Path:
    src = Path(inputs[index])
    if out is None:
        return src.with_suffix(".lrqb")
    out_path = Path(out)
    if len(inputs) == 1 and not out_path.is_dir():
        return out_path
    out_path.mkdir(parents=True, exist_ok=True)
    return out_path / src.with_suffix(".lrqb").name


def _parallel_map(job, n_items: int):
    threads = 1
    env = os.environ.get("LORAQ_THREADS")
    if env:
        try:
            threads = max(1, int(env))
        except ValueError:
            raise ParameterError(f"LORAQ_THREADS must be an integer, got {env!r}")
    if threads == 1 or n_items <= 1:
        return [job(i) for i in range(n_items)]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(job, range(n_items)))


def _quantize_summary(name: str, bundle: LayerBundle, report) -> dict:
    meta = bundle.meta
    return {
        "weight": name,
        "shape": list(meta.shape),
        "rank": meta.rank,
        "rank_requested": meta.rank_requested,
        "q1": meta.q1.name,
        "q2": meta.q2.name,
        "absorb": meta.absorb,
        "rotation": meta.rotation,
        "weight_err": report.weight_err,
        "weight_err_rel": report.weight_err_rel,
        "budget": meta.budget_accounting(),
    }


def _print_quantize_summary(summary: dict) -> None:
    b = summary["budget"]
    print(f"{summary['weight']}: shape {summary['shape'][0]}x{summary['shape'][1]}"
          f" q1={summary['q1']} q2={summary['q2']} rank={summary['rank']}")
    absorb = summary["absorb"]
    print(f"  absorb: steps={absorb['steps']} lr={absorb['learning_rate']:g}"
          f" loss {absorb['init_loss']:.6e} -> {absorb['best_loss']:.6e}")
    if summary["rotation"] is not None:
        rot = summary["rotation"]
        print(f"  rotation: steps={rot['steps']} lr={rot['learning_rate']:g}"
              f" loss {rot['init_loss']:.6e} -> {rot['best_loss']:.6e}")
    print(f"  weight error {summary['weight_err']:.6e}"
          f" (rel {summary['weight_err_rel']:.6e})")
    print(f"  lowrank payload bits/channel: {b['payload_bits_per_channel']}"
          f" (budget: {b['budget_bits_per_channel']})"
          f" scale overhead bits/channel: {b['scale_bits_per_channel_left']}")


def cmd_quantize(args: argparse.Namespace) -> int:
    cfg = _merge_config(args)
    inputs = list(args.weights)
    weights = [bundle_io.load_tensor(p) for p in inputs]

    def job(i: int):
        bundle = _assemble_from_config(weights[i], cfg, cfg.seed + i)
        report = error_report(weights[i], np.eye(weights[i].shape[0]), bundle)
        return bundle, report

    results = _parallel_map(job, len(inputs))
    summaries = []
    for i, (bundle, report) in enumerate(results):
        path = _out_path(inputs, cfg.out, i)
        bundle_io.save_bundle(path, bundle)
        summary = _quantize_summary(inputs[i], bundle, report)
        summary["out"] = str(path)
        summaries.append(summary)
    if args.machine:
        print(json.dumps(summaries, indent=2, sort_keys=True))
    else:
        for summary in summaries:
            _print_quantize_summary(summary)
            print(f"  wrote {summary['out']}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    bundle = bundle_io.load_bundle(args.bundle)
    w = bundle_io.load_tensor(args.weight)
    if args.activations is not None:
        x = bundle_io.load_tensor(args.activations)
    else:
        x = np.eye(w.shape[0])
    act = None
    if args.act_format is not None:
        act = make_format(args.act_format)
    elif bundle.meta.act_format is not None:
        act = make_format(bundle.meta.act_format)
    report = error_report(w, x, bundle, act)
    if args.machine:
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    else:
        for key, value in report.to_dict().items():
            print(f"{key}: {value:.12e}")
        print("bound holds: matmul_err <= bound_rhs")
    return 0


_GRID = ((True, True), (True, False), (False, True), (False, False))


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _merge_config(args)
    inputs = list(args.weights)
    weights = [bundle_io.load_tensor(p) for p in inputs]

    def job(i: int):
        row = []
        for optimized, rotated in _GRID:
            bundle = assemble_layer(
                weights[i],
                cfg.q1,
                cfg.q2,
                budget=cfg.budget,
                rank=cfg.rank,
                optimized_lr=optimized,
                rotations=rotated,
                seed=cfg.seed + i,
                absorb_steps=cfg.steps,
                absorb_lr=cfg.lr,
                rotation_steps=cfg.rot_steps,
                rotation_lr=cfg.rot_lr,
            )
            report = error_report(weights[i], np.eye(weights[i].shape[0]), bundle)
            row.append((report.weight_err, report.weight_err_rel))
        return row

    rows = _parallel_map(job, len(inputs))
    cells = []
    for k, (optimized, rotated) in enumerate(_GRID):
        errs = [rows[i][k][0] for i in range(len(inputs))]
        rels = [rows[i][k][1] for i in range(len(inputs))]
        cells.append(
            {
                "optimized_lr": optimized,
                "rotations": rotated,
                "mean_weight_err": float(np.mean(errs)),
                "mean_weight_err_rel": float(np.mean(rels)),
            }
        )
    if args.machine:
        print(json.dumps({"weights": inputs, "cells": cells}, indent=2,
                         sort_keys=True))
    else:
        print(f"{'optimized_lr':>12} {'rotations':>9} {'mean_weight_err':>16} "
              f"{'mean_rel':>12}")
        for cell in cells:
            print(f"{'yes' if cell['optimized_lr'] else 'no':>12} "
                  f"{'yes' if cell['rotations'] else 'no':>9} "
                  f"{cell['mean_weight_err']:>16.6e} "
                  f"{cell['mean_weight_err_rel']:>12.6e}")
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    bundle = bundle_io.load_bundle(args.bundle)
    meta = bundle.meta
    accounting = meta.budget_accounting()
    info = {
        "meta": meta.to_dict(),
        "gamma": bundle.gamma is not None,
        "chunks": {
            "residual_code_bytes": int(bundle.residual.codes.size),
            "residual_scale_count": int(bundle.residual.scales.size),
            "left_code_bytes": int(bundle.lowrank_left.codes.size),
            "right_code_bytes": int(bundle.lowrank_right.codes.size),
        },
        "budget": accounting,
    }
    if args.machine:
        print(json.dumps(info, indent=2, sort_keys=True))
        return 0
    print(f"bundle: {args.bundle}")
    d, n = meta.shape
    print(f"shape: {d}x{n}  rank: {meta.rank} (requested {meta.rank_requested})")
    print(f"q1: {meta.q1.name}  q2: {meta.q2.name}")
    print(f"toggles: optimized_lr={meta.optimized_lr} rotations={meta.rotations}")
    print(f"seed: {meta.seed}")
    print(f"smoothing: {meta.smoothing}")
    print(f"absorb: {meta.absorb}")
    print(f"rotation: {meta.rotation}")
    print(f"gamma stored: {bundle.gamma is not None}")
    print(f"lowrank payload bits/channel: {accounting['payload_bits_per_channel']}")
    print(f"budget bits/channel: {accounting['budget_bits_per_channel']}")
    print(f"scale overhead bits/channel (left factor): "
          f"{accounting['scale_bits_per_channel_left']}")
    print(f"total scale bits (both factors): {accounting['total_scale_bits']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loraq",
        description="Quantize dense weight matrices into a 4-bit residual "
        "plus a quantized low-rank compensation branch.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_flags(p, with_stats=True):
        p.add_argument("--config", help="JSON config file; flags win over it")
        p.add_argument("--q1", help="residual branch format (default SINT4)")
        p.add_argument("--q2", help="low-rank branch format (default SINT4)")
        p.add_argument("--budget", type=int, help="bits/channel for the low-rank branch")
        p.add_argument("--rank", type=int, help="explicit rank (excludes --budget)")
        p.add_argument("--act-format", dest="act_format",
                       help="activation format recorded for evaluation")
        p.add_argument("--lr-act-format", dest="lr_act_format",
                       help="low-rank branch activation format")
        p.add_argument("--no-optimize", dest="no_optimize", action="store_const",
                       const=True, help="skip factor optimization (SVD init only)")
        p.add_argument("--no-rotate", dest="no_rotate", action="store_const",
                       const=True, help="skip rotation optimization")
        p.add_argument("--steps", type=int, help="factor optimization steps")
        p.add_argument("--lr", type=float, help="factor optimization learning rate")
        p.add_argument("--rot-steps", dest="rot_steps", type=int,
                       help="rotation optimization steps")
        p.add_argument("--rot-lr", dest="rot_lr", type=float,
                       help="rotation optimization learning rate")
        p.add_argument("--seed", type=int, help="base seed (per-weight seeds derive from it)")
        if with_stats:
            p.add_argument("--stats", help="calibration file: LQT1 activations "
                           "(grid-searched smoothing) or LQS1 statistics")
        p.add_argument("--machine", action="store_true",
                       help="machine-readable JSON output")

    q = sub.add_parser("quantize", help="quantize LQT1 weights into LRQB bundles")
    q.add_argument("weights", nargs="+", help="input LQT1 weight files")
    add_run_flags(q)
    q.add_argument("--out", help="output file (single input) or directory")
    q.set_defaults(func=cmd_quantize)

    e = sub.add_parser("evaluate", help="report errors of a bundle vs its source weight")
    e.add_argument("bundle", help="LRQB bundle file")
    e.add_argument("weight", help="LQT1 source weight file")
    e.add_argument("--activations", help="optional LQT1 activation file")
    e.add_argument("--act-format", dest="act_format",
                   help="activation quantization format")
    e.add_argument("--machine", action="store_true",
                   help="machine-readable JSON output")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="run the 2x2 optimization/rotation grid")
    a.add_argument("weights", nargs="+", help="input LQT1 weight files")
    add_run_flags(a, with_stats=False)
    a.set_defaults(func=cmd_ablate, stats=None, out=None)

    i = sub.add_parser("inspect", help="dump a bundle's manifest and accounting")
    i.add_argument("bundle", help="LRQB bundle file")
    i.add_argument("--machine", action="store_true",
                   help="machine-readable JSON output")
    i.set_defaults(func=cmd_inspect)
    return parser


def _classify(exc: Exception) -> tuple[str, int]:
    if isinstance(exc, ShapeError):
        return "E_SHAPE", 4
    if isinstance(exc, FormatError):
        return "E_FORMAT", 3
    if isinstance(exc, ParameterError):
        return "E_CONFIG", 2
    if isinstance(exc, NumericError):
        return "E_NUMERIC", 5
    if isinstance(exc, OSError):
        return "E_FORMAT", 3
    return "E_INTERNAL", 1


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else 2
    try:
        return args.func(args)
    except (LoraqError, OSError) as exc:
        code_name, code = _classify(exc)
        print(f"error: [{code_name}] {exc}", file=sys.stderr)
        return code


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
