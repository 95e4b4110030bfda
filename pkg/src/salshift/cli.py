"""Command-line front end: train, convert, eval, bench, heatmap.

Every artifact lands under ``--out`` with a fixed name. Failures print one
line ``salshift: error: <Type>: <message>`` to stderr and exit nonzero
(2 for usage errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

import numpy as np

from . import data as data_mod
from .analysis import mask_heatmap, position_histogram, positions_histogram
from .convert import ShiftInference, profile
from .model import Checkpoint, convert_network, network_checkpoint
from .sal import SalLayer
from .shift import ShiftConv, ShiftLayer, shift_bench
from .train import TrainConfig, evaluate, load_data, train

DEFAULT_BENCH = "8,16,16,32,32,3;8,16,16,32,32,5;8,32,32,16,16,3"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _data_section(arg: str) -> dict:
    if arg == "planted":
        return {"kind": "planted"}
    if os.path.isfile(arg):
        with open(arg, "rb") as fh:
            magic = fh.read(8)
        if magic == b"SALDATA1":
            return {"kind": "file", "path": arg}
    return {"kind": "cifar", "path": arg}


def _apply_overrides(cfg: dict, args) -> dict:
    for flag, key in (("epochs", "epochs"), ("t0", "t0"), ("tf", "tf"), ("alpha", "alpha"), ("seed", "seed"),
                      ("batch", "batch"), ("lr0", "lr0")):
        value = getattr(args, flag)
        if value is not None:
            cfg[key] = value
    if args.data is not None:
        section = _data_section(args.data)
        base = cfg.get("data", {})
        if base.get("kind") == section["kind"]:
            # same kind of data: keep the config's options, swap only the source
            section = {**base, **section}
        cfg["data"] = section
    if args.k is not None:
        for layer in cfg.get("model", {}).get("layers", []):
            if layer.get("kind") == "sal" or (layer.get("kind") == "residual" and layer.get("conv") == "sal"):
                layer["k"] = args.k
    return cfg


def cmd_train(args) -> dict:
    cfg = {}
    if args.config:
        with open(args.config) as fh:
            cfg = json.load(fh)
    cfg = _apply_overrides(cfg, args)
    if "model" not in cfg or "data" not in cfg:
        raise ValueError("training needs a model and a data section (use --config)")
    config = TrainConfig.from_dict(cfg)
    resume = Checkpoint.load(args.resume) if args.resume else None
    os.makedirs(args.out, exist_ok=True)
    ckpt = train(config, args.out, resume)
    sched = ckpt.meta["schedule"]
    return {"checkpoint": os.path.join(args.out, "model.ckpt"), "epoch": ckpt.meta["epoch"],
            "step": ckpt.meta["step"], "alpha": sched["alpha"], "t": sched["t"]}


def cmd_convert(args) -> dict:
    ckpt = Checkpoint.load(args.checkpoint)
    net = ckpt.build()
    gaps: List[float] = []
    converted = convert_network(net, verify=True, report=gaps)
    meta = {k: v for k, v in ckpt.meta.items() if k in ("config", "epoch", "step")}
    meta["converted_from"] = os.path.basename(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    out_ckpt = os.path.join(args.out, "model.ckpt")
    network_checkpoint(converted, meta).save(out_ckpt)
    report = profile(converted, tuple(converted.spec.input_shape))
    report.to_json(os.path.join(args.out, "cost.json"))
    print(report.table(), file=sys.stderr)
    return {"checkpoint": out_ckpt, "cost": os.path.join(args.out, "cost.json"), "params": report.params,
            "flops": report.flops, "shift_index_bits": report.shift_index_bits,
            "max_soft_deviation": max(gaps) if gaps else 0.0}


def cmd_eval(args) -> dict:
    ckpt = Checkpoint.load(args.checkpoint)
    net = ckpt.build()
    if args.data is not None:
        section = _data_section(args.data)
        if section["kind"] == "planted":
            section = ckpt.meta.get("config", {}).get("data", section)
        x, y = load_data(section, "test")
    elif "config" in ckpt.meta:
        x, y = load_data(ckpt.meta["config"]["data"], "test")
    else:
        raise ValueError("no evaluation data: pass --data")
    return {"accuracy": evaluate(net, x, y), "samples": int(len(x))}


def _parse_shapes(text: str):
    shapes = []
    for part in text.split(";"):
        dims = [int(v) for v in part.split(",")]
        if len(dims) != 6:
            raise ValueError(f"bench shape {part!r} must be N,C,D,H,W,S")
        shapes.append(tuple(dims))
    return shapes


def cmd_bench(args) -> dict:
    report = shift_bench(_parse_shapes(args.shapes), args.repetitions, args.seed or 0)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "bench.csv")
    report.to_csv(path)
    speedups = {}
    for shape in dict.fromkeys(r.shape for r in report.rows):
        t = {r.kernel: r.ns_per_call for r in report.rows if r.shape == shape}
        speedups[shape] = t["conv"] / t["shift"]
    return {"bench": path, "measured_speedup": speedups}


def cmd_heatmap(args) -> dict:
    ckpt = Checkpoint.load(args.checkpoint)
    net = ckpt.build()
    os.makedirs(args.out, exist_ok=True)
    written = []
    idx = 0
    for module in net.modules():
        layer_id = str(idx)
        if isinstance(module, SalLayer):
            t = args.t if args.t is not None else net.schedule.t
            written += mask_heatmap(module.attention.data, t, layer_id).export(args.out)
            from .convert import binarize

            shifted = binarize(module)
            if isinstance(shifted, ShiftLayer):
                written += position_histogram(shifted.table, layer_id).export(args.out)
            else:
                written += positions_histogram(shifted.positions, shifted.s, layer_id).export(args.out)
        elif isinstance(module, ShiftConv):
            written += position_histogram(module.table, layer_id).export(args.out)
        elif isinstance(module, ShiftInference):
            inner = module.layer
            if isinstance(inner, ShiftLayer):
                written += position_histogram(inner.table, layer_id).export(args.out)
            else:
                written += positions_histogram(inner.positions, inner.s, layer_id).export(args.out)
        else:
            continue
        idx += 1
    if not written:
        raise ValueError("checkpoint has no SAL or shift layers")
    return {"files": [os.path.basename(p) for p in written]}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="salshift", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--t0", type=float)
    p.add_argument("--tf", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--data", help="dataset file/dir, or 'planted'")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", help="binarise SAL layers into shift layers")
    p.add_argument("checkpoint")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time dense conv against the shift kernel")
    p.add_argument("--shapes", default=DEFAULT_BENCH, help="';'-separated N,C,D,H,W,S tuples")
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("heatmap", help="export kernel-position heat maps")
    p.add_argument("checkpoint")
    p.add_argument("--t", type=float, help="temperature for the mean-mask map (default: checkpoint's)")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"salshift: error: usage: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        result = args.func(args)
    except Exception as exc:  # one machine-parsable line for every failure
        message = str(exc).replace("\n", " ")
        print(f"salshift: error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, **result}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
