"""Command-line entry point: ``gazeloss <subcommand> ...``.

Failures print one line ``error[CODE]: message`` to stderr. Exit status is 0
on success, 1 when a reported tolerance is not met, 2 on any error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext
from typing import List, Optional

import numpy as np

from . import GZT_FORMAT_VERSION, __version__, gzt
from .cgl import CglConfig, CollapsedMap, activation_heatmap, cgl_loss, collapse_normalize
from .errors import ConfigurationError, FormatError, GazeLossError
from .gaze import (
    FrameStack,
    ScreenGeometry,
    export_heatmap,
    group_by_frame,
    load_heatmap_csv,
    motion_heatmap,
    parse_fixation_log,
    read_pgm,
    render_heatmap,
)
from .tensor import Tensor, default_dtype

EXIT_OK, EXIT_TOLERANCE, EXIT_ERROR = 0, 1, 2


class UsageError(GazeLossError):
    code = "E_USAGE"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _resolution(text: str):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"bad resolution {text!r}; expected WxH such as 84x84") from None
    return h, w


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(data, dict):
        raise FormatError(f"{path}: expected a JSON object")
    return data


# --- subcommands --------------------------------------------------------------------


def cmd_heatmap(args) -> int:
    screen = ScreenGeometry.parse(args.screen)
    res = _resolution(args.out_res)
    groups = group_by_frame(parse_fixation_log(args.fixations, screen))
    if args.frame is not None:
        groups = {args.frame: groups.get(args.frame, [])}
    if not groups:
        raise FormatError(f"{args.fixations}: no fixations")
    stem, ext = os.path.splitext(args.out)
    fmt = args.format or (ext.lstrip(".") or "pgm")
    for frame_id, fixes in groups.items():
        path = args.out if len(groups) == 1 else f"{stem}_{frame_id:06d}{ext}"
        export_heatmap(render_heatmap(fixes, screen, res, args.normalization), path, fmt)
        print(path)
    return EXIT_OK


def _load_frames(path) -> np.ndarray:
    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path) if n.lower().endswith((".pgm", ".gzt")))
        if not names:
            raise FormatError(f"{path}: no .pgm or .gzt frames found")
        frames = []
        for name in names:
            full = os.path.join(path, name)
            arr = read_pgm(full) if name.lower().endswith(".pgm") else gzt.load(full)
            frames.extend(arr if arr.ndim == 3 else [arr])
        return np.stack(frames)
    arr = gzt.load(path) if path.lower().endswith(".gzt") else read_pgm(path)
    return arr if arr.ndim == 3 else arr[None]


def cmd_motion(args) -> int:
    frames = _load_frames(args.frames)
    if len(frames) < 4:
        raise FormatError(f"{args.frames}: need at least 4 frames, found {len(frames)}")
    heat = motion_heatmap(FrameStack(frames[-4:]))
    stem, ext = os.path.splitext(args.out)
    export_heatmap(heat, args.out, args.format or (ext.lstrip(".") or "pgm"))
    print(args.out)
    return EXIT_OK


def cmd_cgl_eval(args) -> int:
    gaze = load_heatmap_csv(args.gaze).grid
    feats = gzt.load(args.features).astype(np.float64)
    with default_dtype(np.float64):
        if feats.ndim == 2:
            # already a collapsed, normalized map
            cm = CollapsedMap(Tensor(feats), feats == 0)
        elif feats.ndim == 3:
            cm = collapse_normalize(Tensor(feats))
        else:
            raise FormatError(f"{args.features}: expected a 2-d map or [c, h, w] features, got shape {feats.shape}")
        loss = cgl_loss(gaze, cm, CglConfig(epsilon=args.epsilon)).item()
    print(f"{loss:.6f}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import OPS, TOLERANCE, run_gradcheck

    dtype = np.float32 if args.dtype == "float32" else np.float64
    tol = TOLERANCE[dtype]
    ops = OPS if args.op == "all" else (args.op,)
    seeds = range(args.seed, args.seed + args.seeds)
    worst = 0.0
    for op in ops:
        op_worst = 0.0
        for seed in seeds:
            result = run_gradcheck(op, seed, dtype)
            rel = result.rel_error
            op_worst = max(op_worst, rel)
            if args.verbose:
                print(f"{op} seed={seed} rel_error={rel:.3e} checked={result.checked} excluded={result.excluded}")
        print(f"{op} max_rel_error={op_worst:.3e} tol={tol:.0e} {'ok' if op_worst < tol else 'FAIL'}")
        worst = max(worst, op_worst)
    if worst >= tol:
        print(f"error[E_TOLERANCE]: max relative error {worst:.3e} >= {tol:.0e}", file=sys.stderr)
        return EXIT_TOLERANCE
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from .dataset import generate

    config = _read_json(args.spec) if args.spec else {}
    if args.seed is not None:
        config["seed"] = args.seed
    print(generate(args.task, config, args.out))
    return EXIT_OK


_TRAIN_FLAGS = {
    "attention": "attention",
    "alpha": "alpha",
    "steps": "steps",
    "seed": "seed",
    "data": "data",
    "out": "out_dir",
    "batch_size": "batch_size",
    "lr": "learning_rate",
    "cgl_sign": "cgl_sign",
    "checkpoint_every": "checkpoint_every",
}


def cmd_train(args) -> int:
    from .trainer import RunConfig, train

    config = _read_json(args.config) if args.config else {}
    if config.get("algorithm", args.algorithm) != args.algorithm:
        raise ConfigurationError(
            f"config says algorithm {config['algorithm']!r} but the subcommand is {args.algorithm!r}"
        )
    config["algorithm"] = args.algorithm
    for flag, key in _TRAIN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            config[key] = value
    if args.config and "data" in config and not os.path.isabs(config["data"]) and args.data is None:
        config["data"] = os.path.join(os.path.dirname(os.path.abspath(args.config)), config["data"])
    result = train(RunConfig.from_dict(config))
    print(os.path.join(result["config"]["out_dir"], "run.json"))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import evaluate_policy, evaluate_reward

    if args.kind == "policy":
        result = evaluate_policy(args.checkpoint, args.data, split=args.split)
    else:
        result = evaluate_reward(args.checkpoint, args.data, split=args.split, seed=args.seed)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_export_activations(args) -> int:
    from .models import ConvNet

    net = ConvNet.load(args.checkpoint)
    x = gzt.load(args.input)
    if not 1 <= args.layer <= len(net.spec.conv):
        raise ConfigurationError(f"layer {args.layer} outside 1..{len(net.spec.conv)}")
    if x.ndim == 4:
        x = x[0]
    feats = net.forward(x).tap(args.layer)
    stem, ext = os.path.splitext(args.out)
    export_heatmap(activation_heatmap(feats), args.out, args.format or (ext.lstrip(".") or "pgm"))
    print(args.out)
    return EXIT_OK


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .gradcheck import OPS

    parser = _Parser(prog="gazeloss", description="Gaze-guided imitation and reward learning toolkit.")
    parser.add_argument(
        "--version", action="version", version=f"gazeloss {__version__} (tensor format {GZT_FORMAT_VERSION})"
    )
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("heatmap", help="render fixation logs to gaze heatmaps")
    p.add_argument("--fixations", required=True)
    p.add_argument("--screen", default="1280x840:44.6x28.5")
    p.add_argument("--out-res", default="84x84")
    p.add_argument("--out", required=True)
    p.add_argument("--frame", type=int)
    p.add_argument("--format", choices=("pgm", "csv"))
    p.add_argument("--normalization", choices=("max", "sum"), default="max")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("motion", help="motion baseline map from the last four frames")
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("pgm", "csv"))
    p.set_defaults(func=cmd_motion)

    p = sub.add_parser("cgl-eval", help="evaluate the gaze coverage loss")
    p.add_argument("--gaze", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--epsilon", type=float, default=1e-10)
    p.set_defaults(func=cmd_cgl_eval)

    p = sub.add_parser("grad-check", help="finite-difference gradient check")
    p.add_argument("--op", choices=OPS + ("all",), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("task", choices=("bc", "trex"))
    p.add_argument("--spec")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a policy or reward network")
    p.add_argument("algorithm", choices=("bc", "bco", "trex"))
    p.add_argument("--config")
    p.add_argument("--attention", choices=("none", "cgl", "gmd", "motion-cgl"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--cgl-sign", choices=("penalty", "literal"))
    p.add_argument("--checkpoint-every", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out data")
    p.add_argument("kind", choices=("policy", "reward"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-activations", help="collapsed activation map of one conv layer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("pgm", "csv"))
    p.set_defaults(func=cmd_export_activations)
    return parser


def _thread_limit():
    value = os.environ.get("GAZELOSS_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise ConfigurationError(f"GAZELOSS_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise ConfigurationError(f"GAZELOSS_THREADS must be >= 1, got {n}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        with _thread_limit():
            return args.func(args)
    except GazeLossError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
    except FileNotFoundError as exc:
        print(f"error[E_IO]: {exc.filename}: no such file", file=sys.stderr)
    except OSError as exc:
        print(f"error[E_IO]: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
