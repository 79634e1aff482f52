"""Command-line surface: gen-data, train, eval, paramcount, flopcount, gradcheck.

Exit codes: 0 success, 1 contract/runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import gradcheck as gradcheck_mod
from .data import generate_scene_pairs, save_dataset
from .errors import CrossviewError
from .model import ModelConfig, param_count, flop_count, siamese_flop_count
from .train import TrainConfig, evaluate_checkpoint, train


def _parse_hw(text):
    try:
        h, w = text.lower().split("x")
        return (int(h), int(w))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from e


def _variant_config(args, input_hw):
    base = {"head": args.head, "smd_k": args.smd_k, "input_hw": input_hw}
    if args.classes:
        base["classifier_classes"] = args.classes
    if args.variant == "saig-s":
        return ModelConfig.saig_s(**base)
    if args.variant == "saig-d":
        return ModelConfig.saig_d(**base)
    raise CrossviewError(f"unknown variant {args.variant!r}")


def _add_variant_args(p):
    p.add_argument("--variant", required=True, choices=["saig-s", "saig-d"])
    p.add_argument("--classes", type=int, default=0, help="classifier classes (0 = none)")
    p.add_argument("--head", default="gap", choices=["gap", "smd"])
    p.add_argument("--smd-k", type=int, default=8)
    p.add_argument("--input-hw", type=_parse_hw, default=(224, 224))
    p.add_argument("--siamese", action="store_true", help="count both branches")
    p.add_argument("--ground-hw", type=_parse_hw, default=(128, 512))
    p.add_argument("--aerial-hw", type=_parse_hw, default=(256, 256))


def build_parser():
    parser = argparse.ArgumentParser(
        prog="crossview",
        description="Cross-view geo-localization: synthetic data, training, evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic cross-view dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=256)
    p.add_argument("--ground-hw", type=_parse_hw, default=(32, 64))
    p.add_argument("--aerial-hw", type=_parse_hw, default=(32, 32))
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="all")

    p = sub.add_parser("train", help="train a Siamese pair on a dataset manifest")
    p.add_argument("--config", required=True, help="TrainConfig JSON file")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", default=None, help="output directory override")
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.add_argument("--ks", default="1,5,10")

    p = sub.add_parser("paramcount", help="learnable scalar count for a variant")
    _add_variant_args(p)

    p = sub.add_parser("flopcount", help="multiply-accumulate count for a variant")
    _add_variant_args(p)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=gradcheck_mod.DEFAULT_SEEDS)

    return parser


def _cmd_gen_data(args):
    pairs = generate_scene_pairs(
        args.seed, args.count, ground_hw=args.ground_hw, aerial_hw=args.aerial_hw
    )
    manifest = save_dataset(pairs, args.out, split=args.split)
    print(manifest)
    return 0


def _cmd_train(args):
    config = TrainConfig.from_json_file(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.deterministic:
        config.deterministic = True
    result = train(
        config,
        out_dir=args.out,
        resume_from=args.resume,
        log_fn=lambda entry: print(
            f"epoch {entry['epoch']}: loss {entry['loss']:.4f} r@1 {entry['r_at_1']:.4f}"
        ),
    )
    print(f"best r@1: {result.best_r1:.4f}")
    if result.last_checkpoint is not None:
        print(f"last checkpoint: {result.last_checkpoint}")
    return 0


def _cmd_eval(args):
    try:
        ks = tuple(int(k) for k in args.ks.split(","))
    except ValueError as e:
        raise CrossviewError(f"--ks must be comma-separated integers: {args.ks!r}") from e
    report, doc = evaluate_checkpoint(args.checkpoint, args.manifest, ks=ks)
    if args.out:
        Path(args.out).write_text(doc + "\n")
    print(doc)
    return 0


def _cmd_paramcount(args):
    if args.siamese:
        total = param_count(_variant_config(args, args.ground_hw)) + param_count(
            _variant_config(args, args.aerial_hw)
        )
    else:
        total = param_count(_variant_config(args, args.input_hw))
    print(total)
    return 0


def _cmd_flopcount(args):
    cfg = _variant_config(args, args.input_hw)
    if args.siamese:
        total = siamese_flop_count(cfg, ground_hw=args.ground_hw, aerial_hw=args.aerial_hw)
    else:
        total = flop_count(cfg, args.input_hw)
    print(total)
    return 0


def _cmd_gradcheck(args):
    report, ok = gradcheck_mod.run_full_suite(args.seeds)
    for name, (err, tol, passed) in sorted(report.items()):
        status = "ok" if passed else "FAIL"
        print(f"{status:4s} {name:40s} rel_err={err:.3e} tol={tol:.0e}")
    return 0 if ok else 1


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "paramcount": _cmd_paramcount,
    "flopcount": _cmd_flopcount,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return _COMMANDS[args.command](args)
    except CrossviewError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
