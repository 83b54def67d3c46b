"""Command-line entry points.

Subcommands cover the three protocols (train / fewshot / zeroshot), plus
bundle evaluation, synthetic data generation, and the gradient check.
Exit codes: 0 success, 2 configuration problem, 3 data problem, 4 numeric
failure.  ``SPARSEFORMER_SEED`` overrides the seed of any loaded training
config (an explicit ``--seed`` flag still wins over the environment).

Training commands run in single precision by default; pass
``--precision double`` for bit-reproducible run records.  The gradient
check always runs in double — central differences are meaningless in
single precision.
"""

import argparse
import json
import os
import sys
from contextlib import nullcontext

import numpy as np

import sparseformer.tensor as T
from sparseformer.data import (SignalComponent, SynthSpec,
                               band_energy_oracle, generate_synthetic,
                               load_bundle, save_bundle)
from sparseformer.errors import (ConfigError, DataError, DimensionError,
                                 NumericError)
from sparseformer.gradcheck import full_model_gradcheck
from sparseformer.training import (SparseformerSystem, TrainConfig,
                                   check_config_keys, evaluate_split,
                                   fewshot_adapt, train_multisource,
                                   train_supervised, zeroshot_eval)

GRADCHECK_TOLERANCE = 1e-4


def _read_json(path, what):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{what} file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}")


def _seed_from_env():
    raw = os.environ.get("SPARSEFORMER_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"SPARSEFORMER_SEED must be an integer, got {raw!r}")


def _with_seed(config, seed):
    if seed is None:
        return config
    d = config.to_dict()
    d["seed"] = seed
    return TrainConfig.from_dict(d)


def _load_train_config(path):
    config = TrainConfig.from_dict(_read_json(path, "config"))
    return _with_seed(config, _seed_from_env())


def _emit(lines):
    sys.stdout.write("\n".join(lines) + "\n")


# ------------------------------------------------------------- commands

def cmd_train(args):
    config = _load_train_config(args.config)
    bundle = load_bundle(args.data)
    record, _ = train_supervised(bundle, config, out_dir=args.out)
    _emit(record.report_lines())
    return 0


def cmd_train_multi(args):
    config = _load_train_config(args.config)
    dirs = [d for group in args.data for d in group]
    bundles = [load_bundle(d) for d in dirs]
    record, _ = train_multisource(bundles, config, out_dir=args.out)
    _emit(record.report_lines())
    return 0


def cmd_eval(args):
    system = SparseformerSystem.load(args.checkpoint)
    bundle = load_bundle(args.data)
    result = evaluate_split(system, bundle, args.split)
    _emit(result.report_lines(prefix=f"{args.split}."))
    return 0


def cmd_fewshot(args):
    system = SparseformerSystem.load(args.checkpoint)
    bundle = load_bundle(args.data)
    seed = args.seed if args.seed is not None else _seed_from_env()
    config = _with_seed(system.config, seed)
    result = fewshot_adapt(system, bundle, shots=args.shots, config=config,
                           mode=args.mode)
    _emit(result.report_lines(prefix="fewshot."))
    return 0


def cmd_zeroshot(args):
    system = SparseformerSystem.load(args.checkpoint)
    bundle = load_bundle(args.data)
    result = zeroshot_eval(system, bundle)
    _emit(result.report_lines(prefix="zeroshot."))
    return 0


_SYNTH_KEYS = ("seed", "length", "channels", "samples_per_class", "recipes",
               "noise_std", "name")
_COMPONENT_KEYS = ("frequency", "amplitude", "channels", "scale")


def _component_from_dict(d):
    if not isinstance(d, dict):
        raise ConfigError(f"signal component must be an object, got {d!r}")
    check_config_keys(d, _COMPONENT_KEYS, "signal component")
    missing = [k for k in ("frequency", "amplitude") if k not in d]
    if missing:
        raise ConfigError(f"signal component missing {missing}")
    channels = d.get("channels")
    return SignalComponent(frequency=d["frequency"], amplitude=d["amplitude"],
                           channels=None if channels is None
                           else tuple(channels),
                           scale=d.get("scale", "fine"))


def synth_spec_from_dict(d):
    check_config_keys(d, _SYNTH_KEYS, "synth")
    missing = [k for k in ("seed", "length", "channels", "samples_per_class",
                           "recipes") if k not in d]
    if missing:
        raise ConfigError(f"synth spec missing {missing}")
    if not isinstance(d["recipes"], (list, tuple)):
        raise ConfigError("recipes must be a list of class recipes")
    recipes = tuple(tuple(_component_from_dict(c) for c in recipe)
                    for recipe in d["recipes"])
    return SynthSpec(seed=d["seed"], length=d["length"],
                     channels=d["channels"],
                     samples_per_class=d["samples_per_class"],
                     recipes=recipes, noise_std=d.get("noise_std", 0.1),
                     name=d.get("name", "synthetic"))


def cmd_synth(args):
    spec = synth_spec_from_dict(_read_json(args.spec, "synth spec"))
    bundle = generate_synthetic(spec)
    save_bundle(args.out, bundle)
    oracle = band_energy_oracle(bundle.samples, spec)
    lines = [f"name={bundle.name}",
             f"count={bundle.count}",
             f"length={bundle.length}",
             f"channels={bundle.channels}",
             f"classes={bundle.num_classes}"]
    for split in ("train", "val", "test"):
        lines.append(f"split.{split}={len(bundle.splits[split])}")
    lines.append(f"oracle_accuracy={float(np.mean(oracle == bundle.labels))!r}")
    _emit(lines)
    return 0


def cmd_gradcheck(args):
    report, elapsed = full_model_gradcheck(quick=not args.full)
    passed = report.passes(GRADCHECK_TOLERANCE)
    _emit([f"mode={'full' if args.full else 'quick'}",
           f"parameters={len(report.errors)}",
           f"h={report.h!r}",
           f"max_rel_err={report.max_error:.6e}",
           f"tolerance={GRADCHECK_TOLERANCE!r}",
           f"elapsed_s={elapsed:.1f}",
           f"result={'PASS' if passed else 'FAIL'}"])
    return 0 if passed else 4


# --------------------------------------------------------------- parser

def _add_precision(parser):
    parser.add_argument("--precision", choices=("single", "double"),
                        default="single",
                        help="float width for the run (default single)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sparseformer",
        description="Token-sparse dual-attention time-series classifier")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="supervised training on one bundle")
    train.add_argument("--config", required=True, help="JSON train config")
    train.add_argument("--data", required=True, help="bundle directory")
    train.add_argument("--out", required=True, help="output directory")
    _add_precision(train)
    train.set_defaults(handler=cmd_train)

    multi = sub.add_parser("train-multi",
                           help="shared-weights training across bundles")
    multi.add_argument("--config", required=True, help="JSON train config")
    # append + nargs so both spellings work: --data A B and --data A --data B
    # (plain nargs would silently keep only the last --data occurrence)
    multi.add_argument("--data", required=True, action="append", nargs="+",
                       help="one or more bundle directories")
    multi.add_argument("--out", required=True, help="output directory")
    _add_precision(multi)
    multi.set_defaults(handler=cmd_train_multi)

    evl = sub.add_parser("eval", help="evaluate a checkpoint on a bundle")
    evl.add_argument("--checkpoint", required=True)
    evl.add_argument("--data", required=True, help="bundle directory")
    evl.add_argument("--split", choices=("train", "val", "test"),
                     default="test")
    _add_precision(evl)
    evl.set_defaults(handler=cmd_eval)

    few = sub.add_parser("fewshot",
                         help="adapt a checkpoint from k shots per class")
    few.add_argument("--checkpoint", required=True)
    few.add_argument("--data", required=True, help="target bundle directory")
    few.add_argument("--shots", required=True, type=int)
    few.add_argument("--seed", type=int, default=None,
                     help="override the checkpoint config seed")
    few.add_argument("--mode", choices=("projector", "head"),
                     default="projector")
    _add_precision(few)
    few.set_defaults(handler=cmd_fewshot)

    zero = sub.add_parser("zeroshot",
                          help="evaluate a checkpoint on unseen classes")
    zero.add_argument("--checkpoint", required=True)
    zero.add_argument("--data", required=True, help="target bundle directory")
    _add_precision(zero)
    zero.set_defaults(handler=cmd_zeroshot)

    synth = sub.add_parser("synth", help="generate a synthetic bundle")
    synth.add_argument("--spec", required=True, help="JSON synth spec")
    synth.add_argument("--out", required=True, help="bundle directory to write")
    synth.set_defaults(handler=cmd_synth)

    grad = sub.add_parser("gradcheck",
                          help="finite-difference check of all gradients")
    grad.add_argument("--full", action="store_true",
                      help="run the complete two-granularity configuration")
    grad.set_defaults(handler=cmd_gradcheck)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    precision = getattr(args, "precision", None)
    scope = T.precision(precision) if precision else nullcontext()
    try:
        with scope:
            return args.handler(args)
    except (ConfigError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
