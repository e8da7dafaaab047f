"""Command-line entry point: ``wnll-lab <subcommand> [flags]``.

Precedence is defaults < flags < ``--config`` JSON file. Exit codes: 0 ok,
1 configuration error, 2 runtime or convergence error, 3 audit failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import experiments as ex
from .attacks import BudgetViolation, GradientOracle
from .checkpoint import CheckpointError, load_checkpoint
from .data import Dataset
from .graph import ConvergenceError, DisconnectedGraphError
from .selftest import run_all

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_AUDIT = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _floats(s):
    return tuple(float(v) for v in s.split(",") if v)


def _ints(s):
    return tuple(int(v) for v in s.split(",") if v)


def _names(s):
    return tuple(v for v in s.split(",") if v)


# flag -> (config section or None, key, type)
FLAG_MAP = {
    "source": ("data", "source", str),
    "data_path": ("data", "path", str),
    "classes": ("data", "class_subset", _ints),
    "per_class_cap": ("data", "per_class_cap", int),
    "test_per_class": ("data", "test_per_class", int),
    "model_spec": (None, "model_spec", str),
    "seed": (None, "seed", int),
    "out": (None, "output_dir", str),
    "attacks": (None, "attacks", _names),
    "epsilons": (None, "epsilons", _floats),
    "heads": (None, "heads", _names),
    "modes": (None, "modes", _names),
    "template_size": (None, "template_size", int),
    "k": (None, "k", int),
    "alternations": ("train", "alternations", int),
    "epochs_linear": ("train", "epochs_linear", int),
    "epochs_wnll": ("train", "epochs_wnll", int),
    "ifgsm_iters": ("train", "ifgsm_iters", int),
    "train_epsilon": ("train", "epsilon", float),
    "train_alpha": ("train", "alpha", float),
    "strict_ifgsm": ("train", "strict_ifgsm", bool),
    "lr": ("train", "lr", float),
    "momentum": ("train", "momentum", float),
    "batch_size": ("train", "batch_size", int),
    "alpha": ("attack", "alpha", float),
    "iters": ("attack", "iters", int),
    "cw_c": ("attack", "c", float),
    "kappa": ("attack", "kappa", float),
    "adam_lr": ("attack", "adam_lr", float),
    "keep_prob": ("tvm", "keep_prob", float),
    "lambda_tv": ("tvm", "lambda_tv", float),
    "tvm_iters": ("tvm", "iters", int),
}


def _add_common(p):
    p.add_argument("--config", help="JSON file; its values override flags")
    p.add_argument("--checkpoint", action="append", default=[], metavar="HEAD:MODE=PATH",
                   help="checkpoint for one (head, training-data mode) pair; repeatable")
    p.add_argument("--train-missing", action="store_true",
                   help="train and save any checkpoint not supplied")
    p.add_argument("-v", "--verbose", action="store_true")
    for flag, (_, _, typ) in FLAG_MAP.items():
        name = "--" + flag.replace("_", "-")
        if typ is bool:
            p.add_argument(name, action="store_const", const=True, default=None)
        else:
            p.add_argument(name, type=typ, default=None)


def build_parser():
    parser = _Parser(prog="wnll-lab", description="Adversarial attack and defence experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "train": "train checkpoints for every (head, mode) pair",
        "attack": "adversarial accuracy per attack, head and epsilon",
        "defend": "clean versus TVM-reconstructed accuracy",
        "sweep": "adversarial and TVM-defended accuracy over the epsilon grid",
        "transfer": "mutual accuracy of examples crafted on the opposite head",
        "export-features": "buffer-block features, PCA-projected or raw",
        "dump-samples": "original / adversarial / TVM image triples as PPM files",
        "selftest": "run the built-in invariant checks",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        _add_common(p)
        if name == "export-features":
            p.add_argument("--head", default="wnll", choices=ex.HEADS)
            p.add_argument("--feature-mode", default="pca2", choices=("pca2", "raw"))
        if name == "dump-samples":
            p.add_argument("--head", default="linear", choices=ex.HEADS)
            p.add_argument("--count", type=int, default=4)
    return parser


def config_from_args(args):
    """Defaults, then explicit flags, then the config file."""
    d = ex.ExperimentConfig().to_dict()
    d["task"] = args.command if args.command in ex.TASKS else "sweep"
    for flag, (section, key, _) in FLAG_MAP.items():
        v = getattr(args, flag, None)
        if v is None:
            continue
        v = list(v) if isinstance(v, tuple) else v
        (d[section] if section else d)[key] = v
    for spec in args.checkpoint:
        key, sep, path = spec.partition("=")
        if not sep:
            raise ex.ConfigError(f"--checkpoint expects HEAD:MODE=PATH, got {spec!r}")
        d["checkpoints"][key] = path
    if args.config:
        try:
            with open(args.config) as fh:
                overrides = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ex.ConfigError(f"cannot read config {args.config}: {exc}") from exc
        for key, v in overrides.items():
            if isinstance(v, dict) and isinstance(d.get(key), dict):
                d[key].update(v)
            else:
                d[key] = v
    return ex.ExperimentConfig.from_dict(d).validate()


def _ensure_checkpoints(config, args, data):
    needed = [ex.checkpoint_key(h, m) for m in config.modes for h in config.heads]
    missing = [k for k in needed if k not in config.checkpoints]
    if missing and args.train_missing:
        config.checkpoints.update({k: v for k, v in ex.train_checkpoints(config, data[0]).items() if k in missing})
    return config


def _emit(report, config, name):
    for path in ex.emit_report(report, config.output_dir, name):
        print(path)


def _run(args):
    if args.command == "selftest":
        results = run_all()
        for name, ok, detail in results:
            print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_AUDIT

    config = config_from_args(args)
    data = ex.load_data(config)
    if args.command == "train":
        for key, path in sorted(ex.train_checkpoints(config, data[0]).items()):
            print(f"{key} {path}")
        return EXIT_OK

    if args.command == "transfer":
        config.heads = ex.HEADS
    _ensure_checkpoints(config, args, data)
    if args.command == "attack":
        _emit(ex.run_attack_eval(config, data), config, "attack")
    elif args.command == "defend":
        _emit(ex.run_tvm_eval(config, data), config, "defend")
    elif args.command == "sweep":
        _emit(ex.run_defense_sweep(config, data), config, "sweep")
    elif args.command == "transfer":
        _emit(ex.run_transfer_eval(config, data), config, "transfer")
    elif args.command == "export-features":
        model = _model(config, args.head)
        train, test, _ = data
        both = train.concat(test)
        tags = ["train"] * len(train) + ["test"] * len(test)
        export = ex.export_features(model, both, args.feature_mode, tags)
        os.makedirs(config.output_dir, exist_ok=True)
        path = os.path.join(config.output_dir, f"features_{args.head}_{args.feature_mode}.csv")
        ex.write_features(export, path)
        print(path)
    elif args.command == "dump-samples":
        train, test, _ = data
        model = _model(config, args.head)
        template = ex.reserve_eval_template(config, train) if args.head == "wnll" else None
        oracle = GradientOracle(model, args.head, template, k=config.k)
        eps = config.epsilons[-1]
        sub = Dataset(test.x[:args.count], test.y[:args.count], test.n_classes)
        for path in ex.dump_samples(oracle, sub, config.attacks[0], eps, config,
                                    os.path.join(config.output_dir, "samples"), args.count):
            print(path)
    return EXIT_OK


def _model(config, head):
    key = ex.checkpoint_key(head, config.modes[0])
    if key not in config.checkpoints:
        raise ex.MissingCheckpoint(f"no checkpoint for {key}")
    return load_checkpoint(config.checkpoints[key])[0]


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BudgetViolation as exc:
        print(f"audit failure: {exc}", file=sys.stderr)
        return EXIT_AUDIT
    except (ConvergenceError, DisconnectedGraphError, CheckpointError, ArithmeticError,
            RuntimeError, ValueError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
