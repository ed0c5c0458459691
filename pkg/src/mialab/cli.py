"""Command-line entry point: ``mialab <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error (reported on
stderr as a single ``error: ...`` line).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import harness
from . import numerics as nx
from .attack import ATTACK_NAMES
from .data import BlobSpec, make_blobs, save_csv
from .defense import DEFENSES
from .errors import MiaLabError

log = logging.getLogger("mialab")

SUBCOMMANDS = ("gen-data", "train", "attack", "experiment", "compare", "gradcheck")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _global_flags() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    g.add_argument("--config", type=Path, default=None, help="JSON experiment config")
    g.add_argument("--out", default=None, help="output path (default: stdout where applicable)")
    g.add_argument("--format", choices=("csv", "md", "json"), default="csv")
    g.add_argument("--quiet", action="store_true", help="suppress progress and the resolved config")
    return p


def _experiment_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("experiment overrides (win over --config)")
    g.add_argument("--data", type=Path, help="CSV dataset (label,f0,f1,...)")
    g.add_argument("--mnist-images", type=Path)
    g.add_argument("--mnist-labels", type=Path)
    g.add_argument("--defense", choices=sorted(DEFENSES))
    g.add_argument(
        "--defense-param",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="defense hyperparameter, repeatable (e.g. lambda_min=0.1)",
    )
    g.add_argument("--attacks", help=f"comma-separated subset of {','.join(ATTACK_NAMES)}; empty for none")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--learning-rate", type=float)
    g.add_argument("--repeats", type=int)
    g.add_argument("--hidden", help="comma-separated hidden layer widths")
    g.add_argument("--threshold-mode", choices=("global", "per-class"))
    g.add_argument("--shadow-defense", choices=("same", "none"))


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="mialab", description="Membership-inference attack/defense lab.")
    sub = parser.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic blob dataset as CSV")
    spec = BlobSpec()
    p.add_argument("--classes", type=int, default=spec.num_classes)
    p.add_argument("--per-class", type=int, default=spec.points_per_class)
    p.add_argument("--dim", type=int, default=harness.DEFAULT_BLOBS["dimension"])
    p.add_argument("--separation", type=float, default=harness.DEFAULT_BLOBS["separation"])
    p.add_argument("--spread", type=float, default=harness.DEFAULT_BLOBS["spread"])

    p = sub.add_parser("train", parents=[common], help="train the target model and save it (.npz)")
    _experiment_flags(p)

    p = sub.add_parser("attack", parents=[common], help="attack a saved target model")
    _experiment_flags(p)
    p.add_argument("--model", type=Path, required=True, help="target model saved by 'train'")

    p = sub.add_parser("experiment", parents=[common], help="full target/shadow/attack pipeline")
    _experiment_flags(p)

    p = sub.add_parser("compare", parents=[common], help="one experiment per defense, side-by-side table")
    _experiment_flags(p)
    p.add_argument(
        "--defenses",
        default="none,dropout,mixup,l1,l2,dpsgd,adamixup",
        help="comma-separated defense tags, run in this order with default hyperparameters",
    )

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of backprop")
    p.add_argument("--layers", default="6,12,8,4", help="comma-separated layer sizes")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--step", type=float, default=1e-5)
    return parser


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def resolve_config(args) -> harness.ExperimentConfig:
    """Merge --config with inline flags; inline flags win."""
    obj: dict = {}
    if args.config is not None:
        try:
            obj = json.loads(args.config.read_text())
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise MiaLabError(f"{args.config}: invalid JSON: {exc}") from None
        if not isinstance(obj, dict):
            raise MiaLabError(f"{args.config}: config must be a JSON object")
    if args.seed is not None:
        obj["seed"] = args.seed
    if args.data is not None:
        obj["dataset"] = {"kind": "csv", "path": str(args.data)}
    if args.mnist_images is not None or args.mnist_labels is not None:
        if args.mnist_images is None or args.mnist_labels is None:
            raise UsageError("--mnist-images and --mnist-labels go together")
        obj["dataset"] = {"kind": "mnist", "images": str(args.mnist_images), "labels": str(args.mnist_labels)}
    if args.defense is not None or args.defense_param:
        current = obj.get("defense", {"name": "none"})
        defense = {"name": current} if isinstance(current, str) else dict(current)
        if args.defense is not None and args.defense != defense.get("name"):
            defense = {"name": args.defense}
        for item in args.defense_param:
            key, sep, value = item.partition("=")
            if not sep:
                raise UsageError(f"--defense-param expects KEY=VALUE, got {item!r}")
            defense[key] = _parse_value(value)
        obj["defense"] = defense
    if args.attacks is not None:
        obj["attacks"] = [a.strip() for a in args.attacks.split(",") if a.strip()]
    for flag, key in (
        ("epochs", "epochs"),
        ("batch_size", "batch_size"),
        ("learning_rate", "learning_rate"),
        ("repeats", "repeats"),
        ("threshold_mode", "threshold_mode"),
        ("shadow_defense", "shadow_defense"),
    ):
        value = getattr(args, flag)
        if value is not None:
            obj[key] = value
    if args.hidden is not None:
        obj["hidden_sizes"] = _ints(args.hidden)
    return harness.ExperimentConfig.from_dict(obj)


def _echo(args, payload: dict) -> None:
    if not args.quiet:
        print("resolved config: " + json.dumps(payload, sort_keys=True), file=sys.stderr)


def _write_text(text: str, out) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        try:
            Path(out).write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write {out}: {exc.strerror}") from exc


def cmd_gen_data(args) -> int:
    spec = BlobSpec(
        num_classes=args.classes,
        points_per_class=args.per_class,
        dimension=args.dim,
        separation=args.separation,
        spread=args.spread,
        seed=args.seed if args.seed is not None else 0,
    )
    _echo(args, asdict(spec))
    ds = make_blobs(spec)
    if args.out is None or args.out == "-":
        save_csv(ds, sys.stdout)
    else:
        try:
            save_csv(ds, args.out)
        except OSError as exc:
            raise OSError(f"cannot write {args.out}: {exc.strerror}") from exc
    return 0


def cmd_train(args) -> int:
    config = resolve_config(args)
    _echo(args, config.to_dict())
    if args.out is None:
        raise UsageError("train needs --out <model.npz>")
    dataset = harness.load_dataset(config.dataset)
    model, plan = harness.train_target(config, dataset)
    try:
        with open(args.out, "wb") as f:
            model.to_npz(f)
    except OSError as exc:
        raise OSError(f"cannot write {args.out}: {exc.strerror}") from exc
    summary = {
        "defense": harness.defense_label(config.defense),
        "train_accuracy": round(harness.accuracy(model, *dataset.subset(plan.target_train)), 4),
        "test_accuracy": round(harness.accuracy(model, *dataset.subset(plan.target_test)), 4),
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_attack(args) -> int:
    config = resolve_config(args)
    _echo(args, config.to_dict())
    try:
        target = nx.MlpModel.from_npz(args.model)
    except OSError as exc:
        raise OSError(f"cannot read model {args.model}: {exc.strerror or exc}") from exc
    dataset = harness.load_dataset(config.dataset)
    if target.layer_sizes[0] != dataset.dim or target.num_classes != dataset.num_classes:
        raise MiaLabError(
            f"model {target.layer_sizes} does not fit dataset ({dataset.dim} features, "
            f"{dataset.num_classes} classes)"
        )
    plan = harness.plan_for(config, dataset)
    shadow = harness.train_shadow(config, dataset, plan)
    reports, _ = harness.run_attacks(target, shadow, dataset, plan, config, harness.attack_seed(config))
    rows = [r.to_dict() for r in reports.values()]
    if args.format == "json":
        text = json.dumps(rows, indent=2) + "\n"
    elif args.format == "md":
        lines = ["| Attack | Accuracy | TPR | FPR |", "|---|---|---|---|"]
        lines += [f"| {r['attack']} | {r['accuracy']:.4f} | {r['tpr']:.4f} | {r['fpr']:.4f} |" for r in rows]
        text = "\n".join(lines) + "\n"
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["attack", "accuracy", "tpr", "fpr", "tp", "tn", "fp", "fn"])
        for r in rows:
            w.writerow([r["attack"], f"{r['accuracy']:.4f}", f"{r['tpr']:.4f}", f"{r['fpr']:.4f}",
                        r["tp"], r["tn"], r["fp"], r["fn"]])
        text = buf.getvalue()
    _write_text(text, args.out)
    return 0


def cmd_experiment(args) -> int:
    config = resolve_config(args)
    _echo(args, config.to_dict())
    report = harness.run_experiment(config)
    harness.emit_report(report, args.format, args.out)
    return 0


def cmd_compare(args) -> int:
    base = resolve_config(args)
    tags = [t.strip() for t in args.defenses.split(",") if t.strip()]
    unknown = [t for t in tags if t not in DEFENSES]
    if unknown or not tags:
        raise UsageError(f"--defenses must list tags from {sorted(DEFENSES)}, got {args.defenses!r}")
    configs = []
    for tag in tags:
        obj = base.to_dict()
        obj["defense"] = {"name": tag}
        configs.append(harness.ExperimentConfig.from_dict(obj))
    _echo(args, {"base": base.to_dict(), "defenses": tags})
    table = harness.run_comparison(configs)
    harness.emit_report(table, args.format, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    sizes = _ints(args.layers)
    _echo(args, {"seed": seed, "layers": sizes, "batch": args.batch, "step": args.step})
    rng = np.random.default_rng(seed)
    model = nx.init_mlp(sizes, rng)
    for b in model.biases:
        b[:] = rng.normal(0.0, 0.1, size=b.shape)
    x = rng.normal(size=(args.batch, sizes[0]))
    targets = nx.one_hot(rng.integers(0, sizes[-1], size=args.batch), sizes[-1])
    err = nx.gradient_check(model, x, targets, args.step)
    _write_text(f"max relative error: {err:.3e}\n", args.out)
    if err > 1e-4:
        raise MiaLabError(f"gradient check failed: max relative error {err:.3e} > 1e-4")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "experiment": cmd_experiment,
    "compare": cmd_compare,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(parser.format_usage() + f"mialab: error: {exc}", file=sys.stderr)
        return 1
    except (MiaLabError, OSError, ValueError) as exc:
        print(f"error: {exc}".replace("\n", " "), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
