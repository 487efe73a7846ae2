"""Command-line entry point: ``duformer <command> [options]``.

Commands: gen-data, train, eval, infer, gradcheck, params.  Settings come
from an optional JSON config file (top-level training keys plus nested
``model``, ``loss`` and ``data`` objects), then ``--set key.path=value``
overrides, then dedicated flags such as ``--seed``.  Failures print one
``error[<category>]: ...`` line to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import gradcheck as gc
from . import netpbm
from .checkpoint import Checkpoint, CheckpointError
from .data import GeneratorConfig, generate_corpus, load_split, predict_proba
from .model import DUFormer, ModelConfig
from .netpbm import NetpbmError
from .tensor import ShapeError
from .train import DivergenceError, TrainConfig, evaluate_checkpoint, model_from_checkpoint, train

logger = logging.getLogger("duformer")


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# -- configuration ----------------------------------------------------------------


def _set_path(tree: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise CliError("config", f"cannot set {dotted}: {k} is not a section")
    node[keys[-1]] = value


def _parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise CliError("config", f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_settings(path: Optional[str], overrides: Sequence[str] = ()) -> dict:
    tree: dict = {}
    if path:
        try:
            tree = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise CliError("io", f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise CliError("config", f"{path}: {e}") from None
        if not isinstance(tree, dict):
            raise CliError("config", f"{path}: top level must be an object")
    for item in overrides:
        _set_path(tree, *_parse_override(item))
    return tree


def _generator_config(tree: dict, seed: Optional[int]) -> GeneratorConfig:
    d = dict(tree.get("data", {}))
    if seed is not None:
        d["seed"] = seed
    try:
        return GeneratorConfig(**d)
    except (TypeError, ValueError) as e:
        raise CliError("config", f"data: {e}") from None


def _train_config(tree: dict, seed: Optional[int]) -> TrainConfig:
    d = {k: v for k, v in tree.items() if k != "data"}
    if seed is not None:
        d["seed"] = seed
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise CliError("config", str(e)) from None


# -- commands ---------------------------------------------------------------------


def cmd_gen_data(args, tree) -> int:
    cfg = _generator_config(tree, args.seed)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError("io", f"{out} is not empty; pass --force to write into it")
    out.mkdir(parents=True, exist_ok=True)
    stats = generate_corpus(cfg, out, args.count, args.split_ratio)
    print(f"wrote {stats['count']} samples to {out}")
    print(f"manifest: {stats['manifest']}")
    print("foreground fraction:")
    for key in ("mean", "p99", "max"):
        print(f"  {key:5s} {100 * stats['foreground_' + key]:.2f} %")
    return 0


def _print_report(report, title: str) -> None:
    print(title)
    for key in ("precision", "recall", "iou", "f_score"):
        value = getattr(report, key)
        label = f"F{report.beta:g}" if key == "f_score" else key
        print(f"  {label:10s} {'undefined' if math.isnan(value) else f'{value:.2f}'}")
    if report.undefined:
        print(f"  undefined: {', '.join(report.undefined)}")
    worst = report.worst(5)
    if worst:
        print("  worst images by IoU:")
        for sample_id, iou in worst:
            print(f"    {sample_id}  {100 * iou:.2f}")


def cmd_train(args, tree) -> int:
    if args.iters is not None:
        tree["max_iters"] = args.iters
    cfg = _train_config(tree, args.seed)
    out = Path(args.out or cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Path(args.data)
    if not manifest.exists():
        raise CliError("io", f"manifest {manifest} not found")
    train_samples = load_split(manifest, "train")
    if not train_samples:
        raise CliError("data", f"{manifest} has an empty train split")
    val_samples = load_split(manifest, "val")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    start = time.time()
    every = max(1, cfg.max_iters // 10)

    def progress(entry):
        if entry["iter"] == 1 or entry["iter"] % every == 0:
            print(f"iter {entry['iter']:5d}  lr {entry['lr']:.3e}  loss {entry['total']:.4f}  ({time.time() - start:.0f}s)")

    result = train(cfg, train_samples, val_samples, out / "log.jsonl", progress)
    ckpt_path = out / "checkpoint.ckpt"
    result.checkpoint.save(ckpt_path)
    first, last = result.log[0]["total"], result.log[-1]["total"]
    print(f"final loss {last:.4f} ({100 * last / first:.1f} % of the first iteration)")
    print(f"checkpoint: {ckpt_path}")
    if val_samples:
        _print_report(evaluate_checkpoint(result.checkpoint, manifest, "val"), "validation:")
    return 0


def _load_checkpoint(path: str) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except FileNotFoundError:
        raise CliError("io", f"checkpoint {path} not found") from None


def cmd_eval(args, tree) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    manifest = Path(args.data)
    if not manifest.exists():
        raise CliError("io", f"manifest {manifest} not found")
    report = evaluate_checkpoint(ckpt, manifest, args.split)
    _print_report(report, f"{args.split} split ({len(report.per_image_iou)} images, micro-averaged, percent):")
    return 0


def cmd_infer(args, tree) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    try:
        image = netpbm.read(args.image)
    except FileNotFoundError:
        raise CliError("io", f"image {args.image} not found") from None
    if image.ndim != 3:
        raise CliError("data", f"{args.image} is not a colour (P6) image")
    model = model_from_checkpoint(ckpt)
    prob = predict_proba(model, [image])[0]
    mask = np.where(prob > 0.5, 255, 0).astype(np.uint8)
    netpbm.write(args.output, mask)
    print(f"mask {mask.shape[1]}x{mask.shape[0]} -> {args.output} ({100 * (mask > 0).mean():.2f} % foreground)")
    if args.prob:
        netpbm.write(args.prob, np.round(prob * 255).astype(np.uint8))
        print(f"probability map -> {args.prob}")
    return 0


def cmd_gradcheck(args, tree) -> int:
    try:
        targets = gc.resolve(args.scope)
    except KeyError:
        raise CliError("usage", f"unknown scope {args.scope!r}; valid scopes: {', '.join(gc.scopes())}") from None
    seed = 0 if args.seed is None else args.seed
    failed = 0
    print(f"{'target':24s} {'max rel err':>12s}  status")
    for t in targets:
        r = gc.check(t, seed)
        failed += not r.passed
        print(f"{r.name:24s} {r.max_rel_error:12.3e}  {'pass' if r.passed else 'FAIL'}", flush=True)
    print(f"{len(targets) - failed}/{len(targets)} passed (tolerance {gc.TOLERANCE:g})")
    return 1 if failed else 0


def cmd_params(args, tree) -> int:
    """Counts for the full-size default model, updated by any ``model`` section."""
    base = ModelConfig().to_dict()
    base.update(tree.get("model", {}))
    try:
        cfg = ModelConfig.from_dict(base)
    except (TypeError, ValueError) as e:
        raise CliError("config", f"model: {e}") from None
    columns = [("heavy" if cfg.heavy_encoder else "light", cfg)]
    if args.compare_light:
        columns = [("heavy", cfg.replace(heavy_encoder=True)), ("light", cfg.replace(heavy_encoder=False))]
    counts = [(name, DUFormer(c).count_params()) for name, c in columns]
    print(f"{'region':14s}" + "".join(f"{name:>14s}" for name, _ in counts))
    for region in ("token_encoder", "transformer", "decoder", "head", "total"):
        print(f"{region:14s}" + "".join(f"{c[region]:>14,d}" for _, c in counts))
    print(f"{'ratio':14s}" + "".join(f"{float(c['ratio']):>14.3f}" for _, c in counts))
    return 0


# -- argument parsing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (dotted path, JSON value)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="duformer", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic corpus and manifest")
    g.add_argument("--out", required=True, metavar="DIR")
    g.add_argument("--count", type=int, default=64)
    g.add_argument("--split-ratio", type=float, default=0.8)
    g.add_argument("--force", action="store_true", help="write into a non-empty directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train from scratch on a manifest")
    t.add_argument("--data", required=True, metavar="MANIFEST")
    t.add_argument("--out", metavar="DIR", help="run directory (default: checkpoint_dir)")
    t.add_argument("--iters", type=int, help="override max_iters")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a manifest split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, metavar="MANIFEST")
    e.add_argument("--split", default="val")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", parents=[common], help="segment one PPM image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("image")
    i.add_argument("output", help="output PGM mask (0/255)")
    i.add_argument("--prob", metavar="PATH", help="also write the foreground probability as PGM")
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    c.add_argument("scope", help="ops, blocks, losses, all, full-model or a single target name")
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("params", parents=[common], help="parameter counts per region")
    r.add_argument("--compare-light", action="store_true")
    r.set_defaults(func=cmd_params)
    return p


_CATEGORIES = (
    (CheckpointError, "checkpoint"),
    (NetpbmError, "format"),
    (ShapeError, "shape"),
    (DivergenceError, "divergence"),
    (FileNotFoundError, "io"),
    (ValueError, "data"),
)
_HANDLED = tuple(cls for cls, _ in _CATEGORIES)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        tree = load_settings(args.config, args.set)
        return args.func(args, tree)
    except CliError as e:
        if e.category == "usage":
            parser.print_usage(sys.stderr)
            print(f"error[usage]: {e}", file=sys.stderr)
            return 2
        print(f"error[{e.category}]: {e}", file=sys.stderr)
        return 1
    except _HANDLED as e:
        category = next(name for cls, name in _CATEGORIES if isinstance(e, cls))
        print(f"error[{category}]: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
