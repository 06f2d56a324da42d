"""Command-line interface: calibrate, quantize, run, compare, inspect-codes."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import load_stats, save_stats
from .codec import FORMATS, code_table, get_format
from .recipe import (
    Batch,
    RecipeConfig,
    compare,
    format_table,
    load_config,
    load_dataset,
    load_model,
    load_quantized,
    run_calibration,
    run_recipe,
)

log = logging.getLogger("fp8ptq")


class CliError(Exception):
    """A user-facing failure reported as JSON on stderr."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("usage", message)
        sys.exit(2)


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="seed for stochastic rounding (default: 0)")
    p.add_argument("--format", choices=sorted(FORMATS), help="FP8 format; overrides the config file")
    p.add_argument("--threads", type=int, default=1,
                   help="accepted for compatibility; results do not depend on it")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="fp8ptq", description="FP8 post-training quantization toolkit.")
    parser.add_argument("--version", action="version", version=f"fp8ptq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("calibrate", parents=[common], help="measure per-layer max-abs statistics")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--dataset", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="stats JSON to write")
    p.add_argument("--batch-size", type=int, help="re-chunk the dataset into batches of this many rows")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("quantize", parents=[common], help="run the recipe and write the quantized model")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--stats", required=True, type=Path)
    p.add_argument("--config", required=True, type=Path, help="recipe config (.json or .toml)")
    p.add_argument("--dataset", required=True, type=Path, help="evaluation dataset")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("run", parents=[common], help="forward a batch through a quantized model")
    p.add_argument("--model", required=True, type=Path, help="quantized model directory")
    p.add_argument("--input", required=True, type=Path, help=".npy array of shape (N, C_in)")
    p.add_argument("--out", required=True, type=Path, help=".npy file for the float32 output")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", parents=[common], help="tabulate degradation for every candidate")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--dataset", required=True, type=Path)
    p.add_argument("--stats", type=Path, help="defaults to calibrating on --dataset")
    p.add_argument("--out", type=Path, help="also write the table as JSON here")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("inspect-codes", parents=[common], help="list all 256 codes of a format")
    p.add_argument("--json", action="store_true", help="emit JSON instead of a table")
    p.set_defaults(func=cmd_inspect_codes)
    return parser


def _rechunk(batches: list[Batch], size: int | None) -> list[Batch]:
    if size is None:
        return batches
    if size <= 0:
        raise CliError("--batch-size must be positive")
    x = np.vstack([b.x for b in batches])
    return [Batch(x[i:i + size]) for i in range(0, len(x), size)]


def _dataset(path: Path) -> list[Batch]:
    batches = load_dataset(path)
    if not batches or all(len(b.x) == 0 for b in batches):
        raise CliError(f"dataset {path} is empty")
    return batches


def _recipe(args) -> RecipeConfig:
    recipe = load_config(args.config)
    if args.format:
        recipe.fmt = get_format(args.format).name
    if recipe.rounding.is_stochastic:
        recipe.rounding = replace(recipe.rounding, seed=args.seed)
    return recipe


def cmd_calibrate(args) -> int:
    model = load_model(args.model)
    batches = _rechunk(_dataset(args.dataset), args.batch_size)
    stats = run_calibration(model, batches)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_stats(stats, args.out)
    print(f"{'layer':<16} {'r_x':>12} {'r_w':>12} {'batches':>8}")
    for name, s in stats.items():
        print(f"{name:<16} {s.r_x:>12.6g} {s.r_w:>12.6g} {s.batches_seen:>8d}")
    return 0


def cmd_quantize(args) -> int:
    model = load_model(args.model)
    if not args.stats.exists():
        raise CliError(f"stats file {args.stats} not found; run 'fp8ptq calibrate' first")
    stats = load_stats(args.stats)
    recipe = _recipe(args)
    result = run_recipe(model, recipe, stats, _dataset(args.dataset))
    out = args.out
    result.model.save(out, extra={"format": recipe.fmt, "recipe": result.selected.to_dict()})
    (out / "recipe_result.json").write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    text = result.to_text()
    (out / "report.txt").write_text(text + "\n")
    print(text)
    return 0 if result.passed else 1


def cmd_run(args) -> int:
    qmodel = load_quantized(args.model)
    x = np.load(args.input, allow_pickle=False)
    if x.ndim != 2:
        raise CliError(f"input must be 2-d, got shape {x.shape}")
    y = qmodel.forward(x).astype(np.float32)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    np.save(args.out, y)
    return 0


def cmd_compare(args) -> int:
    model = load_model(args.model)
    recipe = _recipe(args)
    batches = _dataset(args.dataset)
    stats = load_stats(args.stats) if args.stats else run_calibration(model, batches)
    baseline, rows = compare(model, recipe, stats, batches)
    print(format_table(rows, recipe.eval_metric, baseline))
    if args.out:
        doc = {"eval_metric": recipe.eval_metric, "baseline_metric": baseline,
               "threshold_pct": recipe.degradation_threshold,
               "candidates": [r.to_dict() for r in rows]}
        args.out.write_text(json.dumps(doc, indent=2) + "\n")
    return 0


def cmd_inspect_codes(args) -> int:
    fmt = get_format(args.format or "e4m3")
    rows = code_table(fmt)
    if args.json:
        doc = {"format": fmt.name, "max_finite": fmt.max_finite,
               "codes": [{**r, "value": _json_float(r["value"])} for r in rows]}
        print(json.dumps(doc, indent=2))
        return 0
    print(f"# {fmt.name}: max finite {fmt.max_finite:g}, min subnormal {fmt.min_subnormal:g}")
    print(f"{'code':>4} {'hex':>4} {'s':>1} {'exp':>3} {'man':>3} {'value':>14}  kind")
    for r in rows:
        print(f"{r['code']:>4} {r['hex']:>4} {r['sign']:>1} {r['exponent']:>3} {r['mantissa']:>3} "
              f"{r['value']:>14.9g}  {r['kind']}")
    return 0


def _json_float(v: float):
    if np.isnan(v):
        return "nan"
    if np.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.threads < 1:
        _emit_error("usage", "--threads must be at least 1")
        return 2
    try:
        return args.func(args)
    except CliError as exc:
        _emit_error("invalid_input", str(exc))
    except FileNotFoundError as exc:
        _emit_error("not_found", f"{exc.filename}: {exc.strerror}")
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        _emit_error(type(exc).__name__, str(exc))
    return 1


if __name__ == "__main__":
    sys.exit(main())
