"""``sadi`` command line.

Machine-readable results go to stdout as JSON; logs and warnings go to
stderr. Exit status: 0 on success, 2 for unreadable or malformed input,
3 for an invalid configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .core import Mode, NonFiniteLogitsError, SadiConfig
from .drift import (
    budget_sweep,
    default_seed,
    load_scenario,
    mean_kl_area,
    snowball_trajectory,
    write_sweep_csv,
    write_trajectory_csv,
)
from .heatmap import export
from .metrics import DataError, SynonymTable, chair_scores, load_annotations, load_captions, load_pope, pope_f1
from .policy import ConfigError, apply_intervention, load_config
from .tensorfile import TensorFileError, read_tensor, write_tensor

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONFIG = 3

TOKEN_COLUMNS = ("consensus", "mean", "std", "std_norm", "alpha")

log = logging.getLogger("sadi")


class InputError(Exception):
    """Bad command input that is not a config problem."""


def _emit(doc) -> None:
    json.dump(doc, sys.stdout, indent=2, sort_keys=True, allow_nan=False, default=_jsonable)
    sys.stdout.write("\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _config_dict(cfg: SadiConfig) -> dict:
    d = asdict(cfg)
    d["mode"] = Mode(cfg.mode).value
    return d


def write_diagnostics(outcome, directory) -> list[str]:
    """Per-token statistics to ``tokens.csv`` and masks to ``masks.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    diag = outcome.diagnostics
    written = []
    columns = [(name, getattr(diag, name)) for name in TOKEN_COLUMNS if getattr(diag, name) is not None]
    if columns:
        path = directory / "tokens.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["token"] + [name for name, _ in columns])
            for m in range(len(columns[0][1])):
                w.writerow([m] + [repr(float(col[m])) for _, col in columns])
        written.append(str(path))
    if diag.masks is not None:
        path = directory / "masks.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in diag.masks:
                w.writerow(repr(float(x)) for x in row)
        written.append(str(path))
    return written


def cmd_recalibrate(args) -> int:
    config, _ = load_config(args.config)
    E = read_tensor(args.input)
    outcome = apply_intervention(E.astype(config.dtype), config)
    write_tensor(args.out, outcome.recalibrated)
    doc = {"input": args.input, "out": args.out, "heads": E.shape[0], "tokens": E.shape[1],
           "mode": Mode(config.mode).value, "truncated_heads": list(outcome.truncated_heads)}
    if args.diagnostics:
        doc["diagnostics"] = write_diagnostics(outcome, args.diagnostics)
    _emit(doc)
    return EXIT_OK


def cmd_simulate(args) -> int:
    config, _ = load_config(args.config)
    scenario = load_scenario(args.scenario)
    reports = snowball_trajectory(scenario, args.steps, args.growth, config)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_trajectory_csv(reports, fh)
    _emit({
        "mode": Mode(config.mode).value,
        "seed": scenario.seed,
        "steps": [r.to_dict() for r in reports],
        "mean_kl_area": mean_kl_area(reports),
        "out": args.out,
    })
    return EXIT_OK


def _grid(text: str, name: str) -> list[float]:
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError([(name, f"not a comma-separated list of numbers: {text!r}")]) from None
    if not values:
        raise ConfigError([(name, "grid is empty")])
    if not all(math.isfinite(v) and v >= 0 for v in values):
        raise ConfigError([(name, "grid values must be finite and >= 0")])
    return values


def cmd_sweep(args) -> int:
    config, _ = load_config(args.config)
    scenario = load_scenario(args.scenario)
    lo = _grid(args.alpha_min_grid, "alpha-min-grid")
    hi = _grid(args.alpha_max_grid, "alpha-max-grid")
    points = budget_sweep(scenario, lo, hi, replace(config, mode=Mode.SADI))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_sweep_csv(points, fh)
    _emit({"points": [asdict(p) for p in points], "out": args.out})
    return EXIT_OK


def cmd_chair(args) -> int:
    vocab = SynonymTable.load(args.synonyms)
    result = chair_scores(load_captions(args.captions), load_annotations(args.annotations), vocab)
    doc = result.to_dict()
    if args.average == "micro":
        doc["f1"], doc["f1_macro"] = doc["f1_micro"], doc["f1"]
    doc["f1_average"] = args.average
    _emit(doc)
    return EXIT_OK


def cmd_pope(args) -> int:
    result = pope_f1(load_pope(args.answers))
    _emit({
        "settings": {k: asdict(v) for k, v in result["settings"].items()},
        "average_f1": result["average_f1"],
        "missing": result["missing"],
    })
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import run_bench

    config, _ = load_config(args.config)
    seed = default_seed() if args.seed is None else args.seed
    report = run_bench(args.heads, args.tokens, args.layers, args.mode, args.iters, args.warmup,
                       seed, config)
    _emit(report.to_dict())
    return EXIT_OK


def _read_diagnostics_csv(path: Path, what: str) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InputError(f"{path}: empty file")
    if rows[0] and rows[0][0] == "token":
        column = {"consensus": "consensus", "variance": "std"}.get(what)
        if column is None or column not in rows[0]:
            raise InputError(f"{path}: a token table has no map for --what {what}")
        j = rows[0].index(column)
        return np.array([float(r[j]) for r in rows[1:]])
    if not what.startswith("head:"):
        raise InputError(f"{path}: a mask table only supports --what head:h")
    h = _head_index(what, len(rows))
    return np.array([float(x) for x in rows[h]])


def _head_index(what: str, n_heads: int) -> int:
    try:
        h = int(what.split(":", 1)[1])
    except ValueError:
        raise InputError(f"bad head selector {what!r}") from None
    if not 0 <= h < n_heads:
        raise InputError(f"head {h} out of range: valid heads are 0..{n_heads - 1}")
    return h


def cmd_heatmap(args) -> int:
    path = Path(args.input)
    what = args.what
    if not (what in ("consensus", "variance") or what.startswith("head:")):
        raise InputError(f"--what must be consensus, variance or head:<h>, got {what!r}")
    if path.suffix.lower() == ".csv":
        values = _read_diagnostics_csv(path, what)
    else:
        config, _ = load_config(args.config)
        E = read_tensor(path)
        if what.startswith("head:"):
            values = E[_head_index(what, E.shape[0])]
        else:
            outcome = apply_intervention(E.astype(np.float64), replace(config, mode=Mode.SADI))
            values = outcome.diagnostics.consensus if what == "consensus" else outcome.diagnostics.std
    try:
        pgm, table = export(values, args.out, args.width)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    _emit({"pgm": str(pgm), "csv": str(table), "what": what, "tokens": int(np.size(values))})
    return EXIT_OK


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _at_least(minimum: int):
    def parse(text: str) -> int:
        value = int(text)
        if value < minimum:
            raise argparse.ArgumentTypeError(f"must be >= {minimum}, got {value}")
        return value
    return parse


def build_parser() -> argparse.ArgumentParser:
    from .bench import MIN_ITERS, MIN_WARMUP

    parser = argparse.ArgumentParser(prog="sadi", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("recalibrate", help="recalibrate a tensor file")
    p.add_argument("input", help="input tensor file")
    p.add_argument("--config", help="JSON config (defaults when omitted)")
    p.add_argument("--out", required=True, help="output tensor file")
    p.add_argument("--diagnostics", metavar="DIR", help="write tokens.csv and masks.csv here")
    p.set_defaults(func=cmd_recalibrate)

    p = sub.add_parser("simulate", help="drift report or snowball trajectory for a scenario")
    p.add_argument("scenario", help="scenario JSON")
    p.add_argument("--config", help="JSON config")
    p.add_argument("--steps", type=_positive_int, default=1)
    p.add_argument("--growth", type=float, default=1.0, help="drift gain multiplier per step (>= 1)")
    p.add_argument("--out", help="per-head CSV")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="alpha_min x alpha_max grid on a scenario")
    p.add_argument("scenario", help="scenario JSON")
    p.add_argument("--config", help="JSON config (mode is forced to sadi)")
    p.add_argument("--alpha-min-grid", required=True, help="comma-separated values")
    p.add_argument("--alpha-max-grid", required=True, help="comma-separated values")
    p.add_argument("--out", help="CSV with one row per grid point")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("chair", help="CHAIR scores for a caption file")
    p.add_argument("--captions", required=True, help="JSON Lines of {image_id, caption}")
    p.add_argument("--annotations", required=True, help="JSON Lines of {image_id, objects}")
    p.add_argument("--synonyms", help="JSON surface form -> label map (bundled table by default)")
    p.add_argument("--average", choices=("macro", "micro"), default="macro",
                   help="which caption F1 is reported as f1")
    p.set_defaults(func=cmd_chair)

    p = sub.add_parser("pope", help="POPE precision/recall/F1 per setting")
    p.add_argument("answers", help="JSON Lines of {question_id, setting, label, answer}")
    p.set_defaults(func=cmd_pope)

    p = sub.add_parser("bench", help="intervention overhead over a softmax-only forward")
    p.add_argument("--heads", type=_positive_int, default=32)
    p.add_argument("--tokens", type=_positive_int, default=576)
    p.add_argument("--layers", type=_positive_int, default=14)
    p.add_argument("--mode", choices=[m.value for m in Mode], default="sadi")
    p.add_argument("--iters", type=_at_least(MIN_ITERS), default=MIN_ITERS)
    p.add_argument("--warmup", type=_at_least(MIN_WARMUP), default=MIN_WARMUP)
    p.add_argument("--seed", type=int, help="data seed (default: SADI_SEED or 0)")
    p.add_argument("--config", help="JSON config for the budget bounds")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("heatmap", help="export a map as PGM and CSV")
    p.add_argument("input", help="tensor file, or tokens.csv / masks.csv from --diagnostics")
    p.add_argument("--what", required=True, help="consensus, variance or head:<h>")
    p.add_argument("--out", required=True, help="PGM path; the CSV is written next to it")
    p.add_argument("--width", type=_positive_int, help="grid width when the token count is not square")
    p.add_argument("--config", help="JSON config used to compute the maps")
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for name, msg in exc.errors:
            print(f"sadi: config error: {name}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, DataError, TensorFileError, NonFiniteLogitsError) as exc:
        print(f"sadi: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"sadi: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"sadi: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
