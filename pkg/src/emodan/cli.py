"""Command-line entry point: gen, train, eval, compare, gradcheck.

Every subcommand takes ``--config`` (a key=value file), ``--seed`` and
``--out``; individual settings can also be given as flags, which win over the
file, which wins over the defaults. Exit status is 0 on success, 1 for usage
or validation errors and 2 for failures at run time.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
import time
import types
import typing
from dataclasses import dataclass
from pathlib import Path

from . import kvconfig
from .dataset import GenParams, generate_synthetic, parse_label_map
from .train import TrainConfig, train

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


@dataclass(frozen=True)
class EvalConfig:
    checkpoint: str = ""
    dataset: str = ""
    label_map_3: str = "default"


@dataclass(frozen=True)
class CompareConfig:
    report_a: str = ""
    report_b: str = ""
    name_a: str = "a"
    name_b: str = "b"


@dataclass(frozen=True)
class GradcheckConfig:
    seeds: int = 5
    coords: int = 20


# train keeps its output directory in the config; the others take --out directly
OUT_FIELD = {"train": "out_dir"}
CONFIGS = {"gen": GenParams, "train": TrainConfig, "eval": EvalConfig, "compare": CompareConfig,
           "gradcheck": GradcheckConfig}
HELP = {
    "gen": "synthesize a dataset from generator settings",
    "train": "train a model",
    "eval": "evaluate a checkpoint on a dataset",
    "compare": "compare two evaluation reports",
    "gradcheck": "verify gradients against finite differences",
}


def _flag_type(tp):
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        tp = next(a for a in typing.get_args(tp) if a is not type(None))
    return str if tp is bool else tp


def _add_fields(p: argparse.ArgumentParser, cls, skip=()) -> None:
    hints = typing.get_type_hints(cls)
    g = p.add_argument_group("settings (override --config)")
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        g.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, type=_flag_type(hints[f.name]),
                       default=None, metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="emodan", description="Joint landmark and emotion cascade on synthetic faces.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, cls in CONFIGS.items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", type=Path, help="key=value settings file")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--out", type=Path, help="output directory")
        skip = {"seed"} | ({"out_dir"} if name == "train" else set())
        _add_fields(p, cls, skip)
        if name == "gen":
            p.add_argument("--holdout", type=int, default=0,
                           help="extra samples from the same stream, written to OUT/test (count goes to OUT/train)")
        if name == "compare":
            p.add_argument("reports", nargs="*", type=Path, help="two report.csv files or eval directories")
    return parser


def _settings(cls, args, command: str):
    values = kvconfig.read_kv(args.config) if args.config else {}
    for f in dataclasses.fields(cls):
        v = getattr(args, "cfg_" + f.name, None)
        if v is not None:
            values[f.name] = str(v)
    if args.seed is not None and "seed" in {f.name for f in dataclasses.fields(cls)}:
        values["seed"] = str(args.seed)
    out_field = OUT_FIELD.get(command)
    if args.out is not None and out_field:
        values[out_field] = str(args.out)
    return kvconfig.build(cls, values, str(args.config) if args.config else "flags")


def _need_out(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required")
    return args.out


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args, out) -> int:
    params = _settings(GenParams, args, "gen")
    dest = _need_out(args)
    t0 = time.perf_counter()
    samples = generate_synthetic(params, dest, holdout=args.holdout)
    print(f"wrote {len(samples)} samples to {dest} in {time.perf_counter() - t0:.1f}s", file=out)
    return EXIT_OK


def cmd_train(args, out) -> int:
    cfg = _settings(TrainConfig, args, "train")
    result = train(cfg)
    state = "finished" if result.finished else "stopped early (resume with --resume)"
    print(f"{state} after {result.epochs_run} epochs; model: {result.model_path}; log: {result.log_path}",
          file=out)
    return EXIT_OK


def cmd_eval(args, out) -> int:
    from .evaluation import evaluate, report_text, write_report

    cfg = _settings(EvalConfig, args, "eval")
    dest = _need_out(args)
    if not cfg.checkpoint or not cfg.dataset:
        raise UsageError("eval needs --checkpoint and --dataset")
    if not Path(cfg.checkpoint).is_file():
        raise kvconfig.ConfigError(f"checkpoint not found: {cfg.checkpoint}")
    report = evaluate(cfg.checkpoint, cfg.dataset, parse_label_map(cfg.label_map_3))
    write_report(report, dest)
    print(report_text(report), end="", file=out)
    return EXIT_OK


def cmd_compare(args, out) -> int:
    from .evaluation import compare, read_report

    cfg = _settings(CompareConfig, args, "compare")
    paths = list(args.reports) or [p for p in (cfg.report_a, cfg.report_b) if p]
    if len(paths) != 2:
        raise UsageError("compare needs exactly two reports")

    def name(p: Path, fallback: str, given: str) -> str:
        if given != fallback:
            return given
        stem = p.parent.name if p.name == "report.csv" else p.name
        return stem or fallback

    a, b = Path(paths[0]), Path(paths[1])
    names = (name(a, "a", cfg.name_a), name(b, "b", cfg.name_b))
    if names[0] == names[1]:
        names = ("a", "b")
    cmp = compare(read_report(a), read_report(b), names)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "compare.txt").write_text(cmp.text())
        (args.out / "compare.csv").write_text(cmp.csv())
    print(cmp.text(), end="", file=out)
    return EXIT_OK


def cmd_gradcheck(args, out) -> int:
    from .verify import run_suite

    cfg = _settings(GradcheckConfig, args, "gradcheck")
    if cfg.seeds < 1 or cfg.coords < 1:
        raise kvconfig.ConfigError("seeds and coords must be >= 1")
    base = args.seed or 0
    t0 = time.perf_counter()
    results = run_suite(range(base, base + cfg.seeds), cfg.coords)
    worst: dict[tuple[str, str], object] = {}
    for r in results:
        key = (r.target, r.tensor)
        if key not in worst or r.error > worst[key].error:
            worst[key] = r
    width = max(len(f"{t}:{n}") for t, n in worst)
    print(f"{'check':<{width}}  {'worst rel err':>13}  {'tol':>7}", file=out)
    for (t, n), r in worst.items():
        flag = "" if r.ok else "  FAIL"
        print(f"{t + ':' + n:<{width}}  {r.error:>13.3e}  {r.tol:>7.0e}{flag}", file=out)
    overall = max(r.error for r in results)
    failed = [r for r in results if not r.ok]
    print(f"{len(results)} checks over {cfg.seeds} seeds, {cfg.coords} coordinates per tensor; "
          f"worst relative error {overall:.3e}; {time.perf_counter() - t0:.1f}s", file=out)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        lines = ["seed,target,tensor,error,tol"] + [f"{r.seed},{r.target},{r.tensor},{r.error!r},{r.tol!r}"
                                                     for r in results]
        (args.out / "gradcheck.csv").write_text("\n".join(lines) + "\n")
    if failed:
        print(f"{len(failed)} checks above tolerance", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "compare": cmd_compare,
            "gradcheck": cmd_gradcheck}


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        if args.command is None:
            raise UsageError(parser.format_usage() + "emodan: error: a command is required")
        return COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(exc, file=err)
        return EXIT_INVALID
    except ValueError as exc:
        # configuration, dataset, checkpoint and shape validation errors
        print(f"emodan: error: {exc}", file=err)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - report, don't trace
        print(f"emodan: failed: {type(exc).__name__}: {exc}", file=err)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
