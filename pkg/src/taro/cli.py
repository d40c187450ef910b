"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numerical-check failure. Results go to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__

logger = logging.getLogger("taro")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(obj, as_json: bool, text: str | None = None):
    if as_json:
        print(json.dumps(obj, sort_keys=True, indent=2))
    elif text is not None:
        print(text)


def _write_tsv(rows: list[dict], stream=None):
    if not rows:
        return
    writer = csv.DictWriter(stream or sys.stdout, fieldnames=list(rows[0]), delimiter="\t",
                            lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)


# -- subcommands ----------------------------------------------------------------------


def cmd_project(args) -> int:
    from .sparsemax import sparsemax

    raw = args.values or sys.stdin.read().split()
    try:
        z = np.array([float(v) for v in raw])
    except ValueError as exc:
        raise ValueError(f"could not parse logits: {exc}") from None
    proj = sparsemax(z)
    out = {"probabilities": proj.probabilities.tolist(), "support": sorted(proj.support),
           "tau": proj.tau}
    text = "\n".join([
        "probabilities\t" + "\t".join(f"{p:.10g}" for p in proj.probabilities),
        "support\t" + "\t".join(str(i) for i in sorted(proj.support)),
        f"tau\t{proj.tau:.10g}",
    ])
    _emit(out, args.json, text)
    return EXIT_OK


def cmd_validate_taxonomy(args) -> int:
    from .taxonomy import load_taxonomy, validate

    forest = load_taxonomy(args.file)
    problems = validate(forest)
    out = {"file": str(args.file), "nodes": len(forest), "leaves": len(forest.leaves),
           "roots": len(forest.roots), "max_depth": forest.max_depth, "problems": problems}
    text = "\t".join(f"{k}={out[k]}" for k in ("nodes", "leaves", "roots", "max_depth"))
    _emit(out, args.json, text)
    for p in problems:
        print(p, file=sys.stderr)
    return EXIT_DATA if problems else EXIT_OK


def cmd_eval(args) -> int:
    from .owod_eval import evaluate, format_report

    report = evaluate(args.dets, args.gt, args.taxonomy, args.split, args.iou, args.topk,
                      args.task)
    for d in report.diagnostics:
        print(d, file=sys.stderr)
    _emit(report.to_dict(), args.json, format_report(report))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(instances=args.instances, seed=args.seed, corrupt=args.corrupt)
    rows = [{"check": r.name, "instances": r.instances, "rejected": r.rejected,
             "worst_rel_error": f"{r.worst:.3e}", "tol": f"{r.tol:.0e}",
             "status": "ok" if r.passed else "FAIL"} for r in results]
    if args.json:
        _emit([r.to_dict() for r in results], True)
    else:
        _write_tsv(rows)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _summary_rows(results):
    def fmt(v):
        return "" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v))

    rows = []
    for r in results:
        rep = r["report"]
        rows.append({
            "mode": r["mode"], "seed": r["seed"],
            "U-R": fmt(rep["unknown_recall"]), "AOSE": fmt(rep["aose"]),
            "mAP": fmt(rep["map_known"]), "HAcc": fmt(rep["hacc"]), "WI": fmt(rep["wi"]),
            "relabeled": r["train"]["relabeled_total"],
            "final_loss": fmt(r["train"]["losses"]["total"][-1]),
        })
    return rows


def cmd_toy_train(args) -> int:
    from .toytrain import MODES, ToyConfig, load_config, run_experiment

    base = load_config(args.config) if args.config else ToyConfig()
    if args.steps is not None:
        base = base.replace(steps=args.steps)
    modes = list(MODES) if "all" in args.mode else list(dict.fromkeys(args.mode))
    seeds = range(args.first_seed, args.first_seed + args.seeds)
    results = []
    for mode in modes:
        results.extend(run_experiment(mode, seeds, base))
    payload = json.dumps({"results": results}, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
        print(f"wrote {args.out}", file=sys.stderr)
    if args.figures:
        from .plotting import write_figures

        for path in write_figures(results, args.figures):
            print(f"wrote {path}", file=sys.stderr)
    if args.json:
        print(payload)
    else:
        _write_tsv(_summary_rows(results))
    violations = sum(r["train"]["contract_violations"] for r in results)
    if violations:
        print(f"objectness target contract violated on {violations} steps", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .toytrain import MODES

    common = _Parser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable JSON on stdout")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="taro", description="Taxonomy-aware open-world detection toolkit.")
    parser.add_argument("--version", action="version", version=f"taro {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("project", parents=[common], help="sparsemax of a logit vector")
    p.add_argument("values", nargs="*", help="logits; read from stdin when omitted")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("validate-taxonomy", parents=[common], help="check a taxonomy file")
    p.add_argument("file")
    p.set_defaults(func=cmd_validate_taxonomy)

    p = sub.add_parser("eval", parents=[common], help="open-world detection metrics")
    p.add_argument("--gt", required=True)
    p.add_argument("--dets", required=True)
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--topk", type=int, default=100)
    p.add_argument("--task", type=int, default=None, help="current task (1-based)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("toy-train", parents=[common], help="run the synthetic ablation grid")
    p.add_argument("--mode", action="append", choices=list(MODES) + ["all"], required=True)
    p.add_argument("--seeds", type=int, default=5, help="number of seeds")
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--config", help="flat JSON config overriding the defaults")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", help="write full results JSON here")
    p.add_argument("--figures", help="directory for PNG figures")
    p.set_defaults(func=cmd_toy_train)
    return parser


def _check_args(args):
    for name in ("iou",):
        v = getattr(args, name, None)
        if v is not None and not 0 < v <= 1:
            raise UsageError(f"--{name} must be in (0, 1]")
    for name in ("topk", "seeds", "instances", "steps"):
        v = getattr(args, name, None)
        if v is not None and v < 1:
            raise UsageError(f"--{name} must be >= 1")


def main(argv=None) -> int:
    from .owod_eval import EvalDataError
    from .taxonomy import TaxonomyError

    try:
        args = build_parser().parse_args(argv)
        _check_args(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TaxonomyError, EvalDataError, OSError, json.JSONDecodeError, ValueError,
            KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
