"""Command line entry point.

    critspine <kind> --model FILE --params FILE|JSON --seed N --batch N --out PATH --format json|csv
    critspine run EXPERIMENT.json [--out PATH] [--format json|csv] [--batch N]

Exit codes: 0 pass, 1 check failed, 2 inconclusive, 3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import EXIT_CONFIG, KINDS, ConfigError, Experiment, emit_report, run_experiment


def _params(text: str | None) -> dict:
    if not text:
        return {}
    path = Path(text)
    if path.exists():
        return json.loads(path.read_text())
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--params is neither a file nor valid JSON: {exc}") from None


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which is our "inconclusive" code.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"critspine: configuration error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="critspine", description=__doc__.split("\n\n")[0])
    ap.add_argument("kind", choices=KINDS + ("run",))
    ap.add_argument("experiment", nargs="?", help="experiment JSON (only with 'run')")
    ap.add_argument("--model", help="model JSON file or fixture:NAME")
    ap.add_argument("--params", help="parameter JSON file or inline JSON")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--batch", type=int, default=None)
    ap.add_argument("--out", default=None)
    ap.add_argument("--format", choices=("json", "csv"), default="json")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.kind == "run":
            if not args.experiment:
                raise ConfigError("'run' needs an experiment file")
            exp = Experiment.from_file(args.experiment)
        else:
            if not args.model:
                raise ConfigError("--model is required")
            exp = Experiment(kind=args.kind, model=args.model, params=_params(args.params))
        if args.seed is not None:
            exp.seed = args.seed
        if args.batch is not None:
            exp.batch = args.batch
        if args.out is not None:
            exp.out = args.out
        report = run_experiment(exp)
        text = emit_report(report, args.format, exp.out)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"critspine: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if exp.out is None:
        sys.stdout.write(text)
    else:
        print(f"{report.status}: {exp.kind} on {exp.model} -> {exp.out}", file=sys.stderr)
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
