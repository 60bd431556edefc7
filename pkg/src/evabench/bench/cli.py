"""``evabench verify|bench|error [config]``.

Exit codes: 0 success, 1 failed invariant, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import contextlib
import sys

from ..eva import fault_injection
from .config import FORMATS, BenchConfig, ConfigError, load_config
from .harness import render_bench, render_error, run_bench, run_error, to_csv, to_json, write_output
from .suites import Context, run_invariants

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="evabench", description="Verify and benchmark random-feature and EVA attention estimators.")
    p.add_argument("command", choices=("verify", "bench", "error"))
    p.add_argument("config", nargs="?", help="key = value config file (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="replace the config's seeds with this one")
    p.add_argument("--out", help="output path (stdout when neither this nor output_path is set)")
    p.add_argument("--format", choices=FORMATS)
    return p


def resolve_config(args) -> BenchConfig:
    cfg = load_config(args.config) if args.config else BenchConfig()
    changes = {}
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    if args.out is not None:
        changes["output_path"] = args.out
    if args.format is not None:
        changes["format"] = args.format
    return cfg.replace(**changes) if changes else cfg


def cmd_verify(cfg: BenchConfig) -> int:
    ctx = Context(seed=cfg.seeds[0], mc_scale=cfg.mc_scale)
    with fault_injection(cfg.fault) if cfg.fault else contextlib.nullcontext():
        results = run_invariants(ctx)
    failed = [r["id"] for r in results if r["status"] == "fail"]
    fmt = cfg.format or "json"
    if fmt == "json":
        text = to_json({"seed": ctx.seed, "mc_scale": ctx.mc_scale, "fault": cfg.fault,
                        "passed": not failed, "invariants": results})
    else:
        text = to_csv(results, ("id", "status", "worst_error", "tolerance"))
    write_output(text, cfg.output_path)
    for name in failed:
        print(f"FAIL {name}", file=sys.stderr)
    print(f"{len(results) - len(failed)}/{len(results)} invariants passed", file=sys.stderr)
    return EXIT_FAIL if failed else EXIT_OK


def cmd_bench(cfg: BenchConfig) -> int:
    write_output(render_bench(run_bench(cfg), cfg.format or "csv"), cfg.output_path)
    return EXIT_OK


def cmd_error(cfg: BenchConfig) -> int:
    write_output(render_error(run_error(cfg), cfg.format or "csv"), cfg.output_path)
    return EXIT_OK


COMMANDS = {"verify": cmd_verify, "bench": cmd_bench, "error": cmd_error}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"evabench: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
