"""Command-line entry point.

Exit codes: 0 all checks pass, 1 configuration or I/O error, 2 a checker
FAIL, 3 a determinism error inside the simulator.
"""

from __future__ import annotations

import argparse
import io
import os
import sys
from dataclasses import replace

from . import checker
from .config import load_config
from .harness import ConfigError, analyze, reanalyze, run_scenario, with_axis
from .netsim import DeterminismError
from .trace import Trace

CSV_FIELDS = (
    "seed", "protocol", "mode", "replicas", "round_length_ns", "drop_rate", "committed_ops",
    "total_rounds", "sim_time_ns", "throughput_ops_per_s", "mean_latency_ns", "p90_latency_ns",
    "broadcasts", "msgs_per_commit", "s_tilde_90", "s_chora_90", "alpha", "beta", "kappa",
    "safety_pass", "time_to_recover_ns",
)

EXIT_OK, EXIT_CONFIG, EXIT_CHECK, EXIT_DETERMINISM = 0, 1, 2, 3


def fmt_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def csv_header() -> str:
    return ",".join(CSV_FIELDS)


def csv_row(res) -> str:
    return ",".join(fmt_value(getattr(res, f)) for f in CSV_FIELDS)


def emit_csv(results, path=None) -> str:
    """Header plus one row per result; written to ``path`` when given."""
    text = csv_header() + "\n" + "".join(csv_row(r) + "\n" for r in results)
    if path is not None:
        try:
            with open(path, "w") as fh:
                fh.write(text)
        except OSError as exc:
            raise ConfigError(f"cannot write {path}: {exc.strerror}") from None
    return text


def _parser():
    p = argparse.ArgumentParser(prog="chora", description="Chora SMR simulator and checker")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="scenario file")
        sp.add_argument("--seed", type=int, help="first seed")
        sp.add_argument("--seeds", type=int, help="number of consecutive seeds")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--trace", choices=("on", "off"), help="write trace logs")
        sp.add_argument("--protocol", help="override the configured protocol")
        sp.add_argument("--round-length-ns", type=int, help="override the round length")
        sp.add_argument("--no-check", action="store_true", help="skip the checker")

    common(sub.add_parser("run", help="run one scenario"))
    common(sub.add_parser("sweep", help="sweep one axis of a scenario"))
    for name, helptext in (("check", "re-run the checker on a saved trace"),
                           ("report", "recompute the CSV row from a saved trace")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--trace", required=True, help="trace log path")
        sp.add_argument("--out", help="output directory")
    return p


def _load(args):
    cfg = load_config(args.config)
    sc = cfg.scenario
    if args.protocol:
        sc = replace(sc, protocol=args.protocol)
    if args.round_length_ns is not None:
        sc = replace(sc, round_length=args.round_length_ns)
    if args.no_check:
        sc = replace(sc, check=False)
    sc.validate()
    cfg.scenario = sc
    if args.seed is not None:
        cfg.seed = args.seed
    if args.seeds is not None:
        cfg.seeds = max(1, args.seeds)
    if args.out is not None:
        cfg.out = args.out
    if args.trace is not None:
        cfg.trace = args.trace == "on"
    return cfg


def _outdir(path):
    if path is None:
        return None
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc.strerror}") from None
    return path


def _run_jobs(cfg, jobs, out, stdout):
    results = []
    failed = False
    reports = io.StringIO()
    for tag, sc, seed in jobs:
        res, trace = run_scenario(sc, seed)
        results.append(res)
        if res.verdicts is not None:
            reports.write(f"# {tag} seed={seed}\n" + checker.format_report(res.verdicts))
            failed |= not checker.all_pass(res.verdicts)
        if out and cfg.trace:
            trace.write(os.path.join(out, f"trace-{tag}-{seed}.log"))
    if out:
        emit_csv(results, os.path.join(out, "results.csv"))
        with open(os.path.join(out, "checks.txt"), "w") as fh:
            fh.write(reports.getvalue())
    else:
        stdout.write(emit_csv(results))
    if cfg.verbosity or not out:
        sys.stderr.write(reports.getvalue())
    return EXIT_CHECK if failed else EXIT_OK


def main(argv=None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        if args.cmd in ("run", "sweep"):
            cfg = _load(args)
            out = _outdir(cfg.out)
            seeds = range(cfg.seed, cfg.seed + cfg.seeds)
            if args.cmd == "run":
                jobs = [("run", cfg.scenario, s) for s in seeds]
            else:
                if not cfg.sweep_axis or not cfg.sweep_values:
                    raise ConfigError("sweep needs sweep.axis and sweep.values in the config")
                jobs = [(f"{cfg.sweep_axis}={v}", with_axis(cfg.scenario, cfg.sweep_axis, v), s)
                        for v in cfg.sweep_values for s in seeds]
            return _run_jobs(cfg, jobs, out, stdout)
        try:
            trace = Trace.read(args.trace)
        except OSError as exc:
            raise ConfigError(f"cannot read trace {args.trace}: {exc.strerror}") from None
        except ValueError as exc:
            raise ConfigError(f"malformed trace {args.trace}: {exc}") from None
        out = _outdir(args.out)
        if args.cmd == "check":
            meta = {}
            for ev in trace:
                if ev.kind == "meta":
                    meta.update(ev.data)
            spec = None
            if "progress_bound" in meta:
                spec = checker.ProgressSpec([(0, meta["progress_end"])], meta["progress_bound"])
            verdicts = checker.run_checks(trace, spec)
            text = checker.format_report(verdicts)
            stdout.write(text)
            if out:
                with open(os.path.join(out, "checks.txt"), "w") as fh:
                    fh.write(text)
            return EXIT_OK if checker.all_pass(verdicts) else EXIT_CHECK
        res = reanalyze(trace) if any(ev.kind == "meta" for ev in trace) else analyze(trace)
        text = emit_csv([res], os.path.join(out, "report.csv") if out else None)
        if not out:
            stdout.write(text)
        return EXIT_OK
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except DeterminismError as exc:
        sys.stderr.write(f"determinism error: {exc}\n")
        return EXIT_DETERMINISM
    except KeyError as exc:
        sys.stderr.write(f"config error: trace lacks field {exc}\n")
        return EXIT_CONFIG


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
