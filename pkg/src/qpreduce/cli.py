"""Command-line front end: ``qpreduce <subcommand> --config FILE``.

Every run writes into ``<out>/<run-id>/`` where the run id is derived from
the effective configuration, so identical inputs give identical paths and
byte-identical files.  Timings go to the log (stderr), never to the files.
"""

import argparse
import csv
import io
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from .config import ConfigError, load_config, parse_config, reference
from .pipeline import EXIT_CODES, clean, run_dynamics, run_measure, run_pipeline

log = logging.getLogger("qpreduce")

STAGE_OF = {"straighten": "straighten", "smooth": "smooth", "reduce": "reduce",
            "full": "reduce", "evolve": "reduce"}


def dump_json(obj):
    return json.dumps(clean(obj), indent=1, sort_keys=True, allow_nan=False) + "\n"


def write(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def run_dir(out, cfg):
    path = os.path.join(out, f"{cfg.name}-{cfg.digest()}")
    os.makedirs(path, exist_ok=True)
    return path


def execute(command, cfg, out):
    """Run one subcommand and write its files.  Returns (exit code, run directory)."""
    path = run_dir(out, cfg)
    write(os.path.join(path, "effective_config.yaml"), cfg.to_yaml())
    if command == "measure":
        res = run_measure(cfg)
        write(os.path.join(path, "measure.csv"), res.to_csv())
        code = 0
        if res.spot and not res.spot["within_bound"]:
            code = EXIT_CODES["numerical"]
            log.warning("%s: spot check disagreement %.3f above bound %.3f", cfg.name,
                        res.spot["fraction"], res.spot["bound"])
        report = {"name": cfg.name, "run_id": cfg.digest(), "measure": res.summary(),
                  "status": "ok" if code == 0 else "failed", "exit_code": code}
        write(os.path.join(path, "report.json"), dump_json(report))
        return code, path
    result = run_pipeline(cfg, upto=STAGE_OF[command])
    for stage, seconds in result.timings.items():
        log.info("%s: %s took %.3f s", cfg.name, stage, seconds)
    report = result.report
    art = result.artifacts
    if "trace" in art:
        write(os.path.join(path, "kam_trace.csv"), art["trace"].to_csv())
    if "spectrum" in art:
        write(os.path.join(path, "spectrum.json"), art["spectrum"].to_json() + "\n")
    wants_dynamics = command == "evolve" or (command == "full" and cfg.stages.dynamics)
    if wants_dynamics and "spectrum" in art:
        dyn = run_dynamics(cfg, result)
        report = dict(report, dynamics=clean(dyn["summary"]))
        traj, extra = next(iter(dyn["trajectories"].values()))
        write(os.path.join(path, "norms.csv"), traj.to_csv(extra))
    write(os.path.join(path, "report.json"), dump_json(report))
    if report["failure"]:
        log.warning("%s: %s", cfg.name, report["failure"]["message"])
    return report["exit_code"], path


def _sweep_child(args):
    base, overrides, out = args
    cfg = parse_config(base, "<sweep>", overrides)
    code, path = execute("full", cfg, out)
    with open(os.path.join(path, "report.json")) as fh:
        report = json.load(fh)
    return overrides, code, os.path.basename(path), report


def sweep(cfg, out, workers):
    grid = cfg.sweep.grid
    if not grid:
        raise ConfigError(["sweep.grid is empty"])
    keys = sorted(grid)
    base_data = cfg.canonical()
    base_data["sweep"] = {"grid": {}}
    base_data["overrides"] = []
    base = json.dumps(base_data)
    path = run_dir(out, cfg)
    write(os.path.join(path, "effective_config.yaml"), cfg.to_yaml())
    jobs = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        overrides = [f"{k}={json.dumps(v)}" for k, v in zip(keys, combo)]
        jobs.append((base, overrides, path))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_child, jobs))
    else:
        results = [_sweep_child(j) for j in jobs]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys + ["run", "exit_code", "status", "max_real_part", "cantor_ok", "inclusion_counterexamples"])
    worst = 0
    for overrides, code, run, report in results:
        values = [o.split("=", 1)[1] for o in overrides]
        cantor = report.get("stages", {}).get("cantor", {})
        spec = report.get("spectrum", {})
        w.writerow(values + [run, code, report["status"], spec.get("max_real_part", ""),
                             cantor.get("ok", ""), len(cantor.get("inclusion_counterexamples", []))])
        if code not in (0, EXIT_CODES["diophantine_exit"], EXIT_CODES["melnikov_exit"]):
            worst = max(worst, code)
    write(os.path.join(path, "sweep.csv"), buf.getvalue())
    return worst, path


def build_parser():
    parser = argparse.ArgumentParser(prog="qpreduce", description="Reducibility of quasi-periodic transport equations.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("straighten", "smooth", "reduce", "evolve", "measure", "full", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML experiment file")
        p.add_argument("--out", default="output", help="base output directory")
        p.add_argument("--seed", type=int, default=None, help="overrides the configured seed")
        p.add_argument("--workers", type=int, default=1, help="parallel runs for sweep")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VAL",
                       help="dotted config key, e.g. parameters.eps=1e-4 (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("schema", help="print every configuration field with its default")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "schema":
        print(reference())
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    overrides = list(args.override)
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
            return EXIT_CODES["config"]
        overrides.append(f"seed={args.seed}")
    try:
        cfg = load_config(args.config, overrides)
    except FileNotFoundError:
        print(f"error: config file {args.config} not found", file=sys.stderr)
        return EXIT_CODES["config"]
    except ConfigError as exc:
        print(f"error: invalid configuration\n{exc}", file=sys.stderr)
        return EXIT_CODES["config"]
    if args.command == "sweep":
        code, path = sweep(cfg, args.out, max(1, args.workers))
    else:
        code, path = execute(args.command, cfg, args.out)
    print(path)
    return code


if __name__ == "__main__":
    sys.exit(main())
