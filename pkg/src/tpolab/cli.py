"""Command line entry point: ``tpolab {gen-env,run,bounds,report}``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .bounds import REPORT_FIELDS, instance_bound_reports
from .core import InvalidInputError, dump_instance, load_instance
from .harness.generate import GenerationError, InstanceSpec, generate_instance
from .harness.run import ExperimentConfig, load_run, run_roster

EXIT_OK, EXIT_INVALID, EXIT_GENERATION = 0, 2, 3


def _read_json(path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as err:
        raise InvalidInputError(f"{path}: not valid JSON ({err})") from err


def cmd_gen_env(args) -> int:
    spec = InstanceSpec.from_dict(_read_json(args.spec))
    gen = generate_instance(spec, args.seed)
    dump_instance(args.out, gen.inst, gen.sources, gen.cls)
    print(f"wrote {args.out}: |S|={gen.inst.num_states} |A|={gen.inst.num_actions} |Pi|={len(gen.cls)} "
          f"gaps={[round(g, 4) for g in gen.realized_deltas]}")
    return EXIT_OK


def cmd_run(args) -> int:
    d = _read_json(args.config)
    if args.out:
        d["out_dir"] = args.out
    cfg = ExperimentConfig.from_dict(d)
    report = run_roster(cfg, cfg.out_dir)
    for tag in report.algorithms:
        m, h = report.curve(tag)
        print(f"{tag}: final cumulative regret {m[-1]:.3f} +/- {h[-1]:.3f}")
    print(f"wrote {cfg.out_dir}")
    return EXIT_OK


def cmd_bounds(args) -> int:
    inst, sources, cls = load_instance(args.instance)
    reports = instance_bound_reports(inst, sources, cls if len(cls) else None)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        w.writerows(r.row() for r in reports)
    failed = [r.bound_name for r in reports if not r.satisfied]
    print(f"wrote {out}: {len(reports)} bounds, {len(failed)} violated")
    return EXIT_OK


def cmd_report(args) -> int:
    _, report = load_run(args.in_dir)
    files = report.write(args.out)
    print(f"wrote {len(files)} files to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tpolab", description="Tabular KL-regularized transfer-learning bandit lab.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-env", help="generate a bandit instance with sources and a policy class")
    g.add_argument("--spec", required=True, help="instance spec JSON")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True, help="instance JSON to write")
    g.set_defaults(fn=cmd_gen_env)

    r = sub.add_parser("run", help="run an experiment roster over seeded trials")
    r.add_argument("--config", required=True, help="experiment config JSON")
    r.add_argument("--out", help="output directory (overrides out_dir in the config)")
    r.set_defaults(fn=cmd_run)

    b = sub.add_parser("bounds", help="evaluate coverage and win-rate bounds on an instance")
    b.add_argument("--instance", required=True, help="instance JSON")
    b.add_argument("--out", required=True, help="CSV to write")
    b.set_defaults(fn=cmd_bounds)

    rep = sub.add_parser("report", help="re-aggregate a run directory into tables and SVG charts")
    rep.add_argument("--in", dest="in_dir", required=True, help="run directory")
    rep.add_argument("--out", required=True, help="report directory")
    rep.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except GenerationError as err:
        print(f"generation failed: {err}", file=sys.stderr)
        return EXIT_GENERATION
    except (InvalidInputError, ValueError, KeyError, FileNotFoundError) as err:
        print(f"invalid input: {err}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
