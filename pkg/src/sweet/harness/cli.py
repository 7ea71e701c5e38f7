"""Command line entry point: gen-env, run, plan, audit, report."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..cmdp_solver import plan
from ..errors import GenerationError, ReportError
from ..mdp_core import value
from ..oracle import cmdp_optimal
from ..rng import make_rng
from ..serialization import load, save, uncertainty_from_doc
from .audit import audit_run, audit_seed
from .config import ExperimentConfig, load_config
from .envgen import instance_from_doc, instance_to_doc
from .experiment import make_instance, run_experiment, seed_dir
from .report import format_table, report


def parse_seeds(text: str | None):
    """'0,3,5' or '0-19' (inclusive) or a mix of both."""
    if text is None:
        return None
    seeds = []
    for part in text.split(","):
        if "-" in part:
            a, b = part.split("-")
            seeds.extend(range(int(a), int(b) + 1))
        elif part:
            seeds.append(int(part))
    return seeds


def _config(args) -> ExperimentConfig:
    over = {"seeds": parse_seeds(args.seeds), "output_dir": args.out}
    if args.config:
        return load_config(args.config, **over)
    return ExperimentConfig(**{k: v for k, v in over.items() if v is not None})


def cmd_gen_env(args) -> int:
    cfg = _config(args)
    for s in cfg.seeds:
        d = seed_dir(cfg.output_dir, s)
        d.mkdir(parents=True, exist_ok=True)
        inst = make_instance(cfg, s)
        save(instance_to_doc(inst), d / "instance.json")
        print(f"{d / 'instance.json'}  Delta={inst.Delta:.4f}  Delta_min={inst.Delta_min:.4f}  "
              f"baseline_cost={inst.metadata['baseline_cost']:.4f}")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    summary = run_experiment(cfg, workers=args.workers)
    for s in summary.per_seed:
        if s.get("status") != "Complete":
            print(f"seed {s['seed']}: {s.get('error')}", file=sys.stderr)
    print(report(cfg.output_dir, figures=not args.no_figures))
    return 0 if summary.ok else 1


def cmd_plan(args) -> int:
    d = Path(args.seed_dir)
    inst = instance_from_doc(load(d / "instance.json"))
    U = uncertainty_from_doc(load(d / "estimate.json"))
    rows = []
    for task in inst.tasks:
        res = plan(U.model, task.reward, task.cost, task.tau, U=U, baseline=inst.baseline, rng=make_rng(args.seed))
        opt = cmdp_optimal(inst.mdp, task.reward, task.cost, task.tau)
        cost = value(inst.mdp, res.markov, task.cost)
        gap = opt.value - value(inst.mdp, res.markov, task.reward)
        rows.append([task.name, f"{task.tau:.4g}", res.status, f"{res.constraint_value:.4g}", f"{cost:.4g}",
                     f"{gap:.4g}"])
    print(format_table(rows, ["task", "tau", "status", "est_load", "true_cost", "gap"]))
    return 0


def cmd_audit(args) -> int:
    d = Path(args.dir)
    results = [audit_seed(d)] if (d / "instance.json").exists() else audit_run(d)
    rows = [[Path(r["directory"]).name, str(r["executed"]), str(r["violations"]), f"{r['max_cost']:.6g}",
             ",".join("ok" if p["safe"] else "UNSAFE" for p in r["planning"]), "pass" if r["pass"] else "FAIL"]
            for r in results]
    print(format_table(rows, ["seed", "policies", "violations", "max_cost", "planning", "audit"]))
    return 0 if all(r["pass"] for r in results) else 1


def cmd_report(args) -> int:
    print(report(args.dir, figures=not args.no_figures))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sweet", description="Safe reward-free exploration experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat YAML config file")
        sp.add_argument("--seeds", help="seed list override, e.g. 0-19 or 1,4,7")
        sp.add_argument("--out", help="output directory override")

    g = sub.add_parser("gen-env", help="generate and save instances")
    common(g)
    g.set_defaults(func=cmd_gen_env)
    r = sub.add_parser("run", help="explore, plan, audit and report every seed")
    common(r)
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--no-figures", action="store_true")
    r.set_defaults(func=cmd_run)
    pl = sub.add_parser("plan", help="re-plan from a seed's saved estimate")
    pl.add_argument("seed_dir")
    pl.add_argument("--seed", type=int, default=0, help="solver random-start seed")
    pl.set_defaults(func=cmd_plan)
    a = sub.add_parser("audit", help="exact safety audit of a run or seed directory")
    a.add_argument("dir")
    a.set_defaults(func=cmd_audit)
    rp = sub.add_parser("report", help="tables, plot data and figures from a run directory")
    rp.add_argument("dir")
    rp.add_argument("--no-figures", action="store_true")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ReportError, GenerationError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
