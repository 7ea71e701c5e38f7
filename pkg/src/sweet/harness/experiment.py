"""Per-seed pipeline and the multi-seed driver.

Only this module and the auditor touch the true kernel.  The learner gets an
:class:`EpisodeSampler`; executed policies are audited through a callback.

Random streams are keyed by ``(generator_seed, seed, k)`` with k = 0 for the
instance, 1 for episode sampling, 2 for the solvers and 3 for the error-bound
check, so seeds are independent of each other and of the worker count.
"""

from __future__ import annotations

import csv
import json
import logging
import statistics
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..cmdp_solver import plan
from ..lowrank_sweet import compute_lowrank_constants, run_exploration_lowrank
from ..mdp_core import TabularMDP, random_policy, value
from ..oracle import cmdp_optimal
from ..rng import make_rng
from ..serialization import mixture_to_doc, policy_to_doc, save, uncertainty_to_doc
from ..tabular_sweet import EpisodeSampler, compute_constants, run_exploration
from .config import ExperimentConfig, dump_config
from .envgen import Instance, gen_env, instance_to_doc, random_normalized_utility

log = logging.getLogger(__name__)

SAFETY_TOL = 1e-6
BOUND_TOL = 1e-12
SUMMARY_COLUMNS = ["seed", "status", "n_eps", "terminated", "violations", "max_true_cost", "theoretical_N",
                   "max_gap", "max_plan_cost_excess", "max_residual", "plan_pass", "bound_violations"]

K_ENV, K_LEARN, K_SOLVE, K_BOUND = 0, 1, 2, 3


def seed_dir(out: Path, seed: int) -> Path:
    return Path(out) / f"seed_{seed:04d}"


def make_instance(cfg: ExperimentConfig, seed: int) -> Instance:
    return gen_env(cfg, seed, make_rng(cfg.generator_seed, seed, K_ENV))


def algorithm_constants(cfg: ExperimentConfig, inst: Instance):
    if cfg.mode == "tabular":
        return compute_constants(cfg.S, cfg.A, cfg.H, cfg.delta, cfg.tau, cfg.kappa, inst.Delta, inst.Delta_min,
                                 cfg.epsilon, episode_cap=cfg.cap, beta0_override=cfg.beta0_override,
                                 threshold_override=cfg.threshold_override)
    return compute_lowrank_constants(cfg.S, cfg.A, cfg.H, cfg.d, cfg.class_size, cfg.delta, cfg.tau, cfg.kappa,
                                     inst.Delta, inst.Delta_min, cfg.epsilon, beta3=cfg.beta3,
                                     iteration_cap=cfg.cap, alpha_hat_override=cfg.alpha_hat_override,
                                     zeta_override=cfg.zeta_override, threshold_override=cfg.threshold_override)


def error_bound_check(inst: Instance, P_hat: TabularMDP, U, n_utilities: int, n_policies: int,
                      rng: np.random.Generator) -> dict:
    """Counts pairs (u, pi) with |V_{P_hat,u}(pi) - V_{P*,u}(pi)| > U(pi)."""
    H, S, A = inst.mdp.shape
    pols = [random_policy(rng, H, S, A) for _ in range(n_policies)]
    bounds = [float(U(p)) for p in pols]
    bad, worst = 0, -np.inf
    for _ in range(n_utilities):
        u = random_normalized_utility(rng, (H, S, A))
        for p, bnd in zip(pols, bounds):
            excess = abs(value(P_hat, p, u) - value(inst.mdp, p, u)) - bnd
            worst = max(worst, excess)
            bad += excess > BOUND_TOL
    return {"checked": n_utilities * n_policies, "violations": int(bad), "max_excess": float(worst)}


def _explore(cfg: ExperimentConfig, inst: Instance, consts, seed: int):
    sampler = EpisodeSampler(inst.mdp, make_rng(cfg.generator_seed, seed, K_LEARN))
    solver_rng = make_rng(cfg.generator_seed, seed, K_SOLVE)

    def audit(policy):
        return value(inst.mdp, policy, inst.cost)

    if cfg.mode == "tabular":
        return run_exploration(sampler, inst.cost, inst.baseline, consts, solver_rng, audit=audit,
                               solver_starts=cfg.solver_starts)
    return run_exploration_lowrank(sampler, inst.model_class, inst.cost, inst.baseline, consts, solver_rng,
                                   audit=audit, solver_starts=cfg.solver_starts)


def _plan_tasks(cfg: ExperimentConfig, inst: Instance, P_hat: TabularMDP, U, seed: int):
    rng = make_rng(cfg.generator_seed, seed, K_SOLVE, 1)
    rows, docs = [], []
    for task in inst.tasks:
        res = plan(P_hat, task.reward, task.cost, task.tau, U=U, baseline=inst.baseline,
                   n_random_starts=cfg.solver_starts, rng=rng)
        true_cost = value(inst.mdp, res.markov, task.cost)
        achieved = value(inst.mdp, res.markov, task.reward)
        opt = cmdp_optimal(inst.mdp, task.reward, task.cost, task.tau)
        gap = float(opt.value - achieved)
        safe = true_cost <= task.tau + SAFETY_TOL
        rows.append({"task": task.name, "tau": task.tau, "plan_status": res.status, "residual": res.residual,
                     "estimated_load": res.constraint_value, "true_cost": true_cost, "reward": achieved,
                     "optimal_reward": float(opt.value), "gap": gap, "safe": bool(safe),
                     "eps_optimal": bool(gap <= cfg.epsilon), "pass": bool(safe and gap <= cfg.epsilon),
                     "duality_gap": float(opt.certificate.get("duality_gap", 0.0))})
        docs.append({"task": task.name, "markov": policy_to_doc(res.markov), "mixture": mixture_to_doc(res.mixture)})
    return rows, docs


def run_seed(cfg: ExperimentConfig, seed: int) -> dict:
    """Full pipeline for one seed; writes its artifacts and returns the per-seed summary."""
    out = seed_dir(cfg.output_dir, seed)
    out.mkdir(parents=True, exist_ok=True)
    inst = make_instance(cfg, seed)
    save(instance_to_doc(inst), out / "instance.json")
    consts = algorithm_constants(cfg, inst)
    P_hat, _, runlog = _explore(cfg, inst, consts, seed)
    runlog.write_csv(out / "episodes.csv")
    U = runlog.uncertainty
    save(uncertainty_to_doc(U), out / "estimate.json")

    executed_costs = [value(inst.mdp, p, inst.cost) for p in runlog.executed]
    tasks, plan_docs = _plan_tasks(cfg, inst, P_hat, U, seed)
    bound = error_bound_check(inst, P_hat, U, cfg.error_bound_utilities, cfg.error_bound_policies,
                              make_rng(cfg.generator_seed, seed, K_BOUND))
    save({"format": "sweet.policies", "version": 1, "executed": [policy_to_doc(p) for p in runlog.executed],
          "planned": plan_docs}, out / "policies.json")

    summary = {
        "seed": seed, "status": "Complete", "mode": cfg.mode, "n_eps": runlog.n_eps,
        "terminated": runlog.terminated, "run_status": runlog.status, "cap": runlog.cap,
        "theoretical_N": runlog.theoretical_N, "violations": runlog.violations,
        "executed_policies": len(runlog.executed), "max_true_cost": max(executed_costs),
        "tau": inst.tau, "Delta": inst.Delta, "Delta_min": inst.Delta_min,
        "T": consts.T, "effective_T": consts.effective_T, "final_u": runlog.rows[-1]["u_value"],
        "tasks": tasks, "error_bound": bound, "instance": inst.metadata,
    }
    save(summary, out / "seed.json")
    return summary


def _safe_run(cfg: ExperimentConfig, seed: int) -> dict:
    try:
        return run_seed(cfg, seed)
    except Exception as exc:  # recorded per seed, other seeds continue
        log.error("seed %d failed: %s", seed, exc)
        return {"seed": seed, "status": "Error", "error": f"{type(exc).__name__}: {exc}",
                "traceback": traceback.format_exc()}


@dataclass
class ReportSummary:
    per_seed: list
    aggregates: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.aggregates.get("all_complete", False) and self.aggregates.get("audits_pass", False)


def seed_row(s: dict) -> dict:
    if s.get("status") != "Complete":
        return {c: "" for c in SUMMARY_COLUMNS} | {"seed": s["seed"], "status": s.get("status", "Error")}
    tasks = s["tasks"]
    return {
        "seed": s["seed"], "status": s["status"], "n_eps": s["n_eps"], "terminated": s["terminated"],
        "violations": s["violations"], "max_true_cost": s["max_true_cost"], "theoretical_N": s["theoretical_N"],
        "max_gap": max((t["gap"] for t in tasks), default=0.0),
        "max_plan_cost_excess": max((t["true_cost"] - t["tau"] for t in tasks), default=0.0),
        "max_residual": max((t["residual"] for t in tasks), default=0.0),
        "plan_pass": all(t["pass"] for t in tasks), "bound_violations": s["error_bound"]["violations"],
    }


def aggregate(per_seed: list) -> dict:
    done = [s for s in per_seed if s.get("status") == "Complete"]
    rows = [seed_row(s) for s in done]
    term = [s for s in done if s["terminated"]]
    return {
        "seeds": len(per_seed), "completed": len(done), "all_complete": len(done) == len(per_seed),
        "max_violations": max((r["violations"] for r in rows), default=0),
        "total_violations": sum(r["violations"] for r in rows),
        "audits_pass": all(r["violations"] == 0 for r in rows),
        "max_gap": max((r["max_gap"] for r in rows), default=0.0),
        "median_n_eps": statistics.median([r["n_eps"] for r in rows]) if rows else 0,
        "terminated": len(term),
        "plan_pass_terminated": sum(seed_row(s)["plan_pass"] for s in term),
        "seeds_with_bound_violation": sum(r["bound_violations"] > 0 for r in rows),
    }


def write_summary(cfg: ExperimentConfig, summary: ReportSummary) -> None:
    out = Path(cfg.output_dir)
    (out / "summary.json").write_text(json.dumps({"format": "sweet.summary", "version": 1,
                                                  "per_seed": [seed_row(s) for s in summary.per_seed],
                                                  "aggregates": summary.aggregates}, sort_keys=True, indent=1) + "\n")
    with open(out / "summary.csv", "w", newline="") as fh:
        fh.write("#schema=sweet.summary/1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for s in summary.per_seed:
            row = seed_row(s)
            w.writerow([_cell(row[c]) for c in SUMMARY_COLUMNS])


def _cell(x) -> str:
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> ReportSummary:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    if workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(_safe_run, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        per_seed = [_safe_run(cfg, s) for s in cfg.seeds]
    summary = ReportSummary(per_seed, aggregate(per_seed))
    write_summary(cfg, summary)
    return summary
