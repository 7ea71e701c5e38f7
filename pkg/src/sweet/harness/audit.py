"""Independent re-check of a finished seed from its saved artifacts."""

from __future__ import annotations

from pathlib import Path

from ..errors import ReportError
from ..mdp_core import value
from ..serialization import load, policy_from_doc
from .envgen import instance_from_doc

SAFETY_TOL = 1e-6


def _read(path: Path) -> dict:
    if not path.exists():
        raise ReportError(f"{path}: missing artifact")
    try:
        return load(path)
    except ValueError as exc:
        raise ReportError(f"{path}: line {getattr(exc, 'lineno', '?')}: {exc}") from exc


def audit_seed(directory: str | Path) -> dict:
    """Recomputes exact costs of executed and planned policies on the true kernel."""
    d = Path(directory)
    inst = instance_from_doc(_read(d / "instance.json"))
    pols = _read(d / "policies.json")
    costs = [value(inst.mdp, policy_from_doc(p), inst.cost) for p in pols["executed"]]
    violations = sum(c > inst.tau for c in costs)
    tasks = {t.name: t for t in inst.tasks}
    planning = []
    for entry in pols["planned"]:
        task = tasks[entry["task"]]
        c = value(inst.mdp, policy_from_doc(entry["markov"]), task.cost)
        planning.append({"task": task.name, "tau": task.tau, "true_cost": c, "safe": c <= task.tau + SAFETY_TOL})
    recorded = None
    if (d / "seed.json").exists():
        recorded = _read(d / "seed.json").get("violations")
    return {
        "directory": str(d), "executed": len(costs), "violations": int(violations),
        "max_cost": max(costs, default=0.0), "tau": inst.tau, "planning": planning,
        "recorded_violations": recorded,
        "consistent": recorded is None or recorded == violations,
        "pass": violations == 0 and (recorded is None or recorded == violations),
    }


def audit_run(directory: str | Path) -> list[dict]:
    d = Path(directory)
    seeds = sorted(p for p in d.glob("seed_*") if p.is_dir())
    if not seeds:
        raise ReportError(f"{d}: no seed_* directories")
    return [audit_seed(s) for s in seeds]
