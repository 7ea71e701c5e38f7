"""Random constrained MDP instances with a certified baseline policy."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import GenerationError
from ..lowrank_sweet import LowRankModel, ModelClass, model_class_from_doc, model_class_to_doc
from ..mdp_core import (
    MarkovPolicy,
    TabularMDP,
    Utility,
    max_trajectory_utility,
    min_cost_value,
    normalized_utility,
    random_kernel,
    uniform_policy,
    value,
)
from ..serialization import (
    VERSION,
    mdp_from_doc,
    mdp_to_doc,
    policy_from_doc,
    policy_to_doc,
    utility_from_doc,
    utility_to_doc,
)
from .config import ExperimentConfig, TaskSpec

MAX_ATTEMPTS = 100
MIN_DECOY_TV = 0.1


@dataclass(frozen=True, eq=False)
class PlanningTask:
    name: str
    reward: Utility
    cost: Utility
    tau: float


@dataclass(frozen=True, eq=False)
class Instance:
    mdp: TabularMDP
    cost: Utility
    baseline: MarkovPolicy
    tau: float
    kappa: float
    Delta: float
    Delta_min: float
    tasks: tuple = ()
    model_class: Optional[ModelClass] = None
    metadata: dict = field(default_factory=dict)


def random_normalized_utility(rng: np.random.Generator, shape: tuple) -> Utility:
    """Random utility whose sum is at most 1 along every state-action path, whatever the kernel.

    Normalising over all paths (not only those the true kernel can produce)
    keeps entries at unreachable states in [0, 1] and keeps the utility
    normalised under estimated kernels with a different support.
    """
    H, S, A = shape
    raw = rng.random(shape)
    # every (s, a) sequence is a path here, so the worst path takes the per-step maxima
    vals = raw / raw.reshape(H, -1).max(axis=1).sum()
    full = TabularMDP.trusted(np.full((H, S, A, S), 1.0 / S))
    return normalized_utility(full, np.minimum(vals, 1.0))


def zero_utility(mdp: TabularMDP) -> Utility:
    return Utility(np.zeros(mdp.shape), normalized=True)


def mixed_baseline(mdp: TabularMDP, cost: Utility, limit: float) -> tuple[MarkovPolicy, float]:
    """Min-cost policy mixed with uniform, with the largest weight keeping V_c <= limit."""
    _, pmin = min_cost_value(mdp, cost)
    uni = uniform_policy(*mdp.shape).probs

    def at(w):
        return MarkovPolicy.trusted((1 - w) * pmin.probs + w * uni)

    if value(mdp, at(1.0), cost) <= limit:
        return at(1.0), 1.0
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if value(mdp, at(mid), cost) <= limit:
            lo = mid
        else:
            hi = mid
    return at(lo), lo


def random_lowrank(rng: np.random.Generator, H: int, S: int, A: int, d: int) -> LowRankModel:
    phi = rng.dirichlet(np.ones(d), size=(H, S, A))
    mu = np.transpose(rng.dirichlet(np.ones(S), size=(H, d)), (0, 2, 1))
    return LowRankModel(phi, mu)


def _max_tv(P: np.ndarray, Q: np.ndarray) -> float:
    return float(0.5 * np.abs(P - Q).sum(-1).max())


def random_model_class(rng: np.random.Generator, H: int, S: int, A: int, d: int, size: int) -> ModelClass:
    truth = random_lowrank(rng, H, S, A, d)
    decoys = []
    while len(decoys) < size - 1:
        for _ in range(MAX_ATTEMPTS):
            cand = random_lowrank(rng, H, S, A, d)
            if _max_tv(cand.kernel(), truth.kernel()) >= MIN_DECOY_TV:
                decoys.append(cand)
                break
        else:
            raise GenerationError("could not draw a decoy model separated from the truth")
    pos = int(rng.integers(size))
    cands = decoys[:pos] + [truth] + decoys[pos:]
    return ModelClass(tuple(cands), truth_index=pos)


def _task(rng, mdp, cost, spec: TaskSpec, tau: float, name: str) -> tuple[PlanningTask, float]:
    tau_star = tau if spec.tau is None else spec.tau
    reward = random_normalized_utility(rng, mdp.shape)
    for _ in range(MAX_ATTEMPTS):
        if spec.cost == "same":
            c_star = cost
        elif spec.cost == "zero":
            c_star = zero_utility(mdp)
        else:
            c_star = random_normalized_utility(rng, mdp.shape)
        margin = tau_star - min_cost_value(mdp, c_star)[0]
        if margin > 0 or spec.cost != "random":
            return PlanningTask(name, reward, c_star, tau_star), margin
    raise GenerationError(f"task {name}: no cost with positive margin for tau*={tau_star}")


def gen_env(cfg: ExperimentConfig, seed: int, rng: np.random.Generator) -> Instance:
    H, S, A = cfg.H, cfg.S, cfg.A
    limit = cfg.tau - cfg.kappa
    reasons = []
    for attempt in range(1, MAX_ATTEMPTS + 1):
        cls = None
        if cfg.mode == "lowrank":
            cls = random_model_class(rng, H, S, A, cfg.d, cfg.class_size)
            mdp = cls.candidates[cls.truth_index].mdp()
        else:
            mdp = TabularMDP(random_kernel(rng, H, S, A))
        cost = zero_utility(mdp) if cfg.cost == "zero" else random_normalized_utility(rng, mdp.shape)
        vmin, _ = min_cost_value(mdp, cost)
        if vmin > limit:
            reasons.append(f"attempt {attempt}: min cost {vmin:.4f} > tau - kappa = {limit:.4f}")
            continue
        baseline, weight = mixed_baseline(mdp, cost, limit)
        tasks, margins = [], []
        for i, spec in enumerate(cfg.task_specs):
            task, margin = _task(rng, mdp, cost, spec, cfg.tau, f"task{i}")
            tasks.append(task)
            margins.append(margin)
        if any(m <= 0 for m in margins):
            reasons.append(f"attempt {attempt}: planning task without positive safety margin")
            continue
        Delta = cfg.tau - vmin
        return Instance(mdp=mdp, cost=cost, baseline=baseline, tau=cfg.tau, kappa=cfg.kappa, Delta=Delta,
                        Delta_min=min([Delta] + margins), tasks=tuple(tasks), model_class=cls,
                        metadata={"seed": seed, "attempts": attempt, "baseline_weight": weight,
                                  "min_cost": vmin, "baseline_cost": value(mdp, baseline, cost),
                                  "task_margins": margins})
    raise GenerationError("instance generation exhausted: " + "; ".join(reasons[-5:]))


def instance_to_doc(inst: Instance) -> dict:
    doc = {
        "format": "sweet.instance", "version": VERSION,
        "mdp": mdp_to_doc(inst.mdp), "cost": utility_to_doc(inst.cost), "baseline": policy_to_doc(inst.baseline),
        "tau": inst.tau, "kappa": inst.kappa, "Delta": inst.Delta, "Delta_min": inst.Delta_min,
        "tasks": [{"name": t.name, "reward": utility_to_doc(t.reward), "cost": utility_to_doc(t.cost), "tau": t.tau}
                  for t in inst.tasks],
        "metadata": inst.metadata,
    }
    if inst.model_class is not None:
        doc["model_class"] = model_class_to_doc(inst.model_class)
    return doc


def instance_from_doc(doc: dict) -> Instance:
    if doc.get("format") != "sweet.instance" or doc.get("version") != VERSION:
        raise ValueError("not a sweet.instance document")
    tasks = tuple(PlanningTask(t["name"], utility_from_doc(t["reward"]), utility_from_doc(t["cost"]), t["tau"])
                  for t in doc["tasks"])
    cls = model_class_from_doc(doc["model_class"]) if "model_class" in doc else None
    return Instance(mdp=mdp_from_doc(doc["mdp"]), cost=utility_from_doc(doc["cost"]),
                    baseline=policy_from_doc(doc["baseline"]), tau=doc["tau"], kappa=doc["kappa"],
                    Delta=doc["Delta"], Delta_min=doc["Delta_min"], tasks=tasks, model_class=cls,
                    metadata=doc.get("metadata", {}))
