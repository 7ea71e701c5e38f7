"""Count-based safe exploration on a tabular MDP.

Each episode executes the current policy, updates visitation counts,
re-estimates the kernel and the bonus, and picks the next policy:

* U(pi) = 4 * sqrt(Vbar(P_hat, pi, b_hat, alpha_H)),  b_hat = beta0 * H / max(N, 1)
* only the baseline is allowed while V_c(pi0) + U(pi0) >= tau - kappa / 2
* otherwise pi = argmax U s.t. V_c + U <= tau
* stop once the safe set is relaxed and U(pi) <= T.

The learner only sees an :class:`EpisodeSampler`; exact constraint values of
executed policies come from an optional audit callback owned by the caller.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .cmdp_solver import BASELINE_ONLY, RELAXED, SafeSetSpec, max_uncertainty_safe, safe_set_gate
from .errors import ParameterError
from .functionals import LinearValue, TruncatedUncertainty
from .mdp_core import MarkovPolicy, TabularMDP, Trajectory, Utility, sample_trajectory

log = logging.getLogger(__name__)

CSV_SCHEMA = "sweet.episodes/1"
CSV_COLUMNS = ["episode", "mode", "u_value", "gate_load", "true_cost", "violation",
               "solver_status", "solver_residual", "terminated"]


class EpisodeSampler:
    """Sampling handle around a hidden kernel: the learner can only roll out policies."""

    def __init__(self, mdp: TabularMDP, rng: np.random.Generator):
        self._mdp = mdp
        self._rng = rng
        self.H, self.S, self.A = mdp.shape
        self.s1 = mdp.s1
        self.episodes = 0

    def sample(self, policy) -> Trajectory:
        self.episodes += 1
        return sample_trajectory(self._mdp, policy, self._rng)


@dataclass(frozen=True, eq=False)
class Counts:
    n_sa: np.ndarray  # (H, S, A)
    n_sas: np.ndarray  # (H, S, A, S)

    @classmethod
    def zeros(cls, H: int, S: int, A: int) -> "Counts":
        return cls(np.zeros((H, S, A), dtype=np.int64), np.zeros((H, S, A, S), dtype=np.int64))


def update_counts(counts: Counts, traj: Trajectory) -> Counts:
    n_sa, n_sas = counts.n_sa.copy(), counts.n_sas.copy()
    for h, s, a, s2 in traj.triples():
        n_sa[h, s, a] += 1
        n_sas[h, s, a, s2] += 1
    return Counts(n_sa, n_sas)


def estimate_model(counts: Counts, s1: int = 0) -> TabularMDP:
    """Empirical kernel where a pair was visited more than once, uniform elsewhere."""
    S = counts.n_sas.shape[-1]
    n = counts.n_sa[..., None].astype(np.float64)
    P = np.where(n > 1, counts.n_sas / np.where(n > 1, n, 1.0), 1.0 / S)
    return TabularMDP.trusted(P, s1)


def bonus(counts: Counts, beta0: float, H: int) -> np.ndarray:
    if beta0 <= 0:
        raise ParameterError("beta0 must be positive")
    return beta0 * H / np.maximum(counts.n_sa, 1)


def beta_value(S: int, A: int, H: int, delta: float, N: float) -> float:
    return math.log(3 * S * A * H / delta) + S * math.log(8 * math.e * (1 + N))


def solve_log_fixed_point(C: float, tol: float = 1e-10, max_iter: int = 1_000_000) -> float:
    """Positive root of n = C log(n + 1) by iterating from n = C."""
    if not C > 1:
        raise ParameterError("fixed point n = C log(n + 1) needs C > 1")
    n = C
    for _ in range(max_iter):
        nxt = C * math.log(n + 1)
        if abs(nxt - n) <= tol * abs(nxt):
            return nxt
        n = nxt
    raise AssertionError("fixed-point iteration did not converge")


@dataclass(frozen=True)
class TabularConfig:
    S: int
    A: int
    H: int
    epsilon: float
    delta: float
    tau: float
    kappa: float
    Delta: float
    Delta_min: float
    beta: float
    beta0: float
    frak_U: float
    T: float
    N_max: float
    alpha_H: float
    kappa_tilde: float
    epsilon0: float = 0.0
    t: int = 0
    episode_cap: int = 5000
    # non-default knobs for exercising the relaxed mode at desk scale
    beta0_override: Optional[float] = None
    threshold_override: Optional[float] = None

    @property
    def effective_beta0(self) -> float:
        return self.beta0 if self.beta0_override is None else self.beta0_override

    @property
    def effective_T(self) -> float:
        return self.T if self.threshold_override is None else self.threshold_override

    def safe_set(self, baseline: MarkovPolicy) -> SafeSetSpec:
        return SafeSetSpec(self.tau, self.epsilon0, self.t, self.kappa_tilde, baseline)


def _check_ranges(epsilon, delta, tau, kappa, Delta, Delta_min):
    if not 0 < epsilon < 1:
        raise ParameterError("epsilon must lie in (0, 1)")
    if not 0 < delta < 1:
        raise ParameterError("delta must lie in (0, 1)")
    if not 0 < tau <= 1:
        raise ParameterError("tau must lie in (0, 1]")
    if not 0 < kappa <= tau:
        raise ParameterError("kappa must lie in (0, tau]")
    if not Delta >= Delta_min > 0:
        raise ParameterError("need Delta >= Delta_min > 0")


def tabular_N(S: int, A: int, H: int, delta: float, Delta: float, frak_U: float, kappa: float,
              tol: float = 1e-10) -> tuple[float, float]:
    """Iteration bound N together with beta(N); beta depends on N, so both are iterated."""
    coef = (2 ** 10 * math.e ** 3 * 30 ** 2 * H * S * A / (Delta ** 2 * frak_U ** 2)
            + 2 ** 15 * math.e ** 3 * H * S * A / kappa ** 2)
    n = coef * beta_value(S, A, H, delta, 1.0)
    for _ in range(10_000):
        beta = beta_value(S, A, H, delta, n)
        nxt = solve_log_fixed_point(coef * beta, tol)
        if abs(nxt - n) <= tol * nxt:
            return nxt, beta_value(S, A, H, delta, nxt)
        n = nxt
    raise AssertionError("joint fixed point for N did not converge")


def compute_constants(S: int, A: int, H: int, delta: float, tau: float, kappa: float, Delta: float,
                      Delta_min: float, epsilon: float, episode_cap: int = 5000,
                      beta0_override: float | None = None, threshold_override: float | None = None) -> TabularConfig:
    _check_ranges(epsilon, delta, tau, kappa, Delta, Delta_min)
    frak_U = min(epsilon / 2, Delta_min / 2, epsilon * Delta_min / 5, tau / 4, kappa / 16)
    T = Delta * frak_U / 2
    N, beta = tabular_N(S, A, H, delta, Delta, frak_U, kappa)
    return TabularConfig(S=S, A=A, H=H, epsilon=epsilon, delta=delta, tau=tau, kappa=kappa, Delta=Delta,
                         Delta_min=Delta_min, beta=beta, beta0=8 * beta, frak_U=frak_U, T=T, N_max=N,
                         alpha_H=1 + 1 / H, kappa_tilde=kappa / 2, episode_cap=episode_cap,
                         beta0_override=beta0_override, threshold_override=threshold_override)


@dataclass
class RunLog:
    rows: list = field(default_factory=list)
    n_eps: int = 0
    terminated: bool = False
    theoretical_N: float = 0.0
    cap: int = 0
    final_model: Optional[TabularMDP] = None
    final_bonus: Optional[np.ndarray] = None
    uncertainty: Optional[TruncatedUncertainty] = None
    executed: list = field(default_factory=list)  # distinct executed policies
    extra_columns: list = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        return CSV_COLUMNS + self.extra_columns

    @property
    def violations(self) -> int:
        return int(sum(r["violation"] for r in self.rows))

    @property
    def status(self) -> str:
        return "Terminated" if self.terminated else "CapReached"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"#schema={CSV_SCHEMA}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in self.columns])


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return repr(x)
    return str(x)


class _PolicyRegistry:
    """Distinct executed policies, with the exact audit cached per policy."""

    def __init__(self, audit: Optional[Callable[[MarkovPolicy], float]]):
        self.audit = audit
        self.keys: dict[bytes, int] = {}
        self.policies: list[MarkovPolicy] = []
        self.values: list[float] = []

    def record(self, policy: MarkovPolicy) -> tuple[int, float]:
        key = policy.probs.tobytes()
        if key not in self.keys:
            self.keys[key] = len(self.policies)
            self.policies.append(policy)
            self.values.append(float("nan") if self.audit is None else float(self.audit(policy)))
        i = self.keys[key]
        return i, self.values[i]


def tabular_uncertainty(model: TabularMDP, b: np.ndarray, alpha_H: float) -> TruncatedUncertainty:
    return TruncatedUncertainty(model, b, alpha=alpha_H, scale=4.0, power=0.5)


def run_exploration(env, cost: Utility, baseline: MarkovPolicy, config: TabularConfig,
                    rng: np.random.Generator, audit: Optional[Callable[[MarkovPolicy], float]] = None,
                    solver_starts: int = 8):
    """Returns (P_hat, b_hat, RunLog)."""
    sampler = env if isinstance(env, EpisodeSampler) else EpisodeSampler(env, rng)
    H, S, A = sampler.H, sampler.S, sampler.A
    c = cost.values if isinstance(cost, Utility) else np.asarray(cost)
    spec = config.safe_set(baseline)
    beta0 = config.effective_beta0
    T = config.effective_T
    counts = Counts.zeros(H, S, A)
    registry = _PolicyRegistry(audit)
    runlog = RunLog(theoretical_N=config.N_max, cap=config.episode_cap)
    policy = baseline
    model, b = estimate_model(counts, sampler.s1), bonus(counts, beta0, H)
    for n in range(1, config.episode_cap + 1):
        _, true_cost = registry.record(policy)
        counts = update_counts(counts, sampler.sample(policy))
        model = estimate_model(counts, sampler.s1)
        b = bonus(counts, beta0, H)
        U = tabular_uncertainty(model, b, config.alpha_H)
        gate = safe_set_gate(model, c, U, spec)
        status, residual = BASELINE_ONLY, 0.0
        if gate.mode == RELAXED:
            try:
                res = max_uncertainty_safe(model, c, U, gate.budget, baseline, n_random_starts=solver_starts, rng=rng)
                policy, u_val, status, residual = res.markov, res.objective, res.status, res.residual
            except Exception as exc:  # keep exploring safely with the baseline
                log.warning("solver failed at episode %d: %s", n, exc)
                policy, u_val, status = baseline, U(baseline), "SolverError"
        else:
            policy, u_val = baseline, U(baseline)
        terminated = gate.mode == RELAXED and u_val <= T
        runlog.rows.append({
            "episode": n, "mode": gate.mode, "u_value": float(u_val), "gate_load": float(gate.baseline_load),
            "true_cost": true_cost, "violation": bool(true_cost > config.tau),
            "solver_status": status, "solver_residual": float(residual), "terminated": terminated,
        })
        if terminated:
            runlog.terminated = True
            break
    runlog.n_eps = n
    runlog.final_model, runlog.final_bonus = model, b
    runlog.uncertainty = tabular_uncertainty(model, b, config.alpha_H)
    runlog.executed = registry.policies
    return model, b, runlog
