"""Safe exploration with a finite class of factorised (low-rank) models.

Iteration n runs H episodes.  Episode h follows the policy of iteration n-1
with epsilon0-uniform mixing at steps h-1 and h, and contributes its
(s_h, a_h, s_{h+1}) triple to the step-h dataset.  The kernel estimate at each
step is the maximum-likelihood candidate of the class, and the bonus is the
elliptic norm of the estimated feature under a regularised covariance.

    U_L(pi) = Vbar(P_hat, pi, b_hat, 1) + sqrt(A_tilde * zeta / n)
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np
from scipy.linalg import solve_triangular

from .cmdp_solver import BASELINE_ONLY, RELAXED, SafeSetSpec, max_uncertainty_safe, safe_set_gate
from .errors import DegenerateDataError, NumericError, ParameterError, ShapeError
from .functionals import TruncatedUncertainty
from .mdp_core import MarkovPolicy, TabularMDP, Utility, greedy_version
from .serialization import VERSION
from .tabular_sweet import EpisodeSampler, RunLog, _check_ranges, _PolicyRegistry

log = logging.getLogger(__name__)

COND_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class LowRankModel:
    phi: np.ndarray  # (H, S, A, d)
    mu: np.ndarray  # (H, S, d): mu[h, s2] is the vector of next state s2

    def __post_init__(self):
        phi = np.array(self.phi, dtype=np.float64)
        mu = np.array(self.mu, dtype=np.float64)
        if phi.ndim != 4 or mu.ndim != 3 or phi.shape[-1] != mu.shape[-1] or phi.shape[:2] != mu.shape[:2]:
            raise ShapeError(f"incompatible feature shapes {phi.shape} and {mu.shape}")
        if np.any(np.linalg.norm(phi, axis=-1) > 1 + 1e-12):
            raise ParameterError("feature vectors must have 2-norm at most 1")
        P = np.einsum("hsad,htd->hsat", phi, mu)
        if np.any(P < -1e-10) or np.max(np.abs(P.sum(-1) - 1)) > 1e-10:
            raise ParameterError("factorisation does not induce a valid kernel")
        phi.setflags(write=False)
        mu.setflags(write=False)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "mu", mu)

    @property
    def d(self) -> int:
        return self.phi.shape[-1]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.phi.shape[:3]

    def kernel(self) -> np.ndarray:
        P = np.clip(np.einsum("hsad,htd->hsat", self.phi, self.mu), 0.0, None)
        return P / P.sum(-1, keepdims=True)

    def mdp(self, s1: int = 0) -> TabularMDP:
        return TabularMDP(self.kernel(), s1)


@dataclass(frozen=True, eq=False)
class ModelClass:
    candidates: tuple
    truth_index: Optional[int] = None

    def __post_init__(self):
        cands = tuple(self.candidates)
        if not cands:
            raise ParameterError("model class must be non-empty")
        if len({c.phi.shape for c in cands}) != 1:
            raise ShapeError("candidates have different shapes")
        object.__setattr__(self, "candidates", cands)
        object.__setattr__(self, "_kernels", np.stack([c.kernel() for c in cands]))

    def __len__(self) -> int:
        return len(self.candidates)

    @property
    def kernels(self) -> np.ndarray:
        """(m, H, S, A, S) induced kernels."""
        return self._kernels


@dataclass(frozen=True, eq=False)
class CovMatrix:
    U: np.ndarray
    lambda_n: float

    def min_eig(self) -> float:
        return float(np.linalg.eigvalsh(self.U)[0])


def log_likelihoods(counts_h: np.ndarray, kernels_h: np.ndarray) -> np.ndarray:
    """Sum of n * log P over observed triples for each candidate; -inf if any is impossible."""
    mask = counts_h > 0
    out = np.empty(len(kernels_h))
    for k, P in enumerate(kernels_h):
        p = P[mask]
        out[k] = -np.inf if np.any(p <= 0) else float(np.sum(counts_h[mask] * np.log(p)))
    return out


def mle_counts(counts_h: np.ndarray, cls: ModelClass, h: int) -> int:
    ll = log_likelihoods(counts_h, cls.kernels[:, h])
    if np.all(np.isneginf(ll)) and counts_h.any():
        raise DegenerateDataError(f"every candidate assigns zero likelihood to step-{h} data")
    return int(np.argmax(ll))


def mle(dataset: Iterable[tuple[int, int, int]], cls: ModelClass, h: int = 0):
    """Maximum-likelihood candidate for step-h triples (s, a, s2); lowest index wins ties."""
    S, A = cls.candidates[0].shape[1:]
    counts = np.zeros((S, A, S), dtype=np.int64)
    for s, a, s2 in dataset:
        counts[s, a, s2] += 1
    k = mle_counts(counts, cls, h)
    return k, cls.candidates[k].phi[h], cls.candidates[k].mu[h]


def update_covariance(phi_hat: np.ndarray, samples: Iterable[tuple[int, int]], lambda_n: float) -> CovMatrix:
    """lambda_n I + sum of phi(s, a) phi(s, a)^T over the samples, for one step."""
    if lambda_n <= 0:
        raise ParameterError("lambda_n must be positive")
    d = phi_hat.shape[-1]
    U = lambda_n * np.eye(d)
    for s, a in samples:
        x = phi_hat[s, a]
        U += np.outer(x, x)
    return CovMatrix(0.5 * (U + U.T), lambda_n)


def covariance_from_counts(phi_hat: np.ndarray, counts_sa: np.ndarray, lambda_n: float) -> CovMatrix:
    """Same matrix as update_covariance, with repeated samples grouped by (s, a)."""
    if lambda_n <= 0:
        raise ParameterError("lambda_n must be positive")
    U = lambda_n * np.eye(phi_hat.shape[-1]) + np.einsum("sa,sai,saj->ij", counts_sa, phi_hat, phi_hat)
    return CovMatrix(0.5 * (U + U.T), lambda_n)


def elliptic_bonus(phi_hat: np.ndarray, cov: CovMatrix, alpha_hat: float) -> np.ndarray:
    """min(alpha_hat * ||phi(s, a)||_{U^-1}, 1) for every (s, a) of one step."""
    eig = np.linalg.eigvalsh(cov.U)
    if eig[0] <= 0:
        raise NumericError("covariance is not positive definite")
    if eig[-1] / eig[0] > COND_LIMIT:
        raise NumericError(f"covariance condition number {eig[-1] / eig[0]:.3g} exceeds {COND_LIMIT:g}")
    try:
        L = np.linalg.cholesky(cov.U)
    except np.linalg.LinAlgError as exc:
        raise NumericError(str(exc)) from exc
    S, A, d = phi_hat.shape
    y = solve_triangular(L, phi_hat.reshape(S * A, d).T, lower=True)
    norms = np.sqrt(np.sum(y * y, axis=0)).reshape(S, A)
    return np.minimum(alpha_hat * norms, 1.0)


@dataclass(frozen=True)
class LowRankConfig:
    S: int
    A: int
    H: int
    d: int
    class_size: int
    epsilon: float
    delta: float
    tau: float
    kappa: float
    Delta: float
    Delta_min: float
    beta3: float
    epsilon0: float
    t: int
    kappa_tilde: float
    A_tilde: float
    zeta: float
    alpha_hat: float
    lambda_n: float
    frak_U: float
    T: float
    N_max: float
    iteration_cap: int = 2000
    alpha_hat_override: Optional[float] = None
    zeta_override: Optional[float] = None
    threshold_override: Optional[float] = None

    @property
    def effective_alpha_hat(self) -> float:
        return self.alpha_hat if self.alpha_hat_override is None else self.alpha_hat_override

    @property
    def effective_zeta(self) -> float:
        return self.zeta if self.zeta_override is None else self.zeta_override

    @property
    def effective_T(self) -> float:
        return self.T if self.threshold_override is None else self.threshold_override

    def safe_set(self, baseline: MarkovPolicy) -> SafeSetSpec:
        return SafeSetSpec(self.tau, self.epsilon0, self.t, self.kappa_tilde, baseline)


def lowrank_N(H: int, A: int, d: int, class_size: int, delta: float, kappa: float, T: float,
              beta3: float, tol: float = 1e-10) -> float:
    """Iteration bound N; zeta depends on N, so the equation is iterated to a fixed point."""
    K = (2 ** 10 * beta3 * H ** 2 * d ** 4 * A ** 2 / (kappa ** 2 * T ** 2)
         + 2 ** 12 * 9 * beta3 * H ** 2 * d ** 4 * A ** 2 / kappa ** 4)
    zeta = lambda n: math.log(2 * class_size * class_size * n * H / delta)
    n = K
    for _ in range(10_000):
        nxt = K * zeta(n) ** 2
        if abs(nxt - n) <= tol * nxt:
            return nxt
        n = nxt
    raise AssertionError("fixed point for the low-rank N did not converge")


def compute_lowrank_constants(S: int, A: int, H: int, d: int, class_size: int, delta: float, tau: float,
                              kappa: float, Delta: float, Delta_min: float, epsilon: float, beta3: float = 1.0,
                              iteration_cap: int = 2000, alpha_hat_override: float | None = None,
                              zeta_override: float | None = None,
                              threshold_override: float | None = None) -> LowRankConfig:
    _check_ranges(epsilon, delta, tau, kappa, Delta, Delta_min)
    if beta3 <= 0:
        raise ParameterError("beta3 must be positive")
    eps0 = kappa / 6
    A_tilde = A / eps0
    frak_U = min(epsilon / 2, Delta_min / 2, epsilon * Delta_min / 5, tau / 6, kappa / 24)
    T = Delta * frak_U / 3
    N = lowrank_N(H, A, d, class_size, delta, kappa, T, beta3)
    zeta = math.log(2 * class_size * class_size * N * H / delta)
    return LowRankConfig(
        S=S, A=A, H=H, d=d, class_size=class_size, epsilon=epsilon, delta=delta, tau=tau, kappa=kappa,
        Delta=Delta, Delta_min=Delta_min, beta3=beta3, epsilon0=eps0, t=2, kappa_tilde=kappa / 3,
        A_tilde=A_tilde, zeta=zeta, alpha_hat=5 * math.sqrt(beta3 * zeta * (A_tilde + d * d)),
        lambda_n=beta3 * d * math.log(2 * N * H * class_size / delta), frak_U=frak_U, T=T, N_max=N,
        iteration_cap=iteration_cap, alpha_hat_override=alpha_hat_override, zeta_override=zeta_override,
        threshold_override=threshold_override)


def lowrank_uncertainty(model: TabularMDP, b: np.ndarray, A_tilde: float, zeta: float, n: int) -> TruncatedUncertainty:
    return TruncatedUncertainty(model, b, alpha=1.0, scale=1.0, power=1.0, offset=math.sqrt(A_tilde * zeta / n))


def greedy_steps(h: int, H: int) -> list[int]:
    """Randomised steps of episode h (0-based): h-1 and h, whichever exist."""
    return [k for k in (h - 1, h) if 0 <= k < H]


def run_exploration_lowrank(env, cls: ModelClass, cost: Utility, baseline: MarkovPolicy, config: LowRankConfig,
                            rng: np.random.Generator, audit: Optional[Callable[[MarkovPolicy], float]] = None,
                            solver_starts: int = 8):
    """Returns (P_hat, b_hat, RunLog)."""
    sampler = env if isinstance(env, EpisodeSampler) else EpisodeSampler(env, rng)
    H, S, A = sampler.H, sampler.S, sampler.A
    c = cost.values if isinstance(cost, Utility) else np.asarray(cost)
    spec = config.safe_set(baseline)
    alpha_hat, zeta, T = config.effective_alpha_hat, config.effective_zeta, config.effective_T
    data = np.zeros((H, S, A, S), dtype=np.int64)
    cov_counts = np.zeros((H, S, A), dtype=np.int64)
    registry = _PolicyRegistry(audit)
    extra = [f"mle_h{h}" for h in range(H)] + [f"min_eig_h{h}" for h in range(H)]
    runlog = RunLog(theoretical_N=config.N_max, cap=config.iteration_cap, extra_columns=extra)
    policy = baseline
    for n in range(1, config.iteration_cap + 1):
        worst, violations = -np.inf, 0
        for h in range(H):
            executed = greedy_version(policy, config.epsilon0, greedy_steps(h, H))
            _, true_cost = registry.record(executed)
            worst = max(worst, true_cost)
            violations += bool(true_cost > config.tau)
            traj = sampler.sample(executed)
            s, a, s2 = int(traj.states[h]), int(traj.actions[h]), int(traj.states[h + 1])
            data[h, s, a, s2] += 1
            # episode h supplies the step-(h-1) covariance sample; the last step reuses its own episode
            if h >= 1:
                cov_counts[h - 1, traj.states[h - 1], traj.actions[h - 1]] += 1
            if h == H - 1:
                cov_counts[h, s, a] += 1
        idx = [mle_counts(data[h], cls, h) for h in range(H)]
        P_hat = np.stack([cls.kernels[k, h] for h, k in enumerate(idx)])
        model = TabularMDP.trusted(P_hat, sampler.s1)
        b = np.empty((H, S, A))
        eigs = []
        for h, k in enumerate(idx):
            phi_h = cls.candidates[k].phi[h]
            cov = covariance_from_counts(phi_h, cov_counts[h], config.lambda_n)
            eigs.append(cov.min_eig())
            b[h] = elliptic_bonus(phi_h, cov, alpha_hat)
        U = lowrank_uncertainty(model, b, config.A_tilde, zeta, n)
        gate = safe_set_gate(model, c, U, spec)
        status, residual = BASELINE_ONLY, 0.0
        if gate.mode == RELAXED:
            try:
                res = max_uncertainty_safe(model, c, U, gate.budget, baseline, n_random_starts=solver_starts, rng=rng)
                policy, u_val, status, residual = res.markov, res.objective, res.status, res.residual
            except Exception as exc:
                log.warning("solver failed at iteration %d: %s", n, exc)
                policy, u_val, status = baseline, U(baseline), "SolverError"
        else:
            policy, u_val = baseline, U(baseline)
        terminated = gate.mode == RELAXED and u_val <= T
        row = {
            "episode": n, "mode": gate.mode, "u_value": float(u_val), "gate_load": float(gate.baseline_load),
            "true_cost": float(worst), "violation": violations, "solver_status": status,
            "solver_residual": float(residual), "terminated": terminated,
        }
        row.update({f"mle_h{h}": k for h, k in enumerate(idx)})
        row.update({f"min_eig_h{h}": float(e) for h, e in enumerate(eigs)})
        runlog.rows.append(row)
        if terminated:
            runlog.terminated = True
            break
    runlog.n_eps = n
    runlog.final_model, runlog.final_bonus = model, b
    runlog.uncertainty = lowrank_uncertainty(model, b, config.A_tilde, zeta, n)
    runlog.executed = registry.policies
    return model, b, runlog


def model_class_to_doc(cls: ModelClass) -> dict:
    H, S, A = cls.candidates[0].shape
    return {"format": "sweet.model_class", "version": VERSION, "S": S, "A": A, "H": H,
            "d": cls.candidates[0].d, "truth_index": cls.truth_index,
            "candidates": [{"phi": c.phi.tolist(), "mu": c.mu.tolist()} for c in cls.candidates]}


def model_class_from_doc(doc: dict) -> ModelClass:
    if doc.get("format") != "sweet.model_class" or doc.get("version") != VERSION:
        raise ValueError("not a sweet.model_class document")
    cands = tuple(LowRankModel(np.asarray(c["phi"]), np.asarray(c["mu"])) for c in doc["candidates"])
    return ModelClass(cands, doc.get("truth_index"))
