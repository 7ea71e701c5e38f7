"""Constrained policy optimisation over mixtures of Markov policies.

Two problems are solved here:

* exploration:  max U(pi)          s.t.  V_c(pi) + U(pi) <= budget
* planning:     max V_r(pi)        s.t.  V_c*(pi) + U(pi) <= tau*

U is concave along mixtures, so both feasible sets are reverse-convex.  The
solver linearises U inside the constraint at the current iterate (which gives
an upper bound, so the linearised constraint is conservative) and solves the
resulting problem with a single linear constraint exactly by Lagrangian
bisection.  The inner maximisation is dynamic programming for a linear
objective and pairwise Frank-Wolfe for a concave one.  Iterates only improve
and stay feasible; several starting points are tried and the best is kept.

Mixtures are stored as vertex policies, their occupancies and weights.
Everything that is linear in the policy is evaluated from occupancies.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ParameterError, PreconditionError
from .functionals import Combination, Functional, LinearValue, Zero
from .mdp_core import (
    MarkovPolicy,
    MixturePolicy,
    TabularMDP,
    forward_occupancy,
    markov_from_occupancy,
    optimal_values,
    uniform_policy,
)

OPTIMAL = "Optimal"
BASELINE_ONLY = "BaselineOnly"
MAX_ITERATIONS = "MaxIterations"
INFEASIBLE = "Infeasible"
RELAXED = "Relaxed"

PRUNE_WEIGHT = 1e-9
FW_MAX_ITER = 500
FW_TOL = 1e-9


@dataclass(frozen=True)
class SafeSetSpec:
    tau: float
    epsilon0: float
    t: int
    kappa_tilde: float
    baseline: MarkovPolicy

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ParameterError("tau must lie in (0, 1]")
        if self.epsilon0 < 0 or self.t < 0 or self.kappa_tilde <= 0:
            raise ParameterError("epsilon0, t must be >= 0 and kappa_tilde > 0")

    @property
    def threshold(self) -> float:
        """Gate threshold: baseline-only when V_c + U of the baseline reaches it."""
        return self.tau - self.epsilon0 * self.t - self.kappa_tilde

    @property
    def budget(self) -> float:
        return self.tau - self.epsilon0 * self.t

    def check_margin(self, kappa: float) -> None:
        if not self.epsilon0 * self.t + self.kappa_tilde < kappa:
            raise ParameterError("need epsilon0 * t + kappa_tilde < kappa")


@dataclass(frozen=True)
class GateResult:
    mode: str
    baseline_load: float  # V_c(pi0) + U(pi0) under the estimate
    threshold: float
    budget: float


@dataclass(frozen=True, eq=False)
class SolveResult:
    mixture: MixturePolicy
    markov: MarkovPolicy
    objective: float
    constraint_value: float
    status: str
    residual: float
    budget: float
    diagnostics: dict = field(default_factory=dict)


def safe_set_gate(model: TabularMDP, cost, U: Functional, spec: SafeSetSpec) -> GateResult:
    load = LinearValue(model, cost)(spec.baseline) + U(spec.baseline)
    mode = BASELINE_ONLY if load >= spec.threshold else RELAXED
    return GateResult(mode=mode, baseline_load=load, threshold=spec.threshold, budget=spec.budget)


def dp_best_response(model: TabularMDP, linear_reward, alpha: float = 1.0) -> MarkovPolicy:
    """Deterministic maximiser of the unclipped alpha-weighted value; lowest index wins ties."""
    r = np.asarray(linear_reward, dtype=np.float64)
    if r.shape != model.shape:
        raise ParameterError(f"reward shape {r.shape} does not match {model.shape}")
    if not np.all(np.isfinite(r)):
        raise ParameterError("reward must be finite")
    _, probs = optimal_values(model.P, r, alpha)
    return MarkovPolicy.trusted(probs)


# mixtures ------------------------------------------------------------------------

class _Mix:
    """Mixture over vertex policies with cached occupancies."""

    def __init__(self, model: TabularMDP, probs: np.ndarray, weights: np.ndarray, occ: np.ndarray | None = None):
        self.model = model
        self.probs = np.asarray(probs, dtype=np.float64)
        self.w = np.asarray(weights, dtype=np.float64)
        self.occ = forward_occupancy(model.P, self.probs, model.s1) if occ is None else occ

    @classmethod
    def of(cls, model: TabularMDP, policy) -> "_Mix":
        probs = policy.probs if isinstance(policy, MarkovPolicy) else np.asarray(policy)
        return cls(model, probs[None], np.ones(1))

    def copy(self) -> "_Mix":
        return _Mix(self.model, self.probs.copy(), self.w.copy(), self.occ.copy())

    def rho(self, w: np.ndarray | None = None) -> np.ndarray:
        return np.tensordot(self.w if w is None else w, self.occ, axes=(-1, 0))

    def policy(self, w: np.ndarray | None = None) -> np.ndarray:
        if self.w.shape[0] == 1 and w is None:
            return self.probs[0]
        return markov_from_occupancy(self.rho(w), self.probs[0])

    def add(self, probs: np.ndarray, occ: np.ndarray | None = None) -> int:
        for i, p in enumerate(self.probs):
            if np.array_equal(p, probs):
                return i
        if occ is None:
            occ = forward_occupancy(self.model.P, probs, self.model.s1)
        self.probs = np.concatenate([self.probs, probs[None]])
        self.occ = np.concatenate([self.occ, occ[None]])
        self.w = np.concatenate([self.w, [0.0]])
        return len(self.w) - 1

    def prune(self) -> "_Mix":
        keep = self.w >= PRUNE_WEIGHT
        if not keep.any():
            keep[np.argmax(self.w)] = True
        w = self.w[keep]
        return _Mix(self.model, self.probs[keep], w / w.sum(), self.occ[keep])

    def to_mixture(self) -> MixturePolicy:
        w = self.w / self.w.sum()
        return MixturePolicy(tuple(MarkovPolicy.trusted(p) for p in self.probs), w)


def _blend(a: _Mix, b: _Mix) -> tuple[_Mix, np.ndarray, np.ndarray]:
    """Common vertex set for two mixtures; returns it and both weight vectors."""
    m = a.copy()
    m.w = np.zeros(len(a.w))
    wb_idx = [m.add(p, o) for p, o in zip(b.probs, b.occ)]
    wa = np.zeros(len(m.w))
    wa[: len(a.w)] = a.w
    wb = np.zeros(len(m.w))
    np.add.at(wb, wb_idx, b.w)
    return m, wa, wb


def _segment(a: _Mix, b: _Mix, theta: float) -> _Mix:
    """(1 - theta) * a + theta * b."""
    m, wa, wb = _blend(a, b)
    m.w = (1 - theta) * wa + theta * wb
    return m.prune()


def _eval_weights(mix: _Mix, f: Functional, W: np.ndarray) -> np.ndarray:
    """f at the Markov equivalents of a batch of weight vectors W (m, k)."""
    rho = np.tensordot(W, mix.occ, axes=(1, 0))
    if f.is_linear:
        return np.einsum("mhsa,hsa->m", rho, _linear_coef(f))
    if isinstance(f, Combination):
        lin = [(c, g) for c, g in f.terms if g.is_linear]
        out = np.zeros(len(W))
        if lin:
            coef = sum(c * _linear_coef(g) for c, g in lin)
            out += np.einsum("mhsa,hsa->m", rho, coef)
        probs = markov_from_occupancy(rho, mix.probs[0])
        for c, g in f.terms:
            if not g.is_linear:
                out += c * g.batch(probs)
        return out
    return f.batch(markov_from_occupancy(rho, mix.probs[0]))


def _linear_coef(f: Functional) -> np.ndarray:
    if isinstance(f, (LinearValue, Zero, Combination)):
        return f.linear_coefficients()
    raise TypeError("functional is not linear")


def _grid_argmax(fun, lo: float, hi: float, rounds: int = 4, m: int = 129) -> tuple[float, float]:
    """Maximise a concave scalar function on [lo, hi] by nested grids (vectorised)."""
    best_x, best_v = lo, float(fun(np.array([lo]))[0])
    a, b = lo, hi
    for _ in range(rounds):
        xs = np.linspace(a, b, m)
        vs = fun(xs)
        i = int(np.argmax(vs))
        if vs[i] > best_v:
            best_x, best_v = float(xs[i]), float(vs[i])
        step = (b - a) / (m - 1)
        a, b = max(lo, xs[i] - step), min(hi, xs[i] + step)
    return best_x, best_v


def _last_feasible(fun, budget: float, rounds: int = 4, m: int = 129) -> float:
    """Largest theta in [0, 1] with fun(theta) <= budget, given fun(0) <= budget.

    fun is concave along the segment, so the feasible part is an interval [0, t].
    """
    a, b = 0.0, 1.0
    best = 0.0
    for _ in range(rounds):
        xs = np.linspace(a, b, m)
        bad = np.flatnonzero(fun(xs) > budget)
        if bad.size == 0:
            return float(b)
        j = int(bad[0])
        if j == 0:
            break
        best = float(xs[j - 1])
        a, b = xs[j - 1], xs[j]
    return best


# Frank-Wolfe -----------------------------------------------------------------------

@dataclass
class _FWInfo:
    iterations: int = 0
    gap: float = np.inf
    capped: bool = False
    history: list = field(default_factory=list)


def frank_wolfe(model: TabularMDP, objective: Functional, start: _Mix,
                max_iter: int = FW_MAX_ITER, tol: float = FW_TOL, record: bool = False) -> tuple[_Mix, float, _FWInfo]:
    """Pairwise Frank-Wolfe for a concave functional over the occupancy polytope.

    Linear oracle: dp_best_response on the occupancy supergradient.  Step sizes
    come from an exact line search, so the objective never decreases.
    """
    mix = start.copy()
    info = _FWInfo()
    val = float(_eval_weights(mix, objective, mix.w[None])[0])
    if record:
        info.history.append(val)
    for k in range(max_iter):
        info.iterations = k
        probs = mix.policy()
        r = objective.occupancy_gradient(probs)
        rho = mix.rho()
        _, s_probs = optimal_values(model.P, r)
        s_occ = forward_occupancy(model.P, s_probs, model.s1)
        info.gap = float(np.sum(r * (s_occ - rho)))
        if info.gap <= tol:
            break
        idx = mix.add(s_probs, s_occ)
        scores = np.einsum("khsa,hsa->k", mix.occ, r)
        active = np.flatnonzero(mix.w > 0)
        away = int(active[np.argmin(scores[active])])
        if away == idx:
            break
        direction = np.zeros(len(mix.w))
        direction[idx] += 1.0
        direction[away] -= 1.0
        gmax = mix.w[away]

        def along(gs, base=mix.w.copy(), d=direction):
            return _eval_weights(mix, objective, base[None] + gs[:, None] * d[None])

        g, v = _grid_argmax(along, 0.0, gmax)
        if v <= val:
            # the pairwise direction stalled; try a plain step towards the oracle vertex
            d2 = -mix.w.copy()
            d2[idx] += 1.0
            g, v = _grid_argmax(lambda gs, base=mix.w.copy(), d=d2: _eval_weights(mix, objective, base[None] + gs[:, None] * d[None]), 0.0, 1.0)
            if v <= val:
                break
            direction = d2
        w = mix.w + g * direction
        w[np.abs(w) < 1e-15] = 0.0
        mix.w = np.clip(w, 0.0, None) / np.clip(w, 0.0, None).sum()
        val = v
        if record:
            info.history.append(val)
        if len(mix.w) > 64:
            mix = mix.prune()
    else:
        info.capped = True
    mix = mix.prune()
    val = float(_eval_weights(mix, objective, mix.w[None])[0])
    return mix, val, info


# one linear constraint ----------------------------------------------------------------

def _inner(model: TabularMDP, objective: Functional, ell: np.ndarray, lam: float, warm: _Mix, info: dict) -> _Mix:
    if objective.is_linear:
        _, probs = optimal_values(model.P, _linear_coef(objective) - lam * ell)
        return _Mix.of(model, probs)
    f = Combination([(1.0, objective), (-lam, LinearValue(model, ell))])
    mix, _, fw = frank_wolfe(model, f, warm)
    info["fw_capped"] = info.get("fw_capped", False) or fw.capped
    return mix


def lagrangian_solve(model: TabularMDP, objective: Functional, ell: np.ndarray, bound: float,
                     warm: _Mix, steps: int | None = None, info: dict | None = None) -> Optional[_Mix]:
    """max objective s.t. sum(ell * rho) <= bound, for concave objective.

    Bisection on the multiplier, then the two bracketing maximisers are mixed
    so the linear constraint holds with equality.  Returns None when even a
    huge multiplier cannot reach the bound.
    """
    info = {} if info is None else info
    if steps is None:
        steps = 100 if objective.is_linear else 50
    load = lambda m: float(np.sum(ell * m.rho()))
    lo = _inner(model, objective, ell, 0.0, warm, info)
    if load(lo) <= bound:
        return lo
    lam_lo, lam_hi = 0.0, 1.0
    hi = _inner(model, objective, ell, lam_hi, lo, info)
    while load(hi) > bound:
        lam_lo, lo = lam_hi, hi
        lam_hi *= 2.0
        if lam_hi > 2.0 ** 40:
            return None
        hi = _inner(model, objective, ell, lam_hi, hi, info)
    for _ in range(steps):
        mid = 0.5 * (lam_lo + lam_hi)
        if mid <= lam_lo or mid >= lam_hi:
            break
        cand = _inner(model, objective, ell, mid, hi, info)
        if load(cand) > bound:
            lam_lo, lo = mid, cand
        else:
            lam_hi, hi = mid, cand
        # mixing the bracket loses at most (lam_hi - lam_lo) * (load gap) of objective
        if (lam_hi - lam_lo) * (load(lo) - load(hi)) < 1e-9 or load(hi) >= bound - 1e-13:
            break
    info["multiplier"] = lam_hi
    l_lo, l_hi = load(lo), load(hi)
    if l_lo - l_hi <= 0:
        return hi
    theta = min(1.0, max(0.0, (bound - l_hi) / (l_lo - l_hi)))
    m, w_hi, w_lo = _blend(hi, lo)
    m.w = (1 - theta) * w_hi + theta * w_lo
    return m


# reverse-convex constraint ----------------------------------------------------------------

class _Problem:
    def __init__(self, model: TabularMDP, objective: Functional, cost, U: Functional, budget: float):
        self.model = model
        self.objective = objective
        self.c = np.asarray(cost.values if hasattr(cost, "values") else cost, dtype=np.float64)
        self.U = U
        self.budget = float(budget)
        self.F = Combination([(1.0, LinearValue(model, self.c)), (1.0, U)]) if not U.is_zero else LinearValue(model, self.c)
        self.info: dict = {}

    def load(self, mix: _Mix) -> float:
        return float(_eval_weights(mix, self.F, mix.w[None])[0])

    def value(self, mix: _Mix) -> float:
        return float(_eval_weights(mix, self.objective, mix.w[None])[0])

    def repair(self, bad: _Mix, good: _Mix) -> _Mix:
        """Move from ``bad`` toward the feasible ``good`` until the constraint holds."""
        m, wa, wb = _blend(good, bad)
        fun = lambda th: _eval_weights(m, self.F, (1 - th)[:, None] * wa[None] + th[:, None] * wb[None])
        theta = _last_feasible(fun, self.budget)
        out = _segment(good, bad, theta)
        if self.load(out) > self.budget:
            return good
        return out

    def ccp(self, start: _Mix, max_outer: int = 50) -> tuple[_Mix, float]:
        mix, val = start, self.value(start)
        for _ in range(max_outer):
            probs = mix.policy()
            g = self.U.occupancy_gradient(probs)
            ell = self.c + g
            rho = mix.rho()
            bound = self.budget - self.U(probs) + float(np.sum(g * rho))
            new = lagrangian_solve(self.model, self.objective, ell, bound, mix, info=self.info)
            if new is None:
                break
            if self.load(new) > self.budget:
                new = self.repair(new, mix)
            new_val = self.value(new)
            if new_val <= val + 1e-10:
                break
            mix, val = new, new_val
            if self.U.is_zero:
                break
        return mix, val

    def result(self, mix: _Mix, status: str | None = None, **diag) -> SolveResult:
        pruned = mix.prune()
        if self.load(pruned) <= self.budget or self.load(mix) > self.budget:
            mix = pruned
        probs = mix.policy()
        load = self.load(mix)
        if status is None:
            status = MAX_ITERATIONS if self.info.get("fw_capped") else OPTIMAL
        diag.update({k: v for k, v in self.info.items() if k != "multiplier"})
        return SolveResult(
            mixture=mix.to_mixture(),
            markov=MarkovPolicy.trusted(probs),
            objective=self.value(mix),
            constraint_value=load,
            status=status,
            residual=max(0.0, load - self.budget),
            budget=self.budget,
            diagnostics=diag,
        )


def _random_starts(model: TabularMDP, n: int, rng: np.random.Generator) -> list[np.ndarray]:
    H, S, A = model.shape
    return [rng.dirichlet(np.ones(A), size=(H, S)) for _ in range(n)]


def max_uncertainty_safe(model: TabularMDP, cost, U: Functional, budget: float, baseline: MarkovPolicy,
                         n_random_starts: int = 8, rng: np.random.Generator | None = None) -> SolveResult:
    """max U(pi) s.t. V_c(pi) + U(pi) <= budget, starting from a strictly feasible baseline."""
    prob = _Problem(model, U, cost, U, budget)
    base = _Mix.of(model, baseline)
    base_load = prob.load(base)
    if not base_load < budget:
        raise PreconditionError(f"baseline is not strictly feasible: V_c + U = {base_load!r} >= {budget!r}")
    if U.is_zero:
        return prob.result(base)
    rng = np.random.default_rng(0) if rng is None else rng

    best, best_val = base, prob.value(base)
    free, free_val, _ = frank_wolfe(model, U, base)
    if prob.load(free) <= budget:
        return prob.result(free, starts=1)

    starts = [base, prob.repair(free, base), _Mix.of(model, uniform_policy(*model.shape))]
    starts += [_Mix.of(model, p) for p in _random_starts(model, n_random_starts, rng)]
    for s in starts:
        if prob.load(s) > budget:
            s = prob.repair(s, base)
        mix, val = prob.ccp(s)
        if val > best_val:
            best, best_val = mix, val
    return prob.result(best, starts=len(starts))


def _feasibility_phase(prob: _Problem, extra: list[_Mix], max_outer: int = 50) -> tuple[_Mix, float]:
    """Minimise V_c* + U (concave) by successive vertex linearisations."""
    model = prob.model
    _, pmin = optimal_values(model.P, prob.c, minimize=True)
    cands = [_Mix.of(model, pmin)] + extra
    best, best_load = None, np.inf
    for mix in cands:
        load = prob.load(mix)
        for _ in range(max_outer):
            g = prob.c + prob.U.occupancy_gradient(mix.policy())
            _, probs = optimal_values(model.P, g, minimize=True)
            nxt = _Mix.of(model, probs)
            nl = prob.load(nxt)
            if nl >= load - 1e-15:
                break
            mix, load = nxt, nl
        if load < best_load:
            best, best_load = mix, load
    return best, best_load


def plan(model: TabularMDP, reward, cost_star, tau_star: float, U: Functional | None = None,
         baseline: MarkovPolicy | None = None, n_random_starts: int = 8,
         rng: np.random.Generator | None = None) -> SolveResult:
    """max V_r(pi) s.t. V_c*(pi) + U(pi) <= tau* under the estimated model."""
    U = Zero(model) if U is None else U
    r = np.asarray(reward.values if hasattr(reward, "values") else reward, dtype=np.float64)
    prob = _Problem(model, LinearValue(model, r), cost_star, U, tau_star)
    extra = [] if baseline is None else [_Mix.of(model, baseline)]
    feas, feas_load = _feasibility_phase(prob, extra)
    if feas_load > tau_star:
        return prob.result(feas, status=INFEASIBLE, min_load=feas_load)

    _, pr = optimal_values(model.P, r)
    greedy = _Mix.of(model, pr)
    if prob.load(greedy) <= tau_star:
        return prob.result(greedy, starts=0)
    if U.is_zero:
        mix, _ = prob.ccp(feas)
        return prob.result(mix, starts=1)

    rng = np.random.default_rng(0) if rng is None else rng
    starts = [feas, greedy, _Mix.of(model, uniform_policy(*model.shape))] + extra
    starts += [_Mix.of(model, p) for p in _random_starts(model, n_random_starts, rng)]
    best, best_val = feas, prob.value(feas)
    for s in starts:
        if prob.load(s) > tau_star:
            s = prob.repair(s, feas)
        mix, val = prob.ccp(s)
        if val > best_val:
            best, best_val = mix, val
    return prob.result(best, starts=len(starts))
