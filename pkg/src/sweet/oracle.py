"""Reference optima used to check the solver.

``cmdp_optimal`` solves the single-constraint CMDP exactly (Lagrangian
bisection with its own backward induction).  ``brute_force_constrained`` is a
sampling-plus-local-search lower bound for arbitrary functionals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError
from .mdp_core import MarkovPolicy, MixturePolicy, TabularMDP, all_deterministic_policies

RATIOS = tuple(2.0 ** -k for k in range(7))

OPTIMAL = "Optimal"
INFEASIBLE = "Infeasible"


@dataclass(frozen=True, eq=False)
class OracleResult:
    value: float
    policy: MixturePolicy | None
    status: str = OPTIMAL
    certificate: dict = field(default_factory=dict)


def _table(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


def _greedy(P: np.ndarray, s1: int, reward: np.ndarray):
    """Plain-loop backward induction, returns (value at s1, deterministic actions)."""
    H, S, A, _ = P.shape
    V = [0.0] * S
    acts = np.zeros((H, S), dtype=np.int64)
    for h in range(H - 1, -1, -1):
        newV = [0.0] * S
        for s in range(S):
            best, arg = -np.inf, 0
            for a in range(A):
                q = reward[h, s, a] + sum(P[h, s, a, t] * V[t] for t in range(S))
                if q > best:
                    best, arg = q, a
            newV[s] = best
            acts[h, s] = arg
        V = newV
    return V[s1], acts


def _policy_value(P: np.ndarray, s1: int, acts: np.ndarray, u: np.ndarray) -> float:
    H, S = acts.shape
    V = np.zeros(S)
    for h in range(H - 1, -1, -1):
        V = np.array([u[h, s, acts[h, s]] + P[h, s, acts[h, s]] @ V for s in range(S)])
    return float(V[s1])


def _to_policy(acts: np.ndarray, A: int) -> MarkovPolicy:
    H, S = acts.shape
    probs = np.zeros((H, S, A))
    for h in range(H):
        for s in range(S):
            probs[h, s, acts[h, s]] = 1.0
    return MarkovPolicy(probs)


def cmdp_optimal(trueP: TabularMDP, reward, cost, tau: float, steps: int = 200) -> OracleResult:
    """max V_r s.t. V_c <= tau, exactly, via the two-policy Lagrangian solution."""
    P, s1, A = trueP.P, trueP.s1, trueP.A
    r, c = _table(reward), _table(cost)
    vmin, amin = _greedy(P, s1, -c)
    if -vmin > tau + 1e-12:
        return OracleResult(value=-np.inf, policy=None, status=INFEASIBLE,
                            certificate={"min_cost": -vmin})

    def solve(lam):
        _, acts = _greedy(P, s1, r - lam * c)
        return acts, _policy_value(P, s1, acts, r), _policy_value(P, s1, acts, c)

    acts0, vr0, vc0 = solve(0.0)
    if vc0 <= tau:
        return OracleResult(vr0, MixturePolicy.single(_to_policy(acts0, A)),
                            certificate={"lambda": 0.0, "duality_gap": 0.0})
    lo, hi = 0.0, 1.0
    lo_sol = (acts0, vr0, vc0)
    hi_sol = solve(hi)
    while hi_sol[2] > tau:
        lo, lo_sol = hi, hi_sol
        hi *= 2.0
        hi_sol = solve(hi)
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        sol = solve(mid)
        if sol[2] > tau:
            lo, lo_sol = mid, sol
        else:
            hi, hi_sol = mid, sol
    (a_lo, r_lo, c_lo), (a_hi, r_hi, c_hi) = lo_sol, hi_sol
    theta = 0.0 if c_lo == c_hi else (tau - c_hi) / (c_lo - c_hi)
    theta = min(1.0, max(0.0, theta))
    value = (1 - theta) * r_hi + theta * r_lo
    dual = r_hi - hi * (c_hi - tau)
    mix = MixturePolicy((_to_policy(a_hi, A), _to_policy(a_lo, A)), np.array([1 - theta, theta]))
    return OracleResult(value, mix, certificate={"lambda": hi, "duality_gap": max(0.0, dual - value)})


def _random_policies(rng: np.random.Generator, n: int, H: int, S: int, A: int) -> np.ndarray:
    return rng.dirichlet(np.ones(A), size=(n, H, S))


def _repair(objective, constraint, budget, X: np.ndarray, anchor: np.ndarray, iters: int = 30) -> np.ndarray:
    """Bisect along policy-space segments from X toward the feasible anchor."""
    lo = np.zeros(len(X))
    hi = np.ones(len(X))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        Y = (1 - mid)[:, None, None, None] * X + mid[:, None, None, None] * anchor
        ok = constraint.batch(Y) <= budget
        hi = np.where(ok, mid, hi)
        lo = np.where(ok, lo, mid)
    return (1 - hi)[:, None, None, None] * X + hi[:, None, None, None] * anchor


def _moves(H: int, S: int, A: int) -> list[tuple]:
    rows = [(h, s, a) for h in range(H) for s in range(S) for a in range(A)]
    moves = [((r, 1.0),) for r in rows]
    for i, r1 in enumerate(rows):
        for r2 in rows:
            if r1[:2] == r2[:2]:
                continue
            for ratio in RATIOS:
                moves.append(((r1, 1.0), (r2, ratio)))
    return moves


def _apply_moves(X: np.ndarray, step: np.ndarray, moves) -> np.ndarray:
    """All move variants for every candidate: shape (K, M, H, S, A)."""
    K = len(X)
    out = np.repeat(X[:, None], len(moves), axis=1)
    for m, move in enumerate(moves):
        for (h, s, a), scale in move:
            eta = step * scale
            row = out[:, m, h, s, :] * (1 - eta)[:, None]
            row[:, a] += eta
            out[:, m, h, s, :] = row
    return out


def _repair_moves(objective, constraint, budget, X, fx, step, singles, iters: int = 24):
    """Improving single-row moves made feasible again by a bisected move on another row."""
    K = len(X)
    combos = [(r1, r2) for r1 in singles for r2 in singles if r1[:2] != r2[:2]]
    Y = np.repeat(X[:, None], len(combos), axis=1)
    for m, ((h, s, a), _) in enumerate(combos):
        row = Y[:, m, h, s, :] * (1 - step)[:, None]
        row[:, a] += step
        Y[:, m, h, s, :] = row
    lo = np.zeros((K, len(combos)))
    hi = np.ones((K, len(combos)))

    def second(t):
        Z = Y.copy()
        for m, (_, (h, s, b)) in enumerate(combos):
            row = Z[:, m, h, s, :] * (1 - t[:, m])[:, None]
            row[:, b] += t[:, m]
            Z[:, m, h, s, :] = row
        return Z

    def con(Z):
        return constraint.batch(Z.reshape((-1,) + Z.shape[2:])).reshape(K, len(combos))

    ok_full = con(second(hi)) <= budget
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        ok = con(second(mid)) <= budget
        hi = np.where(ok, mid, hi)
        lo = np.where(ok, lo, mid)
    Z = second(np.where(ok_full, hi, 1.0))
    fz = objective.batch(Z.reshape((-1,) + Z.shape[2:])).reshape(K, len(combos))
    fz = np.where(ok_full & (con(Z) <= budget), fz, -np.inf)
    j = np.argmax(fz, axis=1)
    return Z[np.arange(K), j], fz[np.arange(K), j]


def brute_force_constrained(model: TabularMDP, objective, constraint, budget: float,
                            sampling_budget: int = 100_000, rng: np.random.Generator | None = None,
                            refine: int = 32, refine_steps: int = 200, chunk: int = 20_000) -> OracleResult:
    """Best feasible value found by dense sampling and local search: a lower bound."""
    rng = np.random.default_rng(0) if rng is None else rng
    H, S, A = model.shape
    pools = []
    if A ** (S * H) <= 4096:
        pools.append(all_deterministic_policies(H, S, A))
    done = 0
    obj_vals, con_vals, pols = [], [], []
    for pool in pools:
        pols.append(pool)
    while done < sampling_budget:
        n = min(chunk, sampling_budget - done)
        pols.append(_random_policies(rng, n, H, S, A))
        done += n
    X_all = np.concatenate(pols)
    for i in range(0, len(X_all), chunk):
        obj_vals.append(objective.batch(X_all[i:i + chunk]))
        con_vals.append(constraint.batch(X_all[i:i + chunk]))
    f, g = np.concatenate(obj_vals), np.concatenate(con_vals)
    feas = g <= budget
    if not feas.any():
        return OracleResult(-np.inf, None, status=INFEASIBLE, certificate={"sampling_budget": sampling_budget})

    order = np.flatnonzero(feas)[np.argsort(-f[feas], kind="stable")]
    best_feasible = X_all[order[0]]
    X = X_all[order[:refine]]
    bad = np.flatnonzero(~feas)
    if bad.size:
        top_bad = bad[np.argsort(-f[bad], kind="stable")][: max(1, refine // 4)]
        X = np.concatenate([X, _repair(objective, constraint, budget, X_all[top_bad], best_feasible)])
        X = X[constraint.batch(X) <= budget]

    moves = _moves(H, S, A)
    singles = [mv[0][0] for mv in moves if len(mv) == 1]
    fx = objective.batch(X)
    step = np.full(len(X), 0.25)
    best, idle = fx.max(), 0
    for _ in range(refine_steps):
        Y = _apply_moves(X, step, moves)
        K, M = Y.shape[:2]
        flat = Y.reshape((K * M,) + Y.shape[2:])
        fy = objective.batch(flat).reshape(K, M)
        gy = constraint.batch(flat).reshape(K, M)
        fy = np.where(gy <= budget, fy, -np.inf)
        j = np.argmax(fy, axis=1)
        gain = fy[np.arange(K), j] > fx
        X = np.where(gain[:, None, None, None], Y[np.arange(K), j], X)
        fx = np.where(gain, fy[np.arange(K), j], fx)
        stuck = np.flatnonzero(~gain)
        stuck = stuck[np.argsort(-fx[stuck], kind="stable")][:4]
        if stuck.size:
            Xs, fs = _repair_moves(objective, constraint, budget, X[stuck], fx[stuck], step[stuck], singles)
            fixed = fs > fx[stuck]
            X[stuck[fixed]] = Xs[fixed]
            fx[stuck[fixed]] = fs[fixed]
            gain[stuck[fixed]] = True
        step = np.where(gain, np.minimum(step * 1.5, 0.5), step * 0.5)
        if np.all(step < 1e-9):
            break
        idle = idle + 1 if fx.max() <= best + 1e-13 else 0
        best = max(best, fx.max())
        if idle >= 25:
            break
    i = int(np.argmax(fx))
    pol = MarkovPolicy.trusted(X[i] / X[i].sum(axis=-1, keepdims=True))
    return OracleResult(float(fx[i]), MixturePolicy.single(pol), certificate={
        "sampling_budget": sampling_budget, "refined": int(len(X)), "refine_steps": refine_steps})
