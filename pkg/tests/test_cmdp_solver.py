import numpy as np
import pytest
from scipy.optimize import linprog

from instances import small_mdp
from sweet.cmdp_solver import (
    BASELINE_ONLY,
    INFEASIBLE,
    OPTIMAL,
    RELAXED,
    SafeSetSpec,
    _Mix,
    dp_best_response,
    frank_wolfe,
    lagrangian_solve,
    max_uncertainty_safe,
    plan,
    safe_set_gate,
)
from sweet.errors import ParameterError, PreconditionError
from sweet.functionals import LinearValue, TruncatedUncertainty, Zero
from sweet.mdp_core import (
    MarkovPolicy,
    all_deterministic_policies,
    min_cost_value,
    mixture_to_markov,
    random_policy,
    uniform_policy,
    value,
)
from sweet.oracle import brute_force_constrained, cmdp_optimal


def lp_optimum(mdp, r, c, tau):
    """Occupancy-measure linear program for max V_r s.t. V_c <= tau."""
    H, S, A = mdp.shape
    n = H * S * A
    idx = lambda h, s, a: (h * S + s) * A + a
    rows, rhs = [], []
    for s in range(S):
        row = np.zeros(n)
        row[[idx(0, s, a) for a in range(A)]] = 1
        rows.append(row)
        rhs.append(1.0 if s == mdp.s1 else 0.0)
    for h in range(H - 1):
        for t in range(S):
            row = np.zeros(n)
            for a in range(A):
                row[idx(h + 1, t, a)] = 1
            for s in range(S):
                for a in range(A):
                    row[idx(h, s, a)] -= mdp.P[h, s, a, t]
            rows.append(row)
            rhs.append(0.0)
    res = linprog(-r.ravel(), A_ub=c.ravel()[None], b_ub=[tau], A_eq=np.array(rows), b_eq=rhs,
                  bounds=(0, None), method="highs")
    return -res.fun if res.status == 0 else None


def uncertainty(rng, mdp, level=0.1):
    return TruncatedUncertainty(mdp, rng.random(mdp.shape) * level, alpha=1 + 1 / mdp.H, scale=4.0, power=0.5)


def test_gate_switches_on_threshold():
    rng = np.random.default_rng(40)
    mdp = small_mdp(rng)
    c = rng.random(mdp.shape) / (2 * mdp.H)
    base = uniform_policy(*mdp.shape)
    spec = SafeSetSpec(tau=0.5, epsilon0=0.0, t=0, kappa_tilde=0.05, baseline=base)
    vc = value(mdp, base, c)
    small = TruncatedUncertainty(mdp, np.zeros(mdp.shape), offset=0.45 - vc - 1e-6)
    big = TruncatedUncertainty(mdp, np.zeros(mdp.shape), offset=0.45 - vc + 1e-6)
    assert safe_set_gate(mdp, c, small, spec).mode == RELAXED
    g = safe_set_gate(mdp, c, big, spec)
    assert g.mode == BASELINE_ONLY and g.threshold == pytest.approx(0.45) and g.budget == 0.5


def test_safe_set_spec_validation_and_margin():
    base = uniform_policy(1, 1, 1)
    with pytest.raises(ParameterError):
        SafeSetSpec(0.0, 0.1, 1, 0.1, base)
    with pytest.raises(ParameterError):
        SafeSetSpec(0.5, 0.1, 1, 0.0, base)
    spec = SafeSetSpec(0.5, 0.1 / 6, 2, 0.1 / 3, base)
    spec.check_margin(0.1)
    with pytest.raises(ParameterError):
        SafeSetSpec(0.5, 0.05, 2, 0.05, base).check_margin(0.1)


def test_dp_best_response_is_optimal_and_breaks_ties_low():
    rng = np.random.default_rng(41)
    mdp = small_mdp(rng, H=2, S=3, A=2)
    r = rng.standard_normal(mdp.shape)
    best = dp_best_response(mdp, r)
    assert best.is_deterministic()
    vals = [value(mdp, MarkovPolicy.trusted(p), r) for p in all_deterministic_policies(*mdp.shape)]
    assert value(mdp, best, r) == pytest.approx(max(vals), abs=1e-12)
    tie = dp_best_response(mdp, np.zeros(mdp.shape))
    assert np.all(tie.probs[..., 0] == 1)
    with pytest.raises(ParameterError):
        dp_best_response(mdp, np.zeros((1, 1, 1)))
    with pytest.raises(ParameterError):
        dp_best_response(mdp, np.full(mdp.shape, np.nan))


def test_frank_wolfe_reaches_unconstrained_max_of_concave_functional():
    rng = np.random.default_rng(42)
    for _ in range(3):
        mdp = small_mdp(rng, H=2, S=2, A=2)
        U = uncertainty(rng, mdp, 0.5)
        mix, val, info = frank_wolfe(mdp, U, _Mix.of(mdp, uniform_policy(*mdp.shape)), record=True)
        assert np.all(np.diff(info.history) >= -1e-12)
        ref = brute_force_constrained(mdp, U, Zero(mdp), 1.0, sampling_budget=20_000, rng=np.random.default_rng(0))
        assert val >= ref.value - 1e-6
        assert val == pytest.approx(U(mix.policy()), abs=1e-12)


def test_lagrangian_solve_linear_matches_lp():
    rng = np.random.default_rng(43)
    for _ in range(5):
        mdp = small_mdp(rng)
        r, c = rng.random(mdp.shape), rng.random(mdp.shape)
        vmin, pmin = min_cost_value(mdp, c)
        tau = vmin + rng.uniform(0.05, 0.5)
        mix = lagrangian_solve(mdp, LinearValue(mdp, r), c, tau, _Mix.of(mdp, pmin))
        rho = mix.rho()
        assert np.sum(c * rho) <= tau + 1e-9
        assert np.sum(r * rho) == pytest.approx(lp_optimum(mdp, r, c, tau), abs=1e-7)


def test_plan_without_uncertainty_matches_exact_optimum():
    rng = np.random.default_rng(44)
    for _ in range(10):
        mdp = small_mdp(rng)
        r, c = rng.random(mdp.shape) / mdp.H, rng.random(mdp.shape) / mdp.H
        tau = min_cost_value(mdp, c)[0] + rng.uniform(0.01, 0.3)
        res = plan(mdp, r, c, tau)
        opt = cmdp_optimal(mdp, r, c, tau)
        assert res.objective == pytest.approx(opt.value, abs=1e-6)
        assert res.constraint_value <= tau + 1e-9
        # the returned Markov policy realises the mixture's value
        assert value(mdp, res.markov, r) == pytest.approx(res.objective, abs=1e-9)
        assert value(mdp, mixture_to_markov(mdp, res.mixture), r) == pytest.approx(res.objective, abs=1e-9)


def test_plan_reports_infeasible():
    rng = np.random.default_rng(45)
    mdp = small_mdp(rng)
    c = rng.random(mdp.shape) / mdp.H
    tau = min_cost_value(mdp, c)[0] * 0.5
    res = plan(mdp, rng.random(mdp.shape), c, tau)
    assert res.status == INFEASIBLE and res.residual > 0


def test_plan_unconstrained_when_greedy_is_feasible():
    rng = np.random.default_rng(46)
    mdp = small_mdp(rng)
    r = rng.random(mdp.shape)
    res = plan(mdp, r, np.zeros(mdp.shape), 0.5)
    assert res.status == OPTIMAL
    assert res.objective == pytest.approx(value(mdp, dp_best_response(mdp, r), r))


def test_max_uncertainty_safe_feasible_and_not_worse_than_baseline():
    rng = np.random.default_rng(47)
    for _ in range(3):
        mdp = small_mdp(rng, H=2, S=3, A=2)
        c = rng.random(mdp.shape) / 4
        U = uncertainty(rng, mdp, 0.05)
        base = random_policy(rng, *mdp.shape)
        budget = value(mdp, base, c) + U(base) + 0.1
        res = max_uncertainty_safe(mdp, c, U, budget, base, rng=np.random.default_rng(0))
        assert res.constraint_value <= budget + 1e-9
        assert res.residual == 0.0
        assert res.objective >= U(base) - 1e-12
        # reported numbers describe the Markov policy that is returned
        assert U(res.markov) == pytest.approx(res.objective, abs=1e-9)
        assert value(mdp, res.markov, c) + U(res.markov) == pytest.approx(res.constraint_value, abs=1e-9)


def test_max_uncertainty_safe_preconditions_and_zero_u():
    rng = np.random.default_rng(48)
    mdp = small_mdp(rng)
    c = rng.random(mdp.shape) / mdp.H
    base = uniform_policy(*mdp.shape)
    with pytest.raises(PreconditionError):
        max_uncertainty_safe(mdp, c, Zero(mdp), value(mdp, base, c), base)
    res = max_uncertainty_safe(mdp, c, Zero(mdp), 1.0, base)
    assert res.objective == 0.0
    np.testing.assert_array_equal(res.markov.probs, base.probs)


def test_solver_is_deterministic_given_rng():
    rng = np.random.default_rng(49)
    mdp = small_mdp(rng, H=2, S=2, A=2)
    c = rng.random(mdp.shape) / 4
    U = uncertainty(rng, mdp, 0.3)
    base = uniform_policy(*mdp.shape)
    budget = value(mdp, base, c) + U(base) + 0.05
    a = max_uncertainty_safe(mdp, c, U, budget, base, rng=np.random.default_rng(3))
    b = max_uncertainty_safe(mdp, c, U, budget, base, rng=np.random.default_rng(3))
    np.testing.assert_array_equal(a.markov.probs, b.markov.probs)
    assert a.objective == b.objective


def test_lp_cross_check_of_exact_oracle():
    rng = np.random.default_rng(50)
    for _ in range(10):
        mdp = small_mdp(rng, H=3, S=3, A=3)
        r, c = rng.random(mdp.shape), rng.random(mdp.shape)
        tau = min_cost_value(mdp, c)[0] + rng.uniform(0.01, 1.0)
        opt = cmdp_optimal(mdp, r, c, tau)
        assert opt.value == pytest.approx(lp_optimum(mdp, r, c, tau), abs=1e-8)
        assert opt.certificate["duality_gap"] <= 1e-8
