import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instances import enumerate_paths, path_occupancy, path_value, random_normalized, small_mdp
from sweet.errors import ParameterError, ShapeError
from sweet.mdp_core import (
    MarkovPolicy,
    MixturePolicy,
    TabularMDP,
    Utility,
    all_deterministic_policies,
    deterministic_policy,
    evaluate_value,
    greedy_version,
    max_trajectory_utility,
    min_cost_value,
    mixture_of,
    mixture_to_markov,
    normalized_utility,
    occupancy,
    optimal_values,
    random_policy,
    sample_trajectory,
    uniform_policy,
    value,
)


def test_value_matches_path_enumeration():
    rng = np.random.default_rng(1)
    for _ in range(10):
        mdp = small_mdp(rng, sparse=True)
        pi = random_policy(rng, *mdp.shape)
        u = rng.random(mdp.shape)
        assert value(mdp, pi, u) == pytest.approx(path_value(mdp, pi.probs, u), abs=1e-12)


def test_occupancy_matches_path_enumeration():
    rng = np.random.default_rng(2)
    for _ in range(10):
        mdp = small_mdp(rng)
        pi = random_policy(rng, *mdp.shape)
        rho = occupancy(mdp, pi).rho
        np.testing.assert_allclose(rho, path_occupancy(mdp, pi.probs), atol=1e-12)
        np.testing.assert_allclose(rho.sum(axis=(1, 2)), 1.0, atol=1e-12)


def test_value_equals_occupancy_inner_product():
    rng = np.random.default_rng(3)
    mdp = small_mdp(rng, H=4, S=4, A=3)
    pi = random_policy(rng, *mdp.shape)
    u = rng.random(mdp.shape)
    assert value(mdp, pi, u) == pytest.approx(float(np.sum(occupancy(mdp, pi).rho * u)), abs=1e-12)


def test_alpha_weighting_scales_step_h_by_alpha_power():
    rng = np.random.default_rng(4)
    mdp = small_mdp(rng)
    pi = random_policy(rng, *mdp.shape)
    u = rng.random(mdp.shape)
    alpha = 1.3
    rho = occupancy(mdp, pi).rho
    expect = sum(alpha ** h * np.sum(rho[h] * u[h]) for h in range(mdp.H))
    assert value(mdp, pi, u, alpha) == pytest.approx(expect, abs=1e-12)


def test_monte_carlo_agrees_within_three_standard_errors():
    rng = np.random.default_rng(5)
    mdp = small_mdp(rng, H=4, S=3, A=2)
    pi = random_policy(rng, *mdp.shape)
    u = random_normalized(rng, mdp)
    draws = np.empty(20_000)
    for i in range(len(draws)):
        tr = sample_trajectory(mdp, pi, rng)
        draws[i] = sum(u[h, s, a] for h, s, a, _ in tr.triples())
    se = draws.std(ddof=1) / np.sqrt(len(draws))
    assert abs(draws.mean() - value(mdp, pi, u)) <= 3 * se


def test_mixture_sampling_draws_a_vertex_per_episode():
    rng = np.random.default_rng(6)
    mdp = small_mdp(rng, H=3, S=2, A=2)
    a = deterministic_policy(np.zeros((3, 2), dtype=int), 2)
    b = deterministic_policy(np.ones((3, 2), dtype=int), 2)
    mix = mixture_of([a, b], [0.3, 0.7])
    runs = [sample_trajectory(mdp, mix, rng).actions for _ in range(3000)]
    # within one episode the actions never change, because each vertex is deterministic and constant
    assert all(len(set(r.tolist())) == 1 for r in runs)
    frac = np.mean([r[0] == 1 for r in runs])
    assert abs(frac - 0.7) <= 3 * np.sqrt(0.21 / 3000)


def test_mixture_to_markov_preserves_occupancy_and_values():
    rng = np.random.default_rng(7)
    mdp = small_mdp(rng, H=3, S=4, A=3, sparse=True)
    verts = [random_policy(rng, *mdp.shape) for _ in range(3)]
    w = rng.dirichlet(np.ones(3))
    mix = MixturePolicy(tuple(verts), w)
    mk = mixture_to_markov(mdp, mix)
    rho = sum(wi * occupancy(mdp, v).rho for wi, v in zip(w, verts))
    np.testing.assert_allclose(occupancy(mdp, mk).rho, rho, atol=1e-12)
    u = rng.random(mdp.shape)
    assert value(mdp, mk, u) == pytest.approx(sum(wi * value(mdp, v, u) for wi, v in zip(w, verts)), abs=1e-12)


def test_single_vertex_mixture_is_identity():
    rng = np.random.default_rng(8)
    mdp = small_mdp(rng)
    pi = random_policy(rng, *mdp.shape)
    assert mixture_to_markov(mdp, MixturePolicy.single(pi)) is pi


def test_greedy_version_mixes_only_listed_steps():
    rng = np.random.default_rng(9)
    pi = random_policy(rng, 4, 3, 2)
    g = greedy_version(pi, 0.2, [1, 3])
    np.testing.assert_array_equal(g.probs[[0, 2]], pi.probs[[0, 2]])
    np.testing.assert_allclose(g.probs[1], 0.8 * pi.probs[1] + 0.1)
    assert greedy_version(pi, 0.0, [1]) is pi
    assert greedy_version(pi, 0.5, []) is pi


@pytest.mark.parametrize("eps, steps", [(-0.1, [0]), (1.5, [0]), (0.1, [4]), (0.1, [-1])])
def test_greedy_version_rejects_bad_arguments(eps, steps):
    pi = uniform_policy(4, 3, 2)
    with pytest.raises(ParameterError):
        greedy_version(pi, eps, steps)


def test_greedy_with_full_mixing_is_uniform_at_those_steps():
    pi = deterministic_policy(np.zeros((2, 2), dtype=int), 3)
    g = greedy_version(pi, 1.0, [0, 1])
    np.testing.assert_allclose(g.probs, 1 / 3)


def test_optimal_values_beats_every_deterministic_policy():
    rng = np.random.default_rng(10)
    mdp = small_mdp(rng, H=2, S=3, A=2)
    u = rng.random(mdp.shape)
    V, probs = optimal_values(mdp.P, u)
    vals = [value(mdp, MarkovPolicy.trusted(p), u) for p in all_deterministic_policies(*mdp.shape)]
    assert V[0, mdp.s1] == pytest.approx(max(vals), abs=1e-12)
    assert value(mdp, MarkovPolicy.trusted(probs), u) == pytest.approx(max(vals), abs=1e-12)
    vmin, _ = min_cost_value(mdp, u)
    assert vmin == pytest.approx(min(vals), abs=1e-12)


def test_max_trajectory_utility_uses_support_only():
    rng = np.random.default_rng(11)
    for _ in range(5):
        mdp = small_mdp(rng, sparse=True)
        u = rng.random(mdp.shape)
        uni = uniform_policy(*mdp.shape).probs
        best = max(sum(u[h, st[h], ac[h]] for h in range(mdp.H)) for _, st, ac in enumerate_paths(mdp, uni))
        assert max_trajectory_utility(mdp, u) == pytest.approx(best, abs=1e-12)


def test_normalized_utility_certificate():
    rng = np.random.default_rng(12)
    mdp = small_mdp(rng)
    u = random_normalized(rng, mdp)
    assert normalized_utility(mdp, u).normalized
    with pytest.raises(ParameterError):
        normalized_utility(mdp, np.full(mdp.shape, 0.9))


def test_validation_errors():
    with pytest.raises(ShapeError):
        TabularMDP(np.ones((2, 2, 2)))
    with pytest.raises(ParameterError):
        TabularMDP(np.full((1, 2, 1, 2), 0.6))
    with pytest.raises(ParameterError):
        TabularMDP(np.full((1, 2, 1, 2), 0.5), s1=2)
    with pytest.raises(ParameterError):
        MarkovPolicy(np.full((1, 2, 2), 0.7))
    with pytest.raises(ParameterError):
        Utility(np.full((1, 1, 1), 1.5))
    with pytest.raises(ParameterError):
        MixturePolicy((uniform_policy(1, 1, 2),), np.array([0.5]))
    mdp = TabularMDP(np.full((1, 2, 1, 2), 0.5))
    with pytest.raises(ShapeError):
        value(mdp, uniform_policy(2, 2, 1), np.zeros((1, 2, 1)))
    with pytest.raises(ParameterError):
        evaluate_value(mdp, uniform_policy(1, 2, 1), np.zeros((1, 2, 1)), alpha=0.5)


def test_deterministic_policy_value_of_zero_cost_is_zero():
    rng = np.random.default_rng(13)
    mdp = small_mdp(rng)
    assert value(mdp, uniform_policy(*mdp.shape), np.zeros(mdp.shape)) == 0.0


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), H=st.integers(1, 4), S=st.integers(1, 4), A=st.integers(1, 3))
def test_normalized_values_lie_in_unit_interval(seed, H, S, A):
    rng = np.random.default_rng(seed)
    mdp = small_mdp(rng, H, S, A)
    u = random_normalized(rng, mdp)
    pi = random_policy(rng, H, S, A)
    v = value(mdp, pi, u)
    assert -1e-15 <= v <= 1 + 1e-12


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), gamma=st.floats(0, 1))
def test_value_is_linear_along_mixtures(seed, gamma):
    rng = np.random.default_rng(seed)
    mdp = small_mdp(rng, 3, 3, 2)
    u = rng.random(mdp.shape)
    p, q = random_policy(rng, 3, 3, 2), random_policy(rng, 3, 3, 2)
    mk = mixture_to_markov(mdp, MixturePolicy((p, q), np.array([gamma, 1 - gamma])))
    assert value(mdp, mk, u) == pytest.approx(gamma * value(mdp, p, u) + (1 - gamma) * value(mdp, q, u), abs=1e-11)
