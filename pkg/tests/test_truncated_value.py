import numpy as np
import pytest

from instances import loop_truncated, random_normalized, small_mdp
from sweet.errors import ParameterError
from sweet.mdp_core import MixturePolicy, mixture_to_markov, occupancy, random_policy, value
from sweet.truncated_value import (
    occupancy_gradient,
    truncated_arrays,
    truncated_evaluate,
    truncated_subgradient,
)


def test_matches_loop_recursion():
    rng = np.random.default_rng(20)
    for _ in range(20):
        mdp = small_mdp(rng, sparse=True)
        pi = random_policy(rng, *mdp.shape)
        u = rng.random(mdp.shape) * rng.choice([0.2, 1.0, 3.0])
        alpha = rng.choice([1.0, 1.25, 2.0])
        ev = truncated_evaluate(mdp, pi, u, alpha)
        assert ev.value == pytest.approx(loop_truncated(mdp, pi.probs, u, alpha), abs=1e-12)
        assert np.all(ev.Vbar <= 1.0)


def test_normalized_utility_is_never_clipped():
    rng = np.random.default_rng(21)
    mdp = small_mdp(rng, H=4)
    pi = random_policy(rng, *mdp.shape)
    u = random_normalized(rng, mdp, scale=0.99)
    ev = truncated_evaluate(mdp, pi, u)
    assert not ev.clip_mask.any()
    assert ev.value == pytest.approx(value(mdp, pi, u), abs=1e-13)


def test_clip_mask_marks_saturated_states():
    rng = np.random.default_rng(22)
    mdp = small_mdp(rng)
    u = np.zeros(mdp.shape)
    u[1, :, :] = 2.0
    ev = truncated_evaluate(mdp, random_policy(rng, *mdp.shape), u)
    assert ev.clip_mask[1].all()
    np.testing.assert_allclose(ev.Vbar[1], 1.0)
    assert ev.value == pytest.approx(1.0)


def test_batched_arrays_agree_with_single_calls():
    rng = np.random.default_rng(23)
    mdp = small_mdp(rng)
    u = rng.random(mdp.shape)
    batch = np.stack([random_policy(rng, *mdp.shape).probs for _ in range(5)])
    V, _, _ = truncated_arrays(mdp.P, batch, u, 1.5)
    for k in range(5):
        assert V[k, 0, mdp.s1] == pytest.approx(truncated_evaluate(mdp, batch[k], u, 1.5).value, abs=1e-14)


def test_concave_along_mixtures():
    rng = np.random.default_rng(24)
    for _ in range(100):
        mdp = small_mdp(rng, sparse=bool(rng.integers(2)))
        p, q = random_policy(rng, *mdp.shape), random_policy(rng, *mdp.shape)
        u = rng.random(mdp.shape) * rng.uniform(0.2, 3)
        alpha = rng.uniform(1, 2)
        g = rng.random()
        mk = mixture_to_markov(mdp, MixturePolicy((p, q), np.array([g, 1 - g])))
        lhs = truncated_evaluate(mdp, mk, u, alpha).value
        rhs = g * truncated_evaluate(mdp, p, u, alpha).value + (1 - g) * truncated_evaluate(mdp, q, u, alpha).value
        assert lhs >= rhs - 1e-9


def _fd(mdp, probs, u, alpha, step=1e-6):
    out = np.empty(probs.shape)
    for idx in np.ndindex(probs.shape):
        hi, lo = probs.copy(), probs.copy()
        hi[idx] += step
        lo[idx] -= step
        vh = truncated_arrays(mdp.P, hi, u, alpha)[0][0, mdp.s1]
        vl = truncated_arrays(mdp.P, lo, u, alpha)[0][0, mdp.s1]
        out[idx] = (vh - vl) / (2 * step)
    return out


def test_policy_subgradient_matches_finite_differences_off_the_boundary():
    rng = np.random.default_rng(25)
    checked = 0
    while checked < 20:
        mdp = small_mdp(rng)
        pi = random_policy(rng, *mdp.shape)
        u = rng.random(mdp.shape) * rng.uniform(0.3, 2)
        alpha = rng.uniform(1, 1.5)
        _, _, pre = truncated_arrays(mdp.P, pi.probs, u, alpha)
        if np.min(np.abs(pre - 1)) < 1e-3:
            continue
        sg = truncated_subgradient(mdp, pi, u, alpha)
        np.testing.assert_allclose(sg.g, _fd(mdp, pi.probs, u, alpha), atol=1e-5)
        checked += 1


def test_subgradient_weight_is_zero_below_clipped_states():
    rng = np.random.default_rng(26)
    mdp = small_mdp(rng)
    u = np.zeros(mdp.shape)
    u[0] = 5.0
    sg = truncated_subgradient(mdp, random_policy(rng, *mdp.shape), u)
    assert np.all(sg.weight == 0)
    assert np.all(sg.g == 0)


def test_occupancy_gradient_is_a_supergradient():
    rng = np.random.default_rng(27)
    for _ in range(100):
        mdp = small_mdp(rng, sparse=bool(rng.integers(2)))
        p, q = random_policy(rng, *mdp.shape), random_policy(rng, *mdp.shape)
        u = rng.random(mdp.shape) * rng.uniform(0.2, 3)
        alpha = rng.uniform(1, 2)
        r = occupancy_gradient(mdp, p, u, alpha)
        d = occupancy(mdp, q).rho - occupancy(mdp, p).rho
        vp, vq = truncated_evaluate(mdp, p, u, alpha).value, truncated_evaluate(mdp, q, u, alpha).value
        assert vq <= vp + np.sum(r * d) + 1e-9


def test_occupancy_gradient_is_exact_for_unclipped_linear_case():
    rng = np.random.default_rng(28)
    mdp = small_mdp(rng)
    u = random_normalized(rng, mdp, scale=0.5)
    p, q = random_policy(rng, *mdp.shape), random_policy(rng, *mdp.shape)
    r = occupancy_gradient(mdp, p, u)
    d = occupancy(mdp, q).rho - occupancy(mdp, p).rho
    assert value(mdp, q, u) - value(mdp, p, u) == pytest.approx(np.sum(r * d), abs=1e-12)


def test_rejects_negative_utility_and_small_alpha():
    rng = np.random.default_rng(29)
    mdp = small_mdp(rng)
    pi = random_policy(rng, *mdp.shape)
    with pytest.raises(ParameterError):
        truncated_evaluate(mdp, pi, -np.ones(mdp.shape))
    with pytest.raises(ParameterError):
        truncated_evaluate(mdp, pi, np.ones(mdp.shape), alpha=0.9)
