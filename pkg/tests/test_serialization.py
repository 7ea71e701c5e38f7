import json

import numpy as np
import pytest

from instances import small_mdp
from sweet import serialization as ser
from sweet.cmdp_solver import plan
from sweet.errors import ShapeError
from sweet.functionals import LinearValue, TruncatedUncertainty, Zero
from sweet.mdp_core import MixturePolicy, Utility, random_policy
from sweet.truncated_value import truncated_evaluate


def _rt(doc):
    return json.loads(ser.dumps(doc))


def test_round_trips_are_bit_exact():
    rng = np.random.default_rng(90)
    mdp = small_mdp(rng)
    back = ser.mdp_from_doc(_rt(ser.mdp_to_doc(mdp)))
    np.testing.assert_array_equal(back.P, mdp.P)
    assert back.s1 == mdp.s1
    u = Utility(rng.random(mdp.shape) / 7, normalized=True)
    ub = ser.utility_from_doc(_rt(ser.utility_to_doc(u)))
    np.testing.assert_array_equal(ub.values, u.values)
    assert ub.normalized
    pi = random_policy(rng, *mdp.shape)
    np.testing.assert_array_equal(ser.policy_from_doc(_rt(ser.policy_to_doc(pi))).probs, pi.probs)
    mix = MixturePolicy((pi, random_policy(rng, *mdp.shape)), np.array([0.25, 0.75]))
    mb = ser.mixture_from_doc(_rt(ser.mixture_to_doc(mix)))
    np.testing.assert_array_equal(mb.weights, mix.weights)
    ev = truncated_evaluate(mdp, pi, rng.random(mdp.shape) * 2, 1.5)
    eb = ser.truncated_from_doc(_rt(ser.truncated_to_doc(ev)))
    np.testing.assert_array_equal(eb.Vbar, ev.Vbar)
    np.testing.assert_array_equal(eb.clip_mask, ev.clip_mask)
    U = TruncatedUncertainty(mdp, rng.random(mdp.shape), alpha=1.25, scale=4, power=0.5, offset=0.1)
    Ub = ser.uncertainty_from_doc(_rt(ser.uncertainty_to_doc(U)))
    assert Ub(pi) == U(pi)


def test_header_mismatch_and_wrong_kind():
    rng = np.random.default_rng(91)
    doc = ser.policy_to_doc(random_policy(rng, 2, 2, 2))
    doc["S"] = 3
    with pytest.raises(ShapeError):
        ser.policy_from_doc(doc)
    with pytest.raises(ValueError):
        ser.mdp_from_doc(ser.policy_to_doc(random_policy(rng, 2, 2, 2)))
    doc = ser.policy_to_doc(random_policy(rng, 2, 2, 2))
    doc["version"] = 99
    with pytest.raises(ValueError):
        ser.policy_from_doc(doc)


def test_solve_result_doc(tmp_path):
    rng = np.random.default_rng(92)
    mdp = small_mdp(rng)
    res = plan(mdp, rng.random(mdp.shape), np.zeros(mdp.shape), 0.5)
    doc = ser.solve_result_to_doc(res)
    ser.save(doc, tmp_path / "r.json")
    back = ser.load(tmp_path / "r.json")
    assert back["status"] == res.status and back["objective"] == res.objective


def test_functional_algebra():
    rng = np.random.default_rng(93)
    mdp = small_mdp(rng)
    pi = random_policy(rng, *mdp.shape)
    a = LinearValue(mdp, rng.random(mdp.shape))
    U = TruncatedUncertainty(mdp, rng.random(mdp.shape), alpha=1.2, scale=2, power=0.5)
    f = a + 2.0 * U - a
    assert f(pi) == pytest.approx(2 * U(pi), abs=1e-12)
    assert (a + Zero(mdp))(pi) == pytest.approx(a(pi))
    assert (-a)(pi) == pytest.approx(-a(pi))
    batch = np.stack([pi.probs, random_policy(rng, *mdp.shape).probs])
    np.testing.assert_allclose(f.batch(batch), [f(batch[0]), f(batch[1])], atol=1e-12)
    assert Zero(mdp).is_zero and TruncatedUncertainty(mdp, np.zeros(mdp.shape)).is_zero
