"""Policy functionals consumed by the solver and the brute-force oracle.

A functional maps a Markov policy (``probs`` array of shape (H, S, A), or a
batch of them) to a real number and can linearise itself in occupancy space.
"""

from __future__ import annotations

import numpy as np

from .mdp_core import MarkovPolicy, TabularMDP, _as_table, backward_values, forward_occupancy
from .truncated_value import occupancy_gradient, truncated_arrays, truncated_evaluate


class Functional:
    model: TabularMDP
    is_zero = False
    is_linear = False

    def __call__(self, policy) -> float:
        return float(self.batch(_as_table(policy)[None])[0])

    def batch(self, probs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def occupancy_gradient(self, policy) -> np.ndarray:
        raise NotImplementedError

    def __add__(self, other: "Functional") -> "Combination":
        return Combination([(1.0, self), (1.0, other)])

    def __rmul__(self, coef: float) -> "Combination":
        return Combination([(float(coef), self)])

    def __neg__(self) -> "Combination":
        return Combination([(-1.0, self)])

    def __sub__(self, other: "Functional") -> "Combination":
        return Combination([(1.0, self), (-1.0, other)])


class LinearValue(Functional):
    """Expected cumulative utility V_{P,u}(pi)."""

    is_linear = True

    def __init__(self, model: TabularMDP, utility):
        self.model = model
        self.u = np.asarray(_as_table(utility), dtype=np.float64)
        self.is_zero = not np.any(self.u)

    def batch(self, probs: np.ndarray) -> np.ndarray:
        rho = forward_occupancy(self.model.P, probs, self.model.s1)
        return np.einsum("...hsa,hsa->...", rho, self.u)

    def __call__(self, policy) -> float:
        V, _ = backward_values(self.model.P, _as_table(policy), self.u)
        return float(V[0, self.model.s1])

    def occupancy_gradient(self, policy) -> np.ndarray:
        return self.u

    def linear_coefficients(self) -> np.ndarray:
        return self.u


class Zero(Functional):
    is_zero = True
    is_linear = True

    def __init__(self, model: TabularMDP):
        self.model = model

    def batch(self, probs: np.ndarray) -> np.ndarray:
        return np.zeros(probs.shape[:-3])

    def occupancy_gradient(self, policy) -> np.ndarray:
        return np.zeros(self.model.shape)

    def linear_coefficients(self) -> np.ndarray:
        return np.zeros(self.model.shape)


class TruncatedUncertainty(Functional):
    """scale * Vbar(P, pi, bonus, alpha) ** power + offset.

    Tabular exploration uses scale 4, power 1/2; the low-rank variant uses
    scale 1, power 1 and a positive offset.
    """

    def __init__(self, model: TabularMDP, bonus: np.ndarray, alpha: float = 1.0,
                 scale: float = 1.0, power: float = 1.0, offset: float = 0.0):
        self.model = model
        self.bonus = np.asarray(bonus, dtype=np.float64)
        self.alpha = float(alpha)
        self.scale = float(scale)
        self.power = float(power)
        self.offset = float(offset)
        self.is_zero = self.offset == 0 and (self.scale == 0 or not np.any(self.bonus))

    def truncated(self, policy) -> float:
        return truncated_evaluate(self.model, policy, self.bonus, self.alpha).value

    def batch(self, probs: np.ndarray) -> np.ndarray:
        V, _, _ = truncated_arrays(self.model.P, probs, self.bonus, self.alpha)
        return self.scale * V[..., 0, self.model.s1] ** self.power + self.offset

    def occupancy_gradient(self, policy) -> np.ndarray:
        if self.scale == 0:
            return np.zeros(self.model.shape)
        ev = truncated_evaluate(self.model, policy, self.bonus, self.alpha)
        r = occupancy_gradient(self.model, policy, self.bonus, self.alpha, ev=ev)
        v = max(ev.value, 1e-12)
        return self.scale * self.power * v ** (self.power - 1.0) * r

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "scale": self.scale, "power": self.power, "offset": self.offset}


class Combination(Functional):
    def __init__(self, terms):
        flat = []
        for coef, f in terms:
            if isinstance(f, Combination):
                flat.extend((coef * c, g) for c, g in f.terms)
            else:
                flat.append((coef, f))
        self.terms = [(c, f) for c, f in flat if c != 0 and not f.is_zero]
        self.model = flat[0][1].model
        self.is_zero = not self.terms
        self.is_linear = all(f.is_linear for _, f in self.terms)

    def batch(self, probs: np.ndarray) -> np.ndarray:
        out = np.zeros(probs.shape[:-3])
        for c, f in self.terms:
            out = out + c * f.batch(probs)
        return out

    def __call__(self, policy) -> float:
        return float(sum(c * f(policy) for c, f in self.terms))

    def occupancy_gradient(self, policy) -> np.ndarray:
        out = np.zeros(self.model.shape)
        for c, f in self.terms:
            out = out + c * f.occupancy_gradient(policy)
        return out

    def linear_coefficients(self) -> np.ndarray:
        out = np.zeros(self.model.shape)
        for c, f in self.terms:
            out = out + c * f.linear_coefficients()
        return out


def as_policy(probs: np.ndarray) -> MarkovPolicy:
    return MarkovPolicy.trusted(probs)
