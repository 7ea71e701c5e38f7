"""Episodic tabular MDPs, Markov and mixture policies, exact evaluation.

Array conventions (all 0-based):

* kernel ``P``: shape ``(H, S, A, S)``, ``P[h, s, a, s2]``
* utilities and policies: shape ``(H, S, A)``
* value tables ``V``: shape ``(H + 1, S)`` with ``V[H] = 0``

Evaluation kernels accept policies with arbitrary leading batch dimensions,
which the solver and the brute-force oracle rely on.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import ParameterError, ShapeError

ROW_TOL = 1e-12
NORMALIZED_TOL = 1e-12


def _frozen(x: np.ndarray, dtype=np.float64) -> np.ndarray:
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Finite-horizon kernel with a fixed initial state."""

    P: np.ndarray
    s1: int = 0

    def __post_init__(self):
        P = _frozen(self.P)
        if P.ndim != 4 or P.shape[1] != P.shape[3]:
            raise ShapeError(f"kernel must have shape (H, S, A, S), got {P.shape}")
        if min(P.shape) < 1:
            raise ShapeError("S, A and H must be positive")
        if not np.all(np.isfinite(P)) or np.any(P < 0):
            raise ParameterError("kernel entries must be finite and non-negative")
        err = np.max(np.abs(P.sum(axis=3) - 1.0))
        if err > ROW_TOL:
            raise ParameterError(f"kernel rows must sum to 1 (max error {err:.3g})")
        if not 0 <= int(self.s1) < P.shape[1]:
            raise ParameterError(f"initial state {self.s1} out of range")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "s1", int(self.s1))

    @classmethod
    def trusted(cls, P: np.ndarray, s1: int = 0) -> "TabularMDP":
        """Skip validation; for kernels built by code that guarantees the invariants."""
        obj = object.__new__(cls)
        P = np.asarray(P, dtype=np.float64)
        P.setflags(write=False)
        object.__setattr__(obj, "P", P)
        object.__setattr__(obj, "s1", int(s1))
        return obj

    @property
    def H(self) -> int:
        return self.P.shape[0]

    @property
    def S(self) -> int:
        return self.P.shape[1]

    @property
    def A(self) -> int:
        return self.P.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.H, self.S, self.A


@dataclass(frozen=True, eq=False)
class Utility:
    """Per-(h, s, a) utility in [0, 1].

    The ``normalized`` flag is a claim that every trajectory sums to at most 1;
    use :func:`normalized_utility` to have it certified against a kernel.
    """

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        u = _frozen(self.values)
        if u.ndim != 3:
            raise ShapeError(f"utility must have shape (H, S, A), got {u.shape}")
        if not np.all(np.isfinite(u)) or np.any(u < 0) or np.any(u > 1):
            raise ParameterError("utility entries must lie in [0, 1]")
        object.__setattr__(self, "values", u)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


def normalized_utility(mdp: TabularMDP, values: np.ndarray) -> Utility:
    """Build a utility flagged as normalized after checking the max-DP certificate."""
    u = Utility(values, normalized=False)
    _check_shape(mdp, u.values, "utility")
    m = max_trajectory_utility(mdp, u)
    if m > 1 + NORMALIZED_TOL:
        raise ParameterError(f"utility is not normalized: max trajectory sum {m!r}")
    return Utility(u.values, normalized=True)


@dataclass(frozen=True, eq=False)
class MarkovPolicy:
    probs: np.ndarray

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim != 3:
            raise ShapeError(f"policy must have shape (H, S, A), got {p.shape}")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ParameterError("policy entries must be finite and non-negative")
        err = np.max(np.abs(p.sum(axis=2) - 1.0))
        if err > ROW_TOL:
            raise ParameterError(f"policy rows must sum to 1 (max error {err:.3g})")
        object.__setattr__(self, "probs", p)

    @classmethod
    def trusted(cls, probs: np.ndarray) -> "MarkovPolicy":
        obj = object.__new__(cls)
        p = np.asarray(probs, dtype=np.float64)
        p.setflags(write=False)
        object.__setattr__(obj, "probs", p)
        return obj

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.probs.shape

    def is_deterministic(self) -> bool:
        return bool(np.all((self.probs == 0) | (self.probs == 1)))


@dataclass(frozen=True, eq=False)
class MixturePolicy:
    """Episode-level mixture: draw a vertex once, then follow it for H steps."""

    vertices: tuple
    weights: np.ndarray

    def __post_init__(self):
        verts = tuple(self.vertices)
        w = _frozen(self.weights)
        if len(verts) == 0:
            raise ParameterError("mixture needs at least one vertex")
        if w.shape != (len(verts),):
            raise ShapeError("one weight per vertex required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > ROW_TOL:
            raise ParameterError("mixture weights must be non-negative and sum to 1")
        shapes = {v.shape for v in verts}
        if len(shapes) != 1:
            raise ShapeError("mixture vertices have different shapes")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def single(cls, policy: MarkovPolicy) -> "MixturePolicy":
        return cls((policy,), np.ones(1))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.vertices[0].shape


@dataclass(frozen=True, eq=False)
class OccupancyMeasure:
    rho: np.ndarray

    def state_marginal(self) -> np.ndarray:
        return self.rho.sum(axis=-1)


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray  # length H + 1, last entry is the terminal state
    actions: np.ndarray  # length H

    @property
    def H(self) -> int:
        return len(self.actions)

    def triples(self) -> Iterable[tuple[int, int, int, int]]:
        """(h, s_h, a_h, s_{h+1}) for every step."""
        for h in range(self.H):
            yield h, int(self.states[h]), int(self.actions[h]), int(self.states[h + 1])


@dataclass(frozen=True, eq=False)
class ValueTables:
    V: np.ndarray
    Q: np.ndarray
    value: float = field(default=0.0)


PolicyLike = Union[MarkovPolicy, MixturePolicy]


def _check_shape(mdp: TabularMDP, arr: np.ndarray, what: str) -> None:
    if tuple(arr.shape[-3:]) != mdp.shape:
        raise ShapeError(f"{what} shape {arr.shape} does not match MDP (H, S, A) = {mdp.shape}")


def _as_table(x) -> np.ndarray:
    if isinstance(x, Utility):
        return x.values
    if isinstance(x, MarkovPolicy):
        return x.probs
    return np.asarray(x, dtype=np.float64)


# batched kernels -------------------------------------------------------------

def backward_values(P: np.ndarray, probs: np.ndarray, u: np.ndarray, alpha: float = 1.0):
    """Unclipped α-weighted evaluation; ``probs`` may carry leading batch axes."""
    H, S = P.shape[0], P.shape[1]
    batch = np.broadcast_shapes(probs.shape[:-3], u.shape[:-3])
    V = np.zeros(batch + (H + 1, S))
    Q = np.empty(batch + probs.shape[-3:])
    A = P.shape[2]
    for h in range(H - 1, -1, -1):
        nxt = (P[h].reshape(S * A, S) @ V[..., h + 1, :, None]).reshape(batch + (S, A))
        Q[..., h, :, :] = u[..., h, :, :] + alpha * nxt
        V[..., h, :] = (probs[..., h, :, :] * Q[..., h, :, :]).sum(axis=-1)
    return V, Q


def forward_occupancy(P: np.ndarray, probs: np.ndarray, s1: int) -> np.ndarray:
    H, S, A = probs.shape[-3:]
    batch = probs.shape[:-3]
    rho = np.empty(probs.shape)
    d = np.zeros(batch + (S,))
    d[..., s1] = 1.0
    for h in range(H):
        rho[..., h, :, :] = d[..., :, None] * probs[..., h, :, :]
        if h + 1 < H:
            d = rho[..., h, :, :].reshape(batch + (S * A,)) @ P[h].reshape(S * A, S)
    return rho


# public operations -------------------------------------------------------------

def evaluate_value(mdp: TabularMDP, policy: MarkovPolicy, utility, alpha: float = 1.0) -> ValueTables:
    """V, Q and V_1(s1) of ``policy`` for ``utility`` with Q = u + alpha·P V."""
    if alpha < 1:
        raise ParameterError("alpha must be >= 1")
    probs, u = _as_table(policy), _as_table(utility)
    _check_shape(mdp, probs, "policy")
    _check_shape(mdp, u, "utility")
    V, Q = backward_values(mdp.P, probs, u, alpha)
    return ValueTables(V=V, Q=Q, value=float(V[0, mdp.s1]))


def value(mdp: TabularMDP, policy: MarkovPolicy, utility, alpha: float = 1.0) -> float:
    return evaluate_value(mdp, policy, utility, alpha).value


def occupancy(mdp: TabularMDP, policy: MarkovPolicy) -> OccupancyMeasure:
    probs = _as_table(policy)
    _check_shape(mdp, probs, "policy")
    return OccupancyMeasure(forward_occupancy(mdp.P, probs, mdp.s1))


def markov_from_occupancy(rho: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    """pi(a|s) = rho(s, a) / rho(s); rows with zero mass copy ``fallback``."""
    mass = rho.sum(axis=-1, keepdims=True)
    safe = np.where(mass > 0, mass, 1.0)
    probs = np.where(mass > 0, rho / safe, fallback)
    # renormalise away rounding so the result passes the row-sum check
    return probs / probs.sum(axis=-1, keepdims=True)


def mixture_to_markov(mdp: TabularMDP, mix: MixturePolicy) -> MarkovPolicy:
    """Markov policy whose occupancy equals the weighted vertex occupancies."""
    stack = np.stack([v.probs for v in mix.vertices])
    _check_shape(mdp, stack, "mixture")
    if len(mix.vertices) == 1:
        return mix.vertices[0]
    rho = np.einsum("k,khsa->hsa", mix.weights, forward_occupancy(mdp.P, stack, mdp.s1))
    return MarkovPolicy.trusted(markov_from_occupancy(rho, stack[0]))


def greedy_version(policy: MarkovPolicy, epsilon0: float, steps: Iterable[int]) -> MarkovPolicy:
    """(1 - eps0)·pi_h + eps0/A on the listed (0-based) steps, unchanged elsewhere."""
    if not 0.0 <= epsilon0 <= 1.0:
        raise ParameterError(f"epsilon0 must lie in [0, 1], got {epsilon0}")
    H, _, A = policy.shape
    steps = sorted(set(int(h) for h in steps))
    if any(h < 0 or h >= H for h in steps):
        raise ParameterError(f"steps must lie in 0..{H - 1}")
    if epsilon0 == 0 or not steps:
        return policy
    probs = np.array(policy.probs)
    probs[steps] = (1.0 - epsilon0) * probs[steps] + epsilon0 / A
    return MarkovPolicy.trusted(probs)


def _draw(p: np.ndarray, x: float) -> int:
    i = int(np.searchsorted(np.cumsum(p), x, side="right"))
    # guard against cumulative sums ending slightly below 1
    while i >= len(p) or p[i] == 0:
        i -= 1
    return i


def sample_trajectory(mdp: TabularMDP, policy: PolicyLike, rng: np.random.Generator) -> Trajectory:
    if isinstance(policy, MixturePolicy):
        probs = policy.vertices[_draw(policy.weights, rng.random())].probs
    else:
        probs = policy.probs
    _check_shape(mdp, probs, "policy")
    H = mdp.H
    states = np.empty(H + 1, dtype=np.int64)
    actions = np.empty(H, dtype=np.int64)
    s = mdp.s1
    states[0] = s
    for h in range(H):
        a = _draw(probs[h, s], rng.random())
        s = _draw(mdp.P[h, s, a], rng.random())
        actions[h] = a
        states[h + 1] = s
    return Trajectory(states=states, actions=actions)


def optimal_values(P: np.ndarray, u: np.ndarray, alpha: float = 1.0, minimize: bool = False):
    """Backward induction for max (or min) of the unclipped value; first index wins ties."""
    H, S, A = u.shape
    V = np.zeros((H + 1, S))
    act = np.empty((H, S), dtype=np.int64)
    for h in range(H - 1, -1, -1):
        Q = u[h] + alpha * P[h] @ V[h + 1]
        act[h] = np.argmin(Q, axis=1) if minimize else np.argmax(Q, axis=1)
        V[h] = Q[np.arange(S), act[h]]
    probs = np.zeros((H, S, A))
    probs[np.arange(H)[:, None], np.arange(S)[None, :], act] = 1.0
    return V, probs


def min_cost_value(mdp: TabularMDP, cost) -> tuple[float, MarkovPolicy]:
    c = _as_table(cost)
    _check_shape(mdp, c, "cost")
    V, probs = optimal_values(mdp.P, c, minimize=True)
    return float(V[0, mdp.s1]), MarkovPolicy.trusted(probs)


def max_trajectory_utility(mdp: TabularMDP, utility) -> float:
    """Largest cumulative utility along any trajectory with positive probability."""
    u = _as_table(utility)
    _check_shape(mdp, u, "utility")
    H, S = mdp.H, mdp.S
    M = np.zeros((H + 1, S))
    for h in range(H - 1, -1, -1):
        succ = np.where(mdp.P[h] > 0, M[h + 1][None, None, :], -np.inf).max(axis=2)
        M[h] = (u[h] + succ).max(axis=1)
    # only states reachable from s1 matter, which the recursion from s1 enforces
    return float(M[0, mdp.s1])


# constructors ------------------------------------------------------------------

def uniform_policy(H: int, S: int, A: int) -> MarkovPolicy:
    return MarkovPolicy.trusted(np.full((H, S, A), 1.0 / A))


def deterministic_policy(actions: np.ndarray, A: int) -> MarkovPolicy:
    actions = np.asarray(actions, dtype=np.int64)
    H, S = actions.shape
    probs = np.zeros((H, S, A))
    probs[np.arange(H)[:, None], np.arange(S)[None, :], actions] = 1.0
    return MarkovPolicy.trusted(probs)


def random_policy(rng: np.random.Generator, H: int, S: int, A: int) -> MarkovPolicy:
    return MarkovPolicy.trusted(rng.dirichlet(np.ones(A), size=(H, S)))


def random_kernel(rng: np.random.Generator, H: int, S: int, A: int) -> np.ndarray:
    return rng.dirichlet(np.ones(S), size=(H, S, A))


def all_deterministic_policies(H: int, S: int, A: int) -> np.ndarray:
    """Stack of every deterministic policy, shape (A**(H*S), H, S, A)."""
    n = H * S
    out = np.zeros((A ** n, H, S, A))
    for k, combo in enumerate(itertools.product(range(A), repeat=n)):
        acts = np.asarray(combo).reshape(H, S)
        out[k, np.arange(H)[:, None], np.arange(S)[None, :], acts] = 1.0
    return out


def mixture_of(policies: Sequence[MarkovPolicy], weights: Sequence[float]) -> MixturePolicy:
    w = np.asarray(weights, dtype=np.float64)
    return MixturePolicy(tuple(policies), w / w.sum())
