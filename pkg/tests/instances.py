"""Random small instances and brute-force references shared by the tests."""

import itertools

import numpy as np

from sweet.mdp_core import TabularMDP, random_kernel, random_policy


def small_mdp(rng, H=3, S=3, A=2, sparse=False):
    P = random_kernel(rng, H, S, A)
    if sparse:
        # knock out some transitions so support-dependent code paths get exercised
        mask = rng.random(P.shape) < 0.4
        mask[..., 0] = False
        P = np.where(mask, 0.0, P)
        P /= P.sum(-1, keepdims=True)
    return TabularMDP(P, s1=int(rng.integers(S)))


def enumerate_paths(mdp, probs):
    """Yields (probability, states, actions) for every full trajectory."""
    H, S, A = mdp.shape
    for acts in itertools.product(range(A), repeat=H):
        for nxt in itertools.product(range(S), repeat=H):
            s, p = mdp.s1, 1.0
            states = [s]
            for h in range(H):
                p *= probs[h, s, acts[h]] * mdp.P[h, s, acts[h], nxt[h]]
                s = nxt[h]
                states.append(s)
            if p > 0:
                yield p, states, acts


def path_value(mdp, probs, u):
    total = 0.0
    for p, states, acts in enumerate_paths(mdp, probs):
        total += p * sum(u[h, states[h], acts[h]] for h in range(mdp.H))
    return total


def path_occupancy(mdp, probs):
    rho = np.zeros(mdp.shape)
    for p, states, acts in enumerate_paths(mdp, probs):
        for h in range(mdp.H):
            rho[h, states[h], acts[h]] += p
    return rho


def loop_truncated(mdp, probs, u, alpha):
    """Straight-line loops for the clipped recursion."""
    H, S, A = mdp.shape
    V = [[0.0] * S for _ in range(H + 1)]
    for h in range(H - 1, -1, -1):
        for s in range(S):
            acc = 0.0
            for a in range(A):
                q = u[h, s, a] + alpha * sum(mdp.P[h, s, a, t] * V[h + 1][t] for t in range(S))
                acc += probs[h, s, a] * q
            V[h][s] = min(1.0, acc)
    return V[0][mdp.s1]


def random_normalized(rng, mdp, scale=1.0):
    """Per-step utility bounded by scale / H, so every trajectory sums to at most scale."""
    return rng.random(mdp.shape) * scale / mdp.H


def policies(rng, mdp, n):
    return [random_policy(rng, *mdp.shape) for _ in range(n)]
