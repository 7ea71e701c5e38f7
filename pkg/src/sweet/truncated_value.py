"""Value recursion clipped at 1 at the state-value level.

    Qbar_h = u + alpha * P_h Vbar_{h+1},   Vbar_h = min(1, E_pi Qbar_h)

Besides evaluation this module provides two first-order objects used by the
solver: a per-entry policy supergradient and a supergradient with respect to
the occupancy measure (the Frank-Wolfe linearisation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .mdp_core import TabularMDP, _as_table, _check_shape

CLIP_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class TruncatedEval:
    Vbar: np.ndarray  # (H + 1, S)
    Qbar: np.ndarray  # (H, S, A)
    clip_mask: np.ndarray  # (H, S) bool
    alpha: float
    s1: int = 0

    @property
    def value(self) -> float:
        return float(self.Vbar[0, self.s1])


@dataclass(frozen=True, eq=False)
class PolicySubgradient:
    g: np.ndarray  # (H, S, A)
    weight: np.ndarray  # (H, S) effective reach


def truncated_arrays(P: np.ndarray, probs: np.ndarray, u: np.ndarray, alpha: float):
    """Batched recursion. Returns (Vbar, Qbar, pre-clip expectation)."""
    H, S = P.shape[0], P.shape[1]
    batch = np.broadcast_shapes(probs.shape[:-3], u.shape[:-3])
    V = np.zeros(batch + (H + 1, S))
    Q = np.empty(batch + probs.shape[-3:])
    pre = np.empty(batch + (H, S))
    A = P.shape[2]
    for h in range(H - 1, -1, -1):
        nxt = (P[h].reshape(S * A, S) @ V[..., h + 1, :, None]).reshape(batch + (S, A))
        Q[..., h, :, :] = u[..., h, :, :] + alpha * nxt
        pre[..., h, :] = (probs[..., h, :, :] * Q[..., h, :, :]).sum(axis=-1)
        V[..., h, :] = np.minimum(1.0, pre[..., h, :])
    return V, Q, pre


def _validate(model: TabularMDP, policy, utility, alpha: float):
    probs, u = _as_table(policy), _as_table(utility)
    _check_shape(model, probs, "policy")
    _check_shape(model, u, "utility")
    if np.any(u < 0) or not np.all(np.isfinite(u)):
        raise ParameterError("truncated recursion needs finite non-negative utility")
    if alpha < 1:
        raise ParameterError("alpha must be >= 1")
    return probs, u


def truncated_evaluate(model: TabularMDP, policy, utility, alpha: float = 1.0) -> TruncatedEval:
    probs, u = _validate(model, policy, utility, alpha)
    V, Q, pre = truncated_arrays(model.P, probs, u, alpha)
    return TruncatedEval(Vbar=V, Qbar=Q, clip_mask=pre >= 1.0 - CLIP_TOL, alpha=float(alpha), s1=model.s1)


def truncated_subgradient(model: TabularMDP, policy, utility, alpha: float = 1.0) -> PolicySubgradient:
    """Supergradient of Vbar_1(s1) w.r.t. the entries pi_h(a|s).

    The weight w_h(s) is the alpha-discounted reach of s through unclipped
    states only; clipped states stop the flow.  g = w * Qbar.
    """
    probs, u = _validate(model, policy, utility, alpha)
    ev = truncated_evaluate(model, probs, u, alpha)
    H, S, _ = probs.shape
    w = np.zeros((H, S))
    w[0, model.s1] = 1.0
    for h in range(H):
        w[h] *= ~ev.clip_mask[h]
        if h + 1 < H:
            w[h + 1] = alpha * np.einsum("s,sa,sat->t", w[h], probs[h], model.P[h])
    return PolicySubgradient(g=w[:, :, None] * ev.Qbar, weight=w)


def occupancy_ratio(P: np.ndarray, probs: np.ndarray, clip: np.ndarray, alpha: float, s1: int) -> np.ndarray:
    """w_h(s) / rho_h(s): discounted unclipped reach divided by plain reach.

    Where rho_h(s) = 0 the ratio is taken from a smoothed flow in which every
    (s, a) carries a tiny extra mass, so unreachable states still get a sensible
    multiplier for the linearisation.
    """
    H, S, A = probs.shape
    ratio = np.zeros((H, S))
    reach = np.zeros(S)
    reach[s1] = 1.0
    ratio[0] = 1.0
    smooth = 1e-9 / (S * A)
    for h in range(H):
        ratio[h] *= ~clip[h]
        if h + 1 == H:
            break
        q = reach[:, None] * probs[h]
        num = alpha * np.einsum("sa,sat->t", (q + smooth) * ratio[h][:, None], P[h])
        den = np.einsum("sa,sat->t", q + smooth, P[h])
        ratio[h + 1] = np.where(den > 0, num / np.where(den > 0, den, 1.0), alpha ** (h + 1))
        reach = np.einsum("sa,sat->t", q, P[h])
    return ratio


def occupancy_gradient(model: TabularMDP, policy, utility, alpha: float = 1.0,
                       ev: TruncatedEval | None = None) -> np.ndarray:
    """Supergradient of Vbar_1(s1) as a function of the occupancy measure.

    Moving occupancy along a feasible direction d changes Vbar_1(s1) by
    sum(r * d) to first order, where r_h(s, a) = ratio_h(s) * (Qbar_h(s, a) - Vpre_h(s))
    and Vpre is the pre-clip expectation.
    """
    probs, u = _validate(model, policy, utility, alpha)
    if ev is None:
        ev = truncated_evaluate(model, probs, u, alpha)
    ratio = occupancy_ratio(model.P, probs, ev.clip_mask, alpha, model.s1)
    pre = np.einsum("hsa,hsa->hs", probs, ev.Qbar)
    return ratio[:, :, None] * (ev.Qbar - pre[:, :, None])
