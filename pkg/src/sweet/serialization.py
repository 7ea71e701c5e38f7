"""JSON documents for models, utilities, policies and solver output.

Each document carries a ``format`` tag, a ``version`` and the explicit S, A, H
header; arrays are nested lists.  Python's float repr is the shortest string
that round-trips, so 64-bit reals survive a dump/load cycle unchanged.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ShapeError
from .mdp_core import MarkovPolicy, MixturePolicy, TabularMDP, Utility
from .truncated_value import TruncatedEval

VERSION = 1


def _header(kind: str, H: int, S: int, A: int) -> dict:
    return {"format": f"sweet.{kind}", "version": VERSION, "S": int(S), "A": int(A), "H": int(H)}


def _array(doc: dict, key: str, shape: tuple) -> np.ndarray:
    arr = np.asarray(doc[key], dtype=np.float64)
    if arr.shape != tuple(shape):
        raise ShapeError(f"field {key!r} has shape {arr.shape}, header says {shape}")
    return arr


def _check(doc: dict, kind: str) -> tuple[int, int, int]:
    if doc.get("format") != f"sweet.{kind}":
        raise ValueError(f"expected format sweet.{kind}, got {doc.get('format')!r}")
    if doc.get("version") != VERSION:
        raise ValueError(f"unsupported version {doc.get('version')!r}")
    return doc["H"], doc["S"], doc["A"]


def mdp_to_doc(mdp: TabularMDP) -> dict:
    return {**_header("mdp", *mdp.shape), "s1": mdp.s1, "P": mdp.P.tolist()}


def mdp_from_doc(doc: dict) -> TabularMDP:
    H, S, A = _check(doc, "mdp")
    return TabularMDP(_array(doc, "P", (H, S, A, S)), doc["s1"])


def utility_to_doc(u: Utility) -> dict:
    return {**_header("utility", *u.shape), "normalized": bool(u.normalized), "values": u.values.tolist()}


def utility_from_doc(doc: dict) -> Utility:
    H, S, A = _check(doc, "utility")
    return Utility(_array(doc, "values", (H, S, A)), bool(doc["normalized"]))


def policy_to_doc(p: MarkovPolicy) -> dict:
    return {**_header("policy", *p.shape), "probs": p.probs.tolist()}


def policy_from_doc(doc: dict) -> MarkovPolicy:
    H, S, A = _check(doc, "policy")
    return MarkovPolicy(_array(doc, "probs", (H, S, A)))


def mixture_to_doc(m: MixturePolicy) -> dict:
    return {**_header("mixture", *m.shape), "weights": m.weights.tolist(),
            "vertices": [v.probs.tolist() for v in m.vertices]}


def mixture_from_doc(doc: dict) -> MixturePolicy:
    H, S, A = _check(doc, "mixture")
    verts = tuple(MarkovPolicy(np.asarray(v, dtype=np.float64).reshape(H, S, A)) for v in doc["vertices"])
    return MixturePolicy(verts, np.asarray(doc["weights"], dtype=np.float64))


def truncated_to_doc(ev: TruncatedEval) -> dict:
    H, S, A = ev.Qbar.shape
    return {**_header("truncated", H, S, A), "alpha": ev.alpha, "s1": ev.s1, "Vbar": ev.Vbar.tolist(),
            "Qbar": ev.Qbar.tolist(), "clip_mask": ev.clip_mask.astype(int).tolist()}


def truncated_from_doc(doc: dict) -> TruncatedEval:
    H, S, A = _check(doc, "truncated")
    return TruncatedEval(Vbar=_array(doc, "Vbar", (H + 1, S)), Qbar=_array(doc, "Qbar", (H, S, A)),
                         clip_mask=np.asarray(doc["clip_mask"], dtype=bool), alpha=doc["alpha"], s1=doc["s1"])


def solve_result_to_doc(res) -> dict:
    H, S, A = res.markov.shape
    return {**_header("solve", H, S, A), "status": res.status, "objective": res.objective,
            "constraint_value": res.constraint_value, "residual": res.residual, "budget": res.budget,
            "markov": res.markov.probs.tolist(), "mixture": mixture_to_doc(res.mixture)}


def uncertainty_to_doc(U) -> dict:
    """A TruncatedUncertainty together with its estimated model."""
    H, S, A = U.model.shape
    return {**_header("uncertainty", H, S, A), "model": mdp_to_doc(U.model), "bonus": U.bonus.tolist(),
            **U.to_dict()}


def uncertainty_from_doc(doc: dict):
    from .functionals import TruncatedUncertainty

    H, S, A = _check(doc, "uncertainty")
    model = mdp_from_doc(doc["model"])
    return TruncatedUncertainty(model, _array(doc, "bonus", (H, S, A)), alpha=doc["alpha"],
                                scale=doc["scale"], power=doc["power"], offset=doc["offset"])


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=None, separators=(",", ":"), sort_keys=True)


def save(doc: dict, path: str | Path) -> None:
    Path(path).write_text(dumps(doc) + "\n")


def load(path: str | Path) -> Any:
    return json.loads(Path(path).read_text())
