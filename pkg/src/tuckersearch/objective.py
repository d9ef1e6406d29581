"""Regularized Tucker fitting objective and its derivatives.

For a point p = (S, A, B, C) and a target tensor T the objective is

    f(p) = L(p) + lam * R(p),
    L(p) = || S(A, B, C) - T ||_F^2,
    R(p) = phi(p)^2,
    phi(p) = sum_m || M M^T - S_(m) S_(m)^T ||_F^2   over M in {A, B, C},

where S_(m) is the mode-m flattening of the core.  phi penalizes imbalance
between each factor Gram matrix and the matching core Gram matrix; squaring
it makes the penalty gradient vanish to second order on the balanced set,
which keeps the two gradient fields orthogonal:  <grad L, grad R> = 0 at
every point, not just asymptotically.

The default weight lam = 1 / (16 r^4) keeps the penalty subordinate to the
fitting term at the scales the search operates in.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .tensor_core import (FactorPoint, flatten, inner, multilinear_transform,
                          norm_f)


def default_lambda(r: int) -> float:
    """Regularization weight 1 / (16 r^4)."""
    if r < 1:
        raise ValueError(f"rank must be positive, got {r}")
    return 1.0 / (16.0 * r**4)


def _check_target(p: FactorPoint, T: np.ndarray) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    if T.shape != (p.d, p.d, p.d):
        raise ValueError(f"target shape {T.shape} does not match d={p.d}")
    return T


def loss(p: FactorPoint, T: np.ndarray) -> float:
    """Fitting term || S(A, B, C) - T ||_F^2."""
    T = _check_target(p, T)
    return norm_f(p.apply() - T) ** 2


def _gram_gaps(p: FactorPoint) -> list[np.ndarray]:
    """M M^T - S_(m) S_(m)^T for each mode, all r x r symmetric."""
    gaps = []
    for mode, M in ((1, p.A), (2, p.B), (3, p.C)):
        F = flatten(p.S, mode)
        gaps.append(M @ M.T - F @ F.T)
    return gaps


def reg_phi(p: FactorPoint) -> float:
    """Balance defect sum_m || M M^T - S_(m) S_(m)^T ||_F^2."""
    return float(sum(np.sum(G * G) for G in _gram_gaps(p)))


def reg(p: FactorPoint) -> float:
    """Regularizer R = phi^2."""
    return reg_phi(p) ** 2


@dataclass(frozen=True)
class ObjectiveReport:
    """One objective evaluation: f = L + lam * R with R = phi^2."""
    f: float
    L: float
    R: float
    phi: float
    lam: float


def objective(p: FactorPoint, T: np.ndarray, lam: float | None = None) -> ObjectiveReport:
    """Evaluate f = L + lam * R; lam defaults to 1 / (16 r^4)."""
    if lam is None:
        lam = default_lambda(p.r)
    L = loss(p, T)
    phi = reg_phi(p)
    R = phi * phi
    return ObjectiveReport(f=L + lam * R, L=L, R=R, phi=phi, lam=lam)


# ---------------------------------------------------------------------------
# gradients


def grad_loss(p: FactorPoint, T: np.ndarray) -> FactorPoint:
    """Gradient of the fitting term, block by block."""
    T = _check_target(p, T)
    r = p.r
    I = np.eye(r)
    D = p.apply() - T
    gS = 2.0 * multilinear_transform(D, p.A.T, p.B.T, p.C.T)
    # each factor gradient contracts the residual with the transform that
    # leaves that factor's mode untouched
    gA = 2.0 * np.tensordot(multilinear_transform(p.S, I, p.B, p.C), D,
                            axes=([1, 2], [1, 2]))
    gB = 2.0 * np.tensordot(multilinear_transform(p.S, p.A, I, p.C), D,
                            axes=([0, 2], [0, 2]))
    gC = 2.0 * np.tensordot(multilinear_transform(p.S, p.A, p.B, I), D,
                            axes=([0, 1], [0, 1]))
    return FactorPoint(gS, gA, gB, gC)


def grad_phi(p: FactorPoint) -> FactorPoint:
    """Gradient of the balance defect phi."""
    G1, G2, G3 = _gram_gaps(p)
    I = np.eye(p.r)
    gA = 4.0 * G1 @ p.A
    gB = 4.0 * G2 @ p.B
    gC = 4.0 * G3 @ p.C
    gS = -4.0 * (multilinear_transform(p.S, G1, I, I)
                 + multilinear_transform(p.S, I, G2, I)
                 + multilinear_transform(p.S, I, I, G3))
    return FactorPoint(gS, gA, gB, gC)


def grad_reg(p: FactorPoint) -> FactorPoint:
    """Gradient of R = phi^2, which is 2 phi grad(phi)."""
    return (2.0 * reg_phi(p)) * grad_phi(p)


def grad(p: FactorPoint, T: np.ndarray, lam: float | None = None) -> FactorPoint:
    """Gradient of f = L + lam * R."""
    if lam is None:
        lam = default_lambda(p.r)
    return grad_loss(p, T) + lam * grad_reg(p)


def hvp(p: FactorPoint, direction: FactorPoint, T: np.ndarray,
        lam: float | None = None, h: float | None = None) -> FactorPoint:
    """Hessian-vector product by a central difference of the gradient.

    The step is scaled to the point, h = 1e-5 (1 + |p|) / |direction|, so
    the estimate is accurate to O(h^2) on this polynomial objective.
    """
    dn = direction.norm()
    if dn == 0.0:
        raise ValueError("hvp direction must be nonzero")
    if h is None:
        h = 1e-5 * (1.0 + p.norm()) / dn
    gp = grad(p + h * direction, T, lam)
    gm = grad(p - h * direction, T, lam)
    return (1.0 / (2.0 * h)) * (gp - gm)


def eval_along(p: FactorPoint, direction: FactorPoint, T: np.ndarray,
               steps, lam: float | None = None) -> list[tuple[float, ObjectiveReport]]:
    """Exact objective values f(p + eps * direction) for each eps in steps."""
    out = []
    for eps in steps:
        out.append((float(eps), objective(p + float(eps) * direction, T, lam)))
    return out


def balanced_random_point(r: int, d: int, rng: np.random.Generator,
                          scale: float = 1.0) -> FactorPoint:
    """Random point with phi = 0.

    Draws a Gaussian core, then builds each factor as (symmetric square root
    of the core Gram) times a matrix with orthonormal rows, so every factor
    Gram equals the matching core Gram exactly.
    """
    if d < r:
        raise ValueError(f"need d >= r to draw orthonormal rows, got r={r} d={d}")
    S = scale * rng.standard_normal((r, r, r))
    mats = []
    for mode in (1, 2, 3):
        F = flatten(S, mode)
        w, V = np.linalg.eigh(F @ F.T)
        root = (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T
        Q = np.linalg.qr(rng.standard_normal((d, r)))[0].T
        mats.append(root @ Q)
    return FactorPoint(S, *mats)


# ---------------------------------------------------------------------------
# point file I/O
#
# JSON: {"r": r, "d": d, "S": {"dims": [r,r,r], "data": [...]},
#        "A": [[...]], "B": [[...]], "C": [[...]]}


def point_to_dict(p: FactorPoint) -> dict:
    return {
        "r": p.r,
        "d": p.d,
        "S": {"dims": [p.r] * 3, "data": [float(x) for x in p.S.ravel()]},
        "A": [[float(x) for x in row] for row in p.A],
        "B": [[float(x) for x in row] for row in p.B],
        "C": [[float(x) for x in row] for row in p.C],
    }


def point_from_dict(doc: dict) -> FactorPoint:
    try:
        r, d = int(doc["r"]), int(doc["d"])
        core = doc["S"]
        dims = [int(x) for x in core["dims"]]
        data = np.asarray(core["data"], dtype=float)
        mats = [np.asarray(doc[k], dtype=float) for k in ("A", "B", "C")]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed factor point document: {exc}") from exc
    if dims != [r, r, r]:
        raise ValueError(f"core dims {dims} do not match r={r}")
    if data.size != r**3:
        raise ValueError(f"core data length {data.size}, need {r**3}")
    for name, M in zip("ABC", mats):
        if M.shape != (r, d):
            raise ValueError(f"{name} has shape {M.shape}, need ({r}, {d})")
    if not all(np.all(np.isfinite(M)) for M in [data] + mats):
        raise ValueError("factor point contains non-finite entries")
    return FactorPoint(data.reshape(r, r, r), *mats)


def save_point(path, p: FactorPoint) -> None:
    with open(path, "w") as fh:
        json.dump(point_to_dict(p), fh, sort_keys=True)
        fh.write("\n")


def load_point(path) -> FactorPoint:
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: expected a JSON object")
    return point_from_dict(doc)
