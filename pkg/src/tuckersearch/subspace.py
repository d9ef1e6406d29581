"""Singular-value splits of factor matrices and block decompositions.

Each r x d factor matrix M is split at a threshold sigma into a large part
M1 (singular values strictly above sigma) and a small part M2.  The split
carries four orthonormal bases:

    v1, v2: left singular directions in R^r (coefficient space),
    u1, u2: right singular directions in R^d (ambient space),

where u2 and v2 are the full orthogonal complements of u1 and v1, including
any nullspace, so [u1 u2] and [v1 v2] are always square orthogonal.

Projecting the target tensor and the current point onto products of these
subspaces decomposes the fitting residual into 8 blocks indexed by
(i, j, k) in {1, 2}^3 whose squared norms sum to the loss; large off-(1,1,1)
blocks point at directions the factors are missing.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import FactorPoint, flatten, multilinear_transform, norm_f


@dataclass(frozen=True)
class ModeSplit:
    """Threshold split of one factor matrix at singular value sigma."""
    m: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    singular_values: np.ndarray
    sigma: float

    @property
    def rank1(self) -> int:
        """Number of singular values above the threshold."""
        return self.u1.shape[1]


def _sign_fix_columns(U: np.ndarray) -> np.ndarray:
    """Make the first coordinate of magnitude > 1e-12 in each column
    positive, for reproducible bases."""
    U = U.copy()
    for j in range(U.shape[1]):
        col = U[:, j]
        for x in col:
            if abs(x) > 1e-12:
                if x < 0:
                    U[:, j] = -col
                break
    return U


def split(M: np.ndarray, sigma: float) -> ModeSplit:
    """Split M at threshold sigma; ties (values equal to sigma) go to M2."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError(f"expected a matrix, got ndim={M.ndim}")
    if sigma < 0:
        raise ValueError(f"threshold must be nonnegative, got {sigma}")
    r, d = M.shape
    V, s, Ut = np.linalg.svd(M, full_matrices=True)
    U = Ut.T
    nmin = min(r, d)
    # paired singular directions must flip together so m1 + m2 = M exactly;
    # trailing complement-only columns can be fixed independently
    for j in range(nmin):
        for x in V[:, j]:
            if abs(x) > 1e-12:
                if x < 0:
                    V[:, j] = -V[:, j]
                    U[:, j] = -U[:, j]
                break
    V[:, nmin:] = _sign_fix_columns(V[:, nmin:])
    U[:, nmin:] = _sign_fix_columns(U[:, nmin:])
    k = int(np.sum(s > sigma))
    m1 = (V[:, :k] * s[:k]) @ U[:, :k].T
    m2 = (V[:, k:nmin] * s[k:nmin]) @ U[:, k:nmin].T
    return ModeSplit(m=M, m1=m1, m2=m2, v1=V[:, :k], v2=V[:, k:],
                     u1=U[:, :k], u2=U[:, k:], singular_values=s,
                     sigma=float(sigma))


def true_projection(T: np.ndarray, mode: int, rank_tol: float = 1e-10) -> np.ndarray:
    """Orthogonal projection in R^d onto the span of mode-`mode` slices of
    T, i.e. the column space of its mode flattening.  Directions with
    singular value at most rank_tol times the largest are treated as zero."""
    F = flatten(T, mode)
    U, s, _ = np.linalg.svd(F, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((F.shape[0], F.shape[0]))
    keep = s > rank_tol * s[0]
    Uk = U[:, keep]
    return Uk @ Uk.T


@dataclass(frozen=True)
class SubspaceSplit:
    """Mode splits of the three factors plus target-span data.

    m3[m] = M (I - P[m]) is the part of factor m pointing outside the span
    of the target's mode-m slices; it contributes nothing to the fit."""
    modes: tuple[ModeSplit, ModeSplit, ModeSplit]
    p_true: tuple[np.ndarray, np.ndarray, np.ndarray]
    m3: tuple[np.ndarray, np.ndarray, np.ndarray]
    sigma: float


def subspace_split(p: FactorPoint, T: np.ndarray, sigma: float,
                   rank_tol: float = 1e-10) -> SubspaceSplit:
    """Build all per-mode splits of (A, B, C) against target T."""
    T = np.asarray(T, dtype=float)
    modes = tuple(split(M, sigma) for M in (p.A, p.B, p.C))
    p_true = tuple(true_projection(T, m, rank_tol) for m in (1, 2, 3))
    eye = np.eye(p.d)
    m3 = tuple(M @ (eye - P) for M, P in zip((p.A, p.B, p.C), p_true))
    return SubspaceSplit(modes=modes, p_true=p_true, m3=m3, sigma=float(sigma))


@dataclass(frozen=True)
class BlockDecomposition:
    """Projections of T, the core and the factors onto split subspaces.

    Keys are (i, j, k) in {1, 2}^3.  t_blocks are tensors in ambient
    coordinates, residuals[ijk] = || S_ijk(A_i, B_j, C_k) - T_ijk ||_F^2."""
    t_blocks: dict
    s_blocks: dict
    residuals: dict

    def total_residual(self) -> float:
        return float(sum(self.residuals.values()))


def block_decompose(p: FactorPoint, T: np.ndarray,
                    splits: SubspaceSplit) -> BlockDecomposition:
    T = np.asarray(T, dtype=float)
    pu = []
    pv = []
    for ms in splits.modes:
        pu.append({1: ms.u1 @ ms.u1.T, 2: ms.u2 @ ms.u2.T})
        pv.append({1: ms.v1 @ ms.v1.T, 2: ms.v2 @ ms.v2.T})
    factors = (p.A, p.B, p.C)
    t_blocks, s_blocks, residuals = {}, {}, {}
    for i in (1, 2):
        for j in (1, 2):
            for k in (1, 2):
                key = (i, j, k)
                t_blocks[key] = multilinear_transform(T, pu[0][i], pu[1][j],
                                                      pu[2][k])
                s_blocks[key] = multilinear_transform(p.S, pv[0][i], pv[1][j],
                                                      pv[2][k])
                fit = multilinear_transform(s_blocks[key],
                                            pv[0][i] @ factors[0],
                                            pv[1][j] @ factors[1],
                                            pv[2][k] @ factors[2])
                residuals[key] = norm_f(fit - t_blocks[key]) ** 2
    return BlockDecomposition(t_blocks=t_blocks, s_blocks=s_blocks,
                              residuals=residuals)


def projection_distance_bound(M: np.ndarray, M1: np.ndarray,
                              M2: np.ndarray) -> tuple[float, float]:
    """Row-space projection distance against its perturbation bound.

    For M = M1 + M2 with rank(M) >= rank(M1), returns (lhs, rhs) with

        lhs = || P - P1 ||_F,   rhs = 2 ||M2||_F / sigma_min(M),

    where P, P1 project onto the row spaces of M and M1.  lhs <= rhs
    whenever sigma_min(M) > 0 over nonzero singular values of M restricted
    to rank(M1) directions; callers check lhs <= rhs.
    """
    M = np.asarray(M, dtype=float)
    M1 = np.asarray(M1, dtype=float)
    M2 = np.asarray(M2, dtype=float)
    if M.shape != M1.shape or M.shape != M2.shape:
        raise ValueError("M, M1, M2 must share one shape")

    def row_projection(X, rank=None):
        _, s, Vt = np.linalg.svd(X, full_matrices=False)
        if s.size == 0 or s[0] == 0.0:
            return np.zeros((X.shape[1], X.shape[1])), 0
        k = int(np.sum(s > 1e-12 * s[0])) if rank is None else rank
        Vk = Vt[:k].T
        return Vk @ Vk.T, k

    P1, k1 = row_projection(M1)
    P, _ = row_projection(M, rank=k1)
    s = np.linalg.svd(M, compute_uv=False)
    smin = float(s[k1 - 1]) if k1 >= 1 else float("inf")
    lhs = float(np.linalg.norm(P - P1))
    rhs = 2.0 * float(np.linalg.norm(M2)) / smin if smin > 0 else float("inf")
    return lhs, rhs


def rank_deficient_modes(splits: SubspaceSplit) -> tuple[bool, bool, bool]:
    """True for each mode whose large part has fewer than r directions.

    A mode that is not deficient and has a small off-target part pins the
    target to the large part's row span, so no sampled escape direction can
    hide outside it."""
    r = splits.modes[0].m.shape[0]
    return tuple(ms.rank1 < r for ms in splits.modes)


def span_leak(T: np.ndarray, split_m: ModeSplit, mode: int) -> float:
    """|| T projected off the row span of M1 in the given mode ||_F."""
    d = split_m.m.shape[1]
    P = split_m.u1 @ split_m.u1.T
    mats = [np.eye(d)] * 3
    mats[mode - 1] = np.eye(d) - P
    return norm_f(multilinear_transform(np.asarray(T, dtype=float), *mats))
