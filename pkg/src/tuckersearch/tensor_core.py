"""Dense third-order tensor arithmetic.

Conventions used throughout the package:

  * a third-order tensor is a C-ordered float ndarray of shape (d1, d2, d3);
  * the multilinear transform S(A, B, C) contracts mode m of the core S
    with the rows of the m-th matrix,

        [S(A, B, C)]_ijk = sum_xyz  S_xyz A_xi B_yj C_zk,

    so an (r1, r2, r3) core and matrices of shape (r1, d1), (r2, d2),
    (r3, d3) produce a (d1, d2, d3) tensor;
  * flatten(X, m) unfolds mode m (1-indexed) into the rows of a matrix and
    satisfies  flatten(S(A,B,C), 1) = A^T flatten(S,1) kron(B, C)  and the
    analogous identities with kron(A, C) and kron(A, B) for modes 2 and 3.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"TKR1"


def multilinear_transform(S: np.ndarray, A: np.ndarray, B: np.ndarray,
                          C: np.ndarray) -> np.ndarray:
    """Apply A, B, C to modes 1, 2, 3 of S; mode-by-mode contraction."""
    S = np.asarray(S, dtype=float)
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    C = np.asarray(C, dtype=float)
    if S.ndim != 3:
        raise ValueError(f"core must be a third-order tensor, got ndim={S.ndim}")
    for name, M, mode in (("A", A, 0), ("B", B, 1), ("C", C, 2)):
        if M.ndim != 2:
            raise ValueError(f"{name} must be a matrix, got ndim={M.ndim}")
        if M.shape[0] != S.shape[mode]:
            raise ValueError(
                f"{name} has {M.shape[0]} rows but core mode {mode + 1} "
                f"has size {S.shape[mode]}")
    # Each tensordot consumes the current leading axis, so the surviving
    # axes cycle back into (i, j, k) order after three contractions.
    out = np.tensordot(S, A, axes=([0], [0]))
    out = np.tensordot(out, B, axes=([0], [0]))
    out = np.tensordot(out, C, axes=([0], [0]))
    return out


def flatten(X: np.ndarray, mode: int) -> np.ndarray:
    """Unfold mode `mode` (1, 2 or 3) of X into the rows of a matrix."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 3:
        raise ValueError(f"expected a third-order tensor, got ndim={X.ndim}")
    d1, d2, d3 = X.shape
    if mode == 1:
        return X.reshape(d1, d2 * d3)
    if mode == 2:
        return X.transpose(1, 0, 2).reshape(d2, d1 * d3)
    if mode == 3:
        return X.transpose(2, 0, 1).reshape(d3, d1 * d2)
    raise ValueError(f"mode must be 1, 2 or 3, got {mode}")


def kron(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Kronecker product ordered to match the flattening identities."""
    return np.kron(np.asarray(P, dtype=float), np.asarray(Q, dtype=float))


def inner(X: np.ndarray, Y: np.ndarray) -> float:
    """Entrywise inner product <X, Y>."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.shape != Y.shape:
        raise ValueError(f"shape mismatch {X.shape} vs {Y.shape}")
    return float(np.vdot(X, Y))


def norm_f(X: np.ndarray) -> float:
    """Frobenius norm."""
    return float(np.linalg.norm(np.asarray(X, dtype=float).ravel()))


# ---------------------------------------------------------------------------
# spectral norm by alternating rank-one power iteration


@dataclass(frozen=True)
class SpectralTriple:
    """Best rank-one triple found for a tensor: sigma ~ max X(a,b,c) over
    unit vectors.  sigma is a lower bound on the true spectral norm; with
    enough restarts it matches it.  residual is the largest stationarity
    defect max_m ||X(., v, w) - sigma u|| relative to sigma."""
    sigma: float
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    residual: float
    tol: float
    converged: bool


def _contract_1(X: np.ndarray, v: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.einsum("ijk,j,k->i", X, v, w)


def _contract_2(X: np.ndarray, u: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.einsum("ijk,i,k->j", X, u, w)


def _contract_3(X: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("ijk,i,j->k", X, u, v)


def trilinear(X: np.ndarray, u: np.ndarray, v: np.ndarray,
              w: np.ndarray) -> float:
    """Trilinear form X(u, v, w) = sum_ijk X_ijk u_i v_j w_k."""
    return float(np.einsum("ijk,i,j,k->", X, u, v, w))


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x)
    if n == 0.0:
        raise ZeroDivisionError("cannot normalize a zero vector")
    return x / n


def spectral_norm(X: np.ndarray, restarts: int = 20, tol: float = 1e-10,
                  max_iters: int = 500, seed: int = 0) -> SpectralTriple:
    """Spectral norm max_{|u|=|v|=|w|=1} X(u, v, w) by alternating power
    iteration with random restarts.

    The first start uses the leading singular vectors of the flattenings,
    the rest are seeded Gaussian draws, so the result is deterministic for
    fixed (restarts, seed).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 3:
        raise ValueError(f"expected a third-order tensor, got ndim={X.ndim}")
    d1, d2, d3 = X.shape
    scale = norm_f(X)
    if scale == 0.0:
        e = lambda d: np.eye(d)[:, 0]
        return SpectralTriple(0.0, e(d1), e(d2), e(d3), 0.0, tol, True)

    rng = np.random.default_rng(seed)
    starts = [(np.linalg.svd(flatten(X, 1))[0][:, 0],
               np.linalg.svd(flatten(X, 2))[0][:, 0],
               np.linalg.svd(flatten(X, 3))[0][:, 0])]
    for _ in range(max(0, restarts - 1)):
        starts.append((_unit(rng.standard_normal(d1)),
                       _unit(rng.standard_normal(d2)),
                       _unit(rng.standard_normal(d3))))

    best = None
    for u, v, w in starts:
        sigma = trilinear(X, u, v, w)
        ok = False
        for _ in range(max_iters):
            cu = _contract_1(X, v, w)
            if np.linalg.norm(cu) > 0:
                u = _unit(cu)
            cv = _contract_2(X, u, w)
            if np.linalg.norm(cv) > 0:
                v = _unit(cv)
            cw = _contract_3(X, u, v)
            sigma = float(np.linalg.norm(cw))
            if sigma > 0:
                w = cw / sigma
            res = _residual(X, sigma, u, v, w)
            if res <= tol * max(sigma, 1e-300):
                ok = True
                break
        cand = (sigma, u, v, w, res, ok)
        if best is None or cand[0] > best[0]:
            best = cand

    sigma, u, v, w, res, ok = best
    # sign convention: make the value nonnegative and pin the first nonzero
    # coordinate of u to be positive so repeated calls agree exactly
    if trilinear(X, u, v, w) < 0:
        w = -w
    u, su = _sign_fix(u)
    v, sv = _sign_fix(v)
    w = w * su * sv
    return SpectralTriple(sigma, u, v, w, res / max(sigma, 1e-300), tol, ok)


def _residual(X: np.ndarray, sigma: float, u: np.ndarray, v: np.ndarray,
              w: np.ndarray) -> float:
    r1 = np.linalg.norm(_contract_1(X, v, w) - sigma * u)
    r2 = np.linalg.norm(_contract_2(X, u, w) - sigma * v)
    r3 = np.linalg.norm(_contract_3(X, u, v) - sigma * w)
    return float(max(r1, r2, r3))


def _sign_fix(x: np.ndarray) -> tuple[np.ndarray, float]:
    """Flip x so its first coordinate of magnitude > 1e-12 is positive."""
    for xi in x:
        if abs(xi) > 1e-12:
            s = 1.0 if xi > 0 else -1.0
            return x * s, s
    return x, 1.0


# ---------------------------------------------------------------------------
# factored parameter points


@dataclass(frozen=True, eq=False)
class FactorPoint:
    """A point (S, A, B, C) of the factored parameter space: an r x r x r
    core plus three r x d factor matrices.  Instances are immutable and
    support vector-space arithmetic."""
    S: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        S = np.ascontiguousarray(self.S, dtype=float)
        if S.ndim != 3 or len(set(S.shape)) != 1:
            raise ValueError(f"core must be an r x r x r cube, got {S.shape}")
        r = S.shape[0]
        mats = []
        for name, M in (("A", self.A), ("B", self.B), ("C", self.C)):
            M = np.ascontiguousarray(M, dtype=float)
            if M.ndim != 2 or M.shape[0] != r:
                raise ValueError(
                    f"{name} must have shape (r, d) with r={r}, got {M.shape}")
            mats.append(M)
        if len({M.shape for M in mats}) != 1:
            raise ValueError("A, B, C must share one shape")
        for arr, field in zip([S] + mats, ("S", "A", "B", "C")):
            arr.flags.writeable = False
            object.__setattr__(self, field, arr)

    @property
    def r(self) -> int:
        return self.S.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    def blocks(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.S, self.A, self.B, self.C

    @staticmethod
    def zeros(r: int, d: int) -> "FactorPoint":
        return FactorPoint(np.zeros((r, r, r)), np.zeros((r, d)),
                           np.zeros((r, d)), np.zeros((r, d)))

    def __add__(self, other: "FactorPoint") -> "FactorPoint":
        return FactorPoint(self.S + other.S, self.A + other.A,
                           self.B + other.B, self.C + other.C)

    def __sub__(self, other: "FactorPoint") -> "FactorPoint":
        return FactorPoint(self.S - other.S, self.A - other.A,
                           self.B - other.B, self.C - other.C)

    def __neg__(self) -> "FactorPoint":
        return self * -1.0

    def __mul__(self, c: float) -> "FactorPoint":
        c = float(c)
        return FactorPoint(c * self.S, c * self.A, c * self.B, c * self.C)

    __rmul__ = __mul__

    def inner(self, other: "FactorPoint") -> float:
        return (inner(self.S, other.S) + inner(self.A, other.A)
                + inner(self.B, other.B) + inner(self.C, other.C))

    def norm(self) -> float:
        return float(np.sqrt(max(self.inner(self), 0.0)))

    def apply(self) -> np.ndarray:
        """The represented tensor S(A, B, C)."""
        return multilinear_transform(self.S, self.A, self.B, self.C)


def random_point(r: int, d: int, rng: np.random.Generator,
                 scale: float = 1.0) -> FactorPoint:
    """Independent Gaussian entries of standard deviation `scale`."""
    return FactorPoint(scale * rng.standard_normal((r, r, r)),
                       scale * rng.standard_normal((r, d)),
                       scale * rng.standard_normal((r, d)),
                       scale * rng.standard_normal((r, d)))


def hosvd(T: np.ndarray, r: int) -> FactorPoint:
    """Rank-r higher-order SVD of T.

    Rows of each returned factor are the top-r left singular vectors of the
    corresponding flattening (so A A^T = I_r), and the core is T compressed
    onto those subspaces.  Exactly recovers T when every flattening has rank
    at most r.  Singular vectors have their first nonzero coordinate made
    positive, which fixes the result up to floating-point tie-breaking.
    """
    T = np.asarray(T, dtype=float)
    if T.ndim != 3:
        raise ValueError(f"expected a third-order tensor, got ndim={T.ndim}")
    if not (1 <= r <= min(T.shape)):
        raise ValueError(f"rank must satisfy 1 <= r <= {min(T.shape)}, got {r}")
    factors = []
    for mode in (1, 2, 3):
        U = np.linalg.svd(flatten(T, mode), full_matrices=False)[0][:, :r]
        U = np.column_stack([_sign_fix(U[:, j])[0] for j in range(r)])
        factors.append(U.T)
    A, B, C = factors
    S = multilinear_transform(T, A.T, B.T, C.T)
    return FactorPoint(S, A, B, C)


# ---------------------------------------------------------------------------
# tensor file I/O
#
# JSON: {"dims": [d1, d2, d3], "data": [row-major floats], "meta": {...}?}
# binary: b"TKR1" + three little-endian u64 dims + row-major f64 entries


def _validate_payload(dims, data) -> np.ndarray:
    if len(dims) != 3 or any(int(d) != d or d < 1 for d in dims):
        raise ValueError(f"dims must be three positive integers, got {dims}")
    dims = tuple(int(d) for d in dims)
    n = dims[0] * dims[1] * dims[2]
    arr = np.asarray(data, dtype=float).ravel()
    if arr.size != n:
        raise ValueError(
            f"data length {arr.size} does not match dims {dims} (need {n})")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor data contains non-finite entries")
    return arr.reshape(dims)


def save_tensor_json(path, X: np.ndarray, meta: dict | None = None) -> None:
    X = np.ascontiguousarray(X, dtype=float)
    doc = {"dims": list(X.shape), "data": [float(x) for x in X.ravel()]}
    if meta is not None:
        doc["meta"] = meta
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_tensor_json(path) -> np.ndarray:
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or "dims" not in doc or "data" not in doc:
        raise ValueError(f"{path}: expected an object with dims and data")
    return _validate_payload(doc["dims"], doc["data"])


def save_tensor_binary(path, X: np.ndarray) -> None:
    X = np.ascontiguousarray(X, dtype=float)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<3Q", *X.shape))
        fh.write(X.astype("<f8").tobytes())


def load_tensor_binary(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic, not a binary tensor file")
    if len(blob) < 28:
        raise ValueError(f"{path}: truncated header")
    dims = struct.unpack("<3Q", blob[4:28])
    n = dims[0] * dims[1] * dims[2]
    payload = blob[28:]
    if len(payload) != 8 * n:
        raise ValueError(
            f"{path}: payload has {len(payload)} bytes, dims {dims} need {8 * n}")
    data = np.frombuffer(payload, dtype="<f8")
    return _validate_payload(dims, data)


def load_tensor(path) -> np.ndarray:
    """Load a tensor file, sniffing the binary magic, else JSON."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        return load_tensor_binary(path)
    return load_tensor_json(path)
