"""Local search driver.

The driver alternates two stages until the objective reaches the target,
no direction helps, or the gradient-evaluation budget runs out:

  1. descend to an approximate second-order stationary point with
     backtracking gradient descent, exploiting negative curvature found by
     power iteration on a shifted Hessian-vector product;
  2. at the stationary point, propose escape directions: the sampled
     rank-one block updates, the deterministic core fix, and removal of
     off-span factor mass; accept the best if it improves enough.

Stage 1 handles first and second order saddles, stage 2 the flat third and
fourth order ones that gradient information cannot see.

Budget accounting: one gradient evaluation costs 1, one Hessian-vector
product costs 2 (it is a gradient difference).  Plain objective values are
not charged against the budget but are counted separately.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .escape import (NoDirection, NoMissingDirection, build_sampled_direction,
                     core_fix_direction, delta_grid,
                     remove_extraneous_direction, sample_missing_directions,
                     sign_flip_search)
from .objective import _gram_gaps, default_lambda, grad, hvp, objective
from .subspace import subspace_split
from .tensor_core import (FactorPoint, hosvd, multilinear_transform,
                          random_point)

SAMPLED_BLOCKS = ((1, 1, 2), (1, 2, 1), (2, 1, 1), (1, 2, 2), (2, 1, 2),
                  (2, 2, 1), (2, 2, 2))

# trace vocabulary: init | gradient | negative-curvature | sampled(i,j,k)
# | core-fix | remove-extraneous; "perturbation" is reserved but the
# current driver never emits it (the sampler subsumes random restarts)
_KIND_LABELS = {"core_fix": "core-fix",
                "remove_extraneous": "remove-extraneous"}


class ScheduleError(Exception):
    """No feasible schedule parameter exists in floating point."""


class NonFiniteError(Exception):
    """The objective or gradient became non-finite; carries the trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


# ---------------------------------------------------------------------------
# parameter schedule


@dataclass(frozen=True)
class Thresholds:
    """Scale cascade tying every tolerance to the regularizer bound tau.

    gamma grows like tau^(1/48); sigma = kappa0 = sqrt(gamma) is the
    singular-value split threshold; kappa1..3 bound residual blocks with
    one, two and three missing modes; tau1 and tau2 are the stationarity
    tolerances; epsilon is the target objective value.
    """
    epsilon: float
    r: int
    d: int
    k_bound: float
    lam: float
    tau: float
    gamma: float
    sigma: float
    kappa0: float
    kappa1: float
    kappa2: float
    kappa3: float
    tau1: float
    tau2: float

    def __post_init__(self):
        vals = (self.epsilon, self.k_bound, self.lam, self.tau, self.gamma,
                self.sigma, self.kappa0, self.kappa1, self.kappa2,
                self.kappa3, self.tau1, self.tau2)
        if not all(v > 0 for v in vals):
            raise ValueError("all thresholds must be positive")
        K = self.k_bound
        checks = {
            "lam": (self.lam, 1.0 / (16.0 * self.r**4)),
            "sigma": (self.sigma, math.sqrt(self.gamma)),
            "kappa0": (self.kappa0, math.sqrt(self.gamma)),
            "kappa1": (self.kappa1, 2.0 * K * self.sigma**0.75),
            "kappa2": (self.kappa2, 2.0 * K * self.sigma**0.125),
            "kappa3": (self.kappa3, 2.0 * K * self.sigma**0.5),
        }
        for name, (got, want) in checks.items():
            if not math.isclose(got, want, rel_tol=1e-12):
                raise ValueError(f"schedule inconsistency: {name}={got} "
                                 f"but the formulas give {want}")
        if not (self.kappa2 > self.kappa3 > self.kappa1):
            raise ValueError(
                "schedule inconsistency: the block bounds must be ordered "
                "kappa2 > kappa3 > kappa1, which requires sigma < 1")


def schedule(epsilon: float, r: int, d: int,
             k_bound: float = 1.0) -> Thresholds:
    """Largest regularizer bound tau on a geometric grid whose induced
    cascade keeps every residual block below sqrt(epsilon)/4.

    Raises ScheduleError when no tau above the floating-point floor works;
    the practical-mode overrides are the intended fallback in that case.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must be in (0, 1), got {epsilon}")
    if r < 1 or d < r:
        raise ValueError(f"need 1 <= r <= d, got r={r} d={d}")
    K = float(k_bound)
    lam = default_lambda(r)
    target = math.sqrt(epsilon) / 4.0
    for k in range(2, 1200):
        tau = 10.0 ** (-k / 4.0)
        g2 = max(r * (tau ** (1 / 24) + tau ** 0.25),
                 r**4 * (4.0 * K**6 * tau ** 0.125 + K**4 * tau ** 0.375))
        gamma = math.sqrt(g2)
        if gamma >= 1.0:
            continue
        sigma = math.sqrt(gamma)
        kappa1 = 2.0 * K * sigma**0.75
        kappa2 = 2.0 * K * sigma**0.125
        kappa3 = 2.0 * K * sigma**0.5
        feasible = (sigma < target
                    and d * kappa1 + K**3 * sigma < target
                    and d * kappa2 + K**2 * sigma**2 < target
                    and d * kappa3 + K * sigma**3 < target
                    and tau < epsilon / 2.0)
        if feasible:
            return Thresholds(epsilon=epsilon, r=r, d=d, k_bound=K, lam=lam,
                              tau=tau, gamma=gamma, sigma=sigma, kappa0=sigma,
                              kappa1=kappa1, kappa2=kappa2, kappa3=kappa3,
                              tau1=4.0 * lam * tau / K,
                              tau2=sigma ** 3.75)
    raise ScheduleError(
        "no feasible tau above the floating-point floor for "
        f"epsilon={epsilon}, r={r}, d={d}, k_bound={k_bound}; "
        "run in practical mode with override tolerances instead")


# ---------------------------------------------------------------------------
# configuration and trace


@dataclass
class SearchConfig:
    """Knobs for one run.  Defaults are the practical mode; theory mode
    replaces sigma, tau1, tau2, min_improvement and samples_per_block with
    the schedule cascade."""
    r: int
    mode: str = "practical"
    epsilon: float = 1e-4
    lam: float | None = None
    seed: int = 0
    budget: int = 50_000
    samples_per_block: int | None = None
    sigma: float = 0.05
    tau1: float = 1e-6
    tau2: float = 1e-4
    min_improvement: float = 1e-10
    delta_span: float = 100.0
    delta_points: int = 13
    init: str = "zero"
    sosp_eval_cap: int = 3000
    max_rounds: int = 100_000
    k_bound: float = 1.0

    def validate(self) -> None:
        if self.r < 1:
            raise ValueError(f"rank must be positive, got {self.r}")
        if self.mode not in ("practical", "theory"):
            raise ValueError(f"mode must be practical or theory, got {self.mode}")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must be in (0, 1), got {self.epsilon}")
        for name in ("budget", "sosp_eval_cap", "max_rounds", "delta_points"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("sigma", "tau1", "tau2", "min_improvement", "delta_span"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.samples_per_block is not None and self.samples_per_block < 1:
            raise ValueError("samples_per_block must be positive")
        _parse_init(self.init)

    def resolved_samples_per_block(self) -> int:
        if self.samples_per_block is not None:
            return int(self.samples_per_block)
        by_eps = math.ceil(8.0 * math.log(1.0 / self.epsilon))
        if self.mode == "theory":
            return by_eps
        return min(by_eps, 6)


def _parse_init(spec: str):
    if spec in ("zero", "hosvd"):
        return spec, None
    if spec.startswith("random:"):
        try:
            scale = float(spec.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad init spec {spec!r}") from None
        if scale <= 0:
            raise ValueError(f"init scale must be positive, got {scale}")
        return "random", scale
    raise ValueError(f"init must be zero, hosvd or random:<scale>, got {spec!r}")


@dataclass
class TraceRecord:
    iteration: int
    f: float
    L: float
    R: float
    grad_norm: float | None
    min_curvature: float | None
    step_kind: str
    step_size: float
    improvement: float
    seed: int
    wall_time: float

    def to_json_dict(self) -> dict:
        # wall time stays out of the serialized record so that traces from
        # identical (config, seed) runs are byte-identical
        return {
            "iteration": self.iteration,
            "f": self.f,
            "L": self.L,
            "R": self.R,
            "grad_norm": self.grad_norm,
            "min_curvature": self.min_curvature,
            "step_kind": self.step_kind,
            "step_size": self.step_size,
            "improvement": self.improvement,
            "seed": self.seed,
        }


@dataclass
class SearchTrace:
    seed: int
    records: list[TraceRecord] = field(default_factory=list)
    started_at: float = field(default_factory=time.perf_counter)

    def append(self, f: float, L: float, R: float, step_kind: str,
               step_size: float, improvement: float,
               grad_norm: float | None = None,
               min_curvature: float | None = None) -> TraceRecord:
        if self.records:
            prev = self.records[-1].f
            if f > prev + 1e-12 * (1.0 + abs(prev)):
                raise AssertionError(
                    f"objective increased along accepted steps: {prev} -> {f}")
        rec = TraceRecord(iteration=len(self.records), f=float(f), L=float(L),
                          R=float(R), grad_norm=grad_norm,
                          min_curvature=min_curvature, step_kind=step_kind,
                          step_size=float(step_size),
                          improvement=float(improvement), seed=self.seed,
                          wall_time=time.perf_counter() - self.started_at)
        self.records.append(rec)
        return rec

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec.to_json_dict(), sort_keys=True))
                fh.write("\n")


class GradBudget:
    """Counts gradient evaluations; a Hessian-vector product costs two."""

    def __init__(self, limit: int):
        self.limit = int(limit)
        self.used = 0
        self.objective_evals = 0

    def charge(self, n: int = 1) -> None:
        self.used += n

    def note_objective(self, n: int = 1) -> None:
        self.objective_evals += n

    @property
    def exhausted(self) -> bool:
        return self.used >= self.limit


# ---------------------------------------------------------------------------
# stationary point finding


def _apply_balance(p: FactorPoint, eta: float,
                   gaps: list[np.ndarray]) -> FactorPoint:
    """Move along the loss-preserving symmetry orbit: each factor shrinks by
    exp(-eta G_m) where its Gram matrix exceeds the core's, and the core
    absorbs the inverse, so the reconstructed tensor is unchanged while the
    balance defect decreases."""
    shrink = []
    grow = []
    for G in gaps:
        w, V = np.linalg.eigh(G)
        shrink.append((V * np.exp(-eta * w)) @ V.T)
        grow.append((V * np.exp(eta * w)) @ V.T)
    S = multilinear_transform(p.S, grow[0], grow[1], grow[2])
    return FactorPoint(S, shrink[0] @ p.A, shrink[1] @ p.B, shrink[2] @ p.C)


def _rebalance_once(p: FactorPoint, T: np.ndarray, lam: float, f0: float,
                    budget: GradBudget):
    """One line-searched orbit move; returns (point, f, eta) or None.
    Charged as a gradient evaluation: the gap matrices are the content of
    the regularizer gradient."""
    gaps = _gram_gaps(p)
    budget.charge(1)
    scale = max(float(np.abs(G).max()) for G in gaps)
    if scale <= 1e-15 * (1.0 + p.norm() ** 2):
        return None
    eta = 1.0 / (1.0 + scale)
    for _ in range(12):
        cand = _apply_balance(p, eta, gaps)
        budget.note_objective()
        fc = objective(cand, T, lam).f
        if math.isfinite(fc) and fc < f0 - 1e-12 * (1.0 + abs(f0)):
            return cand, fc, eta
        eta *= 0.5
    return None


@dataclass(frozen=True)
class FindSospInfo:
    converged: bool
    f: float
    grad_norm: float
    min_curvature: float | None
    grad_evals: int


def _require_finite(value: float, what: str, trace=None) -> None:
    if not math.isfinite(value):
        raise NonFiniteError(f"{what} became non-finite", trace=trace)


def _negative_curvature(p: FactorPoint, T: np.ndarray, lam: float,
                        tau2: float, iters: int, restarts: int,
                        rng: np.random.Generator, budget: GradBudget):
    """Power iteration on (c I - H); returns (direction or None, rayleigh,
    evals used).  c is a conservative shift above ||H|| estimated from a
    few product probes."""
    used0 = budget.used
    r, d = p.r, p.d

    def probe(v):
        budget.charge(2)
        return hvp(p, v, T, lam)

    hnorm = 0.0
    q = random_point(r, d, rng)
    q = (1.0 / q.norm()) * q
    for _ in range(3):
        Hq = probe(q)
        n = Hq.norm()
        hnorm = max(hnorm, n)
        if n <= 1e-14:
            break
        q = (1.0 / n) * Hq
    c = 2.0 * hnorm + tau2
    best_rho = math.inf
    best_dir = None
    for _ in range(restarts):
        v = random_point(r, d, rng)
        v = (1.0 / v.norm()) * v
        for _ in range(iters):
            if budget.exhausted:
                break
            Hv = probe(v)
            w = c * v - Hv
            nw = w.norm()
            if nw <= 1e-300:
                break
            v = (1.0 / nw) * w
        Hv = probe(v)
        rho = v.inner(Hv)
        _require_finite(rho, "curvature estimate")
        if rho < best_rho:
            best_rho = rho
            best_dir = v
        if best_rho <= -tau2 / 2.0 or budget.exhausted:
            break
    if best_rho <= -tau2 / 2.0:
        return best_dir, best_rho, budget.used - used0
    return None, best_rho, budget.used - used0


def negative_curvature_direction(p: FactorPoint, T: np.ndarray,
                                 lam: float | None = None, tau2: float = 1e-4,
                                 iters: int = 25,
                                 rng: np.random.Generator | None = None,
                                 restarts: int = 2) -> FactorPoint | None:
    """Unit direction with Rayleigh quotient at most -tau2/2, or None."""
    if lam is None:
        lam = default_lambda(p.r)
    if rng is None:
        rng = np.random.default_rng(0)
    budget = GradBudget(10**9)
    direction, _, _ = _negative_curvature(p, T, lam, tau2, iters, restarts,
                                          rng, budget)
    return direction


def _line_search(p, T, lam, direction, f0, budget, init_step=1.0,
                 slope: float | None = None, shrink=0.5, max_backtracks=40):
    """Backtrack from init_step until sufficient decrease; returns
    (point, f, step) or None.  With a slope (for gradient steps) the Armijo
    rule applies; otherwise any strict decrease wins."""
    step = init_step
    for _ in range(max_backtracks):
        cand = p + step * direction
        budget.note_objective()
        fc = objective(cand, T, lam).f
        if math.isfinite(fc):
            if slope is not None:
                if fc <= f0 - 1e-4 * step * slope:
                    return cand, fc, step
            elif fc < f0 - 1e-12 * (1.0 + abs(f0)):
                return cand, fc, step
        step *= shrink
    return None


def _find_sosp(p: FactorPoint, T: np.ndarray, lam: float, tau1: float,
               tau2: float, budget: GradBudget, rng: np.random.Generator,
               trace: SearchTrace | None = None, eval_cap: int | None = None,
               nc_iters: int = 25, nc_restarts: int = 2):
    rep = objective(p, T, lam)
    budget.note_objective()
    _require_finite(rep.f, "objective", trace)
    f0 = rep.f
    start_used = budget.used
    step_hint = 1.0
    gn = math.inf
    min_curv = None

    def local_evals():
        return budget.used - start_used

    while True:
        if budget.exhausted or (eval_cap is not None
                                and local_evals() >= eval_cap):
            return p, FindSospInfo(False, f0, gn, min_curv, local_evals())
        # orbit moves only pay off once the regularizer carries a real
        # share of the objective; while the loss dominates, plain descent
        # handles both components
        if f0 > 0.0 and lam * rep.R >= 0.25 * rep.f:
            hit = _rebalance_once(p, T, lam, f0, budget)
            if hit is not None:
                prev_f = f0
                p, f0, eta = hit
                rep = objective(p, T, lam)
                budget.note_objective()
                if trace is not None:
                    trace.append(f=rep.f, L=rep.L, R=rep.R,
                                 step_kind="rebalance", step_size=eta,
                                 improvement=prev_f - f0)
                continue
        g = grad(p, T, lam)
        budget.charge(1)
        gn = g.norm()
        _require_finite(gn, "gradient", trace)
        if gn > tau1:
            hit = _line_search(p, T, lam, -1.0 * g, f0, budget,
                              init_step=2.0 * step_hint, slope=gn * gn)
            if hit is not None:
                prev_f = f0
                p, f0, step = hit
                step_hint = step
                rep = objective(p, T, lam)
                budget.note_objective()
                if trace is not None:
                    trace.append(f=rep.f, L=rep.L, R=rep.R,
                                 step_kind="gradient", step_size=step,
                                 improvement=prev_f - f0,
                                 grad_norm=gn)
                continue
            # the line search cannot realize the descent the gradient
            # promises; fall through to the curvature probe
        direction, rho, _ = _negative_curvature(p, T, lam, tau2, nc_iters,
                                                nc_restarts, rng, budget)
        min_curv = rho if min_curv is None else min(min_curv, rho)
        if direction is None:
            if not math.isfinite(rho):
                # the budget died before any Rayleigh quotient came back
                return p, FindSospInfo(False, f0, gn, None, local_evals())
            return p, FindSospInfo(True, f0, gn, rho, local_evals())
        scale = max(2.0 * abs(rho), 1e-3)
        best = None
        for signed in (direction, -1.0 * direction):
            hit = _line_search(p, T, lam, signed, f0, budget,
                              init_step=scale, max_backtracks=25)
            if hit is not None and (best is None or hit[1] < best[1]):
                best = hit
        if best is None:
            # curvature below -tau2/2 that no step can realize at this
            # floating-point scale: accept the point as stationary
            return p, FindSospInfo(True, f0, gn, rho, local_evals())
        prev_f = f0
        p, f0, step = best
        rep = objective(p, T, lam)
        budget.note_objective()
        if trace is not None:
            trace.append(f=rep.f, L=rep.L, R=rep.R,
                         step_kind="negative-curvature", step_size=step,
                         improvement=prev_f - f0, grad_norm=gn,
                         min_curvature=rho)


def find_sosp(p0: FactorPoint, T: np.ndarray, lam: float | None = None,
              tau1: float = 1e-6, tau2: float = 1e-4, budget: int = 10_000,
              seed: int = 0):
    """Descend from p0 to a point with gradient norm <= tau1 and estimated
    smallest Hessian eigenvalue >= -tau2.

    Returns (point, FindSospInfo); info.converged is False when the budget
    ran out first.
    """
    if lam is None:
        lam = default_lambda(p0.r)
    counter = GradBudget(budget)
    rng = np.random.default_rng(seed)
    return _find_sosp(p0, T, lam, tau1, tau2, counter, rng)


# ---------------------------------------------------------------------------
# the full driver


@dataclass
class RunResult:
    point: FactorPoint
    trace: SearchTrace
    status: str
    f: float
    L: float
    R: float
    grad_evals: int
    objective_evals: int
    rounds: int
    wall_time: float


def _deterministic_candidates(p, T, lam, splits):
    """Core-fix and remove-extraneous directions with their own step grid;
    a unit step is always included because both are exact at step 1 in the
    clean regime."""
    grid = np.geomspace(1e-4, 1.0, 17)
    out = []
    try:
        out.append(sign_flip_search(p, T, core_fix_direction(p, T, splits),
                                    grid, lam))
    except NoDirection:
        pass
    for mode in (1, 2, 3):
        try:
            direction = remove_extraneous_direction(p, splits, mode)
            out.append(sign_flip_search(p, T, direction, grid, lam))
        except NoDirection:
            pass
    return out


def run(T: np.ndarray, config: SearchConfig) -> RunResult:
    """Full local search on target T.  Returns the final point, the trace
    and the termination status: converged (f <= epsilon), no_direction
    (stationary and nothing improves), or budget."""
    t_start = time.perf_counter()
    config.validate()
    T = np.asarray(T, dtype=float)
    if T.ndim != 3 or len(set(T.shape)) != 1:
        raise ValueError(f"target must be a d x d x d tensor, got {T.shape}")
    if not np.all(np.isfinite(T)):
        raise ValueError("target contains non-finite entries")
    d = T.shape[0]
    r = config.r
    if r > d:
        raise ValueError(f"rank {r} exceeds dimension {d}")
    lam = config.lam if config.lam is not None else default_lambda(r)

    if config.mode == "theory":
        th = schedule(config.epsilon, r, d, config.k_bound)
        tau1, tau2, sigma = th.tau1, th.tau2, th.sigma
    else:
        tau1, tau2, sigma = config.tau1, config.tau2, config.sigma
    min_improvement = config.min_improvement
    samples = config.resolved_samples_per_block()

    seeds = np.random.SeedSequence(config.seed).spawn(3)
    rng_init = np.random.default_rng(seeds[0])
    rng_sosp = np.random.default_rng(seeds[1])
    rng_sampler = np.random.default_rng(seeds[2])

    kind, scale = _parse_init(config.init)
    if kind == "zero":
        p = FactorPoint.zeros(r, d)
    elif kind == "hosvd":
        p = hosvd(T, r)
    else:
        p = random_point(r, d, rng_init, scale=scale)

    budget = GradBudget(config.budget)
    trace = SearchTrace(seed=config.seed)
    rep = objective(p, T, lam)
    budget.note_objective()
    _require_finite(rep.f, "objective", trace)
    trace.append(f=rep.f, L=rep.L, R=rep.R, step_kind="init", step_size=0.0,
                 improvement=0.0)

    status = "converged" if rep.f <= config.epsilon else None
    rounds = 0
    while status is None:
        rounds += 1
        if rounds > config.max_rounds:
            status = "budget"
            break
        p, info = _find_sosp(p, T, lam, tau1, tau2, budget, rng_sosp,
                             trace=trace, eval_cap=config.sosp_eval_cap)
        rep = objective(p, T, lam)
        budget.note_objective()
        if rep.f <= config.epsilon:
            status = "converged"
            break
        if budget.exhausted:
            status = "budget"
            break

        splits = subspace_split(p, T, sigma)
        best = None
        for cand in _deterministic_candidates(p, T, lam, splits):
            budget.note_objective(35)
            if best is None or cand.improvement > best.improvement:
                best = cand
        for ijk in SAMPLED_BLOCKS:
            n_missing = sum(1 for x in ijk if x == 2)
            grid = delta_grid(sigma, n_missing, config.delta_span,
                              config.delta_points)
            for _ in range(samples):
                try:
                    vec = sample_missing_directions(splits, ijk, rng_sampler)
                except NoMissingDirection:
                    break
                direction = build_sampled_direction(vec, sigma)
                cand = sign_flip_search(p, T, direction, grid, lam)
                budget.note_objective(len(grid) * 2 ** (1 + n_missing))
                if best is None or cand.improvement > best.improvement:
                    best = cand

        if best is not None and best.improvement >= min_improvement:
            p = best.apply(p)
            rep = objective(p, T, lam)
            budget.note_objective()
            _require_finite(rep.f, "objective", trace)
            kind_label = _KIND_LABELS.get(best.direction.kind,
                                          best.direction.kind)
            if best.direction.kind == "sampled":
                kind_label = "sampled" + str(best.direction.ijk).replace(" ", "")
            gn_out = info.grad_norm if math.isfinite(info.grad_norm) else None
            curv = info.min_curvature
            if curv is not None and not math.isfinite(curv):
                curv = None
            trace.append(f=rep.f, L=rep.L, R=rep.R, step_kind=kind_label,
                         step_size=best.step, improvement=best.improvement,
                         grad_norm=gn_out, min_curvature=curv)
            if rep.f <= config.epsilon:
                status = "converged"
        elif info.converged:
            status = "no_direction"
        elif budget.exhausted:
            status = "budget"
        # otherwise: descent had not finished, go around again

    return RunResult(point=p, trace=trace, status=status, f=rep.f, L=rep.L,
                     R=rep.R, grad_evals=budget.used,
                     objective_evals=budget.objective_evals, rounds=rounds,
                     wall_time=time.perf_counter() - t_start)
