"""Entropic optimal transport between feature maps.

Every pixel is a sample with uniform mass, the ground cost is the squared
Euclidean distance between pixel vectors, and the entropic problem

.. math::
    \\min_T \\langle C, T \\rangle + \\beta \\sum_{ij} T_{ij} \\log T_{ij}
    \\quad \\text{s.t.} \\quad T 1 = \\mu, \\; T^\\top 1 = \\nu, \\; T \\ge 0

is solved by Sinkhorn scaling. Exact solvers (assignment and brute-force
enumeration) serve as the small-beta oracle, and the squared distance between
mean vectors gives a cheap lower bound for pruning.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import xlogy

from .errors import MarginalError, NumericalError, ParamError, ShapeError, SizeError
from .features import FeatureMap

DEFAULT_SIZE_CAP = 4096
DEFAULT_BETA_REL = 0.05
BRUTE_FORCE_MAX_N = 8

# beta annealing (log domain only); see anneal_schedule
ANNEAL_TRIGGER = 1000.0
ANNEAL_START = 50.0
ANNEAL_FACTOR = 4.0

# Upper bound on the scratch array used while building a cost matrix.
_COST_CHUNK_ELEMS = 1 << 22


class Mode(enum.Enum):
    SINKHORN = "sinkhorn"
    EXACT = "exact"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, Mode):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ParamError(f"unknown solver mode {value!r}, expected 'sinkhorn' or 'exact'") from None


@dataclass(frozen=True)
class OTParams:
    """Solver settings.

    ``beta`` is an absolute entropy weight; ``beta_rel`` scales the mean cost
    instead. At most one may be given. With neither, ``beta_rel`` defaults to
    0.05. ``anneal`` warm-starts very small betas from a coarser one (log
    domain only; it never triggers where the naive kernel is free of underflow).
    """

    beta: float | None = None
    beta_rel: float | None = None
    max_iters: int = 1000
    tol: float = 1e-6
    log_domain: bool = True
    mode: Mode = Mode.SINKHORN
    anneal: bool = True

    def __post_init__(self):
        if self.beta is not None and self.beta_rel is not None:
            raise ParamError("beta and beta_rel are mutually exclusive")
        for name in ("beta", "beta_rel"):
            value = getattr(self, name)
            if value is not None and not (math.isfinite(value) and value > 0):
                raise ParamError(f"{name} must be a positive finite float, got {value!r}")
        if isinstance(self.max_iters, bool) or int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ParamError(f"max_iters must be a positive integer, got {self.max_iters!r}")
        if not (math.isfinite(self.tol) and self.tol > 0):
            raise ParamError(f"tol must be a positive float, got {self.tol!r}")
        object.__setattr__(self, "mode", Mode.parse(self.mode))

    def resolve_beta(self, C: np.ndarray) -> float:
        if self.beta is not None:
            return float(self.beta)
        rel = DEFAULT_BETA_REL if self.beta_rel is None else self.beta_rel
        scale = float(np.mean(C))
        # An all-zero cost has no scale; any coupling is optimal, so use rel itself.
        return rel * scale if scale > 0 else float(rel)


@dataclass(frozen=True)
class TransportPlan:
    values: np.ndarray
    mu: np.ndarray
    nu: np.ndarray

    @property
    def n_src(self) -> int:
        return self.values.shape[0]

    @property
    def n_dst(self) -> int:
        return self.values.shape[1]

    def marginal_violation(self) -> float:
        return _violation(self.values, self.mu, self.nu)

    def neg_entropy(self) -> float:
        return float(np.sum(xlogy(self.values, self.values)))


@dataclass(frozen=True)
class OTResult:
    transport_cost: float
    regularized_objective: float
    iterations: int
    converged: bool
    marginal_violation: float
    beta: float = 0.0
    plan: TransportPlan | None = None

    def without_plan(self) -> "OTResult":
        if self.plan is None:
            return self
        return OTResult(
            self.transport_cost,
            self.regularized_objective,
            self.iterations,
            self.converged,
            self.marginal_violation,
            self.beta,
        )


def _violation(P, mu, nu) -> float:
    return float(max(np.max(np.abs(P.sum(axis=1) - mu)), np.max(np.abs(P.sum(axis=0) - nu))))


def _check_cost(C) -> np.ndarray:
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] < 1 or C.shape[1] < 1:
        raise ShapeError(f"cost matrix must be a non-empty 2-D array, got shape {C.shape}")
    if not np.isfinite(C).all():
        raise ParamError("cost matrix contains non-finite entries")
    if (C < 0).any():
        raise ParamError("cost matrix contains negative entries")
    return C


def _check_marginal(p, n, name) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] != n:
        raise MarginalError(f"{name} must have length {n}, got shape {p.shape}")
    if not np.isfinite(p).all() or (p <= 0).any():
        raise MarginalError(f"{name} must have strictly positive finite entries")
    if abs(math.fsum(p) - 1.0) > 1e-9:
        raise MarginalError(f"{name} must sum to 1, sums to {math.fsum(p)!r}")
    return p


def pairwise_sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``out[i, j] = sum_c (x[i, c] - y[j, c])**2`` in float64.

    Differences are formed explicitly, never through the ``|x|^2 + |y|^2 - 2xy``
    expansion, so translating both inputs leaves the result unchanged up to
    rounding of the inputs themselves.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = x.shape
    m = y.shape[0]
    out = np.empty((n, m))
    step = max(1, _COST_CHUNK_ELEMS // max(1, m * d))
    for start in range(0, n, step):
        diff = x[start:start + step, None, :] - y[None, :, :]
        np.einsum("ijk,ijk->ij", diff, diff, out=out[start:start + step])
    return out


def _check_size(fm: FeatureMap, size_cap: int | None):
    if size_cap is not None and fm.n_pixels > size_cap:
        raise SizeError(
            f"feature map {fm.id!r} has {fm.n_pixels} pixels, above the size cap of {size_cap}; "
            "reduce it with avg_pool (--pool) or raise the cap"
        )


def cost_matrix(a: FeatureMap, b: FeatureMap, size_cap: int | None = DEFAULT_SIZE_CAP) -> np.ndarray:
    """Squared-L2 cost between the pixels of ``a`` (rows) and ``b`` (columns)."""
    if a.dim != b.dim:
        raise ShapeError(f"channel mismatch: {a.id!r} has d={a.dim}, {b.id!r} has d={b.dim}")
    _check_size(a, size_cap)
    _check_size(b, size_cap)
    return pairwise_sq_dists(a.pixels(), b.pixels())


def uniform_marginal(n: int) -> np.ndarray:
    if n < 1:
        raise ShapeError(f"marginal length must be >= 1, got {n}")
    return np.full(n, 1.0 / n)


def _lse(M: np.ndarray, axis: int) -> np.ndarray:
    mx = M.max(axis=axis, keepdims=True)
    out = np.log(np.exp(M - mx).sum(axis=axis, keepdims=True)) + mx
    return out.squeeze(axis)


def _sinkhorn_log(S, log_mu, log_nu, nu, max_iters, tol, g=None):
    g = np.zeros(S.shape[1]) if g is None else g
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        f = log_mu - _lse(S + g[None, :], axis=1)
        # Column sums of the row-feasible plan are exp(L + g); reuse L for the update.
        L = _lse(S + f[:, None], axis=0)
        err = np.max(np.abs(np.exp(L + g) - nu))
        if err <= tol:
            converged = True
            break
        g = log_nu - L
    return f, g, it, converged


def anneal_schedule(C: np.ndarray, beta: float) -> list[float]:
    """Decreasing entropy weights ending at ``beta``.

    Only used when ``range(C) / beta`` exceeds ``ANNEAL_TRIGGER``; the first
    stage has ``range(C) / beta <= ANNEAL_START`` and each later stage divides
    beta by ``ANNEAL_FACTOR``. Depends on C only through its range, so shifting
    or permuting C leaves the schedule unchanged.
    """
    spread = float(C.max() - C.min())
    if spread <= ANNEAL_TRIGGER * beta:
        return [beta]
    betas = [beta]
    while spread > ANNEAL_START * betas[-1]:
        betas.append(betas[-1] * ANNEAL_FACTOR)
    return betas[::-1]


def _sinkhorn_log_annealed(C, beta, mu, nu, max_iters, tol):
    log_mu, log_nu = np.log(mu), np.log(nu)
    betas = anneal_schedule(C, beta)
    warm_tol = max(tol, 0.1 * min(mu.min(), nu.min()))
    warm_budget = max_iters // 2
    used = 0
    G = None  # column potential in cost units, carried across stages
    for b in betas[:-1]:
        if used >= warm_budget:
            break
        _, g, it, _ = _sinkhorn_log(-C / b, log_mu, log_nu, nu, warm_budget - used, warm_tol,
                                    None if G is None else G / b)
        used += it
        G = g * b
    S = -C / beta
    f, g, it, converged = _sinkhorn_log(S, log_mu, log_nu, nu, max_iters - used, tol,
                                        None if G is None else G / beta)
    return np.exp(S + f[:, None] + g[None, :]), used + it, converged


def _sinkhorn_naive(S, mu, nu, max_iters, tol):
    K = np.exp(S)
    v = np.ones(S.shape[1])
    converged = False
    it = 0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for it in range(1, max_iters + 1):
            Kv = K @ v
            if not (np.isfinite(Kv).all() and (Kv > 0).all()):
                raise NumericalError(
                    "kernel exp(-C/beta) underflows in naive mode; enable log_domain or increase beta"
                )
            u = mu / Kv
            Ktu = K.T @ u
            if not (np.isfinite(Ktu).all() and (Ktu > 0).all()):
                raise NumericalError(
                    "kernel exp(-C/beta) underflows in naive mode; enable log_domain or increase beta"
                )
            err = np.max(np.abs(v * Ktu - nu))
            if err <= tol:
                converged = True
                break
            v = nu / Ktu
    return u[:, None] * K * v[None, :], it, converged


def sinkhorn(C, mu, nu, params: OTParams | None = None, keep_plan: bool = True) -> OTResult:
    """Entropic OT by alternating row and column scaling.

    Parameters
    ----------
    C : array-like, shape (n_src, n_dst)
        Nonnegative cost matrix.
    mu, nu : array-like
        Strictly positive source and target marginals, each summing to 1.
    params : OTParams
        Entropy weight, stopping rule and stabilization mode.
    keep_plan : bool
        Attach the transport plan to the result.

    Returns
    -------
    OTResult
        ``transport_cost`` is <C, T>; the entropy term only enters
        ``regularized_objective``. Running out of iterations is reported via
        ``converged=False`` rather than raised.
    """
    params = params or OTParams()
    C = _check_cost(C)
    mu = _check_marginal(mu, C.shape[0], "mu")
    nu = _check_marginal(nu, C.shape[1], "nu")
    beta = params.resolve_beta(C)
    if not beta > 0:
        raise ParamError(f"beta must be positive, got {beta!r}")
    if params.log_domain and params.anneal:
        P, it, converged = _sinkhorn_log_annealed(C, beta, mu, nu, params.max_iters, params.tol)
    elif params.log_domain:
        S = -C / beta
        f, g, it, converged = _sinkhorn_log(S, np.log(mu), np.log(nu), nu, params.max_iters, params.tol)
        P = np.exp(S + f[:, None] + g[None, :])
    else:
        P, it, converged = _sinkhorn_naive(-C / beta, mu, nu, params.max_iters, params.tol)
    violation = _violation(P, mu, nu)
    converged = converged and violation <= params.tol
    plan = TransportPlan(P, mu, nu)
    cost = float(np.sum(P * C))
    objective = cost + beta * plan.neg_entropy()
    return OTResult(cost, objective, it, converged, violation, beta, plan if keep_plan else None)


def _permutation_result(C, perm) -> OTResult:
    n = C.shape[0]
    cost = math.fsum(C[i, perm[i]] for i in range(n)) / n
    P = np.zeros_like(C)
    P[np.arange(n), perm] = 1.0 / n
    u = uniform_marginal(n)
    plan = TransportPlan(P, u, u)
    return OTResult(cost, cost, 0, True, plan.marginal_violation(), 0.0, plan)


def _check_square(C) -> np.ndarray:
    C = _check_cost(C)
    if C.shape[0] != C.shape[1]:
        raise ShapeError(f"exact OT needs equal pixel counts, got {C.shape[0]}x{C.shape[1]}")
    return C


def exact_ot_assignment(C) -> OTResult:
    """Unregularized OT with equal uniform marginals, solved as an assignment.

    With n sources and n targets of mass 1/n each, an optimal plan sits on a
    vertex of the Birkhoff polytope, i.e. a permutation scaled by 1/n.
    """
    C = _check_square(C)
    rows, cols = linear_sum_assignment(C)
    perm = np.empty(C.shape[0], dtype=np.intp)
    perm[rows] = cols
    return _permutation_result(C, perm)


def brute_force_ot(C) -> OTResult:
    """Enumerate all n! permutations (n <= 8). Test oracle only."""
    C = _check_square(C)
    n = C.shape[0]
    if n > BRUTE_FORCE_MAX_N:
        raise SizeError(f"brute force is limited to n <= {BRUTE_FORCE_MAX_N}, got n={n}")
    best, best_perm = math.inf, None
    for perm in itertools.permutations(range(n)):
        total = math.fsum(C[i, perm[i]] for i in range(n))
        if total < best:
            best, best_perm = total, perm
    return _permutation_result(C, np.asarray(best_perm, dtype=np.intp))


def squared_mean_gap(mean_a, mean_b) -> float:
    diff = np.asarray(mean_a, dtype=np.float64) - np.asarray(mean_b, dtype=np.float64)
    return float(diff @ diff)


def mean_lower_bound(a: FeatureMap, b: FeatureMap) -> float:
    """``|mean(a) - mean(b)|^2``, a lower bound on the squared-L2 OT cost.

    For any coupling T with uniform marginals, Jensen gives
    ``sum T_ij |a_i - b_j|^2 >= |sum T_ij (a_i - b_j)|^2 = |mean(a) - mean(b)|^2``.
    """
    if a.dim != b.dim:
        raise ShapeError(f"channel mismatch: {a.id!r} has d={a.dim}, {b.id!r} has d={b.dim}")
    return squared_mean_gap(a.mean_vector(), b.mean_vector())


def ot_distance(
    a: FeatureMap,
    b: FeatureMap,
    params: OTParams | None = None,
    mode=None,
    size_cap: int | None = DEFAULT_SIZE_CAP,
    keep_plan: bool = False,
) -> OTResult:
    """Pixel-level OT between two feature maps with uniform pixel weights.

    ``mode`` overrides ``params.mode``. Rank by ``transport_cost``.
    """
    params = params or OTParams()
    mode = params.mode if mode is None else Mode.parse(mode)
    C = cost_matrix(a, b, size_cap=size_cap)
    if mode is Mode.EXACT:
        if a.n_pixels != b.n_pixels:
            raise ShapeError(
                f"exact mode needs equal pixel counts, got {a.n_pixels} ({a.id!r}) and {b.n_pixels} ({b.id!r})"
            )
        result = exact_ot_assignment(C)
    else:
        result = sinkhorn(C, uniform_marginal(a.n_pixels), uniform_marginal(b.n_pixels), params)
    return result if keep_plan else result.without_plan()
