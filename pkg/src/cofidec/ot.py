"""Discrete optimal transport over categorical token distributions.

Two solver families live here:

* exact linear programs (transport problem and the fixed-support
  barycenter), used as verification oracles on small supports;
* log-domain entropic solvers (Sinkhorn and iterative Bregman
  projections for barycenters), used on the decoding path.

All arithmetic is float64 and every function is pure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sps
from scipy.optimize import linprog

SUM_TOL = 1e-9
EXACT_SUPPORT_LIMIT = 64
BARYCENTER_SUPPORT_LIMIT = 8


class SupportMismatchError(ValueError):
    pass


class SupportTooLargeError(ValueError):
    pass


class UnderflowError(FloatingPointError):
    """A scaling vector of an entropic solver collapsed to a non-finite value."""


@dataclass(frozen=True, eq=False)
class Distribution:
    """Probability vector on an explicit, strictly increasing set of token ids."""

    probs: np.ndarray
    support_ids: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64).reshape(-1)
        ids = np.array(self.support_ids, dtype=np.int64).reshape(-1)
        if probs.shape != ids.shape:
            raise ValueError(f"probs has {probs.size} entries but support has {ids.size}")
        if probs.size == 0:
            raise ValueError("empty distribution")
        if not np.all(np.isfinite(probs)) or np.any(probs < 0):
            raise ValueError("probabilities must be finite and nonnegative")
        if abs(probs.sum() - 1.0) > SUM_TOL:
            raise ValueError(f"probabilities sum to {probs.sum():.17g}, not 1")
        if ids.size > 1 and np.any(np.diff(ids) <= 0):
            raise ValueError("support ids must be strictly increasing")
        if ids[0] < 0:
            raise ValueError("support ids must be nonnegative")
        probs.flags.writeable = False
        ids.flags.writeable = False
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "support_ids", ids)

    @classmethod
    def full(cls, probs) -> "Distribution":
        """Distribution over ids 0..len(probs)-1."""
        probs = np.asarray(probs, dtype=np.float64)
        return cls(probs, np.arange(probs.size))

    @classmethod
    def normalized(cls, weights, support_ids=None) -> "Distribution":
        w = np.asarray(weights, dtype=np.float64)
        if support_ids is None:
            support_ids = np.arange(w.size)
        return cls(w / w.sum(), support_ids)

    @classmethod
    def dirac(cls, token_id: int, support_ids) -> "Distribution":
        ids = np.asarray(support_ids, dtype=np.int64)
        probs = (ids == token_id).astype(np.float64)
        if probs.sum() != 1.0:
            raise ValueError(f"token {token_id} not in support")
        return cls(probs, ids)

    @property
    def size(self) -> int:
        return int(self.probs.size)

    def prob(self, token_id: int) -> float:
        idx = np.searchsorted(self.support_ids, token_id)
        if idx < self.size and self.support_ids[idx] == token_id:
            return float(self.probs[idx])
        return 0.0

    def argmax(self) -> int:
        return int(self.support_ids[int(np.argmax(self.probs))])

    def __eq__(self, other):
        if not isinstance(other, Distribution):
            return NotImplemented
        return np.array_equal(self.support_ids, other.support_ids) and np.array_equal(
            self.probs, other.probs
        )

    def __repr__(self):
        pairs = ", ".join(f"{i}: {p:.4g}" for i, p in zip(self.support_ids, self.probs))
        return f"Distribution({{{pairs}}})"


def total_variation(p: Distribution, q: Distribution) -> float:
    _check_same_support(p, q)
    return 0.5 * float(np.abs(p.probs - q.probs).sum())


@dataclass(frozen=True, eq=False)
class GroundMetric:
    """Symmetric nonnegative cost matrix indexed by token id."""

    costs: np.ndarray

    def __post_init__(self):
        c = np.array(self.costs, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] == 0:
            raise ValueError(f"cost matrix must be square and nonempty, got shape {c.shape}")
        if not np.all(np.isfinite(c)) or np.any(c < 0):
            raise ValueError("costs must be finite and nonnegative")
        if np.any(np.diag(c) != 0):
            raise ValueError("cost diagonal must be zero")
        if not np.array_equal(c, c.T):
            raise ValueError("cost matrix must be symmetric")
        c.flags.writeable = False
        object.__setattr__(self, "costs", c)

    @property
    def size(self) -> int:
        return int(self.costs.shape[0])

    def restrict(self, support_ids) -> np.ndarray:
        ids = np.asarray(support_ids, dtype=np.int64)
        if ids.size and ids[-1] >= self.size:
            raise SupportMismatchError(
                f"metric covers {self.size} tokens but support references id {int(ids[-1])}"
            )
        return self.costs[np.ix_(ids, ids)]

    def __eq__(self, other):
        if not isinstance(other, GroundMetric):
            return NotImplemented
        return np.array_equal(self.costs, other.costs)


@dataclass(frozen=True)
class TransportPlan:
    mass: np.ndarray
    row_marginal_err: float
    col_marginal_err: float


@dataclass(frozen=True)
class SinkhornConfig:
    """Entropic solver settings.

    ``tol`` is measured in total-variation units. ``min_prob`` defaults to
    ``1e-8 / support_size`` when left as ``None``. With ``scaling`` set, the
    solvers anneal epsilon geometrically from the largest cost down to
    ``epsilon`` (factor ``scaling`` per stage), warm-starting the dual
    potentials; ``max_iter`` bounds the total over all stages.
    """

    epsilon: float = 0.01
    max_iter: int = 20000
    tol: float = 1e-7
    min_prob: float | None = None
    scaling: float | None = 0.5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.min_prob is not None and not self.min_prob > 0:
            raise ValueError("min_prob must be positive")
        if self.scaling is not None and not 0 < self.scaling < 1:
            raise ValueError("scaling factor must lie in (0, 1)")

    def floor_for(self, support_size: int) -> float:
        floor = 1e-8 / support_size if self.min_prob is None else self.min_prob
        if not floor < 1.0 / support_size:
            raise ValueError(f"min_prob {floor} must be below 1/{support_size}")
        return floor


@dataclass(frozen=True)
class SinkhornResult:
    plan: TransportPlan
    cost: float
    iterations: int
    converged: bool


@dataclass(frozen=True)
class BarycenterResult:
    barycenter: Distribution
    objective: float
    iterations: int = 0
    converged: bool = True


METRIC_KINDS = ("squared_euclidean", "euclidean", "zero_one")


def build_ground_metric(embeddings, kind: str = "squared_euclidean") -> GroundMetric:
    """Pairwise token costs from per-token embedding vectors.

    ``kind`` is one of ``squared_euclidean``, ``euclidean`` or ``zero_one``;
    the last ignores the vectors and charges 1 for every off-diagonal move.
    """
    if len(embeddings) == 0:
        raise ValueError("no embeddings given")
    dims = {len(np.atleast_1d(e)) for e in embeddings}
    if len(dims) != 1:
        raise ValueError(f"embeddings have mismatched dimensions {sorted(dims)}")
    x = np.array([np.atleast_1d(e) for e in embeddings], dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least two embeddings")
    if kind == "zero_one":
        return GroundMetric(1.0 - np.eye(n))
    diff = x[:, None, :] - x[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    if kind == "squared_euclidean":
        costs = sq
    elif kind == "euclidean":
        costs = np.sqrt(sq)
    else:
        raise ValueError(f"unknown metric kind {kind!r}")
    costs = 0.5 * (costs + costs.T)
    np.fill_diagonal(costs, 0.0)
    return GroundMetric(costs)


def _check_same_support(*dists: Distribution):
    ref = dists[0].support_ids
    for d in dists[1:]:
        if not np.array_equal(d.support_ids, ref):
            raise SupportMismatchError("distributions must share the same support ids")


def _exact_mass(p: Distribution) -> np.ndarray:
    return p.probs / p.probs.sum()


def _marginal_errors(mass: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    return (
        0.5 * float(np.abs(mass.sum(axis=1) - a).sum()),
        0.5 * float(np.abs(mass.sum(axis=0) - b).sum()),
    )


# Dual simplex returns vertex solutions, which keeps results deterministic and sparse.
# Presolve is off: with masses near the feasibility tolerance it can declare
# feasible problems infeasible.
_LP_OPTIONS = {
    "presolve": False,
    "primal_feasibility_tolerance": 1e-10,
    "dual_feasibility_tolerance": 1e-10,
}


def _solve_lp(c, a_eq, b_eq):
    res = linprog(c, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs-ds", options=_LP_OPTIONS)
    if res.status != 0:
        raise RuntimeError(f"LP solver failed: {res.message}")
    return np.maximum(res.x, 0.0)


def _round_to_marginals(mass: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Project a nearly feasible plan onto the exact marginals (a, b).

    Rows and then columns are scaled down where they overshoot; the missing
    mass is added back as the normalized outer product of the deficits.
    """
    x = np.maximum(mass, 0.0)
    r = x.sum(axis=1)
    x *= np.minimum(1.0, np.divide(a, r, out=np.ones_like(a), where=r > 0))[:, None]
    c = x.sum(axis=0)
    x *= np.minimum(1.0, np.divide(b, c, out=np.ones_like(b), where=c > 0))[None, :]
    da = np.maximum(a - x.sum(axis=1), 0.0)
    db = np.maximum(b - x.sum(axis=0), 0.0)
    if da.sum() > 0:
        x += np.outer(da, db) / da.sum()
    return x


def _transport_constraints(n: int) -> tuple[sps.spmatrix, sps.spmatrix]:
    rows = sps.kron(sps.eye(n), np.ones((1, n)))
    cols = sps.kron(np.ones((1, n)), sps.eye(n))
    return rows, cols


def exact_wasserstein(
    p: Distribution,
    q: Distribution,
    metric: GroundMetric,
    max_support: int = EXACT_SUPPORT_LIMIT,
) -> tuple[float, TransportPlan]:
    """Unregularized transport cost and an optimal plan, via the transportation LP."""
    _check_same_support(p, q)
    n = p.size
    if n > max_support:
        raise SupportTooLargeError(f"support {n} exceeds exact limit {max_support}")
    c = metric.restrict(p.support_ids)
    a, b = _exact_mass(p), _exact_mass(q)
    if n == 1:
        mass = np.ones((1, 1))
    elif np.array_equal(a, b):
        # staying put is optimal and costs nothing
        mass = np.diag(a)
    else:
        rows, cols = _transport_constraints(n)
        # the last column constraint is implied by the others
        a_eq = sps.vstack([rows, cols.tocsr()[:-1]]).tocsr()
        b_eq = np.concatenate([a, b[:-1]])
        mass = _round_to_marginals(_solve_lp(c.ravel(), a_eq, b_eq).reshape(n, n), a, b)
    row_err, col_err = _marginal_errors(mass, p.probs, q.probs)
    cost = float((mass * c).sum())
    return cost, TransportPlan(mass, row_err, col_err)


def _eps_schedule(c: np.ndarray, cfg: SinkhornConfig) -> list[float]:
    eps = cfg.epsilon
    if cfg.scaling is None:
        return [eps]
    stages = []
    e = float(c.max())
    while e > eps:
        stages.append(e)
        e *= cfg.scaling
    return stages + [eps]


# Looser stopping rules for the warm-up stages of the epsilon schedule. The
# transport solver checks the true marginal violation, so a rough warm start
# is safe; the barycenter stops on successive change and needs a tight one.
_STAGE_TOL = 1e-3
_BARY_STAGE_TOL = 1e-6


def _floor(p: Distribution, floor: float) -> np.ndarray:
    x = np.maximum(p.probs, floor)
    return x / x.sum()


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def sinkhorn(
    p: Distribution,
    q: Distribution,
    metric: GroundMetric,
    cfg: SinkhornConfig = SinkhornConfig(),
) -> SinkhornResult:
    """Entropic OT with log-domain Sinkhorn updates.

    The reported cost is the sharp cost <plan, C>, without the entropy term.
    Iteration stops once the row-marginal violation (the column marginal is
    exact after each sweep) drops to ``cfg.tol``; otherwise the last iterate
    is returned with ``converged=False``.
    """
    _check_same_support(p, q)
    n = p.size
    c = metric.restrict(p.support_ids)
    floor = cfg.floor_for(n)
    a, b = _floor(p, floor), _floor(q, floor)
    log_a, log_b = np.log(a), np.log(b)
    schedule = _eps_schedule(c, cfg)
    f = np.zeros(n)
    g = np.zeros(n)
    converged = False
    total = 0
    for stage, eps in enumerate(schedule):
        final = stage == len(schedule) - 1
        tol = cfg.tol if final else max(cfg.tol, _STAGE_TOL)
        neg_c = -c / eps
        while total < cfg.max_iter:
            total += 1
            f = eps * (log_a - _lse(neg_c + g[None, :] / eps, axis=1))
            g = eps * (log_b - _lse(neg_c + f[:, None] / eps, axis=0))
            if total % 10 == 0 or total == cfg.max_iter:
                row = np.exp(_lse(neg_c + (f[:, None] + g[None, :]) / eps, axis=1))
                if 0.5 * np.abs(row - a).sum() <= tol:
                    converged = final
                    break
        if total >= cfg.max_iter:
            break
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
        raise UnderflowError("Sinkhorn potentials became non-finite")
    # potentials belong to the last stage reached, which is short of cfg.epsilon if the budget ran out
    mass = np.exp((f[:, None] + g[None, :] - c) / eps)
    row_err, col_err = _marginal_errors(mass, p.probs, q.probs)
    cost = float((mass * c).sum())
    return SinkhornResult(TransportPlan(mass, row_err, col_err), cost, total, converged)


def _validate_barycenter_inputs(dists, weights) -> np.ndarray:
    if len(dists) < 2:
        raise ValueError("a barycenter needs at least two distributions")
    _check_same_support(*dists)
    if weights is None:
        weights = np.full(len(dists), 1.0 / len(dists))
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(dists),):
        raise ValueError(f"expected {len(dists)} weights, got {w.size}")
    if np.any(w <= 0) or abs(w.sum() - 1.0) > SUM_TOL:
        raise ValueError("weights must be positive and sum to 1")
    return w


def _canonical_order(stack: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Input order that depends only on the (weight, distribution) multiset."""
    keys = np.column_stack([w, stack])
    return np.lexsort(keys.T[::-1])


def lp_barycenter(
    dists: Sequence[Distribution],
    weights=None,
    metric: GroundMetric | None = None,
    max_support: int = BARYCENTER_SUPPORT_LIMIT,
) -> BarycenterResult:
    """Fixed-support barycenter solved exactly as one joint LP.

    Variables are one coupling per input plus the free common marginal;
    the objective is sum_k w_k <C, plan_k>. Inputs are put in a canonical
    order first, so the returned vertex does not depend on input order.
    """
    if metric is None:
        raise ValueError("a ground metric is required")
    w = _validate_barycenter_inputs(dists, weights)
    n = dists[0].size
    if n > max_support:
        raise SupportTooLargeError(f"support {n} exceeds barycenter LP limit {max_support}")
    ids = dists[0].support_ids
    c = metric.restrict(ids)
    stack = np.array([_exact_mass(d) for d in dists])
    order = _canonical_order(stack, w)
    stack, w = stack[order], w[order]
    k = len(dists)
    if n == 1:
        return BarycenterResult(Distribution(np.ones(1), ids), 0.0)

    rows, cols = _transport_constraints(n)
    nn = n * n
    blocks_row = sps.block_diag([rows] * k)
    neg_eye = sps.vstack([-sps.eye(n)] * k)
    a_rows = sps.hstack([blocks_row, neg_eye])
    blocks_col = sps.block_diag([cols] * k)
    a_cols = sps.hstack([blocks_col, sps.csr_matrix((k * n, n))])
    a_eq = sps.vstack([a_rows, a_cols]).tocsr()
    b_eq = np.concatenate([np.zeros(k * n), stack.ravel()])
    cost_vec = np.concatenate([np.concatenate([wk * c.ravel() for wk in w]), np.zeros(n)])
    x = _solve_lp(cost_vec, a_eq, b_eq)
    plans = x[: k * nn].reshape(k, n, n)
    bary = np.maximum(x[k * nn :], 0.0)
    bary = bary / bary.sum()
    objective = float(sum(wk * (pk * c).sum() for wk, pk in zip(w, plans)))
    return BarycenterResult(Distribution(bary, ids), objective)


def sinkhorn_barycenter(
    dists: Sequence[Distribution],
    weights=None,
    metric: GroundMetric | None = None,
    cfg: SinkhornConfig = SinkhornConfig(),
) -> BarycenterResult:
    """Entropic barycenter by iterative Bregman projections in the log domain.

    Each sweep fits every coupling's column marginal to its input, then
    replaces the shared row marginal by the weighted geometric mean of the
    couplings' row marginals. Stops when successive barycenters are within
    ``cfg.tol`` in total variation.

    ``objective`` is sum_k w_k <C, plan_k> of the final couplings.
    """
    if metric is None:
        raise ValueError("a ground metric is required")
    w = _validate_barycenter_inputs(dists, weights)
    n = dists[0].size
    ids = dists[0].support_ids
    c = metric.restrict(ids)
    floor = cfg.floor_for(n)
    stack = np.array([_floor(d, floor) for d in dists])
    order = _canonical_order(stack, w)
    stack, w = stack[order], w[order]
    k = len(dists)
    log_p = np.log(stack)
    schedule = _eps_schedule(c, cfg)
    # dual potentials eps*log u_k and eps*log v_k, one row per input
    f = np.zeros((k, n))
    g = np.zeros((k, n))
    bary = np.full(n, 1.0 / n)
    converged = False
    total = 0
    for stage, eps in enumerate(schedule):
        final = stage == len(schedule) - 1
        tol = cfg.tol if final else max(cfg.tol, _BARY_STAGE_TOL)
        neg_c = -c / eps
        log_u = f / eps
        while total < cfg.max_iter:
            total += 1
            # log (K^T u_k)_j = lse_i(-C_ij/eps + log u_k,i)
            log_v = log_p - _lse(neg_c[None, :, :] + log_u[:, :, None], axis=1)
            log_kv = _lse(neg_c[None, :, :] + log_v[:, None, :], axis=2)
            log_b = w @ (log_u + log_kv)
            log_u = log_b[None, :] - log_kv
            new_bary = np.exp(log_b - _lse(log_b, axis=0))
            if not (np.all(np.isfinite(new_bary)) and np.all(np.isfinite(log_u))):
                raise UnderflowError("barycenter scaling vectors collapsed")
            delta = 0.5 * np.abs(new_bary - bary).sum()
            bary = new_bary
            if delta <= tol:
                converged = final
                break
        f, g = eps * log_u, eps * log_v
        if total >= cfg.max_iter:
            break
    plans = np.exp((f[:, :, None] + g[:, None, :] - c[None, :, :]) / eps)
    objective = float(sum(wk * (pk * c).sum() for wk, pk in zip(w, plans)))
    return BarycenterResult(Distribution(bary, ids), objective, total, converged)


def barycenter_objective(
    candidate: Distribution, dists: Sequence[Distribution], weights, metric: GroundMetric
) -> float:
    """sum_k w_k W(candidate, P_k) with the exact solver."""
    w = _validate_barycenter_inputs(dists, weights)
    return float(sum(wk * exact_wasserstein(candidate, d, metric)[0] for wk, d in zip(w, dists)))
