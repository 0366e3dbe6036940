"""Per-step fusion of the three conditional next-token distributions."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .ot import (
    BARYCENTER_SUPPORT_LIMIT,
    Distribution,
    GroundMetric,
    SinkhornConfig,
    SupportMismatchError,
    SupportTooLargeError,
    exact_wasserstein,
    lp_barycenter,
    sinkhorn,
    sinkhorn_barycenter,
)

SOLVERS = ("exact_lp", "sinkhorn")


@dataclass(frozen=True)
class FusionConfig:
    weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    top_k: int = 32
    smoothing_alpha: float = 1e-6
    solver: str = "sinkhorn"
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        if len(w) != 3 or any(x <= 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"fusion weights must be three positive reals summing to 1, got {w}")
        object.__setattr__(self, "weights", w)
        if self.top_k < 1:
            raise ValueError("top_k must be at least 1")
        if not 0 <= self.smoothing_alpha < 1:
            raise ValueError("smoothing_alpha must lie in [0, 1)")
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}; expected one of {SOLVERS}")


@dataclass(frozen=True)
class FusedStep:
    fused: Distribution
    restricted_support: tuple[int, ...]
    per_source_cost: tuple[float, float, float]
    solver_status: str  # "converged" | "truncated"
    top_k_clamped: bool = False


def _top_ids(p: Distribution, k: int) -> np.ndarray:
    # zero-mass ids are never "top"; stable sort keeps lower ids first on ties
    order = np.argsort(-p.probs, kind="stable")
    order = order[p.probs[order] > 0]
    return p.support_ids[order[:k]]


def restrict_support(p_v: Distribution, p_c: Distribution, p_f: Distribution, top_k: int):
    """Restrict all three sources to the union of their top-k ids.

    Returns ``(restricted, support_ids, clamped)`` where ``restricted`` holds
    the three renormalized distributions on the sorted common support and
    ``clamped`` reports that ``top_k`` exceeded the vocabulary.
    """
    sources = (p_v, p_c, p_f)
    vocab = p_v.support_ids
    for p in sources[1:]:
        if not np.array_equal(p.support_ids, vocab):
            raise SupportMismatchError("sources must be over the same vocabulary")
    clamped = top_k > vocab.size
    if clamped:
        warnings.warn(f"top_k={top_k} exceeds vocabulary size {vocab.size}; clamped", stacklevel=2)
        top_k = vocab.size
    support = np.unique(np.concatenate([_top_ids(p, top_k) for p in sources]))
    idx = np.searchsorted(vocab, support)
    restricted = tuple(Distribution.normalized(p.probs[idx], support) for p in sources)
    return restricted, support, clamped


def smooth(p: Distribution, alpha: float) -> Distribution:
    """Mix ``p`` with the uniform distribution on its own support."""
    if not 0 <= alpha < 1:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    if alpha == 0:
        return p
    mixed = (1 - alpha) * p.probs + alpha / p.size
    return Distribution(mixed / mixed.sum(), p.support_ids)


def fuse_distributions(
    p_v: Distribution,
    p_c: Distribution,
    p_f: Distribution,
    metric: GroundMetric,
    cfg: FusionConfig = FusionConfig(),
) -> FusedStep:
    """Barycenter of the three sources after support restriction and smoothing."""
    vocab = p_v.support_ids
    if metric.size <= int(vocab[-1]):
        raise SupportMismatchError(
            f"metric covers {metric.size} tokens, vocabulary needs {int(vocab[-1]) + 1}"
        )
    restricted, support, clamped = restrict_support(p_v, p_c, p_f, cfg.top_k)
    sources = [smooth(p, cfg.smoothing_alpha) for p in restricted]

    if cfg.solver == "exact_lp":
        if support.size > BARYCENTER_SUPPORT_LIMIT:
            raise SupportTooLargeError(
                f"exact_lp fusion needs a restricted support of at most "
                f"{BARYCENTER_SUPPORT_LIMIT} ids, got {support.size}"
            )
        result = lp_barycenter(sources, cfg.weights, metric)
        fused = result.barycenter
        costs = tuple(exact_wasserstein(fused, s, metric)[0] for s in sources)
        status = "converged"
    else:
        result = sinkhorn_barycenter(sources, cfg.weights, metric, cfg.sinkhorn)
        fused = result.barycenter
        runs = [sinkhorn(fused, s, metric, cfg.sinkhorn) for s in sources]
        costs = tuple(r.cost for r in runs)
        ok = result.converged and all(r.converged for r in runs)
        status = "converged" if ok else "truncated"
    return FusedStep(fused, tuple(int(i) for i in support), costs, status, clamped)
