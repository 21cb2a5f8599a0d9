"""Bernoulli KL divergence, its inverse, and the grouped Gaussian KL."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

# Upper end of the bisection bracket; kl(q||1) is infinite for q < 1.
P_CEIL = 1.0 - 1e-15


def bernoulli_kl(q: float, p: float) -> float:
    """kl(q || p) between Bernoulli(q) and Bernoulli(p), with 0 log 0 = 0.

    Returns ``math.inf`` when p sits on an endpoint that q does not match.
    """
    if not (0.0 <= q <= 1.0 and 0.0 <= p <= 1.0):
        raise ValueError(f"arguments must lie in [0, 1], got q={q}, p={p}")
    if q == 0.0:
        return math.inf if p == 1.0 else -math.log1p(-p)
    if q == 1.0:
        return math.inf if p == 0.0 else -math.log(p)
    if p == 0.0 or p == 1.0:
        return math.inf
    d = p - q
    if abs(d) < 0.5 * min(q, 1.0 - q):
        # near p = q the two terms cancel to O(d^2); the log1p form keeps it
        head = -q * math.log1p(d / q)
        tail = -(1.0 - q) * math.log1p(-d / (1.0 - q))
    else:
        head = q * math.log(q / p)
        tail = (1.0 - q) * (math.log1p(-q) - math.log1p(-p))
    return max(head + tail, 0.0)


def kl_inverse(q: float, c: float, tol: float = 1e-12, max_iter: int = 200) -> float:
    """Largest p in [q, 1] with kl(q || p) <= c, by bisection.

    Stops once the bracket is narrower than ``tol`` and kl(q || p) at its
    upper end is within ``tol`` of c. The upper end is returned, so the result
    never undershoots the true supremum. ``tol=0`` bisects to float adjacency.
    """
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    if c < 0.0 or math.isnan(c):
        raise ValueError(f"c must be nonnegative, got {c}")
    if c == 0.0 or q == 1.0:
        return q
    if c >= bernoulli_kl(q, P_CEIL):
        return 1.0
    lo, hi = q, P_CEIL
    kl_hi = math.inf
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        kl_mid = bernoulli_kl(q, mid)
        if kl_mid > c:
            hi, kl_hi = mid, kl_mid
        else:
            lo = mid
        # near p = 1 the divergence is steep, so both gaps must close
        if hi - lo <= tol and kl_hi - c <= tol:
            break
    return hi


def pinsker_upper(q: float, c: float) -> float:
    """Explicit (possibly > 1) upper bound q + sqrt(c/2) on kl_inverse(q, c)."""
    if c < 0.0:
        raise ValueError(f"c must be nonnegative, got {c}")
    return q + math.sqrt(c / 2.0)


def kl_inverse_grad(q: float, c: float, tol: float = 0.0) -> tuple[float, float]:
    """Implicit derivatives (d/dq, d/dc) of kl_inverse at an interior point.

    Differentiates kl(q || p) = c in p; both derivatives are positive.
    """
    if not (0.0 < q < 1.0) or c <= 0.0:
        raise ValueError(f"kl_inverse is not differentiable at q={q}, c={c}")
    p = kl_inverse(q, c, tol=tol)
    if p >= 1.0:
        # Saturated at the ceiling; locally constant.
        return 0.0, 0.0
    scale = p * (1.0 - p) / (p - q)
    dq = -scale * (math.log(q / p) + math.log1p(-p) - math.log1p(-q))
    return dq, scale


@dataclass(frozen=True)
class GroupedGaussianSpec:
    """Diagonal Gaussian posterior N(w, diag s) against a grouped prior N(w0, diag Lambda).

    ``partition`` lists disjoint index arrays covering ``range(len(w))``;
    group j has prior variance ``lam[j]`` on every one of its indices.
    """

    w: np.ndarray
    s: np.ndarray
    w0: np.ndarray
    partition: tuple[np.ndarray, ...]
    lam: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float))
        object.__setattr__(self, "s", np.asarray(self.s, dtype=float))
        object.__setattr__(self, "w0", np.asarray(self.w0, dtype=float))
        object.__setattr__(self, "lam", np.atleast_1d(np.asarray(self.lam, dtype=float)))
        object.__setattr__(
            self, "partition", tuple(np.asarray(ix, dtype=int) for ix in self.partition)
        )
        p = self.w.size
        if self.s.size != p or self.w0.size != p:
            raise ValueError("w, s and w0 must have the same length")
        if len(self.partition) != self.lam.size:
            raise ValueError("one prior variance per group is required")
        covered = np.sort(np.concatenate(self.partition)) if self.partition else np.array([])
        if covered.size != p or not np.array_equal(covered, np.arange(p)):
            raise ValueError("partition must be a disjoint cover of the weight indices")

    @property
    def n_groups(self) -> int:
        return self.lam.size

    def prior_variance(self) -> np.ndarray:
        """Per-coordinate prior variance diag(Lambda)."""
        return expand_groups(self.lam, self.partition, self.w.size)


def expand_groups(values: np.ndarray, partition: Sequence[np.ndarray], size: int) -> np.ndarray:
    out = np.empty(size)
    for value, ix in zip(values, partition):
        out[ix] = value
    return out


def gaussian_kl_grouped(spec: GroupedGaussianSpec) -> float:
    """KL(N(w, diag s) || N(w0, diag Lambda)) in the grouped closed form."""
    if np.any(spec.s <= 0.0) or np.any(spec.lam <= 0.0):
        raise ValueError("posterior and prior variances must be strictly positive")
    total = -0.5 * (spec.w.size + np.sum(np.log(spec.s)))
    diff = spec.w - spec.w0
    for lam_j, ix in zip(spec.lam, spec.partition):
        total += 0.5 * (
            np.sum(spec.s[ix]) / lam_j + np.dot(diff[ix], diff[ix]) / lam_j + ix.size * math.log(lam_j)
        )
    return max(float(total), 0.0)
