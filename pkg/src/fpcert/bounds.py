"""Risk bounds, prior-grid handling, worst-case rates and confidence accounting."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .kl import GroupedGaussianSpec, gaussian_kl_grouped, kl_inverse

METRICS = ("fp_residual", "mse", "nmse")
METHODS = ("sample_convergence", "pac_bayes", "worst_case", "combined")

# |a - round(a)| allowed when checking that a prior variance sits on the grid.
GRID_TOL = 1e-6


@dataclass(frozen=True)
class Certificate:
    metric_id: str
    k: int
    epsilon: float
    empirical_risk: float
    risk_bound: float
    confidence: float
    method: str
    n_samples: int
    h_samples: int = 1
    r_bar: Optional[float] = None

    def __post_init__(self):
        if self.metric_id not in METRICS:
            raise ValueError(f"unknown metric {self.metric_id!r}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError(f"confidence must lie in (0, 1), got {self.confidence}")
        if self.method in ("sample_convergence", "pac_bayes") and self.risk_bound < self.empirical_risk:
            raise ValueError("risk bound below empirical risk")


@dataclass(frozen=True)
class ConfidenceLedger:
    """Failure budgets that are union-bounded into one confidence statement."""

    entries: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        for label, budget in self.entries:
            if not 0.0 < budget < 1.0:
                raise ValueError(f"budget for {label!r} must lie in (0, 1), got {budget}")
        if self.total_budget >= 1.0:
            raise ValueError(f"total failure budget {self.total_budget} is not below 1")

    @property
    def total_budget(self) -> float:
        return math.fsum(budget for _, budget in self.entries)

    @property
    def confidence(self) -> float:
        return 1.0 - self.total_budget

    def charge(self, label: str, budget: float) -> "ConfidenceLedger":
        return ConfidenceLedger(self.entries + ((label, budget),))

    def describe(self) -> str:
        lines = [f"{label:<48s} {budget:.12g}" for label, budget in self.entries]
        lines.append(f"{'total failure budget':<48s} {self.total_budget:.12g}")
        lines.append(f"{'confidence':<48s} {self.confidence:.12g}")
        return "\n".join(lines)


def statement_ledger(
    delta: float, omega: float = 0.0, n_btargets: int = 1, n_tolerances: int = 1
) -> ConfidenceLedger:
    """Ledger for one certified statement.

    Each of the ``n_btargets`` trained models contributes a PAC-Bayes failure
    ``delta`` and a Monte Carlo failure ``omega`` per tolerance; ``n_tolerances``
    > 1 is the simultaneous statement needed by a quantile read-off.
    """
    if n_btargets < 1 or n_tolerances < 1:
        raise ValueError("multiplicities must be at least 1")
    total = n_btargets * n_tolerances * (delta + omega)
    if total >= 1.0:
        raise ValueError(f"failure budget {total} is not below 1")
    mult = f"x {n_btargets} model(s) x {n_tolerances} tolerance(s)"
    name = "sample convergence delta" if omega == 0.0 else "PAC-Bayes delta"
    entries = [(f"{name} {mult}", n_btargets * n_tolerances * delta)]
    if omega > 0.0:
        entries.append((f"Monte Carlo omega {mult}", n_btargets * n_tolerances * omega))
    return ConfidenceLedger(tuple(entries))


def confidence_ledger(
    delta: float, omega: float, n_btargets: int, n_tolerances: int
) -> tuple[float, float]:
    """(risk confidence, quantile confidence) after the union bounds."""
    risk = statement_ledger(delta, omega, n_btargets, 1)
    quantile = statement_ledger(delta, omega, n_btargets, n_tolerances)
    return risk.confidence, quantile.confidence


def sample_convergence_bound(r_hat: float, n: int, delta: float) -> float:
    """Risk upper bound from n i.i.d. 0-1 samples, valid w.p. 1 - delta."""
    if n < 1:
        raise ValueError("need at least one sample")
    _check_delta(delta)
    return kl_inverse(r_hat, math.log(2.0 / delta) / n)


def maurer_bound(r_hat: float, n: int, kl_div: float, delta: float) -> float:
    """PAC-Bayes bound with a data-independent prior; requires n >= 8."""
    if n < 8:
        raise ValueError(f"the PAC-Bayes bound needs n >= 8, got {n}")
    _check_delta(delta)
    if kl_div < 0.0:
        raise ValueError("KL divergence must be nonnegative")
    return kl_inverse(r_hat, (kl_div + math.log(2.0 * math.sqrt(n) / delta)) / n)


def generalization_bound(r_bar: float, B: float) -> float:
    return kl_inverse(r_bar, B)


@dataclass(frozen=True)
class PriorGridSpec:
    """Prior variances allowed by the union bound: lambda_max * exp(-a / b), a = 1, 2, ..."""

    lambda_max: float = 100.0
    b: float = 100.0

    def __post_init__(self):
        if self.lambda_max <= 0.0 or self.b <= 0.0:
            raise ValueError("lambda_max and b must be strictly positive")

    def grid_index(self, lam: np.ndarray) -> np.ndarray:
        """Continuous a = b log(lambda_max / lambda)."""
        return self.b * np.log(self.lambda_max / np.asarray(lam, dtype=float))

    def value(self, a: np.ndarray) -> np.ndarray:
        return self.lambda_max * np.exp(-np.asarray(a, dtype=float) / self.b)


def round_prior(lam: np.ndarray, grid: PriorGridSpec) -> np.ndarray:
    """Snap prior variances onto the grid. Values above lambda_max, or that
    would round to a = 0, are clamped to a = 1 with a warning."""
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if np.any(lam <= 0.0):
        raise ValueError("prior variances must be strictly positive")
    a = np.rint(grid.grid_index(lam))
    if np.any(a < 1):
        warnings.warn(
            "prior variance at or above lambda_max clamped to the first grid point",
            RuntimeWarning,
            stacklevel=2,
        )
        a = np.maximum(a, 1.0)
    return grid.value(a)


def grid_integers(lam: np.ndarray, grid: PriorGridSpec) -> np.ndarray:
    """Integer grid indices of on-grid prior variances; raises if off-grid."""
    a = grid.grid_index(lam)
    a_int = np.rint(a)
    if np.any(np.abs(a - a_int) > GRID_TOL * np.maximum(1.0, np.abs(a))):
        raise ValueError(f"prior variances are not on the grid (a = {a})")
    if np.any(a_int < 1):
        raise ValueError("prior variance must be strictly below lambda_max (a >= 1)")
    return a_int


def regularizer_B(
    spec: GroupedGaussianSpec,
    grid: PriorGridSpec,
    n: int,
    delta: float,
    on_grid: bool = True,
) -> float:
    """PAC-Bayes budget B(w, s, lambda) for the grouped-prior union bound.

    With ``on_grid=False`` lambda is treated as continuous (training-time
    relaxation) and only lambda < lambda_max is required.
    """
    if n < 8:
        raise ValueError(f"the PAC-Bayes bound needs n >= 8, got {n}")
    _check_delta(delta)
    if on_grid:
        a = grid_integers(spec.lam, grid)
    else:
        a = grid.grid_index(spec.lam)
        if np.any(a <= 0.0):
            raise ValueError("prior variance must be strictly below lambda_max")
    J = spec.n_groups
    total = (
        gaussian_kl_grouped(spec)
        + 2.0 * float(np.sum(np.log(a)))
        + J * math.log(math.pi**2 / 6.0)
        + math.log(2.0 * math.sqrt(n) / delta)
    )
    return total / n


def quantile_from_grid(bounds_by_tolerance: Mapping[float, float], quantile_q: float) -> Optional[float]:
    """Smallest tolerance whose risk bound is at most 1 - q, or None."""
    if not bounds_by_tolerance:
        raise ValueError("empty tolerance grid")
    if not 0.0 < quantile_q < 1.0:
        raise ValueError(f"quantile must lie in (0, 1), got {quantile_q}")
    target = 1.0 - quantile_q
    for eps in sorted(bounds_by_tolerance):
        if bounds_by_tolerance[eps] <= target:
            return eps
    return None


def worst_case_rate(kind: str, param: float, k: int) -> float:
    """Worst-case ||z^{k+1} - z^k|| / ||z^0 - z*|| for the operator class.

    ``linear``: beta-linearly convergent (or beta-contractive) operators.
    ``averaged``: alpha-averaged operators (Krasnosel'skii-Mann iteration).
    """
    if k < 0:
        raise ValueError("k must be nonnegative")
    if kind == "linear":
        if not 0.0 < param < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {param}")
        return 2.0 * param**k
    if kind == "averaged":
        if not 0.5 <= param < 1.0:
            raise ValueError(f"alpha must lie in [1/2, 1), got {param}")
        ratio = k / (k + 1.0)
        if param <= 0.5 * (1.0 + math.sqrt(ratio)):
            # 0.0 ** 0 == 1.0 covers k = 0.
            return math.sqrt(ratio**k / ((k + 1.0) * param * (1.0 - param)))
        return 2.0 * (2.0 * param - 1.0) ** k
    raise ValueError(f"unknown operator class {kind!r}")


def combine_with_worst_case(
    prob_bound: float, worst_case_ratio: float, dist_upper: float, epsilon: float
) -> float:
    """Zero risk when the deterministic rate already certifies the tolerance."""
    if worst_case_ratio * dist_upper < epsilon:
        return 0.0
    return prob_bound


def _check_delta(delta: float) -> None:
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
