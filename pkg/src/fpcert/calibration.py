"""Monte Carlo calibration of a trained weight posterior into risk and quantile certificates."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bounds import (
    Certificate,
    ConfidenceLedger,
    PriorGridSpec,
    combine_with_worst_case,
    regularizer_B,
    statement_ledger,
    worst_case_rate,
)
from .fixed_point import (
    NonFiniteError,
    QuantileRow,
    TraceTensor,
    _thread_count,
    evaluate_metric,
    quantile_rows,
)
from .kl import GroupedGaussianSpec, kl_inverse
from .learned import LearnedArch, sample_weights
from .problems import InstanceBatch
from .rng import stream

# weight samples handled per task
SAMPLE_CHUNK = 16


@dataclass(frozen=True)
class CalibrationConfig:
    H: int
    delta: float
    omega: float
    tolerances: tuple[float, ...]
    ks: tuple[int, ...]
    metrics: tuple[str, ...] = ("nmse",)
    seed: int = 0
    strict_finite: bool = True
    threads: Optional[int] = None

    def __post_init__(self):
        if self.H < 1:
            raise ValueError("H must be at least 1")
        for name in ("delta", "omega"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.delta + self.omega >= 1.0:
            raise ValueError("delta + omega must be below 1")
        if not self.tolerances or not self.ks:
            raise ValueError("tolerance grid and iteration set must be nonempty")
        object.__setattr__(self, "tolerances", tuple(sorted(float(t) for t in self.tolerances)))
        object.__setattr__(self, "ks", tuple(int(k) for k in self.ks))


@dataclass
class RiskGrid:
    """Empirical risk over (k, epsilon) pooled over N instances and H weight samples."""

    metric_id: str
    ks: tuple[int, ...]
    tolerances: tuple[float, ...]
    risk: np.ndarray
    n_instances: int
    h_samples: int
    trace: Optional[TraceTensor] = None
    nonfinite: tuple[tuple[int, int], ...] = ()


@dataclass
class CertificateBundle:
    certificates: list[Certificate]
    quantiles: list[QuantileRow]
    ledger: ConfidenceLedger
    risk_confidence: float
    grids: dict[str, RiskGrid] = field(default_factory=dict)
    B_star: Optional[float] = None


def _draw(spec: GroupedGaussianSpec, seed: int, j: int) -> np.ndarray:
    return sample_weights(spec, stream(seed, "calibration", j))[0]


def _sample_values(arch, theta, batch, ks, metrics):
    """metric -> (N, len(ks)) values for one weight sample; NaN marks broken rows."""
    with np.errstate(all="ignore"):
        seq = arch.iterates(theta, batch.x, max(ks))
        out = {}
        for metric in metrics:
            cols = []
            for k in ks:
                try:
                    cols.append(evaluate_metric(metric, seq[k], batch.x, arch.base_operator, batch.z_star))
                except FloatingPointError:
                    cols.append(np.full(len(batch), np.nan))
            vals = np.stack(cols, axis=1)
            vals[~np.isfinite(vals).all(axis=1)] = np.nan
            out[metric] = vals
    return out


def mc_empirical_risk(
    spec: GroupedGaussianSpec,
    arch: LearnedArch,
    batch: InstanceBatch,
    cal: CalibrationConfig,
    keep_trace: bool = False,
) -> dict[str, RiskGrid]:
    """R_hat(k, eps) = (1 / NH) sum_j sum_i 1(metric >= eps) for every cell and metric.

    One shared set of H weight samples serves every cell; sample j comes from
    the ``calibration`` stream keyed by j. Counts are integers, so the result
    does not depend on how the samples are split across threads.
    """
    n, H = len(batch), cal.H
    tol = np.asarray(cal.tolerances)
    ks = list(cal.ks)
    bad_pairs: list[tuple[int, int]] = []

    def task(a: int, b: int):
        counts = {m: np.zeros((len(ks), tol.size), dtype=np.int64) for m in cal.metrics}
        traces = {m: [] for m in cal.metrics}
        bad = []
        for j in range(a, b):
            vals = _sample_values(arch, _draw(spec, cal.seed, j), batch, ks, cal.metrics)
            for m, v in vals.items():
                rows = np.where(np.isnan(v).any(axis=1))[0]
                bad += [(int(i), j) for i in rows]
                v = np.where(np.isnan(v), np.inf, v)
                for r in range(len(ks)):
                    col = np.sort(v[:, r])
                    counts[m][r] += n - np.searchsorted(col, tol, side="left")
                if keep_trace:
                    traces[m].append(v)
        return counts, traces, bad

    chunks = [(a, min(a + SAMPLE_CHUNK, H)) for a in range(0, H, SAMPLE_CHUNK)]
    workers = _thread_count(cal.threads)
    if workers == 1 or len(chunks) == 1:
        results = [task(a, b) for a, b in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda ab: task(*ab), chunks))

    for _, _, bad in results:
        bad_pairs += bad
    bad_pairs = sorted(set(bad_pairs))
    if bad_pairs and cal.strict_finite:
        raise NonFiniteError(sorted({i for i, _ in bad_pairs}), where="calibration rollout")
    out = {}
    for m in cal.metrics:
        total = sum(r[0][m] for r in results)
        trace = None
        if keep_trace:
            # (N, H, len(ks)); the last axis follows cal.ks
            trace = TraceTensor(np.stack([v for r in results for v in r[1][m]], axis=1), m)
        out[m] = RiskGrid(m, tuple(ks), tuple(tol.tolist()), total / (n * H), n, H, trace, tuple(bad_pairs))
    return out


def calibrate_bound(
    grid: RiskGrid, B_star: float, cal: CalibrationConfig, n_btargets: int = 1
) -> tuple[list[Certificate], np.ndarray, np.ndarray, ConfidenceLedger]:
    """Per cell: R_bar = kl_inverse(R_hat, log(2/omega)/H), R* = kl_inverse(R_bar, B*).

    Returns (certificates, R_bar, R*, quantile ledger).
    """
    if B_star < 0.0:
        raise ValueError("B* must be nonnegative")
    mc_budget = math.log(2.0 / cal.omega) / grid.h_samples
    risk_conf = statement_ledger(cal.delta, cal.omega, n_btargets, 1).confidence
    ledger = statement_ledger(cal.delta, cal.omega, n_btargets, len(grid.tolerances))
    r_bar = np.empty_like(grid.risk)
    r_star = np.empty_like(grid.risk)
    certs = []
    for row, k in enumerate(grid.ks):
        for col, eps in enumerate(grid.tolerances):
            r_hat = float(grid.risk[row, col])
            r_bar[row, col] = kl_inverse(r_hat, mc_budget)
            r_star[row, col] = kl_inverse(r_bar[row, col], B_star)
            certs.append(
                Certificate(
                    grid.metric_id,
                    k,
                    eps,
                    r_hat,
                    float(r_star[row, col]),
                    risk_conf,
                    "pac_bayes",
                    grid.n_instances,
                    grid.h_samples,
                    float(r_bar[row, col]),
                )
            )
    return certs, r_bar, r_star, ledger


def certify_learned(
    spec: GroupedGaussianSpec,
    arch: LearnedArch,
    batch: InstanceBatch,
    cal: CalibrationConfig,
    prior_grid: PriorGridSpec,
    quantiles: Sequence[float] = (),
    n_btargets: int = 1,
    dist_bound: Optional[tuple[float, float]] = None,
) -> CertificateBundle:
    """Monte Carlo risks, calibrated PAC-Bayes bounds and quantile read-offs.

    ``dist_bound = (a, delta_a)`` supplies a bound a on the distance from the
    starting point to the solution set that holds w.p. 1 - delta_a; it adds
    ``combined`` fp_residual certificates and charges delta_a to the ledger.
    """
    n = len(batch)
    B_star = regularizer_B(spec, prior_grid, n, cal.delta, on_grid=True)
    grids = mc_empirical_risk(spec, arch, batch, cal)
    certs: list[Certificate] = []
    rows: list[QuantileRow] = []
    ledger = statement_ledger(cal.delta, cal.omega, n_btargets, len(cal.tolerances))
    risk_conf = statement_ledger(cal.delta, cal.omega, n_btargets, 1).confidence
    for metric, grid in grids.items():
        cell_certs, _, r_star, ledger = calibrate_bound(grid, B_star, cal, n_btargets)
        certs += cell_certs
        rows += quantile_rows(metric, grid.ks, grid.tolerances, r_star, quantiles, ledger.confidence)
        if dist_bound is not None and metric == "fp_residual" and arch.base_operator.rate is not None:
            a, delta_a = dist_bound
            kind, param = arch.base_operator.rate
            comb_conf = risk_conf - delta_a
            for row, k in enumerate(grid.ks):
                ratio = worst_case_rate(kind, param, k)
                for col, eps in enumerate(grid.tolerances):
                    bound = combine_with_worst_case(float(r_star[row, col]), ratio, a, eps)
                    certs.append(
                        Certificate(metric, k, eps, float(grid.risk[row, col]), bound, comb_conf, "combined", n, grid.h_samples)
                    )
    if dist_bound is not None:
        ledger = ledger.charge("distance bound delta", dist_bound[1])
    return CertificateBundle(certs, rows, ledger, risk_conf, grids, B_star)
