"""Fixed-point iteration runner, metrics and the classical certification pipeline."""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .bounds import (
    METRICS,
    Certificate,
    ConfidenceLedger,
    quantile_from_grid,
    sample_convergence_bound,
    statement_ledger,
    worst_case_rate,
)

# -10 log10 of the smallest normal double, rounded; nmse of an exact match.
NMSE_FLOOR_DB = -320.0

# Instances are processed in fixed chunks so thread count never changes results.
CHUNK = 64


class NonFiniteError(RuntimeError):
    """Raised when an iterate becomes NaN or infinite under the strict policy."""

    def __init__(self, instances: Sequence[int], where: str = "rollout"):
        self.instances = list(instances)
        shown = ", ".join(str(i) for i in self.instances[:10])
        more = "" if len(self.instances) <= 10 else f" (+{len(self.instances) - 10} more)"
        super().__init__(f"non-finite iterate in {where} for instance(s) {shown}{more}")


@dataclass(frozen=True)
class FixedPointOperator:
    """Batched map z -> T(z, x).

    ``apply`` takes ``z`` of shape (B, dim) and ``x`` of shape (B, p) and
    returns shape (B, dim). ``rate`` is an optional declared class
    ``("linear", beta)`` or ``("averaged", alpha)``. ``extract`` maps the
    iterate to the solution estimate (defaults to the iterate itself).
    """

    apply: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dim: int
    rate: Optional[tuple[str, float]] = None
    extract: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    name: str = "operator"

    def __call__(self, z: np.ndarray, x: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        x = np.asarray(x, dtype=float)
        single = z.ndim == 1
        if single:
            z, x = z[None, :], x[None, :]
        out = self.apply(z, x)
        if out.shape != z.shape:
            raise ValueError(f"{self.name}: output shape {out.shape} != input shape {z.shape}")
        return out[0] if single else out

    def solution(self, z: np.ndarray, x: np.ndarray) -> np.ndarray:
        return z if self.extract is None else self.extract(z, x)


@dataclass
class TraceTensor:
    """Metric values indexed [instance, weight sample, iteration]."""

    values: np.ndarray
    metric_id: str
    nonfinite: tuple[int, ...] = field(default=())

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3:
            raise ValueError("trace values must have shape (N, H, K+1)")
        if self.metric_id not in METRICS:
            raise ValueError(f"unknown metric {self.metric_id!r}")

    @property
    def n_instances(self) -> int:
        return self.values.shape[0]

    @property
    def h_samples(self) -> int:
        return self.values.shape[1]

    @property
    def k_max(self) -> int:
        return self.values.shape[2] - 1

    def to_csv(self, path: str) -> None:
        n, h, k1 = self.values.shape
        with open(path, "w", newline="") as fh:
            fh.write("instance,weight_sample,iteration,value\n")
            for i in range(n):
                for j in range(h):
                    for k in range(k1):
                        fh.write(f"{i},{j},{k},{self.values[i, j, k]:.17g}\n")

    @classmethod
    def from_csv(cls, path: str, metric_id: str) -> "TraceTensor":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        idx = data[:, :3].astype(int)
        shape = tuple(idx.max(axis=0) + 1)
        values = np.full(shape, np.nan)
        values[idx[:, 0], idx[:, 1], idx[:, 2]] = data[:, 3]
        if np.isnan(values).any():
            raise ValueError(f"{path}: trace CSV does not cover a full grid")
        return cls(values, metric_id)

    # Binary layout: b"FPTR", uint32 version, uint32 N, H, K+1, uint32 metric
    # name length, metric name (ascii), then N*H*(K+1) float64, little endian,
    # C order. All header integers are little endian.
    MAGIC = b"FPTR"
    VERSION = 1

    def to_bytes(self) -> bytes:
        name = self.metric_id.encode("ascii")
        n, h, k1 = self.values.shape
        head = self.MAGIC + struct.pack("<5I", self.VERSION, n, h, k1, len(name)) + name
        return head + np.ascontiguousarray(self.values, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "TraceTensor":
        if blob[:4] != cls.MAGIC:
            raise ValueError("not a trace file (bad magic at offset 0)")
        if len(blob) < 24:
            raise ValueError("truncated trace header")
        version, n, h, k1, name_len = struct.unpack_from("<5I", blob, 4)
        if version != cls.VERSION:
            raise ValueError(f"unsupported trace version {version} at offset 4")
        start = 24 + name_len
        metric = blob[24:start].decode("ascii")
        expected = start + 8 * n * h * k1
        if len(blob) != expected:
            raise ValueError(f"trace payload length mismatch: expected {expected} bytes, got {len(blob)}")
        values = np.frombuffer(blob, dtype="<f8", offset=start).reshape(n, h, k1).astype(float)
        return cls(values, metric)


def default_tolerance_grid(metric_id: str, count: int = 81) -> np.ndarray:
    if metric_id == "nmse":
        return np.linspace(-80.0, 0.0, count)
    return np.logspace(-6.0, 2.0, count)


def evaluate_metric(
    metric_id: str,
    z: np.ndarray,
    x: np.ndarray,
    op: Optional[FixedPointOperator] = None,
    z_true: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Row-wise metric on a batch (scalar when given single vectors)."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    x2 = np.atleast_2d(np.asarray(x, dtype=float))
    if metric_id == "fp_residual":
        if op is None:
            raise ValueError("fp_residual needs the operator")
        out = np.linalg.norm(op(z2, x2) - z2, axis=1)
    elif metric_id in ("mse", "nmse"):
        if z_true is None:
            raise ValueError(f"{metric_id} needs the ground-truth solution")
        zt = np.atleast_2d(np.asarray(z_true, dtype=float))
        sol = z2 if op is None else op.solution(z2, x2)
        err = np.sum((sol - zt) ** 2, axis=1)
        if metric_id == "mse":
            out = err
        else:
            ref = np.sum(zt**2, axis=1)
            if np.any(ref == 0.0):
                raise ValueError("nmse is undefined for a zero ground truth")
            with np.errstate(divide="ignore"):
                out = np.maximum(10.0 * np.log10(err / ref), NMSE_FLOOR_DB)
    else:
        raise ValueError(f"unknown metric {metric_id!r}")
    return out[0] if single else out


def _thread_count(threads: Optional[int]) -> int:
    if threads is None:
        threads = int(os.environ.get("FPCERT_THREADS", "1"))
    return max(1, threads)


def map_chunks(fn: Callable[[int, int], np.ndarray], n: int, threads: Optional[int] = None) -> list:
    """Apply ``fn(start, stop)`` over fixed chunks of range(n), in order."""
    bounds = [(s, min(s + CHUNK, n)) for s in range(0, n, CHUNK)]
    workers = _thread_count(threads)
    if workers == 1 or len(bounds) == 1:
        return [fn(a, b) for a, b in bounds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda ab: fn(*ab), bounds))


def rollout_metrics(
    op: FixedPointOperator,
    x: np.ndarray,
    z0: np.ndarray,
    k_max: int,
    metric_id: str,
    z_true: Optional[np.ndarray] = None,
) -> np.ndarray:
    """(B, k_max+1) metric values for one batch; NaN marks non-finite rows."""
    z = np.array(z0, dtype=float)
    out = np.empty((z.shape[0], k_max + 1))
    bad = np.zeros(z.shape[0], dtype=bool)
    with np.errstate(all="ignore"):
        for k in range(k_max + 1):
            if metric_id == "fp_residual":
                z_next = op(z, x)
                out[:, k] = np.linalg.norm(z_next - z, axis=1)
            else:
                out[:, k] = evaluate_metric(metric_id, z, x, op, z_true)
                z_next = op(z, x) if k < k_max else z
            bad |= ~np.all(np.isfinite(z_next), axis=1) | ~np.isfinite(out[:, k])
            z = z_next
    out[bad] = np.nan
    return out


def run_trace(
    op: FixedPointOperator,
    x: np.ndarray,
    k_max: int,
    metric_id: str,
    z0: Optional[np.ndarray | Callable[[np.ndarray], np.ndarray]] = None,
    z_true: Optional[np.ndarray] = None,
    strict_finite: bool = True,
    threads: Optional[int] = None,
) -> TraceTensor:
    """Iterate T from z0 on every instance and record the metric at k = 0..k_max.

    ``z0`` is None (zero start), an (N, dim) array, or a callable mapping the
    (B, p) parameter batch to starting points (e.g. a warm-start provider).
    """
    if k_max < 1:
        raise ValueError("k_max must be at least 1")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    if metric_id in ("mse", "nmse") and z_true is None:
        raise ValueError(f"{metric_id} needs ground-truth solutions")

    def chunk(a: int, b: int) -> np.ndarray:
        if z0 is None:
            start = np.zeros((b - a, op.dim))
        elif callable(z0):
            start = z0(x[a:b])
        else:
            start = np.asarray(z0, dtype=float)[a:b]
        zt = None if z_true is None else z_true[a:b]
        return rollout_metrics(op, x[a:b], start, k_max, metric_id, zt)

    values = np.concatenate(map_chunks(chunk, n, threads), axis=0)
    return finalize_trace(values[:, None, :], metric_id, strict_finite)


def finalize_trace(values: np.ndarray, metric_id: str, strict_finite: bool) -> TraceTensor:
    """Apply the non-finite policy: abort, or count the rollout as an error."""
    bad_rows = np.where(np.isnan(values).any(axis=(1, 2)))[0]
    if bad_rows.size:
        if strict_finite:
            raise NonFiniteError(bad_rows.tolist())
        # +inf exceeds every tolerance, so e(x) = 1 at all cells
        values = np.where(np.isnan(values), np.inf, values)
    return TraceTensor(values, metric_id, tuple(int(i) for i in bad_rows))


def empirical_risk(trace: TraceTensor, k: int, epsilon: float) -> float:
    """Fraction of (instance, weight sample) pairs with metric >= epsilon at step k."""
    if not 0 <= k <= trace.k_max:
        raise ValueError(f"k={k} outside 0..{trace.k_max}")
    return float(np.mean(trace.values[:, :, k] >= epsilon))


def risk_grid(trace: TraceTensor, ks: Sequence[int], tolerances: Sequence[float]) -> np.ndarray:
    """Empirical risk for every (k, epsilon) cell, shape (len(ks), len(tolerances))."""
    tol = np.asarray(tolerances, dtype=float)
    out = np.empty((len(ks), tol.size))
    total = trace.n_instances * trace.h_samples
    for row, k in enumerate(ks):
        if not 0 <= k <= trace.k_max:
            raise ValueError(f"k={k} outside 0..{trace.k_max}")
        v = np.sort(trace.values[:, :, k].ravel())
        # count of values >= eps
        out[row] = (total - np.searchsorted(v, tol, side="left")) / total
    return out


@dataclass(frozen=True)
class QuantileRow:
    metric_id: str
    k: int
    quantile: float
    epsilon_bound: Optional[float]
    confidence: float


def quantile_rows(
    metric_id: str,
    ks: Sequence[int],
    tolerances: Sequence[float],
    bounds: np.ndarray,
    quantiles: Sequence[float],
    confidence: float,
) -> list[QuantileRow]:
    rows = []
    for row, k in enumerate(ks):
        table = dict(zip((float(t) for t in tolerances), bounds[row].tolist()))
        for q in quantiles:
            rows.append(QuantileRow(metric_id, int(k), float(q), quantile_from_grid(table, q), confidence))
    return rows


def certify_classical(
    trace: TraceTensor,
    tolerance_grid: Sequence[float],
    delta: float,
    quantiles: Sequence[float] = (),
    ks: Optional[Sequence[int]] = None,
) -> tuple[list[Certificate], list[QuantileRow], ConfidenceLedger]:
    """Sample-convergence certificates for every (k, epsilon) plus quantile read-offs."""
    if trace.h_samples != 1:
        raise ValueError("classical certification expects one weight sample per instance")
    tol = np.sort(np.asarray(tolerance_grid, dtype=float))
    ks = list(range(trace.k_max + 1)) if ks is None else list(ks)
    n = trace.n_instances
    ledger = statement_ledger(delta, 0.0, 1, tol.size)
    risk_conf = statement_ledger(delta).confidence
    emp = risk_grid(trace, ks, tol)
    bounds = np.empty_like(emp)
    certs = []
    for row, k in enumerate(ks):
        for col, eps in enumerate(tol):
            bound = sample_convergence_bound(emp[row, col], n, delta)
            bounds[row, col] = bound
            certs.append(
                Certificate(trace.metric_id, k, float(eps), emp[row, col], bound, risk_conf, "sample_convergence", n)
            )
    rows = quantile_rows(trace.metric_id, ks, tol, bounds, quantiles, ledger.confidence)
    return certs, rows, ledger


def worst_case_envelope(rate: tuple[str, float], dist0: np.ndarray, k_max: int) -> np.ndarray:
    """(N, k_max+1) worst-case fp_residual envelope given ||z0 - z*|| per instance."""
    ratios = np.array([worst_case_rate(rate[0], rate[1], k) for k in range(k_max + 1)])
    return np.outer(np.asarray(dist0, dtype=float), ratios)
