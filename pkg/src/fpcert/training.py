"""Penalized PAC-Bayes training of learned optimizers with a manual Adam loop."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .bounds import PriorGridSpec, regularizer_B, round_prior
from .kl import GroupedGaussianSpec, expand_groups, kl_inverse, kl_inverse_grad
from .learned import LearnedArch
from .problems import InstanceBatch
from .rng import stream

DEFAULT_BTARGETS = (0.01, 0.03, 0.05, 0.1, 0.2, 0.3)
LOG_COLUMNS = ("epoch", "sampled_risk", "B_value", "kl_inverse_term", "penalty_term", "objective")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
ZETA_MIN = -20.0


@dataclass(frozen=True)
class TrainConfig:
    b_target: float
    mu: float = 1e3
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: Optional[int] = None  # None means full batch
    grid: PriorGridSpec = field(default_factory=PriorGridSpec)
    delta: float = 1e-5
    k_train: Optional[int] = None
    seed: int = 0
    loss_id: str = "regression"
    s0: float = 1e-4

    def __post_init__(self):
        for name in ("b_target", "learning_rate", "s0"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")
        if self.mu < 0.0:
            raise ValueError("mu must be nonnegative")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")


@dataclass
class TrainState:
    """Posterior mean w, log variances zeta, log prior variances nu, Adam moments."""

    w: np.ndarray
    zeta: np.ndarray
    nu: np.ndarray
    m: np.ndarray
    v: np.ndarray
    epoch: int = 0

    @property
    def s(self) -> np.ndarray:
        return np.exp(self.zeta)

    @property
    def lam(self) -> np.ndarray:
        return np.exp(self.nu)

    def copy(self) -> "TrainState":
        return TrainState(self.w.copy(), self.zeta.copy(), self.nu.copy(), self.m.copy(), self.v.copy(), self.epoch)


@dataclass(frozen=True)
class Gradient:
    dw: np.ndarray
    dzeta: np.ndarray
    dnu: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.dw, self.dzeta, self.dnu])


@dataclass(frozen=True)
class ObjectiveParts:
    sampled_risk: float
    B_value: float
    kl_inverse_term: float
    penalty_term: float

    @property
    def objective(self) -> float:
        return self.kl_inverse_term + self.penalty_term


@dataclass
class TrainResult:
    spec: GroupedGaussianSpec  # rounded prior
    lam_continuous: np.ndarray
    log: list[ObjectiveParts]
    state: TrainState
    b_target: Optional[float] = None


class TrainingAborted(RuntimeError):
    """Non-finite objective; ``result`` holds the last finite state."""

    def __init__(self, epoch: int, result: TrainResult):
        super().__init__(f"non-finite training objective at epoch {epoch}")
        self.epoch = epoch
        self.result = result


def _sigmoid(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logistic_risk(theta: np.ndarray, batch: InstanceBatch, arch: LearnedArch, loss_id: str) -> float:
    """Mean over the batch of 1 / (1 + exp(-loss))."""
    return float(np.mean(_sigmoid(arch.losses(theta, batch.x, batch.z_star, loss_id))))


def init_state(arch: LearnedArch, config: TrainConfig) -> TrainState:
    p, J = arch.n_params, len(arch.partition)
    grid = config.grid
    nu0 = math.log(grid.lambda_max) - 1.0 / grid.b
    zeros = np.zeros(2 * p + J)
    return TrainState(
        arch.init_mean().astype(float),
        np.full(p, math.log(config.s0)),
        np.full(J, nu0),
        zeros.copy(),
        zeros.copy(),
    )


def posterior_spec(arch: LearnedArch, state: TrainState, lam: Optional[np.ndarray] = None) -> GroupedGaussianSpec:
    return GroupedGaussianSpec(
        state.w, state.s, arch.prior_mean(), arch.partition, state.lam if lam is None else lam
    )


def objective_parts(
    state: TrainState,
    batch: InstanceBatch,
    arch: LearnedArch,
    config: TrainConfig,
    w_prime: np.ndarray,
    n_total: Optional[int] = None,
) -> ObjectiveParts:
    n = len(batch) if n_total is None else n_total
    risk = logistic_risk(w_prime, batch, arch, config.loss_id)
    B = regularizer_B(posterior_spec(arch, state), config.grid, n, config.delta, on_grid=False)
    return ObjectiveParts(risk, B, kl_inverse(risk, B, tol=0.0), config.mu * (B - config.b_target) ** 2)


def penalized_objective(
    state: TrainState,
    batch: InstanceBatch,
    arch: LearnedArch,
    config: TrainConfig,
    w_prime: np.ndarray,
    n_total: Optional[int] = None,
) -> float:
    """kl_inverse(logistic risk at w', B(w, s, lambda)) + mu (B - B_target)^2."""
    return objective_parts(state, batch, arch, config, w_prime, n_total).objective


def grad_B(arch: LearnedArch, state: TrainState, grid: PriorGridSpec, n: int) -> Gradient:
    """Closed-form derivatives of B with the prior variance treated as continuous."""
    s = state.s
    lam = state.lam
    w0 = arch.prior_mean()
    lam_full = expand_groups(lam, arch.partition, s.size)
    diff = state.w - w0
    dw = diff / lam_full
    dzeta = -0.5 + 0.5 * s / lam_full
    dnu = np.empty(lam.size)
    log_max = math.log(grid.lambda_max)
    for j, ix in enumerate(arch.partition):
        quad = np.sum(s[ix]) + np.dot(diff[ix], diff[ix])
        dnu[j] = 0.5 * (ix.size - quad / lam[j]) - 2.0 / (log_max - state.nu[j])
    return Gradient(dw / n, dzeta / n, dnu / n)


def grad_penalized(
    state: TrainState,
    batch: InstanceBatch,
    arch: LearnedArch,
    config: TrainConfig,
    xi: np.ndarray,
    n_total: Optional[int] = None,
) -> tuple[Gradient, ObjectiveParts]:
    """Reverse-mode gradient of the penalized objective at w' = w + xi sqrt(s)."""
    n = len(batch) if n_total is None else n_total
    sqrt_s = np.sqrt(state.s)
    w_prime = state.w + xi * sqrt_s
    losses, vjp = arch.loss_vjp(w_prime, batch.x, batch.z_star, config.loss_id)
    sig = _sigmoid(losses)
    risk = float(np.mean(sig))
    g_wprime = vjp(sig * (1.0 - sig) / len(batch))
    B = regularizer_B(posterior_spec(arch, state), config.grid, n, config.delta, on_grid=False)
    # kl_inverse(1, c) = 1 for every c, so a saturated risk has no gradient
    dq, dc = (0.0, 0.0) if risk >= 1.0 else kl_inverse_grad(risk, B)
    dB = dc + 2.0 * config.mu * (B - config.b_target)
    gB = grad_B(arch, state, config.grid, n)
    grad = Gradient(
        dq * g_wprime + dB * gB.dw,
        dq * g_wprime * 0.5 * xi * sqrt_s + dB * gB.dzeta,
        dB * gB.dnu,
    )
    parts = ObjectiveParts(risk, B, kl_inverse(risk, B, tol=0.0), config.mu * (B - config.b_target) ** 2)
    return grad, parts


def _clamp(state: TrainState, grid: PriorGridSpec) -> None:
    log_max = math.log(grid.lambda_max)
    np.clip(state.zeta, ZETA_MIN, log_max, out=state.zeta)
    np.minimum(state.nu, log_max - 1.0 / grid.b, out=state.nu)


def adam_step(state: TrainState, grad: Gradient, lr: float, grid: PriorGridSpec) -> None:
    g = grad.flat()
    state.epoch += 1
    t = state.epoch
    state.m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * g
    state.v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * g * g
    m_hat = state.m / (1.0 - ADAM_BETA1**t)
    v_hat = state.v / (1.0 - ADAM_BETA2**t)
    step = lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    p = state.w.size
    state.w = state.w - step[:p]
    state.zeta = state.zeta - step[p : 2 * p]
    state.nu = state.nu - step[2 * p :]
    _clamp(state, grid)


def _finish(arch: LearnedArch, state: TrainState, config: TrainConfig, log: list) -> TrainResult:
    lam_cont = state.lam.copy()
    lam = round_prior(lam_cont, config.grid)
    return TrainResult(posterior_spec(arch, state, lam), lam_cont, log, state.copy(), config.b_target)


def train_pacbayes(
    arch: LearnedArch,
    batch: InstanceBatch,
    config: TrainConfig,
    log_path: Optional[str] = None,
    progress: Optional[Callable[[int, ObjectiveParts], None]] = None,
) -> TrainResult:
    """Sampled-gradient Adam on the penalized objective, then prior rounding.

    One noise draw xi per epoch (from the ``training`` stream keyed by the
    epoch) is shared by every mini-batch of that epoch.
    """
    if config.k_train is not None and config.k_train != arch.K:
        raise ValueError(f"architecture has K={arch.K}, config asks for {config.k_train}")
    n = len(batch)
    if n < 8:
        raise ValueError("training needs at least 8 instances")
    size = n if config.batch_size is None else min(config.batch_size, n)
    state = init_state(arch, config)
    last_good = state.copy()
    log: list[ObjectiveParts] = []
    for epoch in range(config.epochs):
        xi = stream(config.seed, "training", epoch).standard_normal(arch.n_params)
        epoch_parts = []
        for a in range(0, n, size):
            sub = InstanceBatch(batch.x[a : a + size], None if batch.z_star is None else batch.z_star[a : a + size])
            try:
                grad, parts = grad_penalized(state, sub, arch, config, xi, n_total=n)
            except ValueError:
                parts = None
            if parts is None or not (math.isfinite(parts.objective) and np.all(np.isfinite(grad.flat()))):
                write_training_log(log_path, log)
                raise TrainingAborted(epoch, _finish(arch, last_good, config, log))
            epoch_parts.append(parts)
            last_good = state.copy()
            adam_step(state, grad, config.learning_rate, config.grid)
        row = ObjectiveParts(*(float(np.mean([getattr(p, f) for p in epoch_parts])) for f in LOG_COLUMNS[1:5]))
        log.append(row)
        if progress is not None:
            progress(epoch, row)
    write_training_log(log_path, log)
    return _finish(arch, state, config, log)


def write_training_log(path: Optional[str], log: Sequence[ObjectiveParts]) -> None:
    if path is None:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for epoch, row in enumerate(log):
            writer.writerow(
                [epoch]
                + [f"{v:.12g}" for v in (row.sampled_risk, row.B_value, row.kl_inverse_term, row.penalty_term, row.objective)]
            )


@dataclass
class CrossvalResult:
    best_index: int
    b_targets: tuple[float, ...]
    results: list[TrainResult]
    scores: list[float]
    n_btargets: int

    @property
    def best(self) -> TrainResult:
        return self.results[self.best_index]


def crossval_btarget(
    arch: LearnedArch,
    batch: InstanceBatch,
    config_base: TrainConfig,
    btarget_grid: Sequence[float],
    score: Callable[[TrainResult], float],
) -> CrossvalResult:
    """Train once per B_target and keep the model with the lowest score.

    ``score`` is the validation criterion (e.g. the calibrated quantile bound
    at a chosen (k, q)); ties keep the earliest grid entry. Every trained model
    costs one union-bound multiplicity, recorded in ``n_btargets``.
    """
    grid = tuple(float(b) for b in btarget_grid)
    if not grid:
        raise ValueError("the B_target grid is empty")
    results, scores = [], []
    for bt in grid:
        res = train_pacbayes(arch, batch, replace(config_base, b_target=bt))
        results.append(res)
        scores.append(float(score(res)))
    best = int(np.argmin(scores))
    return CrossvalResult(best, grid, results, scores, len(grid))
