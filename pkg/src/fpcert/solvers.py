"""Classical first-order methods written as fixed-point operators."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .fixed_point import FixedPointOperator


def soft_threshold(v: np.ndarray, psi) -> np.ndarray:
    """sign(v) max(0, |v| - psi), the proximal map of psi ||.||_1."""
    if np.any(np.asarray(psi) < 0):
        raise ValueError("threshold must be nonnegative")
    return np.sign(v) * np.maximum(np.abs(v) - psi, 0.0)


def power_iteration(M: np.ndarray, iters: int = 100, tol: float = 1e-10) -> float:
    """Largest eigenvalue of a symmetric positive semidefinite matrix."""
    v = np.ones(M.shape[0]) / np.sqrt(M.shape[0])
    lam = 0.0
    for _ in range(iters):
        w = M @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        new = float(v @ M @ v)
        if abs(new - lam) <= tol * max(1.0, abs(new)):
            return new
        lam = new
    return lam


def contraction_operator(dim: int, beta: float) -> FixedPointOperator:
    """Toy map T(z, x) = beta z + (1 - beta) x with fixed point x."""
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    return FixedPointOperator(
        lambda z, x: beta * z + (1.0 - beta) * x, dim, ("linear", beta), name="contraction"
    )


def gd_operator(P: np.ndarray, gamma: float) -> FixedPointOperator:
    """Gradient step T(z, c) = z - gamma (P z + c) on 1/2 z'Pz + c'z."""
    P = np.asarray(P, dtype=float)
    eig = np.linalg.eigvalsh(P)
    if eig[0] <= 0:
        raise ValueError("P must be positive definite")
    if not 0.0 < gamma < 2.0 / eig[-1]:
        raise ValueError(f"step {gamma} outside the stable range (0, {2.0 / eig[-1]})")
    beta = float(np.max(np.abs(1.0 - gamma * eig)))
    return FixedPointOperator(
        lambda z, c: z - gamma * (z @ P + c), P.shape[0], ("linear", beta), name="gd"
    )


def ista_operator(
    D: np.ndarray, rho: float, L: Optional[float] = None, form: str = "gradient"
) -> FixedPointOperator:
    """Proximal gradient on 1/2 ||Dz - b||^2 + rho ||z||_1, parameter x = b.

    ``form="gradient"`` evaluates z - (1/L) D'(Dz - b); ``form="affine"``
    evaluates the same map as (I - D'D/L) z + (D'/L) b. The two agree up to
    rounding; each matches one learned parameterization bit for bit.
    """
    D = np.asarray(D, dtype=float)
    if L is None:
        L = power_iteration(D.T @ D)
    step = 1.0 / L
    psi = rho * step
    if form == "gradient":

        def apply(z, b):
            return soft_threshold(z - step * ((z @ D.T - b) @ D), psi)

    elif form == "affine":
        W1, W2 = ista_affine_weights(D, L)

        def apply(z, b):
            return soft_threshold(z @ W1.T + b @ W2.T, psi)

    else:
        raise ValueError(f"unknown ISTA form {form!r}")
    return FixedPointOperator(apply, D.shape[1], name="ista")


def ista_affine_weights(D: np.ndarray, L: float) -> tuple[np.ndarray, np.ndarray]:
    """(I - D'D/L, D'/L), the matrices of ISTA written as an affine map."""
    step = 1.0 / L
    return np.eye(D.shape[1]) - step * (D.T @ D), step * D.T


def lasso_objective(D: np.ndarray, b: np.ndarray, rho: float, z: np.ndarray) -> np.ndarray:
    r = z @ D.T - b
    return 0.5 * np.sum(r * r, axis=-1) + rho * np.sum(np.abs(z), axis=-1)


def fista_run(
    D: np.ndarray,
    b: np.ndarray,
    rho: float,
    L: Optional[float] = None,
    k_max: int = 100,
    momentum: bool = True,
    z0: Optional[np.ndarray] = None,
) -> np.ndarray:
    """FISTA iterates z^0..z^k_max, shape (k_max+1, B, n) for a (B, m) batch of b."""
    D = np.asarray(D, dtype=float)
    b = np.atleast_2d(np.asarray(b, dtype=float))
    op = ista_operator(D, rho, L)
    z = np.zeros((b.shape[0], D.shape[1])) if z0 is None else np.array(z0, dtype=float)
    out = [z]
    y, t = z, 1.0
    for _ in range(k_max):
        z_next = op(y, b)
        if momentum:
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = z_next + ((t - 1.0) / t_next) * (z_next - z)
            t = t_next
        else:
            y = z_next
        z = z_next
        out.append(z)
    return np.stack(out)


def dr_boxqp_operator(
    P: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    q_map: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> FixedPointOperator:
    """Douglas-Rachford on 1/2 y'Py + q'y over the box [lower, upper].

    Penalty and relaxation are one, which makes the map 1/2-averaged. The
    parameter x is turned into q by ``q_map`` (identity by default); the
    solution estimate is the projected point u2.
    """
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    try:
        factor = cho_factor(P + np.eye(n))
    except LinAlgError as exc:
        raise ValueError("P + I is not positive definite") from exc
    lower = np.broadcast_to(np.asarray(lower, dtype=float), (n,))
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (n,))
    to_q = (lambda x: x) if q_map is None else q_map

    def halves(z, x):
        u1 = cho_solve(factor, (z - to_q(x)).T).T
        u2 = np.clip(2.0 * u1 - z, lower, upper)
        return u1, u2

    def apply(z, x):
        u1, u2 = halves(z, x)
        return z + u2 - u1

    def extract(z, x):
        return halves(z, x)[1]

    return FixedPointOperator(apply, n, ("averaged", 0.5), extract, name="douglas_rachford")


def nn_warmstart(base_x: np.ndarray, base_z: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Solution of the nearest base parameter; ties go to the lowest index."""
    base_x = np.atleast_2d(np.asarray(base_x, dtype=float))
    base_z = np.atleast_2d(np.asarray(base_z, dtype=float))
    if base_x.shape[0] == 0:
        raise ValueError("empty warm-start base set")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    picks = np.empty(x.shape[0], dtype=int)
    for a in range(0, x.shape[0], 256):
        d = np.sum((x[a : a + 256, None, :] - base_x[None, :, :]) ** 2, axis=2)
        picks[a : a + 256] = np.argmin(d, axis=1)
    out = base_z[picks]
    return out[0] if single else out


def warmstart_provider(base_x: np.ndarray, base_z: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    return lambda x: nn_warmstart(base_x, base_z, x)
