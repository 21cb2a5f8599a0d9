"""Learned optimizers (LISTA family and learned warm starts) with manual backprop."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .bounds import PriorGridSpec
from .fixed_point import FixedPointOperator
from .kl import GroupedGaussianSpec
from .solvers import gd_operator, ista_affine_weights, ista_operator, power_iteration

LOSSES = ("regression", "fp_residual")


def _shrink(v: np.ndarray, psi: float) -> np.ndarray:
    # no sign check: sampled thresholds may be slightly negative
    return np.sign(v) * np.maximum(np.abs(v) - psi, 0.0)


@dataclass(frozen=True)
class WeightLayout:
    """Named views tiling a flat parameter vector, plus the prior grouping."""

    views: tuple[tuple[str, tuple[int, ...]], ...]
    groups: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        names = [n for n, _ in self.views]
        grouped = [n for g in self.groups for n in g]
        if sorted(names) != sorted(grouped) or len(set(names)) != len(names):
            raise ValueError("groups must partition the named views")

    @property
    def offsets(self) -> dict[str, tuple[int, int]]:
        out, pos = {}, 0
        for name, shape in self.views:
            size = int(np.prod(shape)) if shape else 1
            out[name] = (pos, pos + size)
            pos += size
        return out

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) if s else 1 for _, s in self.views)

    @property
    def partition(self) -> tuple[np.ndarray, ...]:
        off = self.offsets
        return tuple(np.concatenate([np.arange(*off[n]) for n in g]) for g in self.groups)

    def unpack(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.size:
            raise ValueError(f"expected {self.size} weights, got {theta.size}")
        off = self.offsets
        return {name: theta[off[name][0] : off[name][1]].reshape(shape) for name, shape in self.views}

    def pack(self, parts: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(parts[n], dtype=float).ravel() for n, _ in self.views])


def datafree_W(D: np.ndarray) -> np.ndarray:
    """Closed-form minimizer of ||W'D||_F^2 subject to W[:, i]' D[:, i] = 1.

    Column i is (DD')^{-1} d_i / (d_i' (DD')^{-1} d_i).
    """
    D = np.asarray(D, dtype=float)
    try:
        factor = cho_factor(D @ D.T)
    except LinAlgError as exc:
        raise ValueError("DD' is singular") from exc
    U = cho_solve(factor, D)
    scale = np.sum(D * U, axis=0)
    if np.any(scale <= 0.0):
        raise ValueError("a dictionary column lies in the null space of (DD')^{-1}")
    return U / scale


class LearnedArch:
    """Common interface: weight layout, prior mean, rollouts and loss gradients."""

    arch_id = "base"
    extendable = False

    def __init__(self, layout: WeightLayout, K: int, dim: int):
        self.layout = layout
        self.K = int(K)
        self.dim = int(dim)
        self.base_operator: Optional[FixedPointOperator] = None

    @property
    def n_params(self) -> int:
        return self.layout.size

    @property
    def partition(self) -> tuple[np.ndarray, ...]:
        return self.layout.partition

    def prior_mean(self) -> np.ndarray:
        raise NotImplementedError

    def init_mean(self) -> np.ndarray:
        """Starting posterior mean for training (defaults to the prior mean)."""
        return self.prior_mean()

    def params(self) -> dict:
        raise NotImplementedError

    def iterates(self, theta: np.ndarray, x: np.ndarray, k_max: Optional[int] = None) -> list[np.ndarray]:
        """z^0..z^k_max for a (B, p) batch of parameters."""
        raise NotImplementedError

    def loss_vjp(
        self, theta: np.ndarray, x: np.ndarray, z_star: Optional[np.ndarray], loss_id: str
    ) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
        """Per-instance losses and a map from per-instance weights to d(sum w_i l_i)/dtheta."""
        raise NotImplementedError

    def losses(self, theta, x, z_star, loss_id) -> np.ndarray:
        return self.loss_vjp(theta, x, z_star, loss_id)[0]

    def _final_loss(self, z, x, z_star, loss_id):
        """Loss at z^K and its gradient with respect to z^K (per row)."""
        if loss_id == "regression":
            if z_star is None:
                raise ValueError("the regression loss needs ground-truth solutions")
            diff = z - z_star
            return np.sum(diff * diff, axis=1), 2.0 * diff
        if loss_id == "fp_residual":
            return self._fp_loss(z, x)
        raise ValueError(f"unknown loss {loss_id!r}")

    def _fp_loss(self, z, x):
        raise ValueError(f"{self.arch_id} does not support the fp_residual loss")

    def _check_k(self, k_max):
        k_max = self.K if k_max is None else int(k_max)
        if k_max > self.K and not self.extendable:
            raise ValueError(f"{self.arch_id} has only {self.K} learned steps, asked for {k_max}")
        return k_max


class _ShrinkageArch(LearnedArch):
    """Shared rollout/backprop for z+ = shrink(v(z), psi_k) architectures."""

    def __init__(self, layout, K, D, b_dim):
        super().__init__(layout, K, D.shape[1])
        self.D = np.asarray(D, dtype=float)
        self.m = b_dim

    def _pre(self, parts, k, z, b):
        raise NotImplementedError

    def _pre_backward(self, parts, grads, k, z, b, cache, vbar):
        raise NotImplementedError

    def iterates(self, theta, x, k_max=None):
        k_max = self._check_k(k_max)
        parts = self.layout.unpack(theta)
        b = np.atleast_2d(np.asarray(x, dtype=float))
        z = np.zeros((b.shape[0], self.dim))
        out = [z]
        for k in range(k_max):
            v, _ = self._pre(parts, k, z, b)
            z = _shrink(v, parts["psi"][k])
            out.append(z)
        return out

    def loss_vjp(self, theta, x, z_star, loss_id):
        parts = self.layout.unpack(theta)
        b = np.atleast_2d(np.asarray(x, dtype=float))
        z = np.zeros((b.shape[0], self.dim))
        tape = []
        for k in range(self.K):
            v, cache = self._pre(parts, k, z, b)
            tape.append((z, v, cache))
            z = _shrink(v, parts["psi"][k])
        loss, dz_final = self._final_loss(z, b, z_star, loss_id)

        def vjp(weights):
            grads = {name: np.zeros(shape) for name, shape in self.layout.views}
            zbar = dz_final * np.asarray(weights, dtype=float)[:, None]
            for k in range(self.K - 1, -1, -1):
                z_in, v, cache = tape[k]
                psi = parts["psi"][k]
                active = np.abs(v) > psi
                vbar = np.where(active, zbar, 0.0)
                grads["psi"][k] -= np.sum(np.sign(v) * vbar)
                zbar = self._pre_backward(parts, grads, k, z_in, b, cache, vbar)
            return self.layout.pack(grads)

        return loss, vjp


class ALISTA(_ShrinkageArch):
    """z+ = shrink(z - gamma_k W'(Dz - b), psi_k) with a fixed data-free W."""

    arch_id = "alista"

    def __init__(self, D: np.ndarray, K: int, W: Optional[np.ndarray] = None, rho: float = 0.1):
        D = np.asarray(D, dtype=float)
        layout = WeightLayout((("psi", (K,)), ("gamma", (K,))), (("psi",), ("gamma",)))
        super().__init__(layout, K, D, D.shape[0])
        self.W = datafree_W(D) if W is None else np.asarray(W, dtype=float)
        self.rho = float(rho)
        self.base_operator = ista_operator(D, rho)

    def params(self):
        return {"K": self.K, "rho": self.rho}

    def prior_mean(self):
        return np.zeros(self.n_params)

    def init_mean(self):
        # zero weights sit on the shrinkage kink where every gradient vanishes,
        # so training starts from the usual ALISTA step and threshold instead
        gamma = 1.0 / np.linalg.norm(self.W.T @ self.D, 2)
        return self.layout.pack({"psi": np.full(self.K, self.rho * gamma), "gamma": np.full(self.K, gamma)})

    def _pre(self, parts, k, z, b):
        g = (z @ self.D.T - b) @ self.W
        return z - parts["gamma"][k] * g, g

    def _pre_backward(self, parts, grads, k, z, b, g, vbar):
        grads["gamma"][k] -= np.sum(vbar * g)
        return vbar - parts["gamma"][k] * ((vbar @ self.W.T) @ self.D)


class TiLISTA(_ShrinkageArch):
    """ALISTA update with the matrix W learned as well."""

    arch_id = "tilista"

    def __init__(self, D: np.ndarray, K: int, rho: float = 0.1):
        D = np.asarray(D, dtype=float)
        m, n = D.shape
        layout = WeightLayout(
            (("W", (m, n)), ("psi", (K,)), ("gamma", (K,))), (("psi",), ("gamma",), ("W",))
        )
        super().__init__(layout, K, D, m)
        self.W0 = datafree_W(D)
        self.rho = float(rho)
        self.base_operator = ista_operator(D, rho)

    def params(self):
        return {"K": self.K, "rho": self.rho}

    def prior_mean(self):
        return self.layout.pack({"W": self.W0, "psi": np.zeros(self.K), "gamma": np.zeros(self.K)})

    def init_mean(self):
        gamma = 1.0 / np.linalg.norm(self.W0.T @ self.D, 2)
        return self.layout.pack(
            {"W": self.W0, "psi": np.full(self.K, self.rho * gamma), "gamma": np.full(self.K, gamma)}
        )

    def _pre(self, parts, k, z, b):
        r = z @ self.D.T - b
        g = r @ parts["W"]
        return z - parts["gamma"][k] * g, (r, g)

    def _pre_backward(self, parts, grads, k, z, b, cache, vbar):
        r, g = cache
        gamma = parts["gamma"][k]
        grads["gamma"][k] -= np.sum(vbar * g)
        grads["W"] -= gamma * (r.T @ vbar)
        return vbar - gamma * ((vbar @ parts["W"].T) @ self.D)


class LISTA(_ShrinkageArch):
    """z+ = shrink(W1_k z + W2_k b, psi_k) with per-step matrices."""

    arch_id = "lista"

    def __init__(self, D: np.ndarray, K: int, rho: float = 0.1, L: Optional[float] = None):
        D = np.asarray(D, dtype=float)
        m, n = D.shape
        layout = WeightLayout(
            (("psi", (K,)), ("W1", (K, n, n)), ("W2", (K, n, m))), (("psi",), ("W1",), ("W2",))
        )
        super().__init__(layout, K, D, m)
        self.rho = float(rho)
        self.L = power_iteration(D.T @ D) if L is None else float(L)
        self.base_operator = ista_operator(D, rho, self.L, form="affine")

    def params(self):
        return {"K": self.K, "rho": self.rho}

    def prior_mean(self):
        W1, W2 = ista_affine_weights(self.D, self.L)
        return self.layout.pack(
            {
                "psi": np.full(self.K, self.rho * (1.0 / self.L)),
                "W1": np.broadcast_to(W1, (self.K,) + W1.shape),
                "W2": np.broadcast_to(W2, (self.K,) + W2.shape),
            }
        )

    def _pre(self, parts, k, z, b):
        return z @ parts["W1"][k].T + b @ parts["W2"][k].T, None

    def _pre_backward(self, parts, grads, k, z, b, cache, vbar):
        grads["W1"][k] += vbar.T @ z
        grads["W2"][k] += vbar.T @ b
        return vbar @ parts["W1"][k]


class L2WS(LearnedArch):
    """ReLU network warm start followed by K gradient steps on 1/2 z'Pz + c'z."""

    arch_id = "l2ws"
    extendable = True

    def __init__(self, P: np.ndarray, layer_dims: Sequence[int], K: int, gamma: Optional[float] = None):
        P = np.asarray(P, dtype=float)
        dims = tuple(int(d) for d in layer_dims)
        if len(dims) < 2 or dims[0] != P.shape[0] or dims[-1] != P.shape[0]:
            raise ValueError(f"layer dims {dims} must start and end with the problem size {P.shape[0]}")
        views, groups = [], []
        for i in range(len(dims) - 1):
            views += [(f"W{i}", (dims[i], dims[i + 1])), (f"b{i}", (dims[i + 1],))]
            groups += [(f"W{i}",), (f"b{i}",)]
        super().__init__(WeightLayout(tuple(views), tuple(groups)), K, P.shape[0])
        self.P = P
        self.dims = dims
        self.n_layers = len(dims) - 1
        if gamma is None:
            eig = np.linalg.eigvalsh(P)
            gamma = 2.0 / (eig[0] + eig[-1])
        self.gamma = float(gamma)
        self.base_operator = gd_operator(P, self.gamma)

    def params(self):
        return {"K": self.K, "layer_dims": list(self.dims), "gamma": self.gamma}

    def prior_mean(self):
        return np.zeros(self.n_params)

    def init_mean(self):
        # zero weights make every ReLU inactive; use a small fixed random start
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(0)))
        parts = {}
        for i in range(self.n_layers):
            fan_in = self.dims[i]
            parts[f"W{i}"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (self.dims[i], self.dims[i + 1]))
            parts[f"b{i}"] = np.zeros(self.dims[i + 1])
        return self.layout.pack(parts)

    def warm_start(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
        return self._mlp(self.layout.unpack(theta), np.atleast_2d(np.asarray(x, dtype=float)))[0]

    def _mlp(self, parts, x):
        y, tape = x, []
        for i in range(self.n_layers):
            W, b = parts[f"W{i}"], parts[f"b{i}"]
            if y.shape[1] != W.shape[0]:
                raise ValueError(f"layer {i} expects width {W.shape[0]}, got {y.shape[1]}")
            pre = y @ W + b
            tape.append((y, pre))
            y = np.maximum(pre, 0.0) if i < self.n_layers - 1 else pre
        return y, tape

    def _step(self, z, c):
        return z - self.gamma * (z @ self.P + c)

    def iterates(self, theta, x, k_max=None):
        k_max = self._check_k(k_max)
        c = np.atleast_2d(np.asarray(x, dtype=float))
        z = self.warm_start(theta, c)
        out = [z]
        for _ in range(k_max):
            z = self._step(z, c)
            out.append(z)
        return out

    def _fp_loss(self, z, c):
        r = self._step(z, c) - z
        norm = np.linalg.norm(r, axis=1)
        safe = np.where(norm > 0.0, norm, 1.0)
        # d||r||/dz with r = -gamma (Pz + c)
        grad = -self.gamma * ((r / safe[:, None]) @ self.P.T)
        return norm, np.where(norm[:, None] > 0.0, grad, 0.0)

    def loss_vjp(self, theta, x, z_star, loss_id):
        parts = self.layout.unpack(theta)
        c = np.atleast_2d(np.asarray(x, dtype=float))
        z, tape = self._mlp(parts, c)
        for _ in range(self.K):
            z = self._step(z, c)
        loss, dz_final = self._final_loss(z, c, z_star, loss_id)

        def vjp(weights):
            grads = {name: np.zeros(shape) for name, shape in self.layout.views}
            ybar = dz_final * np.asarray(weights, dtype=float)[:, None]
            for _ in range(self.K):
                ybar = ybar - self.gamma * (ybar @ self.P)
            for i in range(self.n_layers - 1, -1, -1):
                y_in, pre = tape[i]
                if i < self.n_layers - 1:
                    ybar = np.where(pre > 0.0, ybar, 0.0)
                grads[f"W{i}"] += y_in.T @ ybar
                grads[f"b{i}"] += ybar.sum(axis=0)
                ybar = ybar @ parts[f"W{i}"].T
            return self.layout.pack(grads)

        return loss, vjp


def sample_weights(spec: GroupedGaussianSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """w' = w + xi * sqrt(s) with xi ~ N(0, I); returns (w', xi)."""
    if np.any(spec.s < 0.0):
        raise ValueError("posterior variances must be nonnegative")
    xi = rng.standard_normal(spec.w.size)
    return spec.w + xi * np.sqrt(spec.s), xi


def l2ws_distance_bound(
    arch: L2WS, w: np.ndarray, s: np.ndarray, x_bar: float, z_bar: float, delta: float
) -> float:
    """High-probability bound on the distance from the learned warm start to the solution set.

    Each layer's weight noise [Sigma; sigma'] has spectral norm at most
    tau_i = v_i sqrt(2 log(L (m_i + n_i + 1) / delta)) with probability
    1 - delta / L, which feeds a layer-by-layer norm recursion.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    mean = arch.layout.unpack(w)
    var = arch.layout.unpack(s)
    L = arch.n_layers
    a = float(x_bar)
    for i in range(L):
        W, b = mean[f"W{i}"], mean[f"b{i}"]
        block = np.vstack([var[f"W{i}"], var[f"b{i}"][None, :]])
        v2 = max(block.sum(axis=1).max(), block.sum(axis=0).max())
        m_i, n_i = W.shape
        tau = math.sqrt(v2) * math.sqrt(2.0 * math.log(L * (m_i + n_i + 1) / delta))
        a = (np.linalg.norm(W, 2) + np.linalg.norm(b) + tau) * (a + 1.0)
    return float(z_bar + a)


def build_arch(arch_id: str, family, params: dict) -> LearnedArch:
    """Architecture from its id, the problem family and the stored parameters."""
    if arch_id == "alista":
        return ALISTA(family.D, params["K"], rho=params.get("rho", 0.1))
    if arch_id == "tilista":
        return TiLISTA(family.D, params["K"], rho=params.get("rho", 0.1))
    if arch_id == "lista":
        return LISTA(family.D, params["K"], rho=params.get("rho", 0.1))
    if arch_id == "l2ws":
        return L2WS(family.P, params["layer_dims"], params["K"], params.get("gamma"))
    raise ValueError(f"unknown architecture {arch_id!r}")


def posterior_to_json(arch: LearnedArch, spec: GroupedGaussianSpec, grid: PriorGridSpec) -> str:
    record = {
        "architecture": arch.arch_id,
        "params": arch.params(),
        "w": spec.w.tolist(),
        "s": spec.s.tolist(),
        "w0": spec.w0.tolist(),
        "lambda": spec.lam.tolist(),
        "partition": [ix.tolist() for ix in spec.partition],
        "grid": {"lambda_max": grid.lambda_max, "b": grid.b},
    }
    return json.dumps(record, indent=1, sort_keys=True)


def posterior_from_json(text: str) -> tuple[str, dict, GroupedGaussianSpec, PriorGridSpec]:
    rec = json.loads(text)
    spec = GroupedGaussianSpec(
        np.array(rec["w"]),
        np.array(rec["s"]),
        np.array(rec["w0"]),
        tuple(np.array(ix, dtype=int) for ix in rec["partition"]),
        np.array(rec["lambda"]),
    )
    return rec["architecture"], rec["params"], spec, PriorGridSpec(**rec["grid"])
