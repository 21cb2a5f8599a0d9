"""Parametric problem families and IDX image ingestion."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .rng import SPLITS, stream

IDX_UBYTE_3D = 0x00000803


@dataclass(frozen=True)
class InstanceBatch:
    """Stacked instance parameters x (N, p) and optional solutions z* (N, n)."""

    x: np.ndarray
    z_star: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.x.shape[0]


class ParametricFamily:
    """Fixed problem data plus a seeded sampler of instances.

    Instance i of a split is drawn from its own stream, so any subset can be
    materialized independently and in any order.
    """

    family_id = "base"

    def __init__(self, seed: int):
        self.seed = int(seed)

    def draw(self, rng: np.random.Generator) -> tuple[np.ndarray, Optional[np.ndarray]]:
        raise NotImplementedError

    def sample(self, n: int, split: str = "train", start: int = 0) -> InstanceBatch:
        if n < 1:
            raise ValueError("need at least one instance")
        xs, zs = [], []
        for i in range(start, start + n):
            x, z = self.draw(stream(self.seed, "instance", SPLITS[split], i))
            xs.append(x)
            zs.append(z)
        z_star = None if zs[0] is None else np.stack(zs)
        return InstanceBatch(np.stack(xs), z_star)


class ContractionFamily(ParametricFamily):
    """Toy family: x ~ U[-1, 1]^dim with solution z*(x) = x.

    Paired with the ``contraction`` operator T(z, x) = beta z + (1 - beta) x.
    """

    family_id = "contraction"

    def __init__(self, dim: int, seed: int):
        super().__init__(seed)
        self.dim = int(dim)

    def draw(self, rng):
        x = rng.uniform(-1.0, 1.0, self.dim)
        return x, x.copy()


class SparseCodingFamily(ParametricFamily):
    """Lasso instances b = D z + noise with a sparse Gaussian z."""

    family_id = "sparse_coding"

    def __init__(self, m: int, n: int, seed: int, keep_prob: float = 0.1, snr_db: float = 40.0):
        super().__init__(seed)
        if not 0.0 < keep_prob <= 1.0:
            raise ValueError("keep_prob must lie in (0, 1]")
        if not np.isfinite(snr_db):
            raise ValueError("snr_db must be finite")
        self.m, self.n = int(m), int(n)
        self.keep_prob = float(keep_prob)
        self.snr_db = float(snr_db)
        rng = stream(self.seed, "problem_data", 0)
        D = rng.normal(0.0, 1.0 / np.sqrt(self.m), (self.m, self.n))
        self.D = D / np.linalg.norm(D, axis=0)

    def draw(self, rng):
        while True:
            mask = rng.random(self.n) < self.keep_prob
            z = rng.standard_normal(self.n) * mask
            if np.any(z != 0.0):
                break
        clean = self.D @ z
        sigma2 = (clean @ clean / self.m) / 10.0 ** (self.snr_db / 10.0)
        b = clean + rng.normal(0.0, np.sqrt(sigma2), self.m)
        return b, z


class UnconstrainedQPFamily(ParametricFamily):
    """min 1/2 z'Pz + c'z with P = diag(100, ..., 1, ...) and wide-range c."""

    family_id = "unconstrained_qp"

    def __init__(self, n: int, seed: int):
        super().__init__(seed)
        if n < 2 or n % 2:
            raise ValueError("n must be even and at least 2")
        self.n = int(n)
        half = self.n // 2
        self.diag = np.concatenate([np.full(half, 100.0), np.ones(half)])
        self.P = np.diag(self.diag)
        self.scale = np.concatenate([np.full(half, 1e4), np.ones(half)])

    def draw(self, rng):
        c = self.scale * rng.uniform(-10.0, 10.0, self.n)
        return c, -c / self.diag

    def sup_norms(self) -> tuple[float, float]:
        """Upper bounds on ||c|| and on ||z*(c)|| over the whole family."""
        c_max = 10.0 * self.scale
        return float(np.linalg.norm(c_max)), float(np.linalg.norm(c_max / self.diag))


def gaussian_kernel(size: int) -> np.ndarray:
    """Normalized 1-D Gaussian taps with std size/4."""
    if size < 1:
        raise ValueError("blur size must be positive")
    t = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(t**2) / (2.0 * (size / 4.0) ** 2))
    return g / g.sum()


def blur_matrix(side: int, size: int) -> np.ndarray:
    """(side^2, side^2) matrix of a separable Gaussian blur with zero padding.

    Tap t touches pixel offset t - size // 2 (correlation convention), and
    images are flattened row-major.
    """
    g = gaussian_kernel(size)
    B = np.zeros((side, side))
    for i in range(side):
        for t, w in enumerate(g):
            j = i + t - size // 2
            if 0 <= j < side:
                B[i, j] = w
    return np.kron(B, B)


def synthetic_images(rng: np.random.Generator, count: int, side: int) -> np.ndarray:
    """Random sparse blobs in [0, 1]."""
    yy, xx = np.mgrid[0:side, 0:side]
    out = np.zeros((count, side, side))
    for c in range(count):
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(0, side, 2)
            width = rng.uniform(0.5, side / 4.0)
            amp = rng.uniform(0.3, 1.0)
            out[c] += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
    return np.clip(out, 0.0, 1.0)


class DeblurringFamily(ParametricFamily):
    """Box-constrained deblurring QP: min ||Ay - x||^2 + rho 1'y over [0, 1]^n.

    Written as 1/2 y'Py + q(x)'y with P = 2A'A and q(x) = -2A'x + rho 1.
    """

    family_id = "deblurring"

    def __init__(
        self,
        side: int,
        seed: int,
        blur_size: int = 8,
        noise_std: float = 0.001,
        rho: float = 1e-4,
        images: Optional[np.ndarray] = None,
    ):
        super().__init__(seed)
        self.side = int(side)
        self.n = self.side**2
        self.noise_std = float(noise_std)
        self.rho = float(rho)
        self.A = blur_matrix(self.side, int(blur_size))
        self.P = 2.0 * self.A.T @ self.A
        self.lower = np.zeros(self.n)
        self.upper = np.ones(self.n)
        if images is not None:
            images = np.asarray(images, dtype=float)
            if images.ndim != 3 or images.shape[1:] != (self.side, self.side):
                raise ValueError(
                    f"image source has shape {images.shape[1:]}, expected ({self.side}, {self.side})"
                )
        self.images = images

    def q_of(self, x: np.ndarray) -> np.ndarray:
        return -2.0 * np.asarray(x) @ self.A + self.rho

    def true_image(self, rng: np.random.Generator) -> np.ndarray:
        if self.images is None:
            return synthetic_images(rng, 1, self.side)[0].ravel()
        return self.images[rng.integers(len(self.images))].ravel()

    def draw(self, rng):
        y = self.true_image(rng)
        x = self.A @ y
        if self.noise_std > 0:
            x = x + rng.normal(0.0, self.noise_std, self.n)
        return x, None

    def solve(self, x: np.ndarray, tol: float = 1e-10, max_iter: int = 200000) -> np.ndarray:
        """High-accuracy solutions by Douglas-Rachford run to fp_residual <= tol."""
        from .solvers import dr_boxqp_operator

        op = dr_boxqp_operator(self.P, self.lower, self.upper, q_map=self.q_of)
        x = np.atleast_2d(x)
        z = np.zeros((x.shape[0], self.n))
        for _ in range(max_iter):
            z_next = op(z, x)
            res = np.linalg.norm(z_next - z, axis=1)
            z = z_next
            if np.all(res <= tol):
                return op.solution(z, x)
        raise RuntimeError(f"Douglas-Rachford did not reach residual {tol} in {max_iter} steps")


def least_squares_solution(P: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Unconstrained minimizer of 1/2 y'Py + q'y (P positive definite)."""
    return -cho_solve(cho_factor(P), q)


def load_idx(path: str) -> np.ndarray:
    """Images from an unsigned-byte, 3-D IDX file, scaled to [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    return parse_idx(blob)


def parse_idx(blob: bytes) -> np.ndarray:
    if len(blob) < 4:
        raise ValueError(f"IDX parse error at byte offset {len(blob)}: missing magic number")
    (magic,) = struct.unpack_from(">I", blob, 0)
    if magic != IDX_UBYTE_3D:
        raise ValueError(f"IDX parse error at byte offset 0: bad magic 0x{magic:08x}")
    if len(blob) < 16:
        raise ValueError(f"IDX parse error at byte offset {len(blob)}: truncated header")
    count, rows, cols = struct.unpack_from(">3I", blob, 4)
    need = 16 + count * rows * cols
    if len(blob) < need:
        raise ValueError(
            f"IDX parse error at byte offset {len(blob)}: payload truncated, expected {need} bytes"
        )
    if len(blob) > need:
        raise ValueError(f"IDX parse error at byte offset {need}: trailing bytes after payload")
    pixels = np.frombuffer(blob, dtype=np.uint8, offset=16, count=count * rows * cols)
    return pixels.reshape(count, rows, cols) / 255.0


def write_idx(path: str, images: Sequence[np.ndarray]) -> None:
    """Write uint8 images (values 0..255) as a 3-D IDX file."""
    arr = np.asarray(images)
    if arr.ndim != 3:
        raise ValueError("images must be a stack of 2-D arrays")
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">4I", IDX_UBYTE_3D, *arr.shape))
        fh.write(arr.tobytes())
