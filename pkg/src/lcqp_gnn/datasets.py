"""Seeded generators for generic QP, soft-margin SVM and Markowitz portfolio instances.

All randomness comes from :class:`~lcqp_gnn.rng.SplitMix64`, so one ``GenConfig``
always yields the same instance bytes.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.optimize import linprog

from .core import LcqpInstance, SparseMatrix, to_equality_form
from .nullspace import has_full_row_rank
from .rng import SplitMix64

FAMILIES = ("generic", "svm", "portfolio")
MAX_RETRIES = 100


@dataclass(frozen=True)
class GenConfig:
    family: str = "generic"
    n: int = 20
    m: int = 10
    density_a: float = 0.5
    density_q: float = 0.5
    svm_lambda: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.n < 1 or (self.family != "portfolio" and self.m < 1):
            raise ValueError("n and m must be at least 1")
        for name in ("density_a", "density_q"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.family == "svm" and self.m % 2:
            raise ValueError("svm family needs an even number of data points m")

    def to_dict(self) -> dict:
        return asdict(self)


def _spd_from_rng(rng: SplitMix64, n: int, density: float) -> SparseMatrix:
    il, jl = np.tril_indices(n, k=-1)
    vals = rng.normal(len(il))
    keep = rng.bernoulli(density, len(il))
    L = np.eye(n)
    L[il[keep], jl[keep]] = vals[keep]
    M = L @ L.T + 1e-3 * np.eye(n)
    M = 0.5 * (M + M.T)
    return SparseMatrix.from_dense(M, symmetric=True)


def make_sparse_spd(n: int, density: float, seed: int) -> SparseMatrix:
    """``L L' + 1e-3 I`` with unit lower-triangular L whose strict lower part is N(0,1) kept w.p. density."""
    if not 0.0 <= density <= 1.0:
        raise ValueError("density must lie in [0, 1]")
    return _spd_from_rng(SplitMix64(seed), n, density)


def _sparse_normal(rng: SplitMix64, rows: int, cols: int, density: float,
                   loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
    M = rng.normal(rows * cols, loc, scale).reshape(rows, cols)
    M *= rng.bernoulli(density, rows * cols).reshape(rows, cols)
    # resample rows emptied by dropout
    for i in range(rows):
        while not np.any(M[i]):
            M[i] = rng.normal(cols, loc, scale) * rng.bernoulli(density, cols)
            if density == 0.0:
                M[i, int(rng.uniform(1)[0] * cols)] = rng.normal(1, loc, scale)[0]
    return M


def _has_interior(A: np.ndarray, b: np.ndarray, tol: float = 1e-6) -> bool:
    """Does ``{x > 0 : Ax < b}`` contain a point with margin above ``tol``?"""
    m, n = A.shape
    # variables (x, t): maximize t s.t. Ax + t <= b, t - x <= 0, t <= 1
    A_ub = np.block([[A, np.ones((m, 1))], [-np.eye(n), np.ones((n, 1))]])
    b_ub = np.concatenate([b, np.zeros(n)])
    cost = np.zeros(n + 1)
    cost[-1] = -1.0
    res = linprog(cost, A_ub=A_ub, b_ub=b_ub,
                  bounds=[(None, None)] * n + [(None, 1.0)], method="highs")
    return res.status == 0 and -res.fun > tol


def gen_generic(cfg: GenConfig) -> LcqpInstance:
    """``min 1/2 x'Qx + c'x  s.t. Ax <= b, x >= 0`` converted to equality form with m slacks."""
    rng = SplitMix64(cfg.seed)
    for _ in range(MAX_RETRIES):
        A = _sparse_normal(rng, cfg.m, cfg.n, cfg.density_a)
        b = rng.normal(cfg.m)
        c = rng.normal(cfg.n)
        Q = _spd_from_rng(rng, cfg.n, cfg.density_q)
        if _has_interior(A, b):
            return to_equality_form(Q, A, b, c, ["<="] * cfg.m)
    raise RuntimeError(f"no instance with nonempty interior after {MAX_RETRIES} draws")


def gen_svm(cfg: GenConfig) -> LcqpInstance:
    """Soft-margin SVM ``min w'w + lam 1'xi  s.t. y * (Xw) >= 1 - xi, xi >= 0``.

    The free weight vector is split as ``w = wp - wm`` and each margin row gets a
    surplus variable, giving variables ``(wp, wm, xi, surplus)``. The quadratic
    term becomes ``wp'wp + wm'wm``, which has the same optimum because an optimal
    split never has both parts positive.
    """
    rng = SplitMix64(cfg.seed)
    n, m = cfg.n, cfg.m
    half = m // 2
    tau = cfg.density_a
    mean = 1.0 / (n * tau)
    std = np.sqrt(mean)
    X1 = _sparse_normal(rng, half, n, tau, -mean, std)
    X2 = _sparse_normal(rng, half, n, tau, mean, std)
    X = np.vstack([X1, X2])
    y = np.concatenate([np.ones(half), -np.ones(half)])
    YX = y[:, None] * X
    nv = 2 * n + 2 * m
    A = np.hstack([YX, -YX, np.eye(m), -np.eye(m)])
    q = np.zeros(nv)
    q[: 2 * n] = 2.0
    c = np.zeros(nv)
    c[2 * n: 2 * n + m] = cfg.svm_lambda
    return LcqpInstance(nv, m, SparseMatrix.from_dense(np.diag(q), symmetric=True),
                        SparseMatrix.from_dense(A), np.ones(m), c)


def gen_portfolio(cfg: GenConfig) -> LcqpInstance:
    """``min x' Sigma x  s.t. mu'x = r, 1'x = 1, x >= 0``; r is redrawn until strictly inside (min mu, max mu)."""
    rng = SplitMix64(cfg.seed)
    n = cfg.n
    if n < 2:
        raise ValueError("portfolio family needs n >= 2")
    for _ in range(MAX_RETRIES):
        Sigma = _spd_from_rng(rng, n, cfg.density_q)
        mu = rng.normal(n)
        r = float(rng.uniform(1)[0])
        lo, hi = mu.min(), mu.max()
        if lo < r < hi and hi - lo > 1e-8:
            break
    else:
        raise RuntimeError(f"no feasible return target after {MAX_RETRIES} draws")
    Q = SparseMatrix(n, n, Sigma.rows, Sigma.cols, 2.0 * Sigma.vals, symmetric=True)
    A = SparseMatrix.from_dense(np.vstack([mu, np.ones(n)]))
    return LcqpInstance(n, 2, Q, A, np.array([r, 1.0]), np.zeros(n))


_GENERATORS = {"generic": gen_generic, "svm": gen_svm, "portfolio": gen_portfolio}


def generate(cfg: GenConfig) -> LcqpInstance:
    inst = _GENERATORS[cfg.family](cfg)
    if not has_full_row_rank(inst.A):
        # slack and portfolio rows are full rank by construction; guard anyway
        for k in range(1, MAX_RETRIES + 1):
            inst = _GENERATORS[cfg.family](replace(cfg, seed=(cfg.seed + k * 0x9E3779B9) % 2**64))
            if has_full_row_rank(inst.A):
                break
        else:
            raise RuntimeError("could not draw a full-rank constraint matrix")
    return inst


def default_workers() -> int:
    env = os.environ.get("LCQP_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def generate_batch(cfg: GenConfig, count: int, workers: int | None = 1) -> list[LcqpInstance]:
    """Instances for seeds ``cfg.seed + i``, i < count, in seed order."""
    cfgs = [replace(cfg, seed=cfg.seed + i) for i in range(count)]
    workers = default_workers() if workers is None else workers
    if workers <= 1 or count <= 1:
        return [generate(c) for c in cfgs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(generate, cfgs))
