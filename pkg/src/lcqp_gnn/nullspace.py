"""Null-space basis of A, the orthogonal projector onto it, and a strictly interior start."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LcqpInstance, SparseMatrix


class RankDeficientError(ValueError):
    """Raised when A does not have full row rank."""


class InfeasibleStartError(RuntimeError):
    """The phase-one IPM did not converge; the constraint set looks empty."""


@dataclass(frozen=True)
class NullSpaceProjector:
    """Orthonormal kernel basis ``B`` (n x (n-m)); the projector is ``d -> B (B'd)``."""

    basis: np.ndarray

    @property
    def n(self) -> int:
        return self.basis.shape[0]

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    def __call__(self, d) -> np.ndarray:
        return project(self, d)


def _dense(A) -> np.ndarray:
    return A.to_dense() if isinstance(A, SparseMatrix) else np.atleast_2d(np.asarray(A, dtype=float))


def compute_nullspace(A, rank_tol: float = 1e-10) -> NullSpaceProjector:
    """Kernel of A from the complete Householder QR of A'.

    With ``A' = [Q1 Q2] [R; 0]`` the last ``n - m`` columns ``Q2`` span ``ker A``.
    A diagonal entry of R below ``rank_tol * ||A||_2`` signals rank deficiency.
    """
    M = _dense(A)
    m, n = M.shape
    if m > n:
        raise RankDeficientError(f"more constraints than variables ({m} > {n})")
    if m == 0:
        return NullSpaceProjector(np.eye(n))
    Qf, R = np.linalg.qr(M.T, mode="complete")
    norm = np.linalg.norm(M, 2)
    diag = np.abs(np.diag(R[:m, :m]))
    if norm == 0.0 or diag.min() < rank_tol * norm:
        raise RankDeficientError(
            f"A is rank deficient: min |R_ii| = {diag.min():.3e}, ||A|| = {norm:.3e}")
    return NullSpaceProjector(np.ascontiguousarray(Qf[:, m:]))


def has_full_row_rank(A, rank_tol: float = 1e-10) -> bool:
    try:
        compute_nullspace(A, rank_tol)
    except RankDeficientError:
        return False
    return True


def project(p: NullSpaceProjector, d) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if d.shape[0] != p.n:
        raise ValueError(f"dimension mismatch: {d.shape[0]} != {p.n}")
    return p.basis @ (p.basis.T @ d)


def feasible_initial_point(inst: LcqpInstance, ipm_cfg=None, polish: bool = True,
                           cost: str = "ones") -> np.ndarray:
    """Strictly positive x0 with A x0 = b from an IPM run on a trivial LP.

    The LP keeps the constraints of ``inst`` with ``Q = 0`` and ``c = 1``
    (``cost="ones"``) or ``c = 0`` (``cost="zero"``). The IPM stops at the first
    iterate with ``||Ax - b||_inf <= tol_kkt``, which is still strictly interior.
    With ``c = 0`` on an unbounded feasible set the iterates drift far along the
    recession directions, so the default cost is ``1``.
    The iterate is polished with one least-squares correction
    ``x0 - A'(AA')^{-1}(A x0 - b)`` when that keeps every entry positive.
    """
    from .ipm import IpmConfig, ipm_solve

    if cost not in ("ones", "zero"):
        raise ValueError(f"unknown phase-one cost {cost!r}")
    cfg = ipm_cfg or IpmConfig(stop_rule="primal", tol_kkt=1e-10)
    c = np.ones(inst.n) if cost == "ones" else np.zeros(inst.n)
    lp = LcqpInstance(inst.n, inst.m, SparseMatrix.zeros(inst.n, inst.n, symmetric=True),
                      inst.A, inst.b, c)
    report, _, it = ipm_solve(lp, cfg)
    if not report.extra.get("converged", False):
        raise InfeasibleStartError(
            f"phase-one IPM did not converge: residuals {report.extra.get('kkt_residuals')}")
    x = it.x.copy()
    if polish and inst.m:
        A = inst.A.to_dense()
        r = A @ x - inst.b
        corr = A.T @ np.linalg.solve(A @ A.T, r)
        cand = x - corr
        if np.all(cand > 0) and np.max(np.abs(A @ cand - inst.b)) <= np.max(np.abs(r)):
            x = cand
    return x
