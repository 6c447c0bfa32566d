"""Primal-dual interior-point solver for LCQPs with CG or direct Newton solves.

Each outer iteration solves the augmented Newton system

    [[Q + X^-1 S, -A'], [-A, 0]] [dx; dlam] = [X^-1 sigma mu 1 - Qx - c + A'lam; Ax - b]

recovers ``ds = -X^-1 S dx - s + X^-1 sigma mu 1``, takes a 0.99-damped step of
length alpha, and shrinks the barrier parameter geometrically, ``mu <- sigma mu``.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.linalg

from .core import LcqpInstance, SolveReport, constraint_violation, kkt_residuals, objective

log = logging.getLogger(__name__)

DAMPING = 0.99


class CGBreakdown(ArithmeticError):
    """The CG denominator vanished or turned negative, or the final residual is too large."""

    def __init__(self, msg: str, residual: float, iteration: int):
        super().__init__(f"{msg} (iteration {iteration}, residual {residual:.3e})")
        self.residual = residual
        self.iteration = iteration


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass
class IpmIterate:
    x: np.ndarray
    lam: np.ndarray
    s: np.ndarray
    mu: float

    def copy(self) -> "IpmIterate":
        return IpmIterate(self.x.copy(), self.lam.copy(), self.s.copy(), float(self.mu))


@dataclass(frozen=True)
class IpmConfig:
    sigma: float = 0.5
    max_outer: int = 200
    tol_kkt: float = 1e-8
    cg_max: int | None = None  # default n + m
    cg_tol: float = 1e-10
    inner: str = "direct"  # "direct" or "cg"
    cg_alpha: str = "residual"  # "residual" (r'Pr) or "textbook" (p'Pp)
    fallback: bool = True
    line_search: str = "exact"  # "exact" or "eps_continuous"
    eps: float = 1e-8
    stop_rule: str = "kkt"  # "kkt": all residuals; "primal": only ||Ax - b||_inf

    def __post_init__(self):
        if not 0.0 < self.sigma < 1.0:
            raise ValueError("sigma must lie in (0, 1)")
        if self.inner not in ("direct", "cg"):
            raise ValueError(f"unknown inner solver {self.inner!r}")
        if self.cg_alpha not in ("residual", "textbook"):
            raise ValueError(f"unknown cg_alpha {self.cg_alpha!r}")
        if self.line_search not in ("exact", "eps_continuous"):
            raise ValueError(f"unknown line search {self.line_search!r}")
        if self.stop_rule not in ("kkt", "primal"):
            raise ValueError(f"unknown stop rule {self.stop_rule!r}")


def initial_iterate(inst: LcqpInstance) -> IpmIterate:
    x = np.ones(inst.n)
    s = np.ones(inst.n)
    return IpmIterate(x, np.zeros(inst.m), s, float(x @ s / inst.n))


# ---------------------------------------------------------------- conjugate gradient

@dataclass
class CGTrace:
    """Per-iteration history of the CG recurrences; index 0 is the initial state."""

    r: list = field(default_factory=list)
    p: list = field(default_factory=list)
    w: list = field(default_factory=list)
    alpha: list = field(default_factory=list)
    beta: list = field(default_factory=list)


def _as_operator(M) -> Callable[[np.ndarray], np.ndarray]:
    if callable(M):
        return M
    return lambda v: M @ v


def cg_run(M, rhs, max_iter: int | None = None, tol: float = 0.0,
           alpha_rule: str = "residual", trace: CGTrace | None = None,
           breakdown_tol: float | None = 1e-14) -> np.ndarray:
    """CG recurrences from ``w = 0, r = p = rhs``.

    ``alpha_rule="residual"`` uses ``alpha = r'r / r'Mr``; ``"textbook"`` uses
    ``alpha = r'r / p'Mp``. The other updates are ``w += alpha p``,
    ``r -= alpha M p``, ``beta = r_new'r_new / r'r``, ``p = beta p + r_new``.
    Stops after ``max_iter`` (default ``len(rhs)``) iterations or once
    ``||r|| <= tol``. A denominator ``<= breakdown_tol ||.||^2`` raises
    :class:`CGBreakdown`; ``breakdown_tol=None`` runs the recurrences unchecked.
    """
    op = _as_operator(M)
    r = np.array(rhs, dtype=np.float64)
    w = np.zeros_like(r)
    p = r.copy()
    k_max = len(r) if max_iter is None else max_iter
    if trace is not None:
        trace.r.append(r.copy()); trace.p.append(p.copy()); trace.w.append(w.copy())
    rr = float(r @ r)
    for k in range(1, k_max + 1):
        if np.sqrt(rr) <= tol or rr == 0.0:
            break
        Mp = op(p)
        if alpha_rule == "residual":
            den = float(r @ op(r))
            ref = rr
        else:
            den = float(p @ Mp)
            ref = float(p @ p)
        if breakdown_tol is not None and den <= breakdown_tol * ref:
            raise CGBreakdown("non-positive curvature in CG", np.sqrt(rr), k)
        alpha = rr / den
        w = w + alpha * p
        r = r - alpha * Mp
        rr_new = float(r @ r)
        beta = rr_new / rr
        p = beta * p + r
        rr = rr_new
        if trace is not None:
            trace.r.append(r.copy()); trace.p.append(p.copy()); trace.w.append(w.copy())
            trace.alpha.append(alpha); trace.beta.append(beta)
    return w


def cg_standard(M, rhs, cg_tol: float = 1e-12, max_iter: int | None = None,
                alpha_rule: str = "residual") -> np.ndarray:
    """Reference CG for a symmetric operator; see :func:`cg_run` for the recurrences."""
    rhs = np.asarray(rhs, dtype=np.float64)
    if not callable(M):
        M = np.asarray(M, dtype=np.float64)
        if M.shape != (len(rhs), len(rhs)):
            raise ValueError("dimension mismatch between matrix and rhs")
    return cg_run(M, rhs, max_iter=max_iter, tol=cg_tol, alpha_rule=alpha_rule)


# ---------------------------------------------------------------- augmented system

def augmented_rhs(inst: LcqpInstance, it: IpmIterate, sigma_mu: float) -> np.ndarray:
    top = sigma_mu / it.x - inst.Q.matvec(it.x) - inst.c + inst.A.rmatvec(it.lam)
    bot = inst.A.matvec(it.x) - inst.b
    return np.concatenate([top, bot])


def augmented_operator(inst: LcqpInstance, it: IpmIterate) -> Callable[[np.ndarray], np.ndarray]:
    n = inst.n
    d = it.s / it.x

    def op(v):
        vx, vl = v[:n], v[n:]
        return np.concatenate([inst.Q.matvec(vx) + d * vx - inst.A.rmatvec(vl),
                               -inst.A.matvec(vx)])
    return op


def augmented_matrix(inst: LcqpInstance, it: IpmIterate) -> np.ndarray:
    n, m = inst.n, inst.m
    P = np.zeros((n + m, n + m))
    A = inst.A.to_dense()
    P[:n, :n] = inst.Q.to_dense() + np.diag(it.s / it.x)
    P[:n, n:] = -A.T
    P[n:, :n] = -A
    return P


def direct_augmented_solve(inst: LcqpInstance, it: IpmIterate, sigma_mu: float,
                           refine_steps: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Bunch-Kaufman LDL' solve of the augmented system plus iterative refinement."""
    P = augmented_matrix(inst, it)
    rhs = augmented_rhs(inst, it, sigma_mu)
    w = _sym_solve(P, rhs, refine_steps)
    return w[: inst.n], w[inst.n:]


def _sym_solve(P: np.ndarray, rhs: np.ndarray, refine_steps: int = 3) -> np.ndarray:
    if not np.all(np.isfinite(P)):
        raise SingularSystemError("augmented matrix has non-finite entries")
    try:
        # near the boundary X^-1 S is badly scaled; refinement below handles accuracy
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            w = scipy.linalg.solve(P, rhs, assume_a="sym", check_finite=False)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularSystemError(f"augmented matrix is singular: {exc}") from exc
    scale = max(np.linalg.norm(rhs), np.finfo(float).tiny)
    for _ in range(refine_steps):
        res = rhs - P @ w
        if np.linalg.norm(res) <= 1e-8 * scale:
            break
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            w = w + scipy.linalg.solve(P, res, assume_a="sym", check_finite=False)
    if not np.all(np.isfinite(w)):
        raise SingularSystemError("augmented solve produced non-finite values")
    return w


@dataclass
class InnerStats:
    cg_calls: int = 0
    breakdowns: int = 0
    fallbacks: int = 0
    messages: list = field(default_factory=list)


def cg_augmented(inst: LcqpInstance, it: IpmIterate, sigma_mu: float,
                 cfg: IpmConfig = IpmConfig(inner="cg"),
                 stats: InnerStats | None = None,
                 trace: CGTrace | None = None) -> tuple[np.ndarray, np.ndarray]:
    """CG on the augmented system for ``n + m`` iterations, optionally falling back to LDL'.

    Success requires the true residual ``||P w - r0||_inf <= cg_tol * max(1, ||r0||_inf)``.
    Breakdowns are logged and counted in ``stats``; with ``cfg.fallback`` off they raise.
    """
    rhs = augmented_rhs(inst, it, sigma_mu)
    op = augmented_operator(inst, it)
    k_max = cfg.cg_max if cfg.cg_max is not None else inst.n + inst.m
    if stats is not None:
        stats.cg_calls += 1
    scale = max(1.0, float(np.max(np.abs(rhs)))) if len(rhs) else 1.0
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            w = cg_run(op, rhs, max_iter=k_max, tol=0.0, alpha_rule=cfg.cg_alpha, trace=trace)
            res = float(np.max(np.abs(op(w) - rhs))) if len(rhs) else 0.0
        if not np.isfinite(res) or res > cfg.cg_tol * scale:
            raise CGBreakdown("CG residual above tolerance", res, k_max)
    except CGBreakdown as exc:
        log.debug("cg_augmented: %s", exc)
        if stats is not None:
            stats.breakdowns += 1
            stats.messages.append(str(exc))
        if not cfg.fallback:
            raise
        if stats is not None:
            stats.fallbacks += 1
        return direct_augmented_solve(inst, it, sigma_mu)
    return w[: inst.n], w[inst.n:]


def recover_delta_s(it: IpmIterate, dx, sigma_mu: float) -> np.ndarray:
    """``ds = -X^-1 S dx - s + X^-1 sigma mu 1``."""
    return -it.s * dx / it.x - it.s + sigma_mu / it.x


# ---------------------------------------------------------------- line search

def _ratio_exact(v, dv) -> float:
    neg = dv < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-v[neg] / dv[neg]))


def eps_ratios(v, dv, eps: float = 1e-8) -> np.ndarray:
    """Per-entry continuous ratios ``v / -min(-eps, dv)``."""
    return v / -np.minimum(-eps, dv)


def step_length_primal_dual(x, dx, s, ds, rule: str = "exact", eps: float = 1e-8) -> float:
    """``min(1, max step keeping x >= 0, max step keeping s >= 0)``."""
    x, dx, s, ds = (np.asarray(v, dtype=np.float64) for v in (x, dx, s, ds))
    if rule == "exact":
        return float(min(1.0, _ratio_exact(x, dx), _ratio_exact(s, ds)))
    if rule == "eps_continuous":
        ax = float(np.min(eps_ratios(x, dx, eps))) if len(x) else np.inf
        as_ = float(np.min(eps_ratios(s, ds, eps))) if len(s) else np.inf
        return float(min(1.0, ax, as_))
    raise ValueError(f"unknown line search rule {rule!r}")


# ---------------------------------------------------------------- outer loop

def solve_newton(inst: LcqpInstance, it: IpmIterate, sigma_mu: float, cfg: IpmConfig,
                 stats: InnerStats | None = None) -> tuple[np.ndarray, np.ndarray]:
    if cfg.inner == "direct":
        return direct_augmented_solve(inst, it, sigma_mu)
    return cg_augmented(inst, it, sigma_mu, cfg, stats)


def ipm_step(inst: LcqpInstance, it: IpmIterate, cfg: IpmConfig,
             stats: InnerStats | None = None, newton=None) -> tuple[IpmIterate, dict]:
    """One outer iteration; ``newton`` optionally supplies a precomputed ``(dx, dlam)``."""
    sigma_mu = cfg.sigma * it.mu
    dx, dlam = newton if newton is not None else solve_newton(inst, it, sigma_mu, cfg, stats)
    ds = recover_delta_s(it, dx, sigma_mu)
    alpha = step_length_primal_dual(it.x, dx, it.s, ds, cfg.line_search, cfg.eps)
    step = DAMPING * alpha
    nxt = IpmIterate(it.x + step * dx, it.lam + step * dlam, it.s + step * ds, cfg.sigma * it.mu)
    return nxt, {"alpha": alpha, "dx": dx, "dlam": dlam, "ds": ds}


def ipm_solve(inst: LcqpInstance, cfg: IpmConfig = IpmConfig(),
              start: IpmIterate | None = None):
    """Run the IPM from ``x = s = 1, lam = 0`` until every KKT residual is below ``tol_kkt``.

    Returns ``(report, trajectory, final_iterate)``; ``trajectory[t]`` is x after
    t outer iterations, so ``trajectory[0]`` is the starting point.
    """
    t0 = time.perf_counter()
    it = start.copy() if start is not None else initial_iterate(inst)
    stats = InnerStats()
    traj = [it.x.copy()]
    res = kkt_residuals(inst, it.x, it.lam, it.s)
    k = 0
    status = "max_outer"
    while True:
        if (res[0] if cfg.stop_rule == "primal" else max(res)) <= cfg.tol_kkt:
            status = "converged"
            break
        if k >= cfg.max_outer:
            break
        try:
            it, _ = ipm_step(inst, it, cfg, stats)
        except SingularSystemError as exc:
            status = f"singular: {exc}"
            break
        k += 1
        traj.append(it.x.copy())
        res = kkt_residuals(inst, it.x, it.lam, it.s)
    if status != "converged":
        log.warning("IPM stopped without convergence (%s); residuals %s", status, res)
    report = SolveReport(
        x=it.x.copy(), objective=objective(inst, it.x),
        cons_violation=constraint_violation(inst, it.x), iterations=k,
        wall_time=time.perf_counter() - t0,
        extra={"converged": status == "converged", "status": status,
               "kkt_residuals": list(res), "inner": cfg.inner,
               "cg_breakdowns": stats.breakdowns, "cg_fallbacks": stats.fallbacks})
    return report, traj, it


def with_line_search(cfg: IpmConfig, rule: str) -> IpmConfig:
    return replace(cfg, line_search=rule)
