"""Training and inference loops for the IPM-guided and the feasibility-preserving predictors.

Feasibility mode keeps ``A x = b`` exactly: the predicted displacement plus a
decaying barrier correction ``tau / (x + eps)`` is projected onto ``ker A`` and
followed with the longest step (at most 1) that keeps ``x >= 0``.

IPM-guided mode feeds each prediction back in as the next input and is
supervised by stored interior-point trajectories.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import mpnn
from .core import (LcqpInstance, SolveReport, constraint_violation, max_violation, objective,
                   relative_objective_gap)
from .graph import GraphBatch, encode
from .ipm import IpmConfig, ipm_solve
from .nullspace import NullSpaceProjector, compute_nullspace, feasible_initial_point, project

log = logging.getLogger(__name__)

CLAMP_TOL = 1e-12


@dataclass(frozen=True)
class SearchConfig:
    T_train: int = 8
    T_infer: int = 32
    tau0: float = 1e-2
    eps_bar: float = 1e-8
    delta: float = 1e-3
    loss_on: str = "corrected"  # "corrected": prediction + barrier term; "raw": prediction only

    def __post_init__(self):
        if self.T_train < 1 or self.T_infer < 0:
            raise ValueError("T_train must be >= 1 and T_infer >= 0")
        if self.tau0 < 0 or self.eps_bar <= 0 or self.delta < 0:
            raise ValueError("need tau0 >= 0, eps_bar > 0, delta >= 0")
        if self.loss_on not in ("corrected", "raw"):
            raise ValueError(f"unknown loss_on {self.loss_on!r}")


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 10
    seed: int = 0
    eval_every: int = 0  # 0 disables validation during training


# ---------------------------------------------------------------- feasibility mechanics

def step_length_positivity(x, d_tilde) -> float:
    """Largest alpha in [0, 1] with ``x + alpha d_tilde >= 0``."""
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(d_tilde, dtype=np.float64)
    neg = d < 0
    if not np.any(neg):
        return 1.0
    with np.errstate(over="ignore"):  # tiny |d| gives an infinite ratio, which is fine
        ratio = float(np.min(np.maximum(x[neg], 0.0) / -d[neg]))
    return float(min(1.0, max(0.0, ratio)))


@dataclass
class BarrierState:
    """Current correction scale; halved after every update."""

    tau: float


@dataclass
class FeasStep:
    x_next: np.ndarray
    alpha: float
    d_tilde: np.ndarray
    d: np.ndarray  # prediction plus correction, before projection

    def __iter__(self):
        return iter((self.x_next, self.alpha, self.d_tilde))


def barrier_correction(x, tau: float, eps_bar: float) -> np.ndarray:
    return tau / (np.asarray(x, dtype=np.float64) + eps_bar)


def feasibility_update(x_prev, d_pred, projector: NullSpaceProjector, state: BarrierState,
                       eps_bar: float = 1e-8) -> FeasStep:
    """``x_next = x_prev + alpha * P(d_pred + tau / (x_prev + eps))``, then ``tau <- tau / 2``.

    Entries in ``[-1e-12, 0)`` after the step are set to zero.
    """
    x_prev = np.asarray(x_prev, dtype=np.float64)
    d = np.asarray(d_pred, dtype=np.float64) + barrier_correction(x_prev, state.tau, eps_bar)
    state.tau *= 0.5
    d_tilde = project(projector, d)
    alpha = step_length_positivity(x_prev, d_tilde)
    x_next = x_prev + alpha * d_tilde
    x_next[(x_next < 0) & (x_next >= -CLAMP_TOL)] = 0.0
    return FeasStep(x_next, alpha, d_tilde, d)


def barrier_step_upper_bound(x, projector: NullSpaceProjector) -> float:
    """``g'Pg / ((Pg)' diag(1/x^2) (Pg))`` with ``g = 1/x``; +inf when ``Pg`` vanishes."""
    x = np.asarray(x, dtype=np.float64)
    g = 1.0 / x
    pg = project(projector, g)
    if np.linalg.norm(pg) <= 1e-14 * np.linalg.norm(g):
        return float("inf")
    den = float(pg @ (pg / (x * x)))
    return float(g @ pg) / den


# ---------------------------------------------------------------- problem preparation

@dataclass
class FeasProblem:
    """Instance plus its graph, projector and strictly positive feasible start."""

    inst: LcqpInstance
    graph: object
    projector: NullSpaceProjector
    x0: np.ndarray


def prepare_feasibility(inst: LcqpInstance, x0=None) -> FeasProblem:
    proj = compute_nullspace(inst.A)
    x0 = feasible_initial_point(inst) if x0 is None else np.asarray(x0, dtype=np.float64)
    return FeasProblem(inst, encode(inst, has_global=False), proj, x0)


def attach_solution(inst: LcqpInstance, cfg: IpmConfig = IpmConfig(), T: int | None = None,
                    trajectory: str = "subsample") -> LcqpInstance:
    """Solve with the IPM and store ``x_star`` and a supervision trajectory.

    ``trajectory="raw"`` keeps every IPM iterate. ``"subsample"`` keeps ``T + 1``
    iterates at evenly spaced iteration indices from the start to the final
    iterate, so the last supervised point is the optimum.
    """
    report, traj, _ = ipm_solve(inst, cfg)
    if not report.extra["converged"]:
        raise RuntimeError(f"IPM did not converge: {report.extra['status']}")
    inst.x_star = report.x.copy()
    if trajectory == "raw" or T is None:
        inst.trajectory = [x.copy() for x in traj]
    elif trajectory == "subsample":
        K = len(traj) - 1
        idx = np.unique(np.round(np.linspace(0, K, T + 1)).astype(int))
        if len(idx) < T + 1:
            # fewer IPM iterations than T; pad with the optimum
            idx = np.concatenate([idx, np.full(T + 1 - len(idx), K)])
        inst.trajectory = [traj[i].copy() for i in idx]
    else:
        raise ValueError(f"unknown trajectory mode {trajectory!r}")
    return inst


def _require_star(inst: LcqpInstance) -> np.ndarray:
    if inst.x_star is None:
        raise ValueError("instance has no x_star; attach a solution first")
    return inst.x_star


def _is_model(model) -> bool:
    return isinstance(model, mpnn.MpnnModel)


def _predict_batch(model, problems_insts: Sequence[LcqpInstance], batch: GraphBatch, x_cat):
    """Forward pass for an MPNN, or per-instance calls for a stub ``f(inst, x_prev)``."""
    if _is_model(model):
        out, tape = mpnn.forward_tape(model, batch, x_cat)
        return out, tape
    parts = batch.split_vars(x_cat)
    return np.concatenate([np.asarray(model(inst, x), dtype=np.float64)
                           for inst, x in zip(problems_insts, parts)]), None


def oracle_displacement_stub(inst: LcqpInstance, x_prev) -> np.ndarray:
    """Predicts ``x_star - x_prev`` exactly."""
    return _require_star(inst) - np.asarray(x_prev, dtype=np.float64)


def identity_stub(inst: LcqpInstance, x_prev) -> np.ndarray:
    return np.asarray(x_prev, dtype=np.float64).copy()


# ---------------------------------------------------------------- feasibility training

@dataclass
class TrainLog:
    epoch_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_gap: list = field(default_factory=list)
    max_feas_violation: float = 0.0
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _batches(count: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(count)
    for k in range(0, count, batch_size):
        yield order[k:k + batch_size]


def feasibility_rollout(model, problems: Sequence[FeasProblem], cfg: SearchConfig, T: int,
                        grads: dict | None = None, check_tol: float | None = None):
    """Run T feasibility iterations on a batch and return ``(loss, iterates)``.

    The loss is the per-instance sum of squares ``||d* - d||^2`` averaged over T
    and over the batch, where ``d`` includes the barrier correction. When
    ``grads`` is given the parameter gradient is accumulated into it; the
    previous point is treated as a constant.
    """
    insts = [p.inst for p in problems]
    batch = GraphBatch([p.graph for p in problems])
    xs = [p.x0.copy() for p in problems]
    states = [BarrierState(cfg.tau0) for _ in problems]
    B = len(problems)
    total = 0.0
    history = [[x.copy()] for x in xs]
    worst = 0.0
    for _ in range(T):
        x_cat = np.concatenate(xs)
        pred, tape = _predict_batch(model, insts, batch, x_cat)
        parts = batch.split_vars(pred)
        d_out = []
        for i, p in enumerate(problems):
            corr = barrier_correction(xs[i], states[i].tau, cfg.eps_bar)
            d_star = _require_star(p.inst) - xs[i]
            resid = parts[i] - d_star
            if cfg.loss_on == "corrected":
                resid = resid + corr
            total += float(resid @ resid) / (T * B)
            d_out.append(2.0 * resid / (T * B))
            step = feasibility_update(xs[i], parts[i], p.projector, states[i], cfg.eps_bar)
            xs[i] = step.x_next
            history[i].append(step.x_next.copy())
            if check_tol is not None:
                worst = max(worst, max_violation(p.inst, xs[i]))
        if grads is not None and tape is not None:
            mpnn.accumulate_grad(model, tape, np.concatenate(d_out), grads)
    return total, history, worst


def train_feasibility(model, instances, cfg: SearchConfig = SearchConfig(),
                      opt: TrainConfig = TrainConfig(), val=None,
                      callback: Callable | None = None) -> TrainLog:
    """Minibatch Adam training on the feasibility rollout loss."""
    t0 = time.perf_counter()
    problems = [p if isinstance(p, FeasProblem) else prepare_feasibility(p) for p in instances]
    for p in problems:
        _require_star(p.inst)
    val_p = None
    if val:
        val_p = [p if isinstance(p, FeasProblem) else prepare_feasibility(p) for p in val]
    rng = np.random.default_rng(opt.seed)
    state = mpnn.AdamState()
    tlog = TrainLog()
    for epoch in range(opt.epochs):
        ep_loss, seen = 0.0, 0
        for idx in _batches(len(problems), opt.batch_size, rng):
            chunk = [problems[i] for i in idx]
            grads = mpnn.zero_grads(model) if _is_model(model) else None
            loss, _, worst = feasibility_rollout(model, chunk, cfg, cfg.T_train, grads, check_tol=0.0)
            tlog.max_feas_violation = max(tlog.max_feas_violation, worst)
            if grads is not None:
                mpnn.adam_step(model, grads, state, lr=opt.lr)
            ep_loss += loss * len(idx)
            seen += len(idx)
        tlog.epoch_loss.append(ep_loss / seen)
        if val_p and opt.eval_every and (epoch + 1) % opt.eval_every == 0:
            vl, _, _ = feasibility_rollout(model, val_p, cfg, cfg.T_train)
            tlog.val_loss.append(vl)
            tlog.val_gap.append(evaluate_feasibility(model, val_p, cfg)["mean_gap_pct"])
        if callback is not None:
            callback(epoch, tlog)
    tlog.wall_time = time.perf_counter() - t0
    return tlog


def infer_feasibility(model, problem, cfg: SearchConfig = SearchConfig(),
                      T: int | None = None, record: bool = False) -> SolveReport:
    """Run ``T`` (default ``cfg.T_infer``) feasibility iterations and keep the best objective."""
    t0 = time.perf_counter()
    p = problem if isinstance(problem, FeasProblem) else prepare_feasibility(problem)
    T = cfg.T_infer if T is None else T
    x = p.x0.copy()
    best_x, best_obj = x.copy(), objective(p.inst, x)
    state = BarrierState(cfg.tau0)
    iterates = [x.copy()]
    batch = GraphBatch([p.graph])
    for _ in range(T):
        pred, _ = _predict_batch(model, [p.inst], batch, x)
        x = feasibility_update(x, pred, p.projector, state, cfg.eps_bar).x_next
        if record:
            iterates.append(x.copy())
        obj = objective(p.inst, x)
        if obj < best_obj:
            best_x, best_obj = x.copy(), obj
    report = SolveReport(best_x, best_obj, constraint_violation(p.inst, best_x), T,
                         time.perf_counter() - t0)
    if p.inst.x_star is not None:
        report.rel_obj_gap_pct = relative_objective_gap(best_obj, objective(p.inst, p.inst.x_star))
    if record:
        report.extra["iterates"] = iterates
    return report


def evaluate_feasibility(model, problems, cfg: SearchConfig = SearchConfig(),
                         T: int | None = None) -> dict:
    reports = [infer_feasibility(model, p, cfg, T) for p in problems]
    return _summarize(reports)


# ---------------------------------------------------------------- IPM-guided

def _require_traj(inst: LcqpInstance, T: int) -> list:
    if inst.trajectory is None or len(inst.trajectory) < T + 1:
        have = 0 if inst.trajectory is None else len(inst.trajectory)
        raise ValueError(f"trajectory has {have} points, need at least {T + 1}")
    return inst.trajectory


def ipm_guided_rollout(model, insts: Sequence[LcqpInstance], graphs, T: int,
                       grads: dict | None = None, x0: Sequence[np.ndarray] | None = None):
    """Loss ``(1/T) sum_t ||x*(t) - x(t)||^2`` averaged over the batch, with x(0) from the trajectory."""
    batch = GraphBatch(list(graphs))
    xs = [np.asarray(x, dtype=np.float64).copy() for x in x0] if x0 is not None else \
        [_require_traj(inst, T)[0].copy() for inst in insts]
    B = len(insts)
    total = 0.0
    for t in range(1, T + 1):
        pred, tape = _predict_batch(model, insts, batch, np.concatenate(xs))
        target = np.concatenate([_require_traj(inst, T)[t] for inst in insts])
        resid = pred - target
        total += float(resid @ resid) / (T * B)
        if grads is not None and tape is not None:
            mpnn.accumulate_grad(model, tape, 2.0 * resid / (T * B), grads)
        xs = batch.split_vars(pred.copy())
    return total


def train_ipm_guided(model, instances: Sequence[LcqpInstance], cfg: SearchConfig = SearchConfig(),
                     opt: TrainConfig = TrainConfig(), val=None,
                     callback: Callable | None = None) -> TrainLog:
    """Minibatch Adam training on the IPM-trajectory imitation loss."""
    t0 = time.perf_counter()
    for inst in instances:
        _require_traj(inst, cfg.T_train)
    graphs = [encode(inst, has_global=True) for inst in instances]
    rng = np.random.default_rng(opt.seed)
    state = mpnn.AdamState()
    tlog = TrainLog()
    for epoch in range(opt.epochs):
        ep_loss, seen = 0.0, 0
        for idx in _batches(len(instances), opt.batch_size, rng):
            grads = mpnn.zero_grads(model) if _is_model(model) else None
            loss = ipm_guided_rollout(model, [instances[i] for i in idx],
                                      [graphs[i] for i in idx], cfg.T_train, grads)
            if grads is not None:
                mpnn.adam_step(model, grads, state, lr=opt.lr)
            ep_loss += loss * len(idx)
            seen += len(idx)
        tlog.epoch_loss.append(ep_loss / seen)
        if val and opt.eval_every and (epoch + 1) % opt.eval_every == 0:
            vg = [encode(v, has_global=True) for v in val]
            tlog.val_loss.append(ipm_guided_rollout(model, val, vg, cfg.T_train))
            tlog.val_gap.append(evaluate_ipm_guided(model, val, cfg)["mean_gap_pct"])
        if callback is not None:
            callback(epoch, tlog)
    tlog.wall_time = time.perf_counter() - t0
    return tlog


def infer_ipm_guided(model, inst: LcqpInstance, cfg: SearchConfig = SearchConfig(),
                     T: int | None = None, x0=None, delta: float | None = None) -> SolveReport:
    """Iterate predictions from ``x0`` (default all ones) and keep the best objective
    among iterates, ``x0`` included, with ``max_i |A_i x - b_i| < delta``.

    When no iterate qualifies, ``extra["candidate"]`` is False and the report holds
    the last iterate.
    """
    t0 = time.perf_counter()
    T = cfg.T_infer if T is None else T
    delta = cfg.delta if delta is None else delta
    x = np.ones(inst.n) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    batch = GraphBatch([encode(inst, has_global=True)])
    best_x, best_obj = None, np.inf
    if max_violation(inst, x) < delta:
        best_x, best_obj = x.copy(), objective(inst, x)
    for _ in range(T):
        x, _ = _predict_batch(model, [inst], batch, x)
        if max_violation(inst, x) < delta:
            obj = objective(inst, x)
            if obj < best_obj:
                best_x, best_obj = x.copy(), obj
    found = best_x is not None
    out_x = best_x if found else x
    report = SolveReport(out_x, objective(inst, out_x), constraint_violation(inst, out_x), T,
                         time.perf_counter() - t0, extra={"candidate": found})
    if found and inst.x_star is not None:
        report.rel_obj_gap_pct = relative_objective_gap(best_obj, objective(inst, inst.x_star))
    return report


def evaluate_ipm_guided(model, instances, cfg: SearchConfig = SearchConfig(),
                        T: int | None = None, delta: float | None = None) -> dict:
    reports = [infer_ipm_guided(model, inst, cfg, T, delta=delta) for inst in instances]
    summary = _summarize([r for r in reports if r.extra["candidate"]])
    summary["candidate_rate"] = float(np.mean([r.extra["candidate"] for r in reports]))
    summary["per_instance"] = [_row(r) for r in reports]
    return summary


def _row(r: SolveReport) -> dict:
    return {"objective": r.objective, "rel_obj_gap_pct": r.rel_obj_gap_pct,
            "cons_violation": r.cons_violation, **{k: v for k, v in r.extra.items()
                                                   if k != "iterates"}}


def _summarize(reports: list[SolveReport]) -> dict:
    gaps = [r.rel_obj_gap_pct for r in reports if r.rel_obj_gap_pct is not None]
    return {"mean_gap_pct": float(np.mean(gaps)) if gaps else None,
            "mean_violation": float(np.mean([r.cons_violation for r in reports])) if reports else None,
            "per_instance": [_row(r) for r in reports]}
