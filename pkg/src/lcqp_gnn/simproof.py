"""Hand-built message passing that reproduces the CG inner solver and one IPM outer step.

Every layer is written as explicit per-edge messages, an aggregation over the
receiving node's neighbourhood and a per-node update. Nothing is learned. The
channel layout follows the construction:

* CG: variable nodes hold ``[r1, p1, w1, x, s]``, constraint nodes ``[r2, p2, w2, lam]``,
  the global node a scalar (``sigma mu``, then ``alpha`` or ``beta``).
* IPM: variable nodes hold ``[x, s, c]``, constraint nodes ``[lam, b]``, the global
  node ``[sigma, mu]``.

CG initialisation takes one message-passing step and every CG iteration seven.
Edge aggregations sum over edges sorted by (receiver, sender), which is the same
order the CSR products of the reference implementation use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import LcqpInstance
from .ipm import (DAMPING, CGTrace, IpmConfig, IpmIterate, augmented_operator, augmented_rhs,
                  cg_run, ipm_step)

CG_INIT_STEPS = 1
CG_ITER_STEPS = 7
IPM_OUTER_STEPS = 4

# variable / constraint channel indices during CG
R, P, W, X, S = 0, 1, 2, 3, 4
LAM = 3


class _Edges:
    """Directed weighted edges sorted by (dst, src) with sum aggregation."""

    def __init__(self, src, dst, w, n_dst):
        order = np.lexsort((src, dst))
        self.src, self.dst, self.w = src[order], dst[order], w[order]
        self.n_dst = n_dst

    def conv(self, h_src: np.ndarray) -> np.ndarray:
        """MSG ``w_e h_src`` on every edge, AGG by summation at the receiver."""
        msg = self.w * h_src[self.src]
        return np.bincount(self.dst, weights=msg, minlength=self.n_dst)


class _Topology:
    def __init__(self, inst: LcqpInstance):
        A, Q = inst.A, inst.Q
        self.n, self.m = inst.n, inst.m
        self.vc = _Edges(A.cols, A.rows, A.vals, inst.m)
        self.cv = _Edges(A.rows, A.cols, A.vals, inst.n)
        self.vv = _Edges(Q.cols, Q.rows, Q.vals, inst.n)


@dataclass
class SimState:
    """Node embeddings after a labelled phase plus the message-passing step count."""

    V: np.ndarray
    C: np.ndarray
    G: np.ndarray
    phase: str = "init"
    steps: int = 0
    converged: bool = False
    history: list = field(default_factory=list)

    def copy(self) -> "SimState":
        return SimState(self.V.copy(), self.C.copy(), self.G.copy(), self.phase, self.steps,
                        self.converged, list(self.history))

    @property
    def r(self) -> np.ndarray:
        return np.concatenate([self.V[:, R], self.C[:, R]])

    @property
    def p(self) -> np.ndarray:
        return np.concatenate([self.V[:, P], self.C[:, P]])

    @property
    def w(self) -> np.ndarray:
        return np.concatenate([self.V[:, W], self.C[:, W]])

    def _advance(self, V, C, G, phase) -> None:
        self.V, self.C, self.G = V, C, np.atleast_1d(np.asarray(G, dtype=np.float64))
        self.phase = phase
        self.steps += 1
        self.history.append(phase)


def _p_times(topo: _Topology, V: np.ndarray, C: np.ndarray, ch: int) -> tuple[np.ndarray, np.ndarray]:
    """One step computing ``P [V[:, ch]; C[:, ch]]`` on variable and constraint nodes."""
    u1, u2 = V[:, ch], C[:, ch]
    q = topo.vv.conv(u1)
    at = topo.cv.conv(u2)
    top = q + V[:, S] / V[:, X] * u1 - at
    bot = -topo.vc.conv(u1)
    return top, bot


def sim_cg_init(inst: LcqpInstance, x, lam, s, sigma_mu: float) -> SimState:
    """Initial CG embeddings from ``V = [x, s, c]``, ``C = [lam, b]``, ``G = sigma mu``."""
    x, lam, s = (np.asarray(v, dtype=np.float64) for v in (x, lam, s))
    if np.any(x <= 0) or np.any(s <= 0):
        raise ValueError("sim_cg_init needs x, s > 0")
    topo = _Topology(inst)
    V0 = np.column_stack([x, s, inst.c])
    C0 = np.column_stack([lam, inst.b]) if inst.m else np.zeros((0, 2))
    g = float(sigma_mu)
    # messages: g -> v carries sigma mu, c -> v carries A_cv lam_c, u -> v carries Q_vu x_u,
    # v -> c carries A_cv x_v
    qx = topo.vv.conv(V0[:, 0])
    atl = topo.cv.conv(C0[:, 0])
    ax = topo.vc.conv(V0[:, 0])
    r1 = g / V0[:, 0] - qx - V0[:, 2] + atl
    r2 = ax - C0[:, 1]
    V = np.column_stack([r1, r1, np.zeros(inst.n), V0[:, 0], V0[:, 1]])
    C = np.column_stack([r2, r2, np.zeros(inst.m), C0[:, 0]])
    st = SimState(np.zeros((inst.n, 5)), np.zeros((inst.m, 4)), np.array([g]))
    st._advance(V, C, g, "init.1")
    return st


def sim_cg_iteration(inst: LcqpInstance, state: SimState, alpha_rule: str = "residual",
                     topo: _Topology | None = None) -> SimState:
    """Seven message-passing steps for one CG iteration.

    ``alpha_rule="residual"`` forms ``r'r / r'Pr``; ``"textbook"`` forms ``r'r / p'Pp``.
    When ``r'r = 0`` the state is returned unchanged and flagged as converged.
    """
    if alpha_rule not in ("residual", "textbook"):
        raise ValueError(f"unknown alpha rule {alpha_rule!r}")
    topo = topo or _Topology(inst)
    st = state.copy()
    V, C = st.V, st.C
    if float(V[:, R] @ V[:, R] + C[:, R] @ C[:, R]) == 0.0:
        st.converged = True
        return st

    # (t,1): P u on the nodes, u = r (residual) or p (textbook), prepended as a new channel
    ch = R if alpha_rule == "residual" else P
    pu1, pu2 = _p_times(topo, V, C, ch)
    V1 = np.column_stack([pu1, V])
    C1 = np.column_stack([pu2, C])
    st._advance(V1, C1, st.G, "iter.1")

    # (t,2): global sums [u'Pu, r'r], alpha = r'r / u'Pu; extra channel dropped
    u1, u2 = V1[:, 1 + ch], C1[:, 1 + ch]
    agg_v = np.array([V1[:, 0] @ u1, V1[:, 1 + R] @ V1[:, 1 + R]])
    agg_c = np.array([C1[:, 0] @ u2, C1[:, 1 + R] @ C1[:, 1 + R]])
    den, rr = agg_v + agg_c
    alpha = rr / den
    st._advance(V1[:, 1:].copy(), C1[:, 1:].copy(), alpha, "iter.2")

    # (t,3): w += alpha p
    V3, C3 = st.V.copy(), st.C.copy()
    V3[:, W] = V3[:, W] + alpha * V3[:, P]
    C3[:, W] = C3[:, W] + alpha * C3[:, P]
    st._advance(V3, C3, alpha, "iter.3")

    # (t,4): P p prepended
    pp1, pp2 = _p_times(topo, V3, C3, P)
    V4 = np.column_stack([pp1, V3])
    C4 = np.column_stack([pp2, C3])
    st._advance(V4, C4, alpha, "iter.4")

    # (t,5): first channel becomes r_new = r - alpha P p, old r kept next to it
    V5, C5 = V4.copy(), C4.copy()
    V5[:, 0] = V4[:, 1 + R] - alpha * V4[:, 0]
    C5[:, 0] = C4[:, 1 + R] - alpha * C4[:, 0]
    st._advance(V5, C5, alpha, "iter.5")

    # (t,6): global sums [r_new'r_new, r'r], beta = ratio; old r dropped
    sv = np.array([V5[:, 0] @ V5[:, 0], V5[:, 1] @ V5[:, 1]])
    sc = np.array([C5[:, 0] @ C5[:, 0], C5[:, 1] @ C5[:, 1]])
    new, old = sv + sc
    beta = new / old
    st._advance(np.delete(V5, 1, axis=1), np.delete(C5, 1, axis=1), beta, "iter.6")

    # (t,7): p = beta p + r
    V7, C7 = st.V.copy(), st.C.copy()
    V7[:, P] = beta * V7[:, P] + V7[:, R]
    C7[:, P] = beta * C7[:, P] + C7[:, R]
    st._advance(V7, C7, beta, "iter.7")
    st.converged = new == 0.0
    return st


def sim_cg(inst: LcqpInstance, x, lam, s, sigma_mu: float, iterations: int | None = None,
           alpha_rule: str = "residual", record: bool = False):
    """Init plus up to ``n + m`` iterations. Returns ``(state, states)``; ``states`` is empty
    unless ``record`` is set, in which case it holds the state after init and each iteration."""
    topo = _Topology(inst)
    st = sim_cg_init(inst, x, lam, s, sigma_mu)
    states = [st.copy()] if record else []
    k_max = inst.n + inst.m if iterations is None else iterations
    for _ in range(k_max):
        nxt = sim_cg_iteration(inst, st, alpha_rule, topo)
        if nxt.steps == st.steps:
            st = nxt
            break
        st = nxt
        if record:
            states.append(st.copy())
    return st, states


@dataclass
class OuterResult:
    iterate: IpmIterate
    alpha: float
    dx: np.ndarray
    dlam: np.ndarray
    ds: np.ndarray
    steps: int
    cg_state: SimState
    cg_states: list


def sim_ipm_outer(inst: LcqpInstance, iterate: IpmIterate, sigma: float, mu: float | None = None,
                  eps: float = 1e-8, newton=None, alpha_rule: str = "residual",
                  cg_iterations: int | None = None, record: bool = False) -> OuterResult:
    """One damped IPM iteration on ``V = [x, s, c]``, ``C = [lam, b]``, ``G = [sigma, mu]``.

    ``newton`` optionally supplies ``(dx, dlam)``; otherwise the simulated CG computes it.
    The step size uses the continuous ratios ``v / -min(-eps, dv)`` aggregated by min.
    """
    mu = iterate.mu if mu is None else mu
    G = np.array([sigma, mu], dtype=np.float64)
    V = np.column_stack([iterate.x, iterate.s, inst.c])
    C = np.column_stack([iterate.lam, inst.b]) if inst.m else np.zeros((0, 2))
    steps = 0
    cg_states: list = []
    if newton is None:
        sm = G[1] * G[0]
        cg_st, cg_states = sim_cg(inst, V[:, 0], C[:, 0], V[:, 1], sm, cg_iterations,
                                  alpha_rule, record)
        steps += cg_st.steps
        dx, dlam = cg_st.V[:, W].copy(), cg_st.C[:, W].copy()
    else:
        cg_st = None
        dx, dlam = (np.asarray(v, dtype=np.float64) for v in newton)

    # line 3: V = [dx, x, s, c], C = [dlam, lam, b]
    V1 = np.column_stack([dx, V])
    C1 = np.column_stack([dlam, C])
    steps += 1
    # line 4: g -> v sends sigma mu; V = [dx, ds, x, s, c]
    sm = G[1] * G[0]
    ds = -V1[:, 2] * V1[:, 0] / V1[:, 1] - V1[:, 2] + sm / V1[:, 1]
    V2 = np.column_stack([V1[:, 0], ds, V1[:, 1:]])
    steps += 1
    # line 5: v -> g continuous ratios, min aggregation, G = [sigma, mu, alpha]
    ax = V2[:, 2] / -np.minimum(-eps, V2[:, 0])
    as_ = V2[:, 3] / -np.minimum(-eps, V2[:, 1])
    agg = np.array([ax.min(), as_.min()]) if inst.n else np.array([np.inf, np.inf])
    G3 = np.array([G[0], G[1], min(1.0, agg[0], agg[1])])
    steps += 1
    # lines 6-8: damped updates, mu <- sigma mu
    a = G3[2]
    x_new = V2[:, 2] + DAMPING * a * V2[:, 0]
    s_new = V2[:, 3] + DAMPING * a * V2[:, 1]
    lam_new = C1[:, 1] + DAMPING * a * C1[:, 0]
    steps += 1
    nxt = IpmIterate(x_new, lam_new, s_new, G3[0] * G3[1])
    return OuterResult(nxt, float(a), dx, dlam, ds, steps, cg_st, cg_states)


# ---------------------------------------------------------------- lockstep verification

def rel_dev(a, b) -> float:
    """``||a - b||_inf / max(||b||_inf, 1)``; 0 for empty input."""
    a, b = np.atleast_1d(np.asarray(a, dtype=np.float64)), np.atleast_1d(np.asarray(b, dtype=np.float64))
    if a.size == 0:
        return 0.0
    with np.errstate(invalid="ignore"):
        d = float(np.max(np.abs(a - b)))
    if not np.isfinite(d):
        return 0.0 if np.array_equal(a, b, equal_nan=True) else np.inf
    return d / max(float(np.max(np.abs(b))), 1.0)


# The residual-rule recurrences grow without bound on many indefinite systems. Iterations
# whose reference values exceed this cap (or are not finite) are counted as diverged
# and left out of the comparison instead of being scored as equal.
DIVERGENCE_CAP = 1e150


def _tame(*arrays) -> bool:
    for a in arrays:
        a = np.asarray(a, dtype=np.float64)
        if a.size and not (np.all(np.isfinite(a)) and np.max(np.abs(a)) <= DIVERGENCE_CAP):
            return False
    return True


@dataclass
class LockstepReport:
    deviations: dict  # phase -> channel -> max deviation
    step_counts_ok: bool
    trials: int
    cg_iterations: int
    tol: float
    counts: dict = field(default_factory=dict)  # compared / diverged tallies

    @property
    def max_deviation(self) -> float:
        return max((v for ch in self.deviations.values() for v in ch.values()), default=0.0)

    @property
    def vacuous(self) -> bool:
        """No outer step was compared, so nothing about the IPM iteration was checked."""
        return self.counts.get("outer_compared", 0) == 0

    @property
    def ok(self) -> bool:
        return self.step_counts_ok and not self.vacuous and self.max_deviation <= self.tol

    def to_dict(self) -> dict:
        return {"deviations": self.deviations, "max_deviation": self.max_deviation,
                "step_counts_ok": self.step_counts_ok, "trials": self.trials,
                "cg_iterations": self.cg_iterations, "tol": self.tol, "counts": self.counts,
                "vacuous": self.vacuous, "ok": self.ok}


def _bump(dev: dict, phase: str, ch: str, v: float) -> None:
    d = dev.setdefault(phase, {})
    d[ch] = max(d.get(ch, 0.0), v)


def _tally(counts: dict, key: str, k: int = 1) -> None:
    counts[key] = counts.get(key, 0) + k


def reference_cg(inst: LcqpInstance, it: IpmIterate, sigma_mu: float,
                 alpha_rule: str = "residual") -> tuple[np.ndarray, CGTrace]:
    """The reference CG recurrences on the augmented system, breakdown check off."""
    trace = CGTrace()
    with np.errstate(all="ignore"):
        w = cg_run(augmented_operator(inst, it), augmented_rhs(inst, it, sigma_mu),
                   max_iter=inst.n + inst.m, tol=0.0, alpha_rule=alpha_rule, trace=trace,
                   breakdown_tol=None)
    return w, trace


def lockstep_outer(inst: LcqpInstance, it: IpmIterate, sigma: float, eps: float = 1e-8,
                   alpha_rule: str = "residual", dev: dict | None = None,
                   counts: dict | None = None) -> tuple[IpmIterate, IpmIterate, bool]:
    """Run one simulated and one reference outer iteration from ``it``; record deviations.

    CG iterations are compared up to the first one whose reference values diverge;
    the outer step is compared only when the reference CG solution stayed bounded.
    Returns ``(sim_next, ref_next, step_counts_ok)``.
    """
    dev = {} if dev is None else dev
    counts = {} if counts is None else counts
    sm = sigma * it.mu
    w, trace = reference_cg(inst, it, sm, alpha_rule)
    with np.errstate(all="ignore"):
        out = sim_ipm_outer(inst, it, sigma, eps=eps, alpha_rule=alpha_rule, record=True)
    n_iter = len(trace.alpha)
    states = out.cg_states
    ok = len(states) == n_iter + 1
    for k, st in enumerate(states[: n_iter + 1]):
        want = CG_INIT_STEPS + CG_ITER_STEPS * k
        ok &= st.steps == want
        if k:
            ok &= st.history[-CG_ITER_STEPS:] == [f"iter.{j}" for j in range(1, 8)]
        if not _tame(trace.r[k], trace.p[k], trace.w[k]):
            _tally(counts, "cg_diverged", n_iter + 1 - k)
            break
        phase = "cg_init" if k == 0 else "cg_iter"
        for ch in ("r", "p", "w"):
            _bump(dev, phase, ch, rel_dev(getattr(st, ch), getattr(trace, ch)[k]))
        _tally(counts, "cg_compared")
    ok &= out.steps == CG_INIT_STEPS + CG_ITER_STEPS * n_iter + IPM_OUTER_STEPS
    cfg = IpmConfig(sigma=sigma, inner="cg", cg_alpha=alpha_rule, fallback=False,
                    line_search="eps_continuous", eps=eps)
    with np.errstate(all="ignore"):
        ref, info = ipm_step(inst, it, cfg, newton=(w[: inst.n], w[inst.n:]))
    if _tame(w, info["ds"], ref.x, ref.s, ref.lam):
        _tally(counts, "outer_compared")
        _bump(dev, "ipm_outer", "dx", rel_dev(out.dx, info["dx"]))
        _bump(dev, "ipm_outer", "dlam", rel_dev(out.dlam, info["dlam"]))
        _bump(dev, "ipm_outer", "ds", rel_dev(out.ds, info["ds"]))
        _bump(dev, "ipm_outer", "alpha", rel_dev(out.alpha, info["alpha"]))
        _bump(dev, "ipm_outer", "x", rel_dev(out.iterate.x, ref.x))
        _bump(dev, "ipm_outer", "lam", rel_dev(out.iterate.lam, ref.lam))
        _bump(dev, "ipm_outer", "s", rel_dev(out.iterate.s, ref.s))
        _bump(dev, "ipm_outer", "mu", rel_dev(out.iterate.mu, ref.mu))
    else:
        _tally(counts, "outer_diverged")
    return out.iterate, ref, ok


def random_interior_point(inst: LcqpInstance, rng: np.random.Generator) -> IpmIterate:
    x = rng.uniform(0.5, 2.0, inst.n)
    s = rng.uniform(0.5, 2.0, inst.n)
    lam = rng.normal(size=inst.m)
    return IpmIterate(x, lam, s, float(x @ s / inst.n))


def verify_lockstep(n: int = 6, m: int = 3, trials: int = 20, seed: int = 0,
                    outer: int = 2, sigma: float = 0.5, eps: float = 1e-8,
                    alpha_rule: str = "residual", tol: float = 1e-9) -> LockstepReport:
    """Compare simulation and reference on ``trials`` generic instances.

    Each trial draws a random interior point and runs up to ``outer`` IPM iterations
    on both sides, each side continuing from its own iterate. A trial stops early
    once its reference iterate diverges.
    """
    from .datasets import GenConfig, generate

    rng = np.random.default_rng(seed)
    dev: dict = {}
    counts: dict = {}
    ok = True
    n_cg = 0
    for k in range(trials):
        inst = generate(GenConfig("generic", n=n, m=m, seed=seed * 1000 + k))
        it_sim = random_interior_point(inst, rng)
        it_ref = it_sim.copy()
        for _ in range(outer):
            nxt_sim, _, good = lockstep_outer(inst, it_sim, sigma, eps, alpha_rule, dev, counts)
            _, nxt_ref, _ = lockstep_outer(inst, it_ref, sigma, eps, alpha_rule, {}, {})
            ok &= good
            if not _tame(nxt_ref.x, nxt_ref.lam, nxt_ref.s) or np.any(nxt_ref.x <= 0) \
                    or np.any(nxt_ref.s <= 0):
                _tally(counts, "trials_stopped")
                break
            for ch in ("x", "lam", "s"):
                _bump(dev, "trajectory", ch, rel_dev(getattr(nxt_sim, ch), getattr(nxt_ref, ch)))
            it_sim, it_ref = nxt_sim, nxt_ref
        n_cg = inst.n + inst.m
    return LockstepReport(dev, bool(ok), trials, n_cg, tol, counts)
