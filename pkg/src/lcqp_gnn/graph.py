"""Graph encoding of LCQP instances and disjoint-union batching.

Variable nodes carry ``c``, constraint nodes carry ``b``. Each nonzero ``A_cv``
is an edge between constraint c and variable v. Each nonzero ``Q_vu`` with
``v <= u`` is stored once and traversed in both directions; a diagonal entry
becomes a self-loop traversed once. An optional global node links to every
variable and constraint node with unit weight.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .core import LcqpInstance, SparseMatrix


@dataclass(frozen=True, eq=False)
class ProblemGraph:
    n: int
    m: int
    has_global: bool
    cons_feat: np.ndarray  # (m,) = b
    var_feat: np.ndarray  # (n,) = c
    a_cons: np.ndarray
    a_var: np.ndarray
    a_w: np.ndarray
    q_row: np.ndarray  # q_row <= q_col
    q_col: np.ndarray
    q_w: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.n + self.m + int(self.has_global)

    @property
    def a_edges(self) -> list[tuple[int, int, float]]:
        return list(zip(self.a_cons.tolist(), self.a_var.tolist(), self.a_w.tolist()))

    @property
    def q_edges(self) -> list[tuple[int, int, float]]:
        return list(zip(self.q_row.tolist(), self.q_col.tolist(), self.q_w.tolist()))

    @property
    def global_edge_count(self) -> int:
        return self.n + self.m if self.has_global else 0

    def q_directed(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Directed (source, target, weight) triples: both directions off the diagonal, once on it."""
        off = self.q_row != self.q_col
        src = np.concatenate([self.q_row, self.q_col[off]])
        dst = np.concatenate([self.q_col, self.q_row[off]])
        w = np.concatenate([self.q_w, self.q_w[off]])
        order = np.lexsort((src, dst))
        return src[order], dst[order], w[order]


def encode(inst: LcqpInstance, has_global: bool = False) -> ProblemGraph:
    A, Q = inst.A, inst.Q
    upper = Q.rows <= Q.cols
    return ProblemGraph(
        n=inst.n, m=inst.m, has_global=bool(has_global),
        cons_feat=inst.b.copy(), var_feat=inst.c.copy(),
        a_cons=A.rows.copy(), a_var=A.cols.copy(), a_w=A.vals.copy(),
        q_row=Q.rows[upper].copy(), q_col=Q.cols[upper].copy(), q_w=Q.vals[upper].copy())


def decode(g: ProblemGraph) -> LcqpInstance:
    """Inverse of :func:`encode` (the global node carries no instance data)."""
    off = g.q_row != g.q_col
    Q = SparseMatrix(g.n, g.n, np.concatenate([g.q_row, g.q_col[off]]),
                     np.concatenate([g.q_col, g.q_row[off]]),
                     np.concatenate([g.q_w, g.q_w[off]]), symmetric=True)
    A = SparseMatrix(g.m, g.n, g.a_cons, g.a_var, g.a_w)
    return LcqpInstance(g.n, g.m, Q, A, g.cons_feat.copy(), g.var_feat.copy())


def permute_instance(inst: LcqpInstance, perm) -> LcqpInstance:
    """Relabel variables so that new variable k is old variable ``perm[k]``."""
    perm = np.asarray(perm, dtype=np.int64)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    Q = SparseMatrix(inst.n, inst.n, inv[inst.Q.rows], inv[inst.Q.cols], inst.Q.vals, symmetric=True)
    A = SparseMatrix(inst.m, inst.n, inst.A.rows, inv[inst.A.cols], inst.A.vals)
    x_star = None if inst.x_star is None else inst.x_star[perm]
    traj = None if inst.trajectory is None else [x[perm] for x in inst.trajectory]
    return LcqpInstance(inst.n, inst.m, Q, A, inst.b, inst.c[perm], x_star=x_star, trajectory=traj)


def permute_graph(g: ProblemGraph, perm) -> ProblemGraph:
    """Same relabeling as :func:`permute_instance`, applied to an encoded graph."""
    perm = np.asarray(perm, dtype=np.int64)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    av = inv[g.a_var]
    o = np.lexsort((av, g.a_cons))
    qr, qc = inv[g.q_row], inv[g.q_col]
    lo, hi = np.minimum(qr, qc), np.maximum(qr, qc)
    oq = np.lexsort((hi, lo))
    return ProblemGraph(g.n, g.m, g.has_global, g.cons_feat.copy(), g.var_feat[perm],
                        g.a_cons[o], av[o], g.a_w[o], lo[oq], hi[oq], g.q_w[oq])


@dataclass(frozen=True)
class EdgeSet:
    """Directed edges of one type in batch numbering; ``gather`` is E x N_src with weights."""

    src: np.ndarray
    dst: np.ndarray
    w: np.ndarray
    n_src: int
    n_dst: int

    @cached_property
    def gather(self) -> sp.csr_matrix:
        E = len(self.src)
        return sp.csr_matrix((self.w, (np.arange(E), self.src)), shape=(E, self.n_src))

    @cached_property
    def gather_t(self) -> sp.csr_matrix:
        return self.gather.T.tocsr()

    @cached_property
    def _scatter_sum(self) -> sp.csr_matrix:
        E = len(self.src)
        return sp.csr_matrix((np.ones(E), (self.dst, np.arange(E))), shape=(self.n_dst, E))

    @cached_property
    def _scatter_mean(self) -> sp.csr_matrix:
        E = len(self.src)
        deg = np.bincount(self.dst, minlength=self.n_dst).astype(float)
        vals = 1.0 / np.maximum(deg, 1.0)[self.dst]
        return sp.csr_matrix((vals, (self.dst, np.arange(E))), shape=(self.n_dst, E))

    def scatter(self, mean: bool = False) -> sp.csr_matrix:
        """N_dst x E aggregation matrix (sum, or mean over in-degree)."""
        return self._scatter_mean if mean else self._scatter_sum


class GraphBatch:
    """Disjoint union of graphs with per-graph global nodes when requested."""

    def __init__(self, graphs: list[ProblemGraph]):
        if not graphs:
            raise ValueError("empty batch")
        self.graphs = graphs
        self.has_global = graphs[0].has_global
        if any(g.has_global != self.has_global for g in graphs):
            raise ValueError("mixed global-node settings in one batch")
        ns = np.array([g.n for g in graphs])
        ms = np.array([g.m for g in graphs])
        self.var_off = np.concatenate([[0], np.cumsum(ns)])
        self.cons_off = np.concatenate([[0], np.cumsum(ms)])
        self.n, self.m, self.num_graphs = int(ns.sum()), int(ms.sum()), len(graphs)
        self.var_graph = np.repeat(np.arange(len(graphs)), ns)
        self.cons_graph = np.repeat(np.arange(len(graphs)), ms)
        self.cons_feat = np.concatenate([g.cons_feat for g in graphs])
        self.var_feat = np.concatenate([g.var_feat for g in graphs])
        ac = np.concatenate([g.a_cons + o for g, o in zip(graphs, self.cons_off)])
        av = np.concatenate([g.a_var + o for g, o in zip(graphs, self.var_off)])
        aw = np.concatenate([g.a_w for g in graphs])
        qs, qd, qw = [], [], []
        for g, o in zip(graphs, self.var_off):
            s, d, w = g.q_directed()
            qs.append(s + o); qd.append(d + o); qw.append(w)
        n, m, G = self.n, self.m, self.num_graphs
        self.edges: dict[str, EdgeSet] = {
            "vc": EdgeSet(av, ac, aw, n, m),
            "cv": EdgeSet(ac, av, aw, m, n),
            "vv": EdgeSet(np.concatenate(qs), np.concatenate(qd), np.concatenate(qw), n, n),
        }
        if self.has_global:
            ones_v, ones_c = np.ones(n), np.ones(m)
            vi, ci = np.arange(n), np.arange(m)
            self.edges.update({
                "vg": EdgeSet(vi, self.var_graph, ones_v, n, G),
                "cg": EdgeSet(ci, self.cons_graph, ones_c, m, G),
                "gv": EdgeSet(self.var_graph, vi, ones_v, G, n),
                "gc": EdgeSet(self.cons_graph, ci, ones_c, G, m),
            })

    def split_vars(self, v: np.ndarray) -> list[np.ndarray]:
        return [v[a:b] for a, b in zip(self.var_off[:-1], self.var_off[1:])]
