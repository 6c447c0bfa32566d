"""LCQP instances, objective and quality metrics, slack conversion, brute force.

An instance is ``min 1/2 x'Qx + c'x  s.t.  Ax = b, x >= 0`` with sparse ``Q``
(symmetric PSD, n x n) and ``A`` (m x n, full row rank).
"""

from __future__ import annotations

import gzip
import io
import itertools
import json
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class ZeroObjectiveWarning(UserWarning):
    """Relative gap requested against a zero optimum; absolute error was used."""


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """Triplet matrix with canonical row-major entry order and no stored zeros."""

    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    symmetric: bool = False

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64).ravel()
        cols = np.asarray(self.cols, dtype=np.int64).ravel()
        vals = np.asarray(self.vals, dtype=np.float64).ravel()
        if not (len(rows) == len(cols) == len(vals)):
            raise ValueError("rows, cols and vals must have equal length")
        if len(rows) and (rows.min() < 0 or rows.max() >= self.n_rows
                          or cols.min() < 0 or cols.max() >= self.n_cols):
            raise ValueError("entry index out of range")
        keep = vals != 0.0
        rows, cols, vals = rows[keep], cols[keep], vals[keep]
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if len(rows) > 1:
            dup = (np.diff(rows) == 0) & (np.diff(cols) == 0)
            if dup.any():
                raise ValueError("duplicate (row, col) entries")
        if self.symmetric:
            if self.n_rows != self.n_cols:
                raise ValueError("symmetric matrix must be square")
            t = np.lexsort((rows, cols))
            if not (np.array_equal(rows, cols[t]) and np.array_equal(cols, rows[t])
                    and np.array_equal(vals, vals[t])):
                raise ValueError("symmetry flag set but entries are not symmetric")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "vals", vals)

    @classmethod
    def from_dense(cls, M, symmetric: bool = False) -> "SparseMatrix":
        M = np.atleast_2d(np.asarray(M, dtype=np.float64))
        r, c = np.nonzero(M)
        return cls(M.shape[0], M.shape[1], r, c, M[r, c], symmetric=symmetric)

    @classmethod
    def from_entries(cls, n_rows: int, n_cols: int,
                     entries: Iterable[Sequence[float]],
                     symmetric: bool = False) -> "SparseMatrix":
        arr = np.asarray(list(entries), dtype=np.float64).reshape(-1, 3)
        return cls(n_rows, n_cols, arr[:, 0].astype(np.int64),
                   arr[:, 1].astype(np.int64), arr[:, 2], symmetric=symmetric)

    @classmethod
    def zeros(cls, n_rows: int, n_cols: int, symmetric: bool = False) -> "SparseMatrix":
        return cls(n_rows, n_cols, [], [], [], symmetric=symmetric)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return len(self.vals)

    def entries(self) -> list[list]:
        return [[int(i), int(j), float(v)] for i, j, v in zip(self.rows, self.cols, self.vals)]

    @cached_property
    def csr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.vals, (self.rows, self.cols)), shape=self.shape)

    @cached_property
    def csr_t(self) -> sp.csr_matrix:
        return self.csr.T.tocsr()

    def to_dense(self) -> np.ndarray:
        M = np.zeros(self.shape)
        M[self.rows, self.cols] = self.vals
        return M

    def matvec(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != self.n_cols:
            raise ValueError(f"dimension mismatch: {x.shape[0]} != {self.n_cols}")
        return self.csr @ x

    def rmatvec(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.shape[0] != self.n_rows:
            raise ValueError(f"dimension mismatch: {y.shape[0]} != {self.n_rows}")
        return self.csr_t @ y

    def row_abs_max(self) -> np.ndarray:
        out = np.zeros(self.n_rows)
        np.maximum.at(out, self.rows, np.abs(self.vals))
        return out

    def __eq__(self, other):
        if not isinstance(other, SparseMatrix):
            return NotImplemented
        return (self.shape == other.shape and np.array_equal(self.rows, other.rows)
                and np.array_equal(self.cols, other.cols)
                and np.array_equal(self.vals, other.vals))


@dataclass(eq=False)
class LcqpInstance:
    n: int
    m: int
    Q: SparseMatrix
    A: SparseMatrix
    b: np.ndarray
    c: np.ndarray
    x_star: np.ndarray | None = None
    trajectory: list[np.ndarray] | None = None

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=np.float64).ravel()
        self.c = np.asarray(self.c, dtype=np.float64).ravel()
        if self.Q.shape != (self.n, self.n):
            raise ValueError(f"Q has shape {self.Q.shape}, expected {(self.n, self.n)}")
        if self.A.shape != (self.m, self.n):
            raise ValueError(f"A has shape {self.A.shape}, expected {(self.m, self.n)}")
        if self.b.shape != (self.m,) or self.c.shape != (self.n,):
            raise ValueError("b or c has the wrong length")
        if self.x_star is not None:
            self.x_star = np.asarray(self.x_star, dtype=np.float64).ravel()
            if self.x_star.shape != (self.n,):
                raise ValueError("x_star has the wrong length")
        if self.trajectory is not None:
            self.trajectory = [np.asarray(x, dtype=np.float64).ravel() for x in self.trajectory]

    @classmethod
    def from_dense(cls, Q, A, b, c, **kw) -> "LcqpInstance":
        Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
        A = np.asarray(A, dtype=np.float64).reshape(-1, Q.shape[0])
        return cls(Q.shape[0], A.shape[0], SparseMatrix.from_dense(Q, symmetric=True),
                   SparseMatrix.from_dense(A), b, c, **kw)

    def to_dict(self) -> dict:
        out = {"n": self.n, "m": self.m, "q": self.Q.entries(), "a": self.A.entries(),
               "b": self.b.tolist(), "c": self.c.tolist()}
        if self.x_star is not None:
            out["x_star"] = self.x_star.tolist()
        if self.trajectory is not None:
            out["trajectory"] = [x.tolist() for x in self.trajectory]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "LcqpInstance":
        n, m = int(d["n"]), int(d["m"])
        return cls(n, m, SparseMatrix.from_entries(n, n, d["q"], symmetric=True),
                   SparseMatrix.from_entries(m, n, d["a"]), d["b"], d["c"],
                   x_star=d.get("x_star"), trajectory=d.get("trajectory"))

    def objective(self, x) -> float:
        return objective(self, x)


@dataclass
class SolveReport:
    x: np.ndarray
    objective: float
    cons_violation: float
    iterations: int
    wall_time: float
    rel_obj_gap_pct: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"x": np.asarray(self.x).tolist(), "objective": float(self.objective),
               "rel_obj_gap_pct": self.rel_obj_gap_pct,
               "cons_violation": float(self.cons_violation),
               "iterations": int(self.iterations), "wall_time": float(self.wall_time)}
        out.update(self.extra)
        return out


def _check_len(x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (n,):
        raise ValueError(f"dimension mismatch: got {x.shape}, expected ({n},)")
    return x


def objective(inst: LcqpInstance, x) -> float:
    x = _check_len(x, inst.n)
    return float(0.5 * x @ inst.Q.matvec(x) + inst.c @ x)


def constraint_violation(inst: LcqpInstance, x) -> float:
    """Mean row violation, each row normalized by max(|b_i|, max_j |A_ij|)."""
    x = _check_len(x, inst.n)
    if inst.m == 0:
        return 0.0
    scale = np.maximum(np.abs(inst.b), inst.A.row_abs_max())
    scale[scale == 0.0] = 1.0
    return float(np.mean(np.abs(inst.A.matvec(x) - inst.b) / scale))


def max_violation(inst: LcqpInstance, x) -> float:
    """max_i |A_i x - b_i|."""
    x = _check_len(x, inst.n)
    if inst.m == 0:
        return 0.0
    return float(np.max(np.abs(inst.A.matvec(x) - inst.b)))


def relative_objective_gap(obj_pred: float, obj_star: float) -> float:
    """Percent gap ``|(pred - star) / star| * 100``.

    Falls back to the absolute error (times 100) when ``obj_star == 0`` and
    emits :class:`ZeroObjectiveWarning` as the flag.
    """
    if obj_star == 0.0:
        warnings.warn("optimal objective is zero; reporting absolute error",
                      ZeroObjectiveWarning, stacklevel=2)
        return abs(obj_pred - obj_star) * 100.0
    return abs((obj_pred - obj_star) / obj_star) * 100.0


def kkt_residuals(inst: LcqpInstance, x, lam, s) -> tuple[float, float, float]:
    x = _check_len(x, inst.n)
    lam = _check_len(lam, inst.m)
    s = _check_len(s, inst.n)
    primal = float(np.max(np.abs(inst.A.matvec(x) - inst.b))) if inst.m else 0.0
    dual_vec = inst.Q.matvec(x) + inst.c - inst.A.rmatvec(lam) - s
    dual = float(np.max(np.abs(dual_vec))) if inst.n else 0.0
    comp = float(np.max(np.abs(x * s))) if inst.n else 0.0
    return primal, dual, comp


def is_psd_sampled(Q: SparseMatrix, k: int = 32, seed: int = 0, tol: float = 1e-8) -> bool:
    """Probabilistic PSD check: v'Qv >= -tol * |v|^2 on k random directions."""
    from .rng import SplitMix64

    rng = SplitMix64(seed)
    V = rng.normal(Q.n_rows * k).reshape(Q.n_rows, k)
    quad = np.einsum("ik,ik->k", V, Q.csr @ V)
    return bool(np.all(quad >= -tol * np.einsum("ik,ik->k", V, V)))


_SENSES = {"<=": 1.0, "=": 0.0, ">=": -1.0}


def to_equality_form(Q, A_ineq, b, c, senses: Sequence[str]) -> LcqpInstance:
    """Append one nonnegative slack per inequality row; originals keep their order."""
    Qs = Q if isinstance(Q, SparseMatrix) else SparseMatrix.from_dense(Q, symmetric=True)
    As = A_ineq if isinstance(A_ineq, SparseMatrix) else SparseMatrix.from_dense(A_ineq)
    b = np.asarray(b, dtype=np.float64).ravel()
    c = np.asarray(c, dtype=np.float64).ravel()
    n0, m = Qs.n_rows, As.n_rows
    if As.n_cols != n0 or len(b) != m or len(c) != n0 or len(senses) != m:
        raise ValueError("dimension mismatch in inequality-form input")
    try:
        signs = [_SENSES[s] for s in senses]
    except KeyError as exc:
        raise ValueError(f"unknown row sense {exc.args[0]!r}") from None
    slack_rows = [i for i, s in enumerate(signs) if s != 0.0]
    k = len(slack_rows)
    rows = np.concatenate([As.rows, np.asarray(slack_rows, dtype=np.int64)])
    cols = np.concatenate([As.cols, n0 + np.arange(k, dtype=np.int64)])
    vals = np.concatenate([As.vals, np.asarray([signs[i] for i in slack_rows])])
    n = n0 + k
    A = SparseMatrix(m, n, rows, cols, vals)
    Qp = SparseMatrix(n, n, Qs.rows, Qs.cols, Qs.vals, symmetric=True)
    return LcqpInstance(n, m, Qp, A, b, np.concatenate([c, np.zeros(k)]))


@dataclass
class BruteForceResult:
    status: str  # "optimal" or "infeasible"
    x: np.ndarray | None
    objective: float
    lam: np.ndarray | None = None
    s: np.ndarray | None = None


def brute_force_optimum(inst: LcqpInstance, max_n: int = 12,
                        feas_tol: float = 1e-9, cond_limit: float = 1e12) -> BruteForceResult:
    """Enumerate every set of variables pinned to zero and solve the reduced KKT system.

    For a free set F the system is ``[[Q_FF, -A_F'], [A_F, 0]] [x_F; lam] = [-c_F; b]``.
    Systems with condition number above ``cond_limit`` are treated as singular and skipped.
    """
    n, m = inst.n, inst.m
    if n > max_n:
        raise ValueError(f"brute force limited to n <= {max_n}, got {n}")
    Q, A = inst.Q.to_dense(), inst.A.to_dense()
    best = BruteForceResult("infeasible", None, np.inf)
    for k in range(m, n + 1):
        subsets = np.array(list(itertools.combinations(range(n), k)), dtype=np.int64).reshape(-1, k)
        if len(subsets) == 0:
            continue
        size = k + m
        K = np.zeros((len(subsets), size, size))
        K[:, :k, :k] = Q[subsets[:, :, None], subsets[:, None, :]]
        AF = A[:, subsets].transpose(1, 0, 2)  # (S, m, k)
        K[:, :k, k:] = -AF.transpose(0, 2, 1)
        K[:, k:, :k] = AF
        rhs = np.zeros((len(subsets), size))
        rhs[:, :k] = -inst.c[subsets]
        rhs[:, k:] = inst.b
        with np.errstate(all="ignore"):
            cond = np.linalg.cond(K)
        ok = np.isfinite(cond) & (cond < cond_limit)
        if not ok.any():
            continue
        sol = np.linalg.solve(K[ok], rhs[ok][..., None])[..., 0]
        for F, z in zip(subsets[ok], sol):
            xF = z[:k]
            if np.any(xF < -feas_tol):
                continue
            x = np.zeros(n)
            x[F] = np.maximum(xF, 0.0)
            if m and np.max(np.abs(A @ x - inst.b)) > 1e-7 * max(1.0, np.abs(inst.b).max()):
                continue
            obj = 0.5 * x @ Q @ x + inst.c @ x
            if obj < best.objective:
                lam = z[k:]
                s = Q @ x + inst.c - A.T @ lam
                s[F] = 0.0
                best = BruteForceResult("optimal", x, float(obj), lam, s)
    return best


@contextmanager
def _open_text(path, mode: str):
    """Text handle; ``.gz`` paths are gzip streams with a zero header timestamp."""
    path = Path(path)
    if path.suffix != ".gz":
        with path.open(mode, encoding="utf-8") as fh:
            yield fh
    elif mode == "r":
        with gzip.open(path, "rt", encoding="utf-8") as fh:
            yield fh
    else:
        with path.open("wb") as raw, gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as gz, \
                io.TextIOWrapper(gz, encoding="utf-8") as fh:
            yield fh


def load_instance(path) -> LcqpInstance:
    with _open_text(path, "r") as fh:
        return LcqpInstance.from_dict(json.load(fh))


def dump_instance(inst: LcqpInstance, path) -> None:
    """JSON with sorted keys; a ``.gz`` suffix writes a gzip stream."""
    with _open_text(path, "w") as fh:
        json.dump(inst.to_dict(), fh, sort_keys=True)
        fh.write("\n")
