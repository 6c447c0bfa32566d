"""Property tests for the invariants that hold across all inputs."""

import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lcqp_gnn import mpnn
from lcqp_gnn.core import LcqpInstance, SparseMatrix, max_violation, objective
from lcqp_gnn.datasets import GenConfig, generate
from lcqp_gnn.graph import decode, encode, permute_graph, permute_instance
from lcqp_gnn.ipm import IpmConfig, ipm_solve
from lcqp_gnn.nullspace import compute_nullspace, feasible_initial_point, project
from lcqp_gnn.pipelines import BarrierState, feasibility_update, step_length_positivity

SETTINGS = settings(max_examples=30, deadline=None)
finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@st.composite
def full_rank_system(draw):
    n = draw(st.integers(2, 9))
    m = draw(st.integers(1, n - 1))
    seed = draw(st.integers(0, 2**31 - 1))
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((m, n))
    d = draw(arrays(np.float64, n, elements=finite))
    return A, d


@st.composite
def small_config(draw):
    n = draw(st.integers(2, 8))
    m = draw(st.integers(1, max(1, n // 2)))
    seed = draw(st.integers(0, 10_000))
    family = draw(st.sampled_from(["generic", "svm", "portfolio"]))
    if family == "svm":
        m = 2 * max(1, m // 2)
    return GenConfig(family, n=n, m=m, seed=seed)


def small_instance():
    return small_config().map(generate)


class TestProjector:
    @SETTINGS
    @given(full_rank_system())
    def test_idempotent(self, sys_):
        A, d = sys_
        p = compute_nullspace(A)
        once = project(p, d)
        np.testing.assert_allclose(project(p, once), once, atol=1e-10 * max(1.0, np.abs(d).max()))

    @SETTINGS
    @given(full_rank_system())
    def test_non_expansive_and_in_kernel(self, sys_):
        A, d = sys_
        p = compute_nullspace(A)
        out = project(p, d)
        scale = max(1.0, np.linalg.norm(d))
        assert np.linalg.norm(out) <= np.linalg.norm(d) + 1e-12 * scale
        np.testing.assert_allclose(A @ out, 0.0, atol=1e-10 * scale * np.abs(A).max())
        assert p.dim == A.shape[1] - A.shape[0]

    @SETTINGS
    @given(full_rank_system())
    def test_normal_equations_formula(self, sys_):
        A, d = sys_
        want = d - A.T @ np.linalg.solve(A @ A.T, A @ d)
        scale = max(1.0, np.abs(d).max()) * np.linalg.cond(A)
        np.testing.assert_allclose(project(compute_nullspace(A), d), want, atol=1e-8 * scale)


class TestSparseMatrix:
    @SETTINGS
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                  elements=st.sampled_from([0.0, 0.0, 1.5, -2.0, 3.25])))
    def test_dense_round_trip(self, M):
        S = SparseMatrix.from_dense(M)
        np.testing.assert_array_equal(S.to_dense(), M)
        assert S.nnz == np.count_nonzero(M)
        assert SparseMatrix.from_entries(*S.shape, S.entries()) == S

    @SETTINGS
    @given(st.integers(1, 6), st.integers(0, 1000))
    def test_entry_order_irrelevant(self, n, seed):
        rng = np.random.default_rng(seed)
        L = rng.standard_normal((n, n))
        S = SparseMatrix.from_dense(L @ L.T, symmetric=True)
        perm = rng.permutation(S.nnz)
        T = SparseMatrix(n, n, S.rows[perm], S.cols[perm], S.vals[perm], symmetric=True)
        assert T == S
        x = rng.standard_normal(n)
        inst = lambda Q: LcqpInstance(n, 1, Q, SparseMatrix.from_dense(np.ones((1, n))),
                                      np.ones(1), np.zeros(n))
        assert objective(inst(T), x) == objective(inst(S), x)


class TestStepLength:
    @SETTINGS
    @given(st.integers(1, 10).flatmap(lambda n: st.tuples(
        arrays(np.float64, n, elements=st.floats(0, 100)), arrays(np.float64, n, elements=finite))))
    def test_keeps_nonnegative_and_maximal(self, xd):
        x, d = xd
        a = step_length_positivity(x, d)
        assert 0.0 <= a <= 1.0
        assert np.all(x + a * d >= -1e-12 * max(1.0, np.abs(x).max()))
        if a < 1.0:
            # any longer step leaves the orthant
            assert np.any(x + min(1.0, a * 1.01 + 1e-9) * d < 0)


class TestGenerator:
    @SETTINGS
    @given(small_config())
    def test_deterministic_and_valid(self, cfg):
        inst = generate(cfg)
        assert generate(cfg).to_dict() == inst.to_dict()
        assert compute_nullspace(inst.A).dim == inst.n - inst.m
        np.testing.assert_array_equal(inst.Q.to_dense(), inst.Q.to_dense().T)


class TestGraph:
    @SETTINGS
    @given(small_instance(), st.booleans())
    def test_decode_inverts_encode(self, inst, glob):
        back = decode(encode(inst, has_global=glob))
        assert back.Q == inst.Q and back.A == inst.A
        np.testing.assert_array_equal(back.b, inst.b)
        np.testing.assert_array_equal(back.c, inst.c)

    @SETTINGS
    @given(small_instance(), st.integers(0, 1000))
    def test_permutation_commutes(self, inst, seed):
        perm = np.random.default_rng(seed).permutation(inst.n)
        a, b = encode(permute_instance(inst, perm)), permute_graph(encode(inst), perm)
        assert a.a_edges == b.a_edges and a.q_edges == b.q_edges
        np.testing.assert_array_equal(a.var_feat, b.var_feat)


class TestFeasibility:
    @settings(max_examples=15, deadline=None)
    @given(small_instance(), st.integers(0, 1000), st.floats(0.0, 1.0))
    def test_iterates_stay_feasible(self, inst, seed, tau0):
        rng = np.random.default_rng(seed)
        p = compute_nullspace(inst.A)
        x = feasible_initial_point(inst)
        state = BarrierState(tau0)
        for t in range(1, 9):
            x = feasibility_update(x, 10 * rng.standard_normal(inst.n), p, state).x_next
            assert max_violation(inst, x) <= 1e-7
            assert x.min() >= -1e-12
            assert state.tau == tau0 * 2.0 ** -t


class TestIpm:
    @settings(max_examples=15, deadline=None)
    @given(small_instance())
    def test_iterates_interior(self, inst):
        _, traj, last = ipm_solve(inst, IpmConfig())
        for x in traj:
            assert np.all(x > 0)
        assert np.all(last.s > 0)


class TestEquivariance:
    @settings(max_examples=15, deadline=None)
    @given(small_instance(), st.integers(0, 1000), st.sampled_from(["feas", "ipm"]))
    def test_predict_permutes(self, inst, seed, mode):
        rng = np.random.default_rng(seed)
        model = mpnn.init_model(mode, L=2, d=6, seed=seed)
        perm = rng.permutation(inst.n)
        x = rng.random(inst.n)
        a = mpnn.predict(model, encode(inst, mode == "ipm"), x)
        b = mpnn.predict(model, encode(permute_instance(inst, perm), mode == "ipm"), x[perm])
        np.testing.assert_allclose(b, a[perm], rtol=1e-12, atol=1e-12)
