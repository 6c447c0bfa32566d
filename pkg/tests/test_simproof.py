import numpy as np
import pytest

from lcqp_gnn.core import LcqpInstance
from lcqp_gnn.ipm import IpmConfig, IpmIterate, augmented_rhs, cg_run, ipm_step
from lcqp_gnn.simproof import (CG_INIT_STEPS, _tame, CG_ITER_STEPS, IPM_OUTER_STEPS, reference_cg,
                               rel_dev, sim_cg, sim_cg_init, sim_cg_iteration, sim_ipm_outer,
                               verify_lockstep)

from conftest import random_instance


def interior(inst, rng):
    return (rng.uniform(0.5, 2.0, inst.n), rng.standard_normal(inst.m),
            rng.uniform(0.5, 2.0, inst.n))


class TestCgInit:
    def test_central_path_leaves_s(self, rng):
        # with Q = 0, c = 0, lam = 0 and sigma mu = x_i s_i the variable residual is s itself
        inst = random_instance(n=5, m=2, seed=0)
        x = rng.uniform(0.5, 2, inst.n)
        s = 0.7 / x
        inst = LcqpInstance(inst.n, inst.m, inst.Q.__class__.zeros(inst.n, inst.n, symmetric=True),
                            inst.A, inst.b, np.zeros(inst.n))
        st = sim_cg_init(inst, x, np.zeros(inst.m), s, 0.7)
        np.testing.assert_allclose(st.V[:, 0], s, rtol=1e-15)

    def test_dual_cancels(self, rng):
        # c = sigma mu / x cancels the barrier term when Q = 0 and lam = 0
        inst = random_instance(n=5, m=2, seed=0)
        x = rng.uniform(0.5, 2, inst.n)
        inst = LcqpInstance(inst.n, inst.m, inst.Q.__class__.zeros(inst.n, inst.n, symmetric=True),
                            inst.A, inst.b, 0.7 / x)
        st = sim_cg_init(inst, x, np.zeros(inst.m), np.ones(inst.n), 0.7)
        np.testing.assert_allclose(st.V[:, 0], 0.0, atol=1e-15)

    def test_primal_feasible_cancels(self, rng):
        inst = random_instance(n=5, m=2, seed=1)
        x, lam, s = interior(inst, rng)
        inst.b = inst.A.matvec(x)
        st = sim_cg_init(inst, x, lam, s, 0.3)
        np.testing.assert_allclose(st.C[:, 0], 0.0, atol=1e-14)

    def test_matches_direct_assembly(self, rng):
        for seed in range(10):
            inst = random_instance(n=7, m=3, seed=seed)
            x, lam, s = interior(inst, rng)
            st = sim_cg_init(inst, x, lam, s, 0.4)
            want = augmented_rhs(inst, IpmIterate(x, lam, s, 1.0), 0.4)
            assert rel_dev(st.r, want) <= 1e-12
            np.testing.assert_array_equal(st.p, st.r)
            np.testing.assert_array_equal(st.w, 0.0)
            assert st.steps == CG_INIT_STEPS

    def test_rejects_boundary(self):
        inst = random_instance(n=3, m=1, seed=0)
        with pytest.raises(ValueError):
            sim_cg_init(inst, np.zeros(inst.n), np.zeros(1), np.ones(inst.n), 1.0)


class TestCgIteration:
    def one_by_one(self):
        # Q = 0, c = 0, A = [1], b = 0; at x = s = 1, lam = 0, sigma mu = 1 the rhs is (1, 1)
        return LcqpInstance.from_dense(np.zeros((1, 1)), [[1.0]], [0.0], [0.0])

    def test_zero_residual_converged(self, rng):
        inst = random_instance(n=4, m=2, seed=2)
        x, lam, s = interior(inst, rng)
        st = sim_cg_init(inst, x, lam, s, 0.5)
        st.V[:, 0] = 0.0
        st.C[:, 0] = 0.0
        nxt = sim_cg_iteration(inst, st)
        assert nxt.converged
        assert nxt.steps == st.steps
        np.testing.assert_array_equal(nxt.V, st.V)
        np.testing.assert_array_equal(nxt.C, st.C)

    def test_one_by_one_rules(self):
        inst = self.one_by_one()
        P = np.array([[1.0, -1.0], [-1.0, 0.0]])
        for rule, want in (("textbook", [-1.0, -2.0]), ("residual", [-2 / 3, -2.0])):
            st, _ = sim_cg(inst, [1.0], [0.0], [1.0], 1.0, iterations=2, alpha_rule=rule)
            ref = cg_run(P, [1.0, 1.0], max_iter=2, alpha_rule=rule, breakdown_tol=None)
            np.testing.assert_allclose(st.w, ref, rtol=1e-14)
            np.testing.assert_allclose(st.w, want, rtol=1e-14)

    def test_seven_steps_per_iteration(self, rng):
        inst = random_instance(n=5, m=2, seed=3)
        x, lam, s = interior(inst, rng)
        st = sim_cg_init(inst, x, lam, s, 0.5)
        nxt = sim_cg_iteration(inst, st)
        assert nxt.steps - st.steps == CG_ITER_STEPS
        assert nxt.history[-7:] == [f"iter.{j}" for j in range(1, 8)]

    def test_lockstep_with_reference(self, rng):
        compared = 0
        for seed in range(5):
            inst = random_instance(n=int(rng.integers(2, 10)), m=int(rng.integers(1, 5)), seed=seed)
            x, lam, s = interior(inst, rng)
            it = IpmIterate(x, lam, s, float(x @ s / inst.n))
            _, trace = reference_cg(inst, it, 0.5 * it.mu)
            with np.errstate(all="ignore"):
                _, states = sim_cg(inst, x, lam, s, 0.5 * it.mu, record=True)
            assert len(states) == len(trace.r)
            for k, st in enumerate(states):
                if not _tame(trace.r[k], trace.p[k], trace.w[k]):
                    break
                compared += 1
                for ch in ("r", "p", "w"):
                    assert rel_dev(getattr(st, ch), getattr(trace, ch)[k]) <= 1e-9, (seed, k, ch)
        assert compared >= 10

    def test_unknown_rule(self, rng):
        inst = random_instance(n=3, m=1, seed=0)
        st = sim_cg_init(inst, *interior(inst, rng), 1.0)
        with pytest.raises(ValueError):
            sim_cg_iteration(inst, st, alpha_rule="other")


class TestIpmOuter:
    def test_zero_direction(self, rng):
        inst = random_instance(n=4, m=2, seed=4)
        x, lam, s = interior(inst, rng)
        # sigma mu = x_i s_i with dx = 0 makes ds = 0 as well
        s = 0.6 / x
        it = IpmIterate(x, lam, s, 1.2)
        out = sim_ipm_outer(inst, it, 0.5, newton=(np.zeros(inst.n), np.zeros(inst.m)))
        np.testing.assert_allclose(out.ds, 0.0, atol=1e-15)
        np.testing.assert_allclose(out.iterate.x, x, rtol=1e-15)
        np.testing.assert_allclose(out.iterate.s, s, rtol=1e-15)
        np.testing.assert_array_equal(out.iterate.lam, lam)
        assert out.iterate.mu == 0.6

    def test_eps_rule_with_positive_direction(self):
        inst = LcqpInstance.from_dense(np.zeros((2, 2)), [[1.0, 1.0]], [2.0], [0.0, 0.0])
        x, s = np.array([3.0, 4.0]), np.array([5.0, 6.0])
        eps = 10.0
        it = IpmIterate(x, np.zeros(1), s, 1.0)
        # large sigma mu keeps ds positive; dx = (20, 20) >= eps
        out = sim_ipm_outer(inst, it, 0.5, mu=1000.0, eps=eps,
                            newton=(np.array([20.0, 20.0]), np.zeros(1)))
        assert np.all(out.ds >= eps)
        assert out.alpha == min(1.0, *(x / eps), *(s / eps))

    def test_step_count(self, rng):
        inst = random_instance(n=4, m=2, seed=5)
        x, lam, s = interior(inst, rng)
        out = sim_ipm_outer(inst, IpmIterate(x, lam, s, 1.0), 0.5)
        k = inst.n + inst.m
        assert out.steps == CG_INIT_STEPS + CG_ITER_STEPS * k + IPM_OUTER_STEPS

    def test_matches_reference_step(self, rng):
        compared = 0
        for seed in range(5):
            inst = random_instance(n=4, m=2, seed=seed)
            x, lam, s = interior(inst, rng)
            it = IpmIterate(x, lam, s, float(x @ s / inst.n))
            w, _ = reference_cg(inst, it, 0.5 * it.mu)
            if not _tame(w):
                continue
            compared += 1
            cfg = IpmConfig(inner="cg", fallback=False, line_search="eps_continuous")
            ref, info = ipm_step(inst, it, cfg, newton=(w[: inst.n], w[inst.n:]))
            out = sim_ipm_outer(inst, it, 0.5)
            for a, b in ((out.iterate.x, ref.x), (out.iterate.s, ref.s),
                         (out.iterate.lam, ref.lam), (out.alpha, info["alpha"])):
                assert rel_dev(a, b) <= 1e-9
        assert compared >= 1


class TestVerify:
    def test_report(self):
        rep = verify_lockstep(n=4, m=2, trials=3, seed=2)
        assert rep.ok
        assert rep.step_counts_ok
        assert rep.max_deviation <= 1e-9
        d = rep.to_dict()
        assert {"cg_init", "cg_iter", "ipm_outer", "trajectory"} <= set(d["deviations"])
        assert d["counts"]["outer_compared"] > 0

    def test_diverged_reference_not_scored(self):
        rep = verify_lockstep(n=10, m=5, trials=3, seed=1)
        assert rep.counts.get("cg_diverged", 0) > 0
        assert rep.vacuous and not rep.ok
        assert np.isfinite(rep.max_deviation)

    def test_tame(self):
        assert _tame([1.0, -2.0], [])
        assert not _tame([np.nan])
        assert not _tame([1e200])

    def test_rel_dev(self):
        assert rel_dev([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert rel_dev([0.5], [0.0]) == 0.5
        assert rel_dev([11.0], [10.0]) == 0.1
        assert rel_dev([], []) == 0.0
