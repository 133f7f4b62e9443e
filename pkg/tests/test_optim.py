import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from commodity_slv.optim import BoxDomain, esch_minimize, hybrid_minimize, subplex_minimize


def sphere(x):
    return float(np.sum(np.asarray(x) ** 2))


def rosenbrock(x):
    return (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2


class TestBoxDomain:
    def test_clamp_and_contains(self):
        d = BoxDomain([0.0, -1.0], [1.0, 1.0])
        assert np.array_equal(d.clamp([2.0, -3.0]), [1.0, -1.0])
        assert d.contains([0.5, 0.0]) and not d.contains([1.5, 0.0])

    def test_invalid(self):
        with pytest.raises(ValueError):
            BoxDomain([1.0], [0.0])
        with pytest.raises(ValueError):
            BoxDomain([0.0], [np.inf])

    def test_at_bound(self):
        d = BoxDomain([0.0, 0.0], [1.0, 1.0])
        assert list(d.at_bound(np.array([1.0, 0.5]))) == [True, False]


class TestEsch:
    def test_sphere_4d(self):
        rep = esch_minimize(sphere, BoxDomain([-5.0] * 4, [5.0] * 4), budget=5000, seed=0)
        assert rep.fun <= 1e-2

    def test_abs_1d(self):
        rep = esch_minimize(lambda x: abs(x[0] - 2.0), BoxDomain([0.0], [4.0]), budget=2000, seed=1)
        assert abs(rep.x[0] - 2.0) <= 0.05

    def test_single_generation_bookkeeping(self):
        rep = esch_minimize(sphere, BoxDomain([-1.0] * 2, [1.0] * 2), np_=5, no=7, budget=12, seed=3)
        assert rep.nfev == 12 and len(rep.history) == 12

    def test_budget_used_exactly(self):
        rep = esch_minimize(sphere, BoxDomain([-1.0] * 2, [1.0] * 2), np_=5, no=7, budget=50, seed=3)
        assert rep.nfev == 50

    def test_budget_too_small(self):
        with pytest.raises(ValueError):
            esch_minimize(sphere, BoxDomain([-1.0], [1.0]), np_=5, no=7, budget=11)

    def test_nonfinite_values_are_counted(self):
        def f(x):
            return math.nan if x[0] > 0 else float(x[0] ** 2)

        rep = esch_minimize(f, BoxDomain([-1.0], [1.0]), np_=4, no=6, budget=200, seed=0)
        assert rep.n_nonfinite > 0 and math.isfinite(rep.fun)

    def test_deterministic(self):
        d = BoxDomain([-5.0] * 3, [5.0] * 3)
        a = esch_minimize(sphere, d, budget=600, seed=11)
        b = esch_minimize(sphere, d, budget=600, seed=11)
        assert np.array_equal(a.points, b.points) and a.fun == b.fun

    def test_parallel_map_is_identical(self):
        from concurrent.futures import ThreadPoolExecutor

        d = BoxDomain([-5.0] * 3, [5.0] * 3)
        a = esch_minimize(sphere, d, budget=600, seed=11)
        with ThreadPoolExecutor(4) as pool:
            b = esch_minimize(sphere, d, budget=600, seed=11, map_fn=pool.map)
        assert np.array_equal(a.points, b.points)


class TestSubplex:
    def test_rosenbrock(self):
        rep = subplex_minimize(rosenbrock, BoxDomain([-5.0, -5.0], [5.0, 5.0]), [-1.2, 1.0], budget=10000)
        assert rep.fun <= 1e-4

    def test_already_optimal(self):
        rep = subplex_minimize(sphere, BoxDomain([-1.0] * 3, [1.0] * 3), np.zeros(3))
        assert rep.fun == 0.0 and np.array_equal(rep.x, np.zeros(3))

    def test_one_dimensional(self):
        rep = subplex_minimize(lambda x: abs(x[0] - 3.0), BoxDomain([0.0], [10.0]), [0.5], budget=5000)
        assert abs(rep.x[0] - 3.0) <= 1e-6

    def test_start_outside_rejected(self):
        with pytest.raises(ValueError):
            subplex_minimize(sphere, BoxDomain([0.0], [1.0]), [2.0])

    def test_higher_dimension_uses_subspaces(self):
        d = BoxDomain([-2.0] * 8, [2.0] * 8)
        rep = subplex_minimize(lambda x: float(np.sum((np.arange(1, 9) * (x - 0.3)) ** 2)), d, np.full(8, 1.5),
                               budget=20000)
        assert rep.fun <= 1e-8


class TestHybrid:
    def test_rastrigin_3d(self):
        def rastrigin(x):
            x = np.asarray(x)
            return 10 * len(x) + float(np.sum(x * x - 10 * np.cos(2 * np.pi * x)))

        rep = hybrid_minimize(rastrigin, BoxDomain([-5.12] * 3, [5.12] * 3), seed=0, global_budget=20000,
                              local_budget=10000)
        assert rep.fun <= 1.0

    def test_constant_objective(self):
        rep = hybrid_minimize(lambda x: 7.0, BoxDomain([0.0] * 2, [1.0] * 2), seed=0, global_budget=200,
                              local_budget=100)
        assert rep.fun == 7.0

    def test_phases_recorded(self):
        rep = hybrid_minimize(sphere, BoxDomain([-1.0] * 2, [1.0] * 2), seed=0, global_budget=200, local_budget=100)
        assert [p["phase"] for p in rep.phases] == ["esch", "subplex"]

    @pytest.mark.parametrize("seed", range(3))
    def test_not_worse_than_subplex_from_random(self, seed):
        d = BoxDomain([-4.0] * 4, [4.0] * 4)
        A = np.diag([1.0, 3.0, 10.0, 30.0])

        def quad(x):
            return float(x @ A @ x)

        x0 = np.random.default_rng(seed).uniform(d.lower, d.upper)
        local = subplex_minimize(quad, d, x0, budget=300)
        hyb = hybrid_minimize(quad, d, seed=seed, global_budget=300, local_budget=300, np_=10, no=20)
        assert hyb.fun <= local.fun

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_feasibility_and_monotone_record(self, seed):
        d = BoxDomain([-2.0, 0.0, 1.0], [2.0, 0.5, 3.0])
        rep = hybrid_minimize(lambda x: float(np.sum(np.sin(3 * x) + x)), d, seed=seed, global_budget=300,
                              local_budget=200, np_=10, no=20)
        assert np.all(rep.points >= d.lower) and np.all(rep.points <= d.upper)
        assert np.all(np.diff(rep.history) <= 0)
        assert rep.fun == pytest.approx(float(np.min(rep.history)))

    def test_deterministic(self):
        d = BoxDomain([-5.0, -5.0], [5.0, 5.0])
        a = hybrid_minimize(rosenbrock, d, seed=5, global_budget=2000, local_budget=2000)
        b = hybrid_minimize(rosenbrock, d, seed=5, global_budget=2000, local_budget=2000)
        assert np.array_equal(a.points, b.points) and a.fun == b.fun
