import numpy as np
import pytest

from gradfb.lbfgs import MAX_ITERATIONS, TOLERANCE_MET, LbfgsOptions, OptimResult, minimize


def random_quadratic(seed):
    """SPD quadratic 0.5 x'Ax - b'x in 2..10 dimensions, condition number up to 100."""
    r = np.random.default_rng(seed)
    d = int(r.integers(2, 11))
    q, _ = np.linalg.qr(r.normal(size=(d, d)))
    a = q @ np.diag(r.uniform(1.0, 100.0, d)) @ q.T
    b = r.normal(size=d)
    return d, a, b, r.normal(size=d)


def quadratic_run(a, b, x0, d, objective=None):
    """L-BFGS on 0.5 x'Ax - b'x to gradient norm 1e-10, capped at d + 2 iterations."""
    objective = objective or (lambda x: (0.5 * x @ a @ x - b @ x, a @ x - b))
    return minimize(objective, x0, LbfgsOptions(history_size=10, max_iterations=d + 2,
                                                gradient_tolerance=1e-10 / np.sqrt(d)))


def rosenbrock(x):
    f = 100.0 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2
    g = np.array([-400.0 * x[0] * (x[1] - x[0] ** 2) - 2 * (1 - x[0]), 200.0 * (x[1] - x[0] ** 2)])
    return f, g


class TestQuadratic:
    @pytest.mark.parametrize("seed", range(200))
    def test_converges_within_d_plus_2_iterations(self, seed):
        d, a, b, x0 = random_quadratic(seed)
        res = quadratic_run(a, b, x0, d)
        assert res.termination == TOLERANCE_MET
        assert res.iterations_used <= d + 2
        assert np.linalg.norm(a @ res.x_final - b) <= 1e-10

    @pytest.mark.parametrize("seed", range(20))
    def test_every_step_is_a_descent_direction(self, seed):
        d, a, b, x0 = random_quadratic(seed)
        seen = []

        def f(x):
            seen.append((0.5 * x @ a @ x - b @ x, x.copy()))
            return seen[-1][0], a @ x - b
        res = quadratic_run(a, b, x0, d, objective=f)
        # recover the accepted iterates from the evaluation log by their losses
        iterates, j = [x0], 1
        for loss in res.loss_trace:
            while seen[j][0] != loss:
                j += 1
            iterates.append(seen[j][1])
        for base, nxt in zip(iterates, iterates[1:]):
            assert (a @ base - b) @ (nxt - base) < 0

    def test_constant_function_converges_at_iteration_zero(self):
        res = minimize(lambda x: (3.0, np.zeros_like(x)), np.ones(4))
        assert res.converged and res.iterations_used == 0 and res.termination == TOLERANCE_MET

    def test_one_dimensional_exact_line_search(self):
        res = minimize(lambda x: (2.0 * (x[0] - 3) ** 2, 4.0 * (x - 3)), np.array([0.0]),
                       LbfgsOptions(gradient_tolerance=1e-12))
        assert res.x_final[0] == pytest.approx(3.0, abs=1e-12)
        assert res.iterations_used <= 2


class TestRosenbrock:
    def test_reaches_1e_8_within_100_iterations(self):
        res = minimize(rosenbrock, np.array([-1.2, 1.0]), LbfgsOptions(max_iterations=100, gradient_tolerance=1e-12))
        assert res.loss < 1e-8
        assert res.iterations_used <= 100
        np.testing.assert_allclose(res.x_final, [1.0, 1.0], atol=1e-4)

    @pytest.mark.parametrize("seed", range(10))
    def test_random_starts(self, seed):
        x0 = np.random.default_rng(seed).uniform(-2, 2, 2)
        res = minimize(rosenbrock, x0, LbfgsOptions(max_iterations=100, gradient_tolerance=1e-12))
        assert res.loss < 1e-8


class TestMonotonicity:
    @pytest.mark.parametrize("seed", range(10))
    def test_loss_trace_never_increases(self, seed):
        x0 = np.random.default_rng(seed).uniform(-2, 2, 2)
        res = minimize(rosenbrock, x0, LbfgsOptions(max_iterations=60))
        trace = np.array(res.loss_trace)
        assert np.all(np.diff(trace) <= 0)
        assert trace[-1] <= res.initial_loss

    def test_best_iterate_is_returned_even_with_fixed_steps(self):
        # a fixed step of 1.1/L overshoots; the returned point is still the best seen
        f = lambda x: (float(x @ x), 2 * x)
        res = minimize(f, np.array([1.0, -2.0]),
                       LbfgsOptions(line_search="fixed_step", learning_rate=3.0, max_iterations=5))
        assert res.loss <= res.initial_loss
        assert res.loss == pytest.approx(f(res.x_final)[0])


class TestTermination:
    def test_zero_iterations_returns_start(self):
        x0 = np.array([1.0, 2.0])
        res = minimize(rosenbrock, x0, LbfgsOptions(max_iterations=0))
        np.testing.assert_array_equal(res.x_final, x0)
        assert res.iterations_used == 0 and res.termination == MAX_ITERATIONS
        assert res.loss == res.initial_loss == rosenbrock(x0)[0]

    def test_already_optimal(self):
        res = minimize(rosenbrock, np.array([1.0, 1.0]))
        assert res.converged and res.termination == TOLERANCE_MET and res.iterations_used == 0

    def test_target_loss_stops_early(self):
        res = minimize(rosenbrock, np.array([-1.2, 1.0]), LbfgsOptions(target_loss=1e-2))
        assert res.converged and res.loss <= 1e-2
        full = minimize(rosenbrock, np.array([-1.2, 1.0]), LbfgsOptions(gradient_tolerance=1e-12))
        assert res.iterations_used < full.iterations_used

    def test_non_finite_start_raises(self):
        with pytest.raises(FloatingPointError):
            minimize(lambda x: (float("nan"), x), np.zeros(2))

    def test_non_finite_trial_points_are_backed_off(self):
        # log barrier: infinite past x = 1, so long steps must shrink
        def f(x):
            if x[0] >= 1:
                return float("inf"), np.array([np.inf])
            return float(-np.log(1 - x[0]) + x[0] ** 2), np.array([1 / (1 - x[0]) + 2 * x[0]])
        res = minimize(f, np.array([0.9]), LbfgsOptions(gradient_tolerance=1e-9))
        assert np.isfinite(res.loss) and res.loss <= f(np.array([0.9]))[0]

    def test_result_type(self):
        assert isinstance(minimize(rosenbrock, np.zeros(2), LbfgsOptions(max_iterations=1)), OptimResult)


class TestBox:
    def test_projection_keeps_masked_coordinates_in_unit_interval(self):
        target = np.array([1.5, -0.5, 2.0])
        f = lambda x: (float(np.sum((x - target) ** 2)), 2 * (x - target))
        mask = np.array([True, True, False])
        res = minimize(f, np.full(3, 0.5), LbfgsOptions(gradient_tolerance=1e-10), box_mask=mask)
        np.testing.assert_allclose(res.x_final, [1.0, 0.0, 2.0], atol=1e-10)
        assert res.converged

    def test_projection_can_be_disabled(self):
        target = np.array([1.5])
        f = lambda x: (float(np.sum((x - target) ** 2)), 2 * (x - target))
        res = minimize(f, np.array([0.5]), LbfgsOptions(project_box=False), box_mask=np.array([True]))
        assert res.x_final[0] == pytest.approx(1.5)


class TestOptionValidation:
    @pytest.mark.parametrize("kwargs", [
        dict(wolfe_c1=0.9, wolfe_c2=0.1), dict(learning_rate=0.0), dict(history_size=0),
        dict(max_iterations=-1), dict(line_search="backtracking"), dict(gradient_tolerance=-1.0),
    ])
    def test_rejected(self, kwargs):
        with pytest.raises(ValueError):
            LbfgsOptions(**kwargs)


def test_deterministic():
    a = minimize(rosenbrock, np.array([-1.2, 1.0]))
    b = minimize(rosenbrock, np.array([-1.2, 1.0]))
    assert a.x_final.tobytes() == b.x_final.tobytes() and a.loss_trace == b.loss_trace
