"""Tests for the pointwise value pipeline and grid evaluation."""

import math

import numpy as np
import pytest

from clf_forge.integrator import IntegratorConfig
from clf_forge.local_clf import terminal_state_on_level
from clf_forge.value_eval import (
    EvalParams,
    evaluate_grid,
    evaluate_state,
    min_running_cost,
    running_cost_floor,
    solve_main,
)

KRUZHKOV_AT_ONE_ONE = 0.5276334472589853


class TestSolveMain:
    def test_exact_guess_recovers_value(self, sys_big, clf_big, int_config):
        v, p_opt, char = solve_main(
            sys_big, clf_big, np.array([1.0, 1.0]), np.array([1.0, 1.0]),
            EvalParams(), int_config,
        )
        assert char.exit.tag == "reached_target"
        assert v == pytest.approx(KRUZHKOV_AT_ONE_ONE, abs=2e-3)

    def test_boundary_continuity(self, sys_big, clf_big, int_config):
        xi = np.array([math.cos(0.9), math.sin(0.9)])
        x_on = terminal_state_on_level(clf_big, xi, clf_big.c)
        grad = clf_big.grad(x_on)
        x0 = x_on + 1e-6 * grad / np.linalg.norm(grad)
        v, _, char = solve_main(
            sys_big, clf_big, x0, grad, EvalParams(), int_config,
        )
        assert char.exit.tag == "reached_target"
        assert v == pytest.approx(1.0 - math.exp(-clf_big.c), abs=1e-4)

    def test_hopeless_guess_saturates(self, sys_big, clf_big, int_config):
        # A short horizon starting far out cannot reach the target from
        # any probed costate, so the saturation value is returned.
        v, _, char = solve_main(
            sys_big, clf_big, np.array([2.0, 2.5]), np.array([0.0, 0.0]),
            EvalParams(t_max=1e-4, t_max_recompute=1e-4), int_config,
        )
        assert char.exit.tag == "horizon_exhausted"
        assert v == 1.0 - 1e-15


class TestEvaluateState:
    def test_inside_target(self, sys_big, clf_big, int_config):
        x0 = np.array([0.1, 0.1])
        res = evaluate_state(sys_big, clf_big, x0, EvalParams(), int_config)
        assert res.status == "in_target"
        v_loc = clf_big.v(x0)
        assert res.V == pytest.approx(v_loc)
        assert res.v == pytest.approx(1.0 - math.exp(-v_loc))
        assert np.allclose(res.control, clf_big.u(x0))

    def test_solved_state_and_control(
        self, sys_big, clf_big, int_config, box2d
    ):
        res = evaluate_state(
            sys_big, clf_big, np.array([1.0, 1.0]), EvalParams(),
            int_config, seed=0, bounding_box=box2d,
        )
        assert res.status in ("solved", "replaced_first_order")
        assert res.v == pytest.approx(KRUZHKOV_AT_ONE_ONE, abs=2e-3)
        # Optimal feedback of the quartic benchmark at (1, 1) is -4*x1.
        assert abs(res.control[0] - (-4.0)) <= 0.1
        assert res.v == pytest.approx(1.0 - math.exp(-res.V))

    def test_saturated_far_state(self, sys_big, clf_big, box2d):
        res = evaluate_state(
            sys_big, clf_big, np.array([10.0, 10.0]),
            EvalParams(t_max=0.01, t_max_recompute=0.01, delta1=1e-12),
            IntegratorConfig(), seed=0, bounding_box=box2d,
        )
        assert res.status == "saturated"
        assert res.v == 1.0 - 1e-15
        assert math.isinf(res.V)

    def test_replacement_indicator_zero_unless_replaced(
        self, sys_big, clf_big, int_config, box2d
    ):
        res = evaluate_state(
            sys_big, clf_big, np.array([1.0, 1.0]), EvalParams(),
            int_config, seed=0, bounding_box=box2d,
        )
        if res.status != "replaced_first_order":
            assert res.replacement_indicator == 0.0


class TestEvaluateGrid:
    def test_all_in_target_grid(self, sys_big, clf_big, int_config):
        grid = evaluate_grid(
            sys_big, clf_big, [-0.1, -0.1], [0.1, 0.1], (3, 3),
            EvalParams(), int_config,
        )
        assert all(r.status == "in_target" for r in grid.results)
        assert grid.mask.all()
        assert grid.nodes.shape == (9, 2)

    def test_determinism_same_seed(self, sys_big, clf_big, box2d):
        params = EvalParams(
            n_guesses=2,
            n_guesses_recompute=2,
            powell_tol_main=1e-3,
            powell_tol_aux=1e-4,
        )
        config = IntegratorConfig(atol=1e-6, rtol=1e-6)
        runs = [
            evaluate_state(
                sys_big, clf_big, np.array([1.2, 0.9]), params, config,
                seed=3, bounding_box=box2d,
            )
            for _ in range(2)
        ]
        assert runs[0].v == runs[1].v
        assert runs[0].status == runs[1].status
        assert np.array_equal(runs[0].control, runs[1].control)

    def test_bad_shape_rejected(self, sys_big, clf_big):
        with pytest.raises(ValueError):
            evaluate_grid(sys_big, clf_big, [0, 0], [1, 1], (3,))


class TestCostFloors:
    def test_min_running_cost_interior(self, sys_big):
        # g = 2*x1^4 + x2^2 + u^4/256 is minimized over u at u = 0.
        assert min_running_cost(sys_big, [1.0, 0.0]) == pytest.approx(
            2.0, abs=1e-8
        )

    def test_floor_positive_outside_target(self, sys_big, clf_big):
        floor = running_cost_floor(
            sys_big, clf_big, [-2.0, -2.5], [2.0, 2.5], samples_per_axis=30
        )
        assert floor > 0.0


class TestParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            EvalParams(t_max=10.0, t_max_recompute=5.0)
        with pytest.raises(ValueError):
            EvalParams(n_guesses=4, n_guesses_recompute=2)
        with pytest.raises(ValueError):
            EvalParams(eps=0.5, eps1=0.1)
