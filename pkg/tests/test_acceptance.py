"""Acceptance gate: end-to-end checks of the full pipeline.

Each criterion prints one PASS/FAIL line (bypassing capture) and asserts.
Shared heavy artifacts (the 9x9 value grid, the MPC runs) are computed
once in module-scoped fixtures and reused across criteria.
"""

import math
import sys as _sys
import time

import numpy as np
import pytest

from clf_forge.cli import _result_row, _write_csv
from clf_forge.integrator import IntegratorConfig, integrate
from clf_forge.local_clf import (
    check_petrov,
    example_2d_clf,
    find_level_sup,
    linearize,
    quadratic_clf,
    solve_lyapunov,
    solve_riccati,
    terminal_state_on_level,
)
from clf_forge.characteristics import ExitParams, hamiltonian, integrate_reverse
from clf_forge.mpc import MpcConfig, monte_carlo
from clf_forge.shooting import solve_shooting, terminal_multiplier_roots
from clf_forge.systems import make_example_2d, make_pvtol
from clf_forge.value_eval import (
    EvalParams,
    evaluate_grid,
    evaluate_state,
    evaluate_state_ball,
    running_cost_floor,
)

GRID_LO = [-2.0, -2.5]
GRID_HI = [2.0, 2.5]
GRID_SHAPE = (9, 9)
GRID_PARAMS = EvalParams(t_max=5.0)
BOX2D = (np.array([-6.0, -6.0]), np.array([6.0, 6.0]))

MPC_PARAMS = EvalParams(t_max=10.0, t_max_recompute=20.0, powell_tol_main=1e-3)
MPC_INT = IntegratorConfig(atol=1e-5, rtol=1e-5)
MPC_X0 = np.array([1.5, 1.5])


def _report(num: int, name: str, ok: bool) -> bool:
    verdict = "PASS" if ok else "FAIL"
    print(
        f"criterion {num:2d} [{name}]: {verdict}",
        file=_sys.__stdout__,
        flush=True,
    )
    return ok


def _grid_csv_bytes(tmp_dir, tag, result):
    m = 1
    header = (
        ["x1", "x2", "v", "V", "u1"]
        + ["status", "shooting_error", "shooting_time",
           "replacement_indicator", "in_domain_mask"]
    )
    path = tmp_dir / f"values_{tag}.csv"
    _write_csv(
        path,
        header,
        (
            _result_row(node, res, m, bool(mask))
            for node, res, mask in zip(result.nodes, result.results, result.mask)
        ),
    )
    return path.read_bytes()


def _mpc_csv_bytes(tmp_dir, tag, run):
    path = tmp_dir / f"mpc_{tag}.csv"
    _write_csv(
        path, ["t", "mean", "std"], zip(run.mean_times, run.mean, run.std)
    )
    return path.read_bytes()


@pytest.fixture(scope="module")
def sys_big():
    return make_example_2d(20.0)


@pytest.fixture(scope="module")
def clf_big():
    return example_2d_clf(20.0)


@pytest.fixture(scope="module")
def sys_small():
    return make_example_2d(1.2)


@pytest.fixture(scope="module")
def clf_small():
    return example_2d_clf(1.2)


@pytest.fixture(scope="module")
def pvtol():
    return make_pvtol(alpha=0.1, a1=5.0, a2=5.0, lam1=0.2, lam2=0.04)


@pytest.fixture(scope="module")
def pvtol_riccati(pvtol):
    A, B = linearize(pvtol)
    P, S = solve_riccati(A, B, 0.2 * np.eye(6), 0.04 * np.eye(2))
    return A, B, P, S


@pytest.fixture(scope="module")
def pvtol_clf(pvtol_riccati):
    _, _, P, S = pvtol_riccati
    return quadratic_clf(P, S, c=0.017, c1=0.012)


@pytest.fixture(scope="module")
def grid_main(sys_big, clf_big):
    start = time.perf_counter()
    result = evaluate_grid(
        sys_big, clf_big, GRID_LO, GRID_HI, GRID_SHAPE,
        GRID_PARAMS, IntegratorConfig(), seed=0, workers=1,
    )
    return result, time.perf_counter() - start


@pytest.fixture(scope="module")
def mpc_cold(sys_small, clf_small):
    res = evaluate_state(
        sys_small, clf_small, MPC_X0, MPC_PARAMS, MPC_INT, seed=0,
        bounding_box=BOX2D,
    )
    assert res.costate is not None
    return res


@pytest.fixture(scope="module")
def mpc_det(sys_small, clf_small, mpc_cold):
    cfg = MpcConfig(
        horizon=15.0, dt_recompute=0.1, dt_sde=1e-3,
        controller="clf_pipeline", n_monte_carlo=1, seed=0,
    )
    return monte_carlo(
        sys_small, clf_small, MPC_X0, cfg, MPC_PARAMS, MPC_INT,
        bounding_box=BOX2D, workers=1, p0_init=mpc_cold.costate,
    )


@pytest.fixture(scope="module")
def mpc_sto(sys_small, clf_small, mpc_cold):
    cfg = MpcConfig(
        horizon=15.0, dt_recompute=0.2, dt_sde=1e-3,
        noise=[0.05, 0.05], n_monte_carlo=50, seed=0,
        controller="clf_pipeline", fallback="reuse",
    )
    return monte_carlo(
        sys_small, clf_small, MPC_X0, cfg, MPC_PARAMS, MPC_INT,
        bounding_box=BOX2D, workers=1, p0_init=mpc_cold.costate,
    )


def test_criterion_1_value_matches_analytic_clf(grid_main, clf_big):
    result, elapsed = grid_main
    errs = []
    for node, res in zip(result.nodes, result.results):
        v_loc = 1.0 - math.exp(-clf_big.v(node))
        errs.append(abs(res.v - v_loc))
    errs = np.asarray(errs)
    ok = (
        float(errs.max()) <= 0.02
        and float(np.mean(errs <= 5e-3)) >= 0.90
        and elapsed <= 900.0
    )
    assert _report(1, "grid value vs analytic CLF", ok), (
        f"max err {errs.max():.3g}, share within 5e-3 "
        f"{np.mean(errs <= 5e-3):.3f}, elapsed {elapsed:.0f}s"
    )


def test_criterion_2_feedback_matches_optimal(grid_main):
    result, _ = grid_main
    worst = 0.0
    for node, res in zip(result.nodes, result.results):
        ref = min(max(-4.0 * node[0], -20.0), 20.0)
        worst = max(worst, abs(float(res.control[0]) - ref))
    ok = worst <= 0.1
    assert _report(2, "feedback vs -4*x1", ok), f"worst gap {worst:.3g}"


def test_criterion_3_hamiltonian_vanishes(sys_big, grid_main):
    result, _ = grid_main
    worst = 0.0
    n_traces = 0
    for res in result.results:
        char = res.characteristic
        if char is None:
            continue
        n_traces += 1
        h = np.array(
            [
                hamiltonian(sys_big, x, p, char.ptilde)
                for x, p in zip(char.states, char.costates)
            ]
        )
        worst = max(worst, float(np.max(np.abs(h))))
    ok = n_traces > 0 and worst <= 1e-4
    assert _report(3, "Hamiltonian vanishing", ok), (
        f"max |H| {worst:.3g} over {n_traces} traces"
    )


def test_criterion_4_value_positivity_and_exit_bound(
    sys_big, clf_big, grid_main
):
    result, _ = grid_main
    floor = running_cost_floor(sys_big, clf_big, GRID_LO, GRID_HI)
    v_edge = 1.0 - math.exp(-clf_big.c)
    ok = True
    for node, res in zip(result.nodes, result.results):
        if res.status != "solved":
            continue
        if clf_big.v(node) <= clf_big.c:
            continue
        if not res.v > v_edge:
            ok = False
        if res.V - clf_big.c < floor * res.exit_time - 1e-6:
            ok = False
    assert _report(4, "positivity and exit-time bound", ok)


def test_criterion_5_local_clf_suites(
    sys_big, clf_big, sys_small, clf_small, pvtol, pvtol_riccati, pvtol_clf
):
    report = find_level_sup(
        sys_big, clf_big, c_tilde=0.032, n_levels=64, n_samples=60,
        n_guesses=3, seed=0,
    )
    ok_level = report.c_sup is not None and 0.0150 <= report.c_sup <= 0.0160

    A, B, P, S = pvtol_riccati
    Rinv = np.linalg.inv(0.04 * np.eye(2))
    residual = A.T @ P + P @ A - P @ B @ Rinv @ B.T @ P + 0.2 * np.eye(6)
    ok_riccati = (
        np.linalg.norm(residual) <= 1e-8
        and float(np.min(np.linalg.eigvalsh(P))) > 0.0
        and float(np.max(np.real(np.linalg.eigvals(A + B @ S)))) < 0.0
    )

    # Level 0.017: decrease negative and feedback admissible at sampled
    # boundary and interior points of the sublevel set.
    rng = np.random.default_rng(0)
    ok_admissible = True
    box = pvtol.control_box
    for k in range(1000):
        xi = rng.standard_normal(6)
        xi /= np.linalg.norm(xi)
        level = 0.017 if k % 2 == 0 else float(rng.uniform(1e-4, 0.017))
        x = terminal_state_on_level(pvtol_clf, xi, level)
        u = pvtol_clf.u(x)
        if float(pvtol_clf.grad(x) @ pvtol.dynamics(x, u)) >= 0.0:
            ok_admissible = False
        if np.any(u < box.lo - 1e-12) or np.any(u > box.hi + 1e-12):
            ok_admissible = False

    petrov_2d = check_petrov(sys_big, clf_big, seed=0)
    petrov_pvtol = check_petrov(pvtol, pvtol_clf, seed=0)
    ok_petrov = petrov_2d < 0.0 and petrov_pvtol < 0.0

    ok = ok_level and ok_riccati and ok_admissible and ok_petrov
    assert _report(5, "local CLF suites", ok), (
        f"c_sup={report.c_sup}, riccati={ok_riccati}, "
        f"admissible={ok_admissible}, petrov=({petrov_2d:.3g}, "
        f"{petrov_pvtol:.3g})"
    )


def test_criterion_6_ball_target_properties(sys_big, clf_big):
    rng = np.random.default_rng(2026)
    states = []
    while len(states) < 10:
        x = rng.uniform(-1.5, 1.5, size=2)
        if np.linalg.norm(x) >= 0.6:
            states.append(x)

    ok = True
    for i, x in enumerate(states):
        values = {}
        for delta in (0.4, 0.2, 0.1, 0.05):
            # The smallest ball needs tighter integration: the forward
            # characteristic must hit a radius-0.05 set after a multi-
            # second flight, which default tolerances cannot resolve.
            config = (
                IntegratorConfig(atol=1e-10, rtol=1e-10)
                if delta <= 0.05
                else IntegratorConfig()
            )
            res = evaluate_state_ball(
                sys_big, delta, x, EvalParams(), config,
                seed=100 + i, bounding_box=BOX2D,
            )
            values[delta] = res.V
        if not (values[0.1] >= values[0.2] - 1e-6 >= values[0.4] - 2e-6):
            ok = False
        if abs(values[0.05] - clf_big.v(x)) > 0.05:
            ok = False

    inside = evaluate_state_ball(
        sys_big, 0.1, np.array([0.02, 0.02]), EvalParams(),
        IntegratorConfig(), seed=0, bounding_box=BOX2D,
    )
    ok = ok and inside.V == 0.0 and inside.status == "in_target"
    assert _report(6, "ball-target monotone convergence", ok)


def test_criterion_7_shooting_self_consistency(sys_big, clf_big):
    rng = np.random.default_rng(7)
    worst = 0.0
    for k in range(20):
        angle = float(rng.uniform(0.0, 2.0 * math.pi))
        xi = np.array([math.cos(angle), math.sin(angle)])
        roots = terminal_multiplier_roots(sys_big, clf_big, xi)
        if not roots:
            worst = math.inf
            break
        rev = integrate_reverse(
            sys_big, clf_big, xi, roots[0],
            ExitParams(t_max=1.0, bounding_box=BOX2D), IntegratorConfig(),
        )
        x0 = rev.states[-1]
        res = solve_shooting(
            sys_big, clf_big, x0, n_guesses=4, seed=k,
            params=ExitParams(t_max=2.0, bounding_box=BOX2D),
        )
        worst = max(worst, res.deviation)
    ok = worst <= 1e-3
    assert _report(7, "shooting witness recovery", ok), (
        f"worst deviation {worst:.3g}"
    )


def test_criterion_8_mpc_stabilization(
    clf_small, mpc_det, mpc_sto, pvtol, pvtol_clf
):
    # Deterministic planar run: enter the target sublevel set and stay.
    v = np.array([clf_small.v(x) for x in mpc_det.states])
    entered = np.nonzero(v <= clf_small.c)[0]
    ok_det = entered.size > 0 and bool(
        np.all(v[entered[0]:] <= clf_small.c + 1e-3)
    )

    # Stochastic ensemble: halve the mean norm; exact start.
    ok_sto = (
        float(mpc_sto.mean[-1]) < 0.5 * float(np.linalg.norm(MPC_X0))
        and float(mpc_sto.std[0]) == 0.0
        and mpc_sto.mean[0] == pytest.approx(float(np.linalg.norm(MPC_X0)))
    )

    # PVTOL saturated linear feedback: V_loc strictly decreasing across
    # recomputation instants until it falls below 1e-6.
    rng = np.random.default_rng(0)
    ok_pvtol = True
    from clf_forge.mpc import run_mpc

    for _ in range(5):
        d = rng.standard_normal(6)
        d /= np.linalg.norm(d)
        lam = 0.9 * math.sqrt(
            pvtol_clf.c / float(d @ pvtol_clf.P @ d)
        )
        cfg = MpcConfig(
            horizon=15.0, dt_recompute=0.1, dt_sde=1e-3,
            controller="saturated_linear",
        )
        run = run_mpc(pvtol, pvtol_clf, lam * d, cfg, record="recompute")
        vv = np.array([float(x @ pvtol_clf.P @ x) for x in run.states])
        below = np.nonzero(vv <= 1e-6)[0]
        if below.size == 0:
            ok_pvtol = False
            continue
        if not np.all(np.diff(vv[: below[0] + 1]) < 0.0):
            ok_pvtol = False

    ok = ok_det and ok_sto and ok_pvtol
    assert _report(8, "MPC stabilization", ok), (
        f"det={ok_det}, sto={ok_sto} (mean(T)={mpc_sto.mean[-1]:.3g}), "
        f"pvtol={ok_pvtol}"
    )


def test_criterion_9_determinism(
    sys_big, clf_big, sys_small, clf_small, grid_main, mpc_det, mpc_sto,
    mpc_cold, tmp_path,
):
    result, _ = grid_main
    grid_dup = evaluate_grid(
        sys_big, clf_big, GRID_LO, GRID_HI, GRID_SHAPE,
        GRID_PARAMS, IntegratorConfig(), seed=0, workers=2,
    )
    ok_grid = _grid_csv_bytes(tmp_path, "w1", result) == _grid_csv_bytes(
        tmp_path, "w2", grid_dup
    )

    cfg_det = MpcConfig(
        horizon=15.0, dt_recompute=0.1, dt_sde=1e-3,
        controller="clf_pipeline", n_monte_carlo=1, seed=0,
    )
    det_dup = monte_carlo(
        sys_small, clf_small, MPC_X0, cfg_det, MPC_PARAMS, MPC_INT,
        bounding_box=BOX2D, workers=2, p0_init=mpc_cold.costate,
    )
    ok_det = _mpc_csv_bytes(tmp_path, "det1", mpc_det) == _mpc_csv_bytes(
        tmp_path, "det2", det_dup
    )

    cfg_sto = MpcConfig(
        horizon=15.0, dt_recompute=0.2, dt_sde=1e-3,
        noise=[0.05, 0.05], n_monte_carlo=50, seed=0,
        controller="clf_pipeline", fallback="reuse",
    )
    sto_dup = monte_carlo(
        sys_small, clf_small, MPC_X0, cfg_sto, MPC_PARAMS, MPC_INT,
        bounding_box=BOX2D, workers=2, p0_init=mpc_cold.costate,
    )
    ok_sto = _mpc_csv_bytes(tmp_path, "sto1", mpc_sto) == _mpc_csv_bytes(
        tmp_path, "sto2", sto_dup
    )

    ok = ok_grid and ok_det and ok_sto
    assert _report(9, "worker-count determinism", ok), (
        f"grid={ok_grid}, det={ok_det}, sto={ok_sto}"
    )


def test_criterion_10_numerics_examples():
    from clf_forge.numerics import Bracket, bisect, powell_minimize, zbrak

    start = time.perf_counter()
    ok = True

    # Exponential decay lands on e^{-1}.
    sol = integrate(
        lambda t, y: -y, np.array([1.0]), 1.0, IntegratorConfig()
    )
    ok &= abs(float(sol.states[-1, 0]) - math.exp(-1.0)) <= 1e-6

    # Event location at the sign change of y - 1/2.
    sol = integrate(
        lambda t, y: -y, np.array([1.0]), 2.0, IntegratorConfig(),
        events=(lambda t, y: float(y[0]) - 0.5,),
    )
    ok &= sol.terminated_by == "event:0"
    ok &= abs(float(sol.times[-1]) - math.log(2.0)) <= 1e-8

    # Harmonic orbit closes after one period.
    sol = integrate(
        lambda t, y: np.array([y[1], -y[0]]),
        np.array([1.0, 0.0]),
        2.0 * math.pi,
        IntegratorConfig(),
    )
    ok &= float(np.linalg.norm(sol.states[-1] - [1.0, 0.0])) <= 1e-5

    # Closed-form Lyapunov and Riccati solutions.
    P = solve_lyapunov(np.array([[-1.0]]), 2.0)
    ok &= abs(float(P[0, 0]) - 1.0) <= 1e-12
    P, S = solve_riccati(
        np.zeros((1, 1)), np.eye(1), 4.0 * np.eye(1), np.eye(1)
    )
    ok &= abs(float(P[0, 0]) - 2.0) <= 1e-8
    ok &= abs(float(S[0, 0]) + 2.0) <= 1e-8
    P, S = solve_riccati(np.eye(1), np.eye(1), 3.0 * np.eye(1), np.eye(1))
    ok &= abs(float(P[0, 0]) - 3.0) <= 1e-8

    # Root finding and bracketing.
    root = bisect(lambda x: x * x - 2.0, Bracket(0.0, 2.0), tol=1e-13)
    ok &= abs(root - math.sqrt(2.0)) <= 1e-12
    brackets = zbrak(
        lambda x: (x - 1.0) * (x - 2.0) * (x - 3.0), 0.0, 4.0, 100
    )
    ok &= len(brackets) == 3

    # Powell on the Rosenbrock valley.
    res = powell_minimize(
        lambda z: (1.0 - z[0]) ** 2 + 100.0 * (z[1] - z[0] ** 2) ** 2,
        np.array([-1.2, 1.0]),
        tol=1e-10,
    )
    ok &= float(np.linalg.norm(res.argmin - [1.0, 1.0])) <= 1e-4

    elapsed = time.perf_counter() - start
    ok = bool(ok) and elapsed <= 120.0
    assert _report(10, "numerics kernel examples", ok), (
        f"elapsed {elapsed:.1f}s"
    )
