"""Pontryagin characteristics for exit-time optimal control.

Forward integration of the state--costate system with the practical
stopping rules (horizon, target entry, cost saturation), reverse-time
integration from the shrunk target boundary used by the shooting stage,
and Hamiltonian conservation diagnostics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .integrator import IntegratorConfig, OdeSolution, integrate
from .local_clf import DegenerateGradient, LocalClf, terminal_state_on_level
from .systems import ControlSystem, eval_extremal_control

__all__ = [
    "ExitStatus",
    "ExitParams",
    "BallTarget",
    "Characteristic",
    "hamiltonian",
    "integrate_forward",
    "integrate_reverse",
    "check_hamiltonian_conservation",
]

REACHED_TARGET = "reached_target"
HORIZON_EXHAUSTED = "horizon_exhausted"
COST_SATURATED = "cost_saturated"
INTEGRATOR_FAILED = "integrator_failed"


@dataclass(frozen=True)
class BallTarget:
    """Origin-centered ball target of radius delta with zero terminal cost.

    ``rho`` shrinks the seeding surface for reverse characteristics the same
    way c1 < c shrinks the sublevel target.
    """

    delta: float
    rho: float = 0.9

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if not (0.0 < self.rho <= 1.0):
            raise ValueError("rho must lie in (0, 1]")


Target = Union[LocalClf, BallTarget]


@dataclass(frozen=True)
class ExitStatus:
    tag: str
    exit_time: float

    def __post_init__(self):
        if self.tag not in (
            REACHED_TARGET,
            HORIZON_EXHAUSTED,
            COST_SATURATED,
            INTEGRATOR_FAILED,
        ):
            raise ValueError(f"unknown exit tag {self.tag!r}")
        if self.exit_time < 0:
            raise ValueError("exit_time must be nonnegative")


@dataclass(frozen=True)
class ExitParams:
    """Stopping-rule parameters for characteristic integration.

    ``terminal_mode`` is "sublevel" (target = local-CLF sublevel set, level
    c, terminal cost c) or "ball" (‖x‖ ≤ δ, zero terminal cost).
    ``bounding_box`` bounds reverse integrations: an (lo, hi) pair of
    per-coordinate state limits; leaving it terminates the trajectory.
    """

    t_max: float = 10.0
    eps: float = 1e-15
    terminal_mode: str = "sublevel"
    bounding_box: Optional[tuple] = None

    def __post_init__(self):
        if self.t_max <= 0:
            raise ValueError("t_max must be positive")
        if not (0.0 < self.eps < 1.0):
            raise ValueError("eps must lie in (0, 1)")
        if self.terminal_mode not in ("sublevel", "ball"):
            raise ValueError("terminal_mode must be 'sublevel' or 'ball'")


@dataclass(frozen=True)
class Characteristic:
    """A solved characteristic trajectory with its cost bookkeeping."""

    times: np.ndarray
    states: np.ndarray
    costates: np.ndarray
    controls: np.ndarray
    costs: np.ndarray
    ptilde: float
    accumulated_cost: float
    kruzhkov_cost: float
    exit: ExitStatus

    def hamiltonian_drift(self, sys: ControlSystem) -> np.ndarray:
        """Per-node Hamiltonian deviation from its initial value."""
        h = np.array(
            [
                hamiltonian(sys, x, p, self.ptilde)
                for x, p in zip(self.states, self.costates)
            ]
        )
        return h - h[0]


def hamiltonian(sys: ControlSystem, x, p, ptilde: float) -> float:
    """Pontryagin function at the minimizing control: <p, f> + ptilde * g."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    u = eval_extremal_control(sys, x, p, ptilde)
    return float(p @ sys.dynamics(x, u)) + ptilde * sys.running_cost(x, u)


def _target_mode(target: Target, params: ExitParams) -> str:
    mode = "ball" if isinstance(target, BallTarget) else "sublevel"
    if params.terminal_mode != mode:
        raise ValueError(
            f"terminal_mode {params.terminal_mode!r} does not match the "
            f"{mode} target object"
        )
    return mode


def _terminal_cost(target: Target, mode: str) -> float:
    return target.c if mode == "sublevel" else 0.0


def _target_indicator(target: Target, mode: str):
    """Continuous function positive outside the target, negative inside."""
    if mode == "sublevel":
        return lambda x: target.v(x) - target.c
    delta2 = target.delta**2
    return lambda x: float(x @ x) - delta2


def _build_characteristic(
    sys: ControlSystem,
    sol: OdeSolution,
    ptilde: float,
    kruzhkov: float,
    exit_status: ExitStatus,
) -> Characteristic:
    n = sys.n
    states = sol.states[:, :n]
    costates = sol.states[:, n : 2 * n]
    costs = sol.states[:, 2 * n]
    controls = np.array(
        [
            eval_extremal_control(sys, x, p, ptilde)
            for x, p in zip(states, costates)
        ]
    )
    return Characteristic(
        times=sol.times,
        states=states,
        costates=costates,
        controls=controls,
        costs=costs,
        ptilde=ptilde,
        accumulated_cost=float(costs[-1]),
        kruzhkov_cost=kruzhkov,
        exit=exit_status,
    )


def _characteristic_rhs(sys: ControlSystem, ptilde: float, sign: float):
    n = sys.n

    if sys.char_rhs is not None:
        fused = sys.char_rhs
        if sign == 1.0:

            def rhs(t, y):
                return fused(y, ptilde)

        else:

            def rhs(t, y):
                return sign * fused(y, ptilde)

        return rhs

    def rhs(t, y):
        x = y[:n]
        p = y[n : 2 * n]
        u = eval_extremal_control(sys, x, p, ptilde)
        f = sys.dynamics(x, u)
        pdot = -(sys.jac_dynamics_x(x, u).T @ p) - ptilde * sys.jac_cost_x(
            x, u
        )
        g = sys.running_cost(x, u)
        return sign * np.concatenate((f, pdot, [g]))

    return rhs


def integrate_forward(
    sys: ControlSystem,
    target: Target,
    x0,
    p0,
    ptilde: float,
    params: ExitParams = ExitParams(),
    config: IntegratorConfig = IntegratorConfig(),
    output: str = "steps",
) -> Characteristic:
    """Integrate a forward characteristic until one of the stopping rules.

    Rules, earliest wins: (1) the horizon t_max is exhausted, (2) the state
    enters the target set, (3) the accumulated cost saturates the Kruzhkov
    transform within eps.  Only rule (2) yields a finite value:
    kruzhkov_cost = 1 − exp(−cost − terminal_cost); the others give 1 − eps.
    """
    if ptilde < 0:
        raise ValueError("ptilde must be nonnegative")
    mode = _target_mode(target, params)
    x0 = np.asarray(x0, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    terminal_cost = _terminal_cost(target, mode)
    indicator = _target_indicator(target, mode)
    cost_cap = -math.log(params.eps) - terminal_cost

    y0 = np.concatenate((x0, p0, [0.0]))
    if indicator(x0) <= 0.0:
        sol = OdeSolution(
            times=np.array([0.0]),
            states=y0[None, :].copy(),
            terminated_by="event:0",
            t_event=0.0,
            event_index=0,
        )
        return _build_characteristic(
            sys,
            sol,
            ptilde,
            1.0 - math.exp(-terminal_cost),
            ExitStatus(REACHED_TARGET, 0.0),
        )

    n = sys.n
    events = (
        lambda t, y: indicator(y[:n]),
        lambda t, y: y[2 * n] - cost_cap,
    )
    sol = integrate(
        _characteristic_rhs(sys, ptilde, 1.0),
        y0,
        params.t_max,
        config,
        events=events,
        output=output,
        partial_on_failure=True,
    )
    t_final = float(sol.times[-1])
    if sol.terminated_by == "event:0":
        cost = float(sol.states[-1, 2 * n])
        kruzhkov = 1.0 - math.exp(-cost - terminal_cost)
        status = ExitStatus(REACHED_TARGET, t_final)
    elif sol.terminated_by == "event:1":
        kruzhkov = 1.0 - params.eps
        status = ExitStatus(COST_SATURATED, t_final)
    elif sol.terminated_by == "failure":
        kruzhkov = 1.0 - params.eps
        status = ExitStatus(INTEGRATOR_FAILED, t_final)
    else:
        kruzhkov = 1.0 - params.eps
        status = ExitStatus(HORIZON_EXHAUSTED, t_final)
    return _build_characteristic(sys, sol, ptilde, kruzhkov, status)


def reverse_seed(
    target: Target, xi, ptilde: float
) -> tuple[np.ndarray, np.ndarray]:
    """Initial (state, costate) for a reverse characteristic.

    Sublevel mode seeds on the shrunk boundary l_{c1} with the costate along
    the CLF gradient; ball mode seeds on the shrunk sphere with the costate
    along the outward normal.  Either way ‖(p̂(0), p̃)‖ = 1.
    """
    xi = np.asarray(xi, dtype=float)
    if not (0.0 < ptilde < 1.0):
        raise ValueError("ptilde must lie in (0, 1)")
    kappa = math.sqrt(1.0 - ptilde**2)
    if isinstance(target, BallTarget):
        x_hat = target.rho * target.delta * xi
        direction = xi
    else:
        x_hat = terminal_state_on_level(target, xi, target.c1)
        direction = target.grad(x_hat)
        norm = np.linalg.norm(direction)
        if norm < 1e-14:
            raise DegenerateGradient("CLF gradient vanishes at the seed")
        direction = direction / norm
    return x_hat, kappa * direction


def integrate_reverse(
    sys: ControlSystem,
    target: Target,
    xi,
    ptilde: float,
    params: ExitParams = ExitParams(),
    config: IntegratorConfig = IntegratorConfig(),
    output: str = "steps",
) -> Characteristic:
    """Integrate the sign-reversed characteristic system from the target.

    Runs until t_max, the configured bounding box is left, or the
    integrator fails (reverse dynamics are typically unstable); the cost
    saturation rule does not apply.  The accumulated cost column measures
    ∫ g along the reverse trajectory.
    """
    mode = _target_mode(target, params)
    x_hat, p_hat = reverse_seed(target, xi, ptilde)
    y0 = np.concatenate((x_hat, p_hat, [0.0]))

    n = sys.n
    events = []
    if params.bounding_box is not None:
        lo = np.asarray(params.bounding_box[0], dtype=float)
        hi = np.asarray(params.bounding_box[1], dtype=float)

        def outside_box(t, y):
            x = y[:n]
            return float(np.max(np.maximum(lo - x, x - hi)))

        events.append(outside_box)

    sol = integrate(
        _characteristic_rhs(sys, ptilde, -1.0),
        y0,
        params.t_max,
        config,
        events=tuple(events),
        output=output,
        partial_on_failure=True,
    )
    t_final = float(sol.times[-1])
    if sol.terminated_by == "failure":
        status = ExitStatus(INTEGRATOR_FAILED, t_final)
    else:
        status = ExitStatus(HORIZON_EXHAUSTED, t_final)
    return _build_characteristic(
        sys, sol, ptilde, 1.0 - params.eps, status
    )


def check_hamiltonian_conservation(
    sys: ControlSystem, char: Characteristic
) -> float:
    """Maximum drift of the Hamiltonian from its initial value along a trace."""
    if len(char.times) < 2:
        return 0.0
    return float(np.max(np.abs(char.hamiltonian_drift(sys))))
