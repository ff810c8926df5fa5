"""Adaptive Dormand-Prince 5(4) integration with dense output and events.

The stepper controls the local error with the embedded fourth-order
solution and a PI step-size controller (safety 0.85, growth clamped to
[0.2, 5]).  Dense output on a uniform grid is produced by the pair's
fourth-order interpolant over each accepted step; event crossings are
refined by bisection on the same interpolant unless grid-only detection is
requested.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "IntegratorConfig",
    "OdeSolution",
    "IntegrationFailure",
    "StiffnessFailure",
    "BlowupFailure",
    "integrate",
]

# Dormand-Prince 5(4) tableau.
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)
_E = _B5 - _B4

# Fourth-order dense-output coefficients for the pair: the interpolant is
# y(t + s h) = y + h * (kᵀ _P) @ (s, s², s³, s⁴).
_P = np.array(
    [
        [
            1.0,
            -8048581381 / 2820520608,
            8663915743 / 2820520608,
            -12715105075 / 11282082432,
        ],
        [0.0, 0.0, 0.0, 0.0],
        [
            0.0,
            131558114200 / 32700410799,
            -68118460800 / 10900136933,
            87487479700 / 32700410799,
        ],
        [
            0.0,
            -1754552775 / 470086768,
            14199869525 / 1410260304,
            -10690763975 / 1880347072,
        ],
        [
            0.0,
            127303824393 / 49829197408,
            -318862633887 / 49829197408,
            701980252875 / 199316789632,
        ],
        [
            0.0,
            -282668133 / 205662961,
            2019193451 / 616988883,
            -1453857185 / 822651844,
        ],
        [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
    ]
)

_EVENT_TIME_TOL = 1e-10
_SAFETY = 0.85


class IntegrationFailure(RuntimeError):
    """Base class for integration breakdowns; carries the last good state."""

    def __init__(self, message, t, y):
        super().__init__(message)
        self.t = t
        self.y = y


class StiffnessFailure(IntegrationFailure):
    """Step size underflowed below h_min."""


class BlowupFailure(IntegrationFailure):
    """State became non-finite."""


@dataclass(frozen=True)
class IntegratorConfig:
    h_init: float = 2e-4
    atol: float = 1e-6
    rtol: float = 1e-6
    output_step: float = 2e-4
    h_min: float = 1e-12
    grid_event_detection: bool = False

    def __post_init__(self):
        for name in ("h_init", "atol", "rtol", "output_step", "h_min"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.h_init > 10.0 * self.output_step:
            raise ValueError("h_init must not exceed 10 * output_step")


@dataclass
class OdeSolution:
    times: np.ndarray
    states: np.ndarray
    terminated_by: str  # "horizon" or "event:<index>"
    t_event: Optional[float] = None
    event_index: Optional[int] = None

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]


def _dense_interp(t0, y0, h, k):
    """Dense-output interpolant over one accepted step from its stages."""
    coeff = k.T @ _P

    def interp(tq):
        s = (tq - t0) / h
        return y0 + h * (coeff @ np.array([s, s * s, s**3, s**4]))

    return interp


def integrate(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    y0,
    t_end: float,
    config: IntegratorConfig = IntegratorConfig(),
    events: Sequence[Callable[[float, np.ndarray], float]] = (),
    output: str = "uniform",
    partial_on_failure: bool = False,
) -> OdeSolution:
    """Integrate y' = rhs(t, y) on [0, t_end] with event termination.

    ``output="uniform"`` records states on the uniform grid of spacing
    ``config.output_step`` (plus the final event or horizon node);
    ``output="steps"`` records the accepted integration steps only, which
    is much cheaper when the trajectory is only needed for bookkeeping.

    With ``partial_on_failure`` a stiffness or blowup failure returns the
    portion integrated so far (``terminated_by = "failure"``) instead of
    raising, so callers can still inspect the escaping trajectory.
    """
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    y = np.atleast_1d(np.asarray(y0, dtype=float)).copy()
    t = 0.0
    f = np.asarray(rhs(t, y), dtype=float)
    if not np.all(np.isfinite(f)):
        raise BlowupFailure("rhs non-finite at the initial state", t, y)

    uniform = output == "uniform"
    out_times = [0.0]
    out_states = [y.copy()]
    next_out = config.output_step

    g_prev = [ev(t, y) for ev in events]
    h = min(config.h_init, t_end)
    err_prev = 1.0
    k = np.empty((7, y.shape[0]))

    try:
        while t < t_end:
            h = min(h, t_end - t)
            if h < config.h_min:
                raise StiffnessFailure("step size underflow", t, y.copy())
            k[0] = f
            with np.errstate(over="ignore", invalid="ignore"):
                for i in range(1, 7):
                    k[i] = rhs(t + _C[i] * h, y + h * (_A[i] @ k[:i]))
                y_new = y + h * (_B5 @ k)
                err_vec = h * (_E @ k)
                scale = config.atol + config.rtol * np.maximum(
                    np.abs(y), np.abs(y_new)
                )
                err = float(np.sqrt(np.sum((err_vec / scale) ** 2)))
            # A non-finite error norm flags overflow in some stage.
            if not (math.isfinite(err) and np.all(np.isfinite(y_new))):
                h *= 0.5
                if h < config.h_min:
                    raise BlowupFailure("state became non-finite", t, y.copy())
                continue
            if err > 1.0:
                factor = max(0.2, _SAFETY * err ** (-0.2))
                h *= factor
                continue

            t_new = t + h
            f_new = k[6]  # FSAL: last stage is rhs at (t_new, y_new)

            # Event detection between accepted steps.
            t_stop = None
            ev_idx = None
            interp = None
            g_new = [ev(t_new, y_new) for ev in events]
            for i, (ga, gb) in enumerate(zip(g_prev, g_new)):
                if ga == 0.0:
                    continue
                if ga * gb <= 0.0:
                    if config.grid_event_detection:
                        tc = t_new
                    else:
                        if interp is None:
                            interp = _dense_interp(t, y, h, k)
                        tc = _locate_event(events[i], t, t_new, interp)
                    if t_stop is None or tc < t_stop:
                        t_stop = tc
                        ev_idx = i
            if t_stop is not None:
                if interp is None:
                    interp = _dense_interp(t, y, h, k)
                y_stop = y_new if t_stop >= t_new else interp(t_stop)
                if uniform:
                    while next_out < t_stop - 1e-14:
                        out_times.append(next_out)
                        out_states.append(interp(next_out))
                        next_out += config.output_step
                out_times.append(t_stop)
                out_states.append(np.atleast_1d(y_stop))
                return OdeSolution(
                    times=np.array(out_times),
                    states=np.array(out_states),
                    terminated_by=f"event:{ev_idx}",
                    t_event=t_stop,
                    event_index=ev_idx,
                )

            if uniform:
                while next_out <= t_new + 1e-14:
                    if next_out >= t_new - 1e-14:
                        out_times.append(t_new)
                        out_states.append(y_new.copy())
                    else:
                        if interp is None:
                            interp = _dense_interp(t, y, h, k)
                        out_times.append(next_out)
                        out_states.append(interp(next_out))
                    next_out += config.output_step
            else:
                out_times.append(t_new)
                out_states.append(y_new.copy())

            # PI controller.
            factor = _SAFETY * err ** (-0.7 / 5) * err_prev ** (0.4 / 5)
            h *= min(5.0, max(0.2, factor))
            err_prev = max(err, 1e-10)
            t, y, f = t_new, y_new, f_new
            g_prev = g_new
    except IntegrationFailure:
        if not partial_on_failure:
            raise
        return OdeSolution(
            times=np.array(out_times),
            states=np.array(out_states),
            terminated_by="failure",
        )

    if abs(out_times[-1] - t_end) > 1e-14:
        out_times.append(t_end)
        out_states.append(y.copy())
    return OdeSolution(
        times=np.array(out_times),
        states=np.array(out_states),
        terminated_by="horizon",
    )


def _locate_event(event, t0, t1, interp):
    """Bisection on the dense-output interpolant to the event time tolerance."""
    ga = event(t0, interp(t0))
    a, b = t0, t1
    while b - a > _EVENT_TIME_TOL:
        mid = 0.5 * (a + b)
        gm = event(mid, interp(mid))
        if gm == 0.0:
            return mid
        if ga * gm < 0.0:
            b = mid
        else:
            a, ga = mid, gm
    return 0.5 * (a + b)
