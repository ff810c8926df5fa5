"""Control system models: the generic interface and two built-in benchmarks.

A system bundles the dynamics ``f(x, u)``, a nonnegative running cost
``g(x, u)``, their state Jacobians and a box control set.  An optional
closed-form extremal control map gives the pointwise minimizer of the
Pontryagin function ``<p, f(x,u)> + ptilde * g(x,u)`` over the box; systems
without one fall back to derivative-free minimization.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .numerics import golden_section, powell_minimize

__all__ = [
    "BoxControlSet",
    "ControlSystem",
    "make_example_2d",
    "make_pvtol",
    "eval_extremal_control",
]


@dataclass(frozen=True)
class BoxControlSet:
    """Axis-aligned box of admissible controls."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape:
            raise ValueError("lo and hi must have the same shape")
        if np.any(lo > hi):
            raise ValueError("control box requires lo <= hi componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def m(self) -> int:
        return self.lo.shape[0]

    def clamp(self, u) -> np.ndarray:
        return np.clip(np.asarray(u, dtype=float), self.lo, self.hi)

    def contains(self, u, tol: float = 1e-12) -> bool:
        u = np.asarray(u, dtype=float)
        return bool(np.all(u >= self.lo - tol) and np.all(u <= self.hi + tol))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def corners(self, limit: Optional[int] = None) -> list[np.ndarray]:
        out = []
        for combo in itertools.product(*zip(self.lo, self.hi)):
            out.append(np.array(combo))
            if limit is not None and len(out) >= limit:
                break
        return out


@dataclass(frozen=True)
class ControlSystem:
    """Time-invariant control system with running cost.

    ``extremal_control``, when given, must return an element of
    ``Argmin_{u in U} <p, f(x,u)> + ptilde * g(x,u)``; ties are expected to
    be broken by smallest Euclidean norm, then lexicographically.
    ``separable_cost_in_control`` marks Hamiltonians that decompose into a
    sum of per-coordinate control terms, enabling the cheap per-coordinate
    fallback minimization.
    """

    n: int
    m: int
    dynamics: Callable[[np.ndarray, np.ndarray], np.ndarray]
    running_cost: Callable[[np.ndarray, np.ndarray], float]
    jac_dynamics_x: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jac_cost_x: Callable[[np.ndarray, np.ndarray], np.ndarray]
    control_box: BoxControlSet
    extremal_control: Optional[
        Callable[[np.ndarray, np.ndarray, float], np.ndarray]
    ] = None
    separable_cost_in_control: bool = False
    name: str = "custom"
    # Optional fused characteristic right-hand side: maps the extended
    # vector y = (x, p, cost) and ptilde to (f, -J^T p - ptilde*g_x, g) in
    # one call.  Must agree with the componentwise maps; it exists purely
    # to cut per-step call overhead in the inner integration loops.
    char_rhs: Optional[Callable[[np.ndarray, float], np.ndarray]] = None

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError("state and control dimensions must be positive")
        if self.control_box.m != self.m:
            raise ValueError("control box dimension does not match m")


def _signed_cbrt(y: float) -> float:
    return float(np.cbrt(y))


def make_example_2d(a: float) -> ControlSystem:
    """Two-dimensional benchmark with cubic nonlinearity and quartic cost.

    Dynamics ``(x1 + 2 x2 + u, -x2 - 2 x1^3)``, running cost
    ``2 x1^4 + x2^2 + u^4 / 256``, scalar control constrained to ``[-a, a]``.
    """
    if a <= 0:
        raise ValueError("control bound a must be positive")
    box = BoxControlSet(np.array([-a]), np.array([a]))

    def dynamics(x, u):
        u0 = u[0] if np.ndim(u) else float(u)
        return np.array([x[0] + 2.0 * x[1] + u0, -x[1] - 2.0 * x[0] ** 3])

    def running_cost(x, u):
        u0 = u[0] if np.ndim(u) else float(u)
        return 2.0 * x[0] ** 4 + x[1] ** 2 + u0 ** 4 / 256.0

    def jac_dynamics_x(x, u):
        return np.array([[1.0, 2.0], [-6.0 * x[0] ** 2, -1.0]])

    def jac_cost_x(x, u):
        return np.array([8.0 * x[0] ** 3, 2.0 * x[1]])

    def extremal_control(x, p, ptilde):
        # H(u) = p1*u + ptilde*u^4/256 + const is convex in u for ptilde >= 0,
        # so clamping the stationary point is exact.
        p1 = p[0]
        if ptilde > 0.0:
            u = -_signed_cbrt(64.0 * p1 / ptilde)
        elif p1 > 0.0:
            u = -a
        elif p1 < 0.0:
            u = a
        else:
            u = 0.0
        return np.array([min(max(u, -a), a)])

    cbrt = np.cbrt

    def char_rhs(y, ptilde):
        # Scalar-math version of the joint state/costate/cost field; the
        # quartic control penalty is convex, so the clamp is the exact
        # extremal control.
        x1 = y[0]
        x2 = y[1]
        p1 = y[2]
        p2 = y[3]
        if ptilde > 0.0:
            u = -float(cbrt(64.0 * p1 / ptilde))
            if u < -a:
                u = -a
            elif u > a:
                u = a
        elif p1 > 0.0:
            u = -a
        elif p1 < 0.0:
            u = a
        else:
            u = 0.0
        x1sq = x1 * x1
        x1cu = x1sq * x1
        usq = u * u
        return np.array(
            [
                x1 + 2.0 * x2 + u,
                -x2 - 2.0 * x1cu,
                -p1 + 6.0 * x1sq * p2 - ptilde * 8.0 * x1cu,
                -2.0 * p1 + p2 - ptilde * 2.0 * x2,
                2.0 * x1sq * x1sq + x2 * x2 + usq * usq / 256.0,
            ]
        )

    return ControlSystem(
        n=2,
        m=1,
        dynamics=dynamics,
        running_cost=running_cost,
        jac_dynamics_x=jac_dynamics_x,
        jac_cost_x=jac_cost_x,
        control_box=box,
        extremal_control=extremal_control,
        separable_cost_in_control=True,
        name="example2d",
        char_rhs=char_rhs,
    )


def make_pvtol(
    alpha: float, a1: float, a2: float, lam1: float, lam2: float
) -> ControlSystem:
    """Planar vertical takeoff and landing aircraft, 6 states, 2 controls.

    Quadratic running cost ``lam1/2 ||x||^2 + lam2/2 ||u||^2`` and control
    box ``[-a1, a1] x [-a2, a2]``.
    """
    for val, label in (
        (alpha, "alpha"),
        (a1, "a1"),
        (a2, "a2"),
        (lam1, "lam1"),
        (lam2, "lam2"),
    ):
        if val <= 0:
            raise ValueError(f"parameter {label} must be positive")
    box = BoxControlSet(np.array([-a1, -a2]), np.array([a1, a2]))

    def dynamics(x, u):
        s5, c5 = np.sin(x[4]), np.cos(x[4])
        thrust = 1.0 + u[0]
        return np.array(
            [
                x[1],
                -thrust * s5 + alpha * u[1] * c5,
                x[3],
                thrust * c5 + alpha * u[1] * s5 - 1.0,
                x[5],
                u[1],
            ]
        )

    def running_cost(x, u):
        return 0.5 * lam1 * float(x @ x) + 0.5 * lam2 * float(u @ u)

    def jac_dynamics_x(x, u):
        s5, c5 = np.sin(x[4]), np.cos(x[4])
        thrust = 1.0 + u[0]
        J = np.zeros((6, 6))
        J[0, 1] = 1.0
        J[1, 4] = -thrust * c5 - alpha * u[1] * s5
        J[2, 3] = 1.0
        J[3, 4] = -thrust * s5 + alpha * u[1] * c5
        J[4, 5] = 1.0
        return J

    def jac_cost_x(x, u):
        return lam1 * np.asarray(x, dtype=float)

    def extremal_control(x, p, ptilde):
        # Dynamics are affine in u and the cost quadratic, so the Hamiltonian
        # decouples per control coordinate into b_i*u_i + ptilde*lam2/2*u_i^2.
        s5, c5 = np.sin(x[4]), np.cos(x[4])
        b = np.array(
            [
                -p[1] * s5 + p[3] * c5,
                alpha * p[1] * c5 + alpha * p[3] * s5 + p[5],
            ]
        )
        quad = ptilde * lam2
        u = np.empty(2)
        for i, (lo, hi) in enumerate(((-a1, a1), (-a2, a2))):
            if quad > 0.0:
                u[i] = min(max(-b[i] / quad, lo), hi)
            elif b[i] > 0.0:
                u[i] = lo
            elif b[i] < 0.0:
                u[i] = hi
            else:
                u[i] = 0.0
        return u

    return ControlSystem(
        n=6,
        m=2,
        dynamics=dynamics,
        running_cost=running_cost,
        jac_dynamics_x=jac_dynamics_x,
        jac_cost_x=jac_cost_x,
        control_box=box,
        extremal_control=extremal_control,
        separable_cost_in_control=True,
        name="pvtol",
    )


def _hamiltonian_in_u(sys: ControlSystem, x, p, ptilde):
    def h(u):
        u = np.atleast_1d(u)
        return float(p @ sys.dynamics(x, u)) + ptilde * sys.running_cost(x, u)

    return h


def eval_extremal_control(
    sys: ControlSystem, x, p, ptilde: float
) -> np.ndarray:
    """Minimize the Pontryagin function over the control box at (x, p, ptilde).

    Uses the system's closed-form map when present.  The generic fallback is
    per-coordinate golden-section search for separable Hamiltonians and
    Powell minimization from five deterministic starts (box center and four
    corners) otherwise.
    """
    if ptilde < 0:
        raise ValueError("ptilde must be nonnegative")
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    if sys.extremal_control is not None:
        return sys.extremal_control(x, p, ptilde)

    box = sys.control_box
    h = _hamiltonian_in_u(sys, x, p, ptilde)
    if sys.separable_cost_in_control:
        u = box.center.copy()
        for i in range(sys.m):
            def h_i(ui, i=i):
                v = u.copy()
                v[i] = ui
                return h(v)

            u[i] = golden_section(h_i, box.lo[i], box.hi[i], tol=1e-10)
        return _select_smallest(h, [u], box)

    starts = [box.center] + box.corners(limit=4)
    candidates = []
    for u0 in starts:
        res = powell_minimize(
            lambda u: h(box.clamp(u)), u0, tol=1e-10, max_iters=200
        )
        candidates.append(box.clamp(res.argmin))
    return _select_smallest(h, candidates, box)


def _select_smallest(h, candidates, box, tol: float = 1e-12):
    """Pick the best minimizer; break near-ties by norm, then lexicographically."""
    vals = [h(u) for u in candidates]
    fbest = min(vals)
    tied = [u for u, v in zip(candidates, vals) if v <= fbest + tol * (1 + abs(fbest))]
    tied.sort(key=lambda u: (float(u @ u), tuple(u)))
    return tied[0]
