"""Reverse-time shooting for costate initialization.

The auxiliary problem: launch reverse characteristics from the shrunk
target boundary, parametrized by angles on the unit sphere, and minimize
the squared lowest deviation from a query state.  The closest reverse
state/costate pair initializes the main costate optimization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .characteristics import (
    Characteristic,
    ExitParams,
    Target,
    _characteristic_rhs,
    hamiltonian,
    reverse_seed,
    integrate_reverse,
)
from .integrator import IntegratorConfig

__all__ = [
    "ShootingResult",
    "ShootingFailed",
    "sphere_from_angles",
    "terminal_multiplier_roots",
    "solve_shooting",
]


class ShootingFailed(RuntimeError):
    """All reverse integrations failed or no multiplier root exists."""


@dataclass(frozen=True)
class ShootingResult:
    angles: np.ndarray
    xi: np.ndarray
    ptilde_root: float
    tau_star: float
    x_hat: np.ndarray
    p_hat: np.ndarray
    deviation: float
    characteristic: Characteristic


def _hermite(t0, y0, f0, t1, y1, f1, t):
    """Cubic Hermite interpolation between two grid nodes with derivatives."""
    h = t1 - t0
    s = (t - t0) / h
    h00 = 2 * s**3 - 3 * s**2 + 1
    h10 = s**3 - 2 * s**2 + s
    h01 = -2 * s**3 + 3 * s**2
    h11 = s**3 - s**2
    return h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1


def sphere_from_angles(theta) -> np.ndarray:
    """Unit vector in R^{len(theta)+1} from spherical angles.

    xi_1 = prod_i sin(theta_i); xi_j = cos(theta_{j-1}) * prod_{i>=j}
    sin(theta_i); xi_n = cos(theta_{n-1}).  Total on all real angles, so
    angle optimization is unconstrained.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    n = theta.shape[0] + 1
    sines = np.sin(theta)
    cosines = np.cos(theta)
    xi = np.empty(n)
    # suffix products of sines: suffix[j] = prod_{i >= j} sin(theta_i)
    suffix = np.ones(n)
    for j in range(n - 2, -1, -1):
        suffix[j] = suffix[j + 1] * sines[j]
    xi[0] = suffix[0]
    for j in range(1, n):
        xi[j] = cosines[j - 1] * suffix[j]
    return xi


def terminal_multiplier_roots(
    sys,
    target: Target,
    xi,
    n_segments: int = 100,
    tol: float = 1e-13,
) -> list[float]:
    """Roots in (0,1) of the terminal Hamiltonian-vanishing condition.

    Evaluates p̃ ↦ H(x_term, sqrt(1−p̃²)·ν, p̃) on [0,1] (ν the unit
    seed-costate direction), brackets sign changes on 100 segments, and
    refines each bracket by bisection.  An empty list signals the decrease
    assumption fails in this direction.
    """
    from .numerics import Bracket, bisect, zbrak

    x_term, p_dir = reverse_seed(target, xi, 0.5)
    p_dir = p_dir / math.sqrt(1.0 - 0.25)  # recover the unit direction

    def objective(pt: float) -> float:
        kappa = math.sqrt(max(0.0, 1.0 - pt * pt))
        return hamiltonian(sys, x_term, kappa * p_dir, pt)

    roots = []
    for bracket in zbrak(objective, 0.0, 1.0, n_segments=n_segments):
        root = bisect(objective, bracket, tol=tol)
        if 0.0 < root < 1.0:
            roots.append(root)
    return sorted(roots)


def _min_deviation(char: Characteristic, x0: np.ndarray, rhs):
    """Lowest squared distance of a stored reverse trajectory to x0.

    Scans the stored grid, then minimizes the distance of the cubic
    Hermite interpolant over the two segments adjacent to the grid minimum
    (node derivatives come from one rhs call each).  Returns
    (dev_sq, tau, x_hat, p_hat).
    """
    from .numerics import golden_section

    n = x0.shape[0]
    diffs = char.states - x0
    d2 = np.einsum("ij,ij->i", diffs, diffs)
    k = int(np.argmin(d2))
    tau = float(char.times[k])
    x_best = char.states[k]
    p_best = char.costates[k]
    best = float(d2[k])
    node_cache = {}

    def node(i):
        if i not in node_cache:
            y = np.concatenate(
                (char.states[i], char.costates[i], [char.costs[i]])
            )
            node_cache[i] = (float(char.times[i]), y, rhs(char.times[i], y))
        return node_cache[i]

    for ia, ib in ((k - 1, k), (k, k + 1)):
        if ia < 0 or ib >= len(d2):
            continue
        ta, ya, fa = node(ia)
        tb, yb, fb = node(ib)

        def dist_sq(t):
            dev = _hermite(ta, ya, fa, tb, yb, fb, t)[:n] - x0
            return float(dev @ dev)

        tau_c = golden_section(dist_sq, ta, tb, tol=1e-10)
        cand = dist_sq(tau_c)
        if cand < best:
            y_tau = _hermite(ta, ya, fa, tb, yb, fb, tau_c)
            best = cand
            tau = tau_c
            x_best = y_tau[:n]
            p_best = y_tau[n : 2 * n]
    return best, tau, np.asarray(x_best, dtype=float), np.asarray(
        p_best, dtype=float
    )


def solve_shooting(
    sys,
    target: Target,
    x0,
    n_guesses: int = 4,
    seed: int = 0,
    params: ExitParams = ExitParams(),
    config: IntegratorConfig = IntegratorConfig(),
    powell_tol: float = 1e-8,
    early_stop_dev: float = 1e-6,
) -> ShootingResult:
    """Multistart angle optimization of the reverse-shooting deviation.

    Each guess draws angles uniformly (theta_1 in [0, 2pi), others in
    [0, pi]) from a generator keyed by (seed, guess index), minimizes the
    squared lowest deviation with Powell, and the best guess wins.  When a
    direction admits several terminal multiplier roots, the objective takes
    the minimum over roots.  Remaining guesses are skipped once one
    converges below ``early_stop_dev`` (further starts cannot improve a
    hit by more than the optimizer tolerance).
    """
    from .numerics import EvaluationFailure, powell_minimize

    x0 = np.asarray(x0, dtype=float)
    if sys.n < 2:
        raise ValueError("shooting requires state dimension >= 2")

    BIG = 1e100

    def assess(theta, cfg=None):
        """Full evaluation: (dev_sq, root, tau, x_hat, p_hat, char, xi)."""
        xi = sphere_from_angles(theta)
        best = None
        for root in terminal_multiplier_roots(sys, target, xi):
            char = integrate_reverse(
                sys, target, xi, root, params, cfg or config, output="steps"
            )
            if len(char.times) < 2:
                continue
            rhs = _characteristic_rhs(sys, root, -1.0)
            dev_sq, tau, x_hat, p_hat = _min_deviation(char, x0, rhs)
            if best is None or dev_sq < best[0]:
                best = (dev_sq, root, tau, x_hat, p_hat, char, xi)
        return best

    def objective(theta):
        best = assess(theta)
        return BIG if best is None else best[0]

    winner = None
    winner_angles = None
    for guess in range(n_guesses):
        rng = np.random.default_rng([seed, guess])
        theta0 = np.concatenate(
            (
                rng.uniform(0.0, 2.0 * np.pi, size=1),
                rng.uniform(0.0, np.pi, size=sys.n - 2),
            )
        )
        try:
            # A modest cycle cap: angle precision beyond the deviation
            # floor of the reverse family buys nothing downstream.
            res = powell_minimize(
                objective, theta0, tol=powell_tol, max_iters=8
            )
        except EvaluationFailure:
            continue
        if res.fmin >= BIG:
            continue
        if winner is None or res.fmin < winner:
            winner = res.fmin
            winner_angles = res.argmin
        if winner is not None and winner <= early_stop_dev**2:
            break
    if winner_angles is None:
        raise ShootingFailed(
            "no reverse characteristic could be launched toward the query"
        )

    # Re-integrate the winner at tight tolerance: the main optimization's
    # basin around the costate guess can be narrower than the dense-output
    # interpolation error at working tolerance.
    from dataclasses import replace

    tight = replace(
        config, atol=min(config.atol, 1e-10), rtol=min(config.rtol, 1e-10)
    )
    best = assess(winner_angles, cfg=tight)
    if best is None:
        raise ShootingFailed("winning angles lost their multiplier root")
    dev_sq, root, tau, x_hat, p_hat, char, xi = best
    return ShootingResult(
        angles=np.asarray(winner_angles, dtype=float),
        xi=xi,
        ptilde_root=root,
        tau_star=tau,
        x_hat=x_hat,
        p_hat=p_hat,
        deviation=math.sqrt(max(0.0, dev_sq)),
        characteristic=char,
    )
