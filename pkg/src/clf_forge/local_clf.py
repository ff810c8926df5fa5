"""Local Lyapunov function construction and sublevel-set geometry.

Builds quadratic local control Lyapunov functions from the linearization
(either a plain Lyapunov equation for a stabilizing feedback or an LQR
Riccati solve), supports one analytic construction for the 2D benchmark,
searches the largest admissible sublevel, and maps unit directions onto
level surfaces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .numerics import Bracket, bisect, powell_minimize
from .systems import ControlSystem

__all__ = [
    "LocalClf",
    "LevelSearchReport",
    "NotAnEquilibrium",
    "NotHurwitz",
    "NotControllable",
    "NoConvergence",
    "LambdaMaxTooSmall",
    "DegenerateGradient",
    "linearize",
    "solve_lyapunov",
    "solve_riccati",
    "quadratic_clf",
    "example_2d_clf",
    "find_level_sup",
    "terminal_state_on_level",
    "check_petrov",
]


class NotAnEquilibrium(ValueError):
    pass


class NotHurwitz(ValueError):
    def __init__(self, max_real: float):
        super().__init__(f"matrix is not Hurwitz (max Re eig = {max_real:.6g})")
        self.max_real = max_real


class NotControllable(ValueError):
    pass


class NoConvergence(RuntimeError):
    pass


class LambdaMaxTooSmall(ValueError):
    pass


class DegenerateGradient(ValueError):
    pass


@dataclass(frozen=True)
class LocalClf:
    """Local CLF with sublevel target geometry.

    ``kind`` is "quadratic" (V = <Px, x>, u = Sx) or "analytic" (caller
    supplies the value, gradient and feedback maps).  ``c`` is the target
    level and ``c1 <= c`` the shrunk level used to seed reverse shooting.
    """

    kind: str
    c: float
    c1: float
    v: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    u: Callable[[np.ndarray], np.ndarray]
    P: Optional[np.ndarray] = None
    S: Optional[np.ndarray] = None
    alpha: Optional[float] = None
    lam_max: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.c1 <= self.c):
            raise ValueError("levels must satisfy 0 < c1 <= c")
        if self.kind not in ("quadratic", "analytic"):
            raise ValueError("kind must be 'quadratic' or 'analytic'")
        if self.kind == "quadratic":
            P = np.asarray(self.P, dtype=float)
            if np.max(np.abs(P - P.T)) > 1e-12:
                raise ValueError("P must be symmetric")
            if np.min(np.linalg.eigvalsh(P)) <= 0.0:
                raise ValueError("P must be positive definite")
            object.__setattr__(self, "P", P)

    def with_levels(self, c: float, c1: float) -> "LocalClf":
        return LocalClf(
            kind=self.kind,
            c=c,
            c1=c1,
            v=self.v,
            grad=self.grad,
            u=self.u,
            P=self.P,
            S=self.S,
            alpha=self.alpha,
            lam_max=self.lam_max,
        )


@dataclass
class LevelSearchReport:
    c_sup: Optional[float]
    tested_levels: list[float]
    admissible: list[bool]
    worst_decrease: list[float]
    worst_control_slack: list[float]

    def to_rows(self):
        for lvl, adm, dec, slack in zip(
            self.tested_levels,
            self.admissible,
            self.worst_decrease,
            self.worst_control_slack,
        ):
            yield lvl, adm, dec, slack


def quadratic_clf(P, S, c: float, c1: float, alpha: Optional[float] = None) -> LocalClf:
    """Quadratic CLF V(x) = <Px, x> with linear feedback u(x) = Sx."""
    P = np.asarray(P, dtype=float)
    S = np.asarray(S, dtype=float)

    def v(x):
        x = np.asarray(x, dtype=float)
        return float(x @ P @ x)

    def grad(x):
        return 2.0 * (P @ np.asarray(x, dtype=float))

    def u(x):
        return S @ np.asarray(x, dtype=float)

    return LocalClf(
        kind="quadratic", c=c, c1=c1, v=v, grad=grad, u=u, P=P, S=S, alpha=alpha
    )


def example_2d_clf(
    a: float, b: float = 1.4, c: float = 0.015, c1: float = 0.01
) -> LocalClf:
    """Analytic quartic CLF for the 2D benchmark with its saturating feedback.

    V(x) = x1^4/4 + x2^2/2; the feedback switches between -4*x1 and the
    saturating branch so that it stays admissible on the target sublevel.
    """

    def v(x):
        return 0.25 * x[0] ** 4 + 0.5 * x[1] ** 2

    def grad(x):
        return np.array([x[0] ** 3, x[1]])

    def u(x):
        x1 = x[0]
        if abs(4.0 * x1) <= a:
            chi = 3.0
        else:
            chi = max(a / abs(x1) - 1.0, b)
        return np.array([-(1.0 + chi) * x1])

    return LocalClf(kind="analytic", c=c, c1=c1, v=v, grad=grad, u=u, lam_max=0.5)


def linearize(sys: ControlSystem, fd_step: float = 1e-6):
    """Return (A, B): the state/control Jacobians of the dynamics at the origin."""
    x0 = np.zeros(sys.n)
    u0 = np.zeros(sys.m)
    f0 = sys.dynamics(x0, u0)
    if np.linalg.norm(f0) > 1e-10:
        raise NotAnEquilibrium("f(0, 0) != 0")
    A = np.asarray(sys.jac_dynamics_x(x0, u0), dtype=float)
    B = np.empty((sys.n, sys.m))
    for j in range(sys.m):
        du = np.zeros(sys.m)
        du[j] = fd_step
        B[:, j] = (sys.dynamics(x0, u0 + du) - sys.dynamics(x0, u0 - du)) / (
            2.0 * fd_step
        )
    return A, B


def _solve_lyapunov_general(Acl: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Solve Acl^T P + P Acl = -W via the Kronecker-product linear system."""
    n = Acl.shape[0]
    M = np.kron(np.eye(n), Acl.T) + np.kron(Acl.T, np.eye(n))
    vec_p = np.linalg.solve(M, -W.reshape(n * n))
    P = vec_p.reshape(n, n)
    return 0.5 * (P + P.T)


def solve_lyapunov(Acl, alpha: float) -> np.ndarray:
    """Solve Acl^T P + P Acl = -alpha*I for a Hurwitz Acl."""
    Acl = np.asarray(Acl, dtype=float)
    max_real = float(np.max(np.real(np.linalg.eigvals(Acl))))
    if max_real >= 0.0:
        raise NotHurwitz(max_real)
    return _solve_lyapunov_general(Acl, alpha * np.eye(Acl.shape[0]))


def solve_riccati(A, B, Q, R, max_newton: int = 100):
    """Stabilizing Riccati solution by Kleinman-Newton iteration.

    Returns (P, S) with S = -R^{-1} B^T P and A + BS Hurwitz.  The starting
    stabilizing feedback comes from the shifted-Gramian construction: with
    beta exceeding the spectral abscissa, P0 solves
    (A + beta*I) P0 + P0 (A + beta*I)^T = 2 B B^T and S0 = -B^T P0^{-1},
    which stabilizes any controllable pair (beta doubles until the
    closed loop is confirmed Hurwitz).
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    n, m = B.shape
    ctrb = np.hstack([np.linalg.matrix_power(A, i) @ B for i in range(n)])
    if np.linalg.matrix_rank(ctrb) < n:
        raise NotControllable("controllability matrix is rank deficient")
    Rinv = np.linalg.inv(R)

    beta = 1.0 + float(np.linalg.norm(A))
    S = None
    for _ in range(60):
        # (A + beta*I) P0 + P0 (A + beta*I)^T = 2 B B^T rewritten in the
        # M^T P + P M = -W convention of the helper with M = (A + beta*I)^T.
        P0 = _solve_lyapunov_general(
            (A + beta * np.eye(n)).T, -2.0 * (B @ B.T)
        )
        S_try = -B.T @ np.linalg.inv(P0)
        if np.max(np.real(np.linalg.eigvals(A + B @ S_try))) < 0.0:
            S = S_try
            break
        beta *= 2.0
    if S is None:
        raise NoConvergence("failed to find an initial stabilizing feedback")

    P = None
    for _ in range(max_newton):
        Acl = A + B @ S
        W = Q + S.T @ R @ S
        P_new = _solve_lyapunov_general(Acl, W)
        S = -Rinv @ (B.T @ P_new)
        if P is not None and np.max(np.abs(P_new - P)) <= 1e-13 * (
            1.0 + np.max(np.abs(P_new))
        ):
            P = P_new
            break
        P = P_new
    else:
        raise NoConvergence("Kleinman-Newton iteration did not converge")

    residual = A.T @ P + P @ A - P @ B @ Rinv @ B.T @ P + Q
    if np.linalg.norm(residual) > 1e-8:
        raise NoConvergence(
            f"Riccati residual too large: {np.linalg.norm(residual):.3g}"
        )
    return P, S


def terminal_state_on_level(clf: LocalClf, xi, level: float) -> np.ndarray:
    """Scale the unit direction xi onto the level surface V(lambda*xi) = level."""
    xi = np.asarray(xi, dtype=float)
    if abs(np.linalg.norm(xi) - 1.0) > 1e-12:
        raise ValueError("xi must be a unit vector")
    if level <= 0:
        raise ValueError("level must be positive")
    if clf.kind == "quadratic":
        quad = float(xi @ clf.P @ xi)
        return math.sqrt(level / quad) * xi

    lam_max = clf.lam_max
    if clf.v(lam_max * xi) < level:
        raise LambdaMaxTooSmall(
            f"V({lam_max}*xi) < level; increase lam_max for this direction"
        )
    lam = bisect(lambda lam: clf.v(lam * xi) - level, Bracket(0.0, lam_max), tol=1e-13)
    return lam * xi


def _random_unit_vectors(rng, count: int, n: int) -> np.ndarray:
    vecs = rng.standard_normal((count, n))
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return vecs / norms


def find_level_sup(
    sys: ControlSystem,
    clf: LocalClf,
    c_tilde: float,
    n_levels: int = 200,
    n_samples: int = 100,
    n_guesses: int = 5,
    seed: int = 0,
) -> LevelSearchReport:
    """Grid search for the supremum of admissible target levels.

    A level is admissible when, on its boundary, the decrease value
    ``<grad V, f(x, u(x))>`` stays negative and the local feedback stays
    inside the control box.  Each boundary is probed at random directions
    and refined by Powell maximizations over the sphere angles.
    c_sup is the largest tested level whose smaller tested levels are all
    admissible.
    """
    from .shooting import sphere_from_angles

    if c_tilde <= 0:
        raise ValueError("c_tilde must be positive")
    rng = np.random.default_rng(seed)
    levels = [c_tilde * (i + 1) / n_levels for i in range(n_levels)]
    box = sys.control_box

    def boundary_metrics(level, x):
        u = clf.u(x)
        decrease = float(clf.grad(x) @ sys.dynamics(x, u))
        slack = float(
            min(np.min(u - box.lo), np.min(box.hi - u))
        )  # negative when the feedback violates the box
        return decrease, slack

    admissible = []
    worst_dec = []
    worst_slack = []
    for level in levels:
        dirs = _random_unit_vectors(rng, n_samples, sys.n)
        wd = -np.inf
        ws = np.inf
        ok = True
        try:
            for xi in dirs:
                x = terminal_state_on_level(clf, xi, level)
                d, s = boundary_metrics(level, x)
                wd = max(wd, d)
                ws = min(ws, s)
            # Refine the worst decrease by maximizing over boundary angles.
            for _ in range(n_guesses):
                theta0 = np.concatenate(
                    (
                        rng.uniform(0.0, 2.0 * np.pi, size=1),
                        rng.uniform(0.0, np.pi, size=sys.n - 2),
                    )
                )

                def neg_decrease(theta):
                    xi = sphere_from_angles(theta)
                    x = terminal_state_on_level(clf, xi, level)
                    return -boundary_metrics(level, x)[0]

                res = powell_minimize(neg_decrease, theta0, tol=1e-6, max_iters=60)
                x = terminal_state_on_level(clf, sphere_from_angles(res.argmin), level)
                d, s = boundary_metrics(level, x)
                wd = max(wd, d)
                ws = min(ws, s)
        except LambdaMaxTooSmall:
            ok = False
        ok = ok and wd < 0.0 and ws >= -1e-12
        admissible.append(ok)
        worst_dec.append(wd)
        worst_slack.append(ws)

    c_sup = None
    for level, ok in zip(levels, admissible):
        if not ok:
            break
        c_sup = level
    return LevelSearchReport(
        c_sup=c_sup,
        tested_levels=levels,
        admissible=admissible,
        worst_decrease=worst_dec,
        worst_control_slack=worst_slack,
    )


def check_petrov(
    sys: ControlSystem,
    clf: LocalClf,
    n_samples: int = 1000,
    seed: int = 0,
    n_controls: int = 33,
) -> float:
    """Worst-case inner product between boundary normals and best velocities.

    Samples points on the target boundary, normalizes the CLF gradient into
    an outward unit normal, and minimizes ``<nu, f(x, u)>`` over a dense
    control grid.  The returned maximum over samples must be negative for
    the boundary inflow condition to hold.
    """
    rng = np.random.default_rng(seed)
    grids = [
        np.linspace(lo, hi, n_controls)
        for lo, hi in zip(sys.control_box.lo, sys.control_box.hi)
    ]
    mesh = np.stack(
        [g.ravel() for g in np.meshgrid(*grids, indexing="ij")], axis=-1
    )
    worst = -np.inf
    for xi in _random_unit_vectors(rng, n_samples, sys.n):
        x = terminal_state_on_level(clf, xi, clf.c)
        gradient = clf.grad(x)
        norm = np.linalg.norm(gradient)
        if norm < 1e-14:
            raise DegenerateGradient("CLF gradient vanishes on the boundary")
        nu = gradient / norm
        best = min(float(nu @ sys.dynamics(x, u)) for u in mesh)
        worst = max(worst, best)
    return worst
