"""Derivative-free minimization and scalar root finding.

Powell's conjugate-direction method with a Brent line search, bisection,
and segment-scan root bracketing.  These are the workhorses behind the
shooting optimizations and the level search, so they avoid derivatives
entirely and tolerate objectives that blow up (non-finite values are
treated as +inf so such points are deprioritized rather than fatal).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "OptimResult",
    "Bracket",
    "BracketError",
    "EvaluationFailure",
    "powell_minimize",
    "bisect",
    "zbrak",
    "golden_section",
]

_GOLD = 1.618033988749895
_CGOLD = 0.3819660112501051
_GLIMIT = 100.0
_TINY = 1e-25
_ZEPS = 1e-21


class EvaluationFailure(RuntimeError):
    """Objective returned a non-finite value at the given point."""

    def __init__(self, point):
        super().__init__(f"objective is non-finite at {point!r}")
        self.point = point


class BracketError(ValueError):
    """Endpoints do not bracket a sign change."""


@dataclass
class OptimResult:
    argmin: np.ndarray
    fmin: float
    iterations: int
    converged: bool


@dataclass(frozen=True)
class Bracket:
    a: float
    b: float


_BIG = 1e300


def _finite(value: float) -> float:
    # A huge finite surrogate keeps parabolic-fit arithmetic warning-free.
    return value if np.isfinite(value) else _BIG


def _bracket_minimum(func, ax, bx):
    """Golden-ratio expansion bracketing of a minimum (downhill from ax, bx)."""
    fa, fb = _finite(func(ax)), _finite(func(bx))
    if fb > fa:
        ax, bx, fa, fb = bx, ax, fb, fa
    cx = bx + _GOLD * (bx - ax)
    fc = _finite(func(cx))
    while fb > fc:
        r = (bx - ax) * (fb - fc)
        q = (bx - cx) * (fb - fa)
        denom = 2.0 * np.copysign(max(abs(q - r), _TINY), q - r)
        u = bx - ((bx - cx) * q - (bx - ax) * r) / denom
        ulim = bx + _GLIMIT * (cx - bx)
        if (bx - u) * (u - cx) > 0.0:
            fu = _finite(func(u))
            if fu < fc:
                return bx, u, cx, fb, fu, fc
            if fu > fb:
                return ax, bx, u, fa, fb, fu
            u = cx + _GOLD * (cx - bx)
            fu = _finite(func(u))
        elif (cx - u) * (u - ulim) > 0.0:
            fu = _finite(func(u))
            if fu < fc:
                bx, cx, u = cx, u, u + _GOLD * (u - cx)
                fb, fc, fu = fc, fu, _finite(func(u))
        elif (u - ulim) * (ulim - cx) >= 0.0:
            u = ulim
            fu = _finite(func(u))
        else:
            u = cx + _GOLD * (cx - bx)
            fu = _finite(func(u))
        ax, bx, cx = bx, cx, u
        fa, fb, fc = fb, fc, fu
    return ax, bx, cx, fa, fb, fc


def _brent_min(func, ax, bx, cx, fb, tol=1e-8, max_iter=100):
    """Brent's parabolic-interpolation minimizer inside bracket (ax, bx, cx)."""
    a, b = (ax, cx) if ax < cx else (cx, ax)
    x = w = v = bx
    fx = fw = fv = fb
    e = d = 0.0
    for _ in range(max_iter):
        xm = 0.5 * (a + b)
        tol1 = tol * abs(x) + _ZEPS
        tol2 = 2.0 * tol1
        if abs(x - xm) <= tol2 - 0.5 * (b - a):
            return x, fx
        if abs(e) > tol1:
            r = (x - w) * (fx - fv)
            q = (x - v) * (fx - fw)
            p = (x - v) * q - (x - w) * r
            q = 2.0 * (q - r)
            if q > 0.0:
                p = -p
            q = abs(q)
            etemp = e
            e = d
            if (
                abs(p) >= abs(0.5 * q * etemp)
                or p <= q * (a - x)
                or p >= q * (b - x)
            ):
                e = a - x if x >= xm else b - x
                d = _CGOLD * e
            else:
                d = p / q
                u = x + d
                if u - a < tol2 or b - u < tol2:
                    d = np.copysign(tol1, xm - x)
        else:
            e = a - x if x >= xm else b - x
            d = _CGOLD * e
        u = x + d if abs(d) >= tol1 else x + np.copysign(tol1, d)
        fu = _finite(func(u))
        if fu <= fx:
            if u >= x:
                a = x
            else:
                b = x
            v, w, x = w, x, u
            fv, fw, fx = fw, fx, fu
        else:
            if u < x:
                a = u
            else:
                b = u
            if fu <= fw or w == x:
                v, w = w, u
                fv, fw = fw, fu
            elif fu <= fv or v == x or v == w:
                v, fv = u, fu
    return x, fx


def _line_minimize(func, point, direction, line_tol=1e-8):
    """Minimize t -> func(point + t*direction); return (new point, fmin)."""

    def f1(t):
        return _finite(func(point + t * direction))

    ax, bx, cx, _, fb, _ = _bracket_minimum(f1, 0.0, 1.0)
    tmin, fmin = _brent_min(f1, ax, bx, cx, fb, tol=line_tol)
    return point + tmin * direction, fmin


def powell_minimize(
    objective: Callable[[np.ndarray], float],
    x0,
    tol: float = 1e-8,
    max_iters: int = 400,
) -> OptimResult:
    """Powell conjugate-direction minimization with Brent line searches.

    Terminates when a full cycle reduces the objective by less than the
    fractional tolerance, or after ``max_iters`` cycles.  The direction set
    is re-initialized to coordinate axes every ``k + 1`` cycles to avoid
    degeneracy.  Raises :class:`EvaluationFailure` if the objective is
    non-finite at the starting point; non-finite values elsewhere are
    treated as +inf.
    """
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    k = x.shape[0]
    f = objective(x)
    if not np.isfinite(f):
        raise EvaluationFailure(x.copy())
    directions = np.eye(k)
    # Fixed line-search tolerance, kept above sqrt(machine eps) where the
    # parabolic fit in Brent is still trustworthy.  It must be well below
    # the outer fractional criterion: a coarse line search caps the
    # attainable argmin precision in narrow diagonal valleys even when the
    # per-cycle decrease test has not yet triggered.
    line_tol = 1e-7
    converged = False
    cycles = 0
    for cycles in range(1, max_iters + 1):
        f_start = f
        x_start = x.copy()
        biggest_drop = 0.0
        biggest_index = 0
        for i in range(k):
            f_before = f
            x, f = _line_minimize(objective, x, directions[i], line_tol)
            if f_before - f > biggest_drop:
                biggest_drop = f_before - f
                biggest_index = i
        if 2.0 * (f_start - f) <= tol * (abs(f_start) + abs(f)) + _ZEPS:
            converged = True
            break
        # Powell's criterion for replacing a direction with the cycle average.
        x_ext = 2.0 * x - x_start
        f_ext = _finite(objective(x_ext))
        if f_ext < f_start:
            t = (
                2.0
                * (f_start - 2.0 * f + f_ext)
                * (f_start - f - biggest_drop) ** 2
                - biggest_drop * (f_start - f_ext) ** 2
            )
            if t < 0.0:
                new_dir = x - x_start
                norm = np.linalg.norm(new_dir)
                if norm > 0.0:
                    x, f = _line_minimize(objective, x, new_dir, line_tol)
                    directions[biggest_index] = directions[k - 1]
                    directions[k - 1] = new_dir / norm
        if cycles % (k + 1) == 0:
            directions = np.eye(k)
    return OptimResult(argmin=x, fmin=f, iterations=cycles, converged=converged)


def golden_section(func, lo: float, hi: float, tol: float = 1e-10) -> float:
    """Golden-section minimization of a unimodal scalar function on [lo, hi]."""
    a, b = float(lo), float(hi)
    x1 = a + _CGOLD * (b - a)
    x2 = b - _CGOLD * (b - a)
    f1, f2 = _finite(func(x1)), _finite(func(x2))
    while b - a > tol * (1.0 + abs(a) + abs(b)):
        if f1 < f2:
            b, x2, f2 = x2, x1, f1
            x1 = a + _CGOLD * (b - a)
            f1 = _finite(func(x1))
        else:
            a, x1, f1 = x1, x2, f2
            x2 = b - _CGOLD * (b - a)
            f2 = _finite(func(x2))
    xm = 0.5 * (a + b)
    # The interior minimum may still lose to an endpoint of the original box.
    cands = [(func(lo), lo), (func(hi), hi), (func(xm), xm)]
    return min(cands)[1]


def bisect(
    objective: Callable[[float], float],
    bracket: Bracket,
    tol: float = 1e-13,
) -> float:
    """Bisection root finding; the final interval width is at most ``tol``."""
    a, b = float(bracket.a), float(bracket.b)
    fa, fb = objective(a), objective(b)
    if fa == 0.0:
        return a
    if fb == 0.0:
        return b
    if fa * fb > 0.0:
        raise BracketError(f"no sign change on [{a}, {b}]")
    while abs(b - a) > tol:
        mid = 0.5 * (a + b)
        fm = objective(mid)
        if fm == 0.0:
            return mid
        if fa * fm < 0.0:
            b, fb = mid, fm
        else:
            a, fa = mid, fm
    return 0.5 * (a + b)


def zbrak(
    objective: Callable[[float], float],
    lo: float,
    hi: float,
    n_segments: int = 100,
) -> list[Bracket]:
    """Scan equal subintervals of [lo, hi] and return all sign-change brackets."""
    if not lo < hi:
        raise ValueError("requires lo < hi")
    if n_segments < 1:
        raise ValueError("n_segments must be at least 1")
    xs = np.linspace(lo, hi, n_segments + 1)
    fs = [objective(x) for x in xs]
    out = []
    for i in range(n_segments):
        if fs[i] == 0.0 and i > 0:
            continue  # zero at a node already captured by the previous segment
        if fs[i] * fs[i + 1] <= 0.0:
            out.append(Bracket(float(xs[i]), float(xs[i + 1])))
    return out
