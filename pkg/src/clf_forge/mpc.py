"""Closed-loop MPC simulation with optional Itô noise.

At each recomputation instant the controller produces a constant control
(either the full CLF evaluation pipeline or a saturated linear feedback),
and the plant advances by Euler-Maruyama substeps with additive diagonal
noise.  Monte Carlo aggregation reports the mean/std of the state norm on
the recomputation grid.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .characteristics import BallTarget, Target
from .integrator import IntegratorConfig
from .systems import ControlSystem
from .value_eval import EvalParams, evaluate_state, solve_main

__all__ = ["MpcConfig", "MpcRun", "run_mpc", "monte_carlo"]

CLF_PIPELINE = "clf_pipeline"
SATURATED_LINEAR = "saturated_linear"


@dataclass(frozen=True)
class MpcConfig:
    horizon: float
    dt_recompute: float = 0.1
    dt_sde: float = 1e-5
    noise: Optional[np.ndarray] = None  # per-coordinate sigma, None = 0
    n_monte_carlo: int = 1
    seed: int = 0
    controller: str = CLF_PIPELINE
    warm_start: bool = True
    adaptive: bool = False
    # On a warm-start miss: "evaluate" reruns the full evaluation pipeline
    # (shooting included), "reuse" keeps the previous control for one
    # sampling interval and retries at the next instant.
    fallback: str = "evaluate"

    def __post_init__(self):
        if self.horizon <= 0 or self.dt_recompute <= 0 or self.dt_sde <= 0:
            raise ValueError("horizon and time steps must be positive")
        ratio = self.dt_recompute / self.dt_sde
        if abs(ratio - round(ratio)) > 1e-9 * ratio:
            raise ValueError("dt_recompute / dt_sde must be an integer")
        if self.controller not in (CLF_PIPELINE, SATURATED_LINEAR):
            raise ValueError("unknown controller")
        if self.n_monte_carlo < 1:
            raise ValueError("n_monte_carlo must be >= 1")
        if self.fallback not in ("evaluate", "reuse"):
            raise ValueError("fallback must be 'evaluate' or 'reuse'")
        if self.noise is not None:
            sigma = np.asarray(self.noise, dtype=float)
            if np.any(sigma < 0):
                raise ValueError("noise intensities must be nonnegative")
            object.__setattr__(self, "noise", sigma)

    @property
    def substeps(self) -> int:
        return int(round(self.dt_recompute / self.dt_sde))

    @property
    def deterministic(self) -> bool:
        return self.noise is None or not np.any(self.noise > 0)


@dataclass
class MpcRun:
    times: np.ndarray
    states: np.ndarray
    switch_times: np.ndarray
    switch_controls: np.ndarray
    performance: float
    failures: list = field(default_factory=list)
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    mean_times: Optional[np.ndarray] = None


def _controller(
    sys, target, cfg, eval_params, int_config, bounding_box, p0_init=None
):
    """Stateful control law: (x, t) -> (u, ok); warm-starts the costate.

    The warm guess is the costate of the last successful characteristic
    propagated to the elapsed time (the exact continuation in the
    noise-free limit), so repeated solves only have to absorb the noise
    displacement accumulated over one sampling interval.
    """
    ball = isinstance(target, BallTarget)
    state = {
        "costate": None if p0_init is None else np.asarray(p0_init, float),
        "char": None,
        "t0": 0.0,
    }

    def inside(x):
        return (
            np.linalg.norm(x) <= target.delta
            if ball
            else target.v(x) <= target.c
        )

    def warm_guess(t):
        char = state["char"]
        if char is None or char.times.size < 2:
            return state["costate"]
        tau = min(max(t - state["t0"], 0.0), float(char.times[-1]))
        return np.array(
            [
                np.interp(tau, char.times, char.costates[:, j])
                for j in range(sys.n)
            ]
        )

    def remember(p_opt, char, t):
        state["costate"] = p_opt
        state["char"] = char
        state["t0"] = t

    def law(x, t, instant_seed):
        if cfg.controller == SATURATED_LINEAR:
            return sys.control_box.clamp(target.S @ x), True
        if inside(x):
            if ball:
                return sys.control_box.clamp(np.zeros(sys.m)), True
            return sys.control_box.clamp(target.u(x)), True
        guess = warm_guess(t) if cfg.warm_start else None
        if guess is not None:
            v, p_opt, char = solve_main(
                sys, target, x, guess, eval_params, int_config
            )
            if char.exit.tag == "reached_target":
                remember(p_opt, char, t)
                from .systems import eval_extremal_control

                return eval_extremal_control(sys, x, p_opt, 1.0), True
            if cfg.fallback == "reuse":
                return None, False
        res = evaluate_state(
            sys,
            target,
            x,
            eval_params,
            int_config,
            seed=instant_seed,
            bounding_box=bounding_box,
        )
        if res.status == "saturated":
            return None, False
        remember(res.costate, res.characteristic, t)
        return res.control, True

    return law


def run_mpc(
    sys: ControlSystem,
    target: Target,
    x0,
    cfg: MpcConfig,
    eval_params: EvalParams = EvalParams(),
    int_config: IntegratorConfig = IntegratorConfig(),
    bounding_box=None,
    sample_index: int = 0,
    record: str = "sde",
    p0_init=None,
) -> MpcRun:
    """One closed-loop sample path.

    The control is held constant between recomputation instants; the state
    advances by Euler-Maruyama at step dt_sde (plain explicit Euler when
    all noise intensities vanish, in which case no RNG draws occur).  A
    controller failure reuses the previous control and is logged.
    ``record`` chooses the stored grid: every SDE step or only the
    recomputation instants.  ``p0_init`` seeds the warm-started costate at
    the first instant (typically from a prior evaluation at x0), which
    skips the expensive cold-start shooting there.
    """
    x = np.asarray(x0, dtype=float).copy()
    n_sub = cfg.substeps
    dt = cfg.dt_sde
    sigma = None if cfg.deterministic else cfg.noise * math.sqrt(dt)
    rng = (
        None
        if cfg.deterministic
        else np.random.default_rng([cfg.seed, sample_index])
    )
    law = _controller(
        sys, target, cfg, eval_params, int_config, bounding_box, p0_init
    )

    ball = isinstance(target, BallTarget)

    def inside_target(xx):
        return (
            np.linalg.norm(xx) <= target.delta
            if ball
            else target.v(xx) <= target.c
        )

    sde_grid = record == "sde"
    times = [0.0]
    states = [x.copy()]
    switch_times = []
    switch_controls = []
    failures = []
    performance = 0.0
    u = sys.control_box.center
    norm_prev = float(np.linalg.norm(x))
    t = 0.0
    i = 0
    while t < cfg.horizon - 1e-12:
        u_new, ok = law(x, t, instant_seed=1_000_003 * sample_index + i)
        i += 1
        if ok:
            u = np.asarray(u_new, dtype=float)
        else:
            failures.append(t)
        switch_times.append(t)
        switch_controls.append(u.copy())
        steps = n_sub
        # Outside the target the adaptive grid recomputes twice as often.
        if cfg.adaptive and not inside_target(x) and n_sub % 2 == 0:
            steps = n_sub // 2
        # Do not overrun a horizon that is not a multiple of dt_recompute.
        remaining = cfg.horizon - t
        if remaining < steps * dt - 1e-12:
            steps = max(1, int(round(remaining / dt)))
        for _ in range(steps):
            drift = sys.dynamics(x, u)
            x = x + dt * drift
            if sigma is not None:
                x = x + sigma * rng.standard_normal(sys.n)
            t += dt
            norm = float(np.linalg.norm(x))
            performance += 0.5 * dt * (norm_prev + norm)
            norm_prev = norm
            if sde_grid:
                times.append(t)
                states.append(x.copy())
        if not sde_grid:
            times.append(t)
            states.append(x.copy())
    return MpcRun(
        times=np.asarray(times),
        states=np.asarray(states),
        switch_times=np.asarray(switch_times),
        switch_controls=np.asarray(switch_controls),
        performance=performance,
        failures=failures,
    )


_MC_CTX: dict = {}


def _mc_worker(sample: int):
    ctx = _MC_CTX
    run = run_mpc(
        ctx["sys"],
        ctx["target"],
        ctx["x0"],
        ctx["cfg"],
        ctx["eval_params"],
        ctx["int_config"],
        ctx["bounding_box"],
        sample_index=sample,
        record="recompute",
        p0_init=ctx["p0_init"],
    )
    return sample, run


def monte_carlo(
    sys: ControlSystem,
    target: Target,
    x0,
    cfg: MpcConfig,
    eval_params: EvalParams = EvalParams(),
    int_config: IntegratorConfig = IntegratorConfig(),
    bounding_box=None,
    workers: int = 1,
    p0_init=None,
) -> MpcRun:
    """Aggregate n_monte_carlo independent sample paths.

    Per-sample noise streams are keyed by (seed, sample index), so the
    aggregate is independent of scheduling; mean and std of the state norm
    are reported on the recomputation-instant grid.
    """
    global _MC_CTX
    _MC_CTX = {
        "sys": sys,
        "target": target,
        "x0": x0,
        "cfg": cfg,
        "eval_params": eval_params,
        "int_config": int_config,
        "bounding_box": bounding_box,
        "p0_init": p0_init,
    }
    samples = range(cfg.n_monte_carlo)
    if workers > 1 and cfg.n_monte_carlo > 1:
        import multiprocessing as mp

        mp_ctx = mp.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=mp_ctx) as pool:
            pairs = list(pool.map(_mc_worker, samples, chunksize=1))
    else:
        pairs = [_mc_worker(i) for i in samples]
    pairs.sort(key=lambda item: item[0])
    runs = [run for _, run in pairs]

    norms = np.stack(
        [np.linalg.norm(run.states, axis=1) for run in runs], axis=0
    )
    if cfg.deterministic:
        # All samples are the same path; avoid rounding residue in std.
        mean = norms[0]
        std = np.zeros_like(mean)
    else:
        mean = norms.mean(axis=0)
        std = norms.std(axis=0)
        # Columns where every sample agrees (e.g. the shared initial state)
        # should report exactly zero spread, not rounding residue.
        std[np.ptp(norms, axis=0) == 0.0] = 0.0
    first = runs[0]
    return MpcRun(
        times=first.times,
        states=first.states,
        switch_times=first.switch_times,
        switch_controls=first.switch_controls,
        performance=float(np.mean([run.performance for run in runs])),
        failures=[run.failures for run in runs],
        mean=mean,
        std=std,
        mean_times=first.times,
    )
