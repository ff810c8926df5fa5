"""Command-line front end.

Subcommands: local-clf (build the local CLF and search admissible levels),
grid (evaluate the value function on a rectangle), eval (single states,
sublevel or ball targets), mpc (closed-loop simulation with Monte Carlo
statistics), char-trace (dump one characteristic).  Configuration is a
single JSON document; outputs are CSV files plus a gnuplot script where a
surface is worth plotting.

Exit codes: 0 success, 1 config error, 2 numerical/model error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys as _sys
from pathlib import Path

import numpy as np

from . import local_clf as lclf
from .characteristics import (
    BallTarget,
    ExitParams,
    check_hamiltonian_conservation,
    integrate_forward,
    integrate_reverse,
)
from .integrator import IntegratorConfig
from .mpc import MpcConfig, monte_carlo
from .systems import make_example_2d, make_pvtol
from .value_eval import (
    EvalParams,
    evaluate_grid,
    evaluate_state,
    evaluate_state_ball,
)

__all__ = ["main"]


class ConfigError(ValueError):
    pass


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


def _write_csv(path: Path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(
                ",".join(c if isinstance(c, str) else _fmt(c) for c in row)
                + "\n"
            )


def _check_keys(obj: dict, allowed, where: str):
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ConfigError(
            f"unknown key(s) in {where}: {', '.join(sorted(unknown))}"
        )


def _load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(
        cfg,
        {
            "system",
            "clf",
            "eval",
            "integrator",
            "grid",
            "x0",
            "ball_deltas",
            "mpc",
            "char",
            "seed",
            "workers",
        },
        "config",
    )
    return cfg


def _build_system(cfg: dict):
    sys_cfg = dict(cfg.get("system", {"kind": "example2d"}))
    kind = sys_cfg.pop("kind", "example2d")
    if kind == "example2d":
        _check_keys(sys_cfg, {"a"}, "system")
        return make_example_2d(float(sys_cfg.get("a", 1.2)))
    if kind == "pvtol":
        _check_keys(
            sys_cfg, {"alpha", "a1", "a2", "lam1", "lam2"}, "system"
        )
        return make_pvtol(
            alpha=float(sys_cfg.get("alpha", 0.1)),
            a1=float(sys_cfg.get("a1", 5.0)),
            a2=float(sys_cfg.get("a2", 5.0)),
            lam1=float(sys_cfg.get("lam1", 0.2)),
            lam2=float(sys_cfg.get("lam2", 0.04)),
        )
    raise ConfigError(f"unknown system kind {kind!r}")


def _build_clf(cfg: dict, system):
    clf_cfg = dict(cfg.get("clf", {"mode": "analytic"}))
    _check_keys(
        clf_cfg,
        {"mode", "alpha", "Q", "R", "S", "c", "c1", "b", "level_search"},
        "clf",
    )
    mode = clf_cfg.get("mode", "analytic")
    c = float(clf_cfg.get("c", 0.015))
    c1 = float(clf_cfg.get("c1", 0.01))
    if mode == "analytic":
        if system.name != "example2d":
            raise ConfigError("analytic CLF is only defined for example2d")
        a = float(system.control_box.hi[0])
        return lclf.example_2d_clf(
            a, b=float(clf_cfg.get("b", 1.4)), c=c, c1=c1
        )
    A, B = lclf.linearize(system)
    if mode == "riccati":
        Q = _matrix_or_scaled_identity(clf_cfg.get("Q", 0.2), system.n, "Q")
        R = _matrix_or_scaled_identity(clf_cfg.get("R", 0.04), system.m, "R")
        P, S = lclf.solve_riccati(A, B, Q, R)
        return lclf.quadratic_clf(P, S, c, c1)
    if mode == "lyapunov":
        alpha = float(clf_cfg.get("alpha", 1.0))
        S = np.asarray(clf_cfg.get("S", np.zeros((system.m, system.n))), float)
        P = lclf.solve_lyapunov(A + B @ S, alpha)
        return lclf.quadratic_clf(P, S, c, c1, alpha=alpha)
    raise ConfigError(f"unknown clf mode {mode!r}")


def _matrix_or_scaled_identity(value, dim: int, name: str):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(dim)
    if arr.shape != (dim, dim):
        raise ConfigError(f"{name} must be a scalar or a {dim}x{dim} matrix")
    return arr


def _build_eval_params(cfg: dict) -> EvalParams:
    ev = dict(cfg.get("eval", {}))
    fields = {
        "t_max",
        "t_max_recompute",
        "n_guesses",
        "n_guesses_recompute",
        "eps",
        "eps1",
        "delta1",
        "delta2",
        "powell_tol_main",
        "powell_tol_aux",
    }
    _check_keys(ev, fields, "eval")
    try:
        return EvalParams(**ev)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid eval params: {exc}") from exc


def _build_integrator(cfg: dict) -> IntegratorConfig:
    ic = dict(cfg.get("integrator", {}))
    _check_keys(
        ic,
        {"h_init", "atol", "rtol", "output_step", "h_min", "grid_event_detection"},
        "integrator",
    )
    try:
        return IntegratorConfig(**ic)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid integrator config: {exc}") from exc


def _resolve_workers(cfg: dict, args) -> int:
    env = os.environ.get("CLF_FORGE_WORKERS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError("CLF_FORGE_WORKERS must be an integer") from exc
    if args.workers is not None:
        return max(1, args.workers)
    if cfg.get("workers") is not None:
        return max(1, int(cfg["workers"]))
    return os.cpu_count() or 1


def _resolve_seed(cfg: dict, args) -> int:
    if args.seed is not None:
        return args.seed
    return int(cfg.get("seed", 0))


def cmd_local_clf(cfg, out: Path, seed: int, workers: int) -> int:
    system = _build_system(cfg)
    clf = _build_clf(cfg, system)
    search = dict(cfg.get("clf", {}).get("level_search", {}))
    _check_keys(
        search, {"c_tilde", "n_levels", "n_samples", "n_guesses"}, "level_search"
    )
    report = lclf.find_level_sup(
        system,
        clf,
        c_tilde=float(search.get("c_tilde", 2.0 * clf.c)),
        n_levels=int(search.get("n_levels", 200)),
        n_samples=int(search.get("n_samples", 100)),
        n_guesses=int(search.get("n_guesses", 5)),
        seed=seed,
    )
    with open(out / "P.json", "w") as fh:
        json.dump(
            {"P": None if clf.P is None else clf.P.tolist()}, fh, indent=2
        )
    with open(out / "S.json", "w") as fh:
        json.dump(
            {"S": None if clf.S is None else clf.S.tolist()}, fh, indent=2
        )
    _write_csv(
        out / "level_report.csv",
        ["level", "admissible", "worst_decrease", "worst_control_slack"],
        report.to_rows(),
    )
    if report.c_sup is not None:
        print(f"c_sup = {report.c_sup:.17g}")
    else:
        print("no admissible level found")
    return 0


def _grid_plot_script(n: int, m: int) -> str:
    lines = [
        "# gnuplot script: value-function and feedback surfaces",
        "set datafile separator ','",
        "set key off",
        "set dgrid3d 50,50",
        "set hidden3d",
    ]
    if n == 2:
        lines += [
            "set term pngcairo size 900,700",
            "set output 'value_surface.png'",
            "splot 'values.csv' using 1:2:3 every ::1 with lines",
            "set output 'feedback_surface.png'",
            f"splot 'values.csv' using 1:2:{n + 3} every ::1 with lines",
            "set output 'shooting_error.png'",
            f"splot 'values.csv' using 1:2:{n + m + 4} every ::1 with lines",
        ]
    else:
        lines.append("# surfaces need a 2D state; see values.csv columns")
    return "\n".join(lines) + "\n"


def _result_row(node, res, m, mask_value):
    controls = list(np.atleast_1d(res.control)) + [math.nan] * (
        m - np.atleast_1d(res.control).size
    )
    return (
        list(node)
        + [res.v, res.V]
        + controls
        + [
            res.status,
            res.shooting_error,
            res.shooting_time,
            res.replacement_indicator,
            mask_value,
        ]
    )


def cmd_grid(cfg, out: Path, seed: int, workers: int) -> int:
    system = _build_system(cfg)
    clf = _build_clf(cfg, system)
    params = _build_eval_params(cfg)
    config = _build_integrator(cfg)
    grid_cfg = dict(cfg.get("grid", {}))
    _check_keys(grid_cfg, {"lo", "hi", "shape"}, "grid")
    if not {"lo", "hi", "shape"} <= set(grid_cfg):
        raise ConfigError("grid requires lo, hi and shape")
    result = evaluate_grid(
        system,
        clf,
        grid_cfg["lo"],
        grid_cfg["hi"],
        grid_cfg["shape"],
        params,
        config,
        seed=seed,
        workers=workers,
    )
    n, m = system.n, system.m
    header = (
        [f"x{i + 1}" for i in range(n)]
        + ["v", "V"]
        + [f"u{i + 1}" for i in range(m)]
        + [
            "status",
            "shooting_error",
            "shooting_time",
            "replacement_indicator",
            "in_domain_mask",
        ]
    )
    _write_csv(
        out / "values.csv",
        header,
        (
            _result_row(node, res, m, bool(mask))
            for node, res, mask in zip(
                result.nodes, result.results, result.mask
            )
        ),
    )
    _write_csv(
        out / "domain_mask.csv",
        [f"x{i + 1}" for i in range(n)] + ["in_domain_mask"],
        (
            list(node) + [bool(mask)]
            for node, mask in zip(result.nodes, result.mask)
        ),
    )
    (out / "plot.gp").write_text(_grid_plot_script(n, m))
    return 0


def cmd_eval(cfg, out: Path, seed: int, workers: int) -> int:
    system = _build_system(cfg)
    params = _build_eval_params(cfg)
    config = _build_integrator(cfg)
    if "x0" not in cfg:
        raise ConfigError("eval requires x0")
    x0 = np.asarray(cfg["x0"], dtype=float)
    if x0.shape != (system.n,):
        raise ConfigError(f"x0 must have {system.n} coordinates")
    deltas = cfg.get("ball_deltas")
    rows = []
    if deltas:
        for delta in deltas:
            res = evaluate_state_ball(
                system, float(delta), x0, params, config, seed=seed
            )
            rows.append(
                [float(delta)]
                + list(np.atleast_1d(res.control))
                + [res.v, res.V, res.status]
            )
        header = (
            ["delta"]
            + [f"u{i + 1}" for i in range(system.m)]
            + ["v", "V", "status"]
        )
    else:
        clf = _build_clf(cfg, system)
        res = evaluate_state(system, clf, x0, params, config, seed=seed)
        header = (
            [f"x{i + 1}" for i in range(system.n)]
            + ["v", "V"]
            + [f"u{i + 1}" for i in range(system.m)]
            + ["status", "shooting_error", "shooting_time", "replacement_indicator"]
        )
        rows.append(
            list(x0)
            + [res.v, res.V]
            + list(np.atleast_1d(res.control))
            + [
                res.status,
                res.shooting_error,
                res.shooting_time,
                res.replacement_indicator,
            ]
        )
        print(f"v = {res.v:.17g}  status = {res.status}")
    _write_csv(out / "value.csv", header, rows)
    return 0


def cmd_mpc(cfg, out: Path, seed: int, workers: int) -> int:
    system = _build_system(cfg)
    clf = _build_clf(cfg, system)
    params = _build_eval_params(cfg)
    config = _build_integrator(cfg)
    mpc_cfg = dict(cfg.get("mpc", {}))
    _check_keys(
        mpc_cfg,
        {
            "horizon",
            "dt_recompute",
            "dt_sde",
            "noise",
            "n_monte_carlo",
            "controller",
            "warm_start",
            "adaptive",
            "fallback",
        },
        "mpc",
    )
    if "horizon" not in mpc_cfg:
        raise ConfigError("mpc requires a horizon")
    if "x0" not in cfg:
        raise ConfigError("mpc requires x0")
    x0 = np.asarray(cfg["x0"], dtype=float)
    if "noise" in mpc_cfg and mpc_cfg["noise"] is not None:
        mpc_cfg["noise"] = np.asarray(mpc_cfg["noise"], dtype=float)
    try:
        run_cfg = MpcConfig(seed=seed, **mpc_cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid mpc config: {exc}") from exc
    run = monte_carlo(
        system, clf, x0, run_cfg, params, config, workers=workers
    )
    _write_csv(
        out / "mpc_mean_std.csv",
        ["t", "mean", "std"],
        zip(run.mean_times, run.mean, run.std),
    )
    _write_csv(
        out / "switches.csv",
        ["t"] + [f"u{i + 1}" for i in range(system.m)],
        (
            [t] + list(u)
            for t, u in zip(run.switch_times, run.switch_controls)
        ),
    )
    return 0


def cmd_char_trace(cfg, out: Path, seed: int, workers: int) -> int:
    system = _build_system(cfg)
    clf = _build_clf(cfg, system)
    params = _build_eval_params(cfg)
    config = _build_integrator(cfg)
    char_cfg = dict(cfg.get("char", {}))
    _check_keys(
        char_cfg, {"p0", "ptilde", "reverse", "xi", "t_max"}, "char"
    )
    t_max = float(char_cfg.get("t_max", params.t_max))
    exit_params = ExitParams(
        t_max=t_max, eps=params.eps, terminal_mode="sublevel"
    )
    if char_cfg.get("reverse", False):
        if "xi" not in char_cfg:
            raise ConfigError("reverse char-trace requires xi")
        xi = np.asarray(char_cfg["xi"], dtype=float)
        norm = np.linalg.norm(xi)
        if norm == 0:
            raise ConfigError("xi must be nonzero")
        xi = xi / norm
        ptilde = float(char_cfg.get("ptilde", 0.5))
        char = integrate_reverse(
            system, clf, xi, ptilde, exit_params, config, output="uniform"
        )
    else:
        if "x0" not in cfg or "p0" not in char_cfg:
            raise ConfigError("forward char-trace requires x0 and char.p0")
        x0 = np.asarray(cfg["x0"], dtype=float)
        p0 = np.asarray(char_cfg["p0"], dtype=float)
        ptilde = float(char_cfg.get("ptilde", 1.0))
        char = integrate_forward(
            system, clf, x0, p0, ptilde, exit_params, config, output="uniform"
        )
    drift = char.hamiltonian_drift(system)
    n, m = system.n, system.m
    header = (
        ["t"]
        + [f"x{i + 1}" for i in range(n)]
        + [f"p{i + 1}" for i in range(n)]
        + [f"u{i + 1}" for i in range(m)]
        + ["cost", "h_drift"]
    )
    _write_csv(
        out / "trace.csv",
        header,
        (
            [t] + list(x) + list(p) + list(u) + [c, d]
            for t, x, p, u, c, d in zip(
                char.times,
                char.states,
                char.costates,
                char.controls,
                char.costs,
                drift,
            )
        ),
    )
    print(
        f"exit = {char.exit.tag} at t = {char.exit.exit_time:.17g}, "
        f"max |H drift| = {check_hamiltonian_conservation(system, char):.3g}"
    )
    return 0


_COMMANDS = {
    "local-clf": cmd_local_clf,
    "grid": cmd_grid,
    "eval": cmd_eval,
    "mpc": cmd_mpc,
    "char-trace": cmd_char_trace,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="clf-forge",
        description=(
            "Global control Lyapunov functions and stabilizing feedback "
            "via exit-time optimal control"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=".")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
    args = parser.parse_args(argv)

    try:
        cfg = _load_config(args.config)
        seed = _resolve_seed(cfg, args)
        workers = _resolve_workers(cfg, args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](cfg, out, seed, workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=_sys.stderr)
        return 1
    except (
        lclf.NotControllable,
        lclf.NotHurwitz,
        lclf.NoConvergence,
        lclf.NotAnEquilibrium,
        lclf.DegenerateGradient,
        lclf.LambdaMaxTooSmall,
    ) as exc:
        print(f"model error: {exc}", file=_sys.stderr)
        return 2
    except (ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"numerical error: {exc}", file=_sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
