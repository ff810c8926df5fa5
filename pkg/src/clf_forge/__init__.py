"""Global control Lyapunov functions via exit-time optimal control.

Computes, pointwise, the Kruzhkov-transformed value function of an
exit-time optimal control problem together with a stabilizing feedback
action, by integrating Pontryagin characteristics and solving the
associated shooting problems with derivative-free optimization.  Includes
local-CLF construction from the linearization, grid evaluation, a
ball-target variant, and an MPC simulation harness with Itô noise.
"""

from .characteristics import (
    BallTarget,
    Characteristic,
    ExitParams,
    ExitStatus,
    check_hamiltonian_conservation,
    hamiltonian,
    integrate_forward,
    integrate_reverse,
)
from .integrator import IntegratorConfig, OdeSolution, integrate
from .local_clf import (
    LevelSearchReport,
    LocalClf,
    check_petrov,
    example_2d_clf,
    find_level_sup,
    linearize,
    quadratic_clf,
    solve_lyapunov,
    solve_riccati,
    terminal_state_on_level,
)
from .mpc import MpcConfig, MpcRun, monte_carlo, run_mpc
from .numerics import (
    Bracket,
    OptimResult,
    bisect,
    golden_section,
    powell_minimize,
    zbrak,
)
from .shooting import (
    ShootingResult,
    solve_shooting,
    sphere_from_angles,
    terminal_multiplier_roots,
)
from .systems import (
    BoxControlSet,
    ControlSystem,
    eval_extremal_control,
    make_example_2d,
    make_pvtol,
)
from .value_eval import (
    EvalParams,
    GridResult,
    ValueResult,
    evaluate_grid,
    evaluate_state,
    evaluate_state_ball,
    solve_main,
)

__version__ = "0.1.0"
