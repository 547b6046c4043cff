"""Crank-Nicolson and leapfrog time steppers on any cell set.

The CN step solves the Schur-reduced SPD system
(M + (tau^2/4) A) u_new = M u + tau M v - (tau^2/4) A u + (tau^2/4)(F_n + F_np1)
+ (tau/2) G, where F are volume loads of the source and G collects the
(tau/2)-scaled weak boundary/interface load vectors; v then follows
algebraically. The same advance routine backs both the global method and the
per-subdomain splitting step, so a single-subdomain split is bit-identical
to the global integrator.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .dg_space import Field, mass_solve, volume_load
from .errors import InstabilityError, SolverError
from .linalg import cg_solve, make_preconditioner
from .swip import SwipOperator, boundary_term


@dataclass
class State:
    """Discrete (u, v) pair at step n; t = n * tau."""

    u: Field
    v: Field
    n: int
    tau: float

    @property
    def t(self) -> float:
        return self.n * self.tau

    def copy(self) -> "State":
        return State(self.u.copy(), self.v.copy(), self.n, self.tau)


@dataclass
class ProblemData:
    """Analytic problem data: source f(x,y,t), Dirichlet trace g(x,y,t), and
    initial values u0(x,y), v0(x,y). None means identically zero."""

    f: object = None
    g: object = None
    u0: object = None
    v0: object = None


@dataclass
class SolverOptions:
    tol: float = 1e-10
    maxit: int = 500
    preconditioner: str = "block_jacobi"


class CnSystem:
    """Prefactored Crank-Nicolson system M + (tau^2/4) A for one operator."""

    def __init__(self, op: SwipOperator, tau: float, solver: SolverOptions | None = None):
        self.op = op
        self.tau = tau
        self.c4 = 0.25 * (tau * tau)
        self.mass = op.mass_diagonal()
        self.matrix = op.matrix.scaled(self.c4).add_diagonal(self.mass)
        self.solver = solver or SolverOptions()
        self.precond = make_preconditioner(
            self.solver.preconditioner, self.matrix, block_size=op.space.dofs_per_cell
        )
        self.last_report = None

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        x, report = cg_solve(
            self.matrix, rhs, tol=self.solver.tol, maxit=self.solver.maxit,
            precond=self.precond,
        )
        self.last_report = report
        if not report.converged:
            raise SolverError(
                f"CN solve did not converge: {report.iterations} iterations, "
                f"residual {report.residual:.3e}"
            )
        return x


def cn_advance(system: CnSystem, u: np.ndarray, v: np.ndarray, load_pair, gvec):
    """One Schur-reduced CN update of raw coefficient arrays.

    ``load_pair`` is F_n + F_np1 (volume loads, or None) and ``gvec`` the
    combined (tau/2)-scaled boundary/interface load vector (or None).
    """
    op, tau, c4, mass = system.op, system.tau, system.c4, system.mass
    rhs = mass * u + tau * (mass * v)
    rhs -= c4 * (op.matrix @ u)
    if load_pair is not None:
        rhs += c4 * load_pair
    if gvec is not None:
        rhs += (0.5 * tau) * gvec
    u_new = system.solve(rhs)
    v_new = (2.0 / tau) * (u_new - u) - v
    return u_new, v_new


def dirichlet_load(op: SwipOperator, g, t: float, faces=None) -> np.ndarray | None:
    """Weak Dirichlet load vector at time t, or None when absent."""
    if g is None:
        return None
    faces = op.dirichlet_faces if faces is None else faces
    if len(faces) == 0:
        return None
    return boundary_term(
        op.space, faces, g, t, eta=op.eta, cells=op.cells
    )


def source_load(op: SwipOperator, f, t: float) -> np.ndarray | None:
    if f is None:
        return None
    return volume_load(op.space, f, cells=op.cells, t=t)


def cn_boundary_vector(op: SwipOperator, data: ProblemData, t_n: float, tau: float):
    """(tau/2)-scaled combined Dirichlet load for one global CN step."""
    b_new = dirichlet_load(op, data.g, t_n + tau)
    b_old = dirichlet_load(op, data.g, t_n)
    if b_new is None and b_old is None:
        return None
    terms = [b for b in (b_new, b_old) if b is not None]
    acc = terms[0]
    for b in terms[1:]:
        acc = acc + b
    return (0.5 * tau) * acc


def cn_step(
    state: State,
    op: SwipOperator,
    data: ProblemData,
    tau: float,
    system: CnSystem | None = None,
) -> State:
    """One global Crank-Nicolson step; builds the system on the fly if needed."""
    if system is None:
        system = CnSystem(op, tau)
    f_new = source_load(op, data.f, state.t + tau)
    f_old = source_load(op, data.f, state.t)
    load_pair = None if f_new is None else f_new + f_old
    gvec = cn_boundary_vector(op, data, state.t, tau)
    u_new, v_new = cn_advance(system, state.u.coeffs, state.v.coeffs, load_pair, gvec)
    return State(
        Field(op.space, u_new, op.cells), Field(op.space, v_new, op.cells),
        state.n + 1, tau,
    )


# -- leapfrog -------------------------------------------------------------------


def lf_half_step(
    op: SwipOperator, u: np.ndarray, v: np.ndarray, tau: float, f_load, g_load
) -> np.ndarray:
    """v + (tau/2)(-L_h u + f_h + G(g)) with every term mass-solved separately.

    This exact operation order is shared by the global leapfrog method and
    the splitting prediction, which makes the two bit-comparable on cells
    whose operator rows coincide.
    """
    half = 0.5 * tau
    space, cells = op.space, op.cells
    vh = v - half * mass_solve(space, op.matrix @ u, cells)
    if f_load is not None:
        vh = vh + half * mass_solve(space, f_load, cells)
    if g_load is not None:
        vh = vh + half * mass_solve(space, g_load, cells)
    return vh


def lf_step(
    state: State,
    op: SwipOperator,
    data: ProblemData,
    tau: float,
    return_half: bool = False,
    reference_scale: float | None = None,
):
    """One explicit leapfrog step (half kick, drift, half kick).

    ``reference_scale`` anchors the blowup guard (typically the initial state
    magnitude); without it the guard only catches per-step explosions.
    """
    u, v = state.u.coeffs, state.v.coeffs
    t = state.t
    vh = lf_half_step(
        op, u, v, tau,
        source_load(op, data.f, t),
        dirichlet_load(op, data.g, t),
    )
    u_new = u + tau * vh
    _blowup_guard(u, u_new, reference_scale)
    v_new = lf_half_step(
        op, u_new, vh, tau,
        source_load(op, data.f, t + tau),
        dirichlet_load(op, data.g, t + tau),
    )
    new = State(
        Field(op.space, u_new, op.cells), Field(op.space, v_new, op.cells),
        state.n + 1, tau,
    )
    return (new, vh) if return_half else new


def _blowup_guard(u_old: np.ndarray, u_new: np.ndarray, reference_scale=None):
    if reference_scale is None:
        reference_scale = float(np.max(np.abs(u_old))) if len(u_old) else 0.0
    scale = max(1.0, reference_scale)
    peak = float(np.max(np.abs(u_new))) if len(u_new) else 0.0
    if not np.isfinite(peak) or peak > 1e6 * scale:
        raise InstabilityError(
            f"explicit step amplified the state to {peak:.3e} (CFL violation)"
        )


def estimate_lf_tau_max(op: SwipOperator, iters: int = 20, seed: int = 0) -> float:
    """Leapfrog stability guard: 0.95 * 2 / sqrt(lambda_max(M^-1 A)) with
    lambda_max estimated by power iteration."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(op.n_dofs)
    x /= np.linalg.norm(x)
    mass = op.mass_diagonal()
    lam = 0.0
    for _ in range(iters):
        Ax = op.matrix @ x
        lam = float(np.dot(x, Ax) / np.dot(x, mass * x))  # generalized Rayleigh quotient
        y = Ax / mass
        ny = float(np.linalg.norm(y))
        if ny == 0.0:
            return np.inf
        x = y / ny
    if lam <= 0.0:
        return np.inf
    return 0.95 * 2.0 / np.sqrt(lam)


# -- driver ---------------------------------------------------------------------


def adjust_tau(tau: float, T: float):
    """Largest tau' <= tau with T an integer multiple; warns when it changes."""
    if T <= 0.0:
        return tau, 0
    n = int(np.ceil(T / tau - 1e-9))
    n = max(n, 1)
    tau_adj = T / n
    if abs(tau_adj - tau) > 1e-12 * tau:
        warnings.warn(
            f"tau adjusted from {tau} to {tau_adj} so that T/tau is an integer",
            stacklevel=2,
        )
    return tau_adj, n


def initial_state(op: SwipOperator, data: ProblemData, tau: float) -> State:
    from .dg_space import l2_project

    space, cells = op.space, op.cells
    u0 = l2_project(space, data.u0, cells) if data.u0 else space.zero_field(cells)
    v0 = l2_project(space, data.v0, cells) if data.v0 else space.zero_field(cells)
    return State(u0, v0, 0, tau)


def run(
    method: str,
    op: SwipOperator,
    data: ProblemData,
    tau: float,
    T: float,
    *,
    solver: SolverOptions | None = None,
    snapshot_every: int = 0,
    on_snapshot=None,
    enforce_cfl: bool = True,
) -> State:
    """Run CN or leapfrog from projected initial data to time T."""
    if method not in ("cn", "lf"):
        raise SolverError(f"unknown integrator '{method}'")
    tau, n_steps = adjust_tau(tau, T)
    state = initial_state(op, data, tau)
    if n_steps == 0 or T == 0.0:
        return state

    system = None
    if method == "cn":
        system = CnSystem(op, tau, solver)
    elif enforce_cfl:
        tau_max = estimate_lf_tau_max(op)
        if tau > tau_max:
            raise InstabilityError(
                f"leapfrog tau={tau} exceeds stability estimate {tau_max:.4e}"
            )

    if snapshot_every and on_snapshot:
        on_snapshot(state)
    scale = float(np.max(np.abs(state.u.coeffs))) if state.u.coeffs.size else 0.0
    for _ in range(n_steps):
        if method == "cn":
            state = cn_step(state, op, data, tau, system)
        else:
            state = lf_step(state, op, data, tau, reference_scale=scale)
        if snapshot_every and on_snapshot and state.n % snapshot_every == 0:
            on_snapshot(state)
    return state


# -- discrete energies ------------------------------------------------------------


def cn_energy(op: SwipOperator, state: State) -> float:
    """||v||^2 + a(u, u): the quadratic invariant CN conserves for f = g = 0."""
    u, v = state.u.coeffs, state.v.coeffs
    mass = op.mass_diagonal()
    return float(np.dot(v * mass, v) + np.dot(u, op.matrix @ u))


def lf_shifted_energy(op: SwipOperator, u_n, u_np1, v_half) -> float:
    """||v^{n+1/2}||^2 + a(u^n, u^{n+1}): the leapfrog invariant."""
    mass = op.mass_diagonal()
    return float(np.dot(v_half * mass, v_half) + np.dot(u_n, op.matrix @ u_np1))
