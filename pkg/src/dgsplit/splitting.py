"""Non-iterative overlapping domain-splitting time integrator.

One time step per subdomain: an explicit leapfrog prediction on the strip of
cells around the subdomain interface, a local Crank-Nicolson step on the
overlapped subdomain with the predicted interface trace imposed weakly, and
a scheduled owner-value exchange across the overlaps. No Schwarz iteration,
no averaging: after the exchange every copy of a cell holds the values
computed by its unique owner.

With a single subdomain the interface machinery is empty and the step
reduces bit-exactly to the global Crank-Nicolson integrator.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .comms import (
    CommSchedule,
    PairPayload,
    build_comm_graph,
    greedy_schedule,
    run_exchange,
)
from .dg_space import BrokenSpace, Field, l2_project
from .errors import InstabilityError, LayoutError, SolverError
from .integrators import (
    CnSystem,
    ProblemData,
    SolverOptions,
    State,
    cn_advance,
    dirichlet_load,
    lf_half_step,
    source_load,
)
from .mesh import (
    DIRICHLET,
    Mesh,
    SubdomainLayout,
    cellset_domain_boundary_faces,
    cellset_interior_faces,
)
from .swip import (
    BoundaryTerm,
    assemble_swip,
    boundary_term,
    jump_trace_max,
    weighted_average_trace,
)


def _block_dofs(cell_positions, m: int) -> np.ndarray:
    cell_positions = np.asarray(cell_positions, dtype=np.int64)
    return (cell_positions[:, None] * m + np.arange(m)[None, :]).ravel()


class SubdomainContext:
    """Per-subdomain operators, prefactored CN system, and local states.

    Holds the overlapped operator (interface faces assembled as penalized
    one-sided faces), the prediction operator (strip-boundary faces interior
    to the domain omitted), and (u, v) coefficient arrays on both cell sets.
    """

    def __init__(self, sid: int, space: BrokenSpace, layout: SubdomainLayout, eta: float):
        mesh = space.mesh
        self.sid = sid
        self.space = space
        self.cells_ov = layout.overlapped[sid]
        self.cells_pred = layout.prediction[sid]
        self.cells_owned = layout.owned[sid]
        self.interface_faces = np.sort(layout.interfaces[sid])
        self.dirichlet_faces_ov = np.sort(layout.interface_dirichlet[sid])

        dlike = np.sort(np.concatenate([self.dirichlet_faces_ov, self.interface_faces]))
        self.op_ov = assemble_swip(
            space, self.cells_ov, cellset_interior_faces(mesh, self.cells_ov), dlike, eta
        )
        if len(self.cells_pred):
            self.dirichlet_faces_pred = cellset_domain_boundary_faces(
                mesh, self.cells_pred, DIRICHLET
            )
            self.op_pred = assemble_swip(
                space,
                self.cells_pred,
                cellset_interior_faces(mesh, self.cells_pred),
                self.dirichlet_faces_pred,
                eta,
            )
        else:
            self.dirichlet_faces_pred = np.empty(0, dtype=np.int64)
            self.op_pred = None

        m = space.dofs_per_cell
        self.u_ov = np.zeros(len(self.cells_ov) * m)
        self.v_ov = np.zeros(len(self.cells_ov) * m)
        self.u_pred = np.zeros(len(self.cells_pred) * m)
        self.v_pred = np.zeros(len(self.cells_pred) * m)

        # owner rows of this context (exchange packing, global assembly)
        own_pos = self.cells_ov.positions(self.cells_owned.indices)
        self.owned_dofs_ov = _block_dofs(own_pos, m)
        self.owned_dofs_global = _block_dofs(self.cells_owned.indices, m)
        # self-refresh: owned cells appearing in the prediction strip
        own_in_pred = self.cells_pred.intersect(self.cells_owned)
        self.self_src = _block_dofs(self.cells_ov.positions(own_in_pred.indices), m)
        self.self_dst = _block_dofs(self.cells_pred.positions(own_in_pred.indices), m)

        self.cn: CnSystem | None = None
        self.last_iterations = 0

    def state_arrays(self) -> dict:
        return {
            "u_ov": self.u_ov, "v_ov": self.v_ov,
            "u_pred": self.u_pred, "v_pred": self.v_pred,
        }

    def ensure_system(self, tau: float, solver: SolverOptions):
        if self.cn is None or self.cn.tau != tau:
            self.cn = CnSystem(self.op_ov, tau, solver)

    def self_refresh(self):
        self.u_pred[self.self_dst] = self.u_ov[self.self_src]
        self.v_pred[self.self_dst] = self.v_ov[self.self_src]

    def field_ov(self, component: str = "u") -> Field:
        arr = self.u_ov if component == "u" else self.v_ov
        return Field(self.space, arr, self.cells_ov)

    def field_pred(self, component: str = "u") -> Field:
        arr = self.u_pred if component == "u" else self.v_pred
        return Field(self.space, arr, self.cells_pred)


@dataclass
class SplitState:
    """All subdomain contexts plus the exchange wiring for one split run."""

    space: BrokenSpace
    layout: SubdomainLayout
    contexts: dict
    schedule: CommSchedule
    payloads: dict
    n: int = 0
    tau: float = 0.0
    exchange_log: list = field(default_factory=list)
    step_diagnostics: list = field(default_factory=list)

    @property
    def t(self) -> float:
        return self.n * self.tau

    def states_view(self) -> dict:
        return {i: ctx.state_arrays() for i, ctx in self.contexts.items()}


def ds_init(
    mesh: Mesh,
    space: BrokenSpace,
    layout: SubdomainLayout,
    problem: ProblemData,
    eta: float,
    schedule: CommSchedule | None = None,
) -> SplitState:
    """Build contexts, project initial data locally, and wire the exchange."""
    if space.mesh is not mesh:
        raise LayoutError("space was built on a different mesh")
    contexts = {i: SubdomainContext(i, space, layout, eta) for i in layout.ids}
    for ctx in contexts.values():
        if problem.u0 is not None:
            ctx.u_ov[:] = l2_project(space, problem.u0, ctx.cells_ov).coeffs
            if len(ctx.cells_pred):
                ctx.u_pred[:] = l2_project(space, problem.u0, ctx.cells_pred).coeffs
        if problem.v0 is not None:
            ctx.v_ov[:] = l2_project(space, problem.v0, ctx.cells_ov).coeffs
            if len(ctx.cells_pred):
                ctx.v_pred[:] = l2_project(space, problem.v0, ctx.cells_pred).coeffs

    if schedule is None:
        schedule = greedy_schedule(build_comm_graph(layout, space))
    payloads = _build_payloads(space, layout, contexts)
    return SplitState(
        space=space, layout=layout, contexts=contexts,
        schedule=schedule, payloads=payloads,
    )


def set_global_state(split: SplitState, u: np.ndarray, v: np.ndarray, n: int = 0):
    """Load a global coefficient pair into every context by block restriction."""
    m = split.space.dofs_per_cell
    for ctx in split.contexts.values():
        rows = _block_dofs(ctx.cells_ov.indices, m)
        ctx.u_ov[:] = u[rows]
        ctx.v_ov[:] = v[rows]
        if len(ctx.cells_pred):
            rows = _block_dofs(ctx.cells_pred.indices, m)
            ctx.u_pred[:] = u[rows]
            ctx.v_pred[:] = v[rows]
    split.n = n


def _build_payloads(space, layout, contexts) -> dict:
    """Directed descriptors: owner src ships its values for every cell the
    destination context holds (overlap or prediction strip) but does not own."""
    m = space.dofs_per_cell
    payloads = {}
    for (a, b) in sorted(layout.pairwise):
        for dst, src in ((a, b), (b, a)):
            ctx_dst = contexts[dst]
            ctx_src = contexts[src]
            need = ctx_dst.cells_ov.union(ctx_dst.cells_pred).intersect(ctx_src.cells_owned)
            pack = _block_dofs(ctx_src.cells_ov.positions(need.indices), m)
            unpack = []
            in_ov = need.intersect(ctx_dst.cells_ov)
            if len(in_ov):
                rows = _block_dofs(need.positions(in_ov.indices), m)
                target = _block_dofs(ctx_dst.cells_ov.positions(in_ov.indices), m)
                unpack.append(("ov", rows, target))
            in_pred = need.intersect(ctx_dst.cells_pred)
            if len(in_pred):
                rows = _block_dofs(need.positions(in_pred.indices), m)
                target = _block_dofs(ctx_dst.cells_pred.positions(in_pred.indices), m)
                unpack.append(("pred", rows, target))
            payloads[src, dst] = PairPayload(src=src, dst=dst, pack_idx=pack, unpack=unpack)
    return payloads


# -- one step -----------------------------------------------------------------------


def predict(ctx: SubdomainContext, tau: float, problem: ProblemData, t: float) -> np.ndarray:
    """Leapfrog prediction of u at t + tau on the interface strip."""
    op = ctx.op_pred
    vh = lf_half_step(
        op, ctx.u_pred, ctx.v_pred, tau,
        source_load(op, problem.f, t),
        dirichlet_load(op, problem.g, t, faces=ctx.dirichlet_faces_pred),
    )
    u_star = ctx.u_pred + tau * vh
    peak = float(np.max(np.abs(u_star))) if len(u_star) else 0.0
    scale = max(1.0, float(np.max(np.abs(ctx.u_pred))) if len(ctx.u_pred) else 0.0)
    if not np.isfinite(peak) or peak > 1e6 * scale:
        raise InstabilityError(
            f"subdomain {ctx.sid}: prediction amplified the state to {peak:.3e}"
        )
    return u_star


def interface_data(
    ctx: SubdomainContext,
    u_star: np.ndarray | None,
    tau: float,
    problem: ProblemData,
    t: float,
) -> BoundaryTerm:
    """Combined weak data term for the local CN step: (tau/2) times the
    interface traces (predicted and current, kappa-weighted averages) plus
    the Dirichlet data at both time levels."""
    terms = []
    has_iface = len(ctx.interface_faces) > 0
    if has_iface:
        star_avg = weighted_average_trace(
            Field(ctx.space, u_star, ctx.cells_pred), ctx.interface_faces
        )
        terms.append(
            boundary_term(
                ctx.space, ctx.interface_faces, star_avg,
                eta=ctx.op_ov.eta, cells=ctx.cells_ov,
            )
        )
    if problem.g is not None and len(ctx.dirichlet_faces_ov):
        terms.append(
            dirichlet_load(ctx.op_ov, problem.g, t + tau, faces=ctx.dirichlet_faces_ov)
        )
    if has_iface:
        prev_avg = weighted_average_trace(ctx.field_pred("u"), ctx.interface_faces)
        terms.append(
            boundary_term(
                ctx.space, ctx.interface_faces, prev_avg,
                eta=ctx.op_ov.eta, cells=ctx.cells_ov,
            )
        )
    if problem.g is not None and len(ctx.dirichlet_faces_ov):
        terms.append(dirichlet_load(ctx.op_ov, problem.g, t, faces=ctx.dirichlet_faces_ov))

    if not terms:
        return BoundaryTerm(np.empty(0, dtype=np.int64), None, "empty")
    acc = terms[0]
    for b in terms[1:]:
        acc = acc + b
    vector = (0.5 * tau) * acc
    return BoundaryTerm(ctx.interface_faces, vector, f"subdomain {ctx.sid} combined data")


def local_cn(
    ctx: SubdomainContext,
    gterm: BoundaryTerm,
    tau: float,
    problem: ProblemData,
    t: float,
):
    """Crank-Nicolson step on the overlapped subdomain with weak data."""
    f_new = source_load(ctx.op_ov, problem.f, t + tau)
    f_old = source_load(ctx.op_ov, problem.f, t)
    load_pair = None if f_new is None else f_new + f_old
    try:
        u_new, v_new = cn_advance(ctx.cn, ctx.u_ov, ctx.v_ov, load_pair, gterm.vector)
    except SolverError as exc:
        raise SolverError(f"subdomain {ctx.sid}: {exc}") from exc
    ctx.last_iterations = ctx.cn.last_report.iterations
    return u_new, v_new


def _advance_context(ctx, tau, problem, t):
    u_star = predict(ctx, tau, problem, t) if ctx.op_pred is not None else None
    gterm = interface_data(ctx, u_star, tau, problem, t)
    u_new, v_new = local_cn(ctx, gterm, tau, problem, t)
    ctx.u_ov[:] = u_new
    ctx.v_ov[:] = v_new
    ctx.self_refresh()


def ds_step(
    split: SplitState,
    layout: SubdomainLayout,
    schedule: CommSchedule,
    tau: float,
    problem: ProblemData,
    workers: int = 1,
    solver: SolverOptions | None = None,
    check_consistency: bool = False,
) -> SplitState:
    """One full splitting step: per-subdomain predict + local CN (independent,
    parallelizable), then the scheduled overlap exchange."""
    if layout is not split.layout:
        raise LayoutError("layout does not match the split state")
    solver = solver or SolverOptions()
    t = split.n * tau
    split.tau = tau
    contexts = [split.contexts[i] for i in sorted(split.contexts)]
    for ctx in contexts:
        ctx.ensure_system(tau, solver)

    if workers <= 1:
        for ctx in contexts:
            _advance_context(ctx, tau, problem, t)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda c: _advance_context(c, tau, problem, t), contexts))

    run_exchange(
        split.states_view(), schedule, split.payloads,
        workers=workers, log=split.exchange_log,
    )
    split.n += 1
    if check_consistency:
        assert_post_exchange_consistency(split)
    return split


def exchange(split: SplitState, layout: SubdomainLayout, schedule: CommSchedule,
             workers: int = 1) -> SplitState:
    """Owner-gather across all contexts: refresh every non-owned copy from its
    owner and every prediction strip from the owner values."""
    if layout is not split.layout:
        raise LayoutError("layout does not match the split state")
    for i in sorted(split.contexts):
        split.contexts[i].self_refresh()
    run_exchange(
        split.states_view(), schedule, split.payloads,
        workers=workers, log=split.exchange_log,
    )
    return split


def assemble_global(split: SplitState, space: BrokenSpace) -> State:
    """Global state gathered from owner values; no averaging anywhere."""
    u = np.zeros(space.n_dofs)
    v = np.zeros(space.n_dofs)
    for i in sorted(split.contexts):
        ctx = split.contexts[i]
        u[ctx.owned_dofs_global] = ctx.u_ov[ctx.owned_dofs_ov]
        v[ctx.owned_dofs_global] = ctx.v_ov[ctx.owned_dofs_ov]
    return State(Field(space, u), Field(space, v), split.n, split.tau)


def _assemble_by_summation(split: SplitState, space: BrokenSpace) -> State:
    """Sum of owner restrictions (reference implementation for testing)."""
    u = np.zeros(space.n_dofs)
    v = np.zeros(space.n_dofs)
    for i in sorted(split.contexts):
        ctx = split.contexts[i]
        uu = np.zeros(space.n_dofs)
        vv = np.zeros(space.n_dofs)
        uu[ctx.owned_dofs_global] = ctx.u_ov[ctx.owned_dofs_ov]
        vv[ctx.owned_dofs_global] = ctx.v_ov[ctx.owned_dofs_ov]
        u += uu
        v += vv
    return State(Field(space, u), Field(space, v), split.n, split.tau)


def assert_post_exchange_consistency(split: SplitState):
    """Every copy of every cell must hold its owner's values (debug scan)."""
    space = split.space
    ref = assemble_global(split, space)
    m = space.dofs_per_cell
    for i, ctx in split.contexts.items():
        for cells, u_arr, v_arr in (
            (ctx.cells_ov, ctx.u_ov, ctx.v_ov),
            (ctx.cells_pred, ctx.u_pred, ctx.v_pred),
        ):
            if len(cells) == 0:
                continue
            rows = _block_dofs(cells.indices, m)
            if not (
                np.array_equal(u_arr, ref.u.coeffs[rows])
                and np.array_equal(v_arr, ref.v.coeffs[rows])
            ):
                raise LayoutError(
                    f"post-exchange inconsistency in subdomain {i} "
                    "(incomplete exchange schedule?)"
                )


def ds_run(
    split: SplitState,
    tau: float,
    n_steps: int,
    problem: ProblemData,
    workers: int = 1,
    solver: SolverOptions | None = None,
    collect_diagnostics: bool = False,
) -> SplitState:
    """Advance the split state n_steps; optionally record per-step diagnostics
    (solver iterations per subdomain, exchange bytes, max interface jump)."""
    for _ in range(n_steps):
        bytes_before = sum(r.n_bytes for r in split.exchange_log)
        ds_step(split, split.layout, split.schedule, tau, problem,
                workers=workers, solver=solver)
        if collect_diagnostics:
            state = assemble_global(split, split.space)
            all_faces = np.unique(np.concatenate(
                [split.contexts[i].interface_faces for i in split.contexts]
            )) if any(len(c.interface_faces) for c in split.contexts.values()) else np.empty(0, int)
            split.step_diagnostics.append({
                "step": split.n,
                "iterations": {i: split.contexts[i].last_iterations for i in split.contexts},
                "exchange_bytes": sum(r.n_bytes for r in split.exchange_log) - bytes_before,
                "max_interface_jump": jump_trace_max(state.u, all_faces),
            })
    return split
