"""Experiment harness: configuration, drivers, error norms, and the CLI.

Configs are TOML files with a fixed key set; analytic data (sources,
boundary traces, initial values, kappa regions) comes from a small closed
vocabulary of named forms, so runs are reproducible from the file alone.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import comms
from .dg_space import (
    BrokenSpace,
    Field,
    build_space,
    cell_center_values,
    l2_norm,
    write_vtk,
)
from .errors import ConfigError, DgSplitError, InstabilityError, SolverError
from .integrators import (
    CnSystem,
    ProblemData,
    SolverOptions,
    State,
    cn_step,
    estimate_lf_tau_max,
    initial_state,
    lf_step,
    run as run_integrator,
    adjust_tau,
)
from .mesh import (
    DIRICHLET,
    Mesh,
    build_layout,
    build_structured_mesh,
    classify_boundary,
    partition_cells,
    read_msh,
    refine_uniform,
    write_msh,
)
from .splitting import SplitState, assemble_global, ds_init, ds_run
from .swip import a_norm, default_eta, global_operator

# Published production-scale agreement between the ds method (4 layers) and
# global CN on 4.9M dofs: recorded as an expectation, never asserted at desk
# scale.
FULL_SCALE_DS4_REL_DIFF_TO_CN = 3.639e-5


# -- the C2 inflow window --------------------------------------------------------


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (10.0 + t * (-15.0 + 6.0 * t))


def window_profile(y):
    """C2 window: 1 on [1, 3], 0 on [0, 0.5] and [3.5, 4], quintic smoothstep
    transitions on [0.5, 1] and [3, 3.5]."""
    y = np.asarray(y, dtype=np.float64)
    rise = _smoothstep((y - 0.5) / 0.5)
    fall = 1.0 - _smoothstep((y - 3.0) / 0.5)
    out = np.where(y < 0.5, 0.0, np.where(y < 1.0, rise, np.where(y <= 3.0, 1.0, np.where(y < 3.5, fall, 0.0))))
    return out if out.shape else float(out)


# -- analytic form vocabulary -----------------------------------------------------


def make_form(spec, name: str):
    """Closed vocabulary of named analytic forms -> callable(x, y, t)."""
    if spec is None:
        return None
    if not isinstance(spec, dict) or "form" not in spec:
        raise ConfigError(f"{name}: expected a table with a 'form' key")
    form = spec["form"]
    if form == "zero":
        return None
    if form == "constant":
        c = float(spec.get("value", 1.0))
        return lambda x, y, t: c * np.ones_like(np.asarray(x, dtype=float))
    if form == "standing_wave":
        a = float(spec.get("amplitude", 1.0))
        kx = float(spec.get("kx", 1.0))
        ky = float(spec.get("ky", 1.0))
        om = np.pi * np.sqrt(kx * kx + ky * ky)
        return lambda x, y, t: a * np.cos(om * t) * np.sin(kx * np.pi * x) * np.sin(ky * np.pi * y)
    if form == "gaussian":
        cx, cy = (float(v) for v in spec.get("center", (0.0, 0.0)))
        w = float(spec.get("width", 1.0))
        a = float(spec.get("amplitude", 1.0))
        return lambda x, y, t: a * np.exp(-w * ((x - cx) ** 2 + (y - cy) ** 2))
    if form == "window_inflow":
        om = float(spec.get("omega", 0.0125))
        a = float(spec.get("amplitude", 1.0))
        return lambda x, y, t: a * np.sin(t / om) * window_profile(y)
    raise ConfigError(f"{name}: unknown form '{form}'")


def _time_slice(fn, t0=0.0):
    if fn is None:
        return None
    return lambda x, y: fn(x, y, t0)


def make_kappa(spec, mesh: Mesh) -> Mesh:
    """Per-cell kappa from a background value and triangle regions."""
    if spec is None:
        return mesh
    background = float(spec.get("background", 1.0))
    values = np.full(mesh.n_cells, background)
    cx = mesh.cell_centroids[:, 0]
    cy = mesh.cell_centroids[:, 1]
    for region in spec.get("regions", []):
        shape = region.get("shape")
        if shape != "triangle":
            raise ConfigError(f"kappa region: unknown shape '{shape}'")
        (x0, y0), (x1, y1), (x2, y2) = (map(float, v) for v in region["vertices"])
        d = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        b0 = ((x1 - cx) * (y2 - cy) - (x2 - cx) * (y1 - cy)) / d
        b1 = ((x2 - cx) * (y0 - cy) - (x0 - cx) * (y2 - cy)) / d
        b2 = 1.0 - b0 - b1
        inside = (b0 >= 0) & (b1 >= 0) & (b2 >= 0)
        values[inside] = float(region["value"])
    return mesh._replace(kappa=values)


def make_boundary_predicate(spec):
    if spec is None or spec == "none":
        return lambda x, y: np.zeros_like(np.asarray(x, dtype=float), dtype=bool)
    if spec == "all":
        return lambda x, y: np.ones_like(np.asarray(x, dtype=float), dtype=bool)
    if isinstance(spec, dict) and "axis" in spec:
        axis = spec["axis"]
        if axis not in ("x", "y"):
            raise ConfigError(f"boundary.dirichlet.axis must be 'x' or 'y', got '{axis}'")
        value = float(spec.get("value", 0.0))
        tol = float(spec.get("tol", 1e-9))
        if axis == "x":
            return lambda x, y: np.abs(x - value) < tol
        return lambda x, y: np.abs(y - value) < tol
    raise ConfigError("boundary.dirichlet: expected 'all', 'none', or {axis, value}")


# -- configuration -----------------------------------------------------------------


@dataclass
class RunConfig:
    mesh_kind: str = "structured"
    nx: int = 16
    ny: int = 16
    extent: tuple = (0.0, 0.0, 1.0, 1.0)
    msh_path: str | None = None
    kappa_by_tag: dict | None = None
    dirichlet_tags: tuple = ()
    degree: int = 1
    eta: float | None = None
    tau: float = 0.01
    final_time: float = 1.0
    method: str = "cn"
    subdomains: int = 1
    layers: int = 2
    workers: int = 1
    seed: int = 0
    solver_tol: float = 1e-10
    solver_maxit: int = 500
    preconditioner: str = "block_jacobi"
    kappa_spec: dict | None = None
    boundary_spec: object = None
    f_spec: dict | None = None
    g_spec: dict | None = None
    u0_spec: dict | None = None
    v0_spec: dict | None = None
    reference_kind: str = "none"
    exact_spec: dict | None = None
    output_dir: str | None = None
    snapshot_every: int = 0

    @property
    def eta_value(self) -> float:
        return self.eta if self.eta is not None else default_eta(self.degree)


_METHODS = ("cn", "lf", "ds")
_PRECONDITIONERS = ("block_jacobi", "ic0", "icc", "none", "identity")
_REFERENCES = ("none", "refined_lf", "exact")


def config_from_dict(raw: dict) -> RunConfig:
    cfg = RunConfig()
    mesh = raw.get("mesh", {})
    cfg.mesh_kind = mesh.get("kind", "structured")
    if cfg.mesh_kind == "structured":
        cfg.nx = int(mesh.get("nx", 16))
        cfg.ny = int(mesh.get("ny", 16))
        cfg.extent = tuple(float(v) for v in mesh.get("extent", (0, 0, 1, 1)))
        if cfg.nx < 1 or cfg.ny < 1:
            raise ConfigError("mesh.nx and mesh.ny must be positive")
        if len(cfg.extent) != 4:
            raise ConfigError("mesh.extent must have four entries")
    elif cfg.mesh_kind == "msh":
        if "path" not in mesh:
            raise ConfigError("mesh.path required for mesh.kind = 'msh'")
        cfg.msh_path = str(mesh["path"])
        cfg.kappa_by_tag = {int(k): float(v) for k, v in mesh.get("kappa_by_tag", {}).items()}
        cfg.dirichlet_tags = tuple(int(t) for t in mesh.get("dirichlet_tags", ()))
    else:
        raise ConfigError(f"mesh.kind must be 'structured' or 'msh', got '{cfg.mesh_kind}'")

    space = raw.get("space", {})
    cfg.degree = int(space.get("degree", 1))
    if cfg.degree < 0:
        raise ConfigError("space.degree must be nonnegative")
    if "eta" in space:
        cfg.eta = float(space["eta"])
        if cfg.eta <= 0:
            raise ConfigError("space.eta must be positive")

    tgrid = raw.get("time", {})
    cfg.tau = float(tgrid.get("tau", cfg.tau))
    cfg.final_time = float(tgrid.get("final", cfg.final_time))
    if cfg.tau <= 0 or cfg.final_time < 0:
        raise ConfigError("time.tau must be positive and time.final nonnegative")

    method = raw.get("method", {})
    cfg.method = method.get("name", "cn")
    if cfg.method not in _METHODS:
        raise ConfigError(f"method.name must be one of {_METHODS}, got '{cfg.method}'")
    cfg.subdomains = int(method.get("subdomains", 1))
    cfg.layers = int(method.get("layers", 2))
    cfg.workers = int(method.get("workers", 1))
    cfg.seed = int(method.get("seed", 0))
    if cfg.method == "ds" and cfg.layers < 1:
        raise ConfigError("method.layers must be >= 1 for method 'ds'")
    if cfg.subdomains < 1:
        raise ConfigError("method.subdomains must be positive")

    solver = raw.get("solver", {})
    cfg.solver_tol = float(solver.get("tol", cfg.solver_tol))
    cfg.solver_maxit = int(solver.get("maxit", cfg.solver_maxit))
    cfg.preconditioner = solver.get("preconditioner", cfg.preconditioner)
    if cfg.preconditioner not in _PRECONDITIONERS:
        raise ConfigError(
            f"solver.preconditioner must be one of {_PRECONDITIONERS}, "
            f"got '{cfg.preconditioner}'"
        )

    cfg.kappa_spec = raw.get("kappa")
    cfg.boundary_spec = raw.get("boundary", {}).get("dirichlet")
    data = raw.get("data", {})
    cfg.f_spec = data.get("f")
    cfg.g_spec = data.get("g")
    cfg.u0_spec = data.get("u0")
    cfg.v0_spec = data.get("v0")

    ref = raw.get("reference", {})
    cfg.reference_kind = ref.get("kind", "none")
    if cfg.reference_kind not in _REFERENCES:
        raise ConfigError(f"reference.kind must be one of {_REFERENCES}")
    cfg.exact_spec = ref.get("exact")
    if cfg.reference_kind == "exact" and cfg.exact_spec is None:
        raise ConfigError("reference.kind = 'exact' requires reference.exact")

    out = raw.get("output", {})
    cfg.output_dir = out.get("directory")
    cfg.snapshot_every = int(out.get("snapshot_every", 0))
    return cfg


def load_config(path) -> RunConfig:
    try:
        import tomllib
    except ImportError:
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error in {path}: {exc}") from exc
    return config_from_dict(raw)


# -- problem construction ------------------------------------------------------------


def build_problem(cfg: RunConfig):
    """Mesh, space, operator, and problem data from a config."""
    t0 = time.perf_counter()
    if cfg.mesh_kind == "structured":
        mesh = build_structured_mesh(cfg.nx, cfg.ny, cfg.extent)
    else:
        mesh = read_msh(cfg.msh_path, cfg.kappa_by_tag, cfg.dirichlet_tags)
    mesh = make_kappa(cfg.kappa_spec, mesh)
    mesh = classify_boundary(mesh, make_boundary_predicate(cfg.boundary_spec))
    mesh_time = time.perf_counter() - t0

    space = build_space(mesh, cfg.degree)
    f = make_form(cfg.f_spec, "data.f")
    g = make_form(cfg.g_spec, "data.g")
    if g is not None and len(mesh.faces_with_label(DIRICHLET)) == 0:
        import warnings

        warnings.warn(
            "data.g is set but no boundary face is labeled Dirichlet; "
            "the trace data will be ignored",
            stacklevel=2,
        )
    problem = ProblemData(
        f=f,
        g=g,
        u0=_time_slice(make_form(cfg.u0_spec, "data.u0")),
        v0=_time_slice(make_form(cfg.v0_spec, "data.v0")),
    )
    return mesh, space, problem, mesh_time


def solver_options(cfg: RunConfig) -> SolverOptions:
    return SolverOptions(
        tol=cfg.solver_tol, maxit=cfg.solver_maxit, preconditioner=cfg.preconditioner
    )


# -- error evaluation -----------------------------------------------------------------


def _field_values_at_quad(field: Field) -> np.ndarray:
    space = field.space
    return field.blocks() @ space.eval_reference_basis(space.volume_rule.points).T


def _locate_in_children(space_f: BrokenSpace, parents: np.ndarray, coarse_cells, points):
    """Child cell of the refined mesh containing each physical point, given
    that points lie in known parent cells (uniform refinement lookup)."""
    nc, nq, _ = points.shape
    cand = (np.asarray(coarse_cells)[:, None] * 4 + np.arange(4)[None, :])  # (nc, 4)
    best = np.full((nc, nq), -1, dtype=np.int64)
    best_score = np.full((nc, nq), -np.inf)
    for j in range(4):
        cells = cand[:, j]
        ref = np.einsum(
            "cij,cqj->cqi",
            space_f.jacobian_inv[cells],
            points - space_f.cell_origin[cells][:, None, :],
        )
        bary = np.stack([1.0 - ref[..., 0] - ref[..., 1], ref[..., 0], ref[..., 1]], axis=-1)
        score = bary.min(axis=-1)
        better = score > best_score
        best[better] = np.broadcast_to(cells[:, None], (nc, nq))[better]
        best_score[better] = score[better]
    return best


def l2_error_vs_refined(candidate: Field, ref: Field, parents: np.ndarray):
    """Relative L2 distance of a coarse-mesh field to a refined-mesh field,
    integrated with the coarse quadrature (children located per parent)."""
    space = candidate.space
    space_f = ref.space
    pts = space.quad_points_physical()
    cand_vals = _field_values_at_quad(candidate)
    child = _locate_in_children(space_f, parents, np.arange(space.mesh.n_cells), pts)
    flat_cells = child.ravel()
    flat_pts = pts.reshape(-1, 2)
    ref_coords = np.einsum(
        "pij,pj->pi",
        space_f.jacobian_inv[flat_cells],
        flat_pts - space_f.cell_origin[flat_cells],
    )
    from .dg_space import _monomial_values

    basis = _monomial_values(space_f.exponents, ref_coords) @ space_f.basis_coeffs
    ref_vals = np.einsum("pm,pm->p", ref.blocks()[flat_cells], basis).reshape(cand_vals.shape)
    w = space.volume_rule.weights[None, :] * space.mass_scale[:, None]
    err = float(np.sqrt(np.sum(w * (cand_vals - ref_vals) ** 2)))
    ref_norm = float(np.sqrt(np.sum(w * ref_vals ** 2)))
    return err, ref_norm


def l2_error_vs_exact(candidate: Field, exact, t: float):
    space = candidate.space
    pts = space.quad_points_physical()
    cand_vals = _field_values_at_quad(candidate)
    exact_vals = np.broadcast_to(
        np.asarray(exact(pts[..., 0], pts[..., 1], t), dtype=np.float64), cand_vals.shape
    )
    w = space.volume_rule.weights[None, :] * space.mass_scale[:, None]
    err = float(np.sqrt(np.sum(w * (cand_vals - exact_vals) ** 2)))
    ref_norm = float(np.sqrt(np.sum(w * exact_vals ** 2)))
    return err, ref_norm


# -- experiment drivers ------------------------------------------------------------------


@dataclass
class ErrorReport:
    rel_l2_u: float | None = None
    reference: str = "none"
    h_max: float = 0.0
    tau: float = 0.0
    n_steps: int = 0
    method: str = ""
    subdomains: int = 1
    layers: int = 0
    mesh_time: float = 0.0
    setup_time: float = 0.0
    step_time: float = 0.0
    total_time: float = 0.0
    iterations_last: int = 0
    extras: dict = field(default_factory=dict)


def _snapshot_writer(cfg, mesh, label, op=None):
    """VTK snapshot writer that also appends scalar diagnostics (norms and,
    when an operator is available, the discrete energy) to a CSV trace."""
    outdir = Path(cfg.output_dir) if cfg.output_dir else None
    if outdir is None or cfg.snapshot_every <= 0:
        return None
    outdir.mkdir(parents=True, exist_ok=True)
    trace = outdir / f"{label}_trace.csv"
    trace.write_text("step,t,l2_u,l2_v,energy\n", encoding="ascii")

    def write(state: State):
        path = outdir / f"{label}_step{state.n:06d}.vtk"
        write_vtk(
            mesh, path,
            {"u": cell_center_values(state.u), "v": cell_center_values(state.v)},
            title=f"{label} t={state.t:.6f}",
        )
        from .integrators import cn_energy

        energy = cn_energy(op, state) if op is not None else float("nan")
        with open(trace, "a", encoding="ascii") as fh:
            fh.write(
                f"{state.n},{state.t!r},{l2_norm(state.u)!r},"
                f"{l2_norm(state.v)!r},{energy!r}\n"
            )

    return write


def run_method(cfg: RunConfig, mesh, space, problem):
    """Run the configured method; returns (final State, setup_time, step_time)."""
    eta = cfg.eta_value
    sol = solver_options(cfg)
    tau, n_steps = adjust_tau(cfg.tau, cfg.final_time) if cfg.final_time > 0 else (cfg.tau, 0)

    t0 = time.perf_counter()
    if cfg.method in ("cn", "lf"):
        op = global_operator(space, eta)
        snapshot = _snapshot_writer(cfg, mesh, cfg.method, op)
        system = CnSystem(op, tau, sol) if cfg.method == "cn" else None
        if cfg.method == "lf" and n_steps > 0:
            tau_max = estimate_lf_tau_max(op)
            if tau > tau_max:
                raise InstabilityError(
                    f"leapfrog tau={tau} exceeds stability estimate {tau_max:.4e}"
                )
        state = initial_state(op, problem, tau)
        setup = time.perf_counter() - t0
        t1 = time.perf_counter()
        if snapshot:
            snapshot(state)
        for _ in range(n_steps):
            state = (
                cn_step(state, op, problem, tau, system)
                if cfg.method == "cn"
                else lf_step(state, op, problem, tau)
            )
            if snapshot and cfg.snapshot_every and state.n % cfg.snapshot_every == 0:
                snapshot(state)
        steps_t = time.perf_counter() - t1
        iters = system.last_report.iterations if (system and system.last_report) else 0
        return state, setup, steps_t, iters, op

    snapshot = _snapshot_writer(cfg, mesh, cfg.method)
    owner = partition_cells(mesh, cfg.subdomains, seed=cfg.seed)
    layout = build_layout(mesh, owner, cfg.layers)
    split = ds_init(mesh, space, layout, problem, eta)
    for ctx in split.contexts.values():
        ctx.ensure_system(tau, sol)
    setup = time.perf_counter() - t0

    t1 = time.perf_counter()
    diag = cfg.output_dir is not None
    if snapshot:
        snapshot(assemble_global(split, space))
    for _ in range(n_steps):
        ds_run(split, tau, 1, problem, workers=cfg.workers, solver=sol,
               collect_diagnostics=diag)
        if snapshot and cfg.snapshot_every and split.n % cfg.snapshot_every == 0:
            snapshot(assemble_global(split, space))
    steps_t = time.perf_counter() - t1
    state = assemble_global(split, space)
    state.tau = tau
    iters = max((c.last_iterations for c in split.contexts.values()), default=0)
    if diag and split.step_diagnostics:
        _write_ds_diagnostics(cfg, split)
    return state, setup, steps_t, iters, None


def _write_ds_diagnostics(cfg, split: SplitState):
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    ids = sorted(split.contexts)
    with open(outdir / "ds_diagnostics.csv", "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + [f"iters_{i}" for i in ids] + ["exchange_bytes", "max_interface_jump"])
        for row in split.step_diagnostics:
            w.writerow(
                [row["step"]]
                + [row["iterations"][i] for i in ids]
                + [row["exchange_bytes"], f"{row['max_interface_jump']:.6e}"]
            )


def compute_reference_error(cfg: RunConfig, mesh, space, problem, state: State):
    """Error of the final u against the configured reference."""
    if cfg.reference_kind == "none":
        return None, "none"
    if cfg.reference_kind == "exact":
        exact = make_form(cfg.exact_spec, "reference.exact")
        err, ref_norm = l2_error_vs_exact(state.u, exact, cfg.final_time)
        return err / ref_norm, "exact"
    fine_mesh, parents = refine_uniform(mesh)
    fine_space = build_space(fine_mesh, cfg.degree)
    fine_op = global_operator(fine_space, cfg.eta_value)
    tau_stable = estimate_lf_tau_max(fine_op)
    tau_ref = min(cfg.tau, tau_stable)
    ref_state = run_integrator(
        "lf", fine_op, problem, tau_ref, cfg.final_time,
        solver=solver_options(cfg), enforce_cfl=True,
    )
    err, ref_norm = l2_error_vs_refined(state.u, ref_state.u, parents)
    return err / ref_norm, f"refined_lf(tau={ref_state.tau:.3e})"


def run_experiment(cfg: RunConfig) -> ErrorReport:
    """Execute one configured run and evaluate it against its reference."""
    total0 = time.perf_counter()
    mesh, space, problem, mesh_time = build_problem(cfg)
    state, setup, steps_t, iters, _ = run_method(cfg, mesh, space, problem)
    rel, ref_desc = compute_reference_error(cfg, mesh, space, problem, state)
    tau, n_steps = adjust_tau(cfg.tau, cfg.final_time) if cfg.final_time > 0 else (cfg.tau, 0)
    report = ErrorReport(
        rel_l2_u=rel,
        reference=ref_desc,
        h_max=mesh.h_max,
        tau=tau,
        n_steps=n_steps,
        method=cfg.method,
        subdomains=cfg.subdomains if cfg.method == "ds" else 1,
        layers=cfg.layers if cfg.method == "ds" else 0,
        mesh_time=mesh_time,
        setup_time=setup,
        step_time=steps_t / max(n_steps, 1),
        total_time=time.perf_counter() - total0,
        iterations_last=iters,
    )
    if cfg.output_dir:
        _write_report_csv(cfg, [report])
    return report


def _write_report_csv(cfg, reports, name="results.csv"):
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / name, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["method", "h_max", "tau", "n_steps", "subdomains", "layers",
             "rel_l2_u", "reference", "iterations_last"]
        )
        for r in reports:
            w.writerow(
                [r.method, repr(r.h_max), repr(r.tau), r.n_steps, r.subdomains,
                 r.layers, "" if r.rel_l2_u is None else repr(r.rel_l2_u),
                 r.reference, r.iterations_last]
            )
    with open(outdir / "timings.csv", "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "mesh_time", "setup_time", "step_time", "total_time"])
        for r in reports:
            w.writerow([r.method, f"{r.mesh_time:.4f}", f"{r.setup_time:.4f}",
                        f"{r.step_time:.6f}", f"{r.total_time:.4f}"])


def compare_to_cn(cfg: RunConfig, layers=None):
    """Run ds (for each overlap width) and global CN on the same mesh and
    time grid; report the relative pair-norm differences at final time."""
    mesh, space, problem, _ = build_problem(cfg)
    eta = cfg.eta_value
    sol = solver_options(cfg)
    tau, n_steps = adjust_tau(cfg.tau, cfg.final_time)

    op = global_operator(space, eta)
    system = CnSystem(op, tau, sol)
    cn_state = initial_state(op, problem, tau)
    for _ in range(n_steps):
        cn_state = cn_step(cn_state, op, problem, tau, system)

    a_cn = a_norm(op, cn_state.u)
    l2_cn = l2_norm(cn_state.v)
    denom = float(np.sqrt(a_cn ** 2 + l2_cn ** 2))

    owner = partition_cells(mesh, cfg.subdomains, seed=cfg.seed)
    rows = []
    for ell in layers or [cfg.layers]:
        layout = build_layout(mesh, owner, ell)
        split = ds_init(mesh, space, layout, problem, eta)
        for _ in range(n_steps):
            ds_run(split, tau, 1, problem, workers=cfg.workers, solver=sol)
        ds_state = assemble_global(split, space)
        du = Field(space, ds_state.u.coeffs - cn_state.u.coeffs)
        dv = Field(space, ds_state.v.coeffs - cn_state.v.coeffs)
        ea = a_norm(op, du)
        el = l2_norm(dv)
        rows.append({
            "layers": ell,
            "diff_a_u": ea,
            "diff_l2_v": el,
            "combined": float(np.sqrt(ea ** 2 + el ** 2)),
            "rel_combined": float(np.sqrt(ea ** 2 + el ** 2)) / denom if denom else np.nan,
        })
    return rows


def converge_in_tau(cfg: RunConfig, taus):
    """Temporal convergence sweep at fixed mesh against the config reference."""
    reports = []
    for tau in taus:
        c = RunConfig(**{**cfg.__dict__, "tau": float(tau), "output_dir": None})
        reports.append(run_experiment(c))
    errors = [r.rel_l2_u for r in reports]
    orders = [
        float(np.log2(errors[i] / errors[i + 1])) if errors[i + 1] else np.nan
        for i in range(len(errors) - 1)
    ]
    return reports, orders


# -- CLI ---------------------------------------------------------------------------


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    for name in ("method", "tau", "layers", "subdomains", "workers", "degree", "seed"):
        val = getattr(args, name, None)
        if name == "layers" and isinstance(val, str):
            continue  # compare consumes its own comma-separated list
        if val is not None:
            setattr(cfg, name, val)
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    if cfg.method not in _METHODS:
        raise ConfigError(f"method must be one of {_METHODS}")
    return cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dgsplit",
        description="DG acoustic wave solver with overlapping domain-splitting time integration",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one configured experiment")
    p_run.add_argument("--config", required=True)
    p_conv = sub.add_parser("converge", help="temporal convergence sweep")
    p_conv.add_argument("--config", required=True)
    p_conv.add_argument("--taus", required=True, help="comma-separated tau values")
    p_cmp = sub.add_parser("compare", help="ds-vs-CN difference for overlap widths")
    p_cmp.add_argument("--config", required=True)
    p_cmp.add_argument("--layers", default=None, help="comma-separated overlap widths")
    for p in (p_run, p_conv, p_cmp):
        p.add_argument("--method", choices=_METHODS)
        p.add_argument("--tau", type=float)
        if p is not p_cmp:
            p.add_argument("--layers", type=int)
        p.add_argument("--subdomains", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--degree", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=str)

    p_sched = sub.add_parser("schedule", help="print a communication schedule for a graph file")
    p_sched.add_argument("--graph", required=True, help="edge list file: 'i j weight' lines")
    p_sched.add_argument("--out", type=str)

    p_mesh = sub.add_parser("mesh", help="generate or inspect a mesh")
    p_mesh.add_argument("--nx", type=int)
    p_mesh.add_argument("--ny", type=int)
    p_mesh.add_argument("--extent", type=str, default="0,0,1,1")
    p_mesh.add_argument("--out", type=str, help="write MSH file")
    p_mesh.add_argument("--info", type=str, help="read and summarize an MSH file")

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3
    except InstabilityError as exc:
        print(f"instability: {exc}", file=sys.stderr)
        return 4
    except DgSplitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    if args.command == "run":
        cfg = _apply_overrides(load_config(args.config), args)
        report = run_experiment(cfg)
        print(
            f"method={report.method} h_max={report.h_max:.4e} tau={report.tau:.4e} "
            f"steps={report.n_steps} layers={report.layers}"
        )
        if report.rel_l2_u is not None:
            print(f"rel L2 error (u) vs {report.reference}: {report.rel_l2_u:.6e}")
        print(
            f"timings: mesh {report.mesh_time:.2f}s setup {report.setup_time:.2f}s "
            f"per-step {report.step_time * 1e3:.2f}ms total {report.total_time:.2f}s"
        )
        return 0

    if args.command == "converge":
        cfg = _apply_overrides(load_config(args.config), args)
        taus = [float(t) for t in args.taus.split(",")]
        reports, orders = converge_in_tau(cfg, taus)
        print("tau, rel_l2_u")
        for r in reports:
            print(f"{r.tau:.6e}, {r.rel_l2_u:.6e}")
        print("observed orders:", ", ".join(f"{o:.2f}" for o in orders))
        return 0

    if args.command == "compare":
        cfg = _apply_overrides(load_config(args.config), args)
        layers = [int(v) for v in args.layers.split(",")] if args.layers else None
        rows = compare_to_cn(cfg, layers)
        print("layers, ||u_ds-u_cn||_a, ||v_ds-v_cn||_L2, combined, rel_combined")
        for row in rows:
            print(
                f"{row['layers']}, {row['diff_a_u']:.6e}, {row['diff_l2_v']:.6e}, "
                f"{row['combined']:.6e}, {row['rel_combined']:.6e}"
            )
        print(f"(production-scale ds4-vs-CN expectation: {FULL_SCALE_DS4_REL_DIFF_TO_CN:.3e})")
        return 0

    if args.command == "schedule":
        with open(args.graph, "r", encoding="ascii") as fh:
            graph = comms.parse_graph_file(fh.read())
        schedule = comms.greedy_schedule(graph)
        text = comms.format_schedule(schedule)
        if args.out:
            Path(args.out).write_text(text, encoding="ascii")
        print(text, end="")
        return 0

    if args.command == "mesh":
        if args.info:
            mesh = read_msh(args.info)
            print(
                f"{mesh.n_vertices} vertices, {mesh.n_cells} cells, "
                f"{mesh.n_faces} faces ({len(mesh.boundary_faces)} boundary), "
                f"h_max={mesh.h_max:.4e}, kappa in [{mesh.kappa.min()}, {mesh.kappa.max()}]"
            )
            return 0
        if args.nx and args.ny:
            extent = tuple(float(v) for v in args.extent.split(","))
            mesh = build_structured_mesh(args.nx, args.ny, extent)
            if args.out:
                write_msh(mesh, args.out)
                print(f"wrote {args.out}: {mesh.n_cells} cells")
            else:
                print(f"{mesh.n_cells} cells, {mesh.n_faces} faces")
            return 0
        raise ConfigError("mesh: need --info or both --nx and --ny")

    raise ConfigError(f"unknown command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
