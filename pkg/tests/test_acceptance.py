"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line with its measured quantities. Tolerances are fixed here, not
calibrated at runtime.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
report lines.
"""

import math
import time
import warnings

import numpy as np
import pytest

from dgsplit import comms as C
from dgsplit import dg_space as D
from dgsplit import harness as H
from dgsplit import integrators as I
from dgsplit import mesh as M
from dgsplit import splitting as SP
from dgsplit import swip as S

from conftest import all_dirichlet, standing_mode


def _report(num, description, passed, detail=""):
    tag = "PASS" if passed else "FAIL"
    print(f"\nACCEPTANCE {num:2d} {tag}: {description}" + (f"  [{detail}]" if detail else ""))
    assert passed, f"criterion {num}: {description} -- {detail}"


def test_criterion_01_scheduler_golden():
    """Greedy scheduler reproduces the published six-subdomain round listing."""
    t0 = time.time()
    edges = tuple(sorted([
        (3, 5, 130), (2, 4, 90), (1, 3, 120), (4, 6, 85), (3, 4, 100),
        (5, 6, 110), (1, 2, 100), (4, 5, 20), (2, 3, 15), (1, 4, 10), (3, 6, 10),
    ]))
    schedule = C.greedy_schedule(C.CommGraph(6, edges))
    expected = [
        {(3, 5, 130), (2, 4, 90)},
        {(1, 3, 120), (4, 6, 85)},
        {(3, 4, 100), (5, 6, 110), (1, 2, 100)},
        {(4, 5, 20), (2, 3, 15)},
        {(1, 4, 10), (3, 6, 10)},
    ]
    got = [set(r) for r in schedule.rounds]
    elapsed = time.time() - t0
    _report(1, "scheduler reproduces the published five rounds exactly",
            got == expected and elapsed < 1.0, f"{len(got)} rounds, {elapsed:.2f}s")


def test_criterion_02_single_subdomain_degeneracy():
    """ds with one subdomain equals global CN within 10x solver tolerance."""
    mesh = M.build_structured_mesh(8, 8)
    kappa = np.where(mesh.cell_centroids[:, 0] < 0.5, 1.0, 1.5)
    mesh = M.classify_boundary(mesh._replace(kappa=kappa), lambda x, y: x < 1e-12)
    sp = D.build_space(mesh, 2)
    eta = S.default_eta(2)
    prob = I.ProblemData(
        f=lambda x, y, t: np.sin(np.pi * x) * np.cos(3 * t),
        g=lambda x, y, t: np.sin(5 * t) * y * (1 - y),
        u0=lambda x, y: np.exp(-10 * ((x - 0.5) ** 2 + (y - 0.5) ** 2)),
    )
    tol = 1e-11
    tau, n_steps = 0.01, 30
    sol = I.SolverOptions(tol=tol)

    op = S.global_operator(sp, eta)
    st = I.initial_state(op, prob, tau)
    system = I.CnSystem(op, tau, sol)
    for _ in range(n_steps):
        st = I.cn_step(st, op, prob, tau, system)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lay = M.build_layout(mesh, np.ones(mesh.n_cells, dtype=np.int64), 2)
    split = SP.ds_init(mesh, sp, lay, prob, eta)
    for _ in range(n_steps):
        SP.ds_step(split, lay, split.schedule, tau, prob, solver=sol)
    g = SP.assemble_global(split, sp)

    du = D.l2_norm(D.Field(sp, g.u.coeffs - st.u.coeffs)) / max(D.l2_norm(st.u), 1e-30)
    dv = D.l2_norm(D.Field(sp, g.v.coeffs - st.v.coeffs)) / max(D.l2_norm(st.v), 1e-30)
    _report(2, "single-subdomain split degenerates to global CN",
            du <= 10 * tol and dv <= 10 * tol, f"rel diffs u {du:.2e}, v {dv:.2e}")


@pytest.mark.parametrize("k", [1, 2])
def test_criterion_03_prediction_locality(k):
    """Prediction equals one global leapfrog step beside every interface."""
    mesh = M.classify_boundary(M.build_structured_mesh(16, 16), lambda x, y: x < 1e-12)
    sp = D.build_space(mesh, k)
    eta = S.default_eta(k)
    prob = I.ProblemData(
        f=lambda x, y, t: np.sin(np.pi * x) * np.cos(3 * t),
        g=lambda x, y, t: np.sin(5 * t) * y * (1 - y),
        u0=lambda x, y: np.exp(-10 * ((x - 0.4) ** 2 + (y - 0.6) ** 2)),
    )
    owner = M.partition_cells(mesh, 4, seed=3)
    lay = M.build_layout(mesh, owner, 2)
    op = S.global_operator(sp, eta)
    split = SP.ds_init(mesh, sp, lay, prob, eta)
    tau = 0.004
    m = sp.dofs_per_cell
    worst = 0.0
    for _ in range(3):
        gs = SP.assemble_global(split, sp)
        lf = I.lf_step(I.State(gs.u, gs.v, split.n, tau), op, prob, tau)
        t = split.n * tau
        for ctx in split.contexts.values():
            u_star = SP.predict(ctx, tau, prob, t)
            adjacent = np.unique(mesh.face_cells[ctx.interface_faces].ravel())
            rows = SP._block_dofs(ctx.cells_pred.positions(adjacent), m)
            grows = SP._block_dofs(adjacent, m)
            worst = max(worst, float(np.abs(u_star[rows] - lf.u.coeffs[grows]).max()))
        SP.ds_step(split, lay, split.schedule, tau, prob,
                   solver=I.SolverOptions(tol=1e-12))
    _report(3, f"prediction locality, k={k}", worst <= 1e-12,
            f"max coefficient difference {worst:.2e}")


def test_criterion_04_temporal_order_two():
    """CN, LF, and the 4-subdomain split are second order in time."""
    mesh = M.classify_boundary(M.build_structured_mesh(16, 16, (0, 0, 4, 4)), all_dirichlet)
    sp = D.build_space(mesh, 1)
    eta = 12.0  # keeps the explicit method stable at tau = 1/40 on this mesh
    op = S.assemble_swip(sp, None, mesh.interior_faces,
                         mesh.faces_with_label(M.DIRICHLET), eta)
    omega, phi = standing_mode(op)
    assert I.estimate_lf_tau_max(op) > 1 / 40

    owner = M.partition_cells(mesh, 4, seed=0)
    lay = M.build_layout(mesh, owner, 4)
    data = I.ProblemData()
    sol = I.SolverOptions(tol=1e-12)
    T = 1.0
    taus = (1 / 40, 1 / 80, 1 / 160)
    results = {}
    for name in ("cn", "lf", "ds"):
        errs = []
        for tau in taus:
            n = round(T / tau)
            if name == "ds":
                split = SP.ds_init(mesh, sp, lay, data, eta)
                SP.set_global_state(split, phi.copy(), np.zeros_like(phi))
                for _ in range(n):
                    SP.ds_step(split, lay, split.schedule, tau, data, solver=sol)
                u = SP.assemble_global(split, sp).u.coeffs
            else:
                st = I.State(D.Field(sp, phi.copy()), sp.zero_field(), 0, tau)
                system = I.CnSystem(op, tau, sol) if name == "cn" else None
                for _ in range(n):
                    st = (I.cn_step(st, op, data, tau, system) if name == "cn"
                          else I.lf_step(st, op, data, tau))
                u = st.u.coeffs
            exact = np.cos(omega * T) * phi
            errs.append(D.l2_norm(D.Field(sp, u - exact)) / D.l2_norm(D.Field(sp, exact)))
        results[name] = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
    ok = all(1.8 <= o <= 2.2 for orders in results.values() for o in orders)
    detail = ", ".join(f"{k}: {['%.2f' % o for o in v]}" for k, v in results.items())
    _report(4, "temporal order two for cn, lf, ds", ok, detail)


@pytest.mark.parametrize("k", [1, 2])
def test_criterion_05_spatial_accuracy(k):
    """L2 convergence order at least k + 0.7 under mesh refinement."""
    exact = lambda x, y, t: np.cos(np.sqrt(2) * np.pi * t) * np.sin(np.pi * x) * np.sin(np.pi * y)
    data = I.ProblemData(u0=lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y))
    T = 0.2
    errs = []
    for n in (8, 16, 32):
        mesh = M.classify_boundary(M.build_structured_mesh(n, n), all_dirichlet)
        sp = D.build_space(mesh, k)
        op = S.global_operator(sp, S.default_eta(k))
        tau = min(0.25 * I.estimate_lf_tau_max(op), 2e-3)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            st = I.run("lf", op, data, tau, T)
        err, ref = H.l2_error_vs_exact(st.u, exact, T)
        errs.append(err / ref)
    orders = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
    ok = all(o >= k + 0.7 for o in orders)
    _report(5, f"spatial order >= {k + 0.7} for k={k}", ok,
            f"orders {['%.2f' % o for o in orders]}")


def test_criterion_06_energy_conservation():
    """CN energy and leapfrog shifted energy constant over 1000 steps."""
    mesh = M.classify_boundary(M.build_structured_mesh(8, 8), all_dirichlet)
    sp = D.build_space(mesh, 2)
    op = S.global_operator(sp, S.default_eta(2))
    data = I.ProblemData(u0=lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y))

    tau_cn = 0.01
    system = I.CnSystem(op, tau_cn, I.SolverOptions(tol=1e-13, maxit=500))
    st = I.initial_state(op, data, tau_cn)
    e0 = I.cn_energy(op, st)
    cn_drift = 0.0
    for _ in range(1000):
        st = I.cn_step(st, op, I.ProblemData(), tau_cn, system)
        cn_drift = max(cn_drift, abs(I.cn_energy(op, st) - e0))

    tau_lf = 0.8 * I.estimate_lf_tau_max(op)
    st = I.initial_state(op, data, tau_lf)
    lf_drift, e_ref = 0.0, None
    for _ in range(1000):
        new, vh = I.lf_step(st, op, I.ProblemData(), tau_lf, return_half=True)
        e = I.lf_shifted_energy(op, st.u.coeffs, new.u.coeffs, vh)
        if e_ref is None:
            e_ref = e
        lf_drift = max(lf_drift, abs(e - e_ref))
        st = new
    ok = cn_drift <= 1e-10 * e0 and lf_drift <= 1e-10 * abs(e_ref)
    _report(6, "discrete energies constant to 1e-10 over 1000 steps", ok,
            f"CN drift {cn_drift / e0:.2e}, LF drift {lf_drift / abs(e_ref):.2e}")


def test_criterion_07_overlap_trend_and_accuracy():
    """Desk-scale prism: ds-vs-CN difference nonincreasing in the overlap
    width, and ds accuracy within 2% of CN against a refined reference."""
    cfg = H.load_config("configs/prism_desk.toml")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        mesh, space, problem, _ = H.build_problem(cfg)
    assert mesh.n_cells <= 20_000
    eta = cfg.eta_value
    sol = I.SolverOptions(tol=1e-12)
    tau, T = 0.002, 1.0
    n_steps = round(T / tau)

    op = S.global_operator(space, eta)
    system = I.CnSystem(op, tau, sol)
    cn = I.initial_state(op, problem, tau)
    for _ in range(n_steps):
        cn = I.cn_step(cn, op, problem, tau, system)

    owner = M.partition_cells(mesh, 4, seed=0)
    diffs, states = {}, {}
    for ell in (2, 4, 8):
        lay = M.build_layout(mesh, owner, ell)
        split = SP.ds_init(mesh, space, lay, problem, eta)
        for _ in range(n_steps):
            SP.ds_step(split, lay, split.schedule, tau, problem, solver=sol)
        g = SP.assemble_global(split, space)
        states[ell] = g
        ea = S.a_norm(op, D.Field(space, g.u.coeffs - cn.u.coeffs))
        el = D.l2_norm(D.Field(space, g.v.coeffs - cn.v.coeffs))
        diffs[ell] = float(np.sqrt(ea ** 2 + el ** 2))
    monotone = diffs[2] >= diffs[4] >= diffs[8]

    fine, parents = M.refine_uniform(mesh)
    fine_op = S.global_operator(D.build_space(fine, cfg.degree), eta)
    tau_ref = min(tau, I.estimate_lf_tau_max(fine_op))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ref = I.run("lf", fine_op, problem, tau_ref, T)
    e_cn, nrm = H.l2_error_vs_refined(cn.u, ref.u, parents)
    within = {}
    for ell, g in states.items():
        e_ds, _ = H.l2_error_vs_refined(g.u, ref.u, parents)
        within[ell] = abs(e_ds - e_cn) / e_cn
    ok = monotone and all(v <= 0.02 for v in within.values())
    _report(
        7, "overlap trend nonincreasing and ds accuracy within 2% of CN", ok,
        f"diffs {[f'{diffs[l]:.2e}' for l in (2, 4, 8)]}, "
        f"rel-error gaps {[f'{within[l]:.1e}' for l in (2, 4, 8)]}, "
        f"CN rel err {e_cn / nrm:.3e}",
    )


def test_criterion_08_worker_determinism():
    """Identical final coefficients for 1 and 4 exchange workers."""
    mesh = M.build_structured_mesh(32, 16, (0, 0, 8, 4))
    kappa_spec = {
        "background": 150.0,
        "regions": [{"shape": "triangle", "vertices": [[3, 1], [5, 1], [4, 3]], "value": 100.0}],
    }
    mesh = H.make_kappa(kappa_spec, mesh)
    mesh = M.classify_boundary(mesh, lambda x, y: x < 1e-12)
    sp = D.build_space(mesh, 2)
    eta = S.default_eta(2)
    prob = I.ProblemData(g=H.make_form({"form": "window_inflow", "omega": 0.0125}, "g"))
    owner = M.partition_cells(mesh, 4, seed=0)
    sol = I.SolverOptions(tol=1e-12)
    results = []
    for workers in (1, 4):
        lay = M.build_layout(mesh, owner, 2)
        split = SP.ds_init(mesh, sp, lay, prob, eta)
        for _ in range(50):
            SP.ds_step(split, lay, split.schedule, 0.002, prob,
                       workers=workers, solver=sol)
        g = SP.assemble_global(split, sp)
        results.append((g.u.coeffs.tobytes(), g.v.coeffs.tobytes()))
    ok = results[0] == results[1]
    _report(8, "bit-identical results for 1 vs 4 workers", ok)


def test_criterion_09_swip_operator_suite():
    """Symmetry, constant kernel, positive semidefiniteness, harmonic penalty."""
    results = {}
    # symmetry + PSD on Dirichlet mesh, both degrees
    for k in (1, 2):
        mesh = M.classify_boundary(M.build_structured_mesh(4, 4), all_dirichlet)
        sp = D.build_space(mesh, k)
        op = S.global_operator(sp, S.default_eta(k))
        A = op.matrix.csr
        AT = A.T.tocsr()
        AT.sort_indices()
        results[f"sym_k{k}"] = (
            np.array_equal(A.indptr, AT.indptr)
            and np.array_equal(A.indices, AT.indices)
            and np.array_equal(A.data, AT.data)
        )
        ritz_min = float(np.linalg.eigvalsh(op.matrix.toarray()).min())
        results[f"psd_k{k}"] = ritz_min >= -1e-10 * op.norm_inf()
    # constant kernel, pure Neumann
    mesh = M.classify_boundary(M.build_structured_mesh(4, 4),
                               lambda x, y: np.zeros_like(x, dtype=bool))
    sp = D.build_space(mesh, 2)
    op = S.global_operator(sp, S.default_eta(2))
    one = D.l2_project(sp, lambda x, y: 1.0 + 0 * x)
    results["kernel"] = float(np.abs(op.matrix @ one.coeffs).max()) <= 1e-12 * op.norm_inf()
    # harmonic-mean penalty for kappa = (1, 1.5)
    m2 = M.build_structured_mesh(1, 1)._replace(kappa=np.array([1.0, 1.5]))
    op2 = S.global_operator(D.build_space(m2, 1), S.default_eta(1))
    results["harmonic"] = op2.gamma_interior[0] == 1.2
    ok = all(results.values())
    _report(9, "SWIP operator suite", ok, str({k: bool(v) for k, v in results.items()}))


def test_criterion_10_scheduler_property_suite():
    """1000 random graphs: rounds are matchings, full coverage, round bound."""
    rng = np.random.default_rng(99)
    t0 = time.time()
    checked = 0
    ok = True
    for _ in range(1000):
        n = int(rng.integers(2, 13))
        pairs = [(i, j) for i in range(1, n + 1) for j in range(i + 1, n + 1)]
        rng.shuffle(pairs)
        m = int(rng.integers(1, len(pairs) + 1))
        edges = tuple(sorted((i, j, int(rng.integers(1, 500))) for (i, j) in pairs[:m]))
        graph = C.CommGraph(n, edges)
        schedule = C.greedy_schedule(graph)  # matching property self-checked
        if sorted(schedule.all_edges()) != sorted(edges):
            ok = False
            break
        if schedule.n_rounds > 2 * graph.max_degree() - 1:
            ok = False
            break
        checked += 1
    elapsed = time.time() - t0
    _report(10, "scheduler properties on 1000 random graphs",
            ok and checked == 1000 and elapsed < 30, f"{checked} graphs, {elapsed:.1f}s")
