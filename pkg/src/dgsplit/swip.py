"""Symmetric weighted interior penalty assembly on arbitrary cell sets.

The bilinear form on a cell set couples its interior faces two-sided (kappa-
weighted averages, harmonic-mean penalty) and a caller-chosen set of
"Dirichlet-like" faces one-sided (full weight, penalty kappa of the inside
cell). Dirichlet-like faces cover both true Dirichlet boundary faces and
subdomain interfaces whose data arrives through the right-hand side.

Assembly is block-deterministic: the diagonal block of a cell accumulates
volume term first, then interior-face terms in ascending face order, then
Dirichlet-like terms in ascending face order. A cell whose faces receive
identical treatment in two different operators therefore gets bit-identical
matrix rows in both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .dg_space import BrokenSpace, Field, mass_solve
from .errors import CoercivityError, LayoutError, SpaceMismatchError
from .linalg import SparseSymMatrix
from .mesh import CellSet


def _face_quad_geometry(space: BrokenSpace, faces: np.ndarray):
    """Physical quad points and scaled weights for a batch of faces."""
    mesh = space.mesh
    fv = mesh.face_vertices[faces]
    p0 = mesh.vertices[fv[:, 0]]
    p1 = mesh.vertices[fv[:, 1]]
    t = space.face_points  # (nq,) on [0, 1]
    pts = p0[:, None, :] + t[None, :, None] * (p1 - p0)[:, None, :]
    w = space.face_weights[None, :] * mesh.h_F[faces, None]
    return pts, w


def _side_traces(space: BrokenSpace, cells: np.ndarray, pts: np.ndarray, normals: np.ndarray):
    """Basis traces and normal-derivative traces of the given cells at the
    given physical points; ``normals`` are per-face outward directions."""
    ref = np.einsum(
        "fij,fqj->fqi", space.jacobian_inv[cells], pts - space.cell_origin[cells][:, None, :]
    )
    from .dg_space import _monomial_gradients, _monomial_values

    vals = _monomial_values(space.exponents, ref) @ space.basis_coeffs
    grads = np.einsum(
        "fqmd,mi->fqid", _monomial_gradients(space.exponents, ref), space.basis_coeffs
    )
    nref = np.einsum("fij,fj->fi", space.jacobian_inv[cells], normals)
    dn = np.einsum("fqid,fd->fqi", grads, nref)
    return vals, dn


def swip_face_weights(kappa_in: np.ndarray, kappa_out: np.ndarray):
    """Diffusion-weighted face data: weights (omega_in, omega_out) and the
    harmonic-mean penalty coefficient."""
    s = kappa_in + kappa_out
    return kappa_out / s, kappa_in / s, 2.0 * kappa_in * kappa_out / s


@dataclass(eq=False)
class SwipOperator:
    """Discrete SWIP operator A on a cell set, with penalty metadata.

    ``matrix`` realizes the bilinear form; the operator L_h is
    mass_solve(A @ u). ``cells`` is None for the whole mesh.
    """

    space: BrokenSpace
    cells: CellSet | None
    matrix: SparseSymMatrix
    eta: float
    interior_faces: np.ndarray
    dirichlet_faces: np.ndarray
    gamma_interior: np.ndarray
    weights_interior: np.ndarray
    gamma_dirichlet: np.ndarray

    def __post_init__(self):
        self._norm_inf = None
        self._local_cells = (
            np.arange(self.space.mesh.n_cells) if self.cells is None else self.cells.indices
        )

    @property
    def n_dofs(self) -> int:
        return len(self._local_cells) * self.space.dofs_per_cell

    def local_cell_positions(self, global_cells) -> np.ndarray:
        if self.cells is None:
            return np.asarray(global_cells)
        return self.cells.positions(global_cells)

    def mass_diagonal(self) -> np.ndarray:
        return self.space.mass_diagonal(self.cells)

    def norm_inf(self) -> float:
        if self._norm_inf is None:
            self._norm_inf = self.matrix.norm_inf()
        return self._norm_inf


def assemble_swip(
    space: BrokenSpace,
    cells: CellSet | None,
    interior_faces,
    dirichlet_faces,
    eta: float,
) -> SwipOperator:
    """Assemble the SWIP bilinear form over a cell set.

    ``interior_faces`` must have both incident cells in the set (coupled
    two-sided); ``dirichlet_faces`` exactly one (penalized one-sided).
    Faces in neither set contribute nothing (Neumann / omitted).
    """
    if eta <= 0:
        raise LayoutError("penalty parameter eta must be positive")
    mesh = space.mesh
    m = space.dofs_per_cell
    local_cells = np.arange(mesh.n_cells) if cells is None else cells.indices
    nloc = len(local_cells)
    pos_of = np.full(mesh.n_cells, -1, dtype=np.int64)
    pos_of[local_cells] = np.arange(nloc)

    interior_faces = np.sort(np.asarray(interior_faces, dtype=np.int64).ravel())
    dirichlet_faces = np.sort(np.asarray(dirichlet_faces, dtype=np.int64).ravel())

    # volume blocks: kappa |det B| g_i^T (B^-1 B^-T) g_j, symmetrized
    w = space.volume_rule.weights
    g = space._vol_grads  # (nq, m, 2)
    T = np.einsum("q,qia,qjb->ijab", w, g, g)
    Binv = space.jacobian_inv[local_cells]
    W2 = np.einsum("kab,kcb->kac", Binv, Binv)
    W2 *= (mesh.kappa[local_cells] * space.mass_scale[local_cells])[:, None, None]
    diag_blocks = np.einsum("kab,ijab->kij", W2, T)
    diag_blocks = 0.5 * (diag_blocks + diag_blocks.transpose(0, 2, 1))

    off_rows, off_cols, off_vals = [], [], []
    gamma_int = np.empty(0)
    weights_int = np.empty((0, 2))

    if len(interior_faces):
        fc = mesh.face_cells[interior_faces]
        c0, c1 = fc[:, 0], fc[:, 1]
        if np.any(pos_of[c0] < 0) or np.any(pos_of[c1] < 0):
            raise LayoutError("interior face references a cell outside the set")
        pts, W = _face_quad_geometry(space, interior_faces)
        n = mesh.face_normals[interior_faces]  # from c0 to c1
        k0, k1 = mesh.kappa[c0], mesh.kappa[c1]
        om0, om1, gam = swip_face_weights(k0, k1)
        pen = eta * gam / mesh.h_F[interior_faces]

        phi0, dn0 = _side_traces(space, c0, pts, n)
        phi1, dn1 = _side_traces(space, c1, pts, n)
        wk0 = (om0 * k0)[:, None, None]
        wk1 = (om1 * k1)[:, None, None]
        s0, s1 = 1.0, -1.0

        # per side pair: test side b gives rows, trial side a gives columns
        def pair_block(phi_b, dn_b, wk_b, s_b, phi_a, dn_a, wk_a, s_a):
            term1 = np.einsum("fq,fqi,fqj->fij", W, s_b * phi_b, wk_a * dn_a)
            term2 = np.einsum("fq,fqi,fqj->fij", W, wk_b * dn_b, s_a * phi_a)
            penalty = np.einsum(
                "fq,fqi,fqj->fij", W * pen[:, None], s_b * phi_b, s_a * phi_a
            )
            return -(term1 + term2) + penalty

        b00 = pair_block(phi0, dn0, wk0, s0, phi0, dn0, wk0, s0)
        b11 = pair_block(phi1, dn1, wk1, s1, phi1, dn1, wk1, s1)
        b01 = pair_block(phi0, dn0, wk0, s0, phi1, dn1, wk1, s1)
        b00 = 0.5 * (b00 + b00.transpose(0, 2, 1))
        b11 = 0.5 * (b11 + b11.transpose(0, 2, 1))
        b10 = b01.transpose(0, 2, 1)

        np.add.at(diag_blocks, pos_of[c0], b00)
        np.add.at(diag_blocks, pos_of[c1], b11)
        off_rows.extend([pos_of[c0], pos_of[c1]])
        off_cols.extend([pos_of[c1], pos_of[c0]])
        off_vals.extend([b01, b10])
        gamma_int = gam
        weights_int = np.stack([om0, om1], axis=1)

    gamma_d = np.empty(0)
    if len(dirichlet_faces):
        cin, nout = one_sided_cells(mesh, dirichlet_faces, pos_of)
        pts, W = _face_quad_geometry(space, dirichlet_faces)
        kin = mesh.kappa[cin]
        pen = eta * kin / mesh.h_F[dirichlet_faces]
        phi, dn = _side_traces(space, cin, pts, nout)
        kdn = kin[:, None, None] * dn
        term = np.einsum("fq,fqi,fqj->fij", W, phi, kdn)
        term += term.transpose(0, 2, 1)
        penalty = np.einsum("fq,fqi,fqj->fij", W * pen[:, None], phi, phi)
        penalty = 0.5 * (penalty + penalty.transpose(0, 2, 1))
        np.add.at(diag_blocks, pos_of[cin], penalty - term)
        gamma_d = kin

    # block layout -> CSR (no duplicate positions, so conversion is exact)
    li = np.arange(m)
    ii, jj = np.meshgrid(li, li, indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()

    coo_rows = [(np.arange(nloc)[:, None] * m + ii[None, :]).ravel()]
    coo_cols = [(np.arange(nloc)[:, None] * m + jj[None, :]).ravel()]
    coo_vals = [diag_blocks.reshape(-1)]
    for r, c, v in zip(off_rows, off_cols, off_vals):
        coo_rows.append((r[:, None] * m + ii[None, :]).ravel())
        coo_cols.append((c[:, None] * m + jj[None, :]).ravel())
        coo_vals.append(v.reshape(-1))
    n_dofs = nloc * m
    A = sp.coo_matrix(
        (np.concatenate(coo_vals), (np.concatenate(coo_rows), np.concatenate(coo_cols))),
        shape=(n_dofs, n_dofs),
    ).tocsr()
    A.sort_indices()

    return SwipOperator(
        space=space,
        cells=cells,
        matrix=SparseSymMatrix(A),
        eta=eta,
        interior_faces=interior_faces,
        dirichlet_faces=dirichlet_faces,
        gamma_interior=gamma_int,
        weights_interior=weights_int,
        gamma_dirichlet=gamma_d,
    )


def one_sided_cells(mesh, faces: np.ndarray, pos_of: np.ndarray):
    """Inside cell and outward normal for faces with exactly one cell in the
    set described by ``pos_of`` (>= 0 entries)."""
    fc = mesh.face_cells[faces]
    c0, c1 = fc[:, 0], fc[:, 1]
    in0 = pos_of[c0] >= 0
    in1 = (c1 >= 0) & (pos_of[np.where(c1 >= 0, c1, 0)] >= 0)
    if np.any(in0 & in1) or np.any(~in0 & ~in1):
        raise LayoutError("one-sided face must have exactly one incident cell in the set")
    cin = np.where(in0, c0, c1)
    sign = np.where(in0, 1.0, -1.0)
    nout = mesh.face_normals[faces] * sign[:, None]
    return cin, nout


# -- global / subdomain convenience --------------------------------------------


def global_operator(space: BrokenSpace, eta: float) -> SwipOperator:
    from .mesh import DIRICHLET

    mesh = space.mesh
    return assemble_swip(
        space, None, mesh.interior_faces, mesh.faces_with_label(DIRICHLET), eta
    )


def default_eta(k: int) -> float:
    return 4.0 * (k + 1) * (k + 2)


# -- boundary data term ---------------------------------------------------------


@dataclass(eq=False)
class BoundaryTerm:
    """Load vector realizing weakly imposed face data on a cell set."""

    faces: np.ndarray
    vector: np.ndarray
    description: str = ""


class FaceTraceData:
    """Per-face trace values at the face quadrature points (nf, nq)."""

    __slots__ = ("faces", "values")

    def __init__(self, faces, values):
        self.faces = np.asarray(faces, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)
        if self.values.shape[0] != len(self.faces):
            raise SpaceMismatchError("one row of trace values per face required")


def boundary_term(
    space: BrokenSpace,
    faces,
    data,
    time: float = 0.0,
    *,
    eta: float,
    cells: CellSet | None = None,
) -> np.ndarray:
    """Load vector of the weak-data term on the given faces.

    For every face the inside cell is the unique incident cell within
    ``cells``; data is enforced with full weight and penalty kappa of that
    cell. ``data`` is either a callable g(x, y, t) or FaceTraceData with
    precomputed values (used for interface averages).
    """
    mesh = space.mesh
    m = space.dofs_per_cell
    local_cells = np.arange(mesh.n_cells) if cells is None else cells.indices
    nloc = len(local_cells)
    out = np.zeros(nloc * m)
    faces = np.sort(np.asarray(faces, dtype=np.int64).ravel())
    if len(faces) == 0:
        return out
    pos_of = np.full(mesh.n_cells, -1, dtype=np.int64)
    pos_of[local_cells] = np.arange(nloc)

    cin, nout = one_sided_cells(mesh, faces, pos_of)
    pts, W = _face_quad_geometry(space, faces)
    if isinstance(data, FaceTraceData):
        order = np.argsort(data.faces, kind="stable")
        if not np.array_equal(data.faces[order], faces):
            raise SpaceMismatchError("trace data faces do not match the face set")
        gvals = data.values[order]
    else:
        gvals = np.broadcast_to(
            np.asarray(data(pts[..., 0], pts[..., 1], time), dtype=np.float64), W.shape
        )
    kin = mesh.kappa[cin]
    pen = eta * kin / mesh.h_F[faces]
    phi, dn = _side_traces(space, cin, pts, nout)
    load = np.einsum("fq,fq,fqi->fi", W * pen[:, None], gvals, phi)
    load -= np.einsum("fq,fq,fqi->fi", W, gvals, kin[:, None, None] * dn)
    rows = (pos_of[cin][:, None] * m + np.arange(m)[None, :]).ravel()
    np.add.at(out, rows, load.ravel())
    return out


def weighted_average_trace(field: Field, faces) -> FaceTraceData:
    """Kappa-weighted average of the two-sided field trace on interior faces."""
    space = field.space
    mesh = space.mesh
    faces = np.sort(np.asarray(faces, dtype=np.int64).ravel())
    fc = mesh.face_cells[faces]
    c0, c1 = fc[:, 0], fc[:, 1]
    if np.any(c1 < 0):
        raise LayoutError("weighted average needs interior faces")
    rows0 = field.local_block_rows(c0)
    rows1 = field.local_block_rows(c1)
    pts, _ = _face_quad_geometry(space, faces)
    n = mesh.face_normals[faces]
    phi0, _ = _side_traces(space, c0, pts, n)
    phi1, _ = _side_traces(space, c1, pts, n)
    blocks = field.blocks()
    tr0 = np.einsum("fqi,fi->fq", phi0, blocks[rows0])
    tr1 = np.einsum("fqi,fi->fq", phi1, blocks[rows1])
    om0, om1, _ = swip_face_weights(mesh.kappa[c0], mesh.kappa[c1])
    return FaceTraceData(faces, om0[:, None] * tr0 + om1[:, None] * tr1)


def jump_trace_max(field: Field, faces) -> float:
    """Max absolute two-sided trace jump over the given interior faces."""
    space = field.space
    mesh = space.mesh
    faces = np.asarray(faces, dtype=np.int64).ravel()
    if len(faces) == 0:
        return 0.0
    fc = mesh.face_cells[faces]
    c0, c1 = fc[:, 0], fc[:, 1]
    pts, _ = _face_quad_geometry(space, faces)
    n = mesh.face_normals[faces]
    phi0, _ = _side_traces(space, c0, pts, n)
    phi1, _ = _side_traces(space, c1, pts, n)
    blocks = field.blocks()
    tr0 = np.einsum("fqi,fi->fq", phi0, blocks[field.local_block_rows(c0)])
    tr1 = np.einsum("fqi,fi->fq", phi1, blocks[field.local_block_rows(c1)])
    return float(np.max(np.abs(tr0 - tr1)))


# -- operator application --------------------------------------------------------


def apply_Lh(op: SwipOperator, u: Field) -> Field:
    """L_h u = M^{-1} (A u) on the operator's cell set."""
    _check_field(op, u)
    return Field(op.space, mass_solve(op.space, op.matrix @ u.coeffs, op.cells), op.cells)


def a_norm(op: SwipOperator, u: Field) -> float:
    """SWIP energy seminorm sqrt(u^T A u); small negative round-off clamps to 0."""
    _check_field(op, u)
    q = float(np.dot(u.coeffs, op.matrix @ u.coeffs))
    if q < 0:
        unorm2 = float(np.dot(u.coeffs, u.coeffs))
        if q < -1e-10 * op.norm_inf() * unorm2:
            raise CoercivityError(
                f"energy form returned {q:.3e}: penalty eta={op.eta} too small"
            )
        q = 0.0
    return float(np.sqrt(q))


def _check_field(op: SwipOperator, u: Field):
    if u.space is not op.space:
        raise SpaceMismatchError("field and operator built on different spaces")
    same = (u.cells is None and op.cells is None) or (
        u.cells is not None and op.cells is not None and u.cells == op.cells
    )
    if not same:
        raise SpaceMismatchError("field restricted to a different cell set than operator")


def export_matrix_market(op: SwipOperator, path):
    from scipy.io import mmwrite

    mmwrite(path, op.matrix.csr)
