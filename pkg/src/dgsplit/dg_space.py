"""Broken polynomial spaces on triangles: quadrature, orthonormal modal basis,
L2 projection, and field evaluation.

The reference basis is orthonormal in L2 over the reference triangle
{x, y >= 0, x + y <= 1}, built once per degree by exact rational
Gram-Schmidt on monomials. Under affine maps the per-cell mass matrix is
then |det B_K| times the identity, so mass solves are diagonal scalings.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from math import factorial

import numpy as np

from .errors import DomainError, SingularMassError, SpaceMismatchError
from .mesh import CellSet, Mesh

REF_TRIANGLE_AREA = 0.5


# -- quadrature ---------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureRule:
    """Points and weights on the reference triangle; weights sum to its area."""

    points: np.ndarray      # (n, 2) reference coordinates
    weights: np.ndarray     # (n,)
    degree: int             # total polynomial degree integrated exactly

    @property
    def barycentric(self) -> np.ndarray:
        x, y = self.points[:, 0], self.points[:, 1]
        return np.stack([1.0 - x - y, x, y], axis=1)


def _orbit3(a):
    return [(a, a), (1 - 2 * a, a), (a, 1 - 2 * a)]


def triangle_quadrature(degree: int) -> QuadratureRule:
    """Symmetric rules up to degree 5; conical-product Gauss-Jacobi above."""
    degree = max(degree, 1)
    if degree <= 1:
        pts, w = [(1 / 3, 1 / 3)], [0.5]
    elif degree == 2:
        pts = _orbit3(1 / 6)
        w = [1 / 6] * 3
    elif degree == 3:
        pts = [(1 / 3, 1 / 3)] + _orbit3(1 / 5)
        w = [-27 / 96] + [25 / 96] * 3
    elif degree <= 5:
        s = np.sqrt(15.0)
        pts = [(1 / 3, 1 / 3)] + _orbit3((6 - s) / 21) + _orbit3((6 + s) / 21)
        w = [9 / 80] + [(155 - s) / 2400] * 3 + [(155 + s) / 2400] * 3
    else:
        return _conical_rule(degree)
    return QuadratureRule(np.array(pts, dtype=float), np.array(w, dtype=float), degree)


def _conical_rule(degree: int) -> QuadratureRule:
    from scipy.special import roots_jacobi, roots_legendre

    n = degree // 2 + 1
    xu, wu = roots_legendre(n)
    xu = 0.5 * (xu + 1.0)
    wu = 0.5 * wu
    xv, wv = roots_jacobi(n, 1.0, 0.0)
    xv = 0.5 * (xv + 1.0)
    wv = 0.25 * wv
    U, V = np.meshgrid(xu, xv, indexing="ij")
    WU, WV = np.meshgrid(wu, wv, indexing="ij")
    pts = np.stack([(U * (1.0 - V)).ravel(), V.ravel()], axis=1)
    w = (WU * WV).ravel()
    return QuadratureRule(pts, w, degree)


def segment_quadrature(degree: int):
    """Gauss-Legendre points/weights on [0, 1] exact to the given degree."""
    from scipy.special import roots_legendre

    n = degree // 2 + 1
    x, w = roots_legendre(n)
    return 0.5 * (x + 1.0), 0.5 * w


# -- reference basis ----------------------------------------------------------


def monomial_exponents(k: int):
    return [(d - b, b) for d in range(k + 1) for b in range(d + 1)]


@lru_cache(maxsize=None)
def _reference_basis(k: int) -> np.ndarray:
    """Column matrix of monomial coefficients for the orthonormal modal basis.

    Gram-Schmidt is run in exact rational arithmetic against the closed-form
    monomial integrals int x^a y^b = a! b! / (a+b+2)!, so orthonormality is
    exact up to one floating square root per basis function.
    """
    exps = monomial_exponents(k)
    n = len(exps)
    H = [
        [
            Fraction(factorial(a1 + a2) * factorial(b1 + b2), factorial(a1 + a2 + b1 + b2 + 2))
            for (a2, b2) in exps
        ]
        for (a1, b1) in exps
    ]
    cols = []
    norms2 = []
    for i in range(n):
        ci = [Fraction(1) if r == i else Fraction(0) for r in range(n)]
        for j in range(i):
            cj = cols[j]
            num = sum(ci[a] * H[a][b] * cj[b] for a in range(n) for b in range(n) if ci[a] and cj[b])
            ci = [ci[r] - (num / norms2[j]) * cj[r] for r in range(n)]
        n2 = sum(ci[a] * H[a][b] * ci[b] for a in range(n) for b in range(n) if ci[a] and ci[b])
        cols.append(ci)
        norms2.append(n2)
    C = np.array(
        [[float(cols[i][r]) / np.sqrt(float(norms2[i])) for i in range(n)] for r in range(n)]
    )
    C.flags.writeable = False
    return C


def _monomial_values(exps, points) -> np.ndarray:
    x, y = points[..., 0], points[..., 1]
    return np.stack([x ** a * y ** b for (a, b) in exps], axis=-1)


def _monomial_gradients(exps, points) -> np.ndarray:
    x, y = points[..., 0], points[..., 1]
    gx = [a * x ** (a - 1) * y ** b if a > 0 else np.zeros_like(x) for (a, b) in exps]
    gy = [b * x ** a * y ** (b - 1) if b > 0 else np.zeros_like(x) for (a, b) in exps]
    return np.stack([np.stack(gx, axis=-1), np.stack(gy, axis=-1)], axis=-1)


# -- broken space -------------------------------------------------------------


class BrokenSpace:
    """Degree-k discontinuous space on a mesh, one modal block per cell.

    Global dofs are cell-contiguous: cell c owns dofs [c*m, (c+1)*m) with
    m = (k+1)(k+2)/2. The per-cell mass matrix is mass_scale[c] * identity
    with mass_scale[c] = |det B_c| (twice the cell area).
    """

    def __init__(self, mesh: Mesh, k: int):
        if k < 0:
            raise SpaceMismatchError("polynomial degree must be nonnegative")
        self.mesh = mesh
        self.k = k
        self.exponents = monomial_exponents(k)
        self.dofs_per_cell = len(self.exponents)
        self.n_dofs = self.dofs_per_cell * mesh.n_cells
        self.basis_coeffs = _reference_basis(k)

        v = mesh.vertices
        c = mesh.cells
        p0 = v[c[:, 0]]
        B = np.stack([v[c[:, 1]] - p0, v[c[:, 2]] - p0], axis=2)  # (nc, 2, 2) columns
        det = B[:, 0, 0] * B[:, 1, 1] - B[:, 0, 1] * B[:, 1, 0]
        if np.any(det == 0):
            raise SingularMassError("zero-area cell")
        inv = np.empty_like(B)
        inv[:, 0, 0] = B[:, 1, 1] / det
        inv[:, 0, 1] = -B[:, 0, 1] / det
        inv[:, 1, 0] = -B[:, 1, 0] / det
        inv[:, 1, 1] = B[:, 0, 0] / det
        self.cell_origin = p0
        self.jacobian = B
        self.jacobian_inv = inv
        self.mass_scale = np.abs(det)

        self.volume_rule = triangle_quadrature(max(2 * k + 2, 5))
        self.face_points, self.face_weights = segment_quadrature(2 * k + 2)
        self._vol_basis = self.eval_reference_basis(self.volume_rule.points)
        self._vol_grads = self.eval_reference_gradients(self.volume_rule.points)
        self._centroid_basis = self.eval_reference_basis(np.array([[1 / 3, 1 / 3]]))[0]

    # reference-space evaluations
    def eval_reference_basis(self, points) -> np.ndarray:
        return _monomial_values(self.exponents, np.asarray(points)) @ self.basis_coeffs

    def eval_reference_gradients(self, points) -> np.ndarray:
        g = _monomial_gradients(self.exponents, np.asarray(points))  # (..., nmono, 2)
        return np.einsum("...md,mi->...id", g, self.basis_coeffs)

    def to_reference(self, cells, points) -> np.ndarray:
        """Map physical points to reference coordinates of the given cells."""
        rel = points - self.cell_origin[cells]
        return np.einsum("...ij,...j->...i", self.jacobian_inv[cells], rel)

    def to_physical(self, cells, ref_points) -> np.ndarray:
        return self.cell_origin[cells] + np.einsum(
            "...ij,...j->...i", self.jacobian[cells], ref_points
        )

    def cell_dof_slice(self, cell: int) -> slice:
        m = self.dofs_per_cell
        return slice(cell * m, (cell + 1) * m)

    def quad_points_physical(self, cells=None) -> np.ndarray:
        """Volume quadrature points for the given cells, shape (nc, nq, 2)."""
        if cells is None:
            cells = np.arange(self.mesh.n_cells)
        ref = self.volume_rule.points
        return (
            self.cell_origin[cells, None, :]
            + np.einsum("cij,qj->cqi", self.jacobian[cells], ref)
        )

    def zero_field(self, cells: CellSet | None = None) -> "Field":
        n = self.n_dofs if cells is None else len(cells) * self.dofs_per_cell
        return Field(self, np.zeros(n), cells)

    def mass_diagonal(self, cells: CellSet | None = None) -> np.ndarray:
        scale = self.mass_scale if cells is None else self.mass_scale[cells.indices]
        return np.repeat(scale, self.dofs_per_cell)


def build_space(mesh: Mesh, k: int) -> BrokenSpace:
    return BrokenSpace(mesh, k)


# -- fields -------------------------------------------------------------------


@dataclass
class Field:
    """Coefficient vector over the cell-contiguous dof blocks of a space.

    ``cells`` restricts the field to a cell subset (None = whole mesh);
    restriction of a DG field is literally the sub-vector of those blocks.
    """

    space: BrokenSpace
    coeffs: np.ndarray
    cells: CellSet | None = None

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        expect = (
            self.space.n_dofs
            if self.cells is None
            else len(self.cells) * self.space.dofs_per_cell
        )
        if self.coeffs.shape != (expect,):
            raise SpaceMismatchError(
                f"coefficient vector has length {self.coeffs.shape}, expected {expect}"
            )

    def cell_indices(self) -> np.ndarray:
        if self.cells is None:
            return np.arange(self.space.mesh.n_cells)
        return self.cells.indices

    def blocks(self) -> np.ndarray:
        return self.coeffs.reshape(-1, self.space.dofs_per_cell)

    def copy(self) -> "Field":
        return Field(self.space, self.coeffs.copy(), self.cells)

    def restrict(self, cells: CellSet) -> "Field":
        """Sub-vector of the given cells' dof blocks."""
        if self.cells is None:
            rows = cells.indices
        else:
            rows = self.cells.positions(cells.indices)
        return Field(self.space, self.blocks()[rows].ravel(), cells)

    def local_block_rows(self, global_cells) -> np.ndarray:
        if self.cells is None:
            return np.asarray(global_cells)
        return self.cells.positions(global_cells)


def _check_same_layout(a: Field, b: Field):
    if a.space is not b.space:
        raise SpaceMismatchError("fields built on different spaces")
    same = (a.cells is None and b.cells is None) or (
        a.cells is not None and b.cells is not None and a.cells == b.cells
    )
    if not same:
        raise SpaceMismatchError("fields restricted to different cell sets")


def l2_project(space: BrokenSpace, f, cells: CellSet | None = None) -> Field:
    """L2 projection of a pointwise function f(x, y) onto the broken space."""
    load = volume_load(space, f, cells=cells)
    return Field(space, mass_solve(space, load, cells=cells), cells)


def volume_load(space: BrokenSpace, f, cells: CellSet | None = None, t=None) -> np.ndarray:
    """Per-dof load vector (f(., t), phi_i) via cell-local quadrature."""
    idx = None if cells is None else cells.indices
    pts = space.quad_points_physical(idx)
    x, y = pts[..., 0], pts[..., 1]
    vals = f(x, y) if t is None else f(x, y, t)
    vals = np.broadcast_to(np.asarray(vals, dtype=np.float64), x.shape)
    w = space.volume_rule.weights
    scale = space.mass_scale if idx is None else space.mass_scale[idx]
    load = np.einsum("cq,q,qm->cm", vals, w, space._vol_basis)
    load *= scale[:, None]
    return load.ravel()


def mass_solve(space: BrokenSpace, rhs: np.ndarray, cells: CellSet | None = None) -> np.ndarray:
    """Apply the inverse mass matrix: a per-dof scaling in the modal basis."""
    return np.asarray(rhs, dtype=np.float64) / space.mass_diagonal(cells)


def mass_apply(space: BrokenSpace, vec: np.ndarray, cells: CellSet | None = None) -> np.ndarray:
    return np.asarray(vec, dtype=np.float64) * space.mass_diagonal(cells)


def evaluate(field: Field, cell: int, point) -> float:
    """Value of the field at a physical point inside the given (global) cell."""
    space = field.space
    ref = space.to_reference(cell, np.asarray(point, dtype=float))
    bary = np.array([1.0 - ref[0] - ref[1], ref[0], ref[1]])
    if bary.min() < -1e-10 or bary.max() > 1 + 1e-10:
        raise DomainError(f"point {point} outside cell {cell}")
    row = field.local_block_rows(cell)
    basis = space.eval_reference_basis(ref[None, :])[0]
    return float(field.blocks()[row] @ basis)


def evaluate_at_reference(field: Field, ref_points: np.ndarray) -> np.ndarray:
    """Vectorized values at one reference point set replicated on every cell
    of the field; returns (n_cells_local, n_points)."""
    basis = field.space.eval_reference_basis(ref_points)
    return field.blocks() @ basis.T


def l2_inner(a: Field, b: Field) -> float:
    _check_same_layout(a, b)
    md = a.space.mass_diagonal(a.cells)
    return float(np.dot(a.coeffs * md, b.coeffs))


def l2_norm(field: Field) -> float:
    return float(np.sqrt(max(l2_inner(field, field), 0.0)))


def cell_center_values(field: Field) -> np.ndarray:
    """Field sampled at cell centroids (one value per local cell)."""
    return field.blocks() @ field.space._centroid_basis


# -- export -------------------------------------------------------------------


def write_vtk(mesh: Mesh, path, cell_data: dict, title="dgsplit output"):
    """Legacy ASCII VTK unstructured grid with per-cell scalar data."""
    lines = [
        "# vtk DataFile Version 2.0",
        title,
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {mesh.n_vertices} double",
    ]
    for x, y in mesh.vertices:
        lines.append(f"{x} {y} 0.0")
    lines.append(f"CELLS {mesh.n_cells} {4 * mesh.n_cells}")
    for a, b, c in mesh.cells:
        lines.append(f"3 {a} {b} {c}")
    lines.append(f"CELL_TYPES {mesh.n_cells}")
    lines.extend(["5"] * mesh.n_cells)
    lines.append(f"CELL_DATA {mesh.n_cells}")
    for name, values in cell_data.items():
        values = np.asarray(values, dtype=float)
        lines.append(f"SCALARS {name} double")
        lines.append("LOOKUP_TABLE default")
        lines.extend(str(v) for v in values)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def write_field_vtk(field: Field, path, name="u", title="dgsplit field"):
    if field.cells is not None:
        raise SpaceMismatchError("VTK export expects a whole-mesh field")
    write_vtk(field.space.mesh, path, {name: cell_center_values(field)}, title=title)


def write_coeff_csv(field: Field, path):
    """Raw coefficients: one row per dof with cell id and local mode index."""
    m = field.space.dofs_per_cell
    cells = np.repeat(field.cell_indices(), m)
    modes = np.tile(np.arange(m), len(field.cell_indices()))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("cell,mode,coeff\n")
        for c, mode, v in zip(cells, modes, field.coeffs):
            fh.write(f"{c},{mode},{float(v)!r}\n")
