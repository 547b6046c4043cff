import numpy as np
import pytest

from dgsplit import dg_space, mesh


def all_dirichlet(x, y):
    return np.ones_like(np.asarray(x, dtype=float), dtype=bool)


def all_neumann(x, y):
    return np.zeros_like(np.asarray(x, dtype=float), dtype=bool)


@pytest.fixture
def unit_square_4x4():
    return mesh.build_structured_mesh(4, 4)


@pytest.fixture
def dirichlet_8x8():
    return mesh.classify_boundary(mesh.build_structured_mesh(8, 8), all_dirichlet)


def standing_mode(op, target_omega=None):
    """Discrete standing-wave eigenpair of M^-1 A closest to the continuous
    sin(pi x) sin(pi y) mode; gives an exactly integrable reference
    u(t) = cos(omega t) phi for pure temporal-order measurements."""
    import scipy.sparse as sp
    import scipy.sparse.linalg as sla

    mass = op.mass_diagonal()
    ms = np.sqrt(mass)
    B = sp.diags(1.0 / ms) @ op.matrix.csr @ sp.diags(1.0 / ms)
    if target_omega is None:
        target_omega = np.sqrt(2.0) * np.pi
    lam, vecs = sla.eigsh(B.tocsc(), k=6, sigma=target_omega ** 2)
    guide = dg_space.l2_project(
        op.space, lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y), op.cells
    )
    overlap = np.abs(vecs.T @ (ms * guide.coeffs))
    j = int(np.argmax(overlap))
    omega = float(np.sqrt(max(lam[j], 0.0)))
    phi = vecs[:, j] / ms
    phi /= np.sqrt(float(np.dot(phi * mass, phi)))
    return omega, phi


def brute_force_extension(msh, base_cells, layers):
    """Oracle for layer extension: closure-intersection over all cell pairs."""
    current = set(int(c) for c in base_cells)
    for _ in range(layers):
        grown = set(current)
        for c in current:
            vc = set(msh.cells[c])
            for other in range(msh.n_cells):
                if vc & set(msh.cells[other]):
                    grown.add(other)
        current = grown
    return sorted(current)
