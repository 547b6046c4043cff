"""Sparse symmetric matrices and iterative solvers for the Crank-Nicolson systems.

All reductions use fixed sequential order (scipy CSR matvec, numpy dot), so
solver output is bit-deterministic for fixed inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import IndefiniteMatrixError, SingularBlockError, SolverError


class SparseSymMatrix:
    """CSR matrix with structurally symmetric sparsity, canonical format."""

    __slots__ = ("csr",)

    def __init__(self, matrix, check_symmetry=False):
        csr = sp.csr_matrix(matrix)
        csr.sum_duplicates()
        csr.sort_indices()
        self.csr = csr
        if check_symmetry:
            d = self.csr - self.csr.T
            if d.nnz and np.max(np.abs(d.data)) > 0:
                raise SolverError("matrix is not symmetric")

    @property
    def shape(self):
        return self.csr.shape

    @property
    def n(self) -> int:
        return self.csr.shape[0]

    @property
    def indptr(self):
        return self.csr.indptr

    @property
    def indices(self):
        return self.csr.indices

    @property
    def data(self):
        return self.csr.data

    def __matmul__(self, x):
        return self.csr @ x

    def diagonal(self):
        return self.csr.diagonal()

    def add_diagonal(self, d) -> "SparseSymMatrix":
        return SparseSymMatrix(self.csr + sp.diags(d, format="csr"))

    def scaled(self, a: float) -> "SparseSymMatrix":
        return SparseSymMatrix(self.csr * a)

    def norm_inf(self) -> float:
        return float(np.max(np.abs(self.csr).sum(axis=1))) if self.csr.nnz else 0.0

    def toarray(self):
        return self.csr.toarray()


@dataclass
class SolverReport:
    iterations: int
    residual: float
    converged: bool
    residual_history: list = field(default_factory=list)


class IdentityPreconditioner:
    def apply(self, r):
        return r


def cg_solve(A, b, tol=1e-10, maxit=1000, precond=None, x0=None):
    """Preconditioned conjugate gradients; stops at ||b - Ax|| <= tol * ||b||.

    Raises IndefiniteMatrixError on non-positive curvature (breakdown).
    Returns (x, SolverReport) with the preconditioned residual norm recorded
    per iteration.
    """
    if tol <= 0:
        raise SolverError("tol must be positive")
    mat = A.csr if isinstance(A, SparseSymMatrix) else A
    b = np.asarray(b, dtype=np.float64)
    n = b.shape[0]
    P = precond if precond is not None else IdentityPreconditioner()

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - mat @ x if x0 is not None else b.copy()
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros(n), SolverReport(0, 0.0, True, [0.0])

    z = P.apply(r)
    rho = float(np.dot(r, z))
    p = z.copy()
    history = [np.sqrt(max(rho, 0.0))]
    rnorm = float(np.linalg.norm(r))
    if rnorm <= tol * bnorm:
        return x, SolverReport(0, rnorm, True, history)

    for it in range(1, maxit + 1):
        Ap = mat @ p
        curv = float(np.dot(p, Ap))
        if curv <= 0.0:
            raise IndefiniteMatrixError(
                f"CG breakdown at iteration {it}: p^T A p = {curv:.3e} <= 0"
            )
        alpha = rho / curv
        x = x + alpha * p
        r = r - alpha * Ap
        rnorm = float(np.linalg.norm(r))
        z = P.apply(r)
        rho_new = float(np.dot(r, z))
        history.append(np.sqrt(max(rho_new, 0.0)))
        if rnorm <= tol * bnorm:
            return x, SolverReport(it, rnorm, True, history)
        p = z + (rho_new / rho) * p
        rho = rho_new

    return x, SolverReport(maxit, rnorm, False, history)


# -- incomplete Cholesky (zero fill) -------------------------------------------


def _ic0_factor_python(indptr, indices, data, n):
    """Row-oriented IC(0) on the lower triangle; returns (ok, bad pivot row).

    Same sorted-row merge as the jitted kernel, so both backends produce
    bit-identical factors.
    """
    for i in range(n):
        got_diag = False
        for idx in range(indptr[i], indptr[i + 1]):
            j = indices[idx]
            if j > i:
                continue
            s = data[idx]
            ii, jj = indptr[i], indptr[j]
            iend, jend = indptr[i + 1], indptr[j + 1]
            while ii < iend and jj < jend:
                ci, cj = indices[ii], indices[jj]
                if ci >= j or cj >= j:
                    break
                if ci == cj:
                    s -= data[ii] * data[jj]
                    ii += 1
                    jj += 1
                elif ci < cj:
                    ii += 1
                else:
                    jj += 1
            if j < i:
                d = 0.0
                for t in range(indptr[j], indptr[j + 1]):
                    if indices[t] == j:
                        d = data[t]
                data[idx] = s / d
            else:
                if s <= 0.0:
                    return False, i
                data[idx] = np.sqrt(s)
                got_diag = True
        if not got_diag:
            return False, i
    return True, -1


_NUMBA_KERNELS = None


def _numba_kernels():
    """JIT-compiled IC(0) factorization and triangular solves (optional)."""
    global _NUMBA_KERNELS
    if _NUMBA_KERNELS is not None:
        return _NUMBA_KERNELS
    try:
        from numba import njit
    except ImportError:
        _NUMBA_KERNELS = False
        return False

    @njit(cache=True)
    def factor(indptr, indices, data, n):
        for i in range(n):
            ok = False
            for idx in range(indptr[i], indptr[i + 1]):
                j = indices[idx]
                if j > i:
                    continue
                s = data[idx]
                # accumulate sum_p<j L[i,p] * L[j,p] by merging sorted rows
                ii = indptr[i]
                jj = indptr[j]
                iend = indptr[i + 1]
                jend = indptr[j + 1]
                while ii < iend and jj < jend:
                    ci = indices[ii]
                    cj = indices[jj]
                    if ci >= j or cj >= j:
                        break
                    if ci == cj:
                        s -= data[ii] * data[jj]
                        ii += 1
                        jj += 1
                    elif ci < cj:
                        ii += 1
                    else:
                        jj += 1
                if j < i:
                    # diagonal of row j is its last lower entry
                    d = 0.0
                    for t in range(indptr[j], indptr[j + 1]):
                        if indices[t] == j:
                            d = data[t]
                    data[idx] = s / d
                else:
                    if s <= 0.0:
                        return i
                    data[idx] = np.sqrt(s)
                    ok = True
            if not ok:
                return i
        return -1

    @njit(cache=True)
    def forward(indptr, indices, data, b):
        n = b.shape[0]
        y = np.zeros(n)
        for i in range(n):
            s = b[i]
            d = 1.0
            for idx in range(indptr[i], indptr[i + 1]):
                j = indices[idx]
                if j < i:
                    s -= data[idx] * y[j]
                elif j == i:
                    d = data[idx]
            y[i] = s / d
        return y

    @njit(cache=True)
    def backward(indptr, indices, data, y):
        # solve L^T x = y with L stored row-wise (lower): column sweep
        n = y.shape[0]
        x = y.copy()
        for i in range(n - 1, -1, -1):
            d = 1.0
            for idx in range(indptr[i], indptr[i + 1]):
                if indices[idx] == i:
                    d = data[idx]
            x[i] /= d
            for idx in range(indptr[i], indptr[i + 1]):
                j = indices[idx]
                if j < i:
                    x[j] -= data[idx] * x[i]
        return x

    _NUMBA_KERNELS = (factor, forward, backward)
    return _NUMBA_KERNELS


class IC0Preconditioner:
    """Zero-fill incomplete Cholesky; apply = forward/backward substitution."""

    def __init__(self, L: sp.csr_matrix, shift: float):
        self.L = L
        self.shift = shift
        kernels = _numba_kernels()
        self._fast = kernels if kernels else None
        if self._fast is None:
            self._Lt = sp.csr_matrix(L.T)

    def apply(self, r):
        if self._fast is not None:
            _, forward, backward = self._fast
            y = forward(self.L.indptr, self.L.indices, self.L.data, np.asarray(r, float))
            return backward(self.L.indptr, self.L.indices, self.L.data, y)
        from scipy.sparse.linalg import spsolve_triangular

        y = spsolve_triangular(self.L, np.asarray(r, float), lower=True)
        return spsolve_triangular(self._Lt, y, lower=False)


def ic0_precondition(A) -> IC0Preconditioner:
    """IC(0) on the matrix's lower-triangular sparsity pattern.

    A negative pivot triggers a diagonal-shift retry: shift = 1e-3 times the
    mean diagonal, doubled up to 8 times, then SolverError.
    """
    csr = A.csr if isinstance(A, SparseSymMatrix) else sp.csr_matrix(A)
    lower = sp.tril(csr, format="csr")
    lower.sort_indices()
    diag_mean = float(np.mean(csr.diagonal()))
    if diag_mean <= 0:
        raise SolverError("IC(0) requires a positive diagonal")

    kernels = _numba_kernels()
    shift = 0.0
    for attempt in range(9):
        L = lower.copy()
        if shift:
            L = sp.csr_matrix(L + shift * sp.diags(np.ones(csr.shape[0])))
            L.sort_indices()
        if kernels:
            factor = kernels[0]
            bad = factor(L.indptr, L.indices, L.data, csr.shape[0])
            ok = bad < 0
        else:
            ok, bad = _ic0_factor_python(L.indptr, L.indices, L.data, csr.shape[0])
        if ok:
            return IC0Preconditioner(L, shift)
        shift = 1e-3 * diag_mean * (2.0 ** attempt)
    raise SolverError(
        f"IC(0) failed after 8 diagonal-shift retries (last pivot row {bad})"
    )


# -- block Jacobi ---------------------------------------------------------------


class BlockJacobiPreconditioner:
    """Per-block dense solves with uniform block size (cell dof blocks)."""

    def __init__(self, inv_blocks: np.ndarray):
        self.inv_blocks = inv_blocks
        self.block_size = inv_blocks.shape[1]

    def apply(self, r):
        m = self.block_size
        rb = np.asarray(r, float).reshape(-1, m)
        return np.einsum("bij,bj->bi", self.inv_blocks, rb).ravel()


def block_jacobi_precondition(A, block_size: int) -> BlockJacobiPreconditioner:
    """Extract dense diagonal blocks of uniform size and invert via Cholesky."""
    csr = A.csr if isinstance(A, SparseSymMatrix) else sp.csr_matrix(A)
    n = csr.shape[0]
    if n % block_size:
        raise SolverError("block size does not partition the index range")
    nb = n // block_size
    blocks = np.zeros((nb, block_size, block_size))
    rows = np.repeat(np.arange(n), np.diff(csr.indptr))
    cols = csr.indices
    inblock = rows // block_size == cols // block_size
    r, c, d = rows[inblock], cols[inblock], csr.data[inblock]
    blocks[r // block_size, r % block_size, c % block_size] = d
    try:
        chol = np.linalg.cholesky(blocks)
    except np.linalg.LinAlgError as exc:
        raise SingularBlockError(f"singular or indefinite diagonal block: {exc}") from exc
    eye = np.broadcast_to(np.eye(block_size), blocks.shape)
    inv_l = np.linalg.solve(chol, eye)
    inv = np.einsum("bki,bkj->bij", inv_l, inv_l)
    return BlockJacobiPreconditioner(inv)


def make_preconditioner(kind: str, A, block_size=None):
    if kind in (None, "none", "identity"):
        return IdentityPreconditioner()
    if kind in ("ic0", "icc"):
        return ic0_precondition(A)
    if kind in ("block_jacobi", "bjacobi"):
        if block_size is None:
            raise SolverError("block_jacobi preconditioner needs a block size")
        return block_jacobi_precondition(A, block_size)
    raise SolverError(f"unknown preconditioner '{kind}'")
