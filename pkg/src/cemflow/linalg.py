"""Direct solvers with explicit residual contracts."""
from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SingularSystemError(np.linalg.LinAlgError):
    pass


class SaddlePointError(np.linalg.LinAlgError):
    """Constraint block is rank deficient; ``row`` names a dependent constraint."""

    def __init__(self, msg, row=None):
        super().__init__(msg)
        self.row = row


def _norm(A):
    if sp.issparse(A):
        return spla.norm(A, "fro")
    return np.linalg.norm(A, "fro")


def is_symmetric(A, rtol=1e-12) -> bool:
    """True when max|A - A^T| <= rtol * max|A|."""
    if sp.issparse(A):
        D = abs(A - A.T)
        scale = abs(A).max()
        return D.nnz == 0 or D.max() <= rtol * scale
    A = np.asarray(A)
    return np.max(np.abs(A - A.T), initial=0.0) <= rtol * np.max(np.abs(A), initial=0.0)


def _check_residual(A, x, b, tol, what):
    r = A @ x - b
    bound = tol * (_norm(A) * np.linalg.norm(x) + np.linalg.norm(b))
    if not np.all(np.isfinite(x)) or np.linalg.norm(r) > bound:
        raise SingularSystemError(f"{what}: residual {np.linalg.norm(r):.3e} exceeds {bound:.3e}")


def solve_sparse(A, b, tol=1e-10):
    """Solve ``A x = b`` by LU; ``A`` sparse or dense, ``b`` vector or matrix.

    Raises SingularSystemError when the factorization breaks down or the
    residual exceeds ``tol * (|A| |x| + |b|)``.
    """
    b = np.asarray(b, dtype=float)
    try:
        if sp.issparse(A):
            x = spla.splu(sp.csc_matrix(A)).solve(b)
        else:
            A = np.asarray(A, dtype=float)
            x = sla.lu_solve(sla.lu_factor(A, check_finite=True), b)
    except (RuntimeError, ValueError, np.linalg.LinAlgError) as e:
        raise SingularSystemError(f"factorization failed: {e}") from None
    _check_residual(A, x, b, tol, "linear solve")
    return x


def generalized_symmetric_eig(A, B, L, tol=1e-12):
    """Lowest ``L`` eigenpairs of ``A phi = lambda B phi``.

    Eigenvalues ascend; eigenvectors are B-orthonormal with their largest
    magnitude entry positive.

    Returns
    -------
    lam : ndarray, shape (L,)
    phi : ndarray, shape (dim, L)
    """
    A = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
    B = B.toarray() if sp.issparse(B) else np.asarray(B, dtype=float)
    dim = A.shape[0]
    if not 1 <= L <= dim:
        raise ValueError(f"requested {L} eigenpairs of a {dim}-dimensional problem")
    if not is_symmetric(A, tol) or not is_symmetric(B, tol):
        raise ValueError("generalized eigenproblem needs symmetric matrices")
    try:
        lam, phi = sla.eigh(A, B, subset_by_index=[0, L - 1])
    except np.linalg.LinAlgError as e:
        raise np.linalg.LinAlgError(f"mass matrix not positive definite: {e}") from None
    order = np.argsort(lam, kind="stable")
    lam, phi = lam[order], phi[:, order]
    big = np.argmax(np.abs(phi), axis=0)
    phi *= np.sign(phi[big, np.arange(L)])
    return lam, phi


def _dependent_row(C):
    """Index of a constraint row that is (numerically) a combination of others."""
    C = C.toarray() if sp.issparse(C) else np.asarray(C, dtype=float)
    _, R, piv = sla.qr(C.T, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    tol = max(C.shape) * np.finfo(float).eps * (d[0] if d.size else 0.0)
    bad = np.flatnonzero(d <= tol)
    if bad.size:
        return int(piv[bad[0]])
    # more constraints than unknowns: the first row left out of the pivot set
    return int(piv[d.size]) if C.shape[0] > d.size else None


def solve_saddle(A, C, g, tol=1e-9):
    """Solve ``[[A, C^T], [C, 0]] (x, mu) = (0, g)``.

    ``g`` may hold several right-hand sides as columns; the KKT matrix is
    factored once.

    Returns
    -------
    x, mu : ndarray
    """
    A = sp.csr_matrix(A)
    C = sp.csr_matrix(C)
    nx, nc = A.shape[0], C.shape[0]
    if C.shape[1] != nx:
        raise ValueError("constraint rows do not match the operator size")
    g = np.asarray(g, dtype=float)
    if nc > nx:
        row = _dependent_row(C)
        raise SaddlePointError(f"{nc} constraints on {nx} unknowns: constraint row {row} "
                               "is linearly dependent on the others", row)
    K = sp.bmat([[A, C.T], [C, None]], format="csc")
    rhs = np.zeros((nx + nc,) + g.shape[1:])
    rhs[nx:] = g
    try:
        # symmetric fill-reducing order; weak pivoting keeps it (checked below)
        lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=1e-3,
                       options=dict(SymmetricMode=True))
        # a dependent constraint leaves a round-off sized pivot even when g is consistent
        d = np.abs(lu.U.diagonal())
        ok = d.min() > max(K.shape) * np.finfo(float).eps * d.max()
        if ok:
            sol = lu.solve(rhs)
            ok = np.all(np.isfinite(sol))
    except RuntimeError:
        ok = False
    if ok:
        r = K @ sol - rhs
        bound = tol * (spla.norm(K, "fro") * np.linalg.norm(sol) + np.linalg.norm(rhs))
        ok = np.linalg.norm(r) <= bound
    if not ok:
        row = _dependent_row(C)
        msg = "saddle system is singular"
        if row is not None:
            msg += f": constraint row {row} is linearly dependent on the others"
        raise SaddlePointError(msg, row)
    return sol[:nx], sol[nx:]
