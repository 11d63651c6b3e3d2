"""Q1 finite element assembly on structured grids.

Element matrices are built for all cells at once as arrays of shape
``(n_cells, 4N, 4N)``, local index ``i*4 + a`` for continuum ``i`` and local
node ``a``. They are scattered to the interior dofs (Dirichlet elimination),
numbered ``i*(n-1)**2 + interior_index[node]``, or to all nodes.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .mesh import CoarsePartition, StructuredGrid


class AssemblyError(ArithmeticError):
    pass


@lru_cache(maxsize=None)
def reference_element(order: int = 2):
    """Tensor Gauss rule on the unit square and Q1 shape data.

    Returns ``(pts, w, N, dN)`` with ``pts`` (nq, 2), weights summing to one,
    shape values ``N`` (nq, 4) and reference gradients ``dN`` (nq, 4, 2).
    """
    x, wx = np.polynomial.legendre.leggauss(order)
    x, wx = (x + 1.0) / 2.0, wx / 2.0
    s, t = np.meshgrid(x, x)
    pts = np.column_stack([s.ravel(), t.ravel()])
    w = np.outer(wx, wx).ravel()
    s, t = pts[:, 0], pts[:, 1]
    N = np.empty((len(w), 4))
    dN = np.empty((len(w), 4, 2))
    for a in range(4):
        ox, oy = a % 2, a // 2
        fx, gx = (s, 1.0) if ox else (1.0 - s, -1.0)
        fy, gy = (t, 1.0) if oy else (1.0 - t, -1.0)
        N[:, a] = fx * fy
        dN[:, a, 0] = gx * fy
        dN[:, a, 1] = fx * gy
    for arr in (pts, w, N, dN):
        arr.flags.writeable = False
    return pts, w, N, dN


@lru_cache(maxsize=None)
def _kernels(order):
    _, w, N, dN = reference_element(order)
    KQ = np.einsum("q,qad,qbd->qab", w, dN, dN)
    MQ = np.einsum("q,qa,qb->qab", w, N, N)
    return KQ, MQ


def quadrature_points(grid: StructuredGrid, order: int = 2) -> np.ndarray:
    """Physical quadrature points, shape (n_cells, nq, 2)."""
    pts = reference_element(order)[0]
    return grid.cell_origin[:, None, :] + grid.h * pts[None, :, :]


def interpolate(grid: StructuredGrid, nodal, order: int = 2) -> np.ndarray:
    """Values of a nodal Q1 field at the quadrature points, shape (n_cells, nq)."""
    N = reference_element(order)[2]
    return np.asarray(nodal)[grid.cell_nodes] @ N.T


def element_stiffness(grid, coef, order=2):
    """Cell stiffness matrices for quadrature-point coefficients ``coef`` (n_cells, nq)."""
    return np.einsum("eq,qab->eab", coef, _kernels(order)[0])


def element_mass(grid, coef, order=2):
    return grid.h ** 2 * np.einsum("eq,qab->eab", coef, _kernels(order)[1])


@dataclass(frozen=True, eq=False)
class State:
    """Nodal pressures of all continua at one time level, shape (N, n_nodes)."""

    values: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        v = np.array(self.values, dtype=float, ndmin=2)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @classmethod
    def zeros(cls, grid, N, t=0.0):
        return cls(np.zeros((N, grid.n_nodes)), t)

    @classmethod
    def from_interior(cls, grid, vec, N, t=0.0):
        v = np.zeros((N, grid.n_nodes))
        v[:, grid.interior_nodes] = np.asarray(vec).reshape(N, grid.n_interior)
        return cls(v, t)

    def interior(self, grid) -> np.ndarray:
        return self.values[:, grid.interior_nodes].ravel()


def conductivity(grid, kappa, nl, u_nodes, order=2):
    """kappa_cell * mu(u) at the quadrature points."""
    c = np.asarray(kappa)[:, None] * nl(interpolate(grid, u_nodes, order))
    if not np.all(np.isfinite(c)):
        raise AssemblyError("non-finite conductivity at a quadrature point")
    return c


def _transfer_coef(grid, law, u_i, u_l, order):
    q = law(interpolate(grid, u_i, order), interpolate(grid, u_l, order))
    if not np.all(np.isfinite(q)):
        raise AssemblyError("non-finite transfer coefficient at a quadrature point")
    return q


def coupled_elements(grid, spec, u: State, tau=None, order=2, stiffness=True):
    """Cell matrices of the linearized operator frozen at ``u``.

    Block ``(i, i)`` holds the stiffness of continuum ``i``, the transfer mass
    summed over its partners and, when ``tau`` is given, the mass over tau.
    Block ``(i, l)`` holds minus the transfer mass weighted by Q_il.
    """
    N = spec.N
    E = np.zeros((grid.n_cells, 4 * N, 4 * N))
    for i in range(N):
        sl = slice(4 * i, 4 * i + 4)
        if stiffness:
            E[:, sl, sl] += element_stiffness(
                grid, conductivity(grid, spec.kappa[i], spec.nonlinearities[i], u.values[i], order),
                order)
        if tau is not None:
            E[:, sl, sl] += element_mass(grid, np.full((grid.n_cells, order * order), 1.0 / tau), order)
    for (i, l), law in spec.transfer.active():
        Mq = element_mass(grid, _transfer_coef(grid, law, u.values[i], u.values[l], order), order)
        E[:, 4 * i:4 * i + 4, 4 * i:4 * i + 4] += Mq
        E[:, 4 * i:4 * i + 4, 4 * l:4 * l + 4] -= Mq
    return E


def element_dofs(grid: StructuredGrid, N: int = 1, interior: bool = True) -> np.ndarray:
    """Global dof of every local element index, shape (n_cells, 4N); -1 for eliminated nodes."""
    if interior:
        base, size = grid.interior_index[grid.cell_nodes], grid.n_interior
    else:
        base, size = grid.cell_nodes, grid.n_nodes
    out = np.concatenate([np.where(base >= 0, base + i * size, -1) for i in range(N)], axis=1)
    return out


class ScatterPattern:
    """Precomputed map from element entries to CSR storage positions."""

    def __init__(self, edofs, ndof):
        self.ndof = ndof
        k = edofs.shape[1]
        rows = np.repeat(edofs, k, axis=1).ravel()
        cols = np.tile(edofs, (1, k)).ravel()
        self.mask = (rows >= 0) & (cols >= 0)
        keys = rows[self.mask] * ndof + cols[self.mask]
        uniq, self.pos = np.unique(keys, return_inverse=True)
        self.indices = (uniq % ndof).astype(np.int32)
        self.indptr = np.searchsorted(uniq // ndof, np.arange(ndof + 1)).astype(np.int32)
        self.nnz = uniq.size

    def __call__(self, E) -> sp.csr_matrix:
        data = np.bincount(self.pos, weights=E.reshape(-1)[self.mask], minlength=self.nnz)
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()),
                             shape=(self.ndof, self.ndof))


@lru_cache(maxsize=16)
def scatter_pattern(n: int, N: int = 1, interior: bool = True) -> ScatterPattern:
    grid = StructuredGrid(n)
    size = grid.n_interior if interior else grid.n_nodes
    return ScatterPattern(element_dofs(grid, N, interior), N * size)


def scatter(grid, E, N=1, interior=True) -> sp.csr_matrix:
    """Sum cell matrices into a global sparse matrix."""
    return scatter_pattern(grid.n, N, interior)(E)


def scatter_vector(grid, e, N=1, interior=True) -> np.ndarray:
    """Sum cell vectors ``e`` (n_cells, 4N) into a global vector."""
    dofs = element_dofs(grid, N, interior)
    size = (grid.n_interior if interior else grid.n_nodes) * N
    keep = dofs >= 0
    return np.bincount(dofs[keep], weights=e[keep], minlength=size)


def _clean(A):
    A.eliminate_zeros()
    return A


def assemble_stiffness(grid, kappa, nl, u_nodes, order=2, full=False):
    """Matrix of the form (kappa mu(u) grad p, grad v) on one continuum."""
    E = element_stiffness(grid, conductivity(grid, kappa, nl, u_nodes, order), order)
    return _clean(scatter(grid, E, 1, not full))


def assemble_coupling(grid, transfer, u: State, order=2, full=False):
    """Block matrix of the transfer terms sum_l (Q_il (p_i - p_l), v_i)."""
    N = u.N
    E = np.zeros((grid.n_cells, 4 * N, 4 * N))
    for (i, l), law in transfer.active():
        if i >= N or l >= N:
            raise ValueError(f"transfer pair {(i, l)} outside {N} continua")
        Mq = element_mass(grid, _transfer_coef(grid, law, u.values[i], u.values[l], order), order)
        E[:, 4 * i:4 * i + 4, 4 * i:4 * i + 4] += Mq
        E[:, 4 * i:4 * i + 4, 4 * l:4 * l + 4] -= Mq
    return _clean(scatter(grid, E, N, not full))


def assemble_mass(grid, order=2, full=False):
    E = element_mass(grid, np.ones((grid.n_cells, order * order)), order)
    return _clean(scatter(grid, E, 1, not full))


@lru_cache(maxsize=16)
def _pou_at_qp(n, Hdiv, order):
    grid = StructuredGrid(n)
    part = CoarsePartition(grid, Hdiv)
    xy = quadrature_points(grid, order)
    return part.pou_gradient_sq(xy.reshape(-1, 2)).reshape(xy.shape[:2])


def pou_at_quadrature(partition: CoarsePartition, order=2) -> np.ndarray:
    """sum_k |grad chi_k|^2 at the quadrature points, shape (n_cells, nq)."""
    return _pou_at_qp(partition.grid.n, partition.Hdiv, order)


def assemble_weighted_mass(grid, partition, kappa, nl, u_nodes, order=2, full=False):
    """Mass matrix weighted by kappa mu(u) sum_k |grad chi_k|^2."""
    coef = conductivity(grid, kappa, nl, u_nodes, order) * pou_at_quadrature(partition, order)
    return _clean(scatter(grid, element_mass(grid, coef, order), 1, not full))


def assemble_load(grid, f, t=0.0, order=2, full=False):
    """Vector of (f(t, .), phi_node) for a vectorized ``f(t, x, y)``."""
    _, w, N, _ = reference_element(order)
    xy = quadrature_points(grid, order)
    fq = np.broadcast_to(np.asarray(f(t, xy[..., 0], xy[..., 1]), dtype=float), xy.shape[:2])
    e = grid.h ** 2 * (fq * w) @ N
    return scatter_vector(grid, e, 1, not full)


def restrict(op, idx):
    """Principal submatrix or subvector on the index set ``idx``."""
    idx = np.asarray(idx)
    if idx.size == 0:
        raise ValueError("cannot restrict to an empty index set")
    if sp.issparse(op):
        op = sp.csr_matrix(op)
        return op[idx][:, idx]
    op = np.asarray(op)
    if op.ndim == 1:
        return op[idx]
    return op[np.ix_(idx, idx)]
