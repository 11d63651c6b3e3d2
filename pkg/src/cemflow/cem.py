"""Constraint energy minimizing multiscale basis construction.

Offline pipeline: a sample set of fine states freezes the nonlinear
coefficients into the energy form ``A_Q`` and the weighted mass form ``R``;
each coarse block gets the lowest eigenfunctions of ``A_Q phi = lambda R phi``
on its closure; every eigenfunction is then extended to a basis function of
minimal energy on an oversampled region subject to the orthogonality
constraints against all auxiliary functions of the region.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .assembly import (State, conductivity, coupled_elements, element_dofs,
                       element_mass, pou_at_quadrature, scatter)
from .linalg import generalized_symmetric_eig, solve_sparse, solve_saddle
from .mesh import CoarsePartition, StructuredGrid, oversample
from .stepping import CoarseSpace


# ---------------------------------------------------------------- samples

@dataclass(frozen=True, eq=False)
class SampleSet:
    states: tuple
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).ravel()
        if len(self.states) == 0 or len(self.states) != w.size:
            raise ValueError("need one positive weight per sample state")
        if np.any(w <= 0):
            raise ValueError("sample weights must be positive")
        n = {s.values.shape for s in self.states}
        if len(n) != 1:
            raise ValueError("sample states must share grid and continuum count")
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "weights", w)

    def scaled(self, c) -> "SampleSet":
        return SampleSet(self.states, c * self.weights)


def sample_source_steady(p_star: State) -> SampleSet:
    return SampleSet((p_star,), [1.0])


def sample_source_transient(trajectory, S=None) -> SampleSet:
    """Trajectory levels with trapezoidal weights (1/2, 1, ..., 1, 1/2)."""
    states = tuple(trajectory)
    if len(states) < 2 or (S is not None and len(states) != S + 1):
        raise ValueError(f"expected {'S+1' if S is None else S + 1} trajectory levels, got {len(states)}")
    w = np.ones(len(states))
    w[0] = w[-1] = 0.5
    return SampleSet(states, w)


# ---------------------------------------------------------------- forms

def sampled_elements(partition: CoarsePartition, spec, samples: SampleSet, order=2):
    """Cell matrices of the sampled energy form (symmetrized) and weighted mass form."""
    grid = partition.grid
    N = spec.N
    pou = pou_at_quadrature(partition, order)
    A = np.zeros((grid.n_cells, 4 * N, 4 * N))
    R = np.zeros_like(A)
    for u, w in zip(samples.states, samples.weights):
        A += w * coupled_elements(grid, spec, u, None, order)
        for i in range(N):
            c = conductivity(grid, spec.kappa[i], spec.nonlinearities[i], u.values[i], order)
            R[:, 4 * i:4 * i + 4, 4 * i:4 * i + 4] += w * element_mass(grid, c * pou, order)
    A = 0.5 * (A + A.transpose(0, 2, 1))
    return A, R


def block_dofs(partition: CoarsePartition, j: int, N: int) -> np.ndarray:
    """Interior dofs of the closed block ``j`` (domain boundary nodes dropped)."""
    grid = partition.grid
    idx = grid.interior_index[partition.block_nodes[j]]
    idx = idx[idx >= 0]
    return np.concatenate([idx + i * grid.n_interior for i in range(N)])


def local_matrix(grid, E, cells, dofs, N):
    """Sum the cell matrices of ``cells`` into the dofs ``dofs`` (others dropped)."""
    pos = np.full(N * grid.n_interior, -1, dtype=np.int64)
    pos[dofs] = np.arange(dofs.size)
    ed = element_dofs(grid, N)[cells]
    loc = np.where(ed >= 0, pos[np.maximum(ed, 0)], -1)
    k = loc.shape[1]
    rows = np.repeat(loc, k, axis=1).ravel()
    cols = np.tile(loc, (1, k)).ravel()
    keep = (rows >= 0) & (cols >= 0)
    return sp.csr_matrix((E[cells].reshape(-1)[keep], (rows[keep], cols[keep])),
                         shape=(dofs.size, dofs.size))


class SampledForms:
    """Sampled bilinear forms of one problem on one coarse partition.

    The forms are assembled with the weights divided by their total ``W``;
    ``A_elems`` and ``R_elems`` hold these per-unit-weight cell matrices and
    every offline solve uses them, so a common factor on the weights drops
    out exactly. ``W * A_elems`` is the plain weighted sum.
    """

    def __init__(self, partition: CoarsePartition, spec, samples: SampleSet, order=2):
        if spec.n != partition.grid.n:
            raise ValueError("problem and partition live on different grids")
        self.partition, self.spec, self.samples = partition, spec, samples
        self.N = spec.N
        self.total = float(samples.weights.sum())
        unit = SampleSet(samples.states, samples.weights / self.total)
        self.A_elems, self.R_elems = sampled_elements(partition, spec, unit, order)

    @cached_property
    def A(self) -> sp.csr_matrix:
        """Global sampled energy matrix on the interior dofs (per unit weight)."""
        return scatter(self.partition.grid, self.A_elems, self.N)

    def block(self, j):
        """``(A_Q, R, dofs)`` of block ``j`` on its local space (per unit weight)."""
        dofs = block_dofs(self.partition, j, self.N)
        cells = self.partition.block_cells[j]
        grid = self.partition.grid
        return (local_matrix(grid, self.A_elems, cells, dofs, self.N),
                local_matrix(grid, self.R_elems, cells, dofs, self.N), dofs)

    def region(self, region):
        """``(A_Q, dofs)`` restricted to the interior nodes of an oversampled region."""
        grid = self.partition.grid
        idx = grid.interior_index[region.interior_nodes]
        dofs = np.concatenate([idx + i * grid.n_interior for i in range(self.N)])
        return self.A[dofs][:, dofs], dofs


def sampled_forms(partition, spec, samples, j=None, region=None):
    """Sampled ``(A_Q, R)`` on block ``j``, or ``A_Q`` on an oversampled region."""
    forms = SampledForms(partition, spec, samples)
    if region is not None:
        return forms.total * forms.region(region)[0]
    A, R, _ = forms.block(j)
    return forms.total * A, forms.total * R


# ---------------------------------------------------------------- auxiliary space

@dataclass(eq=False)
class AuxiliarySpace:
    """Per-block eigenpairs of the local spectral problem.

    ``vectors[j]`` has shape (len(dofs[j]), counts[j]); ``weighted[j]`` holds
    ``R_j @ vectors[j]``, the constraint functionals. ``R[j]`` is the local
    weighted mass form per unit of total sample weight.
    """

    partition: CoarsePartition
    N: int
    eigenvalues: list
    vectors: list
    weighted: list
    dofs: list
    R: list = field(repr=False)

    @property
    def counts(self) -> np.ndarray:
        return np.array([v.shape[1] for v in self.vectors])

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.counts)])


def solve_auxiliary(forms: SampledForms, L) -> AuxiliarySpace:
    """Lowest eigenpairs per block; ``L`` is a count or one count per block.

    The pencil is the per-unit-weight one of ``forms``, so the eigenvectors,
    normalized in that ``R``, do not depend on the scale of the weights.
    """
    part = forms.partition
    Ls = np.broadcast_to(np.asarray(L, dtype=int), (part.n_blocks,))
    lams, vecs, wts, dofs_all, Rs = [], [], [], [], []
    for j in range(part.n_blocks):
        A, R, dofs = forms.block(j)
        if Ls[j] > dofs.size:
            raise ValueError(f"block {j} has only {dofs.size} local dofs, {Ls[j]} requested")
        lam, phi = generalized_symmetric_eig(A, R, int(Ls[j]))
        lams.append(lam)
        vecs.append(phi)
        wts.append(R @ phi)
        dofs_all.append(dofs)
        Rs.append(R)
    return AuxiliarySpace(part, forms.N, lams, vecs, wts, dofs_all, Rs)


# ---------------------------------------------------------------- basis

@dataclass(eq=False)
class MultiscaleSpace:
    """Localized basis matrix ``G`` (fine interior dofs x basis functions).

    Column ``offsets[j] + k`` is the basis function of eigenfunction ``k``
    of block ``j``.
    """

    partition: CoarsePartition
    G: sp.csc_matrix
    counts: np.ndarray
    layers: int
    N: int
    forms: SampledForms | None = field(default=None, repr=False)
    aux: AuxiliarySpace | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.G.shape[1]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.counts)])

    def column(self, j, k) -> np.ndarray:
        return self.G[:, self.offsets[j] + k].toarray().ravel()

    @cached_property
    def coarse(self) -> CoarseSpace:
        return CoarseSpace(self.partition, self.G, self.N, self.layers)


def _constraints(aux: AuxiliarySpace, blocks, pos):
    """Constraint rows of all auxiliary functions of ``blocks`` in region coordinates."""
    rows, cols, vals = [], [], []
    r0 = 0
    for z in blocks:
        W = aux.weighted[z]
        loc = pos[aux.dofs[z]]
        keep = np.flatnonzero(loc >= 0)
        for k in range(W.shape[1]):
            rows.append(np.full(keep.size, r0 + k))
            cols.append(loc[keep])
            vals.append(W[keep, k])
        r0 += W.shape[1]
    C = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(r0, pos.max() + 1))
    C.eliminate_zeros()
    return C


def localized_columns(forms: SampledForms, aux: AuxiliarySpace, j: int, m: int):
    """Basis functions of block ``j`` on ``K_{j,m}``: ``(dofs, values)``."""
    region = oversample(forms.partition, j, m)
    A, dofs = forms.region(region)
    pos = np.full(forms.N * forms.partition.grid.n_interior, -1, dtype=np.int64)
    pos[dofs] = np.arange(dofs.size)
    C = _constraints(aux, region.blocks, pos)
    counts = aux.counts
    first = int(sum(counts[z] for z in region.blocks if z < j))
    g = np.zeros((C.shape[0], counts[j]))
    g[first:first + counts[j]] = np.eye(counts[j])
    x, _ = solve_saddle(A, C, g)
    return dofs, x


def build_basis(forms: SampledForms, aux: AuxiliarySpace, m: int) -> MultiscaleSpace:
    """Assemble the localized basis with ``m`` oversampling layers."""
    part = forms.partition
    if not 1 <= m <= part.Hdiv:
        raise ValueError(f"layer count must lie in [1, {part.Hdiv}], got {m}")
    offsets = aux.offsets
    rows, cols, vals = [], [], []
    for j in range(part.n_blocks):
        dofs, x = localized_columns(forms, aux, j, m)
        L = x.shape[1]
        rows.append(np.repeat(dofs[None, :], L, axis=0).ravel())
        cols.append(np.repeat(np.arange(offsets[j], offsets[j] + L), dofs.size))
        vals.append(x.T.ravel())
    ndof = forms.N * part.grid.n_interior
    G = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(ndof, offsets[-1]))
    return MultiscaleSpace(part, G, aux.counts, m, forms.N, forms, aux)


def phi_orthogonality_residual(space: MultiscaleSpace, j: int) -> float:
    """max |R(psi, phi) - delta| over the columns of block ``j`` and the aux functions of its region."""
    aux = space.aux
    region = oversample(space.partition, j, space.layers)
    worst = 0.0
    for k in range(space.counts[j]):
        psi = space.column(j, k)
        for z in region.blocks:
            r = aux.weighted[z].T @ psi[aux.dofs[z]]
            if z == j:
                r[k] -= 1.0
            worst = max(worst, float(np.max(np.abs(r))))
    return worst


def decay_profile(space: MultiscaleSpace, j: int, k: int) -> np.ndarray:
    """Energy fraction of the global basis function ``(j, k)`` outside ``K_{j,l}``, l = 0..Hdiv."""
    forms, part = space.forms, space.partition
    if forms is None or space.aux is None:
        raise ValueError("decay profile needs the sampled forms and auxiliary space")
    dofs, x = localized_columns(forms, space.aux, j, part.Hdiv)
    grid = part.grid
    full = np.zeros(forms.N * grid.n_interior)
    full[dofs] = x[:, k]
    ed = element_dofs(grid, forms.N)
    xe = np.where(ed >= 0, full[np.maximum(ed, 0)], 0.0)
    energy = np.einsum("ea,eab,eb->e", xe, forms.A_elems, xe)
    total = energy.sum()
    out = []
    for l in range(part.Hdiv + 1):
        inside = energy[oversample(part, j, l).cells].sum()
        out.append(max(total - inside, 0.0) / total)
    return np.array(out)


def project_initial(p_h0: State, space: MultiscaleSpace, spec) -> np.ndarray:
    """Coefficients of the Galerkin projection of ``p_h0`` in the energy frozen at ``p_h0``."""
    grid = space.partition.grid
    v = p_h0.interior(grid)
    if not np.any(v):
        return np.zeros(space.dim)
    E = coupled_elements(grid, spec, p_h0, None)
    rhs = space.G.T @ (scatter(grid, E, spec.N) @ v)
    return solve_sparse(space.coarse.reduce(E), rhs)


# ---------------------------------------------------------------- persistence

def save_basis(space: MultiscaleSpace, path, key: str = ""):
    """Write the basis matrix in compressed-column form with a small header."""
    G = space.G.tocsc()
    header = {"shape": list(G.shape), "layers": int(space.layers), "counts": space.counts.tolist(),
              "Hdiv": space.partition.Hdiv, "n": space.partition.grid.n, "N": space.N, "key": key}
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), data=G.data,
                 indices=G.indices, indptr=G.indptr)


def load_basis(path, key: str | None = None) -> MultiscaleSpace | None:
    """Read a basis written by :func:`save_basis`; None if ``key`` does not match."""
    path = Path(path)
    if not path.exists():
        return None
    with np.load(path) as z:
        header = json.loads(str(z["header"]))
        if key is not None and header["key"] != key:
            return None
        G = sp.csc_matrix((z["data"], z["indices"], z["indptr"]), shape=tuple(header["shape"]))
    part = CoarsePartition(StructuredGrid(header["n"]), header["Hdiv"])
    return MultiscaleSpace(part, G, np.array(header["counts"]), header["layers"], header["N"])
