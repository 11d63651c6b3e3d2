"""Picard-linearized backward Euler, generic over the trial space.

A space maps coefficient vectors to fine interior dofs (``prolong``) and
reduces fine operators and load vectors onto itself (``reduce``,
``reduce_vector``). :class:`FineSpace` is the identity on the fine interior
dofs; :class:`CoarseSpace` wraps a multiscale basis matrix ``G``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .assembly import (State, assemble_load, assemble_mass, coupled_elements,
                       ScatterPattern, scatter)
from .linalg import solve_sparse
from .mesh import CoarsePartition, StructuredGrid


class _SpaceBase:
    grid: StructuredGrid
    N: int

    @cached_property
    def mass(self) -> sp.csr_matrix:
        """Consistent mass matrix of one continuum on the interior dofs."""
        return assemble_mass(self.grid)

    def norms(self, p) -> np.ndarray:
        """L2 norm of each continuum of a stacked fine interior vector."""
        P = np.asarray(p).reshape(self.N, -1)
        return np.sqrt(np.maximum(np.einsum("ij,ij->i", P, (self.mass @ P.T).T), 0.0))

    def state(self, c, t=0.0) -> State:
        return State.from_interior(self.grid, self.prolong(c), self.N, t)


class FineSpace(_SpaceBase):
    """All interior fine dofs of every continuum."""

    def __init__(self, grid: StructuredGrid, N: int = 1):
        self.grid, self.N = grid, N
        self.dim = N * grid.n_interior

    def reduce(self, E):
        return scatter(self.grid, E, self.N)

    def reduce_vector(self, b):
        return np.asarray(b)

    def prolong(self, c):
        return np.asarray(c)


class CoarseSpace(_SpaceBase):
    """Span of the columns of ``G`` (fine interior dofs x basis functions).

    Galerkin matrices ``G^T A G`` are accumulated block by block: on each
    coarse block the cell matrices are summed into a small local matrix and
    multiplied with the dense rows of ``G`` that touch the block. The result
    is a dense matrix, factored directly.
    """

    def __init__(self, partition: CoarsePartition, G, N: int = 1, layers=None):
        self.partition, self.grid, self.N = partition, partition.grid, N
        self.layers = layers
        self.G = sp.csc_matrix(G)
        self.dim = self.G.shape[1]
        self._prepare_blocks()

    def _prepare_blocks(self):
        part, grid, N = self.partition, self.grid, self.N
        r = part.cells_per_block
        nb = (r + 1) ** 2
        self._nl = nl = N * nb
        # local dof of each cell entry inside its block's closure
        cx, cy = np.meshgrid(np.arange(r), np.arange(r))
        ll = (cy * (r + 1) + cx).ravel()
        loc_nodes = np.column_stack([ll, ll + 1, ll + r + 1, ll + r + 2])
        loc = np.concatenate([loc_nodes + i * nb for i in range(N)], axis=1)
        broken = np.empty((grid.n_cells, 4 * N), dtype=np.int64)
        broken[part.block_cells.ravel()] = (
            np.arange(part.n_blocks)[:, None, None] * nl + loc[None]).reshape(-1, 4 * N)
        self._pattern = ScatterPattern(broken, part.n_blocks * nl)

        Gr = self.G.tocsr()
        gidx = grid.interior_index[part.block_nodes]          # (n_blocks, nb)
        self._X, self._runs, self._boxes = [], [], []
        for j in range(part.n_blocks):
            rows = np.concatenate([np.where(gidx[j] >= 0, gidx[j] + i * grid.n_interior, -1)
                                   for i in range(N)])
            keep = np.flatnonzero(rows >= 0)
            sub = Gr[rows[keep]]
            cols = self._block_columns(j, sub)
            X = np.zeros((nl, cols.size))
            X[keep] = sub[:, cols].toarray()
            self._X.append(X)
            brk = np.flatnonzero(np.diff(cols) != 1) + 1
            starts = np.concatenate([[0], brk])
            stops = np.concatenate([brk, [cols.size]])
            self._runs.append([(a, b, int(cols[a])) for a, b in zip(starts, stops)])

    def _block_columns(self, j, sub):
        """Columns of ``G`` with support on block ``j``.

        With a uniform count per block and a known layer count these are the
        basis functions of all blocks within the oversampling distance, a
        rectangle of blocks, and the reduction uses one strided update per
        block. Otherwise the nonzero columns are taken as found.
        """
        found = np.unique(sub.indices)
        part, m = self.partition, self.layers
        if m is None or self.dim % part.n_blocks:
            self._boxes.append(None)
            return found
        L = self.dim // part.n_blocks
        bx, by = (int(v) for v in part.block_ij(j))
        x0, x1 = max(bx - m, 0), min(bx + m + 1, part.Hdiv)
        y0, y1 = max(by - m, 0), min(by + m + 1, part.Hdiv)
        bxs, bys = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1))
        cols = ((bys * part.Hdiv + bxs).ravel()[:, None] * L + np.arange(L)).ravel()
        if not np.all(np.isin(found, cols)):
            self._boxes.append(None)
            return found
        self._boxes.append((y0, y1, x0 * L, x1 * L))
        return cols

    def reduce(self, E):
        Ab = self._pattern(E)
        ip, ind, dat = Ab.indptr, Ab.indices, Ab.data
        nl, Hd = self._nl, self.partition.Hdiv
        K = np.zeros((self.dim, self.dim))
        if self.dim % Hd == 0:
            K4 = K.reshape(Hd, self.dim // Hd, Hd, self.dim // Hd)
        for j, (X, runs, box) in enumerate(zip(self._X, self._runs, self._boxes)):
            r0, r1 = j * nl, (j + 1) * nl
            a, b = ip[r0], ip[r1]
            Aj = sp.csr_matrix((dat[a:b], ind[a:b] - r0, ip[r0:r1 + 1] - a), shape=(nl, nl))
            Z = X.T @ (Aj @ X)
            if box is not None:
                y0, y1, c0, c1 = box
                K4[y0:y1, c0:c1, y0:y1, c0:c1] += Z.reshape(y1 - y0, c1 - c0, y1 - y0, c1 - c0)
                continue
            for a0, a1, ga in runs:
                for b0, b1, gb in runs:
                    K[ga:ga + a1 - a0, gb:gb + b1 - b0] += Z[a0:a1, b0:b1]
        return K

    def reduce_vector(self, b):
        return self.G.T @ np.asarray(b)

    def prolong(self, c):
        return self.G @ np.asarray(c)


@dataclass
class PicardReport:
    """Record of one Picard solve.

    ``differences[n]`` holds the relative successive difference of every
    continuum after linear solve ``n+1``; ``distances[n]`` is the stacked L2
    distance of iterate ``n`` to the last iterate.
    """

    iterations: int
    differences: list
    converged: bool
    distances: np.ndarray
    solution: np.ndarray = field(repr=False)

    @property
    def contraction(self):
        try:
            return contraction_estimate(self)
        except ValueError:
            return None


def contraction_estimate(report: PicardReport) -> float:
    """Geometric mean of |p^{n+1} - p^a| / |p^n - p^a| over the recorded iterates."""
    d = np.asarray(report.distances, dtype=float)
    if d.size < 3:
        raise ValueError("contraction estimate needs at least three iterates")
    d = d[:-1]
    if np.any(d[1:] == 0):
        return 0.0
    if np.any(d[:-1] == 0):
        raise ValueError("iterates reached the limit before the final step")
    return float(np.exp(np.mean(np.log(d[1:] / d[:-1]))))


def _load(space, spec, t):
    return np.concatenate([assemble_load(space.grid, f, t) for f in spec.sources])


def picard_step(space, spec, prev, guess, tau=None, t=0.0, delta0=1e-5, max_iter=50):
    """Solve one (time) level by Picard iteration in ``space``.

    Parameters
    ----------
    prev : ndarray or None
        Coefficients of the previous time level; ignored when ``tau`` is None.
    guess : ndarray
        Initial Picard iterate (coefficients in ``space``).

    Returns
    -------
    c : ndarray
        Coefficients of the last iterate.
    report : PicardReport
    """
    if not delta0 > 0:
        raise ValueError("delta0 must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    grid, N = space.grid, spec.N
    b = _load(space, spec, t)
    if tau is not None:
        P = space.prolong(prev).reshape(N, -1)
        b = b + (space.mass @ P.T).T.ravel() / tau
    rhs = space.reduce_vector(b)

    c = np.asarray(guess, dtype=float)
    p = space.prolong(c)
    iterates, history = [p], []
    converged = False
    for _ in range(max_iter):
        u = State.from_interior(grid, p, N, t)
        K = space.reduce(coupled_elements(grid, spec, u, tau))
        c_new = solve_sparse(K, rhs)
        p_new = space.prolong(c_new)
        den = space.norms(p)
        diff = space.norms(p_new - p)
        rel = np.where(den > 0, diff / np.where(den > 0, den, 1.0), diff)
        history.append(rel)
        iterates.append(p_new)
        c, p = c_new, p_new
        if np.all(rel <= delta0):
            converged = True
            break
    dist = np.array([np.linalg.norm(space.norms(q - p)) for q in iterates])
    return c, PicardReport(len(history), history, converged, dist, c)


def steady_solve(space, spec, delta0=1e-5, max_iter=50, guess=None):
    """Picard iteration on the time-free problem; zero initial guess by default."""
    if not spec.steady:
        raise ValueError(f"{spec.name} is transient; use march")
    if guess is None:
        guess = np.zeros(space.dim)
    c, report = picard_step(space, spec, None, guess, None, 0.0, delta0, max_iter)
    return space.state(c), report


@dataclass
class Trajectory:
    times: np.ndarray
    coefficients: list
    states: list
    reports: list


def initial_coefficients(space, spec):
    """Fine interpolant of the initial data; zero when none is given."""
    if spec.initial is None:
        return np.zeros(space.dim)
    if not isinstance(space, FineSpace):
        raise ValueError("nonzero initial data must be projected onto the coarse space first")
    xy = space.grid.node_xy[space.grid.interior_nodes]
    return np.concatenate([np.asarray(g(xy[:, 0], xy[:, 1]), dtype=float) for g in spec.initial])


def march(space, spec, delta0=1e-5, max_iter=50, c0=None):
    """Backward Euler over ``S`` steps; each Picard solve starts at the previous level."""
    if spec.steady:
        raise ValueError(f"{spec.name} is steady; use steady_solve")
    tau = spec.tau
    c = initial_coefficients(space, spec) if c0 is None else np.asarray(c0, dtype=float)
    times = tau * np.arange(spec.S + 1)
    times[-1] = spec.T
    coeffs, states, reports = [c], [space.state(c, 0.0)], []
    for s in range(spec.S):
        c, rep = picard_step(space, spec, c, c, tau, times[s + 1], delta0, max_iter)
        coeffs.append(c)
        states.append(space.state(c, times[s + 1]))
        reports.append(rep)
    return Trajectory(times, coeffs, states, reports)
