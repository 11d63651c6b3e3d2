"""Structured fine grids, coarse block partitions and oversampled regions.

Nodes and cells are numbered row-major from the lower-left corner of the
unit square: node ``iy*(n+1) + ix`` sits at ``(ix*h, iy*h)`` and cell
``cy*n + cx`` covers ``[cx*h, (cx+1)*h] x [cy*h, (cy+1)*h]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp


def _readonly(a):
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class StructuredGrid:
    """Uniform quadrilateral grid of ``n x n`` cells on the unit square."""

    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise ValueError(f"grid needs n >= 2 cells per side, got {self.n}")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def nodes_per_side(self) -> int:
        return self.n + 1

    @property
    def n_nodes(self) -> int:
        return (self.n + 1) ** 2

    @property
    def n_cells(self) -> int:
        return self.n * self.n

    @property
    def n_interior(self) -> int:
        return (self.n - 1) ** 2

    @cached_property
    def node_xy(self) -> np.ndarray:
        """Node coordinates, shape (n_nodes, 2)."""
        t = np.arange(self.n + 1) / self.n
        x, y = np.meshgrid(t, t)
        return _readonly(np.column_stack([x.ravel(), y.ravel()]))

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        ij = np.arange(self.n + 1)
        on = (ij == 0) | (ij == self.n)
        return _readonly((on[:, None] | on[None, :]).ravel())

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        return _readonly(np.flatnonzero(~self.boundary_mask))

    @cached_property
    def interior_index(self) -> np.ndarray:
        """Map node id -> interior dof index, -1 on the boundary."""
        idx = np.full(self.n_nodes, -1, dtype=np.int64)
        idx[self.interior_nodes] = np.arange(self.n_interior)
        return _readonly(idx)

    @cached_property
    def cell_nodes(self) -> np.ndarray:
        """Corner nodes of every cell, shape (n_cells, 4).

        Local order is lower-left, lower-right, upper-left, upper-right, so
        local node ``a`` has offsets ``(a % 2, a // 2)``.
        """
        n = self.n
        c = np.arange(n)
        ll = (c[:, None] * (n + 1) + c[None, :]).ravel()
        return _readonly(np.column_stack([ll, ll + 1, ll + n + 1, ll + n + 2]))

    @cached_property
    def cell_origin(self) -> np.ndarray:
        """Lower-left corner coordinates of every cell, shape (n_cells, 2)."""
        return self.node_xy[self.cell_nodes[:, 0]]

    def node_id(self, ix, iy):
        return np.asarray(iy) * (self.n + 1) + np.asarray(ix)

    def cell_id(self, cx, cy):
        return np.asarray(cy) * self.n + np.asarray(cx)


def build_fine_grid(n: int) -> StructuredGrid:
    return StructuredGrid(int(n))


@dataclass(frozen=True)
class CoarsePartition:
    """Coarsening of a fine grid into ``Hdiv x Hdiv`` square blocks.

    Block ``j = by*Hdiv + bx`` and coarse node ``k = ky*(Hdiv+1) + kx`` use
    the same row-major convention as the fine grid.
    """

    grid: StructuredGrid
    Hdiv: int

    def __post_init__(self):
        if self.Hdiv < 2:
            raise ValueError(f"need at least 2 coarse blocks per side, got {self.Hdiv}")
        if self.grid.n % self.Hdiv:
            raise ValueError(
                f"coarse divisions {self.Hdiv} do not divide fine cells {self.grid.n}")

    @property
    def H(self) -> float:
        return 1.0 / self.Hdiv

    @property
    def cells_per_block(self) -> int:
        """Fine cells along one side of a block."""
        return self.grid.n // self.Hdiv

    @property
    def n_blocks(self) -> int:
        return self.Hdiv ** 2

    @property
    def n_coarse_nodes(self) -> int:
        return (self.Hdiv + 1) ** 2

    def block_ij(self, j):
        return np.asarray(j) % self.Hdiv, np.asarray(j) // self.Hdiv

    @cached_property
    def block_of_cell(self) -> np.ndarray:
        r = self.cells_per_block
        c = np.arange(self.grid.n) // r
        return _readonly((c[:, None] * self.Hdiv + c[None, :]).ravel())

    @cached_property
    def block_cells(self) -> np.ndarray:
        """Fine cells of every block, shape (n_blocks, r*r), row-major inside."""
        r, n = self.cells_per_block, self.grid.n
        loc = (np.arange(r)[:, None] * n + np.arange(r)[None, :]).ravel()
        bx, by = self.block_ij(np.arange(self.n_blocks))
        start = by * r * n + bx * r
        return _readonly(start[:, None] + loc[None, :])

    @cached_property
    def block_nodes(self) -> np.ndarray:
        """Fine nodes of every closed block, shape (n_blocks, (r+1)**2)."""
        r, n1 = self.cells_per_block, self.grid.n + 1
        loc = (np.arange(r + 1)[:, None] * n1 + np.arange(r + 1)[None, :]).ravel()
        bx, by = self.block_ij(np.arange(self.n_blocks))
        start = by * r * n1 + bx * r
        return _readonly(start[:, None] + loc[None, :])

    @cached_property
    def hat_values(self) -> sp.csr_matrix:
        """Coarse hat functions at the fine nodes, shape (n_coarse_nodes, n_nodes)."""
        n1, H1 = self.grid.n + 1, self.Hdiv + 1
        t = np.arange(n1) / self.grid.n * self.Hdiv
        # 1D hats: node i has weight on the two coarse nodes around it
        k0 = np.minimum(np.floor(t).astype(np.int64), self.Hdiv - 1)
        s = t - k0
        rows, cols, vals = [], [], []
        nodes = np.arange(n1 * n1)
        ix, iy = nodes % n1, nodes // n1
        for ox in (0, 1):
            wx = s[ix] if ox else 1.0 - s[ix]
            for oy in (0, 1):
                wy = s[iy] if oy else 1.0 - s[iy]
                rows.append((k0[iy] + oy) * H1 + k0[ix] + ox)
                cols.append(nodes)
                vals.append(wx * wy)
        m = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(self.n_coarse_nodes, self.grid.n_nodes))
        m.eliminate_zeros()
        return m

    def hat_gradients(self, xy):
        """Gradients of the four hats active on the coarse cell of each point.

        Returns ``(k, grad)`` with ``k`` of shape (npts, 4) holding the coarse
        node ids and ``grad`` of shape (npts, 4, 2).
        """
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        H = self.H
        c = np.minimum(np.floor(xy * self.Hdiv).astype(np.int64), self.Hdiv - 1)
        st = xy * self.Hdiv - c
        s, t = st[:, 0], st[:, 1]
        k = np.empty((len(xy), 4), dtype=np.int64)
        grad = np.empty((len(xy), 4, 2))
        for a in range(4):
            ox, oy = a % 2, a // 2
            wx = s if ox else 1.0 - s
            wy = t if oy else 1.0 - t
            k[:, a] = (c[:, 1] + oy) * (self.Hdiv + 1) + c[:, 0] + ox
            grad[:, a, 0] = (1.0 if ox else -1.0) / H * wy
            grad[:, a, 1] = (1.0 if oy else -1.0) / H * wx
        return k, grad

    def pou_gradient_sq(self, xy) -> np.ndarray:
        """Sum over coarse nodes of the squared hat gradient at each point."""
        _, grad = self.hat_gradients(xy)
        return np.einsum("pad,pad->p", grad, grad)


def build_coarse_partition(grid: StructuredGrid, Hdiv: int) -> CoarsePartition:
    return CoarsePartition(grid, int(Hdiv))


@dataclass(frozen=True)
class OversampledRegion:
    """Block ``j`` grown by ``layers`` rings of coarse blocks, clipped to the domain.

    ``box`` is the inclusive-exclusive block range ``(bx0, bx1, by0, by1)``.
    """

    partition: CoarsePartition
    block: int
    layers: int
    box: tuple

    @cached_property
    def blocks(self) -> np.ndarray:
        bx0, bx1, by0, by1 = self.box
        bx, by = np.meshgrid(np.arange(bx0, bx1), np.arange(by0, by1))
        return _readonly((by * self.partition.Hdiv + bx).ravel())

    def _node_range(self):
        r = self.partition.cells_per_block
        bx0, bx1, by0, by1 = self.box
        return bx0 * r, bx1 * r, by0 * r, by1 * r

    @cached_property
    def nodes(self) -> np.ndarray:
        """All fine nodes of the closed region, ascending."""
        x0, x1, y0, y1 = self._node_range()
        g = self.partition.grid
        ix, iy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        return _readonly(g.node_id(ix, iy).ravel())

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        """Nodes strictly inside the region (hence also off the domain boundary)."""
        x0, x1, y0, y1 = self._node_range()
        g = self.partition.grid
        ix, iy = np.meshgrid(np.arange(x0 + 1, x1), np.arange(y0 + 1, y1))
        return _readonly(g.node_id(ix, iy).ravel())

    @cached_property
    def cells(self) -> np.ndarray:
        x0, x1, y0, y1 = self._node_range()
        g = self.partition.grid
        cx, cy = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1))
        return _readonly(g.cell_id(cx, cy).ravel())


def oversample(partition: CoarsePartition, j: int, m: int) -> OversampledRegion:
    """Region of all blocks within Chebyshev distance ``m`` of block ``j``."""
    if not 0 <= m <= partition.Hdiv:
        raise ValueError(f"layer count must lie in [0, {partition.Hdiv}], got {m}")
    if not 0 <= j < partition.n_blocks:
        raise ValueError(f"block {j} out of range")
    bx, by = (int(v) for v in partition.block_ij(j))
    nb = partition.Hdiv
    box = (max(bx - m, 0), min(bx + m + 1, nb), max(by - m, 0), min(by + m + 1, nb))
    return OversampledRegion(partition, int(j), int(m), box)


def default_layers(Hdiv: int) -> int:
    """Oversampling layers ``10 log(Hdiv) / log(64)`` rounded half up."""
    if Hdiv < 2:
        raise ValueError("Hdiv must be at least 2")
    return int(math.floor(10.0 * math.log(Hdiv) / math.log(64.0) + 0.5))
