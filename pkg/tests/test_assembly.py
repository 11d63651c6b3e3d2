import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cemflow.assembly import (AssemblyError, State, assemble_coupling, assemble_load,
                              assemble_mass, assemble_stiffness, assemble_weighted_mass,
                              coupled_elements, restrict, scatter)
from cemflow.linalg import is_symmetric
from cemflow.mesh import build_coarse_partition, build_fine_grid
from cemflow.model import (Nonlinearity, ProblemSpec, Source, Transfer, TransferLaw,
                           get_experiment)


def loop_assembly(n, coef_fn, kind):
    """Plain loop over cells and Gauss points with shape functions written out."""
    h = 1.0 / n
    g = 1.0 / math.sqrt(3.0)
    pts = [(0.5 - g / 2, 0.5 - g / 2), (0.5 + g / 2, 0.5 - g / 2),
           (0.5 - g / 2, 0.5 + g / 2), (0.5 + g / 2, 0.5 + g / 2)]
    A = np.zeros(((n + 1) ** 2, (n + 1) ** 2))
    for cy in range(n):
        for cx in range(n):
            ids = [cy * (n + 1) + cx, cy * (n + 1) + cx + 1,
                   (cy + 1) * (n + 1) + cx, (cy + 1) * (n + 1) + cx + 1]
            for s, t in pts:
                phi = [(1 - s) * (1 - t), s * (1 - t), (1 - s) * t, s * t]
                grad = [(-(1 - t) / h, -(1 - s) / h), ((1 - t) / h, -s / h),
                        (-t / h, (1 - s) / h), (t / h, s / h)]
                c = coef_fn(cy * n + cx, phi, ids)
                for a in range(4):
                    for b in range(4):
                        if kind == "stiff":
                            v = grad[a][0] * grad[b][0] + grad[a][1] * grad[b][1]
                        else:
                            v = phi[a] * phi[b]
                        A[ids[a], ids[b]] += 0.25 * h * h * c * v
    return A


def test_single_interior_node():
    g = build_fine_grid(2)
    K = assemble_stiffness(g, np.ones(4), Nonlinearity(), np.zeros(9))
    M = assemble_mass(g)
    np.testing.assert_allclose(K.toarray(), [[8.0 / 3.0]], rtol=1e-14)
    np.testing.assert_allclose(M.toarray(), [[1.0 / 9.0]], rtol=1e-14)


def test_single_cell_full_matrices():
    g = build_fine_grid(2)
    K = assemble_stiffness(g, np.ones(4), Nonlinearity(), np.zeros(9), full=True).toarray()
    # corner node touches one cell: 2/3; edge midpoint touches two: 4/3
    assert math.isclose(K[0, 0], 2 / 3) and math.isclose(K[1, 1], 4 / 3)
    M = assemble_mass(g, full=True).toarray()
    assert math.isclose(M.sum(), 1.0)
    assert math.isclose(M[0, 0], 0.25 / 9)


def test_stiffness_matches_loop():
    n = 5
    g = build_fine_grid(n)
    rng = np.random.default_rng(0)
    kappa = rng.uniform(1, 100, g.n_cells)
    u = rng.normal(size=g.n_nodes)
    nl = Nonlinearity("gardner", 0.3)
    K = assemble_stiffness(g, kappa, nl, u, full=True).toarray()
    ref = loop_assembly(n, lambda e, phi, ids: kappa[e] * math.exp(-0.3 * abs(
        sum(p * u[i] for p, i in zip(phi, ids)))), "stiff")
    np.testing.assert_allclose(K, ref, rtol=1e-12, atol=1e-12)
    Ki = assemble_stiffness(g, kappa, nl, u).toarray()
    np.testing.assert_allclose(Ki, ref[np.ix_(g.interior_nodes, g.interior_nodes)], rtol=1e-12)


def test_weighted_mass_matches_loop():
    n = 8
    g = build_fine_grid(n)
    part = build_coarse_partition(g, 2)
    kappa = np.linspace(1, 5, g.n_cells)
    u = np.zeros(g.n_nodes)
    W = assemble_weighted_mass(g, part, kappa, Nonlinearity(), u, full=True).toarray()
    H = part.H

    def coef(e, phi, ids):
        xy = sum(p * g.node_xy[i] for p, i in zip(phi, ids))
        # hats of the coarse cell containing xy
        s, t = (xy % H) / H
        grads = [(-(1 - t), -(1 - s)), ((1 - t), -s), (-t, (1 - s)), (t, s)]
        return kappa[e] * sum(a * a + b * b for a, b in grads) / H ** 2

    np.testing.assert_allclose(W, loop_assembly(n, coef, "mass"), rtol=1e-12, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 7), st.integers(0, 2 ** 31))
def test_stiffness_symmetric_psd(n, seed):
    g = build_fine_grid(n)
    rng = np.random.default_rng(seed)
    K = assemble_stiffness(g, rng.uniform(0.1, 1e4, g.n_cells), Nonlinearity("inverse_shift"),
                           rng.normal(size=g.n_nodes))
    assert is_symmetric(K)
    assert np.linalg.eigvalsh(K.toarray()).min() > 0
    Kf = assemble_stiffness(g, np.ones(g.n_cells), Nonlinearity(), np.zeros(g.n_nodes), full=True)
    np.testing.assert_allclose(Kf @ np.ones(g.n_nodes), 0, atol=1e-12)


@pytest.mark.parametrize("order", [3, 4])
def test_higher_quadrature_exact_for_constant_coefficients(order):
    g = build_fine_grid(6)
    kappa = np.arange(1, 37, dtype=float)
    u = np.zeros(g.n_nodes)
    for f in (lambda o: assemble_stiffness(g, kappa, Nonlinearity(), u, order=o),
              lambda o: assemble_mass(g, order=o)):
        np.testing.assert_allclose(f(order).toarray(), f(2).toarray(), rtol=1e-13, atol=1e-15)


def test_load_sums():
    g = build_fine_grid(16)
    assert math.isclose(assemble_load(g, lambda t, x, y: 1.0 + 0 * x, full=True).sum(), 1.0)
    f = lambda t, x, y: np.sin(np.pi * x) * np.sin(np.pi * y)
    g = build_fine_grid(64)
    assert abs(assemble_load(g, f, full=True).sum() - 4 / np.pi ** 2) < 1e-3
    # boundary rows vanish for this f, so the interior load carries the same total
    assert abs(assemble_load(g, f).sum() - 4 / np.pi ** 2) < 1e-3


def test_load_time_dependence():
    g = build_fine_grid(4)
    b = assemble_load(g, lambda t, x, y: t * np.ones_like(x), t=2.0, full=True)
    assert math.isclose(b.sum(), 2.0)


def _two_continua(n, beta=3.0, tag="constant"):
    g = build_fine_grid(n)
    ones = np.ones(g.n_cells)
    law = TransferLaw.symmetric(2, Transfer(tag, beta))
    spec = ProblemSpec("t", (ones, 2 * ones), (Nonlinearity(), Nonlinearity()),
                       (Source(), Source()), transfer=law)
    return g, spec


def test_coupling_cancels_on_equal_pressures():
    g, spec = _two_continua(4, tag="scaled_inverse_shift")
    rng = np.random.default_rng(1)
    p = rng.normal(size=g.n_nodes)
    u = State(np.vstack([p, p]))
    C = assemble_coupling(g, spec.transfer, u, full=True)
    np.testing.assert_allclose(C @ np.concatenate([p, p]), 0, atol=1e-12)


def test_coupling_constant_values():
    g, spec = _two_continua(3, beta=3.0)
    C = assemble_coupling(g, spec.transfer, State.zeros(g, 2), full=True).toarray()
    M = assemble_mass(g, full=True).toarray()
    k = g.n_nodes
    np.testing.assert_allclose(C[:k, :k], 3 * M, rtol=1e-14)
    np.testing.assert_allclose(C[:k, k:], -3 * M, rtol=1e-14)
    assert is_symmetric(C)


def test_coupling_nonsymmetric_law():
    g, spec = _two_continua(4, beta=10.0, tag="scaled_inverse_shift")
    u = State(np.vstack([np.ones(g.n_nodes), 3 * np.ones(g.n_nodes)]))
    C = assemble_coupling(g, spec.transfer, u).toarray()
    k = g.n_interior
    M = assemble_mass(g).toarray()
    np.testing.assert_allclose(C[:k, k:], -5.0 * M, rtol=1e-12)
    np.testing.assert_allclose(C[k:, :k], -2.5 * M, rtol=1e-12)
    assert not is_symmetric(C)


def test_coupled_elements_match_pieces():
    g, spec = _two_continua(4, tag="scaled_inverse_shift")
    rng = np.random.default_rng(2)
    u = State(rng.normal(size=(2, g.n_nodes)))
    A = scatter(g, coupled_elements(g, spec, u, tau=0.5), 2).toarray()
    k = g.n_interior
    M = assemble_mass(g).toarray()
    ref = assemble_coupling(g, spec.transfer, u).toarray()
    ref[:k, :k] += assemble_stiffness(g, spec.kappa[0], Nonlinearity(), u.values[0]).toarray() + 2 * M
    ref[k:, k:] += assemble_stiffness(g, spec.kappa[1], Nonlinearity(), u.values[1]).toarray() + 2 * M
    np.testing.assert_allclose(A, ref, rtol=1e-12, atol=1e-12)


def test_nonfinite_coefficient():
    g = build_fine_grid(2)
    with np.errstate(over="ignore"), pytest.raises(AssemblyError):
        assemble_stiffness(g, np.ones(4), Nonlinearity("exponential"), np.full(9, 1000.0))


def test_restrict():
    M = assemble_mass(build_fine_grid(4))
    idx = [0, 4]
    np.testing.assert_array_equal(restrict(M, idx).toarray(), M.toarray()[np.ix_(idx, idx)])
    np.testing.assert_array_equal(restrict(np.arange(5.0), [1, 3]), [1.0, 3.0])
    with pytest.raises(ValueError):
        restrict(M, [])


def test_builtin_operator_is_spd():
    spec = get_experiment("E3", 16)
    g = spec.grid()
    A = scatter(g, coupled_elements(g, spec, State.zeros(g, 2)), 2)
    assert is_symmetric(A)
    assert np.linalg.eigvalsh(A.toarray()).min() > 0
