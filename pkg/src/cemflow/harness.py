"""Experiment orchestration: reference solves, multiscale runs, errors and reports."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path

import numpy as np

from .assembly import (State, assemble_mass, assemble_stiffness, quadrature_points,
                       reference_element)
from .cem import (SampledForms, build_basis, load_basis, project_initial,
                  sample_source_steady, sample_source_transient, save_basis,
                  solve_auxiliary)
from .mesh import build_coarse_partition, default_layers
from .model import (Nonlinearity, ProblemSpec, RunConfig, Source, format_raster,
                    get_experiment)
from .stepping import FineSpace, march, steady_solve


class ZeroReferenceError(ZeroDivisionError):
    """The reference solution has zero norm, so relative errors are undefined."""


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"{stage} failed: {cause}")
        self.stage, self.cause = stage, cause


def _norm_matrices(grid):
    M = assemble_mass(grid)
    K = assemble_stiffness(grid, np.ones(grid.n_cells), Nonlinearity(), np.zeros(grid.n_nodes))
    return M, K


def compute_errors(p_ms: State, p_h: State, grid):
    """Relative L2 and H1-seminorm errors of ``p_ms`` against ``p_h``, continua stacked."""
    if p_ms.values.shape != p_h.values.shape or p_h.values.shape[1] != grid.n_nodes:
        raise ValueError("states do not match each other or the grid")
    M, K = _norm_matrices(grid)
    D = (p_ms.values - p_h.values)[:, grid.interior_nodes]
    P = p_h.values[:, grid.interior_nodes]

    def norm(X, A):
        return math.sqrt(max(float(np.einsum("ij,ij->", X, (A @ X.T).T)), 0.0))

    den_l2, den_h1 = norm(P, M), norm(P, K)
    if den_l2 == 0.0 or den_h1 == 0.0:
        raise ZeroReferenceError("reference solution is identically zero")
    return norm(D, M) / den_l2, norm(D, K) / den_h1


def exact_errors(p_h: State, u, grad_u, grid, order=4):
    """Absolute L2 and H1-seminorm errors of a one-continuum field against a function.

    ``u(x, y)`` and ``grad_u(x, y) -> (ux, uy)`` are vectorized; the integrals
    use a tensor Gauss rule of ``order`` points per direction on every cell.
    """
    pts, w, N, dN = reference_element(order)
    xy = quadrature_points(grid, order)
    vals = p_h.values[0][grid.cell_nodes]                    # (n_cells, 4)
    uh = vals @ N.T
    duh = np.einsum("ea,qad->eqd", vals, dN) / grid.h
    ux, uy = grad_u(xy[..., 0], xy[..., 1])
    wq = grid.h ** 2 * w
    l2 = np.sum(wq * (u(xy[..., 0], xy[..., 1]) - uh) ** 2)
    h1 = np.sum(wq * ((ux - duh[..., 0]) ** 2 + (uy - duh[..., 1]) ** 2))
    return math.sqrt(l2), math.sqrt(h1)


# ---------------------------------------------------------------- pipeline

@dataclass
class Reference:
    """Fine-grid solution of one problem, shared by all multiscale runs."""

    spec: ProblemSpec
    final: State
    samples: object
    reports: list
    seconds: float

    @property
    def picard_mean(self) -> float:
        return float(np.mean([r.iterations for r in self.reports]))


def fine_reference(spec: ProblemSpec, delta0=1e-5, max_picard=50) -> Reference:
    grid = spec.grid()
    space = FineSpace(grid, spec.N)
    t0 = time.perf_counter()
    try:
        if spec.steady:
            state, rep = steady_solve(space, spec, delta0, max_picard)
            reports, samples = [rep], sample_source_steady(state)
        else:
            traj = march(space, spec, delta0, max_picard)
            state, reports = traj.states[-1], traj.reports
            samples = sample_source_transient(traj.states, spec.S)
    except Exception as e:  # noqa: BLE001 - re-raised with the stage name
        raise StageError("fine reference", e) from e
    return Reference(spec, state, samples, reports, time.perf_counter() - t0)


@dataclass
class ReportRow:
    experiment: str
    H: float
    m: int
    L: int
    dim_Vms: int
    dim_Vh: int
    err_H1: float
    err_L2: float
    picard_mean_fine: float
    picard_mean_coarse: float
    lambda_hat: float
    offline_s: float
    online_s: float


COLUMNS = [f.name for f in dc_fields(ReportRow)]
TIMING_COLUMNS = ("offline_s", "online_s")


@dataclass
class CemResult:
    row: ReportRow
    final: State
    reports: list
    Hdiv: int


@dataclass
class ExperimentReport:
    rows: list = field(default_factory=list)
    fields: dict = field(default_factory=dict)

    def sorted_rows(self):
        return sorted(self.rows, key=lambda r: (-r.H, r.m, r.L))


def cem_run(ref: Reference, Hdiv, m=None, L=4, delta0=1e-5, max_picard=50, cache=None):
    """Offline basis construction and online coarse solve against a fine reference.

    ``cache`` is an optional ``(directory, key)``; a stored basis with the
    same key is reused.
    """
    spec = ref.spec
    grid = spec.grid()
    m = default_layers(Hdiv) if m is None else m
    t0 = time.perf_counter()
    try:
        part = build_coarse_partition(grid, Hdiv)
        space = None
        path = None
        if cache is not None:
            path = Path(cache[0]) / f"basis_H{Hdiv}_m{m}_L{L}.npz"
            space = load_basis(path, cache[1])
        if space is None:
            forms = SampledForms(part, spec, ref.samples)
            aux = solve_auxiliary(forms, L)
            space = build_basis(forms, aux, m)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                save_basis(space, path, cache[1])
        coarse = space.coarse
    except Exception as e:  # noqa: BLE001
        raise StageError("offline basis", e) from e
    t1 = time.perf_counter()
    try:
        if spec.steady:
            final, rep = steady_solve(coarse, spec, delta0, max_picard)
            reports = [rep]
        else:
            init = State.zeros(grid, spec.N)
            if spec.initial is not None:
                xy = grid.node_xy
                init = State(np.array([g(xy[:, 0], xy[:, 1]) for g in spec.initial]))
            c0 = project_initial(init, space, spec)
            traj = march(coarse, spec, delta0, max_picard, c0=c0)
            final, reports = traj.states[-1], traj.reports
    except Exception as e:  # noqa: BLE001
        raise StageError("online coarse solve", e) from e
    t2 = time.perf_counter()
    e_l2, e_h1 = compute_errors(final, ref.final, grid)
    lams = [r.contraction for r in reports]
    lams = [v for v in lams if v is not None]
    row = ReportRow(
        experiment=spec.name, H=1.0 / Hdiv, m=int(m), L=int(L), dim_Vms=int(space.dim),
        dim_Vh=int(spec.N * grid.n_interior), err_H1=e_h1, err_L2=e_l2,
        picard_mean_fine=ref.picard_mean,
        picard_mean_coarse=float(np.mean([r.iterations for r in reports])),
        lambda_hat=float(max(lams)) if lams else float("nan"),
        offline_s=t1 - t0, online_s=t2 - t1)
    return CemResult(row, final, reports, Hdiv)


def _field_entries(name, state: State, grid):
    n1 = grid.n + 1
    return {f"{name}_p{i + 1}.txt": (state.values[i], n1, n1) for i in range(state.N)}


def run_experiment(config: RunConfig, cache_dir=None) -> ExperimentReport:
    spec = config.problem()
    ref = fine_reference(spec, config.delta0, config.max_picard)
    cache = None if cache_dir is None else (cache_dir, config.content_hash())
    res = cem_run(ref, config.Hdiv, config.layers(), config.n_basis,
                  config.delta0, config.max_picard, cache)
    rep = ExperimentReport([res.row])
    grid = spec.grid()
    rep.fields.update(_field_entries(f"{spec.name}_fem", ref.final, grid))
    rep.fields.update(_field_entries(
        f"{spec.name}_cem_H{config.Hdiv}_m{res.row.m}_L{config.n_basis}", res.final, grid))
    return rep


SWEEP_HDIV = (4, 8, 16, 32)
SWEEP_BASIS = (4, 5, 6)


def sweep(name, n=128, hdivs=SWEEP_HDIV, basis=SWEEP_BASIS, delta0=1e-5, max_picard=50,
          log=None) -> ExperimentReport:
    """All (H, L) combinations for one built-in experiment, fine reference shared."""
    spec = get_experiment(name, n)
    ref = fine_reference(spec, delta0, max_picard)
    grid = spec.grid()
    rep = ExperimentReport()
    rep.fields.update(_field_entries(f"{name}_fem", ref.final, grid))
    for Hdiv in hdivs:
        for L in basis:
            res = cem_run(ref, Hdiv, None, L, delta0, max_picard)
            rep.rows.append(res.row)
            rep.fields.update(_field_entries(f"{name}_cem_H{Hdiv}_m{res.row.m}_L{L}", res.final, grid))
            if log is not None:
                log(res.row)
    return rep


# ---------------------------------------------------------------- reports

def emit_report(report: ExperimentReport, out_dir):
    """Write ``report.csv`` and the final-time nodal fields under ``fields/``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for row in report.sorted_rows():
            w.writerow([_fmt(getattr(row, c)) for c in COLUMNS])
    if report.fields:
        fdir = out / "fields"
        fdir.mkdir(exist_ok=True)
        for name, (values, nx, ny) in sorted(report.fields.items()):
            (fdir / name).write_text(format_raster(values, nx, ny))
    return out / "report.csv"


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_report(path) -> list:
    """Parse a ``report.csv`` back into rows."""
    path = Path(path)
    if path.is_dir():
        path = path / "report.csv"
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != COLUMNS:
            raise ValueError(f"{path}: unexpected columns {header}")
        rows = []
        for rec in r:
            kw = {}
            for name, val in zip(COLUMNS, rec):
                typ = ReportRow.__dataclass_fields__[name].type
                kw[name] = val if typ == "str" else int(val) if typ == "int" else float(val)
            rows.append(ReportRow(**kw))
    return rows


def check_report_rows(rows) -> list:
    """Consistency checks on report rows: ``(name, passed, detail)`` triples."""
    out = []
    for r in rows:
        Hdiv = round(1.0 / r.H)
        out.append((f"{r.experiment} H=1/{Hdiv} L={r.L}: dim_Vms = Hdiv^2 L",
                    r.dim_Vms == Hdiv * Hdiv * r.L, f"{r.dim_Vms}"))
        out.append((f"{r.experiment} H=1/{Hdiv} L={r.L}: errors finite and nonnegative",
                    all(math.isfinite(v) and v >= 0 for v in (r.err_H1, r.err_L2)),
                    f"H1={r.err_H1:.4g} L2={r.err_L2:.4g}"))
    groups = {}
    for r in rows:
        groups.setdefault((r.experiment, r.L), []).append(r)
    for (exp, L), rs in sorted(groups.items()):
        rs = sorted(rs, key=lambda r: -r.H)
        if len(rs) < 2:
            continue
        for key in ("err_H1", "err_L2"):
            seq = [getattr(r, key) for r in rs]
            ok = all(b < a for a, b in zip(seq, seq[1:]))
            out.append((f"{exp} L={L}: {key} decreases as H shrinks", ok,
                        " > ".join(f"{v:.4g}" for v in seq)))
    return out


# ---------------------------------------------------------------- manufactured problems

def manufactured_poisson(n, kappa=1.0) -> ProblemSpec:
    """Linear Poisson problem with exact solution sin(pi x) sin(pi y)."""
    return ProblemSpec("poisson", (np.full(n * n, kappa),), (Nonlinearity(),),
                       (Source("separable_sine", 2.0 * np.pi ** 2 * kappa),))


def sine_solution():
    """sin(pi x) sin(pi y) and its gradient."""
    def u(x, y):
        return np.sin(np.pi * x) * np.sin(np.pi * y)

    def grad(x, y):
        return (np.pi * np.cos(np.pi * x) * np.sin(np.pi * y),
                np.pi * np.sin(np.pi * x) * np.cos(np.pi * y))
    return u, grad


def manufactured_heat(n, T, S) -> ProblemSpec:
    """Linear heat problem, zero start, source 2 pi^2 sin(pi x) sin(pi y)."""
    return ProblemSpec("heat", (np.ones(n * n),), (Nonlinearity(),),
                       (Source("separable_sine", 2.0 * np.pi ** 2),), T=T, S=S)


# ---------------------------------------------------------------- quick verification suite

def quick_checks():
    """Fast self-checks of the numerical building blocks.

    Yields ``(name, passed, detail)`` triples.
    """
    from .assembly import assemble_coupling
    from .cem import phi_orthogonality_residual
    from .model import Transfer, TransferLaw
    from .mesh import build_fine_grid

    # fine FEM convergence orders
    e = []
    for n in (16, 32, 64):
        spec = manufactured_poisson(n)
        grid = spec.grid()
        e.append(exact_errors(fine_reference(spec).final, *sine_solution(), grid))
    e = np.array(e)
    orders = np.log2(e[:-1] / e[1:])
    yield ("fine FEM L2 order 2.0 +- 0.2", bool(np.all(np.abs(orders[:, 0] - 2) <= 0.2)),
           f"{orders[:, 0].round(3).tolist()}")
    yield ("fine FEM H1 order 1.0 +- 0.2", bool(np.all(np.abs(orders[:, 1] - 1) <= 0.2)),
           f"{orders[:, 1].round(3).tolist()}")

    # coupling cancellation
    grid = build_fine_grid(16)
    rng = np.random.default_rng(0)
    u = State(rng.standard_normal((2, grid.n_nodes)))
    Q = assemble_coupling(grid, TransferLaw.symmetric(2, Transfer("scaled_inverse_shift", 100.0)), u)
    v = rng.standard_normal(grid.n_interior)
    r = np.abs(Q @ np.concatenate([v, v])).max()
    yield ("coupling annihilates equal continua", r <= 1e-12, f"{r:.2e}")

    # orthogonality and scale invariance on a small E3 instance
    spec = get_experiment("E3", 32)
    ref = fine_reference(spec)
    part = build_coarse_partition(spec.grid(), 4)
    forms = SampledForms(part, spec, ref.samples)
    aux = solve_auxiliary(forms, 4)
    worst = max(np.abs(aux.vectors[j].T @ aux.R[j] @ aux.vectors[j] - np.eye(4)).max()
                for j in range(part.n_blocks))
    yield ("auxiliary R-orthonormality <= 1e-9", worst <= 1e-9, f"{worst:.2e}")
    space = build_basis(forms, aux, 2)
    worst = max(phi_orthogonality_residual(space, j) for j in range(part.n_blocks))
    yield ("basis phi-orthogonality <= 1e-8", worst <= 1e-8, f"{worst:.2e}")
    forms7 = SampledForms(part, spec, ref.samples.scaled(7.0))
    aux7 = solve_auxiliary(forms7, 4)
    space7 = build_basis(forms7, aux7, 2)
    d_eig = max(max(np.abs(a - b).max() / max(1.0, np.abs(a).max()),
                    np.abs(v - w).max())
                for a, b, v, w in zip(aux.eigenvalues, aux7.eigenvalues, aux.vectors, aux7.vectors))
    d_col = abs(space.G - space7.G).max()
    yield ("weights x7 leave eigenpairs and basis unchanged", max(d_eig, d_col) <= 1e-10,
           f"eig {d_eig:.2e}, basis {d_col:.2e}")
    for Hdiv, L, dim in ((4, 4, 64), (8, 5, 320), (16, 6, 1536)):
        yield (f"dim V_ms at H=1/{Hdiv}, L={L}", Hdiv * Hdiv * L == dim, f"{Hdiv * Hdiv * L}")
    yield ("dim V_h at n=128", build_fine_grid(128).n_interior == 16129,
           f"{build_fine_grid(128).n_interior}")


def verify(out_dir, log=print) -> bool:
    """Run the quick checks plus the report checks for ``out_dir/report.csv`` if present."""
    out = Path(out_dir)
    results = list(quick_checks())
    csv_path = out / "report.csv"
    if csv_path.exists():
        results += check_report_rows(read_report(csv_path))
    lines = [f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})" for name, ok, detail in results]
    for line in lines:
        log(line)
    out.mkdir(parents=True, exist_ok=True)
    (out / "verify.txt").write_text("\n".join(lines) + "\n")
    return all(ok for _, ok, _ in results)
