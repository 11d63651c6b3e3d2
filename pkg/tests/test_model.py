import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cemflow.mesh import build_fine_grid
from cemflow.model import (ConfigError, Nonlinearity, ProblemSpec, RasterError, Source,
                           Transfer, TransferLaw, builtin_experiments, eval_conductivity,
                           eval_transfer, get_experiment, load_config, load_field_raster,
                           parse_config, serialize_config, write_raster)

finite = st.floats(-1e6, 1e6, allow_nan=False)


def test_conductivity_examples():
    g = Nonlinearity("gardner", 0.1)
    assert eval_conductivity(g, 1.0, 0.0) == 1.0
    assert math.isclose(eval_conductivity(g, 1.0, 10.0), 0.36787944117144233, rel_tol=1e-12)
    assert eval_conductivity(Nonlinearity("inverse_shift"), 10.0, 1.0) == 5.0
    assert math.isclose(eval_conductivity(Nonlinearity("exponential"), 2.0, 1.0), 2 * math.e)
    assert eval_conductivity(Nonlinearity(), 3.0, -7.0) == 3.0


def test_transfer_examples():
    tl = TransferLaw.symmetric(2, Transfer("scaled_inverse_shift", 10.0))
    assert eval_transfer(tl, 0, 1, 0.0, 5.0) == 10.0
    tl = TransferLaw.symmetric(2, Transfer("scaled_inverse_shift", 100.0))
    assert eval_transfer(tl, 0, 1, 1.0, 0.0) == 50.0
    # the coefficient uses the first continuum's pressure
    assert eval_transfer(tl, 1, 0, 0.0, 1.0) == 100.0
    assert eval_transfer(TransferLaw(), 0, 1, 3.0, 4.0) == 0.0
    with pytest.raises(ValueError):
        eval_transfer(tl, 1, 1, 0.0, 0.0)


@settings(max_examples=200)
@given(st.floats(1e-3, 1e4), finite)
def test_bounded_laws(kappa, p):
    for nl in (Nonlinearity("gardner", 0.1), Nonlinearity("inverse_shift")):
        v = eval_conductivity(nl, kappa, p)
        assert 0 <= v <= kappa
        if abs(p) < 100:
            assert v > 0


@settings(max_examples=200)
@given(st.one_of(st.just(0.0), st.floats(1e-6, 1e3)), finite, finite)
def test_transfer_bound(beta, pi, pl):
    q = Transfer("scaled_inverse_shift", beta)(pi, pl)
    assert 0 <= q <= beta
    if beta > 0 and abs(pi) < 1e6:
        assert q > 0


@settings(max_examples=100)
@given(st.floats(-50, 50))
def test_exponential_law(p):
    assert math.isclose(eval_conductivity(Nonlinearity("exponential"), 7.0, p), 7.0 * math.exp(p))


def test_unknown_tags():
    with pytest.raises(ValueError):
        Nonlinearity("vg")
    with pytest.raises(ValueError):
        Transfer("linear", 1.0)
    with pytest.raises(ValueError):
        Source("gauss")


def test_sources():
    assert Source("constant", -1.0)(0, 0.3, 0.2) == -1.0
    np.testing.assert_allclose(Source("separable_sine", 1.0)(0, 0.5, 0.5), 1.0)
    np.testing.assert_allclose(Source("exp_sum", -1.0)(0, 0.5, 0.25), -math.exp(0.75))


def test_raster_roundtrip(tmp_path):
    g = build_fine_grid(4)
    vals = np.arange(1, 17, dtype=float)
    write_raster(tmp_path / "f.txt", vals, 4, 4)
    np.testing.assert_array_equal(load_field_raster(tmp_path / "f.txt", g), vals)
    # row-major from the lower-left: value 2 sits in cell (cx=1, cy=0)
    assert load_field_raster(tmp_path / "f.txt", g)[g.cell_id(1, 0)] == 2.0


def test_raster_uniform(tmp_path):
    g = build_fine_grid(4)
    (tmp_path / "u.txt").write_text("4 4\n" + " ".join(["1.0"] * 16))
    np.testing.assert_array_equal(load_field_raster(tmp_path / "u.txt", g), np.ones(16))


@pytest.mark.parametrize("body,where", [
    ("2 2\n1 2\n0 4\n", "row 1, column 0"),
    ("2 2\n1 2\n3 -4\n", "row 1, column 1"),
    ("2 2\n1 x\n3 4\n", "row 0, column 1"),
])
def test_raster_errors_name_the_cell(tmp_path, body, where):
    (tmp_path / "r.txt").write_text(body)
    with pytest.raises(RasterError, match=where):
        load_field_raster(tmp_path / "r.txt", build_fine_grid(2))


def test_raster_dimension_errors(tmp_path):
    (tmp_path / "r.txt").write_text("2 2\n1 2 3\n")
    with pytest.raises(RasterError, match="expected 4 values"):
        load_field_raster(tmp_path / "r.txt", build_fine_grid(2))
    (tmp_path / "r.txt").write_text("2 2\n1 2 3 4\n")
    with pytest.raises(RasterError, match="grid has 4 x 4"):
        load_field_raster(tmp_path / "r.txt", build_fine_grid(4))
    (tmp_path / "r.txt").write_text("two 2\n1 2 3 4\n")
    with pytest.raises(RasterError):
        load_field_raster(tmp_path / "r.txt", build_fine_grid(2))


def test_builtin_experiments():
    e1, e2, e3, e4 = builtin_experiments(128)
    assert (e1.N, e1.steady, e1.transfer.active()) == (1, True, [])
    assert e2.S == 20 and math.isclose(e2.tau, 0.1)
    assert e3.N == 2 and e3.steady
    assert [s(0, 0.3, 0.7) for s in e3.sources] == [1.0, -1.0]
    assert e4.N == 2 and e4.T == 2.0
    assert e4.nonlinearities[0] == Nonlinearity("gardner", 0.1)
    assert set(np.unique(e1.kappa[0])) == {10.0, 1000.0}
    assert set(np.unique(e3.kappa[0])) == {10.0, 1e4}
    assert set(np.unique(e3.kappa[1])) == {0.5, 10.0}
    assert set(np.unique(e4.kappa[1])) == {1.0, 10.0}
    for spec in (e3, e4):
        assert not np.any((spec.kappa[0] > 10) & (spec.kappa[1] == 10))


def test_builtin_resampled():
    e1 = get_experiment("E1", 32)
    assert e1.n == 32 and set(np.unique(e1.kappa[0])) == {10.0, 1000.0}


def test_problem_validation():
    with pytest.raises(ValueError):
        ProblemSpec("x", (np.ones(16),), (Nonlinearity(),), (Source(),), T=1.0)
    with pytest.raises(ValueError):
        ProblemSpec("x", (np.zeros(16),), (Nonlinearity(),), (Source(),))
    with pytest.raises(ValueError):
        ProblemSpec("x", (np.ones(15),), (Nonlinearity(),), (Source(),))


CUSTOM = """
custom:
  name: twin
  fields: [k1.txt, k2.txt]
  nonlinearity: [{tag: gardner, alpha: 0.2}, {tag: inverse_shift}]
  transfer:
    - {pair: [1, 2], tag: scaled_inverse_shift, beta: 5}
    - {pair: [2, 1], tag: constant, beta: 5}
  sources: [{tag: constant, value: 1}, {tag: exp_sum, value: -1}]
  T: 1.0
  S: 4
n: 8
Hdiv: 2
m: 1
n_basis: 3
"""


def test_config_roundtrip(tmp_path):
    for text in ("experiment: E2\nn: 32\nHdiv: 4\n", CUSTOM):
        cfg = parse_config(text)
        again = parse_config(serialize_config(cfg))
        assert again == cfg
        assert serialize_config(again) == serialize_config(cfg)


def test_config_problem(tmp_path):
    for name in ("k1.txt", "k2.txt"):
        write_raster(tmp_path / name, np.full(64, 2.0), 8, 8)
    (tmp_path / "c.yaml").write_text(CUSTOM)
    cfg = load_config(tmp_path / "c.yaml")
    spec = cfg.problem()
    assert spec.N == 2 and spec.S == 4
    assert spec.transfer.get(0, 1).tag == "scaled_inverse_shift"
    assert spec.transfer.get(1, 0).beta == 5.0
    assert cfg.layers() == 1
    h = cfg.content_hash()
    write_raster(tmp_path / "k2.txt", np.full(64, 3.0), 8, 8)
    assert cfg.content_hash() != h


@pytest.mark.parametrize("text", [
    "experiment: E1\ncolour: red\n",
    "custom: {fields: [a], nonlinearity: [{tag: constant}], sources: [{tag: constant}], bogus: 1}\n",
    "experiment: E1\ncustom: {}\n",
    "experiment: E9\n",
    "experiment: E1\nn: 30\nHdiv: 8\n",
    "experiment: E1\ndelta0: -1\n",
    "custom: {fields: [a], nonlinearity: [{tag: constant, beta: 2}], sources: [{tag: constant}]}\n",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_auto_layers():
    assert parse_config("experiment: E1\nHdiv: 16\n").layers() == 7
