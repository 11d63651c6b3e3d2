"""Problem definitions: coefficient rasters, nonlinear laws, transfer terms, sources."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from .mesh import StructuredGrid


class RasterError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- laws

NONLINEARITIES = ("constant", "exponential", "inverse_shift", "gardner")
TRANSFERS = ("zero", "constant", "scaled_inverse_shift")
SOURCES = ("constant", "separable_sine", "exp_sum")


@dataclass(frozen=True)
class Nonlinearity:
    """Relative conductivity mu(p).

    ``constant``: 1, ``exponential``: exp(p), ``inverse_shift``: 1/(1+|p|),
    ``gardner``: exp(-alpha |p|).
    """

    tag: str = "constant"
    alpha: float = 0.1

    def __post_init__(self):
        if self.tag not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.tag!r}")
        if self.tag == "gardner" and not self.alpha > 0:
            raise ValueError("Gardner law needs alpha > 0")

    def __call__(self, p):
        p = np.asarray(p, dtype=float)
        if self.tag == "constant":
            return np.ones_like(p)
        if self.tag == "exponential":
            return np.exp(p)
        if self.tag == "inverse_shift":
            return 1.0 / (1.0 + np.abs(p))
        return np.exp(-self.alpha * np.abs(p))

    @property
    def is_linear(self) -> bool:
        return self.tag == "constant"

    def to_dict(self):
        d = {"tag": self.tag}
        if self.tag == "gardner":
            d["alpha"] = float(self.alpha)
        return d


def eval_conductivity(nl: Nonlinearity, kappa, p):
    return np.asarray(kappa, dtype=float) * nl(p)


@dataclass(frozen=True)
class Transfer:
    """Transfer coefficient Q_il for one ordered pair of continua.

    ``zero``: 0, ``constant``: beta, ``scaled_inverse_shift``: beta/(1+|p_i|).
    """

    tag: str = "zero"
    beta: float = 0.0

    def __post_init__(self):
        if self.tag not in TRANSFERS:
            raise ValueError(f"unknown transfer law {self.tag!r}")
        if self.tag != "zero" and self.beta < 0:
            raise ValueError("transfer rate must be nonnegative")

    def __call__(self, p_i, p_l):
        p_i = np.asarray(p_i, dtype=float)
        if self.tag == "zero":
            return np.zeros_like(p_i)
        if self.tag == "constant":
            return np.full_like(p_i, self.beta)
        return self.beta / (1.0 + np.abs(p_i))

    @property
    def is_linear(self) -> bool:
        return self.tag != "scaled_inverse_shift"


@dataclass(frozen=True)
class TransferLaw:
    """Transfer coefficients for ordered pairs ``(i, l)``; missing pairs are zero."""

    pairs: tuple = ()

    def __post_init__(self):
        seen = set()
        for (i, l), law in self.pairs:
            if i == l:
                raise ValueError("transfer pair needs two distinct continua")
            if (i, l) in seen:
                raise ValueError(f"duplicate transfer pair {(i, l)}")
            if not isinstance(law, Transfer):
                raise TypeError("transfer entries must be Transfer instances")
            seen.add((i, l))

    @classmethod
    def symmetric(cls, N, law: Transfer):
        return cls(tuple(((i, l), law) for i in range(N) for l in range(N) if i != l))

    def get(self, i, l) -> Transfer:
        for key, law in self.pairs:
            if key == (i, l):
                return law
        return Transfer()

    def active(self):
        return [(key, law) for key, law in self.pairs if law.tag != "zero"]


def eval_transfer(tl: TransferLaw, i, l, p_i, p_l):
    if i == l:
        raise ValueError("transfer is defined between distinct continua")
    return tl.get(i, l)(p_i, p_l)


@dataclass(frozen=True)
class Source:
    """Time-independent source term.

    ``constant``: value, ``separable_sine``: value*sin(pi x)sin(pi y),
    ``exp_sum``: value*exp(x + y).
    """

    tag: str = "constant"
    value: float = 0.0

    def __post_init__(self):
        if self.tag not in SOURCES:
            raise ValueError(f"unknown source {self.tag!r}")

    def __call__(self, t, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.tag == "constant":
            return np.full(np.broadcast(x, y).shape, float(self.value))
        if self.tag == "separable_sine":
            return self.value * np.sin(np.pi * x) * np.sin(np.pi * y)
        return self.value * np.exp(x + y)

    def to_dict(self):
        return {"tag": self.tag, "value": float(self.value)}


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """Multi-continuum nonlinear Richards problem with zero Dirichlet data.

    Parameters
    ----------
    name : str
    kappa : sequence of ndarray
        Cellwise conductivity per continuum, length ``n*n`` each.
    nonlinearities : sequence of Nonlinearity
    sources : sequence of callable
        ``f_i(t, x, y)``, vectorized.
    transfer : TransferLaw
    T, S : float, int or None
        Final time and step count; both None for a steady problem.
    initial : sequence of callable or None
        ``p_i(x, y)`` at t=0; zero if None.
    """

    name: str
    kappa: tuple
    nonlinearities: tuple
    sources: tuple
    transfer: TransferLaw = field(default_factory=TransferLaw)
    T: float | None = None
    S: int | None = None
    initial: tuple | None = None

    def __post_init__(self):
        kappa = tuple(np.array(k, dtype=float).ravel() for k in self.kappa)
        for k in kappa:
            k.flags.writeable = False
        object.__setattr__(self, "kappa", kappa)
        object.__setattr__(self, "nonlinearities", tuple(self.nonlinearities))
        object.__setattr__(self, "sources", tuple(self.sources))
        N = len(kappa)
        if N < 1:
            raise ValueError("need at least one continuum")
        if len(self.nonlinearities) != N or len(self.sources) != N:
            raise ValueError("one nonlinearity and one source per continuum")
        ncell = kappa[0].size
        n = math.isqrt(ncell)
        if n * n != ncell or any(k.size != ncell for k in kappa):
            raise ValueError("coefficient fields must share one square cell count")
        for i, k in enumerate(kappa):
            if not np.all(np.isfinite(k)) or np.any(k <= 0):
                raise ValueError(f"conductivity of continuum {i + 1} must be positive")
        for (i, l), _ in self.transfer.pairs:
            if not (0 <= i < N and 0 <= l < N):
                raise ValueError(f"transfer pair {(i, l)} outside {N} continua")
        if (self.T is None) != (self.S is None):
            raise ValueError("T and S must be given together")
        if self.S is not None and (self.S < 1 or not self.T > 0):
            raise ValueError("transient problems need S >= 1 and T > 0")
        if self.initial is not None:
            if len(self.initial) != N:
                raise ValueError("one initial function per continuum")
            object.__setattr__(self, "initial", tuple(self.initial))

    @property
    def N(self) -> int:
        return len(self.kappa)

    @property
    def n(self) -> int:
        return math.isqrt(self.kappa[0].size)

    @property
    def steady(self) -> bool:
        return self.S is None

    @property
    def tau(self):
        return None if self.steady else self.T / self.S

    @property
    def is_linear(self) -> bool:
        return (all(nl.is_linear for nl in self.nonlinearities)
                and all(law.is_linear for _, law in self.transfer.pairs))

    def grid(self) -> StructuredGrid:
        return StructuredGrid(self.n)


# ---------------------------------------------------------------- rasters

def parse_raster(text: str, source="<raster>"):
    """Parse raster text into ``(nx, ny, values)`` with values row-major from lower-left."""
    lines = text.splitlines()
    if not lines or len(lines[0].split()) != 2:
        raise RasterError(f"{source}: first line must hold 'nx ny'")
    try:
        nx, ny = (int(t) for t in lines[0].split())
    except ValueError:
        raise RasterError(f"{source}: cannot read dimensions from {lines[0]!r}") from None
    if nx < 1 or ny < 1:
        raise RasterError(f"{source}: dimensions must be positive, got {nx} x {ny}")
    tokens = " ".join(lines[1:]).split()
    if len(tokens) != nx * ny:
        raise RasterError(f"{source}: expected {nx * ny} values for {nx} x {ny}, found {len(tokens)}")
    values = np.empty(nx * ny)
    for k, tok in enumerate(tokens):
        try:
            values[k] = float(tok)
        except ValueError:
            raise RasterError(
                f"{source}: cannot parse {tok!r} at row {k // nx}, column {k % nx}") from None
    bad = np.flatnonzero(~(values > 0) | ~np.isfinite(values))
    if bad.size:
        k = bad[0]
        raise RasterError(
            f"{source}: value {values[k]!r} at row {k // nx}, column {k % nx} is not positive")
    return nx, ny, values


def load_field_raster(path, grid: StructuredGrid) -> np.ndarray:
    """Read a cellwise coefficient raster that matches ``grid``."""
    path = Path(path)
    nx, ny, values = parse_raster(path.read_text(), source=str(path))
    if (nx, ny) != (grid.n, grid.n):
        raise RasterError(f"{path}: raster is {nx} x {ny} but the grid has {grid.n} x {grid.n} cells")
    return values


def format_raster(values, nx, ny) -> str:
    values = np.asarray(values, dtype=float).reshape(ny, nx)
    rows = [" ".join(repr(float(v)) for v in row) for row in values]
    return f"{nx} {ny}\n" + "\n".join(rows) + "\n"


def write_raster(path, values, nx, ny):
    Path(path).write_text(format_raster(values, nx, ny))


def resample_cells(values, nx, n):
    """Nearest-cell resampling of an ``nx x nx`` cellwise raster to ``n x n``."""
    values = np.asarray(values, dtype=float).reshape(nx, nx)
    idx = np.minimum(((np.arange(n) + 0.5) * nx / n).astype(np.int64), nx - 1)
    return values[np.ix_(idx, idx)].ravel()


# ---------------------------------------------------------------- built-ins

def _builtin_raster(name, n):
    text = resources.files("cemflow.data").joinpath(name).read_text()
    nx, ny, values = parse_raster(text, source=name)
    return values if nx == n else resample_cells(values, nx, n)


def builtin_experiments(n: int = 128) -> list:
    """The four reference experiments E1-E4 on an ``n x n`` grid."""
    exp = Nonlinearity("exponential")
    inv = Nonlinearity("inverse_shift")
    gardner = Nonlinearity("gardner", 0.1)
    return [
        ProblemSpec("E1", (_builtin_raster("e1_kappa.txt", n),), (exp,),
                    (Source("constant", 1.0),)),
        ProblemSpec("E2", (_builtin_raster("e1_kappa.txt", n),), (exp,),
                    (Source("separable_sine", 1.0),), T=2.0, S=20),
        ProblemSpec("E3",
                    (_builtin_raster("e3_kappa1.txt", n), _builtin_raster("e3_kappa2.txt", n)),
                    (inv, inv), (Source("constant", 1.0), Source("constant", -1.0)),
                    TransferLaw.symmetric(2, Transfer("scaled_inverse_shift", 10.0))),
        ProblemSpec("E4",
                    (_builtin_raster("e4_kappa1.txt", n), _builtin_raster("e4_kappa2.txt", n)),
                    (gardner, gardner), (Source("exp_sum", 1.0), Source("exp_sum", -1.0)),
                    TransferLaw.symmetric(2, Transfer("scaled_inverse_shift", 100.0)),
                    T=2.0, S=20),
    ]


def get_experiment(name: str, n: int = 128) -> ProblemSpec:
    for spec in builtin_experiments(n):
        if spec.name == name:
            return spec
    raise KeyError(f"unknown experiment {name!r}; choose from E1, E2, E3, E4")


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class CustomProblem:
    """Problem description read from a config file; raster paths are kept as written."""

    fields: tuple
    nonlinearity: tuple
    sources: tuple
    transfer: tuple = ()
    name: str = "custom"
    T: float | None = None
    S: int | None = None


@dataclass(frozen=True)
class RunConfig:
    experiment: str | None = None
    custom: CustomProblem | None = None
    n: int = 128
    Hdiv: int = 8
    m: int | str = "auto"
    n_basis: int = 4
    delta0: float = 1e-5
    max_picard: int = 50
    base_dir: Path | None = field(default=None, compare=False)

    def layers(self) -> int:
        from .mesh import default_layers
        return default_layers(self.Hdiv) if self.m == "auto" else int(self.m)

    def problem(self) -> ProblemSpec:
        if self.experiment is not None:
            return get_experiment(self.experiment, self.n)
        c = self.custom
        grid = StructuredGrid(self.n)
        kappa = [load_field_raster(self._resolve(p), grid) for p in c.fields]
        pairs = tuple(((i - 1, l - 1), law) for (i, l), law in c.transfer)
        return ProblemSpec(c.name, kappa, c.nonlinearity, c.sources,
                           TransferLaw(pairs), T=c.T, S=c.S)

    def _resolve(self, p):
        p = Path(p)
        if not p.is_absolute() and self.base_dir is not None:
            p = Path(self.base_dir) / p
        return p

    def raster_paths(self):
        if self.custom is None:
            return []
        return [self._resolve(p) for p in self.custom.fields]

    def content_hash(self) -> str:
        """Digest of the serialized config and the bytes of every raster it reads."""
        h = hashlib.sha256(serialize_config(self).encode())
        for p in self.raster_paths():
            h.update(Path(p).read_bytes())
        return h.hexdigest()


_TOP_KEYS = {"experiment", "custom", "n", "Hdiv", "m", "n_basis", "delta0", "max_picard"}
_CUSTOM_KEYS = {"name", "fields", "nonlinearity", "transfer", "sources", "T", "S"}


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(map(str, unknown))}")


def _as_int(v, key, low):
    if isinstance(v, bool) or not isinstance(v, int) or v < low:
        raise ConfigError(f"{key} must be an integer >= {low}, got {v!r}")
    return v


def _parse_nonlinearity(d, where):
    _check_keys(d, {"tag", "alpha"}, where)
    try:
        return Nonlinearity(d["tag"], float(d.get("alpha", 0.1)))
    except (KeyError, ValueError, TypeError) as e:
        raise ConfigError(f"{where}: {e}") from None


def _parse_transfer(d, where):
    _check_keys(d, {"pair", "tag", "beta"}, where)
    try:
        i, l = (int(v) for v in d["pair"])
        return (i, l), Transfer(d.get("tag", "constant"), float(d.get("beta", 0.0)))
    except (KeyError, ValueError, TypeError) as e:
        raise ConfigError(f"{where}: {e}") from None


def _parse_source(d, where):
    _check_keys(d, {"tag", "value"}, where)
    try:
        return Source(d["tag"], float(d.get("value", 1.0)))
    except (KeyError, ValueError, TypeError) as e:
        raise ConfigError(f"{where}: {e}") from None


def config_from_dict(d, base_dir=None) -> RunConfig:
    _check_keys(d, _TOP_KEYS, "config")
    if ("experiment" in d) == ("custom" in d):
        raise ConfigError("config needs exactly one of 'experiment' or 'custom'")
    kw = {}
    if "experiment" in d:
        if d["experiment"] not in ("E1", "E2", "E3", "E4"):
            raise ConfigError(f"unknown experiment {d['experiment']!r}")
        kw["experiment"] = d["experiment"]
    else:
        c = d["custom"]
        _check_keys(c, _CUSTOM_KEYS, "custom")
        for key in ("fields", "nonlinearity", "sources"):
            if not isinstance(c.get(key), list) or not c[key]:
                raise ConfigError(f"custom.{key} must be a nonempty list")
        N = len(c["fields"])
        if len(c["nonlinearity"]) != N or len(c["sources"]) != N:
            raise ConfigError("custom: fields, nonlinearity and sources need one entry per continuum")
        transfer = tuple(_parse_transfer(t, f"custom.transfer[{k}]")
                         for k, t in enumerate(c.get("transfer") or []))
        for (i, l), _ in transfer:
            if not (1 <= i <= N and 1 <= l <= N) or i == l:
                raise ConfigError(f"custom.transfer: bad pair {[i, l]} for {N} continua")
        T, S = c.get("T"), c.get("S")
        if (T is None) != (S is None):
            raise ConfigError("custom: T and S must be given together")
        kw["custom"] = CustomProblem(
            fields=tuple(str(p) for p in c["fields"]),
            nonlinearity=tuple(_parse_nonlinearity(v, f"custom.nonlinearity[{k}]")
                               for k, v in enumerate(c["nonlinearity"])),
            sources=tuple(_parse_source(v, f"custom.sources[{k}]")
                          for k, v in enumerate(c["sources"])),
            transfer=transfer,
            name=str(c.get("name", "custom")),
            T=None if T is None else float(T),
            S=None if S is None else _as_int(S, "custom.S", 1),
        )
    if "n" in d:
        kw["n"] = _as_int(d["n"], "n", 2)
    if "Hdiv" in d:
        kw["Hdiv"] = _as_int(d["Hdiv"], "Hdiv", 2)
    if "m" in d:
        kw["m"] = d["m"] if d["m"] == "auto" else _as_int(d["m"], "m", 0)
    if "n_basis" in d:
        kw["n_basis"] = _as_int(d["n_basis"], "n_basis", 1)
    if "delta0" in d:
        try:
            kw["delta0"] = float(d["delta0"])
        except (TypeError, ValueError):
            raise ConfigError(f"delta0 must be a number, got {d['delta0']!r}") from None
        if not kw["delta0"] > 0:
            raise ConfigError("delta0 must be positive")
    if "max_picard" in d:
        kw["max_picard"] = _as_int(d["max_picard"], "max_picard", 1)
    cfg = RunConfig(base_dir=None if base_dir is None else Path(base_dir), **kw)
    if cfg.n % cfg.Hdiv:
        raise ConfigError(f"Hdiv={cfg.Hdiv} must divide n={cfg.n}")
    if cfg.layers() > cfg.Hdiv:
        raise ConfigError(f"m={cfg.m} exceeds Hdiv={cfg.Hdiv}")
    return cfg


def parse_config(text: str, base_dir=None) -> RunConfig:
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config: {e}") from None
    return config_from_dict(d, base_dir)


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent)


def config_to_dict(cfg: RunConfig) -> dict:
    d = {}
    if cfg.experiment is not None:
        d["experiment"] = cfg.experiment
    else:
        c = cfg.custom
        cd = {
            "name": c.name,
            "fields": list(c.fields),
            "nonlinearity": [nl.to_dict() for nl in c.nonlinearity],
            "sources": [s.to_dict() for s in c.sources],
            "transfer": [{"pair": [i, l], "tag": law.tag, "beta": float(law.beta)}
                         for (i, l), law in c.transfer],
        }
        if c.T is not None:
            cd["T"], cd["S"] = float(c.T), int(c.S)
        d["custom"] = cd
    d.update(n=cfg.n, Hdiv=cfg.Hdiv, m=cfg.m, n_basis=cfg.n_basis,
             delta0=float(cfg.delta0), max_picard=cfg.max_picard)
    return d


def serialize_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
