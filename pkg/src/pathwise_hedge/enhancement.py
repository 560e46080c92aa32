"""Enhanced price paths: traces paired with additive symmetric brackets."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grids import (
    ADDITIVITY_RTOL,
    GridError,
    SampledPath,
    TimeGrid,
    TwoParamField,
    format_float,
    max_relative_defect,
    read_path_csv,
    write_path_csv,
)

VOL_KINDS = ("constant", "black_scholes", "cev", "table")


class EllipticityError(ValueError):
    pass


class TableDomainError(ValueError):
    pass


@dataclass(frozen=True)
class LocalVolSpec:
    """Local variance function a(x) of a one-dimensional diffusion-type model.

    kinds: ``constant`` a = sigma**2, ``black_scholes`` a = sigma**2 x**2,
    ``cev`` a = sigma**2 x**(2 beta), ``table`` linear interpolation of
    ``table_a`` over ``table_x``. Outside a table's range ``a`` raises unless
    ``extrapolate`` is set, in which case values are held flat.
    """

    kind: str = "black_scholes"
    sigma: float = 0.2
    beta: float = 1.0
    table_x: tuple | None = None
    table_a: tuple | None = None
    alpha: float = 1.0
    floor: float = 0.0
    extrapolate: bool = False

    def __post_init__(self):
        if self.kind not in VOL_KINDS:
            raise ValueError(f"unknown vol kind {self.kind!r}")
        if self.kind != "table" and not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0 < self.alpha <= 1:
            raise ValueError("Hoelder exponent must lie in (0, 1]")
        if self.floor < 0:
            raise ValueError("ellipticity floor must be nonnegative")
        if self.kind == "table":
            if self.table_x is None or self.table_a is None:
                raise ValueError("table vol needs table_x and table_a")
            tx = np.asarray(self.table_x, dtype=float)
            ta = np.asarray(self.table_a, dtype=float)
            if tx.shape != ta.shape or tx.size < 2 or np.any(np.diff(tx) <= 0):
                raise ValueError("table_x must be increasing and match table_a")
            object.__setattr__(self, "table_x", tuple(tx))
            object.__setattr__(self, "table_a", tuple(ta))

    def evaluate(self, x) -> tuple[np.ndarray, bool]:
        """a(x) together with a flag telling whether table extrapolation was used."""
        x = np.asarray(x, dtype=float)
        extrapolated = False
        if self.kind == "constant":
            a = np.full(x.shape, self.sigma**2)
        elif self.kind == "black_scholes":
            a = self.sigma**2 * x**2
        elif self.kind == "cev":
            a = self.sigma**2 * np.abs(x) ** (2.0 * self.beta)
        else:
            tx = np.asarray(self.table_x)
            outside = (x < tx[0]) | (x > tx[-1])
            if np.any(outside):
                if not self.extrapolate:
                    raise TableDomainError(
                        f"vol table covers [{tx[0]}, {tx[-1]}], asked for {x[outside][:3]}")
                extrapolated = True
            a = np.interp(x, tx, np.asarray(self.table_a))
        if np.any(~np.isfinite(a)) or np.any(a <= 0) or np.any(a < self.floor):
            raise EllipticityError("local variance is not elliptic on the evaluation domain")
        return a, extrapolated

    def a(self, x) -> np.ndarray:
        return self.evaluate(x)[0]

    def log_vol(self, x) -> np.ndarray:
        """sqrt(a(x)) / x, the local volatility in log coordinates."""
        x = np.asarray(x, dtype=float)
        return np.sqrt(self.a(x)) / x

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "alpha": self.alpha, "floor": self.floor}
        if self.kind == "table":
            out.update(table_x=list(self.table_x), table_a=list(self.table_a),
                       extrapolate=self.extrapolate)
        else:
            out["sigma"] = self.sigma
            if self.kind == "cev":
                out["beta"] = self.beta
        return out


def discount(path: SampledPath, r: float) -> SampledPath:
    """x = exp(-r t) z, applied to every coordinate."""
    f = np.exp(-r * path.times).reshape((-1,) + (1,) * (path.values.ndim - 1))
    return SampledPath(path.grid, path.values * f)


def undiscount(path: SampledPath, r: float) -> SampledPath:
    f = np.exp(r * path.times).reshape((-1,) + (1,) * (path.values.ndim - 1))
    return SampledPath(path.grid, path.values * f)


def _cumulative_from_field(field: TwoParamField) -> np.ndarray:
    n = len(field.grid)
    return field(np.zeros(n, dtype=int), np.arange(n))


@dataclass(frozen=True, eq=False)
class EnhancedPath:
    """Trace X with an additive symmetric bracket [X].

    The bracket is held as its cumulative path ``bracket_path`` (starting at
    the zero matrix), which makes additivity exact. ``vol`` and ``r`` are
    kept when the bracket comes from a diffusion-type model.
    """

    trace: SampledPath
    bracket_path: np.ndarray
    vol: LocalVolSpec | None = None
    r: float = 0.0
    coordinates: str = "discounted"

    def __post_init__(self):
        n, d = len(self.trace.grid), self.trace.dim
        b = np.asarray(self.bracket_path, dtype=float).reshape(n, d, d).copy()
        if np.any(b[0] != 0):
            raise ValueError("bracket path must start at zero")
        if not np.all(np.isfinite(b)):
            raise ValueError("bracket values must be finite")
        if not np.allclose(b, np.swapaxes(b, 1, 2), rtol=1e-12, atol=1e-14):
            raise ValueError("bracket must be symmetric")
        b.setflags(write=False)
        object.__setattr__(self, "bracket_path", b)
        if self.coordinates not in ("discounted", "undiscounted"):
            raise ValueError("coordinates must be discounted or undiscounted")

    @classmethod
    def from_bracket_field(cls, trace: SampledPath, bracket: TwoParamField, **kw) -> "EnhancedPath":
        """Build from a raw additive bracket field, checking additivity."""
        if bracket.grid != trace.grid:
            raise GridError("bracket and trace live on different grids")
        if max_relative_defect(bracket) > ADDITIVITY_RTOL:
            raise ValueError("bracket field is not additive")
        d = trace.dim
        cum = _cumulative_from_field(bracket).reshape(len(trace.grid), d, d)
        return cls(trace, cum, **kw)

    @property
    def grid(self) -> TimeGrid:
        return self.trace.grid

    @property
    def dim(self) -> int:
        return self.trace.dim

    @property
    def bracket(self) -> TwoParamField:
        b = self.bracket_path
        return TwoParamField(self.grid, func=lambda i, j: b[j] - b[i], value_shape=b.shape[1:],
                             check=False)

    @property
    def second_order(self) -> TwoParamField:
        """Half of (X[s,t] outer X[s,t] - [X][s,t])."""
        x = self.trace.values
        b = self.bracket_path

        def f(i, j):
            dx = x[j] - x[i]
            return 0.5 * (dx[..., :, None] * dx[..., None, :] - (b[j] - b[i]))

        return TwoParamField(self.grid, func=f, value_shape=b.shape[1:], check=False)

    def restrict(self, grid: TimeGrid) -> "EnhancedPath":
        idx = self.grid.index_of(grid.times)
        return EnhancedPath(SampledPath(grid, self.trace.values[idx]), self.bracket_path[idx],
                            self.vol, self.r, self.coordinates)

    def scalar_bracket(self) -> np.ndarray:
        if self.dim != 1:
            raise ValueError("bracket is not scalar")
        return self.bracket_path[:, 0, 0]


def _trapezoid_cumulative(times: np.ndarray, density: np.ndarray) -> np.ndarray:
    h = np.diff(times).reshape((-1,) + (1,) * (density.ndim - 1))
    out = np.zeros_like(density)
    out[1:] = np.cumsum(0.5 * h * (density[1:] + density[:-1]), axis=0)
    return out


def bracket_density(path: SampledPath, vol: LocalVolSpec, r: float = 0.0,
                    coordinates: str = "discounted") -> tuple[np.ndarray, bool]:
    """Per-node density of the diffusion bracket, shape (n, d, d)."""
    n, d = len(path.grid), path.dim
    if vol.kind != "constant" and d != 1:
        raise ValueError("state-dependent vols need a one-dimensional path")
    t = path.times
    if coordinates == "discounted":
        x = path.values[:, 0]
        a, flag = vol.evaluate(x)
    elif coordinates == "undiscounted":
        x = np.exp(-r * t) * path.values[:, 0]
        a, flag = vol.evaluate(x)
        a = np.exp(2.0 * r * t) * a
    else:
        raise ValueError("coordinates must be discounted or undiscounted")
    dens = a[:, None, None] * np.eye(d)[None, :, :]
    return dens, flag


def diffusion_enhance(path: SampledPath, vol: LocalVolSpec, r: float = 0.0,
                      coordinates: str = "discounted") -> EnhancedPath:
    """Bracket of an alpha-diffusion-type model by trapezoidal quadrature.

    Discounted coordinates integrate a(X_t); undiscounted coordinates
    integrate exp(2rt) a(exp(-rt) S_t).
    """
    if r < 0:
        raise ValueError("r must be nonnegative")
    dens, _ = bracket_density(path, vol, r, coordinates)
    cum = _trapezoid_cumulative(path.times, dens)
    return EnhancedPath(path, cum, vol=vol, r=r, coordinates=coordinates)


def extrapolation_used(path: SampledPath, vol: LocalVolSpec, r: float = 0.0,
                       coordinates: str = "discounted") -> bool:
    return bracket_density(path, vol, r, coordinates)[1]


def realized_bracket(path: SampledPath, coarse: TimeGrid | None = None) -> TwoParamField:
    """Sum of X[u,u'] outer X[u,u'] over fine cells inside each coarse interval."""
    coarse = path.grid if coarse is None else coarse
    try:
        idx = path.grid.index_of(coarse.times)
    except GridError:
        raise GridError("coarse grid is not nested in the path grid") from None
    dx = np.diff(path.values, axis=0)
    outer = dx[:, :, None] * dx[:, None, :]
    cum = np.zeros((len(path.grid),) + outer.shape[1:])
    cum[1:] = np.cumsum(outer, axis=0)
    c = cum[idx]
    return TwoParamField(coarse, func=lambda i, j: c[j] - c[i], value_shape=c.shape[1:], check=False)


def realized_enhance(path: SampledPath) -> EnhancedPath:
    """Enhancement whose bracket is the realized covariation on the path grid."""
    rb = realized_bracket(path)
    n = len(path.grid)
    return EnhancedPath(path, rb(np.zeros(n, dtype=int), np.arange(n)))


def bracket_diff(a: EnhancedPath, b: EnhancedPath) -> TwoParamField:
    """[a] - [b] for two enhancements of the same trace."""
    if a.grid != b.grid or not np.array_equal(a.trace.values, b.trace.values):
        raise ValueError("enhanced paths have different traces")
    c = a.bracket_path - b.bracket_path
    return TwoParamField(a.grid, func=lambda i, j: c[j] - c[i], value_shape=c.shape[1:], check=False)


# ------------------------------------------------------------------ CSV pair

def write_enhanced_csv(ep: EnhancedPath, trace_file, bracket_file) -> None:
    """Trace as a path CSV; bracket as rows ``s,t,b11,...`` on consecutive index pairs."""
    write_path_csv(ep.trace, trace_file)
    d = ep.dim
    cols = [f"b{i}{j}" for i in range(1, d + 1) for j in range(1, d + 1)]
    lines = ["s,t," + ",".join(cols)]
    inc = np.diff(ep.bracket_path, axis=0).reshape(len(ep.grid) - 1, d * d)
    for k, row in enumerate(inc):
        lines.append(f"{k},{k + 1}," + ",".join(format_float(v) for v in row))
    Path(bracket_file).write_text("\n".join(lines) + "\n")


def read_enhanced_csv(trace_file, bracket_file) -> EnhancedPath:
    trace = read_path_csv(trace_file)
    n, d = len(trace.grid), trace.dim
    rows = list(csv.reader(io.StringIO(Path(bracket_file).read_text())))
    header = [h.strip() for h in rows[0]]
    expected = ["s", "t"] + [f"b{i}{j}" for i in range(1, d + 1) for j in range(1, d + 1)]
    if header != expected:
        raise ValueError(f"bad bracket CSV header {header}")
    pairs = {}
    for row in rows[1:]:
        if not row:
            continue
        s, t = int(row[0]), int(row[1])
        vals = np.array([float(v) for v in row[2:]])
        if not np.all(np.isfinite(vals)):
            raise ValueError("NaN or Inf in bracket CSV")
        if not 0 <= s < t < n:
            raise ValueError(f"bad index pair ({s},{t})")
        pairs[(s, t)] = vals.reshape(d, d)
    missing = [k for k in range(n - 1) if (k, k + 1) not in pairs]
    if missing:
        raise ValueError(f"bracket CSV lacks consecutive pairs starting at {missing[:5]}")
    cum = np.zeros((n, d, d))
    cum[1:] = np.cumsum([pairs[(k, k + 1)] for k in range(n - 1)], axis=0)
    for (s, t), v in pairs.items():
        if not np.allclose(cum[t] - cum[s], v, rtol=ADDITIVITY_RTOL, atol=ADDITIVITY_RTOL):
            raise ValueError(f"bracket CSV is not additive at ({s},{t})")
    return EnhancedPath(trace, cum)
