"""Time grids, sampled paths, two-parameter fields and p-variation."""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

# Relative tolerance for additivity checks: |defect| <= ADDITIVITY_RTOL * (1 + |value|).
ADDITIVITY_RTOL = 1e-10
# Largest grid on which exact p-variation runs unless the caller raises the cap.
EXACT_PVAR_MAX_POINTS = 18
# Above this size triple scans fall back to random sampling.
EXHAUSTIVE_TRIPLE_MAX = 512


class GridError(ValueError):
    """Raised for malformed grids, off-grid times or grid mismatches."""


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing sample times on [0, T] starting at 0."""

    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).copy()
        if t.ndim != 1 or t.size < 2:
            raise GridError("a grid needs at least two times")
        if not np.all(np.isfinite(t)):
            raise GridError("grid times must be finite")
        if t[0] != 0.0:
            raise GridError("grid must start at 0")
        if np.any(np.diff(t) <= 0):
            raise GridError("grid times must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, T: float, n_steps: int) -> "TimeGrid":
        if T <= 0 or n_steps < 1:
            raise GridError("need T > 0 and at least one step")
        t = np.linspace(0.0, T, n_steps + 1)
        return cls(t)

    def __len__(self):
        return self.times.size

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and self.times.shape == other.times.shape and bool(
            np.all(self.times == other.times)
        )

    __hash__ = None

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def mesh(self) -> float:
        return float(np.max(np.diff(self.times)))

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.times)

    def index_of(self, t, atol: float | None = None) -> np.ndarray | int:
        """Grid index of each time in ``t``; raises if any time is off-grid."""
        atol = 1e-12 * max(self.T, 1.0) if atol is None else atol
        arr = np.atleast_1d(np.asarray(t, dtype=float))
        idx = np.clip(np.searchsorted(self.times, arr), 0, len(self) - 1)
        lower = np.clip(idx - 1, 0, len(self) - 1)
        pick = np.where(np.abs(self.times[lower] - arr) < np.abs(self.times[idx] - arr), lower, idx)
        if np.any(np.abs(self.times[pick] - arr) > atol):
            raise GridError(f"times not on grid: {arr[np.abs(self.times[pick] - arr) > atol][:5]}")
        return int(pick[0]) if np.ndim(t) == 0 else pick

    def contains(self, other: "TimeGrid") -> bool:
        try:
            self.index_of(other.times)
        except GridError:
            return False
        return True

    def subgrid(self, indices) -> "TimeGrid":
        return TimeGrid(self.times[np.asarray(indices)])

    def dyadic_indices(self, level: int) -> np.ndarray:
        """Indices of every 2**level-th point, always keeping the last one."""
        idx = np.arange(0, len(self), 2**level)
        if idx[-1] != len(self) - 1:
            idx = np.append(idx, len(self) - 1)
        return idx

    def max_dyadic_level(self) -> int:
        return max(int(np.floor(np.log2(len(self) - 1))), 0)

    def truncate(self, horizon: float) -> "TimeGrid":
        """Grid points up to and including ``horizon`` (which must be on the grid)."""
        k = self.index_of(horizon)
        return TimeGrid(self.times[: k + 1])


@dataclass(frozen=True, eq=False)
class SampledPath:
    """Path values on a grid; ``values`` has shape (n, d) or (n, d, d)."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        v = v.copy()
        if v.shape[0] != len(self.grid):
            raise GridError(f"{v.shape[0]} values for a grid of {len(self.grid)} times")
        if not np.all(np.isfinite(v)):
            raise ValueError("path values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def value_shape(self) -> tuple:
        return self.values.shape[1:]

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    @property
    def scalar(self) -> np.ndarray:
        """Values of a one-dimensional path as a flat array."""
        if self.values[0].size != 1:
            raise ValueError("path is not one-dimensional")
        return self.values.reshape(len(self.grid))

    def restrict(self, grid: TimeGrid) -> "SampledPath":
        return SampledPath(grid, self.values[self.grid.index_of(grid.times)])

    def __len__(self):
        return len(self.grid)


def _norm(values: np.ndarray, value_ndim: int) -> np.ndarray:
    if value_ndim == 0:
        return np.abs(values)
    axes = tuple(range(values.ndim - value_ndim, values.ndim))
    return np.sqrt(np.sum(values**2, axis=axes))


class TwoParamField:
    """Values Xi[s, t] on ordered grid pairs s <= t.

    A field is either backed by a dense (n, n, *value_shape) array (only the
    upper triangle is meaningful) or by a vectorised evaluator ``func(i, j)``
    taking integer index arrays. Evaluators keep structured fields such as
    path increments cheap on large grids; ``dense()`` materialises them.
    """

    def __init__(self, grid: TimeGrid, values=None, *, func: Callable | None = None,
                 value_shape: tuple = (), check: bool = True):
        if (values is None) == (func is None):
            raise ValueError("give exactly one of values or func")
        self.grid = grid
        n = len(grid)
        if values is not None:
            arr = np.array(values, dtype=float)
            if arr.shape[:2] != (n, n):
                raise GridError(f"dense field must have leading shape {(n, n)}, got {arr.shape[:2]}")
            iu = np.tril_indices(n, -1)
            arr[iu] = 0.0
            arr.setflags(write=False)
            self._dense = arr
            self.value_shape = arr.shape[2:]
            self._func = lambda i, j: arr[i, j]
        else:
            self._dense = None
            self.value_shape = tuple(value_shape)
            self._func = func
        if check:
            self._validate()

    def _validate(self):
        n = len(self.grid)
        diag = np.arange(n)
        d = self(diag, diag)
        if np.any(_norm(d, len(self.value_shape)) != 0.0):
            raise ValueError("two-parameter field must vanish on the diagonal")
        if self._dense is not None:
            i, j = np.triu_indices(n)
            if not np.all(np.isfinite(self._dense[i, j])):
                raise ValueError("field entries must be finite")

    def __call__(self, i, j) -> np.ndarray:
        i = np.asarray(i, dtype=int)
        j = np.asarray(j, dtype=int)
        return np.asarray(self._func(i, j), dtype=float)

    def __len__(self):
        return len(self.grid)

    @property
    def is_dense(self) -> bool:
        return self._dense is not None

    def at(self, s: float, t: float) -> np.ndarray:
        i, j = self.grid.index_of(s), self.grid.index_of(t)
        if i > j:
            raise GridError("need s <= t")
        return self(i, j)

    def dense(self) -> np.ndarray:
        if self._dense is not None:
            return self._dense
        n = len(self.grid)
        out = np.zeros((n, n) + self.value_shape)
        for i in range(n):
            j = np.arange(i, n)
            out[i, i:] = self(np.full(j.shape, i), j)
        return out

    def consecutive(self) -> np.ndarray:
        """Values on consecutive pairs (k, k+1)."""
        k = np.arange(len(self.grid) - 1)
        return self(k, k + 1)

    def norms(self, i, j) -> np.ndarray:
        return _norm(self(i, j), len(self.value_shape))

    def restrict(self, indices) -> "TwoParamField":
        """The field on the subgrid made of the given (increasing) indices."""
        idx = np.asarray(indices, dtype=int)
        return TwoParamField(self.grid.subgrid(idx), func=lambda i, j: self(idx[i], idx[j]),
                             value_shape=self.value_shape, check=False)

    def _combine(self, other, op) -> "TwoParamField":
        if isinstance(other, TwoParamField):
            if other.grid != self.grid:
                raise GridError("fields live on different grids")
            return TwoParamField(self.grid, func=lambda i, j: op(self(i, j), other(i, j)),
                                 value_shape=self.value_shape, check=False)
        return TwoParamField(self.grid, func=lambda i, j: op(self(i, j), other),
                             value_shape=self.value_shape, check=False)

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __mul__(self, c: float):
        return self._combine(float(c), np.multiply)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0


def increments_field(path: SampledPath) -> TwoParamField:
    """Additive field X[s, t] = X_t - X_s."""
    v = path.values
    return TwoParamField(path.grid, func=lambda i, j: v[j] - v[i], value_shape=path.value_shape,
                         check=False)


def delta_defect(field: TwoParamField, s: float, u: float, t: float) -> np.ndarray:
    """Additivity defect Xi[s,t] - Xi[s,u] - Xi[u,t] at grid times s <= u <= t."""
    i, k, j = field.grid.index_of([s, u, t])
    if not i <= k <= j:
        raise GridError("need s <= u <= t")
    return defect_at(field, i, k, j)


def defect_at(field: TwoParamField, i, k, j) -> np.ndarray:
    """Index-based additivity defect, vectorised over index arrays."""
    return field(i, j) - field(i, k) - field(k, j)


def all_triples(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index arrays of every triple i < k < j on an n-point grid."""
    i, k, j = np.array(list(itertools.combinations(range(n), 3))).T.reshape(3, -1)
    return i, k, j


def sample_triples(n: int, size: int, rng: np.random.Generator):
    """Uniformly drawn triples i < k < j (rejection of ties)."""
    out = np.empty((0, 3), dtype=int)
    while out.shape[0] < size:
        draw = np.sort(rng.integers(0, n, size=(2 * size, 3)), axis=1)
        ok = (draw[:, 0] < draw[:, 1]) & (draw[:, 1] < draw[:, 2])
        out = np.vstack([out, draw[ok]])
    out = out[:size]
    return out[:, 0], out[:, 1], out[:, 2]


def max_relative_defect(field: TwoParamField, *, exhaustive_max: int = EXHAUSTIVE_TRIPLE_MAX,
                        n_samples: int = 100_000, seed: int = 0) -> float:
    """Largest |defect| / (1 + |Xi[s,t]|) over grid triples (sampled on big grids)."""
    n = len(field.grid)
    if n < 3:
        return 0.0
    nd = len(field.value_shape)
    if n <= exhaustive_max:
        worst = 0.0
        for i in range(n - 2):
            k, j = np.triu_indices(n - i - 1, 1)
            k, j = k + i + 1, j + i + 1
            ii = np.full(k.shape, i)
            d = _norm(defect_at(field, ii, k, j), nd)
            worst = max(worst, float(np.max(d / (1.0 + field.norms(ii, j)))))
        return worst
    i, k, j = sample_triples(n, n_samples, np.random.default_rng(seed))
    d = _norm(defect_at(field, i, k, j), nd)
    return float(np.max(d / (1.0 + field.norms(i, j))))


def is_additive(field: TwoParamField, rtol: float = ADDITIVITY_RTOL, **kw) -> bool:
    return max_relative_defect(field, **kw) <= rtol


# ---------------------------------------------------------------- p-variation

def _pair_powers(field: TwoParamField, p: float) -> np.ndarray:
    """Dense matrix C[i, j] = |Xi[i, j]|**p for i < j (zero elsewhere)."""
    n = len(field.grid)
    c = np.zeros((n, n))
    for i in range(n - 1):
        j = np.arange(i + 1, n)
        c[i, i + 1:] = field.norms(np.full(j.shape, i), j) ** p
    return c


def p_variation(field: TwoParamField, p: float, mode: str = "exact",
                max_points: int | None = EXACT_PVAR_MAX_POINTS) -> float:
    """Sup over grid sub-partitions of the sum of |Xi[u, u']|**p.

    ``mode="exact"`` runs an O(n^2) dynamic programme over partition end
    points and refuses grids longer than ``max_points`` (pass ``None`` to lift
    the cap). ``mode="dyadic_lower_bound"`` only scans the full grid and its
    dyadic coarsenings, which is a lower bound for the exact value.
    """
    if p < 1:
        raise ValueError("p-variation needs p >= 1")
    n = len(field.grid)
    if mode == "dyadic_lower_bound":
        best = 0.0
        for level in range(field.grid.max_dyadic_level() + 1):
            idx = field.grid.dyadic_indices(level)
            best = max(best, float(np.sum(field.norms(idx[:-1], idx[1:]) ** p)))
        return best
    if mode != "exact":
        raise ValueError(f"unknown mode {mode!r}")
    if max_points is not None and n > max_points:
        raise ValueError(f"exact p-variation capped at {max_points} points, grid has {n}")
    c = _pair_powers(field, p)
    best = np.zeros(n)
    for j in range(1, n):
        best[j] = np.max(best[:j] + c[:j, j])
    return float(best[-1])


def p_var_norm(field: TwoParamField, p: float, **kw) -> float:
    return p_variation(field, p, **kw) ** (1.0 / p)


class ControlField(TwoParamField):
    """Dense nonnegative superadditive scalar field omega(s, t)."""

    def __init__(self, grid: TimeGrid, values, *, check: bool = True, tol: float = 1e-9,
                 perturbed: bool = False):
        super().__init__(grid, values, check=False)
        if self.value_shape != ():
            raise ValueError("a control takes scalar values")
        self.perturbed = perturbed
        if check:
            self._validate()
            self._check_control(tol)

    def _check_control(self, tol: float):
        w = self._dense
        n = len(self.grid)
        i, j = np.triu_indices(n, 1)
        if np.any(w[i, j] < 0):
            raise ValueError("control values must be nonnegative")
        scale = tol * (1.0 + np.max(np.abs(w)))
        for s in range(n - 2):
            # w[s,u] + w[u,t] <= w[s,t] for all s < u < t
            lhs = w[s, s + 1:, None] + w[s + 1:, s + 1:]
            rhs = w[s, None, s + 1:]
            mask = np.triu(np.ones((n - s - 1, n - s - 1), dtype=bool), 1)
            if np.any((lhs - rhs)[mask] > scale):
                raise ValueError("control is not superadditive")

    def __call__(self, i, j):
        return self._dense[np.asarray(i, dtype=int), np.asarray(j, dtype=int)]

    @property
    def values(self) -> np.ndarray:
        return self._dense

    def strictly_increasing(self) -> bool:
        """True when enlarging an interval always strictly enlarges omega."""
        w = self._dense
        n = len(self.grid)
        grow_right = np.all((w[:, 1:] > w[:, :-1])[np.triu(np.ones((n, n - 1), dtype=bool), 0)])
        grow_left = np.all((w[:-1, :] > w[1:, :])[np.triu(np.ones((n - 1, n), dtype=bool), 1)])
        return bool(grow_right and grow_left)

    def perturb(self, eps: float = 1e-12) -> "ControlField":
        """omega + eps * (t - s); adds a strictly increasing component."""
        t = self.grid.times
        extra = eps * np.clip(t[None, :] - t[:, None], 0.0, None)
        return ControlField(self.grid, self._dense + extra, check=False, perturbed=True)

    def __add__(self, other):
        if isinstance(other, ControlField):
            return ControlField(self.grid, self._dense + other._dense, check=False,
                                perturbed=self.perturbed or other.perturbed)
        return super().__add__(other)

    def power(self, a: float) -> np.ndarray:
        return self._dense**a


def variation_control(field: TwoParamField, p: float, max_points: int | None = 2049) -> ControlField:
    """omega(s, t) = p-variation of the field restricted to [s, t], for all grid pairs.

    Superadditive by construction. Cost is O(n^3) flops with n numpy sweeps.
    """
    if p < 1:
        raise ValueError("p-variation needs p >= 1")
    n = len(field.grid)
    if max_points is not None and n > max_points:
        raise ValueError(f"variation control capped at {max_points} points, grid has {n}")
    c = _pair_powers(field, p)
    best = np.full((n, n), -np.inf)
    best[0, 0] = 0.0
    for j in range(1, n):
        best[:j, j] = np.max(best[:j, :j] + c[:j, j][None, :], axis=1)
        best[j, j] = 0.0
    best[np.tril_indices(n, -1)] = 0.0
    return ControlField(field.grid, best, check=False)


def length_control(grid: TimeGrid) -> ControlField:
    t = grid.times
    return ControlField(grid, np.clip(t[None, :] - t[:, None], 0.0, None), check=False)


def control_osc(control: ControlField, mesh: float) -> float:
    """sup of omega(s, t) over grid pairs with t - s <= mesh."""
    if mesh <= 0:
        raise ValueError("mesh must be positive")
    t = control.grid.times
    gap = t[None, :] - t[:, None]
    mask = (gap >= 0) & (gap <= mesh * (1 + 1e-12))
    return float(np.max(control.values[mask]))


# ------------------------------------------------------------------ CSV paths

def _check_rows(times: np.ndarray, values: np.ndarray):
    if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
        raise ValueError("NaN or Inf in path CSV")
    if np.unique(times).size != times.size:
        raise ValueError("duplicate times in path CSV")
    if np.any(np.diff(times) <= 0):
        raise ValueError("path CSV rows must be sorted by t")


def read_path_csv(source) -> SampledPath:
    """Parse a ``t,x1,...,xd`` CSV into a SampledPath."""
    text = Path(source).read_text() if not isinstance(source, io.TextIOBase) else source.read()
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ValueError("empty path CSV")
    header = [h.strip() for h in rows[0]]
    d = len(header) - 1
    if d < 1 or header[0] != "t" or header[1:] != [f"x{k}" for k in range(1, d + 1)]:
        raise ValueError(f"bad path CSV header {header}")
    body = []
    for line_no, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != d + 1:
            raise ValueError(f"line {line_no}: expected {d + 1} fields")
        try:
            body.append([float(x) for x in row])
        except ValueError as exc:
            raise ValueError(f"line {line_no}: {exc}") from None
    data = np.array(body, dtype=float).reshape(-1, d + 1)
    _check_rows(data[:, 0], data[:, 1:])
    return SampledPath(TimeGrid(data[:, 0]), data[:, 1:])


def format_float(x: float) -> str:
    return repr(float(x))


def write_path_csv(path: SampledPath, dest) -> None:
    if len(path.value_shape) != 1:
        raise ValueError("only vector-valued paths have a CSV form")
    lines = ["t," + ",".join(f"x{k}" for k in range(1, path.dim + 1))]
    for t, row in zip(path.times, path.values):
        lines.append(",".join([format_float(t)] + [format_float(x) for x in row]))
    Path(dest).write_text("\n".join(lines) + "\n")


def as_grid(times: Sequence[float] | TimeGrid) -> TimeGrid:
    return times if isinstance(times, TimeGrid) else TimeGrid(np.asarray(times, dtype=float))
