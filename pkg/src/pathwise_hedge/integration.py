"""Sewing, Young integration and compensated Riemann sums on sampled grids."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.special import zeta

from .grids import (
    EXACT_PVAR_MAX_POINTS,
    EXHAUSTIVE_TRIPLE_MAX,
    ControlField,
    GridError,
    SampledPath,
    TwoParamField,
    _norm,
    control_osc,
    defect_at,
    increments_field,
    p_variation,
    sample_triples,
)

DEFAULT_ATOL = 1e-9
DEFAULT_RTOL = 1e-7
CONTROL_EPS = 1e-12


class DivergenceError(ArithmeticError):
    """Successive dyadic Riemann sums move apart instead of settling."""


def sewing_constant(gamma: float) -> float:
    """1 / (1 - 2**(1 - gamma)), the factor in the sewing error bound."""
    if gamma <= 1:
        raise ValueError("gamma must exceed 1")
    return 1.0 / (1.0 - 2.0 ** (1.0 - gamma))


def riemann_path(field: TwoParamField) -> np.ndarray:
    """Cumulative sums of Xi over consecutive grid pairs, starting at 0."""
    steps = field.consecutive()
    out = np.zeros((len(field.grid),) + field.value_shape)
    out[1:] = np.cumsum(steps, axis=0)
    return out


def dyadic_sums(field: TwoParamField, levels: int | None = None) -> np.ndarray:
    """Riemann sums over [0, T] on the grid and its dyadic coarsenings.

    Row ``k`` uses every ``2**k``-th grid point, so row 0 is the finest.
    """
    top = field.grid.max_dyadic_level() if levels is None else min(levels, field.grid.max_dyadic_level())
    sums = []
    for level in range(top + 1):
        idx = field.grid.dyadic_indices(level)
        sums.append(np.sum(field(idx[:-1], idx[1:]), axis=0))
    return np.array(sums)


@dataclass
class RefinementStudy:
    """Dyadic Riemann sums (finest first) with their Cauchy differences."""

    sums: np.ndarray
    diffs: np.ndarray
    converged: bool
    diverging: bool

    def to_dict(self) -> dict:
        return {
            "sums": np.asarray(self.sums).tolist(),
            "cauchy_differences": self.diffs.tolist(),
            "converged": self.converged,
            "diverging": self.diverging,
        }


def refinement_study(field: TwoParamField, levels: int | None = None, atol: float = DEFAULT_ATOL,
                     rtol: float = DEFAULT_RTOL) -> RefinementStudy:
    sums = dyadic_sums(field, levels)
    nd = len(field.value_shape)
    diffs = _norm(sums[:-1] - sums[1:], nd) if len(sums) > 1 else np.zeros(0)
    scale = float(np.max(_norm(sums, nd))) if len(sums) else 0.0
    converged = bool(diffs.size and diffs[0] < atol + rtol * scale) or diffs.size == 0
    # coarse -> fine trajectory; diverging when it keeps growing over 3+ steps
    traj = diffs[::-1]
    diverging = bool(
        traj.size >= 3 and np.all(np.diff(traj) > 0) and traj[-1] > atol + rtol * scale
    )
    return RefinementStudy(sums, diffs, converged, diverging)


def defect_norm(field: TwoParamField, control: ControlField, gamma: float, *,
                exhaustive_max: int = EXHAUSTIVE_TRIPLE_MAX, n_samples: int = 100_000,
                seed: int = 0) -> tuple[float, bool]:
    """sup |dXi[s,u,t]| / omega(s,t)**gamma over grid triples.

    Returns ``(value, exhaustive)``; above ``exhaustive_max`` points the sup
    is estimated from ``n_samples`` random triples.
    """
    n = len(field.grid)
    nd = len(field.value_shape)
    if n < 3:
        return 0.0, True
    w = control.values

    def ratio(i, k, j):
        d = _norm(defect_at(field, i, k, j), nd)
        wg = w[i, j] ** gamma
        bad = (wg == 0) & (d > 0)
        if np.any(bad):
            raise ValueError("control violation: nonzero defect where omega vanishes")
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(wg > 0, d / np.where(wg > 0, wg, 1.0), 0.0)
        return float(np.max(r)) if r.size else 0.0

    if n <= exhaustive_max:
        worst = 0.0
        for i in range(n - 2):
            k, j = np.triu_indices(n - i - 1, 1)
            worst = max(worst, ratio(np.full(k.shape, i), k + i + 1, j + i + 1))
        return worst, True
    i, k, j = sample_triples(n, n_samples, np.random.default_rng(seed))
    return ratio(i, k, j), False


@dataclass
class SewingResult:
    integral_path: SampledPath
    local_error_bound: TwoParamField
    gamma: float
    defect_norm: float
    defect_norm_exhaustive: bool
    refinement: RefinementStudy
    cauchy_bounds: np.ndarray
    control_perturbed: bool = False
    notes: list = dc_field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.refinement.converged

    def error_field(self, field: TwoParamField) -> TwoParamField:
        """|I[s,t] - Xi[s,t]| where I is the sewn path."""
        inc = increments_field(self.integral_path)
        vs = field.value_shape
        nd = len(vs)

        def f(i, j):
            diff = inc(i, j).reshape(np.broadcast(i, j).shape + vs) - field(i, j)
            return _norm(diff, nd)

        return TwoParamField(field.grid, func=f, check=False)

    def violations(self, field: TwoParamField, slack: float = 1e-12) -> int:
        """Number of grid pairs where the sewing error bound fails."""
        err = self.error_field(field)
        n = len(field.grid)
        count = 0
        for i in range(n - 1):
            j = np.arange(i + 1, n)
            ii = np.full(j.shape, i)
            e = err(ii, j)
            b = self.local_error_bound(ii, j)
            count += int(np.sum(e > b + slack * (1.0 + field.norms(ii, j))))
        return count

    def to_dict(self) -> dict:
        return {
            "integral_T": np.asarray(self.integral_path.values[-1]).tolist(),
            "gamma": self.gamma,
            "defect_norm": self.defect_norm,
            "defect_norm_exhaustive": self.defect_norm_exhaustive,
            "sewing_constant": sewing_constant(self.gamma),
            "control_perturbed": self.control_perturbed,
            "cauchy_bounds": self.cauchy_bounds.tolist(),
            **self.refinement.to_dict(),
            "notes": list(self.notes),
        }


def sew(field: TwoParamField, control: ControlField, gamma: float,
        refinement_levels: int | None = None, *, atol: float = DEFAULT_ATOL,
        rtol: float = DEFAULT_RTOL, seed: int = 0) -> SewingResult:
    """Sew an approximately additive field into a path.

    The limit is estimated by the Riemann sums on the finest grid. The error
    bound per pair is ``defect_norm * omega**gamma / (1 - 2**(1-gamma))`` and
    the dyadic Cauchy differences are compared with the refinement estimate
    ``2**gamma * zeta(gamma) * defect_norm * omega(0,T) * osc(omega, mesh)**(gamma-1)``.
    """
    if gamma <= 1:
        raise ValueError("gamma must exceed 1")
    if control.grid != field.grid:
        raise GridError("control and field live on different grids")
    notes = []
    perturbed = control.perturbed
    if not control.strictly_increasing():
        control = control.perturb(CONTROL_EPS)
        perturbed = True
        msg = f"control has repeated values; perturbed by {CONTROL_EPS:g}*(t-s)"
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)

    norm, exhaustive = defect_norm(field, control, gamma, seed=seed)
    if not exhaustive:
        notes.append("defect norm estimated from random triples")
    study = refinement_study(field, refinement_levels, atol, rtol)
    if study.diverging:
        raise DivergenceError(f"dyadic Riemann sums diverge: {study.diffs[::-1]}")

    grid = field.grid
    omega_total = float(control.values[0, -1])
    bounds = []
    for level in range(1, len(study.sums)):
        coarse_mesh = float(np.max(np.diff(grid.times[grid.dyadic_indices(level)])))
        osc = control_osc(control, coarse_mesh)
        bounds.append(2.0**gamma * zeta(gamma) * norm * omega_total * osc ** (gamma - 1.0))
    bounds = np.array(bounds)

    path = SampledPath(grid, riemann_path(field))
    const = sewing_constant(gamma)
    w = control.values
    bound_field = TwoParamField(grid, func=lambda i, j: norm * const * w[i, j] ** gamma, check=False)
    return SewingResult(path, bound_field, gamma, norm, exhaustive, study, bounds, perturbed, notes)


# ---------------------------------------------------------------- Young

def _covector_apply(H: np.ndarray, x: np.ndarray) -> np.ndarray:
    # H: (..., [m,] d), x: (..., d)
    if H.ndim == x.ndim:
        return np.sum(H * x, axis=-1)
    return np.einsum("...md,...d->...m", H, x)


def young_field(H: SampledPath, X: SampledPath, evaluation: str = "adapted") -> TwoParamField:
    """Xi[s,t] = H_s X[s,t] (adapted) or H_t X[s,t] (terminal)."""
    if H.grid != X.grid:
        raise GridError("H and X must share a grid")
    if evaluation not in ("adapted", "terminal"):
        raise ValueError(f"unknown evaluation {evaluation!r}")
    h, x = H.values, X.values
    if h.shape[-1] != x.shape[-1]:
        raise ValueError("H must act on vectors of X's dimension")
    vs = h.shape[1:-1]

    def f(i, j):
        return _covector_apply(h[i] if evaluation == "adapted" else h[j], x[j] - x[i])

    return TwoParamField(H.grid, func=f, value_shape=vs, check=False)


def young(H: SampledPath, X: SampledPath, evaluation: str = "adapted") -> SampledPath:
    """Young integral of H against X as Riemann sums on the common grid."""
    fld = young_field(H, X, evaluation)
    vals = riemann_path(fld)
    return SampledPath(H.grid, vals.reshape(len(H.grid), -1))


# ---------------------------------------------------------------- controlled paths

@dataclass(frozen=True, eq=False)
class ControlledPath:
    """Integrand H with a symmetric Gubinelli derivative H' relative to X."""

    H: SampledPath
    H_prime: SampledPath
    reference: SampledPath
    p: float = 2.5
    q: float = 4.0

    def __post_init__(self):
        if not (self.H.grid == self.H_prime.grid == self.reference.grid):
            raise GridError("H, H' and X must share a grid")
        d = self.reference.dim
        if self.H.values.shape[-1] != d:
            raise ValueError("H must be a covector path of the reference dimension")
        hp = self.H_prime.values.reshape(len(self.H.grid), d, d)
        if not np.allclose(hp, np.swapaxes(hp, 1, 2), rtol=0.0, atol=1e-12):
            raise ValueError("Gubinelli derivative must be symmetric")
        object.__setattr__(self, "H_prime", SampledPath(self.H.grid, hp))
        if self.p < 1 or self.q < 1:
            raise ValueError("exponents must be >= 1")

    @property
    def pstar(self) -> float:
        return self.p * self.q / (self.p + self.q)

    def remainder_field(self) -> TwoParamField:
        """R[s,t] = H[s,t] - H'_s X[s,t]."""
        h = self.H.values
        hp = self.H_prime.values
        x = self.reference.values

        def f(i, j):
            return h[j] - h[i] - np.einsum("...ab,...b->...a", hp[i], x[j] - x[i])

        return TwoParamField(self.H.grid, func=f, value_shape=h.shape[1:], check=False)


def compensated_field(cp: ControlledPath, ep) -> TwoParamField:
    """Xi[s,t] = H_s X[s,t] + <H'_s, second_order[s,t]>."""
    if cp.reference.grid != ep.trace.grid or not np.array_equal(cp.reference.values, ep.trace.values):
        raise ValueError("controlled path reference and enhanced trace differ")
    h = cp.H.values
    hp = cp.H_prime.values
    x = ep.trace.values
    so = ep.second_order

    def f(i, j):
        first = np.sum(h[i] * (x[j] - x[i]), axis=-1)
        second = np.sum(hp[i] * so(i, j), axis=(-2, -1))
        return first + second

    return TwoParamField(cp.H.grid, func=f, check=False)


def compensated_integral(cp: ControlledPath, ep) -> SampledPath:
    """(H, H').(X, second order) as compensated Riemann sums on the common grid."""
    fld = compensated_field(cp, ep)
    return SampledPath(cp.H.grid, riemann_path(fld))


def remainder_report(cp: ControlledPath, max_points: int | None = EXACT_PVAR_MAX_POINTS) -> dict:
    """Remainder field and its p*-variation, p* = pq/(p+q)."""
    rem = cp.remainder_field()
    n = len(cp.H.grid)
    mode = "exact" if max_points is None or n <= max_points else "dyadic_lower_bound"
    value = p_variation(rem, cp.pstar, mode=mode, max_points=max_points)
    return {"remainder_field": rem, "pstar": cp.pstar, "pstar_variation": value, "mode": mode}


# ---------------------------------------------------------------- synthetic benchmark

SYNTHETIC_KINDS = ("drift", "young", "compensated")


def _rough_path(n: int, T: float, rng: np.random.Generator) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(rng.standard_normal(n - 1) * np.sqrt(T / (n - 1)))])


def synthetic_field(kind: str, gamma: float, n_points: int, rng: np.random.Generator,
                    T: float = 1.0) -> tuple[TwoParamField, ControlField]:
    """Approximately additive test field together with a control it is measured against.

    drift:        F_t - F_s + a(s)(t-s)**gamma, omega = t - s
    young:        Y_s X[s,t], p = q = 2/gamma, omega = omega_Y**(1/2) omega_X**(1/2)
    compensated:  f(X_s) X[s,t] + f'(X_s) X[s,t]**2 / 2, p = 3/gamma, omega = omega_X + (t - s)
    """
    from .grids import TimeGrid, length_control, variation_control

    if gamma <= 1:
        raise ValueError("gamma must exceed 1")
    grid = TimeGrid.uniform(T, n_points - 1)
    t = grid.times
    gap = np.clip(t[None, :] - t[:, None], 0.0, None)
    if kind == "drift":
        F = _rough_path(n_points, T, rng)
        a = rng.uniform(-1.0, 1.0) * np.cos(rng.uniform(1.0, 6.0) * t + rng.uniform(0, 2 * np.pi))
        vals = np.triu(F[None, :] - F[:, None] + a[:, None] * gap**gamma)
        return TwoParamField(grid, vals, check=False), length_control(grid)
    if kind == "young":
        p = 2.0 / gamma
        # smoothed paths keep the p < 2 variation small enough to be meaningful
        k = max(1, n_points // 16)
        ker = np.ones(k) / k
        X = np.convolve(_rough_path(n_points + k - 1, T, rng), ker, mode="valid")
        Y = np.convolve(_rough_path(n_points + k - 1, T, rng), ker, mode="valid")
        vals = np.triu(Y[:, None] * (X[None, :] - X[:, None]))
        wx = variation_control(increments_field(SampledPath(grid, X)), p)
        wy = variation_control(increments_field(SampledPath(grid, Y)), p)
        return TwoParamField(grid, vals, check=False), ControlField(grid, np.sqrt(wx.values * wy.values), check=False)
    if kind == "compensated":
        p = 3.0 / gamma
        X = _rough_path(n_points, T, rng)
        freq = rng.uniform(0.5, 3.0)
        f, df = np.sin(freq * X), freq * np.cos(freq * X)
        dx = X[None, :] - X[:, None]
        vals = np.triu(f[:, None] * dx + 0.5 * df[:, None] * dx**2)
        wx = variation_control(increments_field(SampledPath(grid, X)), p)
        return TwoParamField(grid, vals, check=False), wx + length_control(grid)
    raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")


def sew_bench(n_fields: int = 50, n_points: int = 129, gammas=(1.2, 1.5, 2.0),
              rng: np.random.Generator | None = None) -> list[dict]:
    """Sew ``n_fields`` synthetic fields and count sewing-bound violations on every grid pair."""
    rng = np.random.default_rng(0) if rng is None else rng
    rows = []
    for m in range(n_fields):
        gamma = gammas[m % len(gammas)]
        kind = SYNTHETIC_KINDS[(m // len(gammas)) % len(SYNTHETIC_KINDS)]
        fld, ctrl = synthetic_field(kind, gamma, n_points, rng)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = sew(fld, ctrl, gamma)
        err = res.error_field(fld).dense()
        bnd = res.local_error_bound.dense()
        iu = np.triu_indices(n_points, 1)
        slack = bnd[iu] - err[iu]
        rows.append({
            "field": m,
            "kind": kind,
            "gamma": gamma,
            "defect_norm": res.defect_norm,
            "max_error": float(np.max(err[iu])),
            "min_slack": float(np.min(slack)),
            "violations": res.violations(fld),
            "integral_T": float(res.integral_path.values[-1].item()),
        })
    return rows
