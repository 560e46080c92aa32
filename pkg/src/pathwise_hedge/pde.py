"""Local-volatility pricing PDE in discounted coordinates, plus Greeks.

The solver works with the discounted value w(t, x), x = exp(-rt) z, which
solves  w_t + a(x) w_xx / 2 = 0  with  w(T, x) = exp(-rT) f(exp(rT) x).
The undiscounted value is v(t, z) = exp(rt) w(t, exp(-rt) z), so that
Delta = v_z = w_x  and  Gamma = v_zz = exp(-rt) w_xx.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.interpolate import RectBivariateSpline
from scipy.linalg import solve_banded
from scipy.stats import norm

from .enhancement import LocalVolSpec
from .grids import SampledPath, format_float, increments_field, p_variation

PAYOFF_KINDS = ("call", "put", "digital", "table", "constant")


class DomainError(ValueError):
    """Evaluation point outside the usable part of the PDE domain."""


class NumericFailure(ArithmeticError):
    pass


@dataclass(frozen=True)
class PayoffSpec:
    """Terminal payoff f(z) on the undiscounted price.

    ``digital`` is discontinuous and needs ``allow_discontinuous=True``; it is
    then smoothed by cell averaging. ``table`` interpolates linearly with flat
    ends and ``constant`` pays ``level``.
    """

    kind: str = "call"
    K: float = 100.0
    level: float = 1.0
    table_z: tuple | None = None
    table_f: tuple | None = None
    allow_discontinuous: bool = False

    def __post_init__(self):
        if self.kind not in PAYOFF_KINDS:
            raise ValueError(f"unknown payoff kind {self.kind!r}")
        if self.kind in ("call", "put", "digital") and not self.K > 0:
            raise ValueError("strike must be positive")
        if self.kind == "digital" and not self.allow_discontinuous:
            raise ValueError("digital payoffs are discontinuous; set allow_discontinuous")
        if self.kind == "table":
            if self.table_z is None or self.table_f is None:
                raise ValueError("table payoff needs table_z and table_f")
            tz, tf = np.asarray(self.table_z, float), np.asarray(self.table_f, float)
            if tz.shape != tf.shape or tz.size < 2 or np.any(np.diff(tz) <= 0):
                raise ValueError("table_z must be increasing and match table_f")
            if not np.all(np.isfinite(tf)):
                raise ValueError("table payoff must be finite")
            object.__setattr__(self, "table_z", tuple(tz))
            object.__setattr__(self, "table_f", tuple(tf))

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.kind == "call":
            return np.maximum(z - self.K, 0.0)
        if self.kind == "put":
            return np.maximum(self.K - z, 0.0)
        if self.kind == "digital":
            return (z >= self.K).astype(float)
        if self.kind == "constant":
            return np.full(z.shape, float(self.level))
        return np.interp(z, np.asarray(self.table_z), np.asarray(self.table_f))

    @property
    def kink(self) -> float | None:
        return self.K if self.kind in ("call", "put", "digital") else None

    @property
    def convex(self) -> bool:
        return self.kind in ("call", "put", "constant")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind in ("call", "put", "digital"):
            d["K"] = self.K
        if self.kind == "constant":
            d["level"] = self.level
        if self.kind == "table":
            d.update(table_z=list(self.table_z), table_f=list(self.table_f))
        return d


@dataclass(frozen=True)
class SchemeParams:
    n_space: int = 400
    n_time: int = 400
    n_std: float = 6.0
    rannacher_steps: int = 2
    theta: float = 0.5
    center: float | None = None
    boundary_buffer: float = 0.05

    def __post_init__(self):
        if self.n_space < 4 or self.n_time < 1:
            raise ValueError("grid too small")
        if self.n_std <= 0:
            raise ValueError("n_std must be positive")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.rannacher_steps < 0 or self.rannacher_steps > 2 * self.n_time:
            raise ValueError("bad number of Rannacher steps")
        if not 0 <= self.boundary_buffer < 0.5:
            raise ValueError("boundary buffer must lie in [0, 0.5)")


# ------------------------------------------------------------ closed form

def bs_price(z, K, r, sigma, tau, kind="call"):
    z, tau = np.asarray(z, float), np.asarray(tau, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = sigma * np.sqrt(tau)
        d1 = (np.log(z / K) + (r + 0.5 * sigma**2) * tau) / sq
        d2 = d1 - sq
        disc = K * np.exp(-r * tau)
        if kind == "call":
            val = z * norm.cdf(d1) - disc * norm.cdf(d2)
            lim = np.maximum(z - disc, 0.0)
        elif kind == "put":
            val = disc * norm.cdf(-d2) - z * norm.cdf(-d1)
            lim = np.maximum(disc - z, 0.0)
        else:
            raise ValueError(kind)
    return np.where(tau > 0, val, lim)


def bs_delta(z, K, r, sigma, tau, kind="call"):
    z, tau = np.asarray(z, float), np.asarray(tau, float)
    d1 = (np.log(z / K) + (r + 0.5 * sigma**2) * tau) / (sigma * np.sqrt(tau))
    return norm.cdf(d1) if kind == "call" else norm.cdf(d1) - 1.0


def bs_gamma(z, K, r, sigma, tau):
    z, tau = np.asarray(z, float), np.asarray(tau, float)
    sq = sigma * np.sqrt(tau)
    d1 = (np.log(z / K) + (r + 0.5 * sigma**2) * tau) / sq
    return norm.pdf(d1) / (z * sq)


class _ValueSurface:
    """Shared accessors built on the discounted value and its x-derivatives."""

    r: float
    T: float

    def v(self, t, z):
        t, z = np.asarray(t, float), np.asarray(z, float)
        return np.exp(self.r * t) * self.w(t, np.exp(-self.r * t) * z)

    def delta(self, t, z):
        t, z = np.asarray(t, float), np.asarray(z, float)
        return self.w_x(t, np.exp(-self.r * t) * z)

    def gamma(self, t, z):
        t, z = np.asarray(t, float), np.asarray(z, float)
        return np.exp(-self.r * t) * self.w_xx(t, np.exp(-self.r * t) * z)


class ClosedFormBS(_ValueSurface):
    """Exact Black-Scholes call/put surface with the same accessors as a PDE solution."""

    def __init__(self, payoff: PayoffSpec, sigma: float, r: float, T: float):
        if payoff.kind not in ("call", "put"):
            raise ValueError("closed form covers calls and puts only")
        self.payoff, self.sigma, self.r, self.T = payoff, sigma, r, T
        self.vol = LocalVolSpec("black_scholes", sigma=sigma)

    def w(self, t, x):
        t, x = np.asarray(t, float), np.asarray(x, float)
        z = np.exp(self.r * t) * x
        return np.exp(-self.r * t) * bs_price(z, self.payoff.K, self.r, self.sigma, self.T - t,
                                              self.payoff.kind)

    def w_x(self, t, x):
        t, x = np.asarray(t, float), np.asarray(x, float)
        return bs_delta(np.exp(self.r * t) * x, self.payoff.K, self.r, self.sigma, self.T - t,
                        self.payoff.kind)

    def w_xx(self, t, x):
        t, x = np.asarray(t, float), np.asarray(x, float)
        return np.exp(self.r * t) * bs_gamma(np.exp(self.r * t) * x, self.payoff.K, self.r,
                                             self.sigma, self.T - t)

    def check_domain(self, t, x):
        return None


# ------------------------------------------------------------ solver

def _boundary_values(payoff: PayoffSpec, r: float, T: float, x_lo: float, x_hi: float,
                     terminal: np.ndarray) -> tuple[float, float]:
    """Dirichlet values of the discounted surface (time-independent here)."""
    disc_k = payoff.K * np.exp(-r * T) if payoff.kind in ("call", "put", "digital") else 0.0
    if payoff.kind == "call":
        return 0.0, x_hi - disc_k
    if payoff.kind == "put":
        return disc_k - x_lo, 0.0
    if payoff.kind == "digital":
        return 0.0, float(np.exp(-r * T))
    return float(terminal[0]), float(terminal[-1])


def _terminal(payoff: PayoffSpec, r: float, T: float, y: np.ndarray, dy: float) -> np.ndarray:
    x = np.exp(y)
    if payoff.kind == "digital":
        # cell average of the indicator in log space
        k = np.log(payoff.K * np.exp(-r * T))
        frac = np.clip((y + 0.5 * dy - k) / dy, 0.0, 1.0)
        return np.exp(-r * T) * frac
    out = np.exp(-r * T) * payoff(np.exp(r * T) * x)
    if not np.all(np.isfinite(out)):
        raise NumericFailure("payoff is not finite on the truncated domain")
    return out


@dataclass(frozen=True)
class PdeSolution(_ValueSurface):
    """Discounted value surface on a (time, log-price) grid.

    Interpolation is cubic in space and linear in time. Evaluations inside the
    outer ``boundary_buffer`` fraction of the log domain raise DomainError.
    """

    payoff: PayoffSpec
    vol: LocalVolSpec
    r: float
    T: float
    params: SchemeParams
    t_grid: np.ndarray
    y_grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        x = np.exp(self.y_grid)
        wy = np.gradient(self.values, self.y_grid, axis=1, edge_order=2)
        wyy = np.gradient(wy, self.y_grid, axis=1, edge_order=2)
        # central second differences are sharper than differentiating twice
        dy = self.y_grid[1] - self.y_grid[0]
        wyy[:, 1:-1] = (self.values[:, 2:] - 2 * self.values[:, 1:-1] + self.values[:, :-2]) / dy**2
        # differencing in x keeps Delta exact where w is linear in x
        wx = np.gradient(self.values, x, axis=1, edge_order=2)
        wxx = (wyy - wy) / x**2
        object.__setattr__(self, "_wx_nodes", wx)
        object.__setattr__(self, "_wxx_nodes", wxx)
        spl = {}
        for name, z in (("w", self.values), ("wx", wx), ("wxx", wxx)):
            spl[name] = RectBivariateSpline(self.t_grid, self.y_grid, z, kx=1, ky=3, s=0)
        object.__setattr__(self, "_splines", spl)

    @property
    def x_grid(self) -> np.ndarray:
        return np.exp(self.y_grid)

    def usable_range(self) -> tuple[float, float]:
        lo, hi = self.y_grid[0], self.y_grid[-1]
        pad = self.params.boundary_buffer * (hi - lo)
        return float(np.exp(lo + pad)), float(np.exp(hi - pad))

    def check_domain(self, t, x):
        t, x = np.asarray(t, float), np.asarray(x, float)
        lo, hi = self.usable_range()
        if np.any(x <= lo) or np.any(x >= hi):
            raise DomainError(f"x outside usable PDE range ({lo:.6g}, {hi:.6g})")
        if np.any(t < -1e-12) or np.any(t > self.T + 1e-12):
            raise DomainError("t outside [0, T]")

    def _eval(self, name, t, x):
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        self.check_domain(t, x)
        out = self._splines[name].ev(np.clip(t, 0.0, self.T), np.log(x))
        return out if out.ndim else float(out)

    def w(self, t, x):
        return self._eval("w", t, x)

    def w_x(self, t, x):
        return self._eval("wx", t, x)

    def w_xx(self, t, x):
        return self._eval("wxx", t, x)

    def terminal_error(self) -> float:
        dy = self.y_grid[1] - self.y_grid[0]
        h = _terminal(self.payoff, self.r, self.T, self.y_grid, dy)
        return float(np.max(np.abs(self.values[-1, 1:-1] - h[1:-1])))

    def residual(self) -> float:
        """Max interior residual of the theta-scheme over the non-startup steps."""
        y = self.y_grid
        dy = y[1] - y[0]
        b = _log_variance(self.vol, y)[1:-1]
        w = self.values[::-1]  # ordered in time to maturity
        taus = self.T - self.t_grid[::-1]
        theta = self.params.theta
        worst = 0.0
        start = 1 if self.params.rannacher_steps else 0
        for n in range(start, len(taus) - 1):
            dt = taus[n + 1] - taus[n]

            def L(u):
                return 0.5 * b * ((u[2:] - 2 * u[1:-1] + u[:-2]) / dy**2 - (u[2:] - u[:-2]) / (2 * dy))

            res = (w[n + 1, 1:-1] - w[n, 1:-1]) / dt - theta * L(w[n + 1]) - (1 - theta) * L(w[n])
            worst = max(worst, float(np.max(np.abs(res))))
        return worst

    def surface_rows(self):
        for i, t in enumerate(self.t_grid):
            for j, x in enumerate(self.x_grid):
                yield t, x, self.values[i, j]

    def to_dict(self) -> dict:
        return {
            "payoff": self.payoff.to_dict(),
            "vol": self.vol.to_dict(),
            "r": self.r,
            "T": self.T,
            "scheme": asdict(self.params),
            "x_range": [float(self.x_grid[0]), float(self.x_grid[-1])],
        }


def write_surface_csv(sol: PdeSolution, dest) -> None:
    lines = ["t,x,w"]
    for t, x, w in sol.surface_rows():
        lines.append(f"{format_float(t)},{format_float(x)},{format_float(w)}")
    Path(dest).write_text("\n".join(lines) + "\n")


def _log_variance(vol: LocalVolSpec, y: np.ndarray) -> np.ndarray:
    x = np.exp(y)
    return vol.a(x) / x**2


def _theta_step(w: np.ndarray, b: np.ndarray, dy: float, dt: float, theta: float,
                bc: tuple[float, float]) -> np.ndarray:
    n = w.size
    lo = 0.5 * b * (1.0 / dy**2 + 0.5 / dy)   # coefficient of u[i-1]
    di = 0.5 * b * (-2.0 / dy**2)
    up = 0.5 * b * (1.0 / dy**2 - 0.5 / dy)   # coefficient of u[i+1]
    lw = lo * w[:-2] + di * w[1:-1] + up * w[2:]
    rhs = w[1:-1] + (1 - theta) * dt * lw
    rhs[0] += theta * dt * lo[0] * bc[0]
    rhs[-1] += theta * dt * up[-1] * bc[1]
    m = n - 2
    ab = np.zeros((3, m))
    ab[0, 1:] = -theta * dt * up[:-1]
    ab[1, :] = 1.0 - theta * dt * di
    ab[2, :-1] = -theta * dt * lo[1:]
    try:
        inner = solve_banded((1, 1), ab, rhs)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericFailure(f"tridiagonal solve failed: {exc}") from exc
    out = np.empty_like(w)
    out[0], out[-1] = bc
    out[1:-1] = inner
    return out


def solve(payoff: PayoffSpec, vol: LocalVolSpec, r: float, T: float,
          params: SchemeParams | None = None) -> PdeSolution:
    """Crank-Nicolson in log-price with a Rannacher start (implicit half steps).

    The log domain is centred on the discounted strike (or ``params.center``)
    and spans +/- n_std * sigma_ref * sqrt(T), sigma_ref being the local
    log-volatility at the centre.
    """
    params = params or SchemeParams()
    if T <= 0:
        raise ValueError("T must be positive")
    if r < 0:
        raise ValueError("r must be nonnegative")
    if params.center is not None:
        center = float(params.center)
    elif payoff.kink is not None:
        center = payoff.kink * np.exp(-r * T)
    else:
        raise ValueError("payoffs without a strike need scheme center")
    y_c = np.log(center)
    sig_ref = float(vol.log_vol(center))
    half = params.n_std * sig_ref * np.sqrt(T)
    n_half = params.n_space // 2
    dy = half / n_half
    y = y_c + dy * np.arange(-n_half, params.n_space - n_half + 1)
    b = _log_variance(vol, y)[1:-1]

    w = _terminal(payoff, r, T, y, dy)
    bc = _boundary_values(payoff, r, T, float(np.exp(y[0])), float(np.exp(y[-1])), w)
    w = w.copy()
    w[0], w[-1] = bc
    dt = T / params.n_time
    out = [w]
    half_steps = params.rannacher_steps
    for n in range(params.n_time):
        if half_steps > 0:
            # replace a full step by implicit half steps until the budget is spent
            sub = min(half_steps, 2)
            for _ in range(sub):
                w = _theta_step(w, b, dy, dt / sub, 1.0, bc)
            half_steps -= sub
        else:
            w = _theta_step(w, b, dy, dt, params.theta, bc)
        if not np.all(np.isfinite(w)):
            raise NumericFailure("non-finite values in PDE solution")
        out.append(w)
    values = np.array(out[::-1])
    t_grid = np.linspace(0.0, T, params.n_time + 1)
    return PdeSolution(payoff, vol, r, T, params, t_grid, y, values)


def greeks(sol, t: float, z: float) -> dict:
    """Delta and Gamma of the undiscounted value at (t, z)."""
    if t >= sol.T:
        raise DomainError("Greeks need t < T")
    return {"delta": float(sol.delta(t, z)), "gamma": float(sol.gamma(t, z))}


def exponent_window(p: float, alpha: float) -> tuple[float, float]:
    """Open interval for 1/q: (1 - 2/p, alpha/p); raises when empty."""
    lo, hi = 1.0 - 2.0 / p, alpha / p
    if lo >= hi:
        raise ValueError(f"exponent window empty: 1 - 2/p = {lo:.6g} >= alpha/p = {hi:.6g}")
    return lo, hi


def q_moderation_report(sol, path: SampledPath, p: float, q: float, alpha: float | None = None,
                        max_points: int | None = 2049) -> dict:
    """Numerical q-moderation diagnostics of (w, X) along a discounted path."""
    alpha = sol.vol.alpha if alpha is None else alpha
    lo, hi = exponent_window(p, alpha)
    t = path.times
    x = path.scalar
    pstar = p * q / (p + q)
    sol.check_domain(t, x)

    hess = np.asarray(sol.w_xx(t, x), float)
    mode = "exact" if max_points is None or len(t) <= max_points else "dyadic_lower_bound"
    qvar = p_variation(increments_field(SampledPath(path.grid, hess)), q, mode=mode,
                       max_points=max_points)

    xs = np.unique(x)
    tt, xx = np.meshgrid(t, xs, indexing="ij")
    grad = np.asarray(sol.w_x(tt, xx), float)
    time_ctrl = float(np.max(np.ptp(grad, axis=0)) ** pstar)

    nodes = np.exp(sol.y_grid) if hasattr(sol, "y_grid") else np.linspace(x.min(), x.max(), 65)
    hull = np.concatenate([[x.min()], nodes[(nodes > x.min()) & (nodes < x.max())], [x.max()]])
    holder = 0.0
    for tk in t:
        g = np.asarray(sol.w_xx(np.full(hull.shape, tk), hull), float)
        dg = np.abs(g[:, None] - g[None, :])
        dx = np.abs(hull[:, None] - hull[None, :])
        mask = dx > 0
        if mask.any():
            holder = max(holder, float(np.max(dg[mask] / dx[mask] ** alpha)))
    return {
        "p": p,
        "q": q,
        "alpha": alpha,
        "pstar": pstar,
        "window": [lo, hi],
        "q_in_window": bool(lo < 1.0 / q < hi),
        "gamma_q_variation": qvar,
        "gamma_q_variation_mode": mode,
        "time_increment_control": time_ctrl,
        "hoelder_constant": holder,
        "all_finite": bool(np.isfinite(qvar) and np.isfinite(time_ctrl) and np.isfinite(holder)),
    }
