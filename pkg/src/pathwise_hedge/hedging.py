"""Discrete and pathwise hedging: ledgers, financing-cost bounds, trading P&L.

Everything here is one-dimensional. Paths passed in are undiscounted prices
S on a fine sampling grid; the discounted trace is X = exp(-rt) S. A
rebalancing grid must be a subset of the path grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy.special import zeta

from .enhancement import EnhancedPath, LocalVolSpec, diffusion_enhance, discount
from .grids import GridError, SampledPath, TimeGrid, TwoParamField, _pair_powers, format_float
from .integration import sewing_constant
from .pde import DomainError, exponent_window

FLOAT_SLACK = 1e-9


class BoundViolation(ArithmeticError):
    """An upper bound on the financing cost was exceeded."""


# ---------------------------------------------------------------- ledgers

@dataclass
class HedgeLedger:
    """Per-node record of a (possibly non self-financing) hedge.

    ``cash`` counts units of the bank account S0_t = exp(rt); ``value`` is the
    post-trade portfolio value and ``value_before`` the value of the previous
    positions at the node's prices. ``rebalance`` is their difference and
    ``financing`` the cumulative financing cost C (C_0 = V_0).
    """

    grid: TimeGrid
    prices: np.ndarray
    cash: np.ndarray
    stock: np.ndarray
    value: np.ndarray
    value_before: np.ndarray
    rebalance: np.ndarray
    financing: np.ndarray
    r: float
    payoff: float
    terminal_shortfall: float
    cutoff: float
    swap: np.ndarray | None = None
    swap_value: np.ndarray | None = None
    extra: dict = dc_field(default_factory=dict)
    aux: dict = dc_field(default_factory=dict)

    @property
    def bank(self) -> np.ndarray:
        return np.exp(self.r * self.grid.times)

    def position_value_error(self) -> float:
        """Largest |V - positions . prices| over nodes."""
        v = self.cash * self.bank + self.stock * self.prices
        if self.swap is not None:
            v = v + self.swap * self.swap_value
        return float(np.max(np.abs(v - self.value)))

    def summary(self) -> dict:
        out = {
            "n_nodes": len(self.grid),
            "cutoff": self.cutoff,
            "V0": float(self.value[0]),
            "financing_cost_T": float(self.financing[-1]),
            "payoff": self.payoff,
            "terminal_shortfall": self.terminal_shortfall,
            "sum_abs_rebalance": float(np.sum(np.abs(self.rebalance[1:]))),
        }
        out.update(self.extra)
        return out

    def write_csv(self, dest) -> None:
        cols = ["node", "t", "S", "cash", "stock"]
        if self.swap is not None:
            cols += ["swap", "swap_value"]
        cols += ["V", "V_before", "rebal", "C"]
        lines = [",".join(cols)]
        for k, t in enumerate(self.grid.times):
            row = [str(k), format_float(t), format_float(self.prices[k]), format_float(self.cash[k]),
                   format_float(self.stock[k])]
            if self.swap is not None:
                row += [format_float(self.swap[k]), format_float(self.swap_value[k])]
            row += [format_float(x) for x in (self.value[k], self.value_before[k],
                                              self.rebalance[k], self.financing[k])]
            lines.append(",".join(row))
        Path(dest).write_text("\n".join(lines) + "\n")

    def write_json(self, dest, **more) -> None:
        Path(dest).write_text(json.dumps({**self.summary(), **more}, indent=2, sort_keys=True) + "\n")


@dataclass(frozen=True, eq=False)
class SwapQuote:
    """Quoted prices p(s, t) of swaps paying half of (S[s,t]**2 - [S][s,t])."""

    field: TwoParamField

    def __post_init__(self):
        if self.field.value_shape not in ((), (1, 1)):
            raise ValueError("only scalar swap quotes are supported")
        n = len(self.field.grid)
        d = np.arange(n)
        if np.any(np.abs(self.field(d, d)) != 0):
            raise ValueError("swap quotes must vanish on the diagonal")

    @property
    def grid(self) -> TimeGrid:
        return self.field.grid

    def __call__(self, i, j) -> np.ndarray:
        return np.asarray(self.field(i, j), float).reshape(np.broadcast(i, j).shape)

    @classmethod
    def zero(cls, grid: TimeGrid) -> "SwapQuote":
        return cls(TwoParamField(grid, func=lambda i, j: np.zeros(np.broadcast(i, j).shape), check=False))

    @classmethod
    def linear(cls, grid: TimeGrid, kappa: float) -> "SwapQuote":
        t = grid.times
        return cls(TwoParamField(grid, func=lambda i, j: kappa * (t[j] - t[i]), check=False))


def _rebalance_indices(path_grid: TimeGrid, rebalance_grid: TimeGrid) -> np.ndarray:
    if rebalance_grid.T != path_grid.T:
        raise GridError("rebalance grid must end at the path horizon")
    try:
        return np.atleast_1d(path_grid.index_of(rebalance_grid.times))
    except GridError:
        raise GridError("rebalance grid is not nested in the path grid") from None


def default_cutoff(rebalance_grid: TimeGrid, expiry_buffer: int = 2) -> float:
    """Last rebalancing time at or before T - expiry_buffer * mesh."""
    t = rebalance_grid.times
    limit = rebalance_grid.T - expiry_buffer * rebalance_grid.mesh
    ok = t[t <= limit + 1e-12 * rebalance_grid.T]
    if ok.size == 0:
        raise GridError("rebalance grid too coarse for the expiry buffer")
    return float(ok[-1])


def discrete_delta_hedge(sol, path: SampledPath, rebalance_grid: TimeGrid, r: float, *,
                         expiry_buffer: int = 2, cutoff: float | None = None) -> HedgeLedger:
    """Delta hedge rebalanced on ``rebalance_grid``, financed by cash injections.

    At each trading node u <= cutoff the position is reset to stock H_u =
    w_x(u, X_u) and cash H0_u = w(u, X_u) - H_u X_u (in bank units), so the
    post-trade value is exp(ru) w(u, X_u). Later nodes keep the positions
    frozen; at T the portfolio is settled into the payoff f(S_T).

    ``terminal_shortfall`` is the self-financing replication error: start
    with V_0, hold H_u stock between trades, keep the rest in the bank, and
    subtract f(S_T) at T.
    """
    if path.dim != 1:
        raise ValueError("hedging is one-dimensional")
    ridx = _rebalance_indices(path.grid, rebalance_grid)
    cut = default_cutoff(rebalance_grid, expiry_buffer) if cutoff is None else float(cutoff)
    t = rebalance_grid.times
    if not np.any(np.isclose(t, cut, rtol=0, atol=1e-12 * t[-1])) or cut >= t[-1]:
        raise GridError("cutoff must be a rebalancing time before T")
    S = path.scalar[ridx]
    X = np.exp(-r * t) * S
    bank = np.exp(r * t)
    n = len(t)
    trade = t <= cut + 1e-12 * t[-1]
    try:
        sol.check_domain(t[trade], X[trade])
    except DomainError as exc:
        raise DomainError(f"path leaves the PDE domain: {exc}") from None

    cash = np.empty(n)
    stock = np.empty(n)
    w_tr = np.asarray(sol.w(t[trade], X[trade]), float)
    h_tr = np.asarray(sol.w_x(t[trade], X[trade]), float)
    m = int(np.sum(trade))
    stock[:m], cash[:m] = h_tr, w_tr - h_tr * X[:m]
    stock[m:], cash[m:] = stock[m - 1], cash[m - 1]

    payoff = float(sol.payoff(S[-1]))
    value = cash * bank + stock * S
    value_before = value.copy()
    value_before[1:] = cash[:-1] * bank[1:] + stock[:-1] * S[1:]
    # settlement at T: everything into cash worth the payoff
    cash[-1], stock[-1] = payoff / bank[-1], 0.0
    value[-1] = payoff
    rebal = value - value_before
    rebal[0] = 0.0
    financing = value[0] + np.cumsum(rebal)

    gains = np.sum(stock[:-1] * np.diff(X))
    shortfall = float(bank[-1] * (value[0] + gains) - payoff)
    return HedgeLedger(rebalance_grid, S, cash, stock, value, value_before, rebal, financing, r,
                       payoff, shortfall, cut, extra={"n_trades": m})


def financing_identity_error(ledger: HedgeLedger, sol) -> float:
    """Relative mismatch between ledger C and V_0 + sum_{u'<=t} S0_{u'}(w[u,u'] - H_u X[u,u'])."""
    t = ledger.grid.times
    X = np.exp(-ledger.r * t) * ledger.prices
    n_tr = ledger.extra["n_trades"]
    w = np.empty(len(t))
    w[:n_tr] = np.asarray(sol.w(t[:n_tr], X[:n_tr]), float)
    w[-1] = ledger.payoff * np.exp(-ledger.r * t[-1])
    # nodes strictly between the cutoff and T trade nothing
    live = np.r_[np.arange(n_tr), len(t) - 1]
    terms = np.zeros(len(t))
    u, up = live[:-1], live[1:]
    terms[up] = np.exp(ledger.r * t[up]) * (w[up] - w[u] - ledger.stock[u] * (X[up] - X[u]))
    expected = ledger.value[0] + np.cumsum(terms)
    scale = max(1.0, float(np.max(np.abs(expected))))
    return float(np.max(np.abs(expected - ledger.financing)) / scale)


# ---------------------------------------------------------------- bounds

def _pvar_dp(c: np.ndarray) -> float:
    """Exact p-variation from a dense pair-power matrix."""
    n = c.shape[0]
    best = np.zeros(n)
    for j in range(1, n):
        best[j] = np.max(best[:j] + c[:j, j])
    return float(best[-1])


def _window_pvars(c: np.ndarray, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    return np.array([_pvar_dp(c[a:b + 1, a:b + 1]) for a, b in zip(starts, ends)])


def _field_from(values: np.ndarray, grid: TimeGrid) -> TwoParamField:
    return TwoParamField(grid, func=lambda i, j: values[j] - values[i], check=False)


def _second_order_scalar(x: np.ndarray, b: np.ndarray, grid: TimeGrid) -> TwoParamField:
    return TwoParamField(grid, func=lambda i, j: 0.5 * ((x[j] - x[i]) ** 2 - (b[j] - b[i])), check=False)


def _bound_core(sol, S: SampledPath, bracket: np.ndarray, rebalance_grid: TimeGrid, r: float,
                p: float, q: float, cut: float, ledger: HedgeLedger, misfit: np.ndarray | None) -> dict:
    """Shared computation of both financing-cost bounds.

    ``bracket`` is the cumulative discounted bracket used in the compensated
    summand; ``misfit`` is the cumulative (true - model) bracket, or None.
    """
    gamma = 2.0 / p + 1.0 / q
    if gamma <= 1:
        raise ValueError("need 2/p + 1/q > 1")
    if p / 2 < 1:
        raise ValueError("need p >= 2")
    pstar = p * q / (p + q)
    grid = S.grid
    T = grid.T
    c_end = grid.index_of(cut)
    ridx = _rebalance_indices(grid, rebalance_grid)
    live = ridx[ridx <= c_end]

    t = grid.times[: c_end + 1]
    x = np.exp(-r * t) * S.scalar[: c_end + 1]
    b = bracket[: c_end + 1]
    g = TimeGrid(t)
    H = np.asarray(sol.w_x(t, x), float)
    Hp = np.asarray(sol.w_xx(t, x), float)
    w = np.asarray(sol.w(t, x), float)

    def rem(i, j):
        return H[j] - H[i] - Hp[i] * (x[j] - x[i])

    c_x = _pair_powers(_field_from(x, g), p)
    c_hp = _pair_powers(_field_from(Hp, g), q)
    c_so = _pair_powers(_second_order_scalar(x, b, g), p / 2)
    c_r = _pair_powers(TwoParamField(g, func=rem, check=False), pstar)

    def composite(wr, wx, wh, wso):
        return wr ** (1 - 1 / (gamma * p)) * wx ** (1 / (gamma * p)) + wh ** (1 / (gamma * q)) * wso ** (2 / (gamma * p))

    totals = [_pvar_dp(c) for c in (c_r, c_x, c_hp, c_so)]
    omega_total = composite(*totals)
    # oscillation: maximal windows of length at most the rebalancing mesh
    mesh = float(np.max(np.diff(grid.times[live]))) if live.size > 1 else float(t[-1])
    ends = np.searchsorted(t, t + mesh * (1 + 1e-12), side="right") - 1
    starts = np.arange(len(t))
    keep = ends > starts
    starts, ends = starts[keep], ends[keep]
    osc = 0.0
    if starts.size:
        osc = float(np.max(composite(*(_window_pvars(c, starts, ends) for c in (c_r, c_x, c_hp, c_so)))))

    k_formula = sewing_constant(gamma) * (totals[0] ** (1 / pstar) * totals[1] ** (1 / p)
                                        + totals[2] ** (1 / q) * totals[3] ** (2 / p))
    k_discrete = 2.0**gamma * float(zeta(gamma))
    K = max(k_formula, k_discrete)
    growth = np.exp(r * T)
    mesh_term = growth * K * omega_total * osc ** (gamma - 1)

    # compensated summand on trading intervals, Xi = H dX + H' second order
    u, up = live[:-1], live[1:]
    so = 0.5 * ((x[up] - x[u]) ** 2 - (b[up] - b[u]))
    comp_term = abs(float(np.sum(np.exp(r * t[up]) * Hp[u] * so)))

    # fine-grid residual of the accrual, w - Xi (- misfit Young term)
    k = np.arange(c_end)
    fine = w[k + 1] - w[k] - H[k] * (x[k + 1] - x[k]) - Hp[k] * 0.5 * ((x[k + 1] - x[k]) ** 2 - (b[k + 1] - b[k]))
    if misfit is not None:
        m = misfit[: c_end + 1]
        fine = fine - 0.5 * Hp[k] * (m[k + 1] - m[k])
    csum = np.r_[0.0, np.cumsum(fine)]
    residual_term = growth * float(np.sum(np.abs(csum[up] - csum[u])))

    xT = np.exp(-r * T) * S.scalar[-1]
    wT = np.exp(-r * T) * float(sol.payoff(S.scalar[-1]))
    jump_term = growth * abs(wT - w[-1] - H[-1] * (xT - x[-1]))

    V0 = float(ledger.value[0])
    terms = {
        "abs_V0": float(abs(V0)),
        "mesh_term": float(mesh_term),
        "compensation_term": comp_term,
        "terminal_jump": float(jump_term),
        "fine_residual": float(residual_term),
    }
    info = {
        "gamma": gamma,
        "pstar": pstar,
        "omega_total": omega_total,
        "osc": osc,
        "K_formula": k_formula,
        "K_discrete_sewing": k_discrete,
        "K_used": K,
        "cutoff": cut,
    }
    return {"terms": terms, "info": info, "H_prime": Hp, "grid": g}


def check_exponents(p: float, q: float, alpha: float) -> None:
    """Require 1/q inside the open window (1 - 2/p, alpha/p)."""
    lo, hi = exponent_window(p, alpha)
    if not lo < 1.0 / q < hi:
        raise ValueError(f"1/q = {1 / q:.6g} outside the exponent window ({lo:.6g}, {hi:.6g})")


def default_q(p: float, alpha: float = 1.0) -> float:
    """q with 1/q at the middle of the exponent window."""
    lo, hi = exponent_window(p, alpha)
    return 2.0 / (lo + hi)


def _finish(terms: dict, observed: float, check: bool, label: str) -> dict:
    bound = float(sum(terms.values()))
    slack = FLOAT_SLACK * max(1.0, bound)
    holds = observed <= bound + slack
    if check and not holds:
        raise BoundViolation(f"{label}: observed {observed!r} > bound {bound!r}")
    return {"bound": bound, "observed": observed, "holds": bool(holds), "terms": terms}


def financing_bound(sol, path: SampledPath, rebalance_grid: TimeGrid, r: float, p: float = 2.5,
                    q: float | None = None, *, expiry_buffer: int = 2, cutoff: float | None = None,
                    check: bool = True) -> dict:
    """Observed |C_T| of the discrete delta hedge and its pathwise upper bound.

    The bound is |V_0| + compensation sum + exp(rT) * (mesh term + terminal
    jump + fine residual). The mesh term is K * omega(0, cut) * osc(omega,
    |pi|)**(2/p + 1/q - 1) with the composite control of the compensated
    summand computed from exact variations on the path grid.
    """
    alpha = sol.vol.alpha
    q = default_q(p, alpha) if q is None else q
    check_exponents(p, q, alpha)
    ledger = discrete_delta_hedge(sol, path, rebalance_grid, r, expiry_buffer=expiry_buffer, cutoff=cutoff)
    X = discount(path, r)
    ep = diffusion_enhance(X, sol.vol, 0.0, "discounted")
    core = _bound_core(sol, path, ep.scalar_bracket(), rebalance_grid, r, p, q, ledger.cutoff, ledger, None)
    out = _finish(core["terms"], abs(float(ledger.financing[-1])), check, "financing bound")
    out.update(core["info"])
    out["q"] = q
    return out


def young_misfit_constant(Hp: np.ndarray, grid: TimeGrid, p: float, q: float) -> float:
    """Constant multiplying the p/2-variation norm of the bracket misfit."""
    e = 2.0 ** (-(1 - 2 / p) ** 2)
    theta = 4 / p + 1 / q
    if theta <= 1:
        raise ValueError("need 4/p + 1/q > 1 for the Young estimate")
    qnorm = _pvar_dp(_pair_powers(_field_from(Hp, grid), q)) ** (1 / q)
    return e / (1 - 2 ** (1 - theta)) * qnorm + e * float(np.max(np.abs(Hp)))


def robust_financing_bound(sol, true_enhanced: EnhancedPath, model_vol: LocalVolSpec | None,
                           rebalance_grid: TimeGrid, r: float, p: float = 2.5, q: float | None = None, *,
                           expiry_buffer: int = 2, cutoff: float | None = None,
                           check: bool = True) -> dict:
    """Financing-cost bound when the path's bracket differs from the model's.

    ``true_enhanced`` must be in discounted coordinates. The compensated
    summand and its controls use the true second order; the extra term is
    exp(rT) * K_H' * ||[true] - [model]||_{p/2-var}.
    """
    if true_enhanced.coordinates != "discounted":
        raise ValueError("true enhancement must be given in discounted coordinates")
    model_vol = sol.vol if model_vol is None else model_vol
    q = default_q(p, model_vol.alpha) if q is None else q
    check_exponents(p, q, model_vol.alpha)
    X = true_enhanced.trace
    S = SampledPath(X.grid, np.exp(r * X.times) * X.scalar)
    ledger = discrete_delta_hedge(sol, S, rebalance_grid, r, expiry_buffer=expiry_buffer, cutoff=cutoff)
    model = diffusion_enhance(X, model_vol, 0.0, "discounted")
    misfit = true_enhanced.scalar_bracket() - model.scalar_bracket()
    core = _bound_core(sol, S, true_enhanced.scalar_bracket(), rebalance_grid, r, p, q, ledger.cutoff,
                       ledger, misfit)
    g = core["grid"]
    m = misfit[: len(g)]
    misfit_norm = _pvar_dp(_pair_powers(_field_from(m, g), p / 2)) ** (2 / p)
    k_hp = young_misfit_constant(core["H_prime"], g, p, q)
    terms = dict(core["terms"])
    terms["misspecification"] = float(np.exp(r * X.grid.T) * k_hp * misfit_norm)
    out = _finish(terms, abs(float(ledger.financing[-1])), check, "robust financing bound")
    out.update(core["info"])
    out.update({"q": q, "K_Hprime": k_hp, "bracket_misfit_norm": misfit_norm})
    return out


# ---------------------------------------------------------------- pathwise value

def pathwise_value_path(sol, ep: EnhancedPath, r: float, financing: str = "portfolio",
                        V0: float | None = None) -> SampledPath:
    """Forward solution of V = V_0 + (Delta, Gamma).(S, second order) + financing.

    ``ep`` is an undiscounted enhanced path. The financing integrand is
    r (V_u - Delta_u S_u) with ``financing="portfolio"`` (implicit trapezoid)
    or r (v(u, S_u) - Delta_u S_u) with ``financing="model"``. Greeks are
    taken at the left node of each step; nodes at T use the payoff for v and
    keep the last Delta.
    """
    if ep.coordinates != "undiscounted":
        raise ValueError("value path needs an undiscounted enhancement")
    if financing not in ("portfolio", "model"):
        raise ValueError("financing must be portfolio or model")
    t = ep.grid.times
    S = ep.trace.scalar
    b = ep.scalar_bracket()
    live = t < sol.T
    sol.check_domain(t[live], np.exp(-r * t[live]) * S[live])
    delta = np.empty(len(t))
    gam = np.zeros(len(t))
    v = np.empty(len(t))
    delta[live] = sol.delta(t[live], S[live])
    gam[live] = sol.gamma(t[live], S[live])
    v[live] = sol.v(t[live], S[live])
    if not live.all():
        last = np.flatnonzero(live)[-1]
        delta[~live] = delta[last]
        v[~live] = sol.payoff(S[~live])
    if not (np.all(np.isfinite(delta)) and np.all(np.isfinite(gam))):
        raise ArithmeticError("non-finite Greeks along the path")

    dS = np.diff(S)
    so = 0.5 * (dS**2 - np.diff(b))
    h = np.diff(t)
    V = np.empty(len(t))
    V[0] = float(v[0]) if V0 is None else float(V0)
    for k in range(len(t) - 1):
        step = delta[k] * dS[k] + gam[k] * so[k]
        if financing == "model":
            fin = 0.5 * r * h[k] * ((v[k] - delta[k] * S[k]) + (v[k + 1] - delta[k + 1] * S[k + 1]))
            V[k + 1] = V[k] + step + fin
        else:
            half = 0.5 * r * h[k]
            V[k + 1] = (V[k] + step + half * (V[k] - delta[k] * S[k] - delta[k + 1] * S[k + 1])) / (1 - half)
    if not np.all(np.isfinite(V)):
        raise ArithmeticError("value path iteration diverged")
    return SampledPath(ep.grid, V)


def accrual_errors(sol, ep: EnhancedPath, horizon: float | None = None) -> np.ndarray:
    """|(w_x, w_xx).(X, second order)[0,t] - w[0,t]| on the grid up to ``horizon``.

    ``ep`` is a discounted enhanced path.
    """
    if ep.coordinates != "discounted":
        raise ValueError("accrual check works on the discounted trace")
    k_end = len(ep.grid) - 1 if horizon is None else ep.grid.index_of(horizon)
    t = ep.grid.times[: k_end + 1]
    x = ep.trace.scalar[: k_end + 1]
    b = ep.scalar_bracket()[: k_end + 1]
    if t[-1] >= sol.T:
        raise DomainError("accrual check needs a horizon before T")
    H = np.asarray(sol.w_x(t, x), float)
    Hp = np.asarray(sol.w_xx(t, x), float)
    w = np.asarray(sol.w(t, x), float)
    dx = np.diff(x)
    xi = H[:-1] * dx + Hp[:-1] * 0.5 * (dx**2 - np.diff(b))
    integral = np.r_[0.0, np.cumsum(xi)]
    return np.abs(integral - (w - w[0]))


# ---------------------------------------------------------------- FTDT

def ftdt_pnl(sol, true_enhanced: EnhancedPath, model_bracket: TwoParamField, r: float,
             horizon: float | None = None) -> dict:
    """Trading P&L of a model hedge, 1/2 * Young integral of Gamma against [model] - [true].

    Both brackets are undiscounted and live on the true trace's grid. When
    the true enhancement carries a local vol, the time-integral form
    1/2 * int exp(2rt) Gamma (a - a_true)(exp(-rt) S) dt is reported too.
    """
    if true_enhanced.coordinates != "undiscounted":
        raise ValueError("FTDT works with undiscounted brackets")
    g = true_enhanced.grid
    if model_bracket.grid != g:
        raise ValueError("trace mismatch: model bracket and true enhancement grids differ")
    k_end = len(g) - 1 if horizon is None else g.index_of(horizon)
    t = g.times[: k_end + 1]
    S = true_enhanced.trace.scalar[: k_end + 1]
    live = t < sol.T
    gam = np.zeros(len(t))
    gam[live] = sol.gamma(t[live], S[live])
    k = np.arange(k_end)
    model_inc = np.asarray(model_bracket(k, k + 1), float).reshape(-1)
    true_inc = np.diff(true_enhanced.scalar_bracket()[: k_end + 1])
    integrand = 0.5 * gam
    steps = integrand[:-1] * (model_inc - true_inc)
    pnl = float(np.sum(steps))
    grow = np.exp(r * (t[-1] - t[:-1]))
    out = {
        "pnl": pnl,
        # what a self-financing hedger banks by the horizon: each P&L slice earns interest
        "pnl_accrued": float(np.sum(grow * steps)),
        "integrand_path": SampledPath(TimeGrid(t), integrand),
        "cumulative": np.r_[0.0, np.cumsum(steps)],
        "horizon": float(t[-1]),
    }
    vol_true = true_enhanced.vol
    vol_model = getattr(sol, "vol", None)
    if vol_true is not None and vol_model is not None:
        x = np.exp(-r * t) * S
        dens = np.exp(2 * r * t) * gam * (vol_model.a(x) - vol_true.a(x))
        out["pnl_time_integral"] = float(0.5 * np.sum(0.5 * np.diff(t) * (dens[1:] + dens[:-1])))
    return out


# ---------------------------------------------------------------- enlarged hedging

def _accrued_integral(t: np.ndarray, Y: np.ndarray, r: float) -> np.ndarray:
    """I_t = int_0^t exp(r(t-u)) Y_u du for Y linear between nodes, exactly."""
    I = np.zeros(len(t))
    for k in range(len(t) - 1):
        h = t[k + 1] - t[k]
        x = r * h
        if abs(x) < 1e-5:
            A = h * (1 + x / 2 + x * x / 6)
            B = h * h * (0.5 + x / 6 + x * x / 24)
        else:
            A = np.expm1(x) / r
            B = (np.expm1(x) - x) / r**2
        I[k + 1] = np.exp(x) * I[k] + Y[k] * A + (Y[k + 1] - Y[k]) * B / h
    return I


def enlarged_hedge(sol, path: SampledPath, ep: EnhancedPath, quotes: SwapQuote | None, r: float,
                   cash_rule="zero_rebal", rebalance_grid: TimeGrid | None = None,
                   horizon: float | None = None, expiry_buffer: int = 2) -> HedgeLedger:
    """Hedge with cash, stock and swaps: positions (phi0, Delta, Gamma).

    Y_t is the Riemann sum of Gamma_u p(u, u') on the rebalancing grid. With
    ``cash_rule="zero_rebal"`` the cash account is C_t = v(t, S_t) -
    r int_0^t exp(r(t-u)) Y_u du; an array gives a custom C path on the
    rebalancing nodes. The ledger stops at ``horizon`` (default T minus
    ``expiry_buffer`` rebalancing steps). ``ep`` is the undiscounted
    enhancement of ``path`` that settles expiring swaps.
    """
    if ep.coordinates != "undiscounted":
        raise ValueError("swap legs settle against the undiscounted bracket")
    if ep.grid != path.grid or not np.array_equal(ep.trace.values, path.values):
        raise ValueError("enhancement does not match the path")
    rgrid = path.grid if rebalance_grid is None else rebalance_grid
    ridx = _rebalance_indices(path.grid, rgrid)
    quotes = SwapQuote.zero(rgrid) if quotes is None else quotes
    if quotes.grid != rgrid:
        raise GridError("quote/grid mismatch: quotes must live on the rebalancing grid")
    cut = default_cutoff(rgrid, expiry_buffer) if horizon is None else float(horizon)
    m = rgrid.index_of(cut) + 1
    t = rgrid.times[:m]
    S = path.scalar[ridx][:m]
    b = ep.scalar_bracket()[ridx][:m]
    sol.check_domain(t, np.exp(-r * t) * S)
    delta = np.asarray(sol.delta(t, S), float)
    gam = np.asarray(sol.gamma(t, S), float)
    v = np.asarray(sol.v(t, S), float)

    k = np.arange(m - 1)
    p_next = np.zeros(m)
    p_next[:-1] = quotes(k, k + 1)
    if m < len(rgrid):
        p_next[-1] = quotes(m - 1, m)
    Y = np.r_[0.0, np.cumsum(gam[:-1] * p_next[:-1])]
    acc = _accrued_integral(t, Y, r)
    if isinstance(cash_rule, str):
        if cash_rule != "zero_rebal":
            raise ValueError(f"unknown cash rule {cash_rule!r}")
        C = v - r * acc
    else:
        C = np.asarray(cash_rule, float)
        if C.shape != (m,):
            raise ValueError(f"custom C path needs {m} values")
    bank = np.exp(r * t)
    cash = (C - delta * S - Y) / bank
    value = cash * bank + delta * S + gam * p_next

    so = 0.5 * (np.diff(S) ** 2 - np.diff(b))
    before = np.empty(m)
    before[0] = value[0]
    before[1:] = cash[:-1] * bank[1:] + delta[:-1] * S[1:] + gam[:-1] * so
    rebal = value - before
    rebal[0] = 0.0
    financing = value[0] + np.cumsum(rebal)

    ledger_pnl = float(v[-1] - (cash[-1] * bank[-1] + delta[-1] * S[-1]))
    closed = float(Y[-1] + r * acc[-1])
    return HedgeLedger(rgrid.subgrid(np.arange(m)), S, cash, delta, value, before, rebal, financing, r,
                       float(v[-1]), float(-ledger_pnl), cut, swap=gam, swap_value=p_next,
                       aux={"Y": Y, "accrued_Y": acc},
                       extra={"Y_T": float(Y[-1]), "ledger_pnl": ledger_pnl, "closed_form_pnl": closed,
                              "sum_abs_rebalance": float(np.sum(np.abs(rebal[1:]))),
                              "abs_sum_rebalance": float(abs(np.sum(rebal[1:])))})


def closed_pnl_quadrature(t: np.ndarray, Y: np.ndarray, r: float, refine: int = 64) -> float:
    """Y_T + r int exp(r(T-t)) Y_t dt by trapezoid on a refined linear interpolant."""
    tt = np.linspace(t[0], t[-1], (len(t) - 1) * refine + 1)
    yy = np.interp(tt, t, Y)
    f = np.exp(r * (t[-1] - tt)) * yy
    return float(Y[-1] + r * np.trapezoid(f, tt))
