"""Volterra-type Gaussian processes, deceptive price dynamics and related statistics.

For the power kernel (s-t0)**(H-1/2) / (t-t0)**(H-1/2) both Volterra
integrals factor through the Gaussian martingale

    xi(t) = int_{t0}^t (s - t0)**(H - 1/2) dW_s,

as zeta(t) = (t-t0)**(1/2-H) xi(t) and psi(t) = (t-t0)**(-1/2-H) xi(t).
Per grid cell the pair (W increment, xi increment) is a bivariate normal
with known covariance, so paths are sampled exactly at the grid nodes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate, stats

from .grids import GridError, SampledPath, TimeGrid
from .simulate import make_rng

KERNEL_KINDS = ("K", "R", "R_inv")
CONVENTIONS = ("as_printed", "variance_matched")
MIN_KS_SAMPLE = 1000


@dataclass(frozen=True)
class KernelParams:
    t0: float
    H: float
    s: float
    t: float

    def __post_init__(self):
        if self.t0 < 0:
            raise ValueError("t0 must be nonnegative")
        if not self.H > 0:
            raise ValueError("H must be positive")
        if not self.t0 < self.s <= self.t:
            raise ValueError("need t0 < s <= t")


def kernel_eval(kind: str, params: KernelParams) -> float:
    """K = ((s-t0)/(t-t0))**(H-1/2), R = (t-t0)**(H+1/2) / (s-t0)**(H-1/2), R_inv = 1/R."""
    a = params.s - params.t0
    b = params.t - params.t0
    H = params.H
    if kind == "K":
        return (a / b) ** (H - 0.5)
    if kind == "R":
        return b ** (H + 0.5) / a ** (H - 0.5)
    if kind == "R_inv":
        return a ** (H - 0.5) / b ** (H + 0.5)
    raise ValueError(f"kernel kind must be one of {KERNEL_KINDS}")


def zeta_covariance(t0: float, H: float, s, t):
    """E zeta(s) zeta(t) for s, t >= t0."""
    lo = np.minimum(s, t) - t0
    hi = np.maximum(s, t) - t0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(lo > 0, lo ** (H + 0.5) * hi ** (0.5 - H), 0.0) / (2 * H)
    return out


def psi_covariance(t0: float, H: float, s, t):
    """E psi(s) psi(t) for s, t > t0."""
    lo = np.minimum(s, t) - t0
    hi = np.maximum(s, t) - t0
    return lo ** (H - 0.5) / hi ** (H + 0.5) / (2 * H)


# ------------------------------------------------------------ quadrature identities

def quadrature_identities(H: float, t0: float = 0.0, s: float = 0.6, t: float = 1.0, T: float = 1.0,
                          q: float = 1.5) -> dict:
    """Adaptive-quadrature checks of the kernel integral identities.

    Each entry is (quadrature value, closed form).
    """
    def K(u, v):
        return kernel_eval("K", KernelParams(t0, H, u, v))

    def Rinv(u, v):
        return kernel_eval("R_inv", KernelParams(t0, H, u, v))

    opts = dict(epsabs=0.0, epsrel=1e-10, limit=200)
    out = {}
    val = integrate.quad(lambda u: K(u, s) * K(u, t), t0, s, **opts)[0]
    out["K_product"] = (val, (s - t0) ** (H + 0.5) * (t - t0) ** (0.5 - H) / (2 * H))
    inner = lambda v: integrate.quad(lambda u: K(u, v) ** 2, t0, v, **opts)[0]
    val = integrate.quad(inner, t0, T, **opts)[0]
    out["K_simplex"] = (val, (T - t0) ** 2 / (4 * H))
    val = integrate.quad(lambda u: Rinv(u, s) * Rinv(u, t), t0, s, **opts)[0]
    out["R_inv_product"] = (val, Rinv(s, t) / (2 * H))
    if 1 <= q < 2 and q * H + 1 - q / 2 > 0:
        inner = lambda v: integrate.quad(lambda u: Rinv(u, v) ** q, t0, v, **opts)[0]
        val = integrate.quad(inner, t0, T, **opts)[0]
        out["R_inv_simplex_q"] = (val, (T - t0) ** (2 - q) / ((2 - q) * (q * H + 1 - q / 2)))
    return out


# ------------------------------------------------------------ simulation

def _cell_moments(t0: float, H: float, times: np.ndarray):
    """Per-cell variances of dW, dxi and their covariance for cells after t0."""
    a = times[:-1] - t0
    b = times[1:] - t0
    var_w = b - a
    var_xi = (b ** (2 * H) - a ** (2 * H)) / (2 * H)
    cov = (b ** (H + 0.5) - a ** (H + 0.5)) / (H + 0.5)
    return var_w, var_xi, cov


def _xi_increments(var_w, var_xi, cov, z):
    """Correlated (dW, dxi) from standard normals z of shape (..., 2, m)."""
    dw = np.sqrt(var_w) * z[..., 0, :]
    beta = cov / var_w
    resid = np.sqrt(np.clip(var_xi - beta * cov, 0.0, None))
    dxi = beta * dw + resid * z[..., 1, :]
    return dw, dxi


def _start_index(grid: TimeGrid, t0: float) -> int:
    if t0 < 0 or t0 >= grid.T:
        raise ValueError("t0 must lie in [0, T)")
    try:
        return grid.index_of(t0)
    except GridError:
        raise GridError("t0 must be a grid time") from None


def _assemble(t0: float, H: float, times: np.ndarray, dw: np.ndarray, dxi: np.ndarray):
    """zeta, psi, W - W_t0 on the nodes from t0 on (leading axis batch allowed)."""
    shape = dw.shape[:-1] + (dw.shape[-1] + 1,)
    W = np.zeros(shape)
    xi = np.zeros(shape)
    W[..., 1:] = np.cumsum(dw, axis=-1)
    xi[..., 1:] = np.cumsum(dxi, axis=-1)
    tau = times - t0
    zeta = np.zeros(shape)
    psi = np.zeros(shape)
    zeta[..., 1:] = tau[1:] ** (0.5 - H) * xi[..., 1:]
    psi[..., 1:] = tau[1:] ** (-0.5 - H) * xi[..., 1:]
    return zeta, psi, W


def simulate_zeta_psi(t0: float, H: float, grid: TimeGrid, seed: int, *stream: int) -> dict:
    """Joint exact sample of zeta, psi and W - W_t0 at the grid nodes.

    Nodes before t0 carry zeros; psi(t0) is set to 0.
    """
    if not H > 0:
        raise ValueError("H must be positive")
    k0 = _start_index(grid, t0)
    times = grid.times[k0:]
    if times.size < 2:
        raise GridError("degenerate grid after t0")
    z = make_rng(seed, *stream).standard_normal((2, times.size - 1))
    dw, dxi = _xi_increments(*_cell_moments(t0, H, times), z)
    zeta, psi, W = _assemble(t0, H, times, dw, dxi)
    pad = lambda v: np.concatenate([np.zeros(k0), v])
    return {
        "zeta": SampledPath(grid, pad(zeta)),
        "psi": SampledPath(grid, pad(psi)),
        "driving_W": SampledPath(grid, pad(W)),
    }


def simulate_zeta_batch(t0: float, H: float, grid: TimeGrid, seed: int, n_paths: int,
                        first: int = 0) -> dict:
    """Stacked samples; path i uses the sub-stream (seed, first + i) like simulate_zeta_psi."""
    out = {"zeta": [], "psi": [], "driving_W": []}
    for i in range(first, first + n_paths):
        res = simulate_zeta_psi(t0, H, grid, seed, i)
        for key in out:
            out[key].append(res[key].scalar)
    return {k: np.array(v) for k, v in out.items()}


def decomposition_residual(sample: dict, t0: float, H: float) -> np.ndarray:
    """zeta_t - [W_t - W_t0 + (1/2 - H) * trapezoid int_{t0}^t psi ds] on the grid."""
    z = sample["zeta"]
    grid = z.grid
    t = grid.times
    psi = sample["psi"].scalar
    cum = np.zeros(len(t))
    cum[1:] = np.cumsum(0.5 * np.diff(t) * (psi[1:] + psi[:-1]))
    return z.scalar - (sample["driving_W"].scalar + (0.5 - H) * cum)


def expected_realized_qv(t0: float, H: float, times: np.ndarray) -> float:
    """Exact mean of sum (zeta increment)**2 over the nodes ``times`` (all >= t0)."""
    tau = np.asarray(times, float) - t0
    var = tau / (2 * H)
    cov = zeta_covariance(0.0, H, tau[:-1], tau[1:])
    return float(np.sum(var[1:] + var[:-1] - 2 * cov))


# ------------------------------------------------------------ deceptive dynamics

@dataclass(frozen=True)
class DeceptiveSpec:
    x0: float = 100.0
    mu: float = 0.0
    sigma1: float = 0.2
    sigma2: float = 0.3
    t0: float = 0.0
    horizon: float = 1.0
    convention: str = "variance_matched"

    def __post_init__(self):
        if not self.x0 > 0:
            raise ValueError("x0 must be positive")
        if not (self.sigma1 > 0 and self.sigma2 > 0):
            raise ValueError("sigma1 and sigma2 must be positive")
        if self.convention not in CONVENTIONS:
            raise ValueError(f"convention must be one of {CONVENTIONS}")
        if not self.horizon > self.t0 >= 0:
            raise ValueError("need 0 <= t0 < horizon")

    @property
    def H(self) -> float:
        if self.convention == "as_printed":
            return self.sigma1**2 / (2 * self.sigma2**2)
        return self.sigma2**2 / (2 * self.sigma1**2)

    def drift_line(self, t) -> np.ndarray:
        """(mu - sigma1**2 / 2)(t - t0)."""
        return (self.mu - 0.5 * self.sigma1**2) * (np.asarray(t, float) - self.t0)

    def log_variance(self, t) -> np.ndarray:
        """Var log Y(t) under the chosen convention."""
        return self.sigma2**2 * (np.asarray(t, float) - self.t0) / (2 * self.H)


def deceptive_path(spec: DeceptiveSpec, grid: TimeGrid, seed: int, *stream: int) -> SampledPath:
    """Y_t = x0 exp(sigma2 zeta(t, t0, H) + (mu - sigma1**2/2)(t - t0)) on the grid."""
    if abs(grid.T - spec.horizon) > 1e-12 * spec.horizon:
        raise GridError("grid must end at the DeceptiveSpec horizon")
    z = simulate_zeta_psi(spec.t0, spec.H, grid, seed, *stream)["zeta"].scalar
    logs = spec.sigma2 * z + np.where(grid.times >= spec.t0, spec.drift_line(grid.times), 0.0)
    return SampledPath(grid, spec.x0 * np.exp(logs))


def gbm_same_noise(spec: DeceptiveSpec, grid: TimeGrid, seed: int, *stream: int, sigma: float | None = None) -> SampledPath:
    """GBM with vol ``sigma`` (default sigma1) driven by the same W as deceptive_path."""
    sigma = spec.sigma1 if sigma is None else sigma
    W = simulate_zeta_psi(spec.t0, spec.H, grid, seed, *stream)["driving_W"].scalar
    logs = sigma * W + np.where(grid.times >= spec.t0, (spec.mu - 0.5 * sigma**2) * (grid.times - spec.t0), 0.0)
    return SampledPath(grid, spec.x0 * np.exp(logs))


def deceptive_log_stats(spec: DeceptiveSpec, n_steps: int, seed: int, n_paths: int,
                        chunk: int = 64, n_probes: int = 0) -> dict:
    """log Y(T) and the realized bracket of log Y on a uniform grid, per path.

    Path i uses the sub-stream (seed, i). Besides the two statistics only
    log Y at ``n_probes`` equally spaced grid times is kept.
    """
    grid = TimeGrid(np.linspace(spec.t0, spec.horizon, n_steps + 1) - spec.t0)
    var_w, var_xi, cov = _cell_moments(0.0, spec.H, grid.times)
    # same arithmetic as _xi_increments, folded into two coefficient rows
    c0 = cov / var_w * np.sqrt(var_w)
    c1 = np.sqrt(np.clip(var_xi - cov / var_w * cov, 0.0, None))
    scale = spec.sigma2 * grid.times[1:] ** (0.5 - spec.H)
    drift = spec.drift_line(grid.times + spec.t0)
    logT = np.empty(n_paths)
    qv = np.empty(n_paths)
    probe_idx = np.unique(np.linspace(0, n_steps, n_probes + 1).round().astype(int))[1:] if n_probes else np.zeros(0, int)
    probes = np.empty((n_paths, probe_idx.size))
    for start in range(0, n_paths, chunk):
        idx = range(start, min(start + chunk, n_paths))
        z = np.stack([make_rng(seed, i).standard_normal((2, n_steps)) for i in idx])
        logs = np.empty((len(idx), n_steps + 1))
        logs[:, 0] = drift[0]
        np.cumsum(c0 * z[:, 0] + c1 * z[:, 1], axis=-1, out=logs[:, 1:])
        logs[:, 1:] *= scale
        logs += drift
        logT[start:start + len(idx)] = logs[:, -1]
        probes[start:start + len(idx)] = logs[:, probe_idx]
        d = np.diff(logs, axis=-1)
        qv[start:start + len(idx)] = np.einsum("ij,ij->i", d, d)
    return {"log_terminal": logT, "realized_bracket": qv, "grid": grid,
            "probe_times": grid.times[probe_idx] + spec.t0, "log_probes": probes}


def _concatenated_blocks(pi: TimeGrid, spec: DeceptiveSpec, z: np.ndarray, refine: int):
    """Per-cell restarted log-increment blocks, shape (..., cells, refine + 1)."""
    u = pi.times[:-1, None]
    frac = np.linspace(0.0, 1.0, refine + 1)[None, :]
    tt = u + frac * np.diff(pi.times)[:, None]
    H = spec.H
    tau = tt - u
    a, b = tau[:, :-1], tau[:, 1:]
    var_w = b - a
    var_xi = (b ** (2 * H) - a ** (2 * H)) / (2 * H)
    cov = (b ** (H + 0.5) - a ** (H + 0.5)) / (H + 0.5)
    _, dxi = _xi_increments(var_w, var_xi, cov, z)
    xi = np.zeros(z.shape[:-2] + (refine + 1,))
    xi[..., 1:] = np.cumsum(dxi, axis=-1)
    zeta = np.zeros_like(xi)
    zeta[..., 1:] = tau[:, 1:] ** (0.5 - H) * xi[..., 1:]
    return tt, spec.sigma2 * zeta + (spec.mu - 0.5 * spec.sigma1**2) * tau


def grid_concatenated_path(pi: TimeGrid, spec: DeceptiveSpec, seed: int, refine: int = 8,
                           stream: tuple = ()) -> SampledPath:
    """Y = x0 exp(sum over cells of restarted deceptive log-increments).

    Each cell [u, u'] of ``pi`` is refined into ``refine`` equal steps and
    carries an independent zeta restarted at u. All cells draw from the
    single sub-stream (seed, *stream), cell by cell.
    """
    if refine < 1:
        raise ValueError("refine must be positive")
    if abs(pi.T - spec.horizon) > 1e-12 * spec.horizon:
        raise GridError("coarse grid must end at the DeceptiveSpec horizon")
    cells = len(pi) - 1
    z = make_rng(seed, *stream).standard_normal((cells, 2, refine))
    tt, blocks = _concatenated_blocks(pi, spec, z, refine)
    level = np.r_[0.0, np.cumsum(blocks[:, -1])[:-1]]
    logs = np.r_[0.0, (level[:, None] + blocks[:, 1:]).ravel()]
    t = np.r_[0.0, tt[:, 1:].ravel()]
    t[np.arange(1, cells + 1) * refine] = pi.times[1:]
    return SampledPath(TimeGrid(t), spec.x0 * np.exp(logs))


def concatenated_cell_increments(pi: TimeGrid, spec: DeceptiveSpec, seed: int, n_paths: int,
                                 refine: int = 8) -> np.ndarray:
    """Log-increments over the cells of ``pi``, shape (n_paths, cells).

    Row i equals the cell increments of grid_concatenated_path(..., stream=(i,)).
    """
    cells = len(pi) - 1
    z = np.stack([make_rng(seed, i).standard_normal((cells, 2, refine)) for i in range(n_paths)])
    _, blocks = _concatenated_blocks(pi, spec, z, refine)
    return blocks[..., -1]


# ------------------------------------------------------------ tests

def ks_normal(sample: np.ndarray, mean: float, var: float) -> dict:
    """Kolmogorov-Smirnov test against N(mean, var) with the asymptotic distribution."""
    sample = np.asarray(sample, float)
    if sample.size < MIN_KS_SAMPLE:
        raise ValueError(f"KS test needs at least {MIN_KS_SAMPLE} draws")
    res = stats.kstest(sample, "norm", args=(mean, np.sqrt(var)), method="asymp")
    return {"statistic": float(res.statistic), "pvalue": float(res.pvalue), "n": int(sample.size)}


def indistinguishability_suite(configs: list[DeceptiveSpec], pi: TimeGrid, seed: int, n_paths: int,
                               alpha: float = 0.01, refine: int = 8) -> dict:
    """KS tests of every cell log-increment against the sigma1 GBM law."""
    rows = []
    for c, spec in enumerate(configs):
        inc = concatenated_cell_increments(pi, spec, seed + c, n_paths, refine)
        for k, (u, up) in enumerate(zip(pi.times[:-1], pi.times[1:])):
            mean = (spec.mu - 0.5 * spec.sigma1**2) * (up - u)
            res = ks_normal(inc[:, k], mean, spec.sigma1**2 * (up - u))
            rows.append({"config": c, "cell": k, **res, "pass": res["pvalue"] >= alpha})
        corr = [float(np.corrcoef(inc[:, k], inc[:, k + 1])[0, 1]) for k in range(inc.shape[1] - 1)]
        rows[-1]["neighbour_correlations"] = corr
    passed = sum(r["pass"] for r in rows)
    return {"tests": rows, "n_tests": len(rows), "n_pass": passed, "pass_rate": passed / len(rows)}


def jarque_bera(sample: np.ndarray) -> dict:
    res = stats.jarque_bera(np.asarray(sample, float))
    return {"statistic": float(res.statistic), "pvalue": float(res.pvalue)}


# ------------------------------------------------------------ limits that do not commute

def dyadic_limit_closed_form(k: float, n: int, eps: float) -> float:
    """P(|2**-(n+1) X_{2**-(n+1), 1}| > eps) for X a Brownian motion with drift k on [0, 1]."""
    if n < 1 or eps <= 0 or k < 0:
        raise ValueError("need k >= 0, n >= 1, eps > 0")
    sn = np.sqrt(1.0 - 2.0 ** (-(n + 1)))
    c = eps * 2.0 ** (n + 1) / sn
    return float(stats.norm.cdf(k * sn - c) + stats.norm.cdf(-c - k * sn))


def riemann_gap_closed_form(k: float, n: int, eps: float) -> float:
    """P(|fine - coarse| > eps) for the dyadic Riemann sums of s dX at levels n+1 and n.

    The gap is h * (sum of X over the odd cells of the level n+1 grid),
    h = 2**-(n+1), which is N(k h / 2, h**2 / 2).
    """
    if n < 1 or eps <= 0 or k < 0:
        raise ValueError("need k >= 0, n >= 1, eps > 0")
    c = eps * 2.0 ** (n + 1) * np.sqrt(2.0)
    m = k / np.sqrt(2.0)
    return float(stats.norm.cdf(m - c) + stats.norm.cdf(-c - m))


def dyadic_limit_demo(k: float, n: int, eps: float, n_draws: int = 100_000, seed: int = 0,
                      chunk: int = 20_000) -> dict:
    """Closed forms versus Monte Carlo for X_t = W_t + k t sampled on the level n+1 dyadic grid.

    ``mc_estimate`` is the exceedance frequency of 2**-(n+1) X_{2**-(n+1), 1}.
    ``riemann_mc`` is that of the actual gap between the Riemann sums of
    H_s = s at levels n+1 and n; it follows riemann_gap_closed_form.
    """
    closed = dyadic_limit_closed_form(k, n, eps)
    riemann_closed = riemann_gap_closed_form(k, n, eps)
    m = 2 ** (n + 1)
    t = np.linspace(0.0, 1.0, m + 1)
    h = 1.0 / m
    hits = 0
    gap_hits = 0
    for b, start in enumerate(range(0, n_draws, chunk)):
        size = min(chunk, n_draws - start)
        dX = make_rng(seed, b).standard_normal((size, m)) * np.sqrt(h) + k * h
        hits += int(np.sum(np.abs(h * dX[:, 1:].sum(axis=1)) > eps))
        fine = dX @ t[:-1]
        coarse = (dX[:, 0::2] + dX[:, 1::2]) @ t[:-1:2]
        gap_hits += int(np.sum(np.abs(fine - coarse) > eps))
    mc = hits / n_draws
    rmc = gap_hits / n_draws
    return {"k": k, "n": n, "eps": eps, "closed_form": closed, "mc_estimate": mc,
            "se": float(np.sqrt(closed * (1 - closed) / n_draws)),
            "riemann_closed_form": riemann_closed, "riemann_mc": rmc,
            "riemann_se": float(np.sqrt(riemann_closed * (1 - riemann_closed) / n_draws)),
            "n_draws": n_draws}
