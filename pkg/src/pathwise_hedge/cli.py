"""Command-line front end: config resolution, experiment runners and report files.

Every subcommand reads its parameters from built-in defaults, then an
optional flat ``key = value`` config file, then command-line flags. The
resolved config is hashed (sha256 of its canonical JSON) and the hash and
seed are embedded in every report. Outputs carry no timings or host data,
so reruns with the same config are byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import hedging as hd
from . import volterra as vt
from .enhancement import LocalVolSpec, diffusion_enhance, discount
from .grids import TimeGrid, format_float
from .integration import sew_bench
from .pde import ClosedFormBS, PayoffSpec, SchemeParams, bs_delta, bs_gamma, bs_price, solve
from .simulate import gbm_path, make_rng

OUT_ENV = "PATHWISE_HEDGE_OUT"
DEFAULT_OUT = "out"

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2

# sub-stream tags, so that different experiments never share random numbers
STREAM_HEDGE, STREAM_FTDT, STREAM_BOUNDS, STREAM_ENLARGED, STREAM_SEW, STREAM_KS = 1, 2, 3, 4, 5, 6


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ parameters

def _grid_pair(text: str) -> tuple[int, int]:
    try:
        a, b = str(text).lower().split("x")
        return int(a), int(b)
    except ValueError:
        raise ConfigError(f"grid must look like 400x400, got {text!r}") from None


def _pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


@dataclass(frozen=True)
class Param:
    name: str
    kind: Callable
    default: Any
    check: Callable | None = None
    rule: str = ""
    help: str = ""
    choices: tuple | None = None

    @property
    def key(self) -> str:
        return self.name.replace("-", "_")

    def parse(self, raw):
        if raw is None:
            return None
        try:
            val = self.kind(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{self.name}: {exc}") from None
        if self.choices is not None:
            val = str(val).replace("-", "_")
            if val not in self.choices:
                raise ConfigError(f"{self.name} must be one of {', '.join(self.choices)}")
        if isinstance(val, float) and not math.isfinite(val):
            raise ConfigError(f"{self.name} must be finite")
        if self.check is not None and not self.check(val):
            raise ConfigError(f"{self.name} = {raw!r} out of range ({self.rule})")
        return val


def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


COMMON = [
    Param("seed", int, 0, lambda s: 0 <= s < 2**64, "0 <= seed < 2**64", "global 64-bit seed"),
    Param("format", str, "csv", help="table output format", choices=("csv", "json")),
    Param("workers", int, 1, lambda w: 1 <= w <= 64, "1..64", "processes for Monte Carlo sweeps"),
]

MARKET = [
    Param("S0", float, 100.0, _pos, "> 0", "initial price"),
    Param("r", float, 0.05, lambda r: abs(r) < 1, "|r| < 1", "interest rate"),
    Param("T", float, 1.0, lambda T: 0 < T <= 30, "0 < T <= 30", "maturity"),
    Param("payoff", str, "call", choices=("call", "put")),
    Param("K", float, 100.0, _pos, "> 0", "strike"),
]

SIGMA = lambda name, default, help="": Param(name, float, default, lambda s: 0 < s < 5, "0 < sigma < 5", help)  # noqa: E731
GRID = Param("grid", _grid_pair, (400, 400), lambda g: g[0] >= 8 and g[1] >= 4, "space, time >= 8x4",
             "PDE grid, space x time")
STEPS = lambda default: Param("steps", int, default, lambda n: _pow2(n) and 8 <= n <= 2**16,  # noqa: E731
                              "power of two in [8, 65536]", "path sampling steps")
PATHS = lambda default: Param("paths", int, default, lambda n: 1 <= n <= 10**6, "1..1e6",  # noqa: E731
                              "number of simulated paths")
GREEKS = Param("greeks", str, "pde", help="Greeks from the PDE solver or the closed form",
               choices=("pde", "closed_form"))

PARAMS: dict[str, list[Param]] = {
    "pde": COMMON + MARKET + [
        SIGMA("sigma", 0.2, "model volatility"),
        Param("vol", str, "black_scholes", help="local variance family",
              choices=("black_scholes", "cev")),
        Param("beta", float, 1.0, lambda b: 0 < b <= 1.5, "0 < beta <= 1.5", "CEV exponent"),
        GRID,
        Param("slice-points", int, 101, lambda n: 2 <= n <= 10_001, "2..10001", "rows of the t = 0 slice"),
    ],
    "hedge": COMMON + MARKET + [
        SIGMA("sigma", 0.2, "model volatility"),
        SIGMA("sigma-true", 0.2, "volatility of the simulated path"),
        Param("mu", float, 0.05, lambda m: abs(m) < 1, "|mu| < 1", "path drift"),
        GRID, STEPS(1024), PATHS(1),
        Param("rebalance", int, 256, _pow2, "power of two", "rebalancing intervals"),
        Param("expiry-buffer", int, 2, _nonneg, ">= 0", "rebalancing steps left untraded before T"),
    ],
    "ftdt": COMMON + MARKET + [
        SIGMA("sigma-model", 0.3, "hedging volatility"),
        SIGMA("sigma-true", 0.2, "volatility of the simulated path"),
        Param("mu", float, 0.05, lambda m: abs(m) < 1, "|mu| < 1", "path drift"),
        Param("grid", _grid_pair, (800, 800), GRID.check, GRID.rule, GRID.help),
        STEPS(1024), PATHS(50), GREEKS,
        Param("horizon-gap", float, 2 / 64, lambda g: 0 < g < 1, "0 < gap < 1",
              "stop this long before T"),
    ],
    "bounds": COMMON + MARKET + [
        SIGMA("sigma-model", 0.2, "hedging volatility"),
        SIGMA("sigma-true", 0.3, "volatility of the misspecified path"),
        Param("mu", float, 0.05, lambda m: abs(m) < 1, "|mu| < 1", "path drift"),
        GRID, STEPS(1024), PATHS(100),
        Param("rebalance", int, 256, _pow2, "power of two", "rebalancing intervals"),
        Param("p", float, 2.5, lambda p: 2 < p < 3, "2 < p < 3", "trace variation exponent"),
        Param("q", float, 0.0, lambda q: q == 0 or q > 1, "0 (auto) or > 1",
              "Greek variation exponent, 0 picks the middle of the window"),
        Param("levels", int, 4, lambda n: 2 <= n <= 8, "2..8", "refinement levels of the mesh study"),
        Param("cutoff-gap", float, 2 / 32, lambda g: 0 < g < 1, "0 < gap < 1",
              "last trade at T minus this gap in the mesh study"),
    ],
    "enlarged": COMMON + MARKET + [
        SIGMA("sigma", 0.2, "model and path volatility"),
        Param("mu", float, 0.05, lambda m: abs(m) < 1, "|mu| < 1", "path drift"),
        Param("kappa", float, 0.01, lambda k: abs(k) < 10, "|kappa| < 10", "swap quote per unit time"),
        GRID, STEPS(4096), GREEKS,
        Param("levels", int, 4, lambda n: 2 <= n <= 10, "2..10", "dyadic rebalancing levels"),
        Param("coarsest", int, 64, _pow2, "power of two", "rebalancing intervals at the coarsest level"),
        Param("horizon-gap", float, 2 / 64, lambda g: 0 < g < 1, "0 < gap < 1",
              "stop this long before T"),
    ],
    "deceive": COMMON + [
        Param("convention", str, "variance_matched", choices=vt.CONVENTIONS),
        SIGMA("sigma1", 0.2, "marginal (GBM) volatility"),
        SIGMA("sigma2", 0.3, "volatility seen by the quadratic variation"),
        Param("mu", float, 0.0, lambda m: abs(m) < 1, "|mu| < 1", "drift"),
        Param("x0", float, 100.0, _pos, "> 0", "initial price"),
        Param("T", float, 1.0, lambda T: 0 < T <= 30, "0 < T <= 30", "horizon"),
        Param("mc", int, 10_000, lambda n: 100 <= n <= 10**7, "100..1e7", "Monte Carlo paths"),
        STEPS(1024),
        Param("probes", int, 8, lambda n: 1 <= n <= 256, "1..256", "marginal-variance probe times"),
        Param("ks-cells", int, 32, lambda n: 1 <= n <= 1024, "1..1024", "cells of the coarse grid"),
        Param("ks-paths", int, 2000, lambda n: 1000 <= n <= 10**6, "1000..1e6", "draws per KS test"),
        Param("alpha", float, 0.01, lambda a: 0 < a < 1, "0 < alpha < 1", "KS significance level"),
        Param("refine", int, 8, lambda n: 1 <= n <= 1024, "1..1024", "fine steps per coarse cell"),
    ],
    "sew-bench": COMMON + [
        Param("fields", int, 50, lambda n: 1 <= n <= 10_000, "1..10000", "number of synthetic fields"),
        Param("points", int, 129, lambda n: 3 <= n <= 512, "3..512", "grid points per field"),
    ],
}


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment. Keys may use - or _."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ConfigError(f"{path}:{n}: empty key")
        out[k.replace("-", "_")] = v
    return out


def resolve_config(command: str, file_values: dict | None, flag_values: dict) -> dict:
    """Defaults, overridden by config-file values, overridden by flags."""
    params = {p.key: p for p in PARAMS[command]}
    file_values = dict(file_values or {})
    unknown = sorted(set(file_values) - set(params))
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
    cfg = {}
    for key, p in params.items():
        val = p.default
        if key in file_values:
            val = p.parse(file_values[key])
        if flag_values.get(key) is not None:
            val = p.parse(flag_values[key])
        cfg[key] = val
    cfg["command"] = command
    return cfg


# execution settings that cannot change any number in the outputs
EXECUTION_KEYS = ("workers",)


def _canonical(cfg: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(cfg.items())
            if k not in EXECUTION_KEYS}


def config_hash(cfg: dict) -> str:
    blob = json.dumps(_canonical(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def config_text(cfg: dict) -> str:
    """The resolved config in the flat file format; reading it back gives the same hash."""
    lines = [f"# {cfg['command']}"]
    for k, v in sorted(cfg.items()):
        if k == "command" or k in EXECUTION_KEYS:
            continue
        if isinstance(v, tuple):
            v = "x".join(str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ output

class Reporter:
    def __init__(self, out_dir: Path, cfg: dict):
        self.out = out_dir
        self.cfg = cfg
        self.hash = config_hash(cfg)
        self.files: list[str] = []
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {out_dir}: {exc}") from None

    def _write(self, name: str, text: str):
        try:
            (self.out / name).write_text(text)
        except OSError as exc:
            raise ConfigError(f"cannot write {name}: {exc}") from None
        self.files.append(name)

    def table(self, stem: str, columns: list[str], rows: list[list]):
        if self.cfg["format"] == "json":
            recs = [dict(zip(columns, (_jsonable(x) for x in row))) for row in rows]
            self._write(stem + ".json", json.dumps(recs, indent=2, sort_keys=True) + "\n")
            return
        lines = [",".join(columns)]
        for row in rows:
            lines.append(",".join(_cell(x) for x in row))
        self._write(stem + ".csv", "\n".join(lines) + "\n")

    def report(self, name: str, body: dict):
        doc = {"config": _canonical(self.cfg), "config_hash": self.hash, "seed": self.cfg["seed"],
               **_jsonable(body)}
        self._write(name, json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def finish(self):
        self._write("config.txt", config_text(self.cfg))


def _cell(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (float, np.floating)):
        return format_float(float(x))
    return str(x)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    return x


def _pmap(fn, items, workers: int):
    """Ordered map, in worker processes when asked. Results never depend on ``workers``."""
    items = list(items)
    if workers <= 1 or len(items) < 2:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


# ------------------------------------------------------------------ shared pieces

def _payoff(cfg) -> PayoffSpec:
    return PayoffSpec(cfg["payoff"], K=cfg["K"])


def _scheme(cfg) -> SchemeParams:
    n_space, n_time = cfg["grid"]
    return SchemeParams(n_space=n_space, n_time=n_time)


def _surface(cfg, sigma):
    if cfg.get("greeks") == "closed_form":
        return ClosedFormBS(_payoff(cfg), sigma, cfg["r"], cfg["T"])
    return solve(_payoff(cfg), LocalVolSpec("black_scholes", sigma=sigma), cfg["r"], cfg["T"], _scheme(cfg))


# ------------------------------------------------------------------ subcommands

def run_pde(cfg, rep: Reporter) -> dict:
    vol = LocalVolSpec(cfg["vol"], sigma=cfg["sigma"], beta=cfg["beta"])
    sol = solve(_payoff(cfg), vol, cfg["r"], cfg["T"], _scheme(cfg))
    S0, K, r, T, kind = cfg["S0"], cfg["K"], cfg["r"], cfg["T"], cfg["payoff"]
    at = {"price": float(sol.v(0.0, S0)), "delta": float(sol.delta(0.0, S0)), "gamma": float(sol.gamma(0.0, S0))}
    body = {"S0": S0, **at, "terminal_error": sol.terminal_error(), "usable_range": list(sol.usable_range()),
            "solver": sol.to_dict()}
    if cfg["vol"] == "black_scholes":
        s = cfg["sigma"]
        exact = {"price": float(bs_price(S0, K, r, s, T, kind)), "delta": float(bs_delta(S0, K, r, s, T, kind)),
                 "gamma": float(bs_gamma(S0, K, r, s, T))}
        body["closed_form"] = exact
        body["relative_error"] = {k: abs(at[k] - exact[k]) / abs(exact[k]) for k in exact}
        other = "put" if kind == "call" else "call"
        twin = solve(PayoffSpec(other, K=K), vol, r, T, _scheme(cfg))
        call, put = (at["price"], float(twin.v(0.0, S0))) if kind == "call" else (float(twin.v(0.0, S0)), at["price"])
        forward = S0 - K * math.exp(-r * T)
        body["put_call_parity_error"] = abs(call - put - forward) / abs(call)
    lo, hi = sol.usable_range()
    xs = np.linspace(max(lo * 1.001, 0.25 * S0), min(hi * 0.999, 4 * S0), cfg["slice_points"])
    rows = [[x, float(sol.v(0.0, x)), float(sol.delta(0.0, x)), float(sol.gamma(0.0, x))] for x in xs]
    rep.table("pde_slice", ["S", "V", "delta", "gamma"], rows)
    return body


def _hedge_one(args):
    cfg, sol, i = args
    fine = TimeGrid.uniform(cfg["T"], cfg["steps"])
    rg = fine.subgrid(fine.dyadic_indices(int(math.log2(cfg["steps"] // cfg["rebalance"]))))
    S = gbm_path(cfg["S0"], cfg["mu"], cfg["sigma_true"], fine, cfg["seed"], STREAM_HEDGE, i)
    led = hd.discrete_delta_hedge(sol, S, rg, cfg["r"], expiry_buffer=cfg["expiry_buffer"])
    return led


def run_hedge(cfg, rep: Reporter) -> dict:
    if cfg["rebalance"] > cfg["steps"]:
        raise ConfigError("rebalance intervals cannot exceed path steps")
    sol = _surface(cfg, cfg["sigma"])
    ledgers = _pmap(_hedge_one, [(cfg, sol, i) for i in range(cfg["paths"])], cfg["workers"])
    first = ledgers[0]
    rows = [[k, t, first.prices[k], first.cash[k], first.stock[k], first.value[k], first.value_before[k],
             first.rebalance[k], first.financing[k]] for k, t in enumerate(first.grid.times)]
    rep.table("hedge_ledger", ["node", "t", "S", "cash", "stock", "V", "V_before", "rebal", "C"], rows)
    per = [[i, L.value[0], L.financing[-1], L.terminal_shortfall, L.extra["n_trades"]]
           for i, L in enumerate(ledgers)]
    rep.table("hedge_paths", ["path", "V0", "C_T", "terminal_shortfall", "n_trades"], per)
    short = np.array([L.terminal_shortfall for L in ledgers])
    return {"first_path": first.summary(),
            "financing_identity_error": hd.financing_identity_error(first, sol),
            "mean_terminal_shortfall": float(short.mean()),
            "mean_abs_terminal_shortfall": float(np.abs(short).mean()),
            "n_paths": len(ledgers)}


def _ftdt_one(args):
    cfg, sol_model, i = args
    r, T = cfg["r"], cfg["T"]
    fine = TimeGrid.uniform(T, cfg["steps"])
    hz = fine.times[fine.index_of(T - cfg["horizon_gap"], atol=0.5 * fine.mesh)]
    S = gbm_path(cfg["S0"], cfg["mu"], cfg["sigma_true"], fine, cfg["seed"], STREAM_FTDT, i)
    vm = LocalVolSpec("black_scholes", sigma=cfg["sigma_model"])
    vtrue = LocalVolSpec("black_scholes", sigma=cfg["sigma_true"])
    et = diffusion_enhance(S, vtrue, r, "undiscounted")
    em = diffusion_enhance(S, vm, r, "undiscounted")
    res = hd.ftdt_pnl(sol_model, et, em.bracket, r, horizon=hz)
    V = hd.pathwise_value_path(sol_model, et, r, financing="model")
    k = fine.index_of(hz)
    direct = float(V.scalar[k] - sol_model.v(hz, S.scalar[k]))
    # same Gamma, brackets exchanged
    swapped = hd.ftdt_pnl(sol_model, em, et.bracket, r, horizon=hz)["pnl"]
    return [i, res["pnl"], res["pnl_accrued"], direct, abs(res["pnl"] - direct), res["pnl"] + swapped]


def run_ftdt(cfg, rep: Reporter) -> dict:
    sol_model = _surface(cfg, cfg["sigma_model"])
    rows = _pmap(_ftdt_one, [(cfg, sol_model, i) for i in range(cfg["paths"])], cfg["workers"])
    rep.table("ftdt", ["path", "pnl", "pnl_accrued", "direct", "abs_diff", "antisymmetry"], rows)
    arr = np.array([row[1:] for row in rows], float)
    price = float(sol_model.v(0.0, cfg["S0"]))
    return {"price": price, "mean_pnl": float(arr[:, 0].mean()), "min_pnl": float(arr[:, 0].min()),
            "max_abs_diff_over_price": float(arr[:, 3].max() / price),
            "max_antisymmetry": float(np.abs(arr[:, 4]).max()), "n_paths": len(rows)}


def _bounds_one(args):
    cfg, sol, i = args
    r, T, p = cfg["r"], cfg["T"], cfg["p"]
    q = cfg["q"] or None
    fine = TimeGrid.uniform(T, cfg["steps"])
    rg = fine.subgrid(fine.dyadic_indices(int(math.log2(cfg["steps"] // cfg["rebalance"]))))
    S = gbm_path(cfg["S0"], cfg["mu"], cfg["sigma_model"], fine, cfg["seed"], STREAM_BOUNDS, 2 * i)
    plain = hd.financing_bound(sol, S, rg, r, p, q, check=False)
    St = gbm_path(cfg["S0"], cfg["mu"], cfg["sigma_true"], fine, cfg["seed"], STREAM_BOUNDS, 2 * i + 1)
    te = diffusion_enhance(discount(St, r), LocalVolSpec("black_scholes", sigma=cfg["sigma_true"]), 0.0,
                           "discounted")
    robust = hd.robust_financing_bound(sol, te, sol.vol, rg, r, p, q, check=False)
    return plain, robust


def run_bounds(cfg, rep: Reporter) -> dict:
    if cfg["rebalance"] > cfg["steps"] // 2:
        raise ConfigError("need at least two path steps per rebalancing interval")
    sol = _surface(cfg, cfg["sigma_model"])
    res = _pmap(_bounds_one, [(cfg, sol, i) for i in range(cfg["paths"])], cfg["workers"])
    term_names = sorted(set(res[0][1]["terms"]) | set(res[0][0]["terms"]))
    rows = []
    for i, pair in enumerate(res):
        for label, b in zip(("model", "robust"), pair):
            rows.append([i, label, b["observed"], b["bound"], b["holds"]]
                        + [b["terms"].get(n, 0.0) for n in term_names])
    rep.table("bounds", ["path", "case", "observed", "bound", "holds"] + term_names, rows)

    # mesh-term refinement on the first path with a fixed last trading time
    fine = TimeGrid.uniform(cfg["T"], cfg["steps"])
    S = gbm_path(cfg["S0"], cfg["mu"], cfg["sigma_model"], fine, cfg["seed"], STREAM_BOUNDS, 0)
    top = int(math.log2(cfg["rebalance"]))
    cut = cfg["T"] - cfg["cutoff_gap"]
    mesh_rows = []
    for lev in range(top - cfg["levels"] + 1, top + 1):
        if lev < 1 or 2**lev > cfg["steps"] // 2:
            raise ConfigError("refinement levels do not fit between 2 and steps/2 intervals")
        rg = fine.subgrid(fine.dyadic_indices(int(math.log2(cfg["steps"])) - lev))
        cut_here = float(rg.times[rg.index_of(cut, atol=0.5 * rg.mesh)])
        b = hd.financing_bound(sol, S, rg, cfg["r"], cfg["p"], cfg["q"] or None, cutoff=cut_here, check=False)
        mesh_rows.append([lev, 2**lev, cut_here, b["terms"]["mesh_term"], b["osc"], b["observed"], b["bound"]])
    rep.table("bounds_mesh", ["level", "intervals", "cutoff", "mesh_term", "osc", "observed", "bound"], mesh_rows)
    mesh = [m[3] for m in mesh_rows]
    holds = [bool(b["holds"]) for pair in res for b in pair]
    return {"n_paths": len(res), "model_holds": sum(bool(p[0]["holds"]) for p in res),
            "robust_holds": sum(bool(p[1]["holds"]) for p in res), "all_hold": all(holds),
            "q": res[0][0]["q"], "gamma": res[0][0]["gamma"],
            "mesh_terms": mesh, "mesh_monotone": bool(np.all(np.diff(mesh) < 0))}


def run_enlarged(cfg, rep: Reporter) -> dict:
    r, T = cfg["r"], cfg["T"]
    finest = cfg["coarsest"] * 2 ** (cfg["levels"] - 1)
    if finest > cfg["steps"]:
        raise ConfigError("finest rebalancing level exceeds the path steps")
    sol = _surface(cfg, cfg["sigma"])
    fine = TimeGrid.uniform(T, cfg["steps"])
    S = gbm_path(cfg["S0"], cfg["mu"], cfg["sigma"], fine, cfg["seed"], STREAM_ENLARGED, 0)
    ep = diffusion_enhance(S, LocalVolSpec("black_scholes", sigma=cfg["sigma"]), r, "undiscounted")
    hz = T - cfg["horizon_gap"]
    rows, ledger = [], None
    for lev in range(cfg["levels"]):
        n = cfg["coarsest"] * 2**lev
        rg = fine.subgrid(fine.dyadic_indices(int(math.log2(cfg["steps"] // n))))
        hz_here = float(rg.times[rg.index_of(hz, atol=0.5 * rg.mesh)])
        ledger = hd.enlarged_hedge(sol, S, ep, hd.SwapQuote.linear(rg, cfg["kappa"]), r,
                                   rebalance_grid=rg, horizon=hz_here)
        quad = hd.closed_pnl_quadrature(ledger.grid.times, ledger.aux["Y"], r)
        e = ledger.extra
        rows.append([n, e["sum_abs_rebalance"], e["abs_sum_rebalance"], e["ledger_pnl"], e["closed_form_pnl"],
                     quad, abs(e["ledger_pnl"] - quad) / max(abs(e["ledger_pnl"]), 1e-300)])
    ratios = [rows[k][1] / rows[k + 1][1] for k in range(len(rows) - 1)]
    rep.table("enlarged", ["intervals", "sum_abs_rebal", "abs_sum_rebal", "ledger_pnl", "closed_form_pnl",
                           "quadrature_pnl", "rel_diff"], rows)
    cols = ["node", "t", "S", "cash", "stock", "swap", "swap_value", "V", "V_before", "rebal", "C"]
    L = ledger
    rep.table("enlarged_ledger", cols,
              [[k, t, L.prices[k], L.cash[k], L.stock[k], L.swap[k], L.swap_value[k], L.value[k],
                L.value_before[k], L.rebalance[k], L.financing[k]] for k, t in enumerate(L.grid.times)])
    return {"sum_abs_rebalance_ratios": ratios, "max_rel_pnl_diff": max(r_[-1] for r_ in rows),
            "finest": L.summary()}


def run_deceive(cfg, rep: Reporter) -> dict:
    spec = vt.DeceptiveSpec(x0=cfg["x0"], mu=cfg["mu"], sigma1=cfg["sigma1"], sigma2=cfg["sigma2"],
                            horizon=cfg["T"], convention=cfg["convention"])
    n = cfg["mc"]
    st = vt.deceptive_log_stats(spec, cfg["steps"], cfg["seed"], n, n_probes=cfg["probes"])
    rows = []
    for j, t in enumerate(st["probe_times"]):
        x = st["log_probes"][:, j]
        v = float(x.var(ddof=1))
        se = float(np.sqrt(np.var((x - x.mean()) ** 2) / n))
        target = cfg["sigma1"] ** 2 * t
        rows.append([t, float(x.mean()), v, se, target, float(spec.log_variance(t)), (v - target) / se])
    rep.table("deceive_marginals", ["t", "mean_log", "var_log", "se_var", "sigma1_sq_t", "model_var", "z"], rows)

    qv = st["realized_bracket"]
    T = cfg["T"]
    mean, se = float(qv.mean()), float(qv.std(ddof=1) / np.sqrt(n))
    target = cfg["sigma2"] ** 2 * T
    expected = target * vt.expected_realized_qv(0.0, spec.H, st["grid"].times)
    brows = [["realized_bracket_mean", mean], ["realized_bracket_se", se], ["sigma2_sq_T", target],
             ["expected_at_resolution", expected], ["z_vs_sigma2_sq_T", (mean - target) / se],
             ["z_vs_expected", (mean - expected) / se]]
    rep.table("deceive_bracket", ["statistic", "value"], brows)

    pi = TimeGrid(np.linspace(0.0, T, cfg["ks_cells"] + 1))
    ks_seed = int(np.random.SeedSequence(cfg["seed"], spawn_key=(STREAM_KS,)).generate_state(1, np.uint64)[0])
    ks = vt.indistinguishability_suite([spec], pi, ks_seed, cfg["ks_paths"], cfg["alpha"], cfg["refine"])
    rep.report("ks.json", ks)
    z_term = rows[-1][-1]
    return {"H": spec.H, "terminal_var_z": z_term, "bracket_z_vs_sigma2_sq_T": brows[4][1],
            "ks_pass_rate": ks["pass_rate"], "ks_tests": ks["n_tests"]}


def run_sew_bench(cfg, rep: Reporter) -> dict:
    recs = sew_bench(cfg["fields"], cfg["points"], rng=make_rng(cfg["seed"], STREAM_SEW))
    cols = ["field", "kind", "gamma", "defect_norm", "max_error", "min_slack", "violations", "integral_T"]
    rep.table("sew_bench", cols, [[r_[c] for c in cols] for r_ in recs])
    return {"n_fields": len(recs), "violations": sum(r_["violations"] for r_ in recs)}


RUNNERS = {"pde": run_pde, "hedge": run_hedge, "ftdt": run_ftdt, "bounds": run_bounds,
           "enlarged": run_enlarged, "deceive": run_deceive, "sew-bench": run_sew_bench}


# ------------------------------------------------------------------ entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pathwise-hedge", description="Pathwise hedging experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, params in PARAMS.items():
        sp = sub.add_parser(name, allow_abbrev=False)
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--out", help=f"output directory (else ${OUT_ENV}, else ./{DEFAULT_OUT})")
        for p in params:
            default = "x".join(map(str, p.default)) if isinstance(p.default, tuple) else p.default
            sp.add_argument(f"--{p.name}", dest=p.key, default=None, metavar=p.key.upper(),
                            help=f"{p.help} [default {default}]".strip())
    return ap


def _out_dir(args, file_values: dict) -> Path:
    if args.out:
        return Path(args.out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    return Path(file_values.pop("out", DEFAULT_OUT))


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    cmd = args.command
    try:
        file_values = read_config_file(args.config) if args.config else {}
        out = _out_dir(args, file_values)
        file_values.pop("out", None)
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "out")}
        cfg = resolve_config(cmd, file_values, flags)
        rep = Reporter(out, cfg)
        body = RUNNERS[cmd](cfg, rep)
        rep.finish()
        rep.report(f"{cmd}.json", {"result": body, "files": sorted(rep.files + [f"{cmd}.json"])})
    except ArithmeticError as exc:
        _diagnose(cmd, exc, "numeric failure")
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        _diagnose(cmd, exc, "invalid input")
        return EXIT_INVALID
    print(json.dumps({"command": cmd, "out": str(out), "config_hash": rep.hash, "seed": cfg["seed"]}))
    return EXIT_OK


def _diagnose(cmd: str, exc: Exception, what: str):
    print(json.dumps({"command": cmd, "error": what, "type": type(exc).__name__, "detail": str(exc)}),
          file=sys.stderr)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
