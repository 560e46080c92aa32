import numpy as np
import pytest

from pathwise_hedge.enhancement import EnhancedPath, LocalVolSpec, diffusion_enhance, discount
from pathwise_hedge.grids import GridError, SampledPath, TimeGrid
from pathwise_hedge.hedging import (
    SwapQuote,
    check_exponents,
    closed_pnl_quadrature,
    default_cutoff,
    default_q,
    discrete_delta_hedge,
    enlarged_hedge,
    financing_bound,
    financing_identity_error,
    ftdt_pnl,
    pathwise_value_path,
    robust_financing_bound,
)
from pathwise_hedge.pde import ClosedFormBS, DomainError, PayoffSpec, SchemeParams, solve
from pathwise_hedge.simulate import gbm_path

from conftest import K, R, S0, SIGMA, T

CALL = PayoffSpec("call", K=K)
BS = LocalVolSpec("black_scholes", sigma=SIGMA)


@pytest.fixture(scope="module")
def exact():
    return ClosedFormBS(CALL, SIGMA, R, T)


def smooth_path(n):
    g = TimeGrid.uniform(T, n)
    return SampledPath(g, S0 * np.exp(R * g.times) * (1 + 0.2 * g.times))


def test_default_cutoff():
    g = TimeGrid.uniform(1.0, 8)
    assert default_cutoff(g) == 0.75
    assert default_cutoff(g, 0) == 1.0
    with pytest.raises(GridError):
        default_cutoff(TimeGrid.uniform(1.0, 1), 2)


def test_ledger_identities(bs_call):
    g = TimeGrid.uniform(T, 512)
    S = gbm_path(S0, R, SIGMA, g, 1, 0)
    led = discrete_delta_hedge(bs_call, S, g.subgrid(g.dyadic_indices(3)), R)
    assert led.position_value_error() < 1e-10
    assert financing_identity_error(led, bs_call) < 1e-12
    assert led.financing[0] == led.value[0] == pytest.approx(bs_call.v(0.0, S0))
    assert led.value[-1] == led.payoff
    with pytest.raises(GridError, match="nested"):
        discrete_delta_hedge(bs_call, S, TimeGrid(np.array([0.0, 0.3, 1.0])), R)


def test_one_step_hedge(exact):
    g = TimeGrid.uniform(T, 4)
    S = SampledPath(g, [100.0, 104.0, 97.0, 101.0, 110.0])
    led = discrete_delta_hedge(exact, S, g, R, expiry_buffer=1)
    # trades at 0, .25, .5, .75; settle at 1
    assert led.extra["n_trades"] == 4
    t, X = g.times, np.exp(-R * g.times) * S.scalar
    H = exact.w_x(t[:4], X[:4])
    gains = np.sum(H * np.diff(X))
    assert led.terminal_shortfall == pytest.approx(np.exp(R) * (exact.w(0, 100.0) + gains) - 10.0, rel=1e-12)


def test_shortfall_rms_halves_with_quadrupled_trading(exact):
    n_path = 2**9
    g = TimeGrid.uniform(T, n_path)
    paths = [gbm_path(S0, R, SIGMA, g, 9, i) for i in range(200)]
    sizes = [2**k for k in range(5, 10)]
    rms = []
    for n in sizes:
        rg = TimeGrid.uniform(T, n)
        err = [discrete_delta_hedge(exact, S, rg, R).terminal_shortfall for S in paths]
        rms.append(np.sqrt(np.mean(np.square(err))))
    slope = -np.polyfit(np.log(sizes), np.log(rms), 1)[0]
    assert 0.35 <= slope <= 0.65


def test_deterministic_path_shortfall_matches_accrued_pnl(exact):
    n = 2**12
    S = smooth_path(n)
    led = discrete_delta_hedge(exact, S, S.grid, R)
    flat = EnhancedPath(S, np.zeros(n + 1), coordinates="undiscounted")
    model = diffusion_enhance(S, BS, R, "undiscounted")
    pnl = ftdt_pnl(exact, flat, model.bracket, R, horizon=led.cutoff)
    assert led.terminal_shortfall == pytest.approx(pnl["pnl_accrued"], rel=2e-3)


def test_bound_holds_on_gbm(bs_call):
    g = TimeGrid.uniform(T, 256)
    S = gbm_path(S0, R, SIGMA, g, 2, 0)
    out = financing_bound(bs_call, S, g.subgrid(g.dyadic_indices(2)), R)
    assert out["holds"] and out["bound"] >= out["observed"]
    assert out["q"] == pytest.approx(10 / 3)


def test_constant_payoff_bound_is_tight():
    sol = solve(PayoffSpec("constant", level=5.0), BS, R, T, SchemeParams(200, 200, center=100.0))
    g = TimeGrid.uniform(T, 128)
    S = gbm_path(S0, R, SIGMA, g, 3, 0)
    out = financing_bound(sol, S, g.subgrid(g.dyadic_indices(2)), R)
    assert out["observed"] == pytest.approx(5.0 * np.exp(-R * T), rel=1e-10)
    assert out["bound"] == pytest.approx(out["observed"], rel=1e-8)


def test_exponent_checks():
    with pytest.raises(ValueError, match="window"):
        check_exponents(2.5, 8.0, 1.0)
    assert default_q(2.5) == pytest.approx(10 / 3)


def test_robust_bound_reduces_with_equal_brackets(bs_call):
    g = TimeGrid.uniform(T, 256)
    S = gbm_path(S0, R, SIGMA, g, 4, 0)
    rg = g.subgrid(g.dyadic_indices(2))
    ep = diffusion_enhance(discount(S, R), BS, 0.0, "discounted")
    robust = robust_financing_bound(bs_call, ep, None, rg, R)
    plain = financing_bound(bs_call, S, rg, R)
    assert robust["terms"]["misspecification"] == 0.0
    assert robust["bound"] == pytest.approx(plain["bound"], rel=1e-12)


def test_robust_bound_under_misspecification(bs_call):
    g = TimeGrid.uniform(T, 128)
    S = gbm_path(S0, R, 0.3, g, 5, 0)
    ep = diffusion_enhance(discount(S, R), LocalVolSpec("black_scholes", sigma=0.3), 0.0, "discounted")
    out = robust_financing_bound(bs_call, ep, BS, g.subgrid(g.dyadic_indices(2)), R)
    assert out["holds"]
    assert out["terms"]["misspecification"] > 0
    with pytest.raises(ValueError, match="discounted"):
        robust_financing_bound(bs_call, diffusion_enhance(S, BS, R, "undiscounted"), BS, g, R)


def test_value_path_tracks_payoff(exact):
    g = TimeGrid.uniform(T, 2**12)
    S = gbm_path(S0, R, SIGMA, g, 1, 0)
    ep = diffusion_enhance(S, BS, R, "undiscounted")
    for fin in ("portfolio", "model"):
        V = pathwise_value_path(exact, ep, R, fin)
        assert V.scalar[0] == pytest.approx(exact.v(0.0, S0))
        assert V.scalar[-1] == pytest.approx(CALL(S.scalar[-1]), abs=0.02)
    assert pathwise_value_path(exact, ep, R, V0=0.0).scalar[0] == 0.0
    with pytest.raises(ValueError):
        pathwise_value_path(exact, diffusion_enhance(discount(S, R), BS), R)


def test_ftdt_examples(exact):
    g = TimeGrid.uniform(T, 1024)
    S = gbm_path(S0, R, 0.3, g, 6, 0)
    hi = diffusion_enhance(S, LocalVolSpec("black_scholes", sigma=0.3), R, "undiscounted")
    lo = diffusion_enhance(S, BS, R, "undiscounted")
    h = 1.0 - 2 / 64
    assert ftdt_pnl(exact, lo, lo.bracket, R, h)["pnl"] == 0.0
    a = ftdt_pnl(exact, hi, lo.bracket, R, h)
    b = ftdt_pnl(exact, lo, hi.bracket, R, h)
    assert a["pnl"] < 0 and a["pnl"] == -b["pnl"]
    assert a["pnl"] == pytest.approx(a["pnl_time_integral"], rel=1e-2)
    with pytest.raises(ValueError, match="mismatch"):
        ftdt_pnl(exact, hi, diffusion_enhance(smooth_path(64), BS, R, "undiscounted").bracket, R)


def test_enlarged_zero_quotes(exact):
    g = TimeGrid.uniform(T, 512)
    S = gbm_path(S0, R, SIGMA, g, 7, 0)
    ep = diffusion_enhance(S, BS, R, "undiscounted")
    led = enlarged_hedge(exact, S, ep, None, R)
    assert np.all(led.aux["Y"] == 0)
    assert abs(led.extra["ledger_pnl"]) < 1e-12
    assert led.position_value_error() < 1e-10


def test_enlarged_pnl_closed_form(exact):
    g = TimeGrid.uniform(T, 512)
    S = gbm_path(S0, R, SIGMA, g, 8, 0)
    ep = diffusion_enhance(S, BS, R, "undiscounted")
    rg = g.subgrid(g.dyadic_indices(1))
    led = enlarged_hedge(exact, S, ep, SwapQuote.linear(rg, 0.01), R, rebalance_grid=rg)
    e = led.extra
    assert e["ledger_pnl"] == pytest.approx(e["closed_form_pnl"], abs=1e-10)
    quad = closed_pnl_quadrature(led.grid.times, led.aux["Y"], R)
    assert quad == pytest.approx(e["closed_form_pnl"], rel=1e-6)


def test_enlarged_custom_cash(exact):
    g = TimeGrid.uniform(T, 64)
    S = gbm_path(S0, R, SIGMA, g, 9, 0)
    ep = diffusion_enhance(S, BS, R, "undiscounted")
    m = g.index_of(default_cutoff(g)) + 1
    C = np.linspace(10.0, 12.0, m)
    led = enlarged_hedge(exact, S, ep, SwapQuote.linear(g, 0.01), R, cash_rule=C)
    assert np.allclose(led.cash * led.bank + led.stock * led.prices + led.aux["Y"], C, atol=1e-12)
    with pytest.raises(ValueError):
        enlarged_hedge(exact, S, ep, None, R, cash_rule=C[:-1])
    with pytest.raises(ValueError):
        enlarged_hedge(exact, S, ep, None, R, cash_rule="greedy")


def test_enlarged_errors(exact):
    g = TimeGrid.uniform(T, 64)
    S = gbm_path(S0, R, SIGMA, g, 10, 0)
    ep = diffusion_enhance(S, BS, R, "undiscounted")
    with pytest.raises(GridError, match="quote"):
        enlarged_hedge(exact, S, ep, SwapQuote.linear(TimeGrid.uniform(T, 32), 0.01), R)
    with pytest.raises(ValueError):
        enlarged_hedge(exact, S, diffusion_enhance(discount(S, R), BS), None, R)
    with pytest.raises(ValueError, match="diagonal"):
        from pathwise_hedge.grids import TwoParamField
        SwapQuote(TwoParamField(g, func=lambda i, j: np.ones(np.broadcast(i, j).shape), check=False))


def test_path_outside_pde_domain(bs_call):
    g = TimeGrid.uniform(T, 8)
    S = SampledPath(g, np.full(9, 5000.0))
    with pytest.raises(DomainError):
        discrete_delta_hedge(bs_call, S, g, R)
