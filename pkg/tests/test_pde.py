import numpy as np
import pytest

from pathwise_hedge.enhancement import LocalVolSpec
from pathwise_hedge.grids import SampledPath, TimeGrid
from pathwise_hedge.pde import (
    ClosedFormBS,
    DomainError,
    PayoffSpec,
    SchemeParams,
    bs_price,
    exponent_window,
    greeks,
    q_moderation_report,
    solve,
)
from pathwise_hedge.simulate import gbm_path

from conftest import K, R, S0, SIGMA, T

BS = LocalVolSpec("black_scholes", sigma=SIGMA)


def test_call_matches_closed_form(bs_call, bs_call_exact):
    assert bs_call.v(0.0, S0) == pytest.approx(bs_call_exact.v(0.0, S0), rel=1e-3)
    assert bs_call.delta(0.0, S0) == pytest.approx(bs_call_exact.delta(0.0, S0), rel=1e-3)
    assert bs_call.gamma(0.0, S0) == pytest.approx(bs_call_exact.gamma(0.0, S0), rel=1e-2)


def test_closed_form_reference_value():
    # textbook value for S=K=100, r=5%, sigma=20%, one year
    assert bs_price(100.0, 100.0, 0.05, 0.2, 1.0) == pytest.approx(10.4506, abs=1e-4)


def test_put_call_parity(bs_call):
    put = solve(PayoffSpec("put", K=K), BS, R, T)
    for z in (80.0, 100.0, 125.0):
        gap = bs_call.v(0.0, z) - put.v(0.0, z) - (z - K * np.exp(-R * T))
        assert abs(gap) < 1e-3


def test_constant_payoff_is_discounted_level():
    sol = solve(PayoffSpec("constant", level=3.0), BS, R, T, SchemeParams(center=100.0))
    z = np.array([70.0, 100.0, 140.0])
    assert np.allclose(sol.v(0.0, z), 3.0 * np.exp(-R * T), atol=1e-12)
    assert np.allclose(sol.delta(0.5, z), 0.0, atol=1e-10)


def test_second_order_convergence():
    exact = bs_price(S0, K, R, SIGMA, T)
    errs = []
    for n in (100, 200, 400):
        sol = solve(PayoffSpec("call", K=K), BS, R, T, SchemeParams(n_space=n, n_time=n))
        errs.append(abs(sol.v(0.0, S0) - exact))
    assert errs[0] / errs[1] >= 3 and errs[1] / errs[2] >= 3


def test_price_increases_with_vol():
    prices = [solve(PayoffSpec("call", K=K), LocalVolSpec("black_scholes", sigma=s), R, T,
                    SchemeParams(200, 200)).v(0.0, S0) for s in (0.1, 0.2, 0.3)]
    assert prices[0] < prices[1] < prices[2]


def test_discounted_and_undiscounted_agree(bs_call):
    rng = np.random.default_rng(5)
    t = rng.uniform(0.0, T, 1000)
    z = rng.uniform(60.0, 160.0, 1000)
    v = bs_call.v(t, z)
    w = bs_call.w(t, np.exp(-R * t) * z)
    assert np.max(np.abs(v - np.exp(R * t) * w)) < 1e-12


def test_terminal_condition(bs_call):
    assert bs_call.terminal_error() < 0.05
    zs = np.array([70.0, 90.0, 115.0, 150.0])
    assert np.allclose(bs_call.v(T, zs), np.maximum(zs - K, 0), atol=0.05)


def test_deep_in_the_money_delta(bs_call):
    assert greeks(bs_call, 0.0, 200.0)["delta"] == pytest.approx(1.0, abs=1e-3)
    assert greeks(bs_call, 0.0, 40.0)["delta"] == pytest.approx(0.0, abs=1e-3)
    with pytest.raises(DomainError):
        greeks(bs_call, T, 100.0)


def test_deep_in_the_money_low_vol_delta():
    # the default +/- 6 sd log domain stops short of 3K at this vol
    sol = solve(PayoffSpec("call", K=K), LocalVolSpec("black_scholes", sigma=0.1), R, 0.5,
                SchemeParams(800, 200, n_std=24.0))
    assert 0.999 <= sol.delta(0.0, 3 * K) <= 1.0


def test_delta_matches_finite_difference(bs_call_exact):
    h = 1e-3
    for z in (85.0, 100.0, 120.0):
        fd = (bs_call_exact.v(0.3, z + h) - bs_call_exact.v(0.3, z - h)) / (2 * h)
        assert bs_call_exact.delta(0.3, z) == pytest.approx(fd, abs=1e-4)


def test_domain_checks(bs_call):
    lo, hi = bs_call.usable_range()
    with pytest.raises(DomainError):
        bs_call.v(0.0, hi * 1.01)
    with pytest.raises(DomainError):
        bs_call.v(0.0, lo * 0.99)


def test_bad_inputs():
    with pytest.raises(ValueError):
        solve(PayoffSpec("call", K=K), BS, -0.01, T)
    with pytest.raises(ValueError):
        solve(PayoffSpec("call", K=K), BS, R, 0.0)
    with pytest.raises(ValueError):
        SchemeParams(n_space=2)
    with pytest.raises(ValueError, match="discontinuous"):
        PayoffSpec("digital", K=K)
    dig = PayoffSpec("digital", K=K, allow_discontinuous=True)
    assert not dig.convex
    sol = solve(dig, BS, R, T, SchemeParams(200, 200))
    assert 0 < sol.v(0.0, S0) < np.exp(-R * T)
    with pytest.raises(ValueError):
        ClosedFormBS(dig, SIGMA, R, T)


def test_exponent_window():
    lo, hi = exponent_window(2.5, 1.0)
    assert lo == pytest.approx(0.2) and hi == pytest.approx(0.4)
    with pytest.raises(ValueError, match="empty"):
        exponent_window(3.0, 0.9)


def test_q_moderation_report(bs_call):
    g = TimeGrid.uniform(0.75, 96)
    S = gbm_path(S0, R, SIGMA, g, 3, 0)
    X = SampledPath(g, np.exp(-R * g.times) * S.scalar)
    rep = q_moderation_report(bs_call, X, 2.5, 10 / 3)
    assert rep["q_in_window"]
    assert rep["all_finite"]
    assert rep["pstar"] == pytest.approx(2.5 * (10 / 3) / (2.5 + 10 / 3))
    assert not q_moderation_report(bs_call, X, 2.5, 8.0)["q_in_window"]
