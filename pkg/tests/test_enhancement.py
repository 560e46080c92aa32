import numpy as np
import pytest

from pathwise_hedge.enhancement import (
    EllipticityError,
    EnhancedPath,
    LocalVolSpec,
    TableDomainError,
    bracket_diff,
    diffusion_enhance,
    extrapolation_used,
    read_enhanced_csv,
    realized_bracket,
    write_enhanced_csv,
)
from pathwise_hedge.grids import GridError, SampledPath, TimeGrid, TwoParamField, is_additive
from pathwise_hedge.simulate import gbm_path
from pathwise_hedge.volterra import DeceptiveSpec, deceptive_log_stats


def gbm(n=256, seed=0, sigma=0.2):
    return gbm_path(100.0, 0.05, sigma, TimeGrid.uniform(1.0, n), seed, 0)


def test_constant_vol_discounted():
    g = TimeGrid.uniform(1.0, 10)
    ep = diffusion_enhance(SampledPath(g, np.linspace(1, 2, 11)), LocalVolSpec("constant", sigma=0.2))
    assert ep.bracket.at(0.0, 1.0).item() == pytest.approx(0.04, rel=1e-14)


def test_black_scholes_undiscounted_is_sigma_sq_s_sq():
    S = gbm()
    ep = diffusion_enhance(S, LocalVolSpec("black_scholes", sigma=0.2), r=0.05, coordinates="undiscounted")
    dens = 0.04 * S.scalar**2
    manual = np.sum(0.5 * np.diff(S.times) * (dens[1:] + dens[:-1]))
    assert ep.scalar_bracket()[-1] == pytest.approx(manual, rel=1e-12)


def test_bracket_additive_exactly():
    ep = diffusion_enhance(gbm(), LocalVolSpec("black_scholes", sigma=0.3), r=0.05, coordinates="undiscounted")
    b = ep.bracket
    n = len(ep.grid) - 1
    assert b(0, n).item() == b(0, 100).item() + b(100, n).item()
    assert is_additive(b)
    assert np.all(np.diff(ep.scalar_bracket()) >= 0)


def test_negative_rate_rejected():
    with pytest.raises(ValueError):
        diffusion_enhance(gbm(), LocalVolSpec("constant"), r=-0.01)


def test_table_vol_domain_and_flag():
    vol = LocalVolSpec("table", table_x=(50.0, 150.0), table_a=(400.0, 400.0))
    S = gbm(seed=1, sigma=0.6)
    if S.scalar.max() > 150 or S.scalar.min() < 50:
        with pytest.raises(TableDomainError):
            diffusion_enhance(S, vol)
    flat = LocalVolSpec("table", table_x=(90.0, 95.0), table_a=(400.0, 400.0), extrapolate=True)
    assert extrapolation_used(S, flat)
    with pytest.raises(TableDomainError):
        diffusion_enhance(S, LocalVolSpec("table", table_x=(90.0, 95.0), table_a=(1.0, 1.0)))


def test_ellipticity_floor():
    vol = LocalVolSpec("cev", sigma=0.2, beta=0.5, floor=10.0)
    with pytest.raises(EllipticityError):
        diffusion_enhance(gbm(), vol)


def test_realized_bracket_smooth_path():
    n = 2**10
    g = TimeGrid.uniform(1.0, n)
    rb = realized_bracket(SampledPath(g, g.times**2))
    assert rb.at(0.0, 1.0).item() <= 2 * g.mesh


def test_realized_bracket_gbm_log_mean():
    n, seeds = 2**14, 500
    g = TimeGrid.uniform(1.0, n)
    est = np.array([realized_bracket(SampledPath(g, np.log(gbm_path(100.0, 0.05, 0.2, g, 7, i).scalar)))
                    .at(0.0, 1.0).item() for i in range(seeds)])
    se = est.std(ddof=1) / np.sqrt(seeds)
    assert abs(est.mean() - 0.04) < 3 * se


def test_realized_bracket_deceptive_log_path():
    spec = DeceptiveSpec(sigma1=0.2, sigma2=0.3)
    st = deceptive_log_stats(spec, 2**14, 11, 500)
    qv = st["realized_bracket"]
    assert abs(qv.mean() - 0.09) < 3 * qv.std(ddof=1) / np.sqrt(qv.size)


def test_realized_bracket_refines_consistently():
    n = 2**12
    g = TimeGrid.uniform(1.0, n)
    coarse = g.subgrid(g.dyadic_indices(1))
    band = 0.04 * np.sqrt(2.0 / (n // 2))  # sd of the coarse estimate
    ok = 0
    for i in range(200):
        lp = SampledPath(g, np.log(gbm_path(100.0, 0.0, 0.2, g, 8, i).scalar))
        fine_est = realized_bracket(lp).at(0.0, 1.0).item()
        coarse_est = realized_bracket(SampledPath(coarse, lp.scalar[::2])).at(0.0, 1.0).item()
        ok += abs(fine_est - coarse_est) < 3 * band
    assert ok / 200 >= 0.95


def test_realized_bracket_needs_nested_grid():
    S = gbm(64)
    with pytest.raises(GridError):
        realized_bracket(S, TimeGrid(np.array([0.0, 0.3, 1.0])))
    rb = realized_bracket(S, S.grid.subgrid(S.grid.dyadic_indices(3)))
    assert is_additive(rb)


def test_bracket_diff_examples():
    S = gbm(128, seed=2)
    x = SampledPath(S.grid, np.exp(-0.05 * S.times) * S.scalar)
    a = diffusion_enhance(x, LocalVolSpec("constant", sigma=0.3))
    b = diffusion_enhance(x, LocalVolSpec("constant", sigma=0.2))
    d = bracket_diff(a, b)
    assert d.at(0.25, 0.75).item() == pytest.approx(0.05 * 0.5, rel=1e-12)
    assert np.all(bracket_diff(a, a).dense() == 0.0)
    assert np.allclose(bracket_diff(b, a).dense(), -d.dense())
    bs = diffusion_enhance(x, LocalVolSpec("black_scholes", sigma=0.2))
    dens = 0.04 * x.scalar**2 - 0.09
    quad = np.sum(0.5 * np.diff(x.times) * (dens[1:] + dens[:-1]))
    assert bracket_diff(bs, a).at(0.0, 1.0).item() == pytest.approx(quad, rel=1e-12)
    with pytest.raises(ValueError):
        bracket_diff(a, diffusion_enhance(gbm(128, seed=3), LocalVolSpec("constant")))


def test_from_bracket_field_checks_additivity():
    g = TimeGrid.uniform(1.0, 4)
    t = g.times
    trace = SampledPath(g, t)
    with pytest.raises(ValueError, match="additive"):
        EnhancedPath.from_bracket_field(trace, TwoParamField(g, np.triu((t[None, :] - t[:, None]) ** 2)))
    ep = EnhancedPath.from_bracket_field(trace, TwoParamField(g, np.triu(t[None, :] - t[:, None])))
    assert ep.scalar_bracket()[-1] == 1.0


def test_enhanced_csv_round_trip(tmp_path):
    ep = diffusion_enhance(gbm(32, seed=4), LocalVolSpec("black_scholes", sigma=0.2), 0.05, "undiscounted")
    write_enhanced_csv(ep, tmp_path / "trace.csv", tmp_path / "bracket.csv")
    back = read_enhanced_csv(tmp_path / "trace.csv", tmp_path / "bracket.csv")
    assert np.allclose(back.bracket_path, ep.bracket_path, rtol=1e-15, atol=0)
    lines = (tmp_path / "bracket.csv").read_text().splitlines()
    (tmp_path / "bad.csv").write_text("\n".join(lines[:5]) + "\n")
    with pytest.raises(ValueError):
        read_enhanced_csv(tmp_path / "trace.csv", tmp_path / "bad.csv")
