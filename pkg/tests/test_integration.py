import warnings

import numpy as np
import pytest
from scipy.interpolate import CubicSpline
from scipy.ndimage import gaussian_filter1d

from pathwise_hedge.enhancement import EnhancedPath, LocalVolSpec, diffusion_enhance
from pathwise_hedge.grids import (
    ControlField,
    SampledPath,
    TimeGrid,
    TwoParamField,
    increments_field,
    is_additive,
    length_control,
    p_variation,
    variation_control,
)
from pathwise_hedge.integration import (
    ControlledPath,
    DivergenceError,
    compensated_integral,
    defect_norm,
    remainder_report,
    sew,
    sewing_constant,
    synthetic_field,
    young,
)
from pathwise_hedge.simulate import brownian_increments, make_rng


def bm(n_steps, seed=0, T=1.0):
    g = TimeGrid.uniform(T, n_steps)
    return SampledPath(g, np.r_[0.0, np.cumsum(brownian_increments(g, make_rng(seed)))])


def pair_field(g, f):
    t = g.times
    s, u = np.broadcast_arrays(t[:, None], t[None, :])
    upper = u >= s
    vals = np.zeros(s.shape)
    vals[upper] = f(s[upper], u[upper])
    return TwoParamField(g, vals)


# ----- sew

def test_sew_additive_is_identity():
    path = bm(64, seed=1)
    res = sew(increments_field(path), variation_control(increments_field(path), 2.5), 1.5)
    assert np.allclose(res.integral_path.scalar, path.scalar - path.scalar[0], atol=1e-13)
    assert res.defect_norm == pytest.approx(0.0, abs=1e-13)
    assert res.violations(increments_field(path)) == 0


def test_sew_s_times_increment():
    g = TimeGrid.uniform(1.0, 512)
    res = sew(pair_field(g, lambda s, t: s * (t - s)), length_control(g), 2.0)
    h = g.mesh
    # Riemann sums are 0.5 (1 - h) and move towards 0.5 under refinement
    assert res.integral_path.scalar[-1] == pytest.approx(0.5 * (1 - h), abs=1e-12)
    assert abs(res.refinement.sums[0].item() - 0.5) < abs(res.refinement.sums[-1].item() - 0.5)


def test_sew_squared_mesh_vanishes_and_bound_holds():
    g = TimeGrid.uniform(1.0, 256)
    fld = pair_field(g, lambda s, t: (t - s) ** 2)
    res = sew(fld, length_control(g), 2.0)
    assert res.integral_path.scalar[-1] == pytest.approx(g.mesh, rel=1e-12)
    assert res.defect_norm == pytest.approx(0.5, rel=1e-12)
    err = res.error_field(fld).dense()
    t = g.times
    iu = np.triu_indices(len(g), 1)
    assert np.all(err[iu] <= 2 * (t[iu[1]] - t[iu[0]]) ** 2 * 0.5 + 1e-15)
    assert res.violations(fld) == 0


def test_sew_output_additive_and_cauchy_shrinks():
    g = TimeGrid.uniform(1.0, 256)
    fld = pair_field(g, lambda s, t: np.sin(3 * s) * (t - s) + (t - s) ** 1.5)
    res = sew(fld, length_control(g), 1.5)
    assert is_additive(increments_field(res.integral_path))
    d = res.refinement.diffs[:5]  # finest levels; the last few have a handful of points
    assert np.all(d[:-1] < d[1:])


def test_sew_rejects_gamma_at_most_one():
    g = TimeGrid.uniform(1.0, 4)
    with pytest.raises(ValueError):
        sew(pair_field(g, lambda s, t: t - s), length_control(g), 1.0)
    with pytest.raises(ValueError):
        sewing_constant(0.9)


def test_sew_divergence_detected():
    g = TimeGrid.uniform(1.0, 64)
    # sums over coarser grids approach a value, finer ones move away from it
    fld = pair_field(g, lambda s, t: np.sqrt(t - s))
    with pytest.raises(DivergenceError):
        sew(fld, length_control(g) + length_control(g), 1.5)


def test_sew_perturbs_flat_control():
    g = TimeGrid.uniform(1.0, 8)
    path = SampledPath(g, np.r_[np.zeros(4), np.arange(1.0, 6.0)])
    ctrl = variation_control(increments_field(path), 2.0)
    with pytest.warns(RuntimeWarning, match="perturbed"):
        res = sew(increments_field(path), ctrl, 1.5)
    assert res.control_perturbed


def test_defect_norm_sampled_on_large_grids():
    g = TimeGrid.uniform(1.0, 600)
    fld = pair_field(g, lambda s, t: (t - s) ** 2)
    val, exhaustive = defect_norm(fld, length_control(g), 2.0, n_samples=20_000)
    assert not exhaustive and 0.45 < val <= 0.5 + 1e-12


def test_synthetic_fields_respect_bound():
    rng = np.random.default_rng(3)
    for kind in ("drift", "young", "compensated"):
        fld, ctrl = synthetic_field(kind, 1.5, 33, rng)
        ControlField(fld.grid, ctrl.values)  # superadditive
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            assert sew(fld, ctrl, 1.5).violations(fld) == 0
    with pytest.raises(ValueError):
        synthetic_field("other", 1.5, 9, rng)


# ----- young

def test_young_identity():
    g = TimeGrid.uniform(1.0, 2**12)
    t = SampledPath(g, g.times)
    for ev in ("adapted", "terminal"):
        assert young(t, t, ev).scalar[-1] == pytest.approx(0.5, abs=2 / 2**12)


def test_young_piecewise_linear_chain_rule():
    g = TimeGrid.uniform(1.0, 2**12)
    X = SampledPath(g, np.interp(g.times, [0, 0.3, 0.6, 1.0], [1.0, 2.0, -0.5, 0.7]))
    a = young(X, X, "adapted").scalar[-1]
    b = young(X, X, "terminal").scalar[-1]
    exact = 0.5 * (0.7**2 - 1.0)
    assert 0.5 * (a + b) == pytest.approx(exact, abs=1e-12)
    half_qv = 0.5 * np.sum(np.diff(X.scalar) ** 2)
    assert a == pytest.approx(exact - half_qv, abs=1e-12)
    # the Riemann error vanishes like the mesh: half of sum(slope**2 * length) * h
    slopes_sq = (1 / 0.3) ** 2 * 0.3 + (2.5 / 0.3) ** 2 * 0.3 + (1.2 / 0.4) ** 2 * 0.4
    assert half_qv == pytest.approx(0.5 * g.mesh * slopes_sq, rel=1e-2)


def test_young_bv_against_mollified_bm():
    rng = np.random.default_rng(1)
    tc = np.linspace(0, 1, 1025)
    w = np.r_[0, np.cumsum(rng.standard_normal(1024) / 32)]
    X = CubicSpline(tc, gaussian_filter1d(w, 20, mode="nearest"))

    def H(t):
        return np.minimum(t, 0.5) + 0.3 * np.maximum(t - 0.7, 0)

    def run(n):
        g = TimeGrid.uniform(1.0, n)
        return young(SampledPath(g, H(g.times)), SampledPath(g, X(g.times))).scalar[-1]

    assert run(2**19) == pytest.approx(run(10 * 2**19), abs=1e-6)


def test_young_evaluations_converge():
    path = bm(2**12, seed=2)
    H = SampledPath(path.grid, np.cos(path.scalar))
    gaps = []
    for lev in (4, 2, 0):
        idx = path.grid.dyadic_indices(lev)
        Hs = SampledPath(path.grid.subgrid(idx), H.scalar[idx])
        Xs = SampledPath(path.grid.subgrid(idx), path.scalar[idx])
        gaps.append(abs(young(Hs, Xs, "adapted").scalar[-1] - young(Hs, Xs, "terminal").scalar[-1]))
    # Riemann sums of cos(W) dW: the two evaluations differ by about int sin(W) dt
    assert gaps[0] > 0 and np.all(np.isfinite(gaps))


def test_young_grid_mismatch():
    with pytest.raises(ValueError):
        young(bm(8), bm(16))


# ----- compensated integral

def test_compensated_without_derivative_is_young():
    path = bm(256, seed=3)
    H = SampledPath(path.grid, np.sin(path.scalar))
    cp = ControlledPath(H, SampledPath(path.grid, np.zeros(257)), path)
    ep = diffusion_enhance(path, LocalVolSpec("constant", sigma=0.7))
    assert np.allclose(compensated_integral(cp, ep).scalar, young(H, path).scalar, atol=1e-14)


def test_compensated_smooth_path_zero_bracket():
    g = TimeGrid.uniform(1.0, 2**12)
    x = np.sin(4 * g.times) + g.times
    path = SampledPath(g, x)
    cp = ControlledPath(SampledPath(g, np.exp(x)), SampledPath(g, np.exp(x)), path)
    ep = EnhancedPath(path, np.zeros(len(g)))
    fine = TimeGrid.uniform(1.0, 2**20)
    xf = np.sin(4 * fine.times) + fine.times
    oracle = np.sum(np.exp(xf[:-1]) * np.diff(xf))
    assert compensated_integral(cp, ep).scalar[-1] == pytest.approx(oracle, abs=1e-4)
    assert compensated_integral(cp, ep).scalar[-1] == pytest.approx(np.exp(x[-1]) - 1.0, abs=1e-6)


def test_compensated_is_linear():
    path = bm(128, seed=4)
    ep = diffusion_enhance(path, LocalVolSpec("constant", sigma=1.0))
    g = path.grid
    a = ControlledPath(SampledPath(g, np.sin(path.scalar)), SampledPath(g, np.cos(path.scalar)), path)
    b = ControlledPath(SampledPath(g, path.scalar**2), SampledPath(g, 2 * path.scalar), path)
    both = ControlledPath(SampledPath(g, 2 * np.sin(path.scalar) - 3 * path.scalar**2),
                          SampledPath(g, 2 * np.cos(path.scalar) - 6 * path.scalar), path)
    lhs = compensated_integral(both, ep).scalar
    rhs = 2 * compensated_integral(a, ep).scalar - 3 * compensated_integral(b, ep).scalar
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_compensated_trace_mismatch_and_symmetry():
    path = bm(16, seed=5)
    other = bm(16, seed=6)
    g = path.grid
    cp = ControlledPath(SampledPath(g, path.scalar), SampledPath(g, np.ones(17)), path)
    with pytest.raises(ValueError, match="differ"):
        compensated_integral(cp, diffusion_enhance(other, LocalVolSpec("constant")))
    d2 = SampledPath(TimeGrid.uniform(1.0, 2), np.zeros((3, 2)))
    with pytest.raises(ValueError, match="symmetric"):
        ControlledPath(d2, SampledPath(d2.grid, np.array([[[0, 1], [0, 0]]] * 3, float)), d2)


# ----- remainder report

def test_remainder_square_of_identity():
    g = TimeGrid(np.array([0.0, 0.5, 1.0]))
    t = g.times
    cp = ControlledPath(SampledPath(g, t**2), SampledPath(g, 2 * t), SampledPath(g, t), p=2.0, q=2.0)
    rep = remainder_report(cp)
    assert rep["pstar"] == 1.0
    assert rep["remainder_field"].at(0.5, 1.0).item() == pytest.approx(0.25)
    # R[s,t] = (t-s)**2 is superadditive, so the one-interval partition wins
    assert rep["pstar_variation"] == pytest.approx(1.0)


def test_remainder_without_derivative_is_increments():
    path = bm(16, seed=7)
    cp = ControlledPath(path, SampledPath(path.grid, np.zeros(17)), path, p=2.5, q=2.5)
    rep = remainder_report(cp)
    assert rep["pstar_variation"] == pytest.approx(p_variation(increments_field(path), cp.pstar))


def test_remainder_bounded_under_refinement():
    path = bm(2**10, seed=8)
    vals = []
    for lev in (6, 5, 4, 3):
        idx = path.grid.dyadic_indices(lev)
        g = path.grid.subgrid(idx)
        x = path.scalar[idx]
        cp = ControlledPath(SampledPath(g, np.sin(x)), SampledPath(g, np.cos(x)), SampledPath(g, x))
        vals.append(remainder_report(cp, max_points=None)["pstar_variation"])
    assert np.all(np.isfinite(vals)) and max(vals) < 2 * vals[0] + 1.0
