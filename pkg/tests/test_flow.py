import numpy as np
import pytest
from scipy.linalg import expm

from geoflow.curvature import ansatz_tensor
from geoflow.flow import (
    AdjustedFlowIntegrator,
    DiffeoField,
    FlowHalted,
    FlowState,
    choose_dt,
    energy,
    energy_monitor,
    integrate_adjusted,
    mode_coefficient,
    pullback_metric,
    reconstruct_pure_flow,
    step_diffeo,
)
from geoflow.grid import FieldError, Grid, MetricField, VectorFieldOnGrid, l2_norm, TensorField
from geoflow.params import FlowParams, ParamError
from geoflow.symbol import sym_basis, symbol_matrix

from conftest import band_limited, random_metric

ELLIPTIC = FlowParams(3, 1, 0.2, 0.1, 1.0)


def test_flat_fixed_point():
    grid = Grid(3, 8)
    flat = MetricField.flat(grid)
    integ = AdjustedFlowIntegrator(flat, ELLIPTIC, 0.3)
    state = FlowState(0.0, flat)
    for _ in range(100):
        state = integ.step(state)
    assert np.abs(state.g.values - np.eye(3)).max() <= 1e-12


def test_constant_rescaling_is_stationary():
    grid = Grid(3, 8)
    g0 = MetricField.flat(grid, 1 + 1e-3)
    run = integrate_adjusted(g0, MetricField.flat(grid), ELLIPTIC, 0.1, 10)
    assert np.array_equal(run.states[-1].g.values, g0.values)


def test_single_mode_matches_matrix_exponential(rng):
    grid = Grid(3, 8)
    flat = MetricField.flat(grid)
    xi = np.array([1, 0, 0])
    A = rng.standard_normal((3, 3))
    eta = (A + A.T) / np.linalg.norm(A + A.T)
    eps = 1e-5
    phase = np.cos(grid.coords @ xi)[..., None, None]
    g0 = MetricField(grid, np.eye(3) + eps * phase * eta)
    dt = 0.1
    run = integrate_adjusted(g0, flat, ELLIPTIC, dt, 20, record_gauge=False)
    B = sym_basis(3)
    c0 = np.einsum("lij,ij->l", B, eps * eta)
    S = symbol_matrix(ELLIPTIC, xi)
    amps = []
    for st in run.states:
        got = np.einsum("lij,ij->l", B, mode_coefficient(st.g.values - np.eye(3), grid, xi).real)
        ref = expm(-st.t * S) @ c0
        assert np.linalg.norm(got - ref) <= 0.02 * np.linalg.norm(ref)
        amps.append(np.linalg.norm(got))
    assert np.all(np.diff(amps) <= 1e-12 * amps[0])


def test_integrator_guards():
    grid = Grid(3, 8)
    flat = MetricField.flat(grid)
    bad = FlowParams(3, 1, -0.4, 0.0, 1.0)
    with pytest.raises(ParamError):
        AdjustedFlowIntegrator(flat, bad, 0.1)
    with pytest.warns(RuntimeWarning):
        AdjustedFlowIntegrator(flat, bad, 0.1, allow_unstable=True)
    with pytest.raises(ParamError):
        AdjustedFlowIntegrator(flat, ELLIPTIC, 0.0)
    with pytest.raises(FieldError):
        AdjustedFlowIntegrator(random_metric(grid, np.random.default_rng(0)), ELLIPTIC, 0.1)
    with pytest.raises(ParamError):
        FlowState(-1.0, flat)


def test_halting(monkeypatch):
    grid = Grid(3, 8)
    flat = MetricField.flat(grid)
    integ = AdjustedFlowIntegrator(flat, ELLIPTIC, 0.1)
    u = np.zeros(grid.rfft_wavevectors.shape[:-1] + (6,), dtype=complex)
    u[(0,) * 3 + (0,)] = -2.0 * grid.N ** 3  # constant shift of g_11 by -2
    with pytest.raises(FlowHalted, match="positive|degenerate|singular"):
        integ._metric(u, 0.5)
    u[(0,) * 3 + (0,)] = np.nan
    with pytest.raises(FlowHalted, match="non-finite"):
        integ._metric(u, 0.5)

    calls = {"n": 0}
    orig = AdjustedFlowIntegrator.step

    def failing(self, state):
        calls["n"] += 1
        if calls["n"] == 3:
            raise FlowHalted(state.t + self.dt, "metric lost positivity")
        return orig(self, state)

    monkeypatch.setattr(AdjustedFlowIntegrator, "step", failing)
    run = integrate_adjusted(flat, flat, ELLIPTIC, 0.1, 10)
    assert run.halted is not None and len(run.states) == 3


def test_choose_dt():
    grid = Grid(3, 16)
    dt = choose_dt(ELLIPTIC, grid, 1e-5)
    assert dt > 0 and dt == choose_dt(ELLIPTIC, grid, 1e-3)
    assert choose_dt(ELLIPTIC, grid, 1e-1) < dt
    with pytest.raises(ParamError):
        choose_dt(ELLIPTIC, grid, 1e-5, C_dt=0)


# ---------------------------------------------------------------- diffeomorphisms

def test_step_diffeo_trivial_fields(rng):
    grid = Grid(3, 8)
    phi = DiffeoField(VectorFieldOnGrid(grid, 0.05 * band_limited(grid, rng, 1, (3,))))
    zero = VectorFieldOnGrid(grid, np.zeros(grid.shape + (3,)))
    assert np.array_equal(step_diffeo(phi, zero, 0.3).displacement.values, phi.displacement.values)
    v = np.array([0.25, -0.5, 1.0])
    W = VectorFieldOnGrid(grid, np.broadcast_to(v, grid.shape + (3,)).copy())
    ident = DiffeoField.identity(grid)
    out = step_diffeo(step_diffeo(ident, W, 0.1), W, 0.1)
    assert np.abs(out.displacement.values + 0.2 * v).max() <= 1e-15
    with pytest.raises(ParamError):
        step_diffeo(ident, W, 0.0)


def test_step_diffeo_fourth_order():
    grid = Grid(2, 16)
    x = grid.coords
    W = np.zeros(grid.shape + (2,))
    W[..., 0] = np.sin(x[..., 0])
    Wf = VectorFieldOnGrid(grid, W)
    T = 1.0
    x0 = x[..., 0]
    exact = 2 * np.arctan(np.tan(x0 / 2) * np.exp(-T))
    exact = np.where(np.isclose(x0, np.pi), np.pi, exact)
    errs = []
    for steps in (5, 10, 20):
        phi = DiffeoField.identity(grid)
        for _ in range(steps):
            phi = step_diffeo(phi, Wf, T / steps)
        pos = x0 + phi.displacement.values[..., 0]
        errs.append(np.abs((pos - exact + np.pi) % (2 * np.pi) - np.pi).max())
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert orders.min() >= 3.9


def test_degenerate_diffeo_rejected():
    grid = Grid(2, 8)
    x = grid.coords
    disp = np.zeros(grid.shape + (2,))
    disp[..., 0] = -1.5 * np.sin(x[..., 0])
    with pytest.raises(FieldError, match="degenerate"):
        DiffeoField(VectorFieldOnGrid(grid, disp))


def test_pullback_identity_and_translation(rng, grid3):
    g = random_metric(grid3, rng, band=4)
    assert np.array_equal(pullback_metric(g, DiffeoField.identity(grid3)).values, g.values)
    cells = np.array([2, 5, 11])
    phi = DiffeoField.translation(grid3, cells * grid3.spacing)
    out = pullback_metric(g, phi).values
    assert np.array_equal(out, np.roll(g.values, -cells, axis=(0, 1, 2)))


def test_linearized_pullback(rng):
    grid = Grid(3, 16)
    v = band_limited(grid, rng, 2, (3,))
    v *= 1e-2 / np.abs(v).max()
    phi = DiffeoField(VectorFieldOnGrid(grid, v))
    out = pullback_metric(MetricField.flat(grid), phi).values
    from geoflow.grid import _grad_array

    dv = _grad_array(v, grid)  # [..., a, i] = d_i v^a
    lin = np.eye(3) + dv + np.swapaxes(dv, -1, -2)
    assert np.abs(out - lin).max() <= 1e-3


# ---------------------------------------------------------------- pure flow and energy

def _small_run(params, steps=4, dt=0.1, allow_unstable=False):
    grid = Grid(3, 8)
    rng = np.random.default_rng(4)
    g0 = MetricField(grid, np.eye(3) + 1e-4 * random_metric(grid, rng).values - 1e-4 * np.eye(3))
    return integrate_adjusted(g0, MetricField.flat(grid), params, dt, steps, allow_unstable=allow_unstable)


def test_reconstruct_without_gauge_is_identity():
    params = FlowParams(3, 1, 0.2, 0.1, 1.0, alpha=0.0, beta=0.0)
    with pytest.warns(RuntimeWarning):
        run = _small_run(params, allow_unstable=True)
    h = run.h
    pure = reconstruct_pure_flow(run, h, params)
    for a, b in zip(pure.states, run.states):
        assert np.array_equal(a.g.values, b.g.values)
    times = run.times
    gs = np.stack([s.g.values for s in run.states])
    dg = np.gradient(gs, times, axis=0, edge_order=2)
    direct = [l2_norm(TensorField(h.grid, 2, 0, dg[i] - ansatz_tensor(s.g, params).values), h)
              for i, s in enumerate(run.states)]
    assert np.abs(pure.residuals - direct).max() <= 1e-10 * max(direct)


def test_reconstruct_with_translated_start():
    run = _small_run(ELLIPTIC)
    grid = run.h.grid
    base = reconstruct_pure_flow(run, run.h, ELLIPTIC)
    shifted = reconstruct_pure_flow(run, run.h, ELLIPTIC, DiffeoField.translation(grid, 3 * grid.spacing * np.ones(3)))
    assert np.allclose(shifted.residuals, base.residuals, rtol=1e-9, atol=1e-15)
    with pytest.raises(ParamError):
        reconstruct_pure_flow(_small_run(ELLIPTIC, steps=1), run.h, ELLIPTIC)


def test_energy_plancherel():
    grid = Grid(3, 8)
    E = np.array([[1.0, 0.5, 0.0], [0.5, -2.0, 0.0], [0.0, 0.0, 0.3]])
    w = np.cos(2 * grid.coords[..., 1])[..., None, None] * E
    expected = (2 * np.pi) ** 3 / 2 * np.sum(E * E)
    assert energy(w, grid, 0) == pytest.approx(2 * expected, rel=1e-13)
    assert energy(w, grid, 2) == pytest.approx(expected * (1 + 16), rel=1e-13)


def test_energy_monitor():
    run = _small_run(ELLIPTIC)
    same = energy_monitor(run.states, run.states, run.h, 2)
    assert np.all(same.energy == 0) and same.K_hat == 0.0
    other = _small_run(FlowParams(3, 1, 0.3, 0.1, 1.0))
    series = energy_monitor(run.states, other.states, run.h, 2)
    assert series.energy[0] == 0 and np.all(np.isnan(series.rates))
    with pytest.raises(ParamError):
        energy_monitor(run.states, other.states[:-1], run.h, 2)
