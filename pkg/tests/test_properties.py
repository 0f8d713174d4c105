"""Property-based checks of the invariants each module promises."""

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from geoflow import jets as J
from geoflow.curvature import ansatz_tensor, lie_derivative, ricci_scalar
from geoflow.flow import integrate_adjusted, mode_coefficient
from geoflow.gauge import deturck_field
from geoflow.grid import (
    Grid,
    MetricField,
    TensorField,
    VectorFieldOnGrid,
    interpolate,
    l2_inner,
    spectral_derivative,
)
from geoflow.params import FlowParams
from geoflow.symbol import (
    SymbolInput,
    Verdict,
    brute_force_min,
    check_strong_ellipticity,
    combined_symbol,
    reduced_symbol,
    sym_basis,
    symbol_matrix,
)

from conftest import band_limited, random_metric

seeds = st.integers(0, 2**32 - 1)
FAST = settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
SLOW = settings(max_examples=5, deadline=None, suppress_health_check=[HealthCheck.too_slow])


def _params(draw_a, draw_b, n, k, c=1.0):
    return FlowParams(n, k, draw_a, 0.0 if k == 0 else draw_b, c)


# ---------------------------------------------------------------- grid fields

@FAST
@given(seed=seeds, n=st.integers(2, 4), value=st.floats(-1e3, 1e3))
def test_derivative_of_constant_vanishes(seed, n, value):
    grid = Grid(n, 8)
    F = TensorField(grid, 1, 0, np.full(grid.shape + (n,), value))
    for a in range(n):
        assert np.abs(spectral_derivative(F, a).values).max() <= 1e-13


@FAST
@given(seed=seeds, n=st.integers(2, 3))
def test_partial_derivatives_commute(seed, n):
    grid = Grid(n, 12)
    F = TensorField(grid, 0, 0, band_limited(grid, np.random.default_rng(seed), 4))
    for a in range(n):
        for b in range(a + 1, n):
            ab = spectral_derivative(spectral_derivative(F, a), b).values
            ba = spectral_derivative(spectral_derivative(F, b), a).values
            assert np.abs(ab - ba).max() <= 1e-12 * max(1.0, np.abs(ab).max())


@FAST
@given(seed=seeds)
def test_l2_inner_symmetric_positive(seed):
    rng = np.random.default_rng(seed)
    grid = Grid(3, 8)
    h = random_metric(grid, rng)
    F = TensorField(grid, 2, 0, band_limited(grid, rng, 2, (3, 3)))
    G = TensorField(grid, 2, 0, band_limited(grid, rng, 2, (3, 3)))
    a, b = l2_inner(F, G, h), l2_inner(G, F, h)
    assert abs(a - b) <= 1e-10 * max(1.0, abs(a))
    assert l2_inner(F, F, h) > 0


@FAST
@given(seed=seeds, n=st.integers(2, 3))
def test_interpolation_exact_at_nodes(seed, n):
    rng = np.random.default_rng(seed)
    grid = Grid(n, 8)
    F = TensorField(grid, 0, 1, rng.standard_normal(grid.shape + (n,)))
    idx = rng.integers(0, 8, (10, n))
    got = interpolate(F, idx * grid.spacing)
    assert np.array_equal(got, F.values[tuple(idx.T)])


# ---------------------------------------------------------------- curvature and gauge

@SLOW
@given(seed=seeds, a=st.floats(-1, 1), b=st.floats(-1, 1), k=st.integers(0, 2))
def test_ansatz_symmetric(seed, a, b, k):
    g = random_metric(Grid(3, 8), np.random.default_rng(seed))
    T = ansatz_tensor(g, _params(a, b, 3, k)).values
    assert np.abs(T - np.swapaxes(T, -1, -2)).max() <= 1e-10


@SLOW
@given(seed=seeds, shift=st.tuples(*[st.integers(0, 7)] * 3))
def test_translation_equivariance(seed, shift):
    rng = np.random.default_rng(seed)
    grid = Grid(3, 8)
    g = random_metric(grid, rng, band=3)
    gs = MetricField(grid, np.roll(g.values, shift, axis=(0, 1, 2)))
    p = FlowParams.bach_type(3)
    roll = lambda v: np.roll(v, shift, axis=(0, 1, 2))
    assert np.array_equal(roll(ansatz_tensor(g, p).values), ansatz_tensor(gs, p).values)
    flat = MetricField.flat(grid)
    assert np.array_equal(roll(deturck_field(g, flat, p).values), deturck_field(gs, flat, p).values)


@SLOW
@given(seed=seeds, lam=st.floats(0.2, 5.0))
def test_curvature_scaling(seed, lam):
    g = random_metric(Grid(3, 8), np.random.default_rng(seed))
    a, b = ricci_scalar(g), ricci_scalar(MetricField(g.grid, lam * g.values))
    assert np.abs(a.ricci.values - b.ricci.values).max() <= 1e-10 * np.abs(a.ricci.values).max()
    assert np.abs(a.scalar.values / lam - b.scalar.values).max() <= 1e-10 * np.abs(a.scalar.values).max() / lam


@FAST
@given(seed=seeds, s=st.floats(-3, 3), t=st.floats(-3, 3))
def test_lie_derivative_linear(seed, s, t):
    rng = np.random.default_rng(seed)
    grid = Grid(3, 8)
    g = random_metric(grid, rng)
    W1, W2 = band_limited(grid, rng, 2, (3,)), band_limited(grid, rng, 2, (3,))
    L = lambda W: lie_derivative(VectorFieldOnGrid(grid, W), g).values
    lhs, rhs = L(s * W1 + t * W2), s * L(W1) + t * L(W2)
    assert np.abs(lhs - rhs).max() <= 1e-12 * max(1.0, np.abs(lhs).max())


# ---------------------------------------------------------------- symbols

def _input(rng, n, k, a, b, c=1.0):
    A = rng.standard_normal((n, n))
    M = rng.standard_normal((n, n))
    return SymbolInput(FlowParams(n, k, a, b if k else 0.0, c), rng.standard_normal(n), A + A.T,
                       M @ M.T + n * np.eye(n))


def _scale(inp):
    p, G = inp.params, np.linalg.inv(inp.metric)
    s = inp.xi @ G @ inp.xi
    return p.c * s ** (p.k + 1) * np.einsum("ij,jk,kl,li->", G, inp.eta, G, inp.eta)


@FAST
@given(seed=seeds, n=st.integers(2, 5), k=st.integers(0, 3), a=st.floats(-2, 2), b=st.floats(-2, 2),
       t=st.floats(0.1, 10), u=st.floats(-10, 10))
def test_symbol_homogeneity(seed, n, k, a, b, t, u):
    inp = _input(np.random.default_rng(seed), n, k, a, b)
    scaled = combined_symbol(SymbolInput(inp.params, t * inp.xi, u * inp.eta, inp.metric))
    f = t ** (2 * k + 2) * u * u
    assert abs(scaled - f * combined_symbol(inp)) <= 1e-12 * f * _scale(inp)


@FAST
@given(seed=seeds, n=st.integers(2, 5), k=st.integers(0, 3), a=st.floats(-2, 2), b=st.floats(-2, 2),
       c=st.floats(0.1, 3))
def test_reduced_form(seed, n, k, a, b, c):
    inp = _input(np.random.default_rng(seed), n, k, a, b, c)
    assert abs(combined_symbol(inp) - reduced_symbol(inp)) <= 1e-12 * _scale(inp)


@SLOW
@given(n=st.integers(2, 5), offset=st.sampled_from([-0.05, -0.01, 0.01, 0.05, 0.3]))
def test_verdict_agrees_with_brute_force(n, offset):
    a = -1.0 / (2 * (n - 1)) + offset
    p = FlowParams(n, 1, a, 0.2, 1.0)
    elliptic = check_strong_ellipticity(p).verdict == Verdict.STRONGLY_ELLIPTIC
    assert elliptic == (brute_force_min(p) > 0)


@FAST
@given(seed=seeds, n=st.integers(2, 5), k=st.integers(0, 3), a=st.floats(-0.2, 2), b=st.floats(-2, 2))
def test_symmetric_part_lower_bound(seed, n, k, a, b):
    p = FlowParams(n, k, a, b if k else 0.0, 1.0)
    rep = check_strong_ellipticity(p)
    if rep.verdict != Verdict.STRONGLY_ELLIPTIC:
        return
    xi = np.random.default_rng(seed).standard_normal((20, n))
    S = symbol_matrix(p, xi)
    low = np.linalg.eigvalsh(0.5 * (S + np.swapaxes(S, -1, -2))).min(axis=-1)
    assert np.all(low >= rep.lam * np.sum(xi * xi, axis=-1) ** (k + 1) - 1e-5)


# ---------------------------------------------------------------- jets

@FAST
@given(seed=seeds, n=st.integers(1, 3), order=st.integers(1, 5))
def test_leibniz(seed, n, order):
    rng = np.random.default_rng(seed)
    f, g = J.random_jet(rng, (), n, order), J.random_jet(rng, (), n, order)
    for m in range(n):
        lhs = J.jderiv(J.jmul(",->", f, g, n), m, n)
        rhs = J.jmul(",->", J.jderiv(f, m, n), g, n) + J.jmul(",->", f, J.jderiv(g, m, n), n)
        assert np.abs(lhs - rhs).max() <= 1e-13


@FAST
@given(seed=seeds)
def test_flat_affine_commutator_vanishes(seed):
    rng = np.random.default_rng(seed)
    n, d = 3, 4
    L = np.eye(n) + 0.3 * rng.uniform(-1, 1, (n, n))
    phi = J.JetMap(n, L @ J.JetMap.identity(n, d).coeffs)
    flat = J.JetMetric(n, J.jconst(np.eye(n), n, d))
    g = J.JetMetric(n, J.jconst(np.eye(n) + 0.2 * np.diag(rng.uniform(0, 1, n)), n, d))
    gbar = J.pullback_metric(g, phi)
    F = J.random_tensor(rng, n, d, ("Ml", "Nu"))
    dd = J.map_covariant_derivative(J.map_covariant_derivative(F, phi, gbar, flat), phi, gbar, flat)
    assert np.abs(dd.coeffs - dd.transpose((0, 1, 3, 2)).coeffs).max() == 0.0


# ---------------------------------------------------------------- flow

@SLOW
@given(a=st.floats(-0.2, 1.0), b=st.floats(-0.5, 0.5), which=st.integers(0, 5))
def test_linear_regime_modes_decay_at_eigen_rates(a, b, which):
    p = FlowParams(3, 1, a, b, 1.0)
    grid = Grid(3, 8)
    xi = np.array([1, 1, 0])
    S = symbol_matrix(p, xi)
    lam, vecs = np.linalg.eigh(0.5 * (S + S.T))
    B = sym_basis(3)
    eta = np.einsum("l,lij->ij", vecs[:, which], B)
    eps = 1e-5
    g0 = MetricField(grid, np.eye(3) + eps * np.cos(grid.coords @ xi)[..., None, None] * eta)
    dt = 0.25 / lam[which]
    run = integrate_adjusted(g0, MetricField.flat(grid), p, dt, 4, record_gauge=False)
    amps = np.array([np.linalg.norm(mode_coefficient(s.g.values - np.eye(3), grid, xi)) for s in run.states])
    assert np.all(np.diff(amps) <= 0)
    rate = -np.polyfit(run.times, np.log(amps), 1)[0]
    assert abs(rate - lam[which]) <= 0.05 * lam[which]
