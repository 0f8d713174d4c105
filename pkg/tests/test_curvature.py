import numpy as np
import pytest

from geoflow.curvature import (
    ansatz_tensor,
    christoffel,
    lie_derivative,
    ricci_scalar,
    rough_laplacian_power,
)
from geoflow.flow import DiffeoField, pullback_metric
from geoflow.grid import FieldError, Grid, MetricField, TensorField, VectorFieldOnGrid, _grad_array
from geoflow.params import FlowParams, ParamError
from geoflow.symbol import apply_symbol

from conftest import band_limited, random_metric


def conformal(grid, amp=0.05):
    x = grid.coords
    f = amp * (np.sin(x[..., 0]) + np.cos(x[..., 1]) + 0.5 * np.sin(x[..., 0] + x[..., 2]))
    df = np.stack([
        amp * (np.cos(x[..., 0]) + 0.5 * np.cos(x[..., 0] + x[..., 2])),
        -amp * np.sin(x[..., 1]),
        amp * 0.5 * np.cos(x[..., 0] + x[..., 2]),
    ], axis=-1)
    lap = -amp * (np.sin(x[..., 0]) + np.cos(x[..., 1]) + np.sin(x[..., 0] + x[..., 2]))
    g = MetricField(grid, np.exp(2 * f)[..., None, None] * np.eye(grid.n))
    return g, f, df, lap


def test_flat_metric_has_no_curvature():
    g = MetricField.flat(Grid(3, 8))
    pack = ricci_scalar(g)
    assert np.abs(pack.christoffel.values).max() == 0
    assert np.abs(pack.ricci.values).max() == 0
    assert np.abs(pack.scalar.values).max() == 0


def test_conformal_christoffel_closed_form():
    grid = Grid(3, 24)
    g, f, df, _ = conformal(grid)
    n = 3
    I = np.eye(n)
    # Gamma[a, b, c] = Gamma^c_ab
    expected = (np.einsum("ca,...b->...abc", I, df) + np.einsum("cb,...a->...abc", I, df)
                - np.einsum("ab,...c->...abc", I, df))
    got = christoffel(g).values
    assert np.abs(got - expected).max() < 1e-8


def test_conformal_scalar_curvature_closed_form():
    grid = Grid(3, 24)
    g, f, df, lap = conformal(grid)
    n = 3
    expected = -2 * (n - 1) * np.exp(-2 * f) * (lap + 0.5 * (n - 2) * np.sum(df * df, axis=-1))
    got = ricci_scalar(g).scalar.values
    assert np.abs(got - expected).max() < 1e-7


def _fd8(f, axis, h):
    c = [4 / 5, -1 / 5, 4 / 105, -1 / 280]
    return sum(cj * (np.roll(f, -(j + 1), axis=axis) - np.roll(f, j + 1, axis=axis)) for j, cj in enumerate(c)) / h


def test_christoffel_against_finite_difference_formula():
    grid = Grid(3, 32)
    x = grid.coords
    vals = np.broadcast_to(np.eye(3), grid.shape + (3, 3)).copy()
    vals[..., 0, 0] = 1 + 0.2 * np.sin(x[..., 1])
    g = MetricField(grid, vals)
    h = grid.spacing
    dg = np.stack([_fd8(vals, a, h) for a in range(3)], axis=-1)  # dg[..., i, j, m]
    ginv = np.linalg.inv(vals)
    expected = np.zeros(grid.shape + (3, 3, 3))
    for a in range(3):
        for b in range(3):
            for c in range(3):
                for d in range(3):
                    expected[..., a, b, c] += 0.5 * ginv[..., c, d] * (
                        dg[..., d, b, a] + dg[..., a, d, b] - dg[..., a, b, d])
    assert np.abs(christoffel(g).values - expected).max() < 1e-6


def test_curvature_pack_symmetries(rng, grid3):
    pack = ricci_scalar(random_metric(grid3, rng))
    G = pack.christoffel.values
    assert np.abs(G - np.swapaxes(G, -3, -2)).max() <= 1e-12
    R = pack.ricci.values
    assert np.abs(R - np.swapaxes(R, -1, -2)).max() <= 1e-10


def test_singular_metric_rejected():
    grid = Grid(2, 8)
    vals = np.broadcast_to(np.eye(2), grid.shape + (2, 2)).copy()
    vals[2, 2] = 0.0
    with pytest.raises(FieldError, match=r"\(2, 2\)"):
        christoffel(MetricField(grid, vals))


def test_scaling_behaviour(rng, grid3):
    g = random_metric(grid3, rng)
    lam = 2.5
    a, b = ricci_scalar(g), ricci_scalar(MetricField(grid3, lam * g.values))
    scale = np.abs(a.ricci.values).max()
    assert np.abs(a.ricci.values - b.ricci.values).max() <= 1e-10 * scale
    assert np.abs(a.scalar.values / lam - b.scalar.values).max() <= 1e-10 * np.abs(a.scalar.values).max()


def test_rough_laplacian_examples(rng):
    grid = Grid(3, 16)
    flat = MetricField.flat(grid)
    x = grid.coords
    F = TensorField(grid, 0, 0, np.cos(2 * x[..., 0]))
    assert rough_laplacian_power(F, flat, 0) is not F
    assert np.array_equal(rough_laplacian_power(F, flat, 0).values, F.values)
    assert np.abs(rough_laplacian_power(F, flat, 1).values + 4 * F.values).max() < 1e-12
    xi = np.array([1, 2, 0])
    eta = rng.standard_normal((3, 3))
    T = TensorField(grid, 2, 0, np.cos(x @ xi)[..., None, None] * (eta + eta.T))
    out = rough_laplacian_power(T, flat, 2).values
    assert np.abs(out - (xi @ xi) ** 2 * T.values).max() < 1e-10 * np.abs(out).max()
    with pytest.raises(ParamError):
        rough_laplacian_power(F, flat, -1)


def test_ansatz_flat_is_zero():
    g = MetricField.flat(Grid(3, 8))
    for p in (FlowParams(3, 1, 0.2, 0.1, 1.0), FlowParams(3, 2, -0.1, 0.3, 0.7), FlowParams(3, 0, 0.0, 0.0, 2.0)):
        assert np.abs(ansatz_tensor(g, p).values).max() == 0.0


def test_ansatz_k0_is_minus_two_ricci(rng, grid3):
    g = random_metric(grid3, rng)
    T = ansatz_tensor(g, FlowParams(3, 0, 0.0, 0.0, 2.0))
    assert np.array_equal(T.values, -2 * ricci_scalar(g).ricci.values)


def test_ansatz_rejects_b_for_k0():
    with pytest.raises(ParamError):
        FlowParams(3, 0, 0.0, 0.5, 1.0)


def test_ansatz_symmetric(rng, grid3):
    T = ansatz_tensor(random_metric(grid3, rng), FlowParams(3, 1, 0.3, 0.2, 1.0)).values
    assert np.abs(T - np.swapaxes(T, -1, -2)).max() <= 1e-10


def test_ansatz_linear_regime_matches_symbol(rng):
    grid = Grid(3, 16)
    params = FlowParams(3, 1, 0.3, 0.2, 1.0, alpha=0.0, beta=0.0)  # flow tensor alone
    xi = np.array([1, 1, 0])
    A = rng.standard_normal((3, 3))
    eta = A + A.T
    eps = 1e-5
    phase = np.cos(grid.coords @ xi)[..., None, None]
    T = ansatz_tensor(MetricField(grid, np.eye(3) + eps * phase * eta), params).values
    expected = -eps * phase * apply_symbol(params, xi.astype(float), eta)
    assert np.abs(T - expected).max() <= 1e-3 * np.abs(expected).max()


def test_ansatz_translation_equivariance_bit_exact(rng, grid3):
    g = random_metric(grid3, rng, band=4)
    params = FlowParams.bach_type(3)
    shift = (3, 7, 12)

    def roll(a):
        return np.roll(a, shift, axis=(0, 1, 2))

    T = ansatz_tensor(g, params).values
    Ts = ansatz_tensor(MetricField(grid3, roll(g.values)), params).values
    assert np.array_equal(roll(T), Ts)


def test_lie_derivative_examples(rng, grid3):
    g = random_metric(grid3, rng)
    zero = VectorFieldOnGrid(grid3, np.zeros(grid3.shape + (3,)))
    assert np.abs(lie_derivative(zero, g).values).max() == 0.0
    const = VectorFieldOnGrid(grid3, np.broadcast_to([0.3, -1.0, 2.0], grid3.shape + (3,)).copy())
    assert np.abs(lie_derivative(const, MetricField.flat(grid3)).values).max() == 0.0


def test_lie_derivative_linear_in_W(rng, grid3):
    g = random_metric(grid3, rng)
    W1 = band_limited(grid3, rng, 3, (3,))
    W2 = band_limited(grid3, rng, 3, (3,))
    L = lambda W: lie_derivative(VectorFieldOnGrid(grid3, W), g).values
    lhs = L(2.0 * W1 - 0.5 * W2)
    rhs = 2.0 * L(W1) - 0.5 * L(W2)
    assert np.abs(lhs - rhs).max() <= 1e-12 * np.abs(lhs).max()


def test_lie_derivative_flow_difference_quotient(rng):
    grid = Grid(3, 16)
    g = random_metric(grid, rng)
    W = 0.5 * band_limited(grid, rng, 2, (3,))
    t = 1e-5
    # second-order flow map of W: x + t W + t^2/2 (W . grad) W
    dW = _grad_array(W, grid)
    disp = t * W + 0.5 * t * t * np.einsum("...m,...am->...a", W, dW)
    phi = DiffeoField(VectorFieldOnGrid(grid, disp))
    quotient = (pullback_metric(g, phi).values - g.values) / t
    L = lie_derivative(VectorFieldOnGrid(grid, W), g).values
    assert np.abs(quotient - L).max() <= 1e-3 * np.abs(L).max()
