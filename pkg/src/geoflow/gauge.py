"""DeTurck-type gauge vector fields relative to a background metric.

The difference tensor ``A = Gamma^g - Gamma^h`` is a genuine (2, 1) tensor.
Mixed covariant derivatives correct covariant slots with ``Gamma^g`` and
contravariant slots with ``Gamma^h``, which is the connection on
``T*M x id*TM`` induced by the identity map ``(M, g) -> (M, h)``.
"""

from __future__ import annotations

import numpy as np

from .curvature import _require_metric, covariant_derivative_array, laplacian_array
from .grid import FieldError, MetricField, TensorField, VectorFieldOnGrid, _dealias_array
from .params import FlowParams, ParamError


def _check_pair(g: MetricField, h: MetricField):
    _require_metric(g)
    _require_metric(h)
    if g.grid != h.grid:
        raise FieldError("g and h live on different grids")


def _gammas(g, h):
    return g.christoffel_values, h.christoffel_values


def difference_tensor(g: MetricField, h: MetricField) -> TensorField:
    _check_pair(g, h)
    gam_g, gam_h = _gammas(g, h)
    return TensorField(g.grid, 2, 1, _dealias_array(gam_g - gam_h, g.grid))


def mixed_covariant_derivative(F: TensorField, g: MetricField, h: MetricField) -> TensorField:
    _check_pair(g, h)
    gam_g, gam_h = _gammas(g, h)
    vals = covariant_derivative_array(F.values, F.p, F.q, gam_g, gam_h, g.grid)
    return TensorField(g.grid, F.p + 1, F.q, _dealias_array(vals, g.grid))


def deturck_arrays(g: MetricField, h: MetricField):
    """Return ``(V, Z, gamma_g, gamma_h)`` as raw arrays.

    ``V^c = g^{ab} A^c_ab`` and ``Z^c = g^{ma} g^{nb} (nabla nabla A)_{a b n m}^c``.
    """
    grid = g.grid
    gam_g, gam_h = _gammas(g, h)
    A = gam_g - gam_h
    ginv = g.inverse
    V = np.einsum("...ab,...abc->...c", ginv, A)
    # g^{-1} is parallel in the domain slots, so trace before the outer derivative
    dA = covariant_derivative_array(A, 2, 1, gam_g, gam_h, grid)
    B = np.einsum("...nb,...abnc->...ac", ginv, dA)
    dB = covariant_derivative_array(B, 1, 1, gam_g, gam_h, grid)
    Z = np.einsum("...ma,...amc->...c", ginv, dB)
    return V, Z, gam_g, gam_h


def deturck_array(g: MetricField, h: MetricField, params: FlowParams) -> np.ndarray:
    k = params.k
    alpha, beta = params.weights
    if k == 0 and beta != 0:
        raise ParamError("k = 0 admits only beta = 0 in the gauge field")
    grid = g.grid
    V, Z, gam_g, gam_h = deturck_arrays(g, h)
    ginv = g.inverse
    out = np.zeros_like(V)
    if alpha != 0:
        lap_v = V
        for _ in range(k):
            lap_v = laplacian_array(lap_v, 0, 1, ginv, gam_g, gam_h, grid)
        out = out + alpha * lap_v
    if beta != 0:
        lap_z = Z
        for _ in range(k - 1):
            lap_z = laplacian_array(lap_z, 0, 1, ginv, gam_g, gam_h, grid)
        out = out + beta * lap_z
    return ((-1) ** k * params.c) * out


def deturck_field(g: MetricField, h: MetricField, params: FlowParams) -> VectorFieldOnGrid:
    """Gauge field ``W = (-1)^k c (alpha Lap^k V + beta Lap^(k-1) Z)``.

    Laplacians are map Laplacians of the identity ``(M, g) -> (M, h)``.
    """
    _check_pair(g, h)
    if params.n != g.grid.n:
        raise ParamError(f"params are for n={params.n}, grid has n={g.grid.n}")
    vals = deturck_array(g, h, params)
    return VectorFieldOnGrid(g.grid, _dealias_array(vals, g.grid))
