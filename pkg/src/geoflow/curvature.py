"""Christoffel symbols, Ricci/scalar curvature, Laplacian powers and the flow tensor.

Christoffel arrays are laid out as ``gamma[..., a, b, c] = Gamma^c_{ab}``.
Covariant derivatives append the new covariant slot after the existing
covariant slots, so ``(nabla F)_{i_1..i_p m}^{a_1..a_q}`` has the derivative
index ``m`` at tensor position ``p``.

With ``grid.dealias`` set, every internal spectral derivative drops modes
outside the 2/3 band and each public output is masked once more.
"""

from __future__ import annotations

from dataclasses import dataclass
from string import ascii_lowercase

import numpy as np

from .grid import (
    FieldError,
    Grid,
    MetricField,
    TensorField,
    VectorFieldOnGrid,
    _dealias_array,
    _deriv_array,
    _grad_array,
)
from .params import FlowParams, ParamError


@dataclass(frozen=True, eq=False)
class CurvaturePack:
    christoffel: TensorField
    ricci: TensorField
    scalar: TensorField


def _grad(values, grid):
    return _grad_array(values, grid, mask=grid.dealias)


def christoffel_array(g: np.ndarray, ginv: np.ndarray, grid: Grid) -> np.ndarray:
    """``Gamma^c_ab = 1/2 g^{cd}(d_a g_db + d_b g_ad - d_d g_ab)`` on raw arrays."""
    dg = _grad(g, grid)  # dg[..., x, y, m] = d_m g_xy
    first = np.einsum("...dba->...abd", dg)
    second = np.einsum("...adb->...abd", dg)
    lowered = first + second - dg
    return 0.5 * np.einsum("...cd,...abd->...abc", ginv, lowered)


def covariant_derivative_array(F: np.ndarray, p: int, q: int, gamma_low: np.ndarray,
                               gamma_up: np.ndarray, grid: Grid) -> np.ndarray:
    """Covariant derivative of a rank-(p, q) array.

    Covariant slots are corrected with ``gamma_low`` and contravariant slots with
    ``gamma_up``; passing the same symbols twice gives the Levi-Civita derivative.
    """
    r = p + q
    nd = grid.n
    npts = int(np.prod(grid.shape))
    out = _grad(F, grid)  # derivative slot last
    if r == 0:
        return out
    # correction matrices M[pt, z, (a, y)] acting on the contracted slot index z
    low = -np.transpose(gamma_low, tuple(range(nd)) + (nd + 2, nd + 1, nd)).reshape(npts, nd, nd * nd)
    up = np.transpose(gamma_up, tuple(range(nd)) + (nd, nd + 2, nd + 1)).reshape(npts, nd, nd * nd)
    rest = F.shape[nd:-1]
    for slot in range(r):
        ax = nd + slot
        Fm = np.moveaxis(F, ax, -1).reshape(npts, -1, nd)
        corr = np.matmul(Fm, low if slot < p else up)
        corr = corr.reshape(grid.shape + rest + (nd, nd))
        out = out + np.moveaxis(corr, -2, ax)
    return np.moveaxis(out, -1, nd + p)


def _trace_pair(T: np.ndarray, ginv: np.ndarray, i: int, j: int, grid: Grid) -> np.ndarray:
    r = T.ndim - grid.n
    letters = ascii_lowercase[:r]
    keep = "".join(ch for s, ch in enumerate(letters) if s not in (i, j))
    return np.einsum(f"...{letters[i]}{letters[j]},...{letters}->...{keep}", ginv, T)


def laplacian_array(F: np.ndarray, p: int, q: int, ginv: np.ndarray, gamma_low: np.ndarray,
                    gamma_up: np.ndarray, grid: Grid) -> np.ndarray:
    """Trace over the two new slots of a doubled covariant derivative."""
    d1 = covariant_derivative_array(F, p, q, gamma_low, gamma_up, grid)
    d2 = covariant_derivative_array(d1, p + 1, q, gamma_low, gamma_up, grid)
    return _trace_pair(d2, ginv, p, p + 1, grid)


def ricci_array(gamma: np.ndarray, grid: Grid) -> np.ndarray:
    """``Ric_ij = d_c G^c_ij - d_i G^c_cj + G^c_cd G^d_ij - G^c_id G^d_cj``."""
    mask = grid.dealias
    div = sum(_deriv_array(gamma[..., c], c, grid, mask) for c in range(grid.n))
    trace = np.einsum("...cjc->...j", gamma)
    dtrace = _grad_array(trace, grid, mask)  # [..., j, i] = d_i trace_j
    quad = np.einsum("...d,...ijd->...ij", trace, gamma)
    quad = quad - np.einsum("...idc,...cjd->...ij", gamma, gamma)
    ric = div - np.swapaxes(dtrace, -1, -2) + quad
    # d_i G^c_cj is symmetric only up to truncation error; keep the symmetric part
    return 0.5 * (ric + np.swapaxes(ric, -1, -2))


def _require_metric(g):
    if not isinstance(g, MetricField):
        raise FieldError("expected a MetricField")


def christoffel(g: MetricField) -> TensorField:
    """Christoffel symbols of ``g`` as a rank-(2, 1) field."""
    _require_metric(g)
    gam = g.christoffel_values
    return TensorField(g.grid, 2, 1, _dealias_array(gam, g.grid))


def ricci_scalar(g: MetricField) -> CurvaturePack:
    _require_metric(g)
    grid = g.grid
    gam = g.christoffel_values
    ric = ricci_array(gam, grid)
    scal = np.einsum("...ij,...ij->...", g.inverse, ric)
    return CurvaturePack(
        christoffel=TensorField(grid, 2, 1, _dealias_array(gam, grid)),
        ricci=TensorField(grid, 2, 0, _dealias_array(ric, grid)),
        scalar=TensorField(grid, 0, 0, _dealias_array(scal, grid)),
    )


def rough_laplacian_power(F: TensorField, g: MetricField, k: int) -> TensorField:
    """``k``-fold ``g^{ab} nabla_a nabla_b`` with the Levi-Civita connection of ``g``."""
    _require_metric(g)
    if int(k) != k or k < 0:
        raise ParamError(f"Laplacian power must be a non-negative integer, got {k}")
    if k == 0:
        return F.as_tensor()
    grid = g.grid
    gam = g.christoffel_values
    vals = F.values
    for _ in range(k):
        vals = laplacian_array(vals, F.p, F.q, g.inverse, gam, gam, grid)
    return TensorField(grid, F.p, F.q, _dealias_array(vals, grid))


def hessian_array(S: np.ndarray, gamma: np.ndarray, grid: Grid) -> np.ndarray:
    dS = _grad(S, grid)
    return covariant_derivative_array(dS, 1, 0, gamma, gamma, grid)


def ansatz_array(g: np.ndarray, ginv: np.ndarray, params: FlowParams, grid: Grid,
                 gamma: np.ndarray | None = None) -> np.ndarray:
    """Unmasked flow tensor on raw arrays (lower-order tail set to zero)."""
    k = params.k
    gam = christoffel_array(g, ginv, grid) if gamma is None else gamma
    ric = ricci_array(gam, grid)
    scal = np.einsum("...ij,...ij->...", ginv, ric)

    out = ric
    for _ in range(k):
        out = laplacian_array(out, 2, 0, ginv, gam, gam, grid)
    a_eff = params.a_eff
    if a_eff != 0:
        lap_s = scal
        for _ in range(k):
            lap_s = laplacian_array(lap_s, 0, 0, ginv, gam, gam, grid)
        out = out + a_eff * lap_s[..., None, None] * g
    if params.b != 0:
        hess = hessian_array(scal, gam, grid)
        for _ in range(k - 1):
            hess = laplacian_array(hess, 2, 0, ginv, gam, gam, grid)
        out = out - params.b * hess
    out = 0.5 * (out + np.swapaxes(out, -1, -2))
    return ((-1) ** (k + 1) * params.c) * out


def ansatz_tensor(g: MetricField, params: FlowParams) -> TensorField:
    """Top-order flow tensor ``T^g_{k,a,b,c}`` with ``a`` replaced by ``a_eff``."""
    _require_metric(g)
    if params.n != g.grid.n:
        raise ParamError(f"params are for n={params.n}, grid has n={g.grid.n}")
    vals = ansatz_array(g.values, g.inverse, params, g.grid, g.christoffel_values)
    return TensorField(g.grid, 2, 0, _dealias_array(vals, g.grid))


def lie_derivative_array(W: np.ndarray, g: np.ndarray, grid: Grid) -> np.ndarray:
    dg = _grad(g, grid)  # [..., i, j, m]
    dW = _grad(W, grid)  # [..., m, i] = d_i W^m
    out = np.einsum("...m,...ijm->...ij", W, dg)
    term = np.einsum("...mj,...mi->...ij", g, dW)
    return out + term + np.swapaxes(term, -1, -2)


def lie_derivative(W: VectorFieldOnGrid, g: TensorField) -> TensorField:
    """``(L_W g)_ij = W^m d_m g_ij + g_mj d_i W^m + g_im d_j W^m``."""
    if (W.p, W.q) != (0, 1) or (g.p, g.q) != (2, 0):
        raise FieldError("lie_derivative needs a vector field and a covariant 2-tensor")
    vals = lie_derivative_array(W.values, g.values, g.grid)
    return TensorField(g.grid, 2, 0, _dealias_array(vals, g.grid))
