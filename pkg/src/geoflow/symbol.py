"""Principal symbols of the flow operator and strong-ellipticity decisions.

Conventions: ``xi`` is a covector, ``eta`` a symmetric covariant 2-tensor and
``metric`` the constant metric used for every contraction.  With
``X = <xi xi, eta>``, ``Y = <xi xi, tr(eta x eta)> = |eta xi|^2`` and
``s = |xi|^2`` the five building blocks are polynomials in ``s, X, Y, tr eta``
and ``|eta|^2``.  The quadratic form of ``-L`` is ``<Sigma(xi) eta, eta>``; the
linear map ``Sigma(xi)`` is the Fourier multiplier of ``-L`` at a flat metric.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import minimize

from .params import FlowParams, ParamError

BLOCKS = ("ricci", "scalar_g", "hess_scalar", "lie_V", "lie_Z")


class Verdict(str, Enum):
    STRONGLY_ELLIPTIC = "strongly_elliptic"
    CRITICAL = "critical"
    NOT_ELLIPTIC = "not_elliptic"


@dataclass(frozen=True, eq=False)
class SymbolInput:
    params: FlowParams
    xi: np.ndarray
    eta: np.ndarray
    metric: np.ndarray | None = None

    def __post_init__(self):
        n = self.params.n
        xi = np.asarray(self.xi, dtype=float)
        eta = np.asarray(self.eta, dtype=float)
        if xi.shape != (n,) or eta.shape != (n, n):
            raise ParamError(f"xi must have shape ({n},) and eta ({n}, {n})")
        if not (np.all(np.isfinite(xi)) and np.all(np.isfinite(eta))):
            raise ParamError("xi and eta must be finite")
        if np.abs(eta - eta.T).max() > 1e-12 * max(1.0, np.abs(eta).max()):
            raise ParamError("eta must be symmetric")
        G = np.eye(n) if self.metric is None else np.asarray(self.metric, dtype=float)
        if G.shape != (n, n) or np.abs(G - G.T).max() > 1e-12 * np.abs(G).max():
            raise ParamError("metric must be a symmetric n x n matrix")
        if np.linalg.eigvalsh(G).min() <= 0:
            raise ParamError("metric must be positive definite")
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "eta", 0.5 * (eta + eta.T))
        object.__setattr__(self, "metric", G)


@dataclass(frozen=True, eq=False)
class SymbolReport:
    verdict: Verdict
    lam: float
    witness_xi: np.ndarray | None = None
    witness_eta: np.ndarray | None = None
    params: FlowParams | None = field(default=None, repr=False)

    def as_record(self) -> dict:
        rec = {"verdict": self.verdict.value, "lambda": self.lam}
        if self.witness_xi is not None:
            rec["witness_xi"] = [float(v) for v in self.witness_xi]
            rec["witness_eta"] = [[float(v) for v in row] for row in self.witness_eta]
        return rec


# ---------------------------------------------------------------- invariants

def _invariants(xi, eta, G=None):
    """Batched ``(s, X, Y, tr, eta2)``; leading axes of ``xi`` and ``eta`` broadcast."""
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if G is None:
        xu = xi
        s = np.einsum("...i,...i->...", xi, xi)
        tr = np.trace(eta, axis1=-2, axis2=-1)
        eta2 = np.einsum("...ij,...ij->...", eta, eta)
        ex = np.einsum("...ij,...j->...i", eta, xu)
        Y = np.einsum("...i,...i->...", ex, ex)
    else:
        Ginv = np.linalg.inv(G)
        xu = np.einsum("ij,...j->...i", Ginv, xi)
        s = np.einsum("...i,...i->...", xi, xu)
        tr = np.einsum("ij,...ij->...", Ginv, eta)
        eu = np.einsum("ia,...ab->...ib", Ginv, eta)  # eta with first index raised
        eta2 = np.einsum("...ij,...ji->...", eu, eu)
        ex = np.einsum("...ij,...j->...i", eta, xu)
        Y = np.einsum("...i,ij,...j->...", ex, Ginv, ex)
    X = np.einsum("...i,...i->...", ex, xu)
    return s, X, Y, tr, eta2


def _power(s, k):
    """``s**(k-1)`` with the convention 0 for s = 0."""
    s = np.asarray(s, dtype=float)
    safe = np.where(s > 0, s, 1.0)
    return np.where(s > 0, safe ** (k - 1), 0.0)


def _blocks(k, s, X, Y, tr, eta2):
    p = _power(s, k)
    sgn = (-1.0) ** k
    return {
        "ricci": sgn * 0.5 * p * (s * s * eta2 + s * tr * X - 2 * s * Y),
        "scalar_g": sgn * p * ((s * tr) ** 2 - s * tr * X),
        "hess_scalar": -sgn * p * (X * X - s * tr * X),
        "lie_V": -sgn * p * (2 * s * Y - s * tr * X),
        "lie_Z": -sgn * p * (2 * s * Y - X * X),
    }


def building_block_symbol(block: str, inp: SymbolInput) -> float:
    """``<sigma(B) eta, eta>`` for one building block ``B`` of the flow operator."""
    if block not in BLOCKS:
        raise ParamError(f"unknown block {block!r}; expected one of {BLOCKS}")
    k = inp.params.k
    if k == 0 and block in ("hess_scalar", "lie_Z"):
        raise ParamError(f"block {block!r} needs k >= 1")
    vals = _blocks(k, *_invariants(inp.xi, inp.eta, inp.metric))
    return float(vals[block])


def _combined(params: FlowParams, s, X, Y, tr, eta2):
    alpha, beta = params.weights
    a, b, c, k = params.a_eff, params.b, params.c, params.k
    bracket = (0.5 * s * s * eta2 + (2 * alpha + 2 * beta - 1) * s * Y + (b - beta) * X * X
               + (0.5 - a - b - alpha) * s * tr * X + a * (s * tr) ** 2)
    return c * _power(s, k) * bracket


def combined_symbol(inp: SymbolInput) -> float:
    """``<sigma(-L) eta, eta>`` for the adjusted operator with the input's weights."""
    return float(_combined(inp.params, *_invariants(inp.xi, inp.eta, inp.metric)))


def combined_symbol_batch(params: FlowParams, xi, eta, metric=None) -> np.ndarray:
    return _combined(params, *_invariants(xi, eta, metric))


def reduced_symbol(inp: SymbolInput) -> float:
    """``c |xi|^(2k-2) [ |xi|^4 |eta|^2 / 2 + a <xi xi - |xi|^2 g, eta>^2 ]``."""
    s, X, _, tr, eta2 = _invariants(inp.xi, inp.eta, inp.metric)
    p = inp.params
    return float(p.c * _power(s, p.k) * (0.5 * s * s * eta2 + p.a_eff * (X - s * tr) ** 2))


# ---------------------------------------------------------------- linear map

def apply_symbol(params: FlowParams, xi, eta, metric=None) -> np.ndarray:
    """``Sigma(xi) eta`` as a covariant symmetric matrix; batched over leading axes."""
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    n = xi.shape[-1]
    G = np.eye(n) if metric is None else np.asarray(metric, dtype=float)
    Ginv = np.linalg.inv(G)
    alpha, beta = params.weights
    a, b, c, k = params.a_eff, params.b, params.c, params.k

    xu = xi @ Ginv
    s = np.einsum("...i,...i->...", xi, xu)[..., None, None]
    tr = np.einsum("ij,...ij->...", Ginv, eta)[..., None, None]
    ex = np.einsum("...ij,...j->...i", eta, xu)
    X = np.einsum("...i,...i->...", ex, xu)[..., None, None]

    def sym_outer(u, v):
        m = u[..., :, None] * v[..., None, :]
        return m + np.swapaxes(m, -1, -2)

    xx = xi[..., :, None] * xi[..., None, :]
    rho = 0.5 * (s * eta - sym_outer(xi, ex) + xx * tr)
    u = ex - 0.5 * xi * tr[..., 0]
    z = s[..., 0] * ex - 0.5 * xi * X[..., 0]
    top = s * rho + a * s * (s * tr - X) * G + alpha * s * sym_outer(xi, u)
    low = -b * xx * (s * tr - X) + beta * sym_outer(xi, z)
    return c * _power(s, k) * (top + low)


def sym_basis(n: int) -> np.ndarray:
    """Frobenius-orthonormal basis of symmetric ``n x n`` matrices, shape ``(m, n, n)``."""
    basis = []
    for i in range(n):
        E = np.zeros((n, n))
        E[i, i] = 1.0
        basis.append(E)
    for i in range(n):
        for j in range(i + 1, n):
            E = np.zeros((n, n))
            E[i, j] = E[j, i] = np.sqrt(0.5)
            basis.append(E)
    return np.array(basis)


def symbol_matrix(params: FlowParams, xi) -> np.ndarray:
    """Matrix of ``Sigma(xi)`` (identity metric) in the basis from ``sym_basis``.

    ``xi`` may carry leading batch axes; the result has shape ``(..., m, m)``.
    """
    xi = np.asarray(xi, dtype=float)
    B = sym_basis(xi.shape[-1])
    out = apply_symbol(params, xi[..., None, :], B)  # (..., m, n, n)
    return np.einsum("lij,...mij->...lm", B, out)


# ---------------------------------------------------------------- ellipticity

def witness(n: int, metric=None) -> tuple[np.ndarray, np.ndarray]:
    """Unit covector ``xi`` and the degenerate direction ``|xi|^2 g - xi x xi``."""
    G = np.eye(n) if metric is None else np.asarray(metric, dtype=float)
    xi = np.zeros(n)
    xi[0] = 1.0 / np.sqrt(np.linalg.inv(G)[0, 0])
    s = xi @ np.linalg.inv(G) @ xi
    return xi, s * G - np.outer(xi, xi)


def check_strong_ellipticity(params: FlowParams, tol: float = 0.0) -> SymbolReport:
    """Decide strong ellipticity of ``-L`` with canonical gauge weights.

    Strongly elliptic iff ``a_eff > -1/(2(n-1))``; the sharp constant is
    ``c (1/2 + min(0, a_eff (n-1)))``.  ``tol`` widens the critical band.
    """
    if not params.is_canonical:
        raise ParamError("ellipticity is decided for the canonical gauge weights only")
    n = params.n
    gap = params.a_eff - params.threshold
    lam = params.c * (0.5 + min(0.0, params.a_eff * (n - 1)))
    if gap > tol:
        return SymbolReport(Verdict.STRONGLY_ELLIPTIC, lam, params=params)
    xi, eta = witness(n)
    if abs(gap) <= tol:
        return SymbolReport(Verdict.CRITICAL, 0.0, xi, eta, params=params)
    return SymbolReport(Verdict.NOT_ELLIPTIC, lam, xi, eta, params=params)


def _ratio(params, xi, eta):
    s, X, Y, tr, eta2 = _invariants(xi, eta)
    val = _combined(params, s, X, Y, tr, eta2)
    return val / (params.c * s ** (params.k + 1) * eta2)


def _unpack(vec, n):
    xi = vec[:n]
    eta = np.zeros((n, n))
    iu = np.triu_indices(n)
    eta[iu] = vec[n:]
    return xi, eta + np.triu(eta, 1).T


def brute_force_min(params: FlowParams, samples: int = 10_000, seed: int = 0) -> float:
    """Sampled minimum of ``combined / (c |xi|^(2k+2) |eta|^2)`` refined by local descent."""
    if samples < 1:
        raise ParamError("samples must be positive")
    n = params.n
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal((samples, n))
    xi /= np.linalg.norm(xi, axis=-1, keepdims=True)
    A = rng.standard_normal((samples, n, n))
    eta = A + np.swapaxes(A, -1, -2)
    eta /= np.linalg.norm(eta, axis=(-2, -1), keepdims=True)
    # analytic candidates: the degenerate direction and its complement for each xi
    xx = xi[:, :, None] * xi[:, None, :]
    eye = np.eye(n)
    cand = [eta, eye - xx, xx, eye]
    xi_all = np.concatenate([xi] * len(cand))
    eta_all = np.concatenate([np.broadcast_to(e, (samples, n, n)) for e in cand])
    r = _ratio(params, xi_all, eta_all)
    best = int(np.argmin(r))

    iu = np.triu_indices(n)
    x0 = np.concatenate([xi_all[best], eta_all[best][iu]])

    def fun(v):
        x, e = _unpack(v, n)
        if x @ x < 1e-12 or np.sum(e * e) < 1e-12:
            return 1e3
        return float(_ratio(params, x, e))

    res = minimize(fun, x0, method="BFGS", options={"gtol": 1e-12, "maxiter": 500})
    return float(min(r[best], res.fun))


# ---------------------------------------------------------------- numerical linearization

def _grid_size(xi) -> int:
    m = int(np.max(np.abs(xi)))
    N = max(8, 3 * m + 1)
    return N + (N % 2)


def adjusted_rhs(g, h, params):
    """``T^g + L_W g`` on raw arrays (no final dealiasing)."""
    from .curvature import ansatz_array, lie_derivative_array
    from .gauge import deturck_array

    grid = g.grid
    rhs = ansatz_array(g.values, g.inverse, params, grid, g.christoffel_values)
    alpha, beta = params.weights
    if alpha != 0 or beta != 0:
        W = deturck_array(g, h, params)
        rhs = rhs + lie_derivative_array(W, g.values, grid)
    return rhs


def linearize_at_flat(params: FlowParams, xi, eps: float = 1e-6, N: int | None = None) -> np.ndarray:
    """Numerical ``Sigma(xi)`` of the full adjusted operator at the flat metric.

    Each basis element ``E`` of ``sym_basis`` is planted as ``delta + t E cos(xi.x)``
    and the response is differentiated in ``t`` by centered differences.  The
    result uses the same basis as ``symbol_matrix``.
    """
    from .grid import Grid, MetricField

    xi = np.asarray(xi)
    if xi.shape != (params.n,) or not np.any(xi):
        raise ParamError("xi must be a nonzero integer vector of length n")
    if np.any(xi != np.round(xi)):
        raise ParamError("xi must be an integer frequency vector")
    n = params.n
    grid = Grid(n, N or _grid_size(xi))
    phase = np.cos(grid.coords @ xi)
    h = MetricField.flat(grid)
    B = sym_basis(n)
    npts = phase.size
    cols = []
    for E in B:
        plus = MetricField(grid, np.eye(n) + eps * phase[..., None, None] * E)
        minus = MetricField(grid, np.eye(n) - eps * phase[..., None, None] * E)
        resp = (adjusted_rhs(plus, h, params) - adjusted_rhs(minus, h, params)) / (2 * eps)
        amp = 2.0 / npts * np.tensordot(phase, resp, axes=n)
        cols.append(-np.einsum("lij,ij->l", B, amp))
    return np.array(cols).T
