"""Time integration of the gauge-fixed flow, the gauge diffeomorphisms and the pure flow.

The adjusted flow ``dg/dt = T^g + L_W g`` is advanced with a second-order
integrating-factor Runge-Kutta scheme.  Its linearisation at a constant
background ``h`` is the Fourier multiplier ``-Sigma(xi)``, which is integrated
exactly per mode; the remainder is treated explicitly.  States are stored in
the Frobenius-orthonormal basis of symmetric matrices, so symmetry is exact.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .curvature import ansatz_tensor
from .gauge import deturck_field
from .grid import (
    FieldError,
    Grid,
    MetricField,
    TensorField,
    VectorFieldOnGrid,
    _dealias_array,
    _deriv_array,
    interpolate_array,
    l2_norm,
)
from .params import FlowParams, ParamError
from .symbol import adjusted_rhs, brute_force_min, check_strong_ellipticity, sym_basis, symbol_matrix, Verdict


class FlowHalted(RuntimeError):
    """Raised when the metric loses positivity or becomes non-finite."""

    def __init__(self, t: float, reason: str):
        super().__init__(f"flow halted at t={t:.6g}: {reason}")
        self.t = t
        self.reason = reason


@dataclass(frozen=True, eq=False)
class DiffeoField:
    """``phi(x) = x + displacement(x)`` with a periodic displacement."""

    displacement: VectorFieldOnGrid

    def __post_init__(self):
        det = np.linalg.det(self.jacobian())
        if np.min(det) <= 0:
            idx = np.unravel_index(int(np.argmin(det)), det.shape)
            raise FieldError(f"diffeomorphism Jacobian degenerate at node {idx} (det={det[idx]:.3e})")

    @property
    def grid(self) -> Grid:
        return self.displacement.grid

    @classmethod
    def identity(cls, grid: Grid) -> "DiffeoField":
        return cls(VectorFieldOnGrid(grid, np.zeros(grid.shape + (grid.n,))))

    @classmethod
    def translation(cls, grid: Grid, shift) -> "DiffeoField":
        shift = np.asarray(shift, dtype=float)
        return cls(VectorFieldOnGrid(grid, np.broadcast_to(shift, grid.shape + (grid.n,))))

    def points(self) -> np.ndarray:
        return self.grid.coords + self.displacement.values

    def jacobian(self) -> np.ndarray:
        """``J[..., a, i] = d_i phi^a``."""
        grid = self.grid
        u = self.displacement.values
        du = np.stack([_deriv_array(u, a, grid) for a in grid.axes], axis=-1)
        return du + np.eye(grid.n)


@dataclass(frozen=True, eq=False)
class FlowState:
    t: float
    g: MetricField
    phi: DiffeoField | None = None

    def __post_init__(self):
        if not (self.t >= 0 and math.isfinite(self.t)):
            raise ParamError(f"flow time must be finite and >= 0, got {self.t}")


# ---------------------------------------------------------------- modal bookkeeping

def _check_constant(h: MetricField):
    if np.abs(h.values - h.values.reshape(-1, h.grid.n, h.grid.n)[0]).max() > 1e-14:
        raise FieldError("the integrator needs a spatially constant background metric")


def to_modes(w: np.ndarray, grid: Grid) -> np.ndarray:
    """Symmetric-matrix field -> rfftn of its coordinates, shape ``rfft_shape + (m,)``."""
    B = sym_basis(grid.n)
    c = np.einsum("lij,...ij->...l", B, w)
    return np.fft.rfftn(c, axes=grid.axes)


def from_modes(c_hat: np.ndarray, grid: Grid) -> np.ndarray:
    B = sym_basis(grid.n)
    c = np.fft.irfftn(c_hat, s=grid.shape, axes=grid.axes)
    return np.einsum("...l,lij->...ij", c, B)


def mode_coefficient(w: np.ndarray, grid: Grid, xi) -> np.ndarray:
    """Complex matrix ``A`` with ``w = Re(A e^{i xi.x}) + ...``; ``eps cos(xi.x) E`` gives ``eps E``."""
    xi = np.asarray(xi)
    phase = np.exp(-1j * (grid.coords @ xi))
    scale = 1.0 if not np.any(xi) else 2.0
    return scale * np.tensordot(phase, w, axes=grid.n) / phase.size


def mode_amplitude(g: TensorField, h: MetricField, xi) -> float:
    return float(np.linalg.norm(mode_coefficient(g.values - h.values, g.grid, xi)))


def spectral_radius_bound(params: FlowParams, grid: Grid) -> float:
    """``max rho(Sigma_sym(xi))`` over the resolved band."""
    xi = grid.rfft_wavevectors[grid.rfft_mask] if grid.dealias else grid.rfft_wavevectors.reshape(-1, grid.n)
    S = symbol_matrix(params, xi)
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    return float(np.abs(np.linalg.eigvalsh(S)).max())


def choose_dt(params: FlowParams, grid: Grid, amplitude: float, C_dt: float = 0.5,
              floor: float = 1e-3) -> float:
    """Step for the explicit remainder stage: ``C_dt / (rho_max * max(amplitude, floor))``.

    The stiff linear part is integrated exactly, so only the remainder, whose
    Jacobian scales like ``amplitude * rho_max``, limits the step.
    """
    if C_dt <= 0:
        raise ParamError("C_dt must be positive")
    return C_dt / (spectral_radius_bound(params, grid) * max(abs(amplitude), floor))


def _require_elliptic(params: FlowParams, allow_unstable: bool):
    if params.is_canonical:
        ok = check_strong_ellipticity(params).verdict == Verdict.STRONGLY_ELLIPTIC
    else:
        ok = brute_force_min(params, samples=2000) > 0
    if ok:
        return
    if not allow_unstable:
        raise ParamError("parameters are not strongly elliptic; pass allow_unstable=True to proceed")
    warnings.warn("integrating a flow that is not strongly elliptic", RuntimeWarning, stacklevel=3)


# ---------------------------------------------------------------- adjusted flow

class AdjustedFlowIntegrator:
    """IF-RK2 stepper for ``dg/dt = T^g + L_W g`` about a constant background ``h``."""

    def __init__(self, h: MetricField, params: FlowParams, dt: float, allow_unstable: bool = False):
        if not dt > 0:
            raise ParamError(f"dt must be positive, got {dt}")
        if params.n != h.grid.n:
            raise ParamError(f"params are for n={params.n}, grid has n={h.grid.n}")
        _check_constant(h)
        _require_elliptic(params, allow_unstable)
        self.h = h
        self.params = params
        self.dt = float(dt)
        grid = h.grid
        self.grid = grid
        G = h.values.reshape(-1, grid.n, grid.n)[0]
        xi = grid.rfft_wavevectors
        if np.allclose(G, np.eye(grid.n), rtol=0, atol=0):
            Sigma = symbol_matrix(params, xi)
        else:
            from .symbol import apply_symbol

            B = sym_basis(grid.n)
            out = apply_symbol(params, xi[..., None, :], B, metric=G)
            Sigma = np.einsum("lij,...mij->...lm", B, out)
        self.Sigma = Sigma
        self.E = expm(-self.dt * Sigma)
        self.mask = grid.rfft_mask[..., None] if grid.dealias else np.ones(grid.rfft_mask.shape + (1,))

    def _apply(self, M, u):
        return np.einsum("...lm,...m->...l", M, u)

    def _metric(self, u_hat, t):
        vals = self.h.values + from_modes(u_hat, self.grid)
        if not np.all(np.isfinite(vals)):
            raise FlowHalted(t, "non-finite metric entries")
        try:
            return MetricField(self.grid, vals)
        except FieldError as exc:
            raise FlowHalted(t, str(exc)) from None

    def remainder(self, g: MetricField) -> np.ndarray:
        """Modes of ``T^g + L_W g + Sigma (g - h)``, the non-stiff part."""
        rhs_hat = to_modes(adjusted_rhs(g, self.h, self.params), self.grid)
        u_hat = to_modes(g.values - self.h.values, self.grid)
        return (rhs_hat + self._apply(self.Sigma, u_hat)) * self.mask

    def rhs(self, g: MetricField) -> MetricField:
        return adjusted_rhs(g, self.h, self.params)

    def step(self, state: FlowState) -> FlowState:
        dt, E = self.dt, self.E
        u = to_modes(state.g.values - self.h.values, self.grid) * self.mask
        Nu = self.remainder(state.g)
        a = self._apply(E, u + dt * Nu)
        Na = self.remainder(self._metric(a, state.t + dt))
        new = self._apply(E, u) + 0.5 * dt * (self._apply(E, Nu) + Na)
        t = state.t + dt
        return FlowState(t, self._metric(new * self.mask, t))

    def gauge(self, g: MetricField) -> VectorFieldOnGrid:
        alpha, beta = self.params.weights
        if alpha == 0 and beta == 0:
            return VectorFieldOnGrid(self.grid, np.zeros(self.grid.shape + (self.grid.n,)))
        return deturck_field(g, self.h, self.params)


def step_adjusted_flow(state: FlowState, h: MetricField, params: FlowParams, dt: float,
                       allow_unstable: bool = False) -> FlowState:
    """One IF-RK2 step.  Build an :class:`AdjustedFlowIntegrator` to reuse its tables."""
    return AdjustedFlowIntegrator(h, params, dt, allow_unstable).step(state)


@dataclass
class AdjustedRun:
    params: FlowParams
    h: MetricField
    dt: float
    states: list = field(default_factory=list)
    gauges: list = field(default_factory=list)
    halted: FlowHalted | None = None

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])


def integrate_adjusted(g0: MetricField, h: MetricField, params: FlowParams, dt: float, steps: int,
                       record_gauge: bool = True, allow_unstable: bool = False,
                       callback=None) -> AdjustedRun:
    """Run ``steps`` IF-RK2 steps, keeping every state (and gauge field when asked).

    A loss of positivity stops the run and is stored in ``run.halted``.
    """
    integ = AdjustedFlowIntegrator(h, params, dt, allow_unstable)
    run = AdjustedRun(params, h, dt)
    state = FlowState(0.0, g0)
    run.states.append(state)
    if record_gauge:
        run.gauges.append(integ.gauge(state.g))
    for i in range(steps):
        try:
            # exact multiples of dt keep the time grids of dt and dt/2 runs aligned
            nxt = integ.step(state)
            state = FlowState((i + 1) * dt, nxt.g)
        except FlowHalted as exc:
            run.halted = exc
            break
        run.states.append(state)
        if record_gauge:
            run.gauges.append(integ.gauge(state.g))
        if callback is not None:
            callback(state)
    return run


# ---------------------------------------------------------------- diffeomorphisms

def _eval_vector(W: np.ndarray, pts: np.ndarray, grid: Grid) -> np.ndarray:
    band = grid.band if grid.dealias else None
    return interpolate_array(W, pts.reshape(-1, grid.n), grid, band=band).reshape(pts.shape)


def step_diffeo(phi: DiffeoField, W: VectorFieldOnGrid, dt: float,
                W_end: VectorFieldOnGrid | None = None) -> DiffeoField:
    """Classical RK4 for ``d phi/dt = -W o phi`` at every node.

    With ``W_end`` the field is interpolated linearly in time between ``W``
    (at the start of the step) and ``W_end`` (at its end).
    """
    if not dt > 0:
        raise ParamError(f"dt must be positive, got {dt}")
    grid = phi.grid
    if W.grid != grid or (W_end is not None and W_end.grid != grid):
        raise FieldError("phi and W live on different grids")
    x = grid.coords
    W0 = W.values
    W1 = W0 if W_end is None else W_end.values
    Wm = 0.5 * (W0 + W1)
    same = W_end is None or W_end is W

    def f(Wv, u):
        return -_eval_vector(Wv, x + u, grid)

    u = phi.displacement.values
    k1 = f(W0, u)
    k2 = f(Wm if not same else W0, u + 0.5 * dt * k1)
    k3 = f(Wm if not same else W0, u + 0.5 * dt * k2)
    k4 = f(W1, u + dt * k3)
    new = u + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(new)):
        raise FlowHalted(0.0, "non-finite diffeomorphism")
    try:
        return DiffeoField(VectorFieldOnGrid(grid, new))
    except FieldError as exc:
        raise FlowHalted(0.0, str(exc)) from None


def pullback_metric(g: MetricField, phi: DiffeoField) -> MetricField:
    """``(phi^* g)_ij(x) = d_i phi^a d_j phi^b g_ab(phi(x))``.

    Composition uses the trigonometric interpolant of ``g``; nodes hit exactly
    (for instance under whole-cell translations) are copied without rounding.
    """
    grid = g.grid
    if phi.grid != grid:
        raise FieldError("g and phi live on different grids")
    J = phi.jacobian()
    pts = phi.points().reshape(-1, grid.n)
    gphi = interpolate_array(g.values, pts, grid).reshape(g.values.shape)
    vals = np.einsum("...ai,...ab,...bj->...ij", J, gphi, J)
    return MetricField(grid, vals)


# ---------------------------------------------------------------- pure flow

@dataclass
class PureRun:
    states: list
    residuals: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    def max_residual(self) -> float:
        return float(np.max(self.residuals)) if self.residuals.size else 0.0


def reconstruct_pure_flow(run: AdjustedRun, h: MetricField, params: FlowParams,
                          phi0: DiffeoField | None = None) -> PureRun:
    """Co-integrate ``phi`` against the stored gauge fields and pull the metrics back.

    Returns ``gbar(t) = phi(t)^* g(t)`` and the pure-flow residual
    ``r(t) = || d_t gbar - T^gbar ||_{L^2}`` with second-order differences in ``t``.
    """
    if len(run.gauges) != len(run.states):
        raise ParamError("the adjusted run must store the gauge field at every state")
    if len(run.states) < 3:
        raise ParamError("residual estimation needs at least three stored states")
    grid = h.grid
    phi = phi0 or DiffeoField.identity(grid)
    out = []
    for i, st in enumerate(run.states):
        if i > 0:
            dt = st.t - run.states[i - 1].t
            phi = step_diffeo(phi, run.gauges[i - 1], dt, run.gauges[i])
        out.append(FlowState(st.t, pullback_metric(st.g, phi), phi))

    times = np.array([s.t for s in out])
    gbar = np.stack([_dealias_array(s.g.values, grid) for s in out])
    dgdt = np.gradient(gbar, times, axis=0, edge_order=2)
    flat = MetricField.flat(grid)
    res = []
    for i, s in enumerate(out):
        T = ansatz_tensor(MetricField(grid, gbar[i]), params)
        res.append(l2_norm(TensorField(grid, 2, 0, dgdt[i] - T.values), flat))
    return PureRun(out, np.array(res))


# ---------------------------------------------------------------- energy

@dataclass
class EnergySeries:
    times: np.ndarray
    energy: np.ndarray
    rates: np.ndarray

    @property
    def K_hat(self) -> float:
        """Smallest ``K`` with ``e(t) <= e(0) exp(K t)`` over the sampled times."""
        r = self.rates[np.isfinite(self.rates)]
        return float(np.max(r)) if r.size else 0.0


def energy(w: np.ndarray, grid: Grid, m: int) -> float:
    """``||w||^2 + ||nabla^m w||^2`` in the flat metric, via Plancherel."""
    c = np.fft.fftn(w, axes=grid.axes) / np.prod(grid.shape)
    k = np.stack(np.meshgrid(*([grid.wavenumbers] * grid.n), indexing="ij"), axis=-1)
    ksq = np.sum(k * k, axis=-1)
    power = np.sum(np.abs(c) ** 2, axis=tuple(range(grid.n, c.ndim)))
    return float((2 * np.pi) ** grid.n * np.sum(power * (1.0 + ksq ** m)))


def energy_monitor(states1, states2, h: MetricField, m: int) -> EnergySeries:
    """``e(t)`` for ``w = g1 - g2`` and the rates ``log(e(t)/e(0)) / t``."""
    if len(states1) != len(states2):
        raise ParamError("runs must share their sample times")
    grid = h.grid
    times, e = [], []
    for s1, s2 in zip(states1, states2):
        if s1.g.grid != grid or s2.g.grid != grid:
            raise FieldError("runs must share the grid")
        if abs(s1.t - s2.t) > 1e-12 * max(1.0, abs(s1.t)):
            raise ParamError("runs must share their sample times")
        times.append(s1.t)
        e.append(energy(s1.g.values - s2.g.values, grid, m))
    times = np.array(times)
    e = np.array(e)
    rates = np.full_like(e, np.nan)
    if e[0] > 0:
        pos = (times > 0) & (e > 0)
        rates[pos] = np.log(e[pos] / e[0]) / times[pos]
    return EnergySeries(times, e, rates)
