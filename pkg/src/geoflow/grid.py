"""Dense tensor fields on the flat torus T^n = [0, 2*pi)^n.

Fields are stored grid-major: a rank-(p, q) field on an ``n``-dimensional grid
with ``N`` points per axis has values of shape ``(N,)*n + (n,)*(p+q)``.  The
first ``p`` tensor slots are covariant, the remaining ``q`` contravariant.

Differentiation is spectral (multiply mode ``k`` by ``i*k``), products are
pointwise, and the optional 2/3-rule mask removes modes with any
``|k_j| > N/3``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property, lru_cache
from pathlib import Path

import numpy as np

SNAPSHOT_MAGIC = b"GFLO"
SNAPSHOT_VERSION = 1


class FieldError(ValueError):
    """Raised when a field violates its structural invariants."""


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid with ``N`` points per axis on ``[0, 2*pi)^n``."""

    n: int
    N: int
    dealias: bool = True

    def __post_init__(self):
        if not 2 <= self.n <= 4:
            raise FieldError(f"grid dimension must be in 2..4, got {self.n}")
        if self.N < 8 or self.N % 2:
            raise FieldError(f"points per axis must be even and >= 8, got {self.N}")

    @property
    def spacing(self) -> float:
        return 2.0 * np.pi / self.N

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.n

    @property
    def axes(self) -> tuple[int, ...]:
        return tuple(range(self.n))

    @property
    def band(self) -> int:
        """Largest per-axis wavenumber kept by the 2/3 rule."""
        return self.N // 3

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.n

    @cached_property
    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``grid.shape + (n,)``."""
        x = np.arange(self.N) * self.spacing
        return np.stack(np.meshgrid(*([x] * self.n), indexing="ij"), axis=-1)

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        """Integer wavenumbers in FFT order, Nyquist listed as ``-N/2``."""
        return np.fft.fftfreq(self.N, 1.0 / self.N)

    @cached_property
    def _rfft_shape(self) -> tuple[int, ...]:
        return (self.N,) * (self.n - 1) + (self.N // 2 + 1,)

    @cached_property
    def rfft_wavevectors(self) -> np.ndarray:
        """Wavevectors of the ``rfftn`` layout, shape ``rfft_shape + (n,)``."""
        full = self.wavenumbers
        half = np.fft.rfftfreq(self.N, 1.0 / self.N)
        axes = [full] * (self.n - 1) + [half]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    @cached_property
    def rfft_mask(self) -> np.ndarray:
        """Boolean 2/3-rule mask over the ``rfftn`` layout."""
        return np.all(np.abs(self.rfft_wavevectors) <= self.band, axis=-1)

    def zeros(self, p: int = 0, q: int = 0) -> "TensorField":
        return TensorField(self, p, q, np.zeros(self.shape + (self.n,) * (p + q)))


@dataclass(frozen=True, eq=False)
class TensorField:
    """Rank-(p, q) tensor field on a :class:`Grid`.

    ``values`` is copied and made read-only on construction.
    """

    grid: Grid
    p: int
    q: int
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        expected = self.grid.shape + (self.grid.n,) * (self.p + self.q)
        if vals.shape != expected:
            raise FieldError(f"values shape {vals.shape} != expected {expected}")
        if not np.all(np.isfinite(vals)):
            raise FieldError("tensor field has non-finite entries")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def rank(self) -> int:
        return self.p + self.q

    def like(self, values: np.ndarray) -> "TensorField":
        """New field of the same type (and subclass) holding ``values``."""
        return type(self)(self.grid, self.p, self.q, values)

    def as_tensor(self) -> "TensorField":
        return TensorField(self.grid, self.p, self.q, self.values)

    def _check_compatible(self, other: "TensorField"):
        if (self.grid, self.p, self.q) != (other.grid, other.p, other.q):
            raise FieldError("fields differ in grid or rank")

    def __add__(self, other):
        self._check_compatible(other)
        return TensorField(self.grid, self.p, self.q, self.values + other.values)

    def __sub__(self, other):
        self._check_compatible(other)
        return TensorField(self.grid, self.p, self.q, self.values - other.values)

    def __mul__(self, scalar):
        return TensorField(self.grid, self.p, self.q, scalar * self.values)

    __rmul__ = __mul__

    def __neg__(self):
        return TensorField(self.grid, self.p, self.q, -self.values)

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0


class MetricField(TensorField):
    """Symmetric positive-definite covariant 2-tensor field.

    Both slots are written on construction (``0.5*(g + g^T)``, which leaves an
    exactly symmetric input bit-identical).
    """

    def __init__(self, grid: Grid, values: np.ndarray, p: int = 2, q: int = 0):
        if (p, q) != (2, 0):
            raise FieldError("a metric is a rank-(2, 0) field")
        vals = np.asarray(values, dtype=np.float64)
        asym = np.max(np.abs(vals - np.swapaxes(vals, -1, -2))) if vals.size else 0.0
        if asym > 1e-8 * max(1.0, float(np.max(np.abs(vals)))):
            raise FieldError(f"metric is not symmetric (max asymmetry {asym:.3e})")
        vals = 0.5 * (vals + np.swapaxes(vals, -1, -2))
        super().__init__(grid, 2, 0, vals)
        eig = np.linalg.eigvalsh(self.values)
        worst = np.unravel_index(np.argmin(eig[..., 0]), grid.shape)
        if not eig[worst + (0,)] > 0:
            raise FieldError(
                f"metric is not positive definite at node {tuple(int(i) for i in worst)} "
                f"(min eigenvalue {eig[worst + (0,)]:.3e})"
            )

    def like(self, values):
        return MetricField(self.grid, values)

    @classmethod
    def flat(cls, grid: Grid, scale: float = 1.0) -> "MetricField":
        return cls(grid, scale * np.broadcast_to(np.eye(grid.n), grid.shape + (grid.n, grid.n)))

    @cached_property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.values)

    @cached_property
    def volume_density(self) -> np.ndarray:
        return np.sqrt(np.linalg.det(self.values))

    @cached_property
    def is_constant(self) -> bool:
        v = self.values.reshape((-1,) + self.values.shape[self.grid.n:])
        return bool(np.all(v == v[0]))

    @cached_property
    def christoffel_values(self) -> np.ndarray:
        """``Gamma[..., a, b, c] = Gamma^c_ab``, computed once per metric."""
        if self.is_constant:
            return np.zeros(self.grid.shape + (self.grid.n,) * 3)
        from .curvature import christoffel_array

        return christoffel_array(self.values, self.inverse, self.grid)


class VectorFieldOnGrid(TensorField):
    """Contravariant vector field (rank (0, 1))."""

    def __init__(self, grid: Grid, values: np.ndarray, p: int = 0, q: int = 1):
        if (p, q) != (0, 1):
            raise FieldError("a vector field is a rank-(0, 1) field")
        super().__init__(grid, 0, 1, values)

    def like(self, values):
        return VectorFieldOnGrid(self.grid, values)


# -- spectral kernels on raw arrays ----------------------------------------


@lru_cache(maxsize=None)
def _deriv_kernel(N: int, cutoff: int) -> tuple[float, ...]:
    """``d[m]`` with ``(d/dx f)_i = sum_m d[m] (f_{i+m} - f_{i-m})`` for modes ``|k| <= cutoff``."""
    m = np.arange(N // 2)[:, None]
    k = np.arange(1, cutoff + 1)[None, :]
    d = (1.0 / N) * np.sum(2 * k * np.sin(2 * np.pi * m * k / N), axis=1)
    return tuple(float(v) for v in d)


@lru_cache(maxsize=None)
def _lowpass_kernel(N: int, cutoff: int) -> tuple[float, ...]:
    """``p[m]`` with ``(P f)_i = p[0] f_i + sum_m p[m] (f_{i+m} + f_{i-m})`` keeping ``|k| <= cutoff``."""
    m = np.arange(N // 2 + 1)[:, None]
    k = np.arange(1, cutoff + 1)[None, :]
    p = (1.0 + np.sum(2 * np.cos(2 * np.pi * m * k / N), axis=1)) / N
    return tuple(float(v) for v in p)


def _periodic_pad(moved: np.ndarray, H: int) -> np.ndarray:
    return np.concatenate([moved[-H:], moved, moved[:H]], axis=0)


def _deriv_array(values: np.ndarray, axis: int, grid: Grid, mask: bool = False) -> np.ndarray:
    """d/dx^axis of a grid-major array along grid axis ``axis``.

    The Fourier multiplier ``i k`` (Nyquist mode dropped, modes above the band
    dropped when ``mask``) is applied as its exact periodic stencil, summed in a
    fixed offset order.  Translating the input by whole cells therefore
    translates the output bit for bit, and data constant along the axis
    differentiates to exact zeros.
    """
    N = grid.N
    H = N // 2
    d = _deriv_kernel(N, min(grid.band, H - 1) if mask else H - 1)
    moved = np.moveaxis(values, axis, 0)
    xp = _periodic_pad(moved, H)
    out = np.empty(moved.shape)
    tmp = np.empty(moved.shape)
    started = False
    for m in range(1, H):
        if d[m] == 0.0:
            continue
        np.subtract(xp[H + m:H + m + N], xp[H - m:H - m + N], out=tmp)
        if started:
            tmp *= d[m]
            out += tmp
        else:
            np.multiply(tmp, d[m], out=out)
            started = True
    if not started:
        out[...] = 0.0
    return np.moveaxis(out, 0, axis)


def _grad_array(values: np.ndarray, grid: Grid, mask: bool = False) -> np.ndarray:
    """All partial derivatives, derivative index appended last."""
    return np.stack([_deriv_array(values, a, grid, mask) for a in grid.axes], axis=-1)


def _lowpass_axis(values: np.ndarray, axis: int, N: int, cutoff: int) -> np.ndarray:
    H = N // 2
    p = _lowpass_kernel(N, cutoff)
    moved = np.moveaxis(values, axis, 0)
    xp = _periodic_pad(moved, H)
    out = moved * p[0]
    tmp = np.empty(moved.shape)
    for m in range(1, H):
        np.add(xp[H + m:H + m + N], xp[H - m:H - m + N], out=tmp)
        tmp *= p[m]
        out += tmp
    out += xp[2 * H:2 * H + N] * p[H]
    return np.moveaxis(out, 0, axis)


def _dealias_array(values: np.ndarray, grid: Grid) -> np.ndarray:
    """2/3-rule projection, one exact periodic stencil per axis (translation-equivariant)."""
    if not grid.dealias:
        return values
    out = values
    for a in grid.axes:
        out = _lowpass_axis(out, a, grid.N, grid.band)
    return out


def _check_finite(F: TensorField):
    if not np.all(np.isfinite(F.values)):
        raise FieldError("non-finite values in field")


def spectral_derivative(F: TensorField, axis: int) -> TensorField:
    """Componentwise partial derivative along grid axis ``axis`` (0-based)."""
    _check_finite(F)
    if not 0 <= axis < F.grid.n:
        raise FieldError(f"axis {axis} out of range for n={F.grid.n}")
    return F.as_tensor().like(_deriv_array(F.values, axis, F.grid))


def dealias(F: TensorField) -> TensorField:
    """Apply the 2/3-rule mask (identity if the grid disables dealiasing)."""
    return F.like(_dealias_array(F.values, F.grid))


# -- metric contractions -----------------------------------------------------


def _apply_on_slot(T: np.ndarray, M: np.ndarray, slot: int, grid: Grid) -> np.ndarray:
    """Contract pointwise matrix ``M[..., i, j]`` with slot ``slot`` of ``T`` (index j)."""
    rank = T.ndim - grid.n
    moved = np.moveaxis(T, grid.n + slot, -1)
    Mb = M.reshape(grid.shape + (1,) * (rank - 1) + M.shape[-2:])
    out = np.matmul(Mb, moved[..., None])[..., 0]
    return np.moveaxis(out, -1, grid.n + slot)


def _pointwise_inner(F: np.ndarray, G: np.ndarray, p: int, q: int, h: MetricField) -> np.ndarray:
    grid = h.grid
    Gm = G
    for s in range(p):
        Gm = _apply_on_slot(Gm, h.inverse, s, grid)
    for s in range(p, p + q):
        Gm = _apply_on_slot(Gm, h.values, s, grid)
    return (F * Gm).reshape(grid.shape + (-1,)).sum(axis=-1)


def l2_inner(F: TensorField, G: TensorField, h: MetricField) -> float:
    """Trapezoidal approximation of the L^2(M, h) inner product."""
    if (F.p, F.q) != (G.p, G.q):
        raise FieldError("l2_inner needs fields of equal rank")
    if F.grid != G.grid or F.grid != h.grid:
        raise FieldError("l2_inner needs fields on the same grid")
    dens = _pointwise_inner(F.values, G.values, F.p, F.q, h) * h.volume_density
    return float(np.sum(dens) * F.grid.cell_volume)


def l2_norm(F: TensorField, h: MetricField) -> float:
    return float(np.sqrt(max(l2_inner(F, F, h), 0.0)))


# -- trigonometric interpolation ---------------------------------------------


def _node_lookup(points: np.ndarray, grid: Grid):
    """Indices of points that sit on grid nodes (to 1e-9 cells), else None."""
    u = np.mod(points, 2 * np.pi) / grid.spacing
    idx = np.rint(u)
    on_node = np.all(np.abs(u - idx) < 1e-9, axis=-1)
    return on_node, np.mod(idx.astype(np.int64), grid.N)


def interpolate_array(values: np.ndarray, points: np.ndarray, grid: Grid, band: int | None = None,
                      chunk: int = 512) -> np.ndarray:
    """Evaluate the trigonometric interpolant of a grid-major array.

    ``points`` has shape ``(P, n)``; the result has shape ``(P,) + tensor_shape``.
    Nodes are returned exactly.  ``band`` restricts the sum to ``|k_j| <= band``,
    which is exact for fields already band-limited to that range.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n, N = grid.n, grid.N
    tshape = values.shape[n:]
    flat = values.reshape(grid.shape + (-1,))
    out = np.empty((points.shape[0], flat.shape[-1]))

    on_node, idx = _node_lookup(points, grid)
    if np.any(on_node):
        out[on_node] = flat[tuple(idx[on_node].T)]
    rest = np.flatnonzero(~on_node)
    if rest.size:
        coef = np.moveaxis(np.fft.fftn(flat, axes=grid.axes) / N**n, -1, 0)
        k = grid.wavenumbers
        if band is not None and band < N // 2:
            keep = np.abs(k) <= band
            coef = coef[(slice(None),) + np.ix_(*([keep] * n))]
            k = k[keep]
        for start in range(0, rest.size, chunk):
            sel = rest[start:start + chunk]
            pts = np.mod(points[sel], 2 * np.pi)
            phases = [np.exp(1j * np.outer(pts[:, a], k)) for a in range(n)]
            # contract grid axes from the last one, point axis leading
            acc = np.moveaxis(coef @ phases[-1].T, -1, 0)
            for a in range(n - 2, -1, -1):
                acc = np.einsum("p...a,pa->p...", acc, phases[a])
            out[sel] = acc.real
    return out.reshape((points.shape[0],) + tshape)


def interpolate(F: TensorField, point) -> np.ndarray:
    """Fourier-series value of ``F`` at ``point`` (shape ``(n,)`` or ``(P, n)``)."""
    _check_finite(F)
    pts = np.asarray(point, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        raise FieldError("non-finite interpolation point")
    single = pts.ndim == 1
    vals = interpolate_array(F.values, pts.reshape(-1, F.grid.n), F.grid)
    return vals[0] if single else vals


# -- binary snapshots ----------------------------------------------------------


def save_snapshot(path: str | Path, F: TensorField) -> Path:
    """Write ``F`` as GFLO: magic, version, n, N, p, q (u32 LE), float64 LE values."""
    path = Path(path)
    header = SNAPSHOT_MAGIC + struct.pack("<5I", SNAPSHOT_VERSION, F.grid.n, F.grid.N, F.p, F.q)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(F.values, dtype="<f8").tobytes())
    return path


def load_snapshot(path: str | Path, dealias: bool = True) -> TensorField:
    data = Path(path).read_bytes()
    if data[:4] != SNAPSHOT_MAGIC:
        raise FieldError(f"{path}: not a GFLO snapshot")
    version, n, N, p, q = struct.unpack("<5I", data[4:24])
    if version != SNAPSHOT_VERSION:
        raise FieldError(f"{path}: unsupported snapshot version {version}")
    grid = Grid(n, N, dealias)
    shape = grid.shape + (n,) * (p + q)
    vals = np.frombuffer(data[24:], dtype="<f8")
    if vals.size != int(np.prod(shape)):
        raise FieldError(f"{path}: payload has {vals.size} values, expected {int(np.prod(shape))}")
    vals = vals.reshape(shape)
    if (p, q) == (2, 0):
        try:
            return MetricField(grid, vals)
        except FieldError:
            pass
    if (p, q) == (0, 1):
        return VectorFieldOnGrid(grid, vals)
    return TensorField(grid, p, q, vals)
