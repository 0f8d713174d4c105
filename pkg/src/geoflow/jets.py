"""Truncated Taylor jets at a point, for tensors, metrics and maps.

A jet of order ``d`` in ``n`` variables stores the Taylor coefficients
``c_beta`` (so ``f = sum c_beta x^beta``) of every monomial of total degree
``<= d``.  Monomials are sorted by degree, so truncating to a lower order is a
prefix slice of the last axis.  Tensor components come first:
``coeffs.shape == (n,) * rank + (M_d,)``.

Each tensor slot carries a kind:

``Ml`` / ``Mu``  lower / upper index of a bundle over the source, connection of ``gbar``
``Nl`` / ``Nu``  lower / upper index of a bundle pulled back from the target, connection ``h o phi``

Maps are normalised to send the origin to the origin, so composition only
needs the jets of both factors at 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations_with_replacement
from string import ascii_lowercase

import numpy as np

KINDS = ("Ml", "Mu", "Nl", "Nu")


class JetError(ValueError):
    pass


# ---------------------------------------------------------------- monomial tables

class JetSpace:
    """Monomial bookkeeping and multiplication/derivative tables for ``(n, order)``."""

    def __init__(self, n: int, order: int):
        self.n = n
        self.order = order
        monos = []
        for deg in range(order + 1):
            for combo in combinations_with_replacement(range(n), deg):
                e = [0] * n
                for v in combo:
                    e[v] += 1
                monos.append(tuple(e))
        # combinations_with_replacement gives a fixed order within each degree
        self.monos = monos
        self.index = {m: i for i, m in enumerate(monos)}
        self.degree = np.array([sum(m) for m in monos])
        self.sizes = [int(np.sum(self.degree <= d)) for d in range(order + 1)]

        I, J, T = [], [], []
        for i, a in enumerate(monos):
            for j, b in enumerate(monos):
                if self.degree[i] + self.degree[j] <= order:
                    I.append(i)
                    J.append(j)
                    T.append(self.index[tuple(x + y for x, y in zip(a, b))])
        perm = np.argsort(T, kind="stable")
        self.I = np.array(I)[perm]
        self.J = np.array(J)[perm]
        T = np.array(T)[perm]
        self.starts = np.flatnonzero(np.r_[True, T[1:] != T[:-1]])

        self.deriv = []
        if order > 0:
            for m in range(n):
                src, fac = [], []
                for beta in monos[: self.sizes[order - 1]]:
                    up = list(beta)
                    up[m] += 1
                    src.append(self.index[tuple(up)])
                    fac.append(beta[m] + 1)
                self.deriv.append((np.array(src), np.array(fac, dtype=float)))

        # for composition: each monomial = previous monomial times one variable
        self.parent = np.zeros(len(monos), dtype=int)
        self.factor = np.zeros(len(monos), dtype=int)
        for i, m in enumerate(monos[1:], start=1):
            j = next(v for v in range(n) if m[v] > 0)
            prev = list(m)
            prev[j] -= 1
            self.parent[i] = self.index[tuple(prev)]
            self.factor[i] = j

    def size(self, d: int) -> int:
        return self.sizes[d]


@lru_cache(maxsize=None)
def jet_space(n: int, order: int) -> JetSpace:
    return JetSpace(n, order)


def _order_of(coeffs: np.ndarray, n: int) -> int:
    M = coeffs.shape[-1]
    d = 0
    while True:
        size = len(jet_space(n, d).monos)
        if size == M:
            return d
        if size > M:
            raise JetError(f"{M} coefficients do not form a complete jet in {n} variables")
        d += 1


def _truncate(coeffs: np.ndarray, n: int, d: int) -> np.ndarray:
    return coeffs[..., : jet_space(n, d).size(d)] if d < _order_of(coeffs, n) else coeffs


def jmul(spec: str, A: np.ndarray, B: np.ndarray, n: int) -> np.ndarray:
    """Einsum over tensor indices with jet multiplication of the coefficients."""
    d = min(_order_of(A, n), _order_of(B, n))
    A = _truncate(A, n, d)
    B = _truncate(B, n, d)
    sp = jet_space(n, d)
    lhs, out = spec.split("->")
    a, b = lhs.split(",")
    prod = np.einsum(f"{a}P,{b}P->{out}P", A[..., sp.I], B[..., sp.J])
    return np.add.reduceat(prod, sp.starts, axis=-1)


def jderiv(A: np.ndarray, m: int, n: int) -> np.ndarray:
    d = _order_of(A, n)
    if d == 0:
        raise JetError("jet order exhausted")
    src, fac = jet_space(n, d).deriv[m]
    return A[..., src] * fac


def jgrad(A: np.ndarray, n: int) -> np.ndarray:
    """Gradient with the derivative index as the last tensor axis."""
    return np.stack([jderiv(A, m, n) for m in range(n)], axis=-2)


def jconst(values, n: int, d: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    out = np.zeros(values.shape + (jet_space(n, d).size(d),))
    out[..., 0] = values
    return out


def jinv_matrix(A: np.ndarray, n: int) -> np.ndarray:
    """Inverse of a matrix-valued jet with invertible value at the origin."""
    d = _order_of(A, n)
    inv0 = np.linalg.inv(A[..., 0])
    N = A.copy()
    N[..., 0] = 0.0
    step = jmul("ij,jk->ik", jconst(-inv0, n, d), N, n)
    term = jconst(inv0, n, d)
    out = term
    for _ in range(d):
        term = jmul("ij,jk->ik", step, term, n)
        out = out + term
    return out


def jcompose(F: np.ndarray, phi: np.ndarray, n: int) -> np.ndarray:
    """``F o phi`` for ``phi`` with ``phi(0) = 0``; ``phi`` has shape ``(n, M)``."""
    if np.any(phi[..., 0] != 0):
        raise JetError("composition needs phi(0) = 0")
    d = min(_order_of(F, n), _order_of(phi, n))
    sp = jet_space(n, d)
    M = sp.size(d)
    phi = _truncate(phi, n, d)
    powers = np.zeros((M, M))
    powers[0, 0] = 1.0
    for i in range(1, M):
        powers[i] = jmul(",->", powers[sp.parent[i]], phi[sp.factor[i]], n)
    return _truncate(F, n, d) @ powers


# ---------------------------------------------------------------- jet objects

@dataclass(frozen=True, eq=False)
class JetTensor:
    n: int
    kinds: tuple
    coeffs: np.ndarray

    def __post_init__(self):
        kinds = tuple(self.kinds)
        if any(k not in KINDS for k in kinds):
            raise JetError(f"slot kinds must be drawn from {KINDS}")
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape[:-1] != (self.n,) * len(kinds):
            raise JetError(f"coefficient shape {c.shape} does not match rank {len(kinds)}")
        _order_of(c, self.n)
        object.__setattr__(self, "kinds", kinds)
        object.__setattr__(self, "coeffs", c)

    @property
    def order(self) -> int:
        return _order_of(self.coeffs, self.n)

    @property
    def rank(self) -> int:
        return len(self.kinds)

    @property
    def p(self) -> int:
        return sum(k.endswith("l") for k in self.kinds)

    @property
    def q(self) -> int:
        return sum(k.endswith("u") for k in self.kinds)

    def truncate(self, d: int) -> "JetTensor":
        return JetTensor(self.n, self.kinds, _truncate(self.coeffs, self.n, d))

    def transpose(self, perm) -> "JetTensor":
        perm = tuple(perm)
        axes = perm + (self.rank,)
        return JetTensor(self.n, tuple(self.kinds[i] for i in perm), self.coeffs.transpose(axes))

    def value(self) -> np.ndarray:
        return self.coeffs[..., 0]

    def __add__(self, other):
        return _combine(self, other, 1.0)

    def __sub__(self, other):
        return _combine(self, other, -1.0)

    def __neg__(self):
        return JetTensor(self.n, self.kinds, -self.coeffs)

    def __mul__(self, s: float):
        return JetTensor(self.n, self.kinds, float(s) * self.coeffs)

    __rmul__ = __mul__


def _combine(A: JetTensor, B: JetTensor, sign: float) -> JetTensor:
    if A.kinds != B.kinds or A.n != B.n:
        raise JetError(f"cannot combine slot kinds {A.kinds} and {B.kinds}")
    d = min(A.order, B.order)
    return JetTensor(A.n, A.kinds, _truncate(A.coeffs, A.n, d) + sign * _truncate(B.coeffs, B.n, d))


class JetMetric(JetTensor):
    """Symmetric rank-2 covariant jet, positive definite at the origin."""

    def __init__(self, n, coeffs, kinds=("Ml", "Ml")):
        super().__init__(n, tuple(kinds), coeffs)
        if self.kinds[0] != self.kinds[1] or not self.kinds[0].endswith("l"):
            raise JetError("a metric jet needs two lower slots of the same kind")
        c = self.coeffs
        if np.abs(c - np.swapaxes(c, 0, 1)).max() > 1e-12 * max(1.0, np.abs(c).max()):
            raise JetError("metric jet is not symmetric")
        if np.linalg.eigvalsh(c[..., 0]).min() <= 0:
            raise JetError("metric jet is not positive definite at the origin")

    @property
    def inverse(self) -> np.ndarray:
        inv = self.__dict__.get("_inv")
        if inv is None:
            inv = jinv_matrix(self.coeffs, self.n)
            object.__setattr__(self, "_inv", inv)
        return inv


@dataclass(frozen=True, eq=False)
class JetMap:
    """Components ``phi^alpha`` with ``phi(0) = 0`` and invertible Jacobian there."""

    n: int
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape[:-1] != (self.n,):
            raise JetError("a map jet has one scalar jet per target coordinate")
        if _order_of(c, self.n) < 1:
            raise JetError("a map jet needs order >= 1")
        if np.any(c[:, 0] != 0):
            raise JetError("maps are normalised to phi(0) = 0")
        if abs(np.linalg.det(c[:, 1 : self.n + 1])) < 1e-12:
            raise JetError("Jacobian at the origin is singular")
        object.__setattr__(self, "coeffs", c)

    @property
    def order(self) -> int:
        return _order_of(self.coeffs, self.n)

    @classmethod
    def identity(cls, n: int, order: int) -> "JetMap":
        c = np.zeros((n, jet_space(n, order).size(order)))
        c[:, 1 : n + 1] = np.eye(n)
        return cls(n, c)

    def differential(self) -> JetTensor:
        """``d phi`` with kinds ``(Ml, Nu)``: ``[i, alpha] = d_i phi^alpha``."""
        return JetTensor(self.n, ("Ml", "Nu"), np.swapaxes(jgrad(self.coeffs, self.n), 0, 1))

    def compose(self, other: "JetMap") -> "JetMap":
        """``self o other``."""
        return JetMap(self.n, jcompose(self.coeffs, other.coeffs, self.n))

    def inverse(self) -> "JetMap":
        n, d = self.n, self.order
        L = self.coeffs[:, 1 : n + 1]
        Linv = np.linalg.inv(L)
        Q = self.coeffs.copy()
        Q[:, 1 : n + 1] = 0.0
        ident = JetMap.identity(n, d).coeffs
        psi = Linv @ ident
        for _ in range(d):
            psi = Linv @ (ident - jcompose(Q, psi, n))
        return JetMap(n, psi)


# ---------------------------------------------------------------- geometry on jets

def jet_christoffel(g: JetMetric) -> JetTensor:
    """``Gamma[a, b, c] = Gamma^c_ab`` of ``g``, one order lower."""
    n = g.n
    if g.order < 1:
        raise JetError("jet order exhausted")
    dg = jgrad(g.coeffs, n)  # [x, y, m, :]
    lowered = (np.einsum("dba...->abd...", dg) + np.einsum("adb...->abd...", dg) - dg)
    gam = 0.5 * jmul("cd,abd->abc", g.inverse, lowered, n)
    kind = g.kinds[0]
    return JetTensor(n, (kind, kind, kind[0] + "u"), gam)


def _connection_terms(phi: JetMap | None, gbar: JetMetric, h: JetMetric):
    """Christoffel jets acting on M-slots and the pulled-back ``d_m phi^mu Gamma^h o phi``."""
    n = gbar.n
    gam_m = jet_christoffel(gbar).coeffs
    gam_h = jet_christoffel(h).coeffs
    if phi is None:
        return gam_m, gam_h
    comp = jcompose(gam_h.reshape(n ** 3, -1), phi.coeffs, n).reshape((n,) * 3 + (-1,))
    dphi = phi.differential().coeffs  # [m, mu]
    return gam_m, jmul("mu,ubc->mbc", dphi, comp, n)


def map_covariant_derivative(F: JetTensor, phi: JetMap | None, gbar: JetMetric,
                             h: JetMetric) -> JetTensor:
    """Map covariant derivative; the new ``Ml`` slot is appended last.

    ``M`` slots use the Levi-Civita connection of ``gbar`` and ``N`` slots the
    connection of ``h`` pulled back through ``phi`` (``None`` means the identity
    map, which gives the mixed covariant derivative).
    """
    gam_m, gam_n = _connection_terms(phi, gbar, h)
    return _covariant(F, gam_m, gam_n)


def _covariant(F: JetTensor, gam_m: np.ndarray, gam_n: np.ndarray) -> JetTensor:
    n = F.n
    if F.order < 1:
        raise JetError("jet order exhausted")
    r = F.rank
    s = ascii_lowercase[:r]
    out = jgrad(F.coeffs, n)
    for slot, kind in enumerate(F.kinds):
        Fs = s[:slot] + "z" + s[slot + 1:]
        gam = gam_m if kind[0] == "M" else gam_n
        if kind[1] == "l":
            out = _sub(out, jmul(f"{Fs},y{s[slot]}z->{s}y", F.coeffs, gam, n), n)
        else:
            out = _add(out, jmul(f"{Fs},yz{s[slot]}->{s}y", F.coeffs, gam, n), n)
    return JetTensor(n, F.kinds + ("Ml",), out)


def _add(A, B, n):
    d = min(_order_of(A, n), _order_of(B, n))
    return _truncate(A, n, d) + _truncate(B, n, d)


def _sub(A, B, n):
    return _add(A, -B, n)


def mixed_covariant_derivative(F: JetTensor, g: JetMetric, h: JetMetric) -> JetTensor:
    return map_covariant_derivative(F, None, g, h)


def levi_civita_derivative(F: JetTensor, g: JetMetric) -> JetTensor:
    """Every slot corrected with ``g``; ``N`` slots are treated as ``M`` slots."""
    gam = jet_christoffel(g).coeffs
    return _covariant(F, gam, gam)


def trace(F: JetTensor, i: int, j: int, metric_inverse: np.ndarray) -> JetTensor:
    """Contract slots ``i`` and ``j`` (both lower) with an inverse-metric jet."""
    if not (F.kinds[i].endswith("l") and F.kinds[j].endswith("l")):
        raise JetError("trace needs two lower slots")
    s = ascii_lowercase[: F.rank]
    keep = "".join(c for t, c in enumerate(s) if t not in (i, j))
    out = jmul(f"{s[i]}{s[j]},{s}->{keep}", metric_inverse, F.coeffs, F.n)
    kinds = tuple(k for t, k in enumerate(F.kinds) if t not in (i, j))
    return JetTensor(F.n, kinds, out)


def trace_upper(F: JetTensor, i: int, j: int, metric: np.ndarray) -> JetTensor:
    """Contract two upper slots with a metric jet."""
    if not (F.kinds[i].endswith("u") and F.kinds[j].endswith("u")):
        raise JetError("trace_upper needs two upper slots")
    s = ascii_lowercase[: F.rank]
    keep = "".join(c for t, c in enumerate(s) if t not in (i, j))
    out = jmul(f"{s[i]}{s[j]},{s}->{keep}", metric, F.coeffs, F.n)
    kinds = tuple(k for t, k in enumerate(F.kinds) if t not in (i, j))
    return JetTensor(F.n, kinds, out)


def map_laplacian(F: JetTensor, phi: JetMap | None, gbar: JetMetric, h: JetMetric) -> JetTensor:
    """``tr^gbar`` of two map covariant derivatives."""
    d1 = map_covariant_derivative(F, phi, gbar, h)
    d2 = map_covariant_derivative(d1, phi, gbar, h)
    return trace(d2, F.rank, F.rank + 1, gbar.inverse)


def tension(phi: JetMap, gbar: JetMetric, h: JetMetric) -> JetTensor:
    """Harmonic-map Laplacian ``tr^gbar nabla d phi`` (kind ``Nu``)."""
    dd = map_covariant_derivative(phi.differential(), phi, gbar, h)
    return trace(dd, 0, 2, gbar.inverse)


def pullback(F: JetTensor, phi: JetMap) -> JetTensor:
    """Compose every component with ``phi`` and contract ``Ml`` slots with ``d phi``."""
    if "Mu" in F.kinds:
        raise JetError("upper source slots cannot be pulled back")
    n = F.n
    r = F.rank
    flat = F.coeffs.reshape(n ** r if r else 1, -1)
    out = jcompose(flat, phi.coeffs, n).reshape((n,) * r + (-1,))
    dphi = phi.differential().coeffs  # [i, beta]
    s = ascii_lowercase[:r]
    for slot, kind in enumerate(F.kinds):
        if kind == "Ml":
            src = s[:slot] + "z" + s[slot + 1:]
            out = jmul(f"{src},{s[slot]}z->{s}", out, dphi, n)
    return JetTensor(n, F.kinds, out)


def pullback_metric(g: JetMetric, phi: JetMap) -> JetMetric:
    pb = pullback(g, phi)
    c = 0.5 * (pb.coeffs + np.swapaxes(pb.coeffs, 0, 1))
    return JetMetric(g.n, c, g.kinds)


def compose_metric(h: JetMetric, phi: JetMap) -> JetMetric:
    """``h o phi`` as a metric on the pulled-back bundle (kinds ``Nl``)."""
    n = h.n
    c = jcompose(h.coeffs.reshape(n * n, -1), phi.coeffs, n).reshape(n, n, -1)
    return JetMetric(n, c, ("Nl", "Nl"))


def difference_tensor(g: JetMetric, h: JetMetric) -> JetTensor:
    """``A = Gamma^g - Gamma^h`` with kinds ``(Ml, Ml, Nu)``."""
    a = _sub(jet_christoffel(g).coeffs, jet_christoffel(h).coeffs, g.n)
    return JetTensor(g.n, ("Ml", "Ml", "Nu"), a)


def gauge_V(g: JetMetric, h: JetMetric) -> JetTensor:
    A = difference_tensor(g, h)
    return trace(A, 0, 1, g.inverse)


def gauge_Z(g: JetMetric, h: JetMetric) -> JetTensor:
    """``Z^c = g^{ma} g^{nb} (nabla nabla A)_{a b n m}^c`` with the mixed derivative."""
    A = difference_tensor(g, h)  # [a, b, c]
    dA = mixed_covariant_derivative(A, g, h)  # [a, b, c, n]
    ddA = mixed_covariant_derivative(dA, g, h)  # [a, b, c, n, m]
    t = trace(ddA, 1, 3, g.inverse)  # [a, c, m]
    return trace(t, 0, 2, g.inverse)


# ---------------------------------------------------------------- random jets

def random_jet(rng, shape, n: int, order: int, scale: float = 1.0) -> np.ndarray:
    return scale * rng.uniform(-1.0, 1.0, tuple(shape) + (jet_space(n, order).size(order),))


def random_metric(rng, n: int, order: int, kinds=("Ml", "Ml"), spread: float = 0.3) -> JetMetric:
    c = random_jet(rng, (n, n), n, order, spread)
    c = 0.5 * (c + np.swapaxes(c, 0, 1))
    c[..., 0] = np.eye(n) + 0.5 * c[..., 0]
    return JetMetric(n, c, kinds)


def random_map(rng, n: int, order: int, spread: float = 0.3) -> JetMap:
    c = random_jet(rng, (n,), n, order, spread)
    c[:, 0] = 0.0
    c[:, 1 : n + 1] = np.eye(n) + 0.5 * c[:, 1 : n + 1]
    return JetMap(n, c)


def random_tensor(rng, n: int, order: int, kinds) -> JetTensor:
    return JetTensor(n, tuple(kinds), random_jet(rng, (n,) * len(kinds), n, order))
