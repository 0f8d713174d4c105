"""Randomised checks of the map-covariant-derivative identities on jets.

Every identity is evaluated on full jets at the origin; the residual is
``max |lhs - rhs| / max(1, max |lhs|, max |rhs|)`` maximised over trials.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from string import ascii_lowercase

import numpy as np

from . import jets as J

MIN_ORDER = 3
ORDER_V_K1 = 4
ORDER_Z = 5


@dataclass
class IdentityRow:
    name: str
    residual: float | None
    trials: int
    note: str = ""

    @property
    def skipped(self) -> bool:
        return self.residual is None


@dataclass
class IdentityReport:
    seed: int
    order: int
    n: int
    rows: list = field(default_factory=list)

    def ok(self, tol: float = 1e-9) -> bool:
        return all(r.residual is None or r.residual <= tol for r in self.rows)

    def max_residual(self) -> float:
        vals = [r.residual for r in self.rows if r.residual is not None]
        return max(vals) if vals else 0.0

    def format_table(self) -> str:
        width = max(len(r.name) for r in self.rows)
        lines = [f"{'identity':<{width}}  {'max_residual':>12}  trials"]
        for r in self.rows:
            res = "skipped" if r.residual is None else f"{r.residual:12.3e}"
            tail = f"  {r.note}" if r.note else ""
            lines.append(f"{r.name:<{width}}  {res:>12}  {r.trials}{tail}")
        return "\n".join(lines)


def residual(lhs, rhs) -> float:
    a = lhs.coeffs if isinstance(lhs, J.JetTensor) else np.asarray(lhs)
    b = rhs.coeffs if isinstance(rhs, J.JetTensor) else np.asarray(rhs)
    m = min(a.shape[-1], b.shape[-1])
    a, b = a[..., :m], b[..., :m]
    scale = max(1.0, float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)))
    return float(np.abs(a - b).max(initial=0.0)) / scale


def _identity_differential(n, order):
    c = J.jconst(np.eye(n), n, order)
    return J.JetTensor(n, ("Ml", "Nu"), c)


def _upper_A_correction(F: J.JetTensor, A: J.JetTensor) -> J.JetTensor:
    """``sum over upper slots of F^{..c..} A^{a}_{c m}`` with ``m`` appended."""
    n, r = F.n, F.rank
    s = ascii_lowercase[:r]
    out = None
    for slot, kind in enumerate(F.kinds):
        if not kind.endswith("u"):
            continue
        Fs = s[:slot] + "z" + s[slot + 1:]
        term = J.jmul(f"{Fs},zy{s[slot]}->{s}y", F.coeffs, A.coeffs, n)
        out = term if out is None else J._add(out, term, n)
    return J.JetTensor(n, F.kinds + ("Ml",), out)


def _setting(rng, n, order):
    g = J.random_metric(rng, n, order)
    h = J.random_metric(rng, n, order)
    phi = J.random_map(rng, n, order)
    gbar = J.pullback_metric(g, phi)
    return g, h, phi, gbar


def _perturb_high(rng, phi: J.JetMap, degrees=(3, 4), scale=0.3) -> J.JetMap:
    sp = J.jet_space(phi.n, phi.order)
    c = phi.coeffs.copy()
    sel = np.isin(sp.degree, degrees)
    c[:, sel] += scale * rng.uniform(-1, 1, (phi.n, int(sel.sum())))
    return J.JetMap(phi.n, c)


def _z_defect(gbar, h, phi):
    """``phi^* Z^{g,h} + (Lap^{gbar,h})^2 phi`` at the origin, where ``phi^* g = gbar``."""
    psi = phi.inverse()
    g = J.pullback_metric(gbar, psi)
    Z = J.gauge_Z(g, h)
    lhs = J.pullback(Z, phi)
    tau = J.tension(phi, gbar, h)
    bil = J.map_laplacian(tau, phi, gbar, h)
    return lhs.coeffs[..., 0] + bil.coeffs[..., 0]


def verify_identities(seed: int = 0, order: int = 6, trials: int = 10, n: int = 3) -> IdentityReport:
    """Run every identity family on random jets and report the worst residual of each."""
    if order < MIN_ORDER:
        raise J.JetError(f"identity checks need jet order >= {MIN_ORDER}, got {order}")
    if trials < 1:
        raise J.JetError("trials must be positive")
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}

    def record(name, value):
        worst[name] = max(worst.get(name, 0.0), value)

    for _ in range(trials):
        g, h, phi, gbar = _setting(rng, n, order)
        hphi = J.compose_metric(h, phi)
        dphi = phi.differential()
        F = J.random_tensor(rng, n, order, ("Ml", "Ml", "Nu"))
        F_up = J.random_tensor(rng, n, order, ("Ml", "Nu", "Nu"))
        pF = J.pullback(F, phi)

        zero_gbar = J.map_covariant_derivative(gbar, phi, gbar, h)
        record("compat_source_metric", residual(zero_gbar, 0 * zero_gbar.coeffs))
        zero_h = J.map_covariant_derivative(hphi, phi, gbar, h)
        record("compat_target_metric", residual(zero_h, 0 * zero_h.coeffs))

        A = J.difference_tensor(g, h)
        did = _identity_differential(n, order)
        record("mixed_derivative_of_identity",
               residual(J.mixed_covariant_derivative(did, g, h), -A.transpose((0, 2, 1))))

        lhs = J.levi_civita_derivative(F, g)
        rhs = J.mixed_covariant_derivative(F, g, h) + _upper_A_correction(F, A)
        record("levi_civita_vs_mixed", residual(lhs, rhs))

        record("pullback_of_identity_differential", residual(J.pullback(did, phi), dphi))

        record("trace_naturality_lower",
               residual(J.trace(pF, 0, 1, gbar.inverse), J.pullback(J.trace(F, 0, 1, g.inverse), phi)))
        record("trace_naturality_upper",
               residual(J.trace_upper(J.pullback(F_up, phi), 1, 2, hphi.coeffs),
                        J.pullback(J.trace_upper(F_up, 1, 2, h.coeffs), phi)))

        record("derivative_naturality",
               residual(J.map_covariant_derivative(pF, phi, gbar, h),
                        J.pullback(J.mixed_covariant_derivative(F, g, h), phi)))
        record("laplacian_naturality",
               residual(J.map_laplacian(pF, phi, gbar, h),
                        J.pullback(J.map_laplacian(F, None, g, h), phi)))

        ddphi = J.map_covariant_derivative(dphi, phi, gbar, h)
        record("difference_tensor_pullback",
               residual(J.pullback(A, phi), -ddphi.transpose((0, 2, 1))))
        V = J.gauge_V(g, h)
        tau = J.tension(phi, gbar, h)
        record("gauge_V_pullback", residual(J.pullback(V, phi), -tau))

        if order >= ORDER_V_K1:
            lapV = J.map_laplacian(V, None, g, h)
            record("gauge_V_laplacian_pullback",
                   residual(J.pullback(lapV, phi), -J.map_laplacian(tau, phi, gbar, h)))

        if order >= ORDER_Z:
            base = _z_defect(gbar, h, phi)
            other = _z_defect(gbar, h, _perturb_high(rng, phi))
            record("gauge_Z_top_order", residual(base, other))

        # flat source metric in curvilinear coordinates, flat constant target
        chi = J.random_map(rng, n, order)
        flat = J.JetMetric(n, J.jconst(np.eye(n), n, order))
        gflat = J.pullback_metric(flat, chi)
        G = J.random_tensor(rng, n, order, ("Ml", "Nu"))
        dd = J.map_covariant_derivative(J.map_covariant_derivative(G, phi, gflat, flat), phi, gflat, flat)
        record("flat_commutator", residual(dd, dd.transpose((0, 1, 3, 2))))

    report = IdentityReport(seed=seed, order=order, n=n)
    for name, value in worst.items():
        report.rows.append(IdentityRow(name, value, trials))
    if order < ORDER_V_K1:
        report.rows.append(IdentityRow("gauge_V_laplacian_pullback", None, 0,
                                       f"insufficient order (needs >= {ORDER_V_K1})"))
    if order < ORDER_Z:
        report.rows.append(IdentityRow("gauge_Z_top_order", None, 0,
                                       f"insufficient order (needs >= {ORDER_Z})"))
    return report
