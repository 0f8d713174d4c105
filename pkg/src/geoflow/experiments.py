"""Experiment configuration, orchestration and result records."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.linalg import expm

from .flow import (
    AdjustedRun,
    choose_dt,
    energy,
    energy_monitor,
    integrate_adjusted,
    mode_coefficient,
    reconstruct_pure_flow,
)
from .grid import Grid, MetricField, TensorField, _dealias_array, l2_norm, save_snapshot
from .params import FlowParams, ParamError
from .symbol import (
    Verdict,
    adjusted_rhs,
    check_strong_ellipticity,
    combined_symbol_batch,
    sym_basis,
    symbol_matrix,
    witness,
)

OUTPUT_ENV = "GFLOW_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- configuration

@dataclass
class RunConfig:
    """Flat experiment configuration; see ``RunConfig.from_mapping`` for the keys."""

    n: int = 3
    N: int = 16
    k: int = 1
    a: float = 0.0
    b: float = 0.0
    c: float = 1.0
    alpha: float | None = None
    beta: float | None = None
    obstruction_shift: float = 0.0
    preset: str | None = None  # "bach" or "obstruction"
    perturbation: str = "modes"  # "modes", "random" or "flat"
    modes: list | None = None  # default: the first unit wavevector
    direction: str = "random"  # "random", "witness" or "identity"
    amplitude: float = 1e-5
    random_band: int = 2
    C_dt: float = 0.5
    dt: float | None = None
    horizon: float = 1.0
    stride: int = 1
    output_dir: str | None = None
    seed: int = 0
    allow_unstable: bool = False
    reconstruct: bool = False
    samples: int = 100
    fd_step: float = 2e-5
    pair_amplitude: float | None = None
    pair_mode: list | None = None
    dt_divisors: list = field(default_factory=lambda: [1, 2, 4])

    @classmethod
    def from_mapping(cls, data: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        if cfg.modes is None:
            cfg.modes = [[1] + [0] * (cfg.n - 1)]
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a flat key-value mapping")
        return cls.from_mapping(data)

    def params(self) -> FlowParams:
        if self.preset == "bach":
            base = FlowParams.bach_type(self.n)
        elif self.preset == "obstruction":
            base = FlowParams.obstruction(self.n)
        elif self.preset is None:
            return FlowParams(self.n, self.k, self.a, self.b, self.c, self.alpha, self.beta,
                              self.obstruction_shift)
        else:
            raise ConfigError(f"unknown preset {self.preset!r}")
        return FlowParams(base.n, base.k, base.a, base.b, base.c, self.alpha, self.beta,
                          self.obstruction_shift)

    def grid(self) -> Grid:
        return Grid(self.n, self.N)

    def validate(self):
        if self.modes is None:
            self.modes = [[1] + [0] * (self.n - 1)]
        try:
            grid = self.grid()
            self.params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.perturbation not in ("modes", "random", "flat"):
            raise ConfigError(f"unknown perturbation {self.perturbation!r}")
        if self.direction not in ("random", "witness", "identity"):
            raise ConfigError(f"unknown direction {self.direction!r}")
        if self.perturbation != "flat" and not self.amplitude > 0:
            raise ConfigError("amplitude must be positive")
        if not self.horizon > 0:
            raise ConfigError("horizon must be positive")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if self.dt is not None and not self.dt > 0:
            raise ConfigError("dt must be positive")
        for xi in self.all_modes():
            if len(xi) != self.n or any(int(v) != v for v in xi):
                raise ConfigError(f"mode {xi} is not an integer vector of length {self.n}")
            if max(abs(int(v)) for v in xi) > grid.band:
                raise ConfigError(f"mode {xi} lies outside the resolved band |k| <= {grid.band}")
        d = self.dt_divisors
        if len(d) < 2 or any(int(v) != v or v < 1 for v in d):
            raise ConfigError("dt_divisors needs at least two positive integers")
        if any(b not in (a, 2 * a) for a, b in zip(d, d[1:])):
            raise ConfigError("each dt divisor must repeat or double the previous one")
        if self.perturbation == "random" and not 1 <= self.random_band <= grid.band:
            raise ConfigError(f"random_band must lie in [1, {grid.band}]")

    def all_modes(self) -> list:
        out = [list(m) for m in self.modes] if self.perturbation == "modes" else []
        if self.pair_mode is not None:
            out.append(list(self.pair_mode))
        return out

    def as_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _unit(M):
    return M / np.linalg.norm(M)


def mode_direction(kind: str, xi, n: int, rng) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    if kind == "witness":
        return _unit(np.dot(xi, xi) * np.eye(n) - np.outer(xi, xi))
    if kind == "identity":
        return np.eye(n) / math.sqrt(n)
    A = rng.standard_normal((n, n))
    return _unit(A + A.T)


def random_band_limited(grid: Grid, band: int, rng) -> np.ndarray:
    """Real symmetric field with Fourier support in ``|k_j| <= band``, zero mean."""
    n = grid.n
    shape = grid.rfft_wavevectors.shape[:-1] + (n, n)
    spec = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    spec = spec + np.swapaxes(spec, -1, -2)
    keep = np.all(np.abs(grid.rfft_wavevectors) <= band, axis=-1)
    keep &= np.any(grid.rfft_wavevectors != 0, axis=-1)
    spec *= keep[..., None, None]
    return np.fft.irfftn(spec, s=grid.shape, axes=grid.axes)


def initial_perturbation(cfg: RunConfig, grid: Grid, rng) -> tuple[np.ndarray, list]:
    """``(w, [(xi, eta), ...])`` with ``g0 = delta + w``."""
    n = grid.n
    w = np.zeros(grid.shape + (n, n))
    planted = []
    if cfg.perturbation == "modes":
        for xi in cfg.modes:
            eta = mode_direction(cfg.direction, xi, n, rng)
            w = w + cfg.amplitude * np.cos(grid.coords @ np.asarray(xi))[..., None, None] * eta
            planted.append((list(map(int, xi)), eta))
    elif cfg.perturbation == "random":
        f = random_band_limited(grid, cfg.random_band, rng)
        w = cfg.amplitude * f / np.abs(f).max()
    return w, planted


def resolve_output_dir(cfg: RunConfig, name: str, override: str | None = None) -> Path:
    base = override or os.environ.get(OUTPUT_ENV) or cfg.output_dir
    if base is None:
        base = "runs"
    return Path(base) / f"{name}-{cfg.hash()}"


# ---------------------------------------------------------------- records

@dataclass
class ExperimentRecord:
    name: str
    config_hash: str
    columns: list
    rows: list = field(default_factory=list)
    verdict: dict = field(default_factory=dict)

    def add_row(self, row: dict):
        if self.rows and not row["t"] > self.rows[-1]["t"]:
            raise ValueError("record rows must be strictly increasing in t")
        self.rows.append(row)

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\r\n")
            writer.writerow(self.columns)
            for row in self.rows:
                writer.writerow([_fmt(row.get(c)) for c in self.columns])
        return path


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_manifest(path, cfg: RunConfig, record: ExperimentRecord, files: list, extra=None) -> Path:
    man = {
        "experiment": record.name,
        "config_hash": record.config_hash,
        "config": cfg.as_dict(),
        "grid": {"n": cfg.n, "N": cfg.N},
        "verdict": record.verdict,
        "snapshots": files,
    }
    if extra:
        man.update(extra)
    path = Path(path)
    path.write_text(json.dumps(man, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj).__name__)


# ---------------------------------------------------------------- flow runs

def _step_size(cfg: RunConfig, params: FlowParams, grid: Grid, amplitude: float) -> tuple[float, int]:
    dt = cfg.dt if cfg.dt is not None else choose_dt(params, grid, amplitude, cfg.C_dt)
    steps = max(1, math.ceil(cfg.horizon / dt - 1e-9))
    return cfg.horizon / steps, steps


def modal_reference(params: FlowParams, xi, c0: np.ndarray, times: np.ndarray) -> np.ndarray:
    """``exp(-t Sigma(xi)) c0`` for every time; ``c0`` in ``sym_basis`` coordinates."""
    S = symbol_matrix(params, np.asarray(xi, dtype=float))
    return np.array([expm(-t * S) @ c0 for t in times])


def fitted_rate(times: np.ndarray, amps: np.ndarray) -> float:
    """Least-squares slope of ``log amplitude`` against time."""
    ok = amps > 0
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(times[ok], np.log(amps[ok]), 1)[0])


def run_flow(cfg: RunConfig, out_dir: Path | None = None, write: bool = True):
    """Adjusted-flow run with CSV, snapshots and manifest.  Returns ``(record, run)``."""
    grid = cfg.grid()
    params = cfg.params()
    rng = np.random.default_rng(cfg.seed)
    h = MetricField.flat(grid)
    w, planted = initial_perturbation(cfg, grid, rng)
    g0 = MetricField(grid, h.values + w)
    amp = float(np.abs(w).max())
    dt, steps = _step_size(cfg, params, grid, amp)
    run = integrate_adjusted(g0, h, params, dt, steps, record_gauge=cfg.reconstruct,
                             allow_unstable=cfg.allow_unstable)

    pure = None
    if cfg.reconstruct and run.halted is None and len(run.states) >= 3:
        pure = reconstruct_pure_flow(run, h, params)

    tracked = [xi for xi, _ in planted]
    columns = ["t", "l2_norm", "sup_norm", "energy_e", "pure_residual"]
    columns += ["amp_" + "_".join(str(v) for v in xi) for xi in tracked]
    record = ExperimentRecord("flow", cfg.hash(), columns)
    B = sym_basis(grid.n)
    m = params.k + 1
    amps = {tuple(xi): [] for xi in tracked}
    coefs = {tuple(xi): [] for xi in tracked}
    for i, st in enumerate(run.states):
        d = st.g.values - h.values
        row = {
            "t": float(st.t),
            "l2_norm": l2_norm(TensorField(grid, 2, 0, d), h),
            "sup_norm": float(np.abs(d).max()),
            "energy_e": energy(d, grid, m),
            "pure_residual": float(pure.residuals[i]) if pure is not None else None,
        }
        for xi, col in zip(tracked, columns[5:]):
            A = mode_coefficient(d, grid, xi)
            row[col] = float(np.linalg.norm(A))
            amps[tuple(xi)].append(row[col])
            coefs[tuple(xi)].append(np.einsum("lij,ij->l", B, A.real))
        record.add_row(row)

    times = run.times
    verdict = {"dt": dt, "steps": len(run.states) - 1, "t_final": float(times[-1])}
    if run.halted is not None:
        verdict["verdict"] = "halted"
        verdict["halt_reason"] = run.halted.reason
        verdict["halt_time"] = run.halted.t
    elif max(r["sup_norm"] for r in record.rows) <= 1e-12:
        verdict["verdict"] = "fixed-point"
    else:
        verdict["verdict"] = "completed"
    modal = {}
    for xi, eta in planted:
        key = tuple(xi)
        c0 = coefs[key][0]
        ref = modal_reference(params, xi, c0, times)
        got = np.array(coefs[key])
        ref_amp = np.linalg.norm(ref, axis=1)
        err = np.linalg.norm(got - ref, axis=1) / np.maximum(ref_amp, 1e-300)
        modal["_".join(map(str, xi))] = {
            "reference_rel_error": float(err.max()),
            "fitted_rate": fitted_rate(times, np.array(amps[key])),
            "reference_rate": fitted_rate(times, ref_amp),
        }
    verdict["modes"] = modal
    if pure is not None:
        verdict["max_pure_residual"] = pure.max_residual()
    record.verdict = verdict

    if write:
        out_dir = out_dir or resolve_output_dir(cfg, "flow")
        out_dir.mkdir(parents=True, exist_ok=True)
        record.write_csv(out_dir / "flow.csv")
        files = []
        for i, st in enumerate(run.states):
            if i % cfg.stride == 0 or i == len(run.states) - 1:
                name = f"g_{i:06d}.gflo"
                save_snapshot(out_dir / name, st.g)
                files.append({"t": float(st.t), "file": name})
        write_manifest(out_dir / "manifest.json", cfg, record, files, {"params": asdict(params)})
    return record, run


# ---------------------------------------------------------------- uniqueness

@dataclass
class UniquenessResult:
    dts: list
    sup_differences: list  # consecutive refinements
    ratios: list
    energy_K: list
    energy_e0: float
    verdict: str
    details: dict = field(default_factory=dict)


def _common_sup_difference(coarse, fine) -> float:
    """``sup_t ||gbar_coarse - gbar_fine||_inf`` at the coarse sample times."""
    ft = {round(s.t, 12): s for s in fine.states}
    worst = 0.0
    for s in coarse.states:
        other = ft.get(round(s.t, 12))
        if other is None:
            raise ParamError("refinement times are not nested")
        worst = max(worst, float(np.abs(s.g.values - other.g.values).max()))
    return worst


def run_uniqueness(cfg: RunConfig) -> UniquenessResult:
    """Pure-flow reconstructions at ``dt / d`` for each divisor, plus a perturbed-pair energy.

    Every variant integrates its own adjusted flow and its own gauge
    diffeomorphisms from identical initial data.  Gaps between consecutive
    variants are compared in sup norm over the coarse sample times.  The
    verdict is ``consistent-with-uniqueness`` iff either every gap is zero, or
    the halving gaps shrink by at least 3 (a second-order stepper converging to
    one limit), the coarsest gap stays within twice the error predicted from the
    next one, and ``K`` of the energy ``e(t) <= e(0) exp(K t)`` moves by at most
    10% between the two finest variants.
    """
    grid = cfg.grid()
    params = cfg.params()
    rng = np.random.default_rng(cfg.seed)
    h = MetricField.flat(grid)
    w, _ = initial_perturbation(cfg, grid, rng)
    g0 = MetricField(grid, h.values + w)
    dt0, steps0 = _step_size(cfg, params, grid, float(np.abs(w).max()))

    pair_amp = cfg.pair_amplitude if cfg.pair_amplitude is not None else 0.5 * cfg.amplitude
    pair_xi = np.asarray(cfg.pair_mode if cfg.pair_mode is not None else [1] + [0] * (grid.n - 1))
    eta = mode_direction("random", pair_xi, grid.n, rng)
    g0b = MetricField(grid, g0.values + pair_amp * np.cos(grid.coords @ pair_xi)[..., None, None] * eta)

    dts, pures, Ks = [], [], []
    e0 = 0.0
    cache = {}
    for d in cfg.dt_divisors:
        d = int(d)
        dt = dt0 / d
        if d not in cache:
            run = integrate_adjusted(g0, h, params, dt, steps0 * d, allow_unstable=cfg.allow_unstable)
            if run.halted is not None:
                return UniquenessResult([dt], [], [], [], 0.0, "halted", {"reason": run.halted.reason})
            pure = reconstruct_pure_flow(run, h, params)
            runb = integrate_adjusted(g0b, h, params, dt, steps0 * d, record_gauge=False,
                                      allow_unstable=cfg.allow_unstable)
            es = energy_monitor(run.states, runb.states, h, params.k + 1)
            cache[d] = (pure, es)
        pure, es = cache[d]
        pures.append(pure)
        Ks.append(es.K_hat)
        e0 = float(es.energy[0])
        dts.append(dt)

    diffs = [_common_sup_difference(pures[i], pures[i + 1]) for i in range(len(pures) - 1)]
    halving = [diffs[i] for i in range(len(diffs)) if dts[i] != dts[i + 1]]
    ratios = [a / b if b > 0 else math.inf for a, b in zip(halving, halving[1:])]
    details = {"max_pure_residual": [p.max_residual() for p in pures]}
    if all(x == 0.0 for x in diffs):
        verdict = "consistent-with-uniqueness"
    elif len(halving) < 2:
        verdict = "inconclusive"
        details["note"] = "need three distinct dt values to measure the discretisation error"
    else:
        predicted = 4.0 * halving[1]
        converging = all(r >= 3.0 for r in ratios)
        bounded = halving[0] <= 2.0 * predicted
        k1, k2 = Ks[-2], Ks[-1]
        stable = abs(k1 - k2) <= 0.1 * max(abs(k1), abs(k2)) or max(abs(k1), abs(k2)) < 1e-12
        details.update(predicted_gap=predicted, converging=converging, bounded=bounded,
                       energy_K_stable=stable)
        ok = converging and bounded and stable
        verdict = "consistent-with-uniqueness" if ok else "inconclusive"
    return UniquenessResult(dts, diffs, ratios, Ks, e0, verdict, details)


# ---------------------------------------------------------------- Garding

@dataclass
class GardingResult:
    lam: float
    worst_margin: float
    margins: np.ndarray
    oracle_margins: np.ndarray
    verdict: str


def seminorm_sq(w: np.ndarray, grid: Grid, m: int) -> float:
    """``||nabla^m w||^2_{L^2}`` with the flat metric."""
    return energy(w, grid, m) - energy(w, grid, 0) / 2.0


def _plancherel_form(params: FlowParams, u: np.ndarray, grid: Grid) -> float:
    c = np.fft.fftn(u, axes=grid.axes) / np.prod(grid.shape)
    k = np.stack(np.meshgrid(*([grid.wavenumbers] * grid.n), indexing="ij"), axis=-1)
    q = combined_symbol_batch(params, k, c.real) + combined_symbol_batch(params, k, c.imag)
    return float((2 * np.pi) ** grid.n * np.sum(q))


def garding_margin(u: np.ndarray, grid: Grid, params: FlowParams, lam: float, step: float = 2e-5) -> float:
    """``int <-L u, u> - lam ||nabla^(k+1) u||^2`` with ``-L u`` by centred differences."""
    if not np.any(u):
        return 0.0
    h = MetricField.flat(grid)
    plus = adjusted_rhs(MetricField(grid, h.values + step * u), h, params)
    minus = adjusted_rhs(MetricField(grid, h.values - step * u), h, params)
    minus_Lu = -_dealias_array((plus - minus) / (2 * step), grid)
    form = float(np.sum(minus_Lu * u) * grid.cell_volume)
    return form - lam * seminorm_sq(u, grid, params.k + 1)


def run_garding(cfg: RunConfig, samples: int | None = None) -> GardingResult:
    """Check ``int <-L u, u> >= Lambda ||nabla^(k+1) u||^2`` on random band-limited ``u``.

    ``-L u`` comes from a centred difference of the full nonlinear operator at the
    flat metric; every ``u`` is scaled to unit ``||nabla^(k+1) u||``.
    """
    grid = cfg.grid()
    params = cfg.params()
    report = check_strong_ellipticity(params)
    if report.verdict != Verdict.STRONGLY_ELLIPTIC:
        raise ParamError(f"Garding check needs strongly elliptic parameters ({report.verdict.value})")
    rng = np.random.default_rng(cfg.seed)
    m = params.k + 1
    margins, oracle = [], []
    for _ in range(samples or cfg.samples):
        u = random_band_limited(grid, min(cfg.random_band, grid.band), rng)
        u = u / math.sqrt(seminorm_sq(u, grid, m))
        margins.append(garding_margin(u, grid, params, report.lam, cfg.fd_step))
        oracle.append(_plancherel_form(params, u, grid) - report.lam)
    margins = np.array(margins)
    worst = float(margins.min())
    verdict = "holds" if worst >= -1e-8 else "violated"
    return GardingResult(report.lam, worst, margins, np.array(oracle), verdict)


# ---------------------------------------------------------------- instability

@dataclass
class InstabilityResult:
    predicted_rate: float
    measured_rate: float
    max_amplitude: float
    times: np.ndarray
    amplitudes: np.ndarray


def run_instability(params: FlowParams, N: int = 8, amplitude: float = 1e-6, horizon: float = 2.0,
                    dt: float = 0.05, xi=None) -> InstabilityResult:
    """Grow the witness mode below the ellipticity threshold and fit its rate.

    The perturbation depends on ``x^1`` only, so every other wavevector stays
    exactly zero and only the modes along ``xi`` can be excited.
    """
    n = params.n
    grid = Grid(n, N)
    xi = np.asarray(xi if xi is not None else [1] + [0] * (n - 1))
    if np.count_nonzero(xi) != 1:
        raise ParamError("the instability run uses a single-axis wavevector")
    h = MetricField.flat(grid)
    _, eta = witness(n)
    s = float(xi @ xi)
    eta = _unit(s * np.eye(n) - np.outer(xi, xi))
    g0 = MetricField(grid, h.values + amplitude * np.cos(grid.coords @ xi)[..., None, None] * eta)
    steps = max(1, round(horizon / dt))
    run = integrate_adjusted(g0, h, params, horizon / steps, steps, record_gauge=False,
                             allow_unstable=True)
    times = run.times
    amps = np.array([abs(np.sum(mode_coefficient(st.g.values - h.values, grid, xi) * eta))
                     for st in run.states])
    sup = max(float(np.abs(st.g.values - h.values).max()) for st in run.states)
    predicted = -params.c * (0.5 + params.a_eff * (n - 1)) * s ** (params.k + 1)
    return InstabilityResult(predicted, fitted_rate(times, amps), sup, times, amps)


# ---------------------------------------------------------------- reduced form

def reduced_form_check(draws: int = 10_000, seed: int = 0) -> float:
    """Worst relative gap between the combined symbol and its closed reduced form.

    Draws ``n in 2..5``, ``k in 0..3``, random ``a, b, c`` (``b = 0`` when ``k = 0``),
    covectors, symmetric directions and, for half the draws, a random background
    metric.  The gap is scaled by ``c |xi|^(2k+2) |eta|^2``.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    per = max(1, draws // 16)
    for n in range(2, 6):
        for k in range(4):
            a = rng.uniform(-1, 1, per)
            b = np.zeros(per) if k == 0 else rng.uniform(-1, 1, per)
            c = rng.uniform(0.1, 2, per)
            xi = rng.standard_normal((per, n))
            E = rng.standard_normal((per, n, n))
            eta = E + np.swapaxes(E, -1, -2)
            M = rng.standard_normal((per, n, n))
            G = M @ np.swapaxes(M, -1, -2) + n * np.eye(n)
            G[: per // 2] = np.eye(n)
            Gi = np.linalg.inv(G)
            s = np.einsum("pi,pij,pj->p", xi, Gi, xi)
            eta2 = np.einsum("pab,pbc,pcd,pda->p", Gi, eta, Gi, eta)
            D = np.einsum("pi,pj->pij", xi, xi) - s[:, None, None] * G
            inner = np.einsum("pab,pbc,pcd,pda->p", Gi, D, Gi, eta)
            red = c * s ** (k - 1) * (0.5 * s * s * eta2 + a * inner ** 2)
            got = np.empty(per)
            for i in range(per):
                params = FlowParams(n, k, float(a[i]), float(b[i]), float(c[i]))
                got[i] = combined_symbol_batch(params, xi[i], eta[i], G[i])
            scale = c * s ** (k + 1) * eta2
            worst = max(worst, float(np.max(np.abs(got - red) / scale)))
    return worst
