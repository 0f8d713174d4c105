"""``geoflow`` command line: symbol, flow, uniqueness, garding and verify."""

from __future__ import annotations

import argparse
import json
import sys
import warnings

import numpy as np

from . import experiments as X
from .identities import verify_identities
from .jets import JetError
from .params import FlowParams, ParamError
from .symbol import Verdict, check_strong_ellipticity

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_CRITICAL = 2
EXIT_NOT_ELLIPTIC = 3
EXIT_CHECK_FAILED = 4

SYMBOL_TOL = 1e-9
GARDING_TOL = 1e-8
VERIFY_TOL = 1e-9


def _emit(record: dict):
    print(json.dumps(record, sort_keys=True, default=X._json_default))


def _symbol_params(ns) -> FlowParams:
    if ns.bach:
        base = FlowParams.bach_type(ns.n)
        return FlowParams(base.n, base.k, base.a, base.b, base.c, ns.alpha, ns.beta, ns.obstruction_shift)
    if ns.obstruction:
        base = FlowParams.obstruction(ns.n)
        return FlowParams(base.n, base.k, base.a, base.b, base.c, ns.alpha, ns.beta, ns.obstruction_shift)
    missing = [f for f in ("k", "a", "b", "c") if getattr(ns, f) is None]
    if missing:
        raise ParamError("missing " + ", ".join("--" + m for m in missing) + " (or use --bach)")
    return FlowParams(ns.n, ns.k, ns.a, ns.b, ns.c, ns.alpha, ns.beta, ns.obstruction_shift)


def cmd_symbol(ns) -> int:
    params = _symbol_params(ns)
    report = check_strong_ellipticity(params, tol=ns.tol)
    _emit(report.as_record())
    return {
        Verdict.STRONGLY_ELLIPTIC: EXIT_OK,
        Verdict.CRITICAL: EXIT_CRITICAL,
    }.get(report.verdict, EXIT_NOT_ELLIPTIC)


def _load(ns) -> X.RunConfig:
    return X.RunConfig.load(ns.config)


def cmd_flow(ns) -> int:
    cfg = _load(ns)
    out = X.resolve_output_dir(cfg, "flow", ns.output_dir)
    record, _ = X.run_flow(cfg, out)
    _emit({"experiment": "flow", "output_dir": str(out), **record.verdict})
    return EXIT_OK


def cmd_uniqueness(ns) -> int:
    cfg = _load(ns)
    res = X.run_uniqueness(cfg)
    out = X.resolve_output_dir(cfg, "uniqueness", ns.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rec = X.ExperimentRecord("uniqueness", cfg.hash(), ["t", "dt", "sup_difference", "energy_K"])
    # one row per variant; t is the step size index for a monotone key
    for i, dt in enumerate(res.dts):
        rec.add_row({
            "t": float(i),
            "dt": dt,
            "sup_difference": res.sup_differences[i - 1] if i > 0 and res.sup_differences else None,
            "energy_K": res.energy_K[i] if i < len(res.energy_K) else None,
        })
    rec.verdict = {
        "verdict": res.verdict,
        "sup_differences": res.sup_differences,
        "ratios": res.ratios,
        "energy_K": res.energy_K,
        "energy_e0": res.energy_e0,
        **res.details,
    }
    rec.write_csv(out / "uniqueness.csv")
    X.write_manifest(out / "manifest.json", cfg, rec, [])
    _emit({"experiment": "uniqueness", "output_dir": str(out), **rec.verdict})
    return EXIT_OK if res.verdict == "consistent-with-uniqueness" else EXIT_CHECK_FAILED


def cmd_garding(ns) -> int:
    cfg = _load(ns)
    report = check_strong_ellipticity(cfg.params())
    if report.verdict != Verdict.STRONGLY_ELLIPTIC:
        print(f"error: Garding check needs strongly elliptic parameters ({report.verdict.value})",
              file=sys.stderr)
        return EXIT_NOT_ELLIPTIC
    res = X.run_garding(cfg)
    record = {
        "experiment": "garding",
        "verdict": res.verdict,
        "lambda": res.lam,
        "K_hat": 0.0,
        "samples": int(res.margins.size),
        "worst_margin": res.worst_margin,
        "worst_oracle_margin": float(res.oracle_margins.min()),
        "max_oracle_gap": float(np.abs(res.margins - res.oracle_margins).max()),
    }
    _emit(record)
    return EXIT_OK if res.worst_margin >= -GARDING_TOL else EXIT_CHECK_FAILED


def cmd_verify(ns) -> int:
    report = verify_identities(seed=ns.seed, order=ns.order, trials=ns.trials, n=ns.n)
    red = X.reduced_form_check(draws=ns.draws, seed=ns.seed)
    print(report.format_table())
    print(f"symbol_reduced_form  {red:12.3e}  {ns.draws}")
    ok = report.ok(VERIFY_TOL) and red <= VERIFY_TOL
    print("all residuals <= %.0e: %s" % (VERIFY_TOL, "yes" if ok else "no"))
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="geoflow", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("symbol", help="classify strong ellipticity of the gauge-fixed operator")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--k", type=int)
    sp.add_argument("--a", type=float)
    sp.add_argument("--b", type=float)
    sp.add_argument("--c", type=float)
    sp.add_argument("--alpha", type=float, help="gauge weight (default: canonical)")
    sp.add_argument("--beta", type=float, help="gauge weight (default: canonical)")
    preset = sp.add_mutually_exclusive_group()
    preset.add_argument("--bach", action="store_true", help="k=1, a=-1/6, b=1/3, c=1/2")
    preset.add_argument("--obstruction", action="store_true", help="top-order obstruction coefficients (even n)")
    sp.add_argument("--obstruction-shift", type=float, default=0.0)
    sp.add_argument("--tol", type=float, default=SYMBOL_TOL, help="critical band half-width")
    sp.set_defaults(func=cmd_symbol)

    for name, func, text in (
        ("flow", cmd_flow, "integrate the gauge-fixed flow"),
        ("uniqueness", cmd_uniqueness, "compare independent pure-flow reconstructions"),
        ("garding", cmd_garding, "check the Garding inequality at the flat metric"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("config", help="YAML run configuration")
        if name != "garding":
            p.add_argument("--output-dir", help=f"overrides ${X.OUTPUT_ENV} and the config")
        else:
            p.set_defaults(output_dir=None)
        p.set_defaults(func=func)

    vp = sub.add_parser("verify", help="run the jet identity suite and the symbol identity")
    vp.add_argument("--seed", type=int, default=0)
    vp.add_argument("--order", type=int, default=6)
    vp.add_argument("--trials", type=int, default=100)
    vp.add_argument("--n", type=int, default=3)
    vp.add_argument("--draws", type=int, default=10_000)
    vp.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return ns.func(ns)
    except (ParamError, X.ConfigError, JetError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
