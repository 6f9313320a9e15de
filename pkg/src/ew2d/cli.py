"""Command-line driver: ``ew2d {limit,simulate,report,selftest}``.

Exit codes: 0 success, 2 configuration or validation error, 3 numerical
failure, 4 selftest tolerance failure.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import tomli

from . import desk
from .errors import ConfigurationError, EW2DError, FixedPointFailure, SchemeFailure
from .kernel import TestFunction
from .limit import (check_grid, effective_coefficient, solve_fbsde_picard,
                    solve_j_squared, write_tabulation)
from .noise import GridSpec
from .solver import SQRT_2PI, SolverConfig, auto_dt, sigma_from_spec
from .stats import MIN_TEST_SAMPLES, EnsembleReport, run_ensemble

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_TOLERANCE = 0, 2, 3, 4


@dataclass
class ExperimentConfig:
    beta: float = 1.0
    sigma: dict = field(default_factory=lambda: {"label": "linear"})
    epsilons: list = field(default_factory=lambda: list(desk.EPS_LIST))
    L: float = desk.L
    n: int = desk.N
    dt: object = "auto"
    min_points_per_eps: float = desk.MIN_POINTS_PER_EPS
    T: float = desk.T
    times: list = field(default_factory=lambda: list(desk.TIMES))
    test_function: dict = field(default_factory=lambda: {"kind": "heat_gaussian",
                                                         "scale": desk.G_SCALE})
    replicas: int = 400
    seed: int = desk.SEED
    out: str = "ew2d-out"
    jobs: Optional[int] = None
    cache: Optional[str] = None
    mollifier: str = "bump"
    noise_filter: str = "covariance_root"
    limit: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)

    # -- construction ----------------------------------------------------
    @classmethod
    def from_toml(cls, path) -> "ExperimentConfig":
        try:
            with open(path, "rb") as fh:
                data = tomli.load(fh)
        except (OSError, tomli.TOMLDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}")
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        grid = data.pop("grid", {})
        for k in ("L", "n", "dt", "min_points_per_eps"):
            if k in grid:
                data[k] = grid.pop(k)
        if grid:
            raise ConfigurationError(f"unknown [grid] keys: {sorted(grid)}")
        if "eps" in data:
            data["epsilons"] = data.pop("eps")
        if isinstance(data.get("sigma"), str):
            data["sigma"] = {"label": data["sigma"]}
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise ConfigurationError(f"unknown config keys: {sorted(extra)}")
        cfg = cls(**data)
        if not isinstance(cfg.epsilons, list):
            cfg.epsilons = [cfg.epsilons]
        return cfg

    def override(self, args) -> "ExperimentConfig":
        upd = {}
        for name in ("beta", "seed", "replicas", "out", "jobs", "cache"):
            v = getattr(args, name, None)
            if v is not None:
                upd[name] = v
        if getattr(args, "eps", None):
            upd["epsilons"] = [float(e) for part in args.eps for e in part.split(",")]
        if getattr(args, "sigma", None):
            upd["sigma"] = {"label": args.sigma}
        if getattr(args, "dq", None) is not None:
            upd["limit"] = {**self.limit, "dq": args.dq}
        return replace(self, **upd)

    # -- derived objects ---------------------------------------------------
    def sigma_function(self):
        spec = dict(self.sigma)
        label = spec.pop("label", None)
        if label is None:
            raise ConfigurationError("sigma needs a label")
        try:
            return sigma_from_spec(label, **spec)
        except TypeError as exc:
            raise ConfigurationError(f"bad sigma parameters: {exc}")

    def g(self) -> TestFunction:
        spec = dict(self.test_function)
        kind = spec.get("kind", "heat_gaussian")
        try:
            if kind == "heat_gaussian":
                return TestFunction.heat_gaussian(float(spec["scale"]),
                                                  tuple(spec.get("center", (0.0, 0.0))))
            if kind == "bump":
                return TestFunction.bump(float(spec["scale"]),
                                         tuple(spec.get("center", (0.0, 0.0))))
        except (KeyError, ValueError) as exc:
            raise ConfigurationError(f"bad test function spec: {exc}")
        raise ConfigurationError(f"test function kind {kind!r} is not available from a config")

    def solver_config(self, eps: float) -> SolverConfig:
        dt = auto_dt(self.T, eps) if self.dt == "auto" else float(self.dt)
        grid = GridSpec(float(self.L), int(self.n), dt, float(self.min_points_per_eps))
        return SolverConfig(float(self.beta), float(eps), self.sigma_function(), grid,
                            float(self.T), self.mollifier, self.noise_filter)

    def limit_options(self) -> dict:
        opts = {"A_max": 6.0, "da": 0.005, "dq": None}
        opts.update({k: v for k, v in self.limit.items() if k in opts})
        return opts

    def tolerance(self, name: str, default: float) -> float:
        return float(self.tolerances.get(name, default))

    # -- validation ----------------------------------------------------------
    def validate(self, *, simulate: bool = True) -> list:
        """Check every downstream precondition; returns warnings."""
        warnings = []
        if not self.beta > 0:
            raise ConfigurationError(f"beta must be positive, got {self.beta!r}")
        sigma = self.sigma_function()
        try:
            sigma.validate()
        except EW2DError as exc:
            raise ConfigurationError(str(exc))
        if self.beta * sigma.lip >= SQRT_2PI:
            warnings.append(f"beta*sigma_Lip = {self.beta * sigma.lip:.4g} >= sqrt(2 pi): "
                            "not subcritical")
        opts = self.limit_options()
        check_grid(self.beta, sigma, **opts)
        if simulate:
            if not self.epsilons:
                raise ConfigurationError("no epsilon values given")
            for eps in self.epsilons:
                cfg = self.solver_config(eps)
                warnings.extend(f"eps={eps}: {w}" for w in cfg.regime_warnings())
                for t in self.times:
                    k = t / cfg.grid.dt
                    if t < 0 or t > self.T + 1e-12 or abs(k - round(k)) > 1e-8 * max(1, k):
                        raise ConfigurationError(
                            f"output time {t} is not a multiple of dt={cfg.grid.dt:g} in [0, T]")
            if sorted(self.times) != list(self.times) or len(set(self.times)) != len(self.times):
                raise ConfigurationError("times must be strictly increasing")
            if int(self.replicas) < MIN_TEST_SAMPLES:
                raise ConfigurationError(
                    f"replicas must be at least {MIN_TEST_SAMPLES} for the tests, "
                    f"got {self.replicas}")
            self.g()
            if self.jobs is not None and int(self.jobs) < 1:
                raise ConfigurationError("jobs must be at least 1")
        return warnings


def _load_config(args) -> ExperimentConfig:
    base = ExperimentConfig.from_toml(args.config) if args.config else ExperimentConfig()
    return base.override(args)


# ---------------------------------------------------------------------------
# subcommands


def cmd_limit(cfg: ExperimentConfig, out=None) -> int:
    out = out or sys.stdout
    for w in cfg.validate(simulate=False):
        print(f"warning: {w}", file=out)
    sigma = cfg.sigma_function()
    opts = cfg.limit_options()
    tol = float(cfg.limit.get("tol", 1e-6))
    max_iter = int(cfg.limit.get("max_iter", 50))
    route_tol = cfg.tolerance("route_agreement", 5e-3)
    pde = effective_coefficient(solve_j_squared(cfg.beta, sigma, **opts))
    fb = effective_coefficient(solve_fbsde_picard(cfg.beta, sigma, tol=tol,
                                                  max_iter=max_iter, **opts))
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / "limit.csv"
    write_tabulation([pde, fb], path)
    rel = abs(pde.nu_eff - fb.nu_eff) / max(abs(pde.nu_eff), 1e-300)
    print(f"nu_eff (pde)   = {pde.nu_eff:.8f}  +/- {pde.error_estimate:.2e}", file=out)
    print(f"nu_eff (fbsde) = {fb.nu_eff:.8f}  +/- {fb.error_estimate:.2e}  "
          f"({fb.iterations} Picard sweeps)", file=out)
    print(f"relative route disagreement {rel:.3e} (tolerance {route_tol:g})", file=out)
    print(f"wrote {path}", file=out)
    return EXIT_OK if rel <= route_tol else EXIT_NUMERIC


def cmd_simulate(cfg: ExperimentConfig, out=None) -> int:
    out = out or sys.stdout
    for w in cfg.validate():
        print(f"warning: {w}", file=out)
    sigma = cfg.sigma_function()
    opts = cfg.limit_options()
    nu = effective_coefficient(solve_j_squared(cfg.beta, sigma, **opts))
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    g = cfg.g()
    status = EXIT_OK
    for eps in cfg.epsilons:
        scfg = cfg.solver_config(eps)
        rep = run_ensemble(scfg, g, cfg.times, int(cfg.replicas), int(cfg.seed), nu=nu,
                           jobs=cfg.jobs, cache_dir=cfg.cache)
        stem = f"report_eps{eps:g}"
        rep.save(outdir / f"{stem}.json")
        rep.write_samples_csv(outdir / f"samples_eps{eps:g}.csv")
        s = rep.summary
        last = s["per_time"][-1]
        print(f"eps={eps:g}: Var X(T)={last['var']:.5g}  Sigma={last['sigma_theory']:.5g}  "
              f"ratio={last['ratio']:.4f}  blow-up fraction={s['blowup_fraction']:.3g}",
              file=out)
        if s["n_failed"]:
            status = EXIT_NUMERIC
    return status


REPORT_COLUMNS = ("eps", "empirical_var", "sigma_gT", "ratio", "ks_p_value")


def cmd_report(paths, outdir, out=None) -> int:
    out = out or sys.stdout
    rows = []
    for p in paths:
        try:
            rep = EnsembleReport.load(p)
        except (OSError, ValueError, TypeError) as exc:
            print(f"error: {p}: {exc}", file=out)
            return EXIT_CONFIG
        last = rep.summary["per_time"][-1]
        ks = last.get("normality", {}).get("p_value", math.nan)
        rows.append((rep.config["eps"], last["var"], last["sigma_theory"], last["ratio"], ks))
    rows.sort(key=lambda r: -r[0])
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        w.writerows([[repr(float(v)) for v in r] for r in rows])
    with open(outdir / "summary.dat", "w") as fh:
        fh.write("# " + " ".join(REPORT_COLUMNS) + "\n")
        for r in rows:
            fh.write(" ".join(f"{float(v):.10g}" for v in r) + "\n")
    print(" ".join(f"{c:>14}" for c in REPORT_COLUMNS), file=out)
    for r in rows:
        print(" ".join(f"{float(v):14.6g}" for v in r), file=out)
    return EXIT_OK


def cmd_selftest(out=None) -> int:
    out = out or sys.stdout
    from .selftest import run_selftest
    return EXIT_OK if run_selftest(out) else EXIT_TOLERANCE


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ew2d", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML experiment file")
        p.add_argument("--beta", type=float)
        p.add_argument("--sigma", help="built-in sigma label (linear, saturating)")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("limit", help="effective coefficient by both routes")
    common(p)
    p.add_argument("--dq", type=float, help="override the q step (must satisfy CFL)")

    p = sub.add_parser("simulate", help="run ensembles and write reports")
    common(p)
    p.add_argument("--eps", action="append", help="epsilon value(s), comma separated")
    p.add_argument("--seed", type=int)
    p.add_argument("--replicas", type=int)
    p.add_argument("--jobs", type=int, default=None,
                   help="parallel workers (default: $EW2D_JOBS or 1)")
    p.add_argument("--cache", help="checkpoint directory for replica chunks")

    p = sub.add_parser("report", help="tabulate existing reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", default=".", help="output directory")

    sub.add_parser("selftest", help="run the oracle suite")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.reports, args.out)
        if args.command == "selftest":
            return cmd_selftest()
        cfg = _load_config(args)
        if args.command == "limit":
            return cmd_limit(cfg)
        return cmd_simulate(cfg)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SchemeFailure, FixedPointFailure, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except EW2DError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
