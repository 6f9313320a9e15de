"""Oracle suite behind ``ew2d selftest``: closed forms and small Monte Carlo
checks that together run in well under five minutes on one core."""

from __future__ import annotations

import math
import sys
import time

import numpy as np

from . import kernel
from .kernel import Mollifier, TestFunction
from .limit import (beta_threshold, closed_form_linear, effective_coefficient,
                    sample_xi, solve_fbsde_picard, solve_j_squared)
from .noise import GridSpec, make_stream, next_increment
from .solver import SolverConfig, evolve, micro_params, macro_from_micro, sigma_linear
from .stats import normality_test


def _heat_kernel():
    v = kernel.heat_kernel(1.0, [0.0, 0.0])
    semigroup = kernel.heat_kernel(2.0, [0.0, 0.0])
    return (abs(v - 1 / (2 * math.pi)) < 1e-15 and abs(semigroup - 1 / (4 * math.pi)) < 1e-15,
            f"G_1(0)={v:.10f}")


def _disc_correlation():
    R = kernel.correlation_of(Mollifier(kind="disc"))
    r0 = float(R(0.0))
    return abs(r0 - 1 / math.pi) < 1e-8 and float(R(2.0)) == 0.0, f"R(0)={r0:.10f}"


def _sigma_gT():
    g = TestFunction.heat_gaussian(0.5)
    s = kernel.sigma_gT(1.0, 1.0, g)
    c = kernel.covariance_cij(1.0, [0.5, 1.0], g)[0, 1]
    ok = (abs(s - math.log(3) / (4 * math.pi)) < 1e-6
          and abs(c - math.log(2.5 / 1.5) / (4 * math.pi)) < 1e-6)
    return ok, f"Sigma={s:.9f} C12={c:.9f}"


def _clipped():
    cap = 4 * math.pi
    a = kernel.clipped_singular_integral(math.e / cap, cap)
    b = kernel.clipped_singular_integral(1.0, cap)
    return abs(a - 2) < 1e-12 and abs(b - (math.log(cap) + 1)) < 1e-12, f"{a:.15f}"


def _thresholds():
    b2, thm = beta_threshold(2, 1.0)
    b4, _ = beta_threshold(4, 1.0)
    r = math.sqrt(2 * math.pi)
    ok = (b2 == r and abs(b4 - r / math.sqrt(6)) < 1e-15
          and abs(thm - r / (2 * math.sqrt(6))) < 1e-15)
    return ok, f"b0(2)={b2:.6f} b0(4)={b4:.6f} thm={thm:.6f}"


def _limit_routes():
    sig = sigma_linear()
    j = solve_j_squared(1.0, sig, error_estimate=False)
    exact = (1 / (4 * math.pi)) / (1 - 1 / (2 * math.pi))
    rel = abs(j.j_squared() / exact - 1)
    v = solve_fbsde_picard(1.0, sig, error_estimate=False)
    nu_p = effective_coefficient(j).nu_eff
    nu_f = effective_coefficient(v).nu_eff
    nu_c = closed_form_linear(1.0).nu_eff
    ok = rel < 1e-3 and abs(nu_p - nu_f) < 5e-3 * nu_c and v.iterations <= 20
    xi = sample_xi(1.0, sig, v, 20_000, 1)
    m2 = np.mean(xi**2)
    se = np.std(xi**2) / math.sqrt(xi.size)
    ok = ok and abs(m2 - 1 / (1 - 1 / (2 * math.pi))) < 3 * se
    return ok, (f"J2 rel err {rel:.2e}; nu pde={nu_p:.6f} fbsde={nu_f:.6f} "
                f"closed={nu_c:.6f}; E Xi^2={m2:.4f}+/-{se:.4f}")


def _noise_variance():
    eps = 0.2
    grid = GridSpec(3.2, 64, 1e-3)
    m = Mollifier(eps=eps)
    s = make_stream(3, 0)
    draws = np.array([next_increment(s, grid, m).values[::8, ::8] for _ in range(2000)])
    vals = draws.reshape(draws.shape[0], -1)
    target = grid.dt * float(kernel.correlation_of(m)(0.0)) / eps**2
    var = vals.var(axis=0).mean()
    # 64 well separated points per draw: standard error of the pooled variance
    se = target * math.sqrt(2.0 / vals.size)
    return abs(var - target) < 5 * se, f"var={var:.5g} target={target:.5g}"


def _solver_trivia():
    grid = GridSpec(3.2, 64, 1 / 64)
    cfg = SolverConfig(0.0, 0.2, sigma_linear(), grid, 0.5)
    traj = evolve(cfg, make_stream(1, 0), [0.0, 0.5])
    const = all(np.all(s.u == 1.0) for s in traj)
    cfg1 = SolverConfig(1.0, 0.2, sigma_linear(), grid, 0.5)
    a = evolve(cfg1, make_stream(5, 2), [0.5])[0].u
    b = evolve(cfg1, make_stream(5, 2), [0.5])[0].u
    mp = micro_params(SolverConfig(1.0, 0.5, sigma_linear(), GridSpec(8.0, 64, 0.5), 2.0))
    back = macro_from_micro(mp)
    ok = const and a.tobytes() == b.tobytes() and mp.horizon == 8.0 and back["T"] == 2.0
    return ok, "beta=0 constant, bit-identical rerun, micro horizon 8"


def _normality_calibration():
    rng = np.random.default_rng(11)
    rej = sum(normality_test(rng.standard_normal(1000)).p_value < 0.05 for _ in range(200))
    shifted = normality_test(rng.standard_normal(10_000) + 0.5).p_value
    skewed = normality_test(rng.exponential(size=10_000) - 1).p_value
    ok = 4 <= rej <= 18 and shifted < 0.05 and skewed < 0.05
    return ok, f"rejections {rej}/200, shifted p={shifted:.2g}, skewed p={skewed:.2g}"


CHECKS = [
    ("heat kernel", _heat_kernel),
    ("disc correlation", _disc_correlation),
    ("limit variance quadrature", _sigma_gT),
    ("clipped integral", _clipped),
    ("beta thresholds", _thresholds),
    ("limit coefficient routes", _limit_routes),
    ("noise variance", _noise_variance),
    ("solver invariants", _solver_trivia),
    ("normality calibration", _normality_calibration),
]


def run_selftest(out=None) -> bool:
    out = out or sys.stdout
    all_ok = True
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # report and keep going
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= bool(ok)
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail} "
              f"({time.perf_counter() - t0:.1f}s)", file=out, flush=True)
    return all_ok
