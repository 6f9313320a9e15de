"""Effective Edwards-Wilkinson coefficient by two independent routes.

PDE route: the quasilinear equation

    d_q J2 = 1/2 J2 d_aa J2,   J2(0, a) = beta^2 sigma(a)^2 / (4 pi),

marched explicitly on ``a in [0, A_max]`` up to ``q = 2``; then
``nu_eff = 2 sqrt(pi) sqrt(J2(2, 1))``.

FBSDE route: the conditional field ``v(q, a) = E[sigma^2(Xi(2)) | Xi(q) = a]``
of the diffusion ``dXi = beta / (2 sqrt(pi)) sqrt(v(q, Xi)) dB``, ``Xi(0) = 1``.
It is found by Picard iteration, each sweep a frozen-coefficient backward
solve of ``d_q v + beta^2/(8 pi) v_old d_aa v = 0`` with ``v(2, .) = sigma^2``.
Then ``nu_eff = beta sqrt(v(0, 1))``.

Both marches share one numba kernel working in reversed time ``tau``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numba
import numpy as np
from scipy.interpolate import CubicSpline

from .errors import (ConfigurationError, DomainError, FixedPointFailure,
                     SchemeFailure)
from .solver import SigmaFunction

Q_END = 2.0
CFL_SAFETY = 0.5
N_SNAPSHOTS = 400
_NEG_TOL = 1e-12

_OK, _CFL, _NEG, _NONFINITE = 0, 1, 2, 3


@numba.njit(cache=True)
def _march(u, kappa, dq, da, n_steps, snap_every, snaps, frozen, frozen_dtau):
    """Explicit march of ``u_tau = kappa c u_aa`` with ``c = u`` (frozen empty)
    or ``c`` linearly interpolated in tau from the rows of ``frozen``.

    Dirichlet at a = 0 (value held), zero second difference at a = A_max.
    Returns (status, step index).
    """
    m = u.size
    r = kappa * dq / (da * da)
    nxt = np.empty(m)
    use_frozen = frozen.shape[0] > 0
    kmax = frozen.shape[0] - 2
    snaps[0, :] = u
    for i in range(n_steps):
        k = 0
        w = 0.0
        if use_frozen:
            s = i * dq / frozen_dtau
            k = int(s)
            if k > kmax:
                k = kmax
            w = s - k
        nxt[0] = u[0]
        for j in range(1, m - 1):
            if use_frozen:
                c = (1.0 - w) * frozen[k, j] + w * frozen[k + 1, j]
            else:
                c = u[j]
            lam = r * c
            if lam > 0.5 + 1e-12:
                return _CFL, i
            nxt[j] = u[j] + lam * (u[j + 1] - 2.0 * u[j] + u[j - 1])
        nxt[m - 1] = 2.0 * nxt[m - 2] - nxt[m - 3]
        for j in range(m):
            v = nxt[j]
            if not math.isfinite(v):
                return _NONFINITE, i
            if v < -_NEG_TOL:
                return _NEG, i
            u[j] = v
        if (i + 1) % snap_every == 0:
            snaps[(i + 1) // snap_every, :] = u
    return _OK, n_steps


def _raise_status(status, step, dq, what):
    if status == _CFL:
        raise SchemeFailure(f"{what}: CFL ratio exceeded 1/2 at q-step {step} (dq={dq:.3g})")
    if status == _NEG:
        raise SchemeFailure(f"{what}: value below -1e-12 at q-step {step}")
    if status == _NONFINITE:
        raise SchemeFailure(f"{what}: non-finite value at q-step {step}")


@dataclass(frozen=True)
class _Plan:
    a: np.ndarray
    da: float
    dq: float
    n_steps: int
    snap_every: int

    @property
    def q_snaps(self):
        k = self.n_steps // self.snap_every
        return np.linspace(0.0, Q_END, k + 1)


def _plan(A_max, da, dq, coef_max, n_snaps=N_SNAPSHOTS) -> _Plan:
    """Grid and step plan; ``coef_max`` is the largest diffusion ``kappa * c``."""
    if A_max < 4:
        raise ConfigurationError(f"A_max must be at least 4, got {A_max!r}")
    if not da > 0:
        raise ConfigurationError(f"da must be positive, got {da!r}")
    m = int(round(A_max / da))
    if abs(m * da - A_max) > 1e-9 * A_max:
        raise ConfigurationError("A_max must be an integer multiple of da")
    a = np.linspace(0.0, A_max, m + 1)
    # scheme ratio lambda = coef dq / da^2; the CFL rule keeps it at most
    # CFL_SAFETY / 2, leaving headroom for the growth of the coefficient
    dq_cfl = math.inf if coef_max == 0 else CFL_SAFETY * da * da / (2.0 * coef_max)
    if dq is None:
        dq = min(dq_cfl, Q_END / n_snaps)
    elif not dq > 0:
        raise ConfigurationError(f"dq must be positive, got {dq!r}")
    elif dq > dq_cfl * (1 + 1e-12):
        raise ConfigurationError(
            f"dq={dq:.6g} violates the CFL bound dq <= {CFL_SAFETY} da^2 / max J2(0, .) "
            f"= {dq_cfl:.6g}"
        )
    n_snaps = min(n_snaps, max(1, math.ceil(Q_END / dq)))
    per = math.ceil(Q_END / (dq * n_snaps))
    n_steps = per * n_snaps
    return _Plan(a, da, Q_END / n_steps, n_steps, per)


def check_grid(beta: float, sigma: SigmaFunction, A_max: float = 6.0, da: float = 0.005,
               dq: Optional[float] = None) -> None:
    """Raise ConfigurationError if (A_max, da, dq) violate the scheme constraints."""
    a = np.linspace(0.0, A_max, max(2, int(round(A_max / da)) + 1))
    j0 = beta**2 * sigma(a) ** 2 / (4.0 * math.pi)
    _plan(A_max, da, dq, 0.5 * float(np.max(j0)))


def _readout(a, row, at=1.0) -> float:
    return float(CubicSpline(a, row)(at))


@dataclass
class JSquaredSolution:
    """J2 on the (q, a) grid; ``values[k]`` is the row at ``q[k]``."""

    beta: float
    sigma_label: str
    a: np.ndarray
    q: np.ndarray
    values: np.ndarray
    da: float
    dq: float
    cfl_ratio: float
    coarse_j21: Optional[float] = None

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]

    def j_squared(self, a: float = 1.0) -> float:
        return _readout(self.a, self.terminal, a)


@dataclass
class ConditionalField:
    """v(q, a) on the (q, a) grid; ``values[k]`` is the row at ``q[k]``."""

    beta: float
    sigma_label: str
    a: np.ndarray
    q: np.ndarray
    values: np.ndarray
    da: float
    dq: float
    iterations: int
    residuals: list = field(default_factory=list)
    coarse_v01: Optional[float] = None

    def at_q0(self, a: float = 1.0) -> float:
        return _readout(self.a, self.values[0], a)

    def lookup(self, q, a):
        """Bilinear interpolation of v, clamped to the grid."""
        q = np.clip(np.asarray(q, dtype=float), self.q[0], self.q[-1])
        a = np.clip(np.asarray(a, dtype=float), self.a[0], self.a[-1])
        sq = q / (self.q[1] - self.q[0])
        kq = np.minimum(sq.astype(int), self.q.size - 2)
        wq = sq - kq
        sa = a / self.da
        ka = np.minimum(sa.astype(int), self.a.size - 2)
        wa = sa - ka
        v = self.values
        lo = (1 - wa) * v[kq, ka] + wa * v[kq, ka + 1]
        hi = (1 - wa) * v[kq + 1, ka] + wa * v[kq + 1, ka + 1]
        return (1 - wq) * lo + wq * hi


def _j_march(beta, sigma, A_max, da, dq):
    a_probe = np.linspace(0.0, A_max, int(round(A_max / da)) + 1)
    j0 = beta**2 * sigma(a_probe) ** 2 / (4.0 * math.pi)
    plan = _plan(A_max, da, dq, 0.5 * float(np.max(j0)))
    u = j0.copy()
    snaps = np.empty((plan.n_steps // plan.snap_every + 1, u.size))
    status, i = _march(u, 0.5, plan.dq, da, plan.n_steps, plan.snap_every, snaps,
                       np.empty((0, 0)), 1.0)
    _raise_status(status, i, plan.dq, "J2 march")
    return plan, j0, snaps


def solve_j_squared(beta: float, sigma: SigmaFunction, A_max: float = 6.0,
                    da: float = 0.005, dq: Optional[float] = None,
                    error_estimate: bool = True) -> JSquaredSolution:
    """March the quasilinear J2 equation from q = 0 to q = 2."""
    if beta < 0:
        raise DomainError("beta must be non-negative")
    plan, j0, snaps = _j_march(beta, sigma, A_max, da, dq)
    ratio = 0.5 * float(np.max(snaps)) * plan.dq / da**2
    coarse = None
    if error_estimate:
        # same dq/da^2 ratio on a grid twice as coarse
        cq = None if dq is None else 4 * plan.dq
        cplan, _, csnaps = _j_march(beta, sigma, A_max, 2 * da, cq)
        coarse = _readout(cplan.a, csnaps[-1])
    return JSquaredSolution(beta, sigma.label, plan.a, plan.q_snaps, snaps, da,
                            plan.dq, ratio, coarse)


def _picard(beta, sigma, A_max, da, dq, tol, max_iter):
    kappa = beta**2 / (8.0 * math.pi)
    a = np.linspace(0.0, A_max, int(round(A_max / da)) + 1)
    terminal = sigma(a) ** 2
    plan = _plan(A_max, da, dq, kappa * float(np.max(terminal)))
    n_rows = plan.n_steps // plan.snap_every + 1
    dtau_snap = Q_END / (n_rows - 1)
    # rows indexed by reversed time tau = 2 - q
    prev = np.repeat(terminal[None, :], n_rows, axis=0)
    residuals = []
    for it in range(1, max_iter + 1):
        u = terminal.copy()
        snaps = np.empty_like(prev)
        status, i = _march(u, kappa, plan.dq, da, plan.n_steps, plan.snap_every,
                           snaps, prev, dtau_snap)
        _raise_status(status, i, plan.dq, f"Picard sweep {it}")
        res = float(np.max(np.abs(snaps - prev)))
        residuals.append(res)
        prev = snaps
        if res < tol:
            return plan, prev[::-1].copy(), it, residuals
    raise FixedPointFailure(residuals, f"Picard iteration did not reach tol={tol:g} "
                                       f"in {max_iter} sweeps")


def solve_fbsde_picard(beta: float, sigma: SigmaFunction, A_max: float = 6.0,
                       da: float = 0.005, dq: Optional[float] = None,
                       tol: float = 1e-6, max_iter: int = 50,
                       error_estimate: bool = True) -> ConditionalField:
    """Picard fixed point for the conditional field v(q, a)."""
    if beta < 0:
        raise DomainError("beta must be non-negative")
    if not tol > 0:
        raise ConfigurationError("tol must be positive")
    if beta == 0:
        a = np.linspace(0.0, A_max, int(round(A_max / da)) + 1)
        row = sigma(a) ** 2
        q = np.linspace(0.0, Q_END, 2)
        return ConditionalField(0.0, sigma.label, a, q, np.vstack([row, row]), da,
                                Q_END, 1, [0.0], _readout(a, row))
    plan, values, it, res = _picard(beta, sigma, A_max, da, dq, tol, max_iter)
    coarse = None
    if error_estimate:
        cq = None if dq is None else 4 * plan.dq
        cplan, cvals, _, _ = _picard(beta, sigma, A_max, 2 * da, cq, tol, max_iter)
        coarse = _readout(cplan.a, cvals[0])
    return ConditionalField(beta, sigma.label, plan.a, plan.q_snaps, values, da,
                            plan.dq, it, res, coarse)


@dataclass(frozen=True)
class LimitCoefficient:
    nu_eff: float
    route: str
    error_estimate: float
    beta: float
    sigma_label: str
    iterations: int = 0

    def as_row(self) -> dict:
        return {"beta": self.beta, "sigma_label": self.sigma_label, "route": self.route,
                "nu_eff": self.nu_eff, "error_estimate": self.error_estimate,
                "iterations": self.iterations}


def effective_coefficient(source, beta: Optional[float] = None) -> LimitCoefficient:
    """nu_eff from a solved J2 field (route ``pde``) or conditional field (``fbsde``)."""
    if isinstance(source, JSquaredSolution):
        j2 = source.j_squared(1.0)
        if j2 < -_NEG_TOL:
            raise SchemeFailure(f"negative interpolated J2(2, 1) = {j2:.3g}")
        nu = 2.0 * math.sqrt(math.pi) * math.sqrt(max(j2, 0.0))
        err = math.nan
        if source.coarse_j21 is not None:
            nu_c = 2.0 * math.sqrt(math.pi) * math.sqrt(max(source.coarse_j21, 0.0))
            err = abs(nu - nu_c)
        return LimitCoefficient(nu, "pde", err, source.beta, source.sigma_label, 0)
    if isinstance(source, ConditionalField):
        b = source.beta if beta is None else beta
        v01 = source.at_q0(1.0)
        if v01 < -_NEG_TOL:
            raise SchemeFailure(f"negative interpolated v(0, 1) = {v01:.3g}")
        nu = b * math.sqrt(max(v01, 0.0))
        err = math.nan
        if source.coarse_v01 is not None:
            err = abs(nu - b * math.sqrt(max(source.coarse_v01, 0.0)))
        return LimitCoefficient(nu, "fbsde", err, b, source.sigma_label,
                                source.iterations)
    raise TypeError(f"cannot read a coefficient from {type(source).__name__}")


def closed_form_linear(beta: float, slope: float = 1.0) -> LimitCoefficient:
    """nu_eff for sigma(x) = slope * x: beta slope / sqrt(1 - beta^2 slope^2 / (2 pi))."""
    b = beta * abs(slope)
    if b * b >= 2.0 * math.pi:
        raise DomainError("closed form needs beta * slope < sqrt(2 pi)")
    label = "linear" if slope == 1.0 else f"linear({slope:g})"
    return LimitCoefficient(b / math.sqrt(1.0 - b * b / (2.0 * math.pi)),
                            "closed_form", 0.0, beta, label, 0)


def limit_coefficient(beta: float, sigma: SigmaFunction, route: str = "pde",
                      **kw) -> LimitCoefficient:
    """Convenience wrapper: solve and read off nu_eff by the chosen route."""
    if route == "pde":
        return effective_coefficient(solve_j_squared(beta, sigma, **kw))
    if route == "fbsde":
        return effective_coefficient(solve_fbsde_picard(beta, sigma, **kw))
    raise ValueError(f"unknown route {route!r}")


class BetaThreshold(NamedTuple):
    moment_bound: float
    theorem_bound: float


def beta_threshold(p: float, sigma_lip: float) -> BetaThreshold:
    """Moment-route threshold sqrt(2 pi) / (sqrt(c_p) sigma_lip), c_p = p(p-1)/2,
    and the CLT working threshold sqrt(2 pi) / (2 sqrt 6 sigma_lip)."""
    if p < 2:
        raise DomainError(f"p must be at least 2, got {p!r}")
    if not sigma_lip > 0:
        raise DomainError("sigma_lip must be positive")
    c_p = p * (p - 1) / 2.0
    root = math.sqrt(2.0 * math.pi)
    return BetaThreshold(root / (math.sqrt(c_p) * sigma_lip),
                         root / (2.0 * math.sqrt(6.0) * sigma_lip))


def sample_xi(beta: float, sigma: SigmaFunction, v: ConditionalField, n_samples: int,
              seed: int, n_steps: int = 400, block: int = 1024) -> np.ndarray:
    """Euler-Maruyama samples of Xi(2) from Xi(0) = 1.

    Block ``b`` of samples draws its Brownian increments from a Philox stream
    keyed by ``seed`` with counter ``b``, so any block can be regenerated alone.
    """
    if v.sigma_label != sigma.label or not math.isclose(v.beta, beta):
        raise ValueError("conditional field was solved for a different (beta, sigma)")
    if n_samples < 0:
        raise ValueError("n_samples must be non-negative")
    amp = beta / (2.0 * math.sqrt(math.pi))
    dq = Q_END / n_steps
    key = np.random.SeedSequence([int(seed), 0x5A]).generate_state(2, dtype=np.uint64)
    out = np.empty(n_samples)
    for b, start in enumerate(range(0, n_samples, block)):
        size = min(block, n_samples - start)
        gen = np.random.Generator(np.random.Philox(key=key, counter=[0, b, 0, 0]))
        db = gen.standard_normal((n_steps, size)) * math.sqrt(dq)
        xi = np.ones(size)
        if amp > 0:
            for k in range(n_steps):
                vk = np.maximum(v.lookup(k * dq, xi), 0.0)
                xi = xi + amp * np.sqrt(vk) * db[k]
        out[start:start + size] = xi
    return out


TABULATION_COLUMNS = ("beta", "sigma_label", "route", "nu_eff", "error_estimate",
                      "iterations")


def write_tabulation(coeffs: Sequence[LimitCoefficient], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABULATION_COLUMNS)
        w.writeheader()
        for c in coeffs:
            w.writerow({k: (repr(v) if isinstance(v, float) else v)
                        for k, v in c.as_row().items()})
