"""Heat kernel, mollifiers and the deterministic limit-variance quadratures.

Everything here is a pure function of its inputs. Free-space kernels are
used for the deterministic integrals; the torus variant exists so that the
periodization error of the simulation domain can be measured.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate, interpolate

from .errors import DivergentIntegralError, DomainError, ValidationError

TWO_PI = 2.0 * math.pi

# ---------------------------------------------------------------------------
# heat kernel


def heat_kernel(t: float, x, L: Optional[float] = None):
    """Two-dimensional heat kernel ``exp(-|x|^2 / 2t) / (2 pi t)``.

    ``x`` has shape ``(..., 2)``. With ``L`` given, the kernel of the torus
    ``[0, L)^2`` is returned: periodic images are summed until the neglected
    tail is below 1e-14.
    """
    if not t > 0:
        raise DomainError(f"heat kernel needs t > 0, got {t!r}")
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 2:
        raise ValueError("x must have a trailing axis of length 2")
    if L is None:
        r2 = np.sum(x * x, axis=-1)
        return np.exp(-r2 / (2.0 * t)) / (TWO_PI * t)
    x = x - L * np.round(x / L)
    # images beyond m*L - L/2 contribute less than exp(-40) relative
    m = 1 + int(math.ceil(math.sqrt(80.0 * t) / L))
    out = np.zeros(x.shape[:-1])
    for i in range(-m, m + 1):
        for j in range(-m, m + 1):
            dx = x[..., 0] - i * L
            dy = x[..., 1] - j * L
            out += np.exp(-(dx * dx + dy * dy) / (2.0 * t))
    return out / (TWO_PI * t)


def clipped_singular_integral(t: float, cap: float) -> float:
    """Closed form of ``int_0^t min(1/s, cap) ds``."""
    if not t > 0 or not cap > 0:
        raise DomainError("clipped_singular_integral needs t > 0 and cap > 0")
    if cap * t >= 1.0:
        return math.log(cap * t) + 1.0
    return cap * t


# ---------------------------------------------------------------------------
# mollifiers


def _bump_raw(r):
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inside = r < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
    return out


@functools.lru_cache(maxsize=None)
def _bump_constant() -> float:
    val, _ = integrate.quad(
        lambda r: r * math.exp(-1.0 / (1.0 - r * r)) if r < 1 else 0.0,
        0.0, 1.0, epsabs=1e-15, epsrel=1e-13, limit=200,
    )
    return 1.0 / (TWO_PI * val)


def _bump_profile(r):
    return _bump_constant() * _bump_raw(r)


def _disc_profile(r):
    r = np.asarray(r, dtype=float)
    return np.where(r <= 1.0, 1.0 / math.pi, 0.0)


_BUILTIN_PROFILES = {"bump": _bump_profile, "disc": _disc_profile}


@dataclass(frozen=True)
class Mollifier:
    """Radial, non-negative, unit-mass smoothing profile at scale ``eps``.

    ``kind`` is ``"bump"`` (the standard C_c^infty bump) or ``"disc"`` (the
    flat indicator of the unit disc, a closed-form test case). A custom
    radial profile can be supplied through ``profile_fn``; it must vanish
    beyond ``radius``.
    """

    eps: float = 1.0
    kind: str = "bump"
    radius: float = 1.0
    profile_fn: Optional[Callable] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.eps > 0:
            raise DomainError(f"eps must be positive, got {self.eps!r}")
        if self.profile_fn is None and self.kind not in _BUILTIN_PROFILES:
            raise ValueError(f"unknown mollifier kind {self.kind!r}")

    def profile(self, r):
        """Unit-scale radial profile phi(|x|)."""
        r = np.asarray(r, dtype=float)
        fn = self.profile_fn or _BUILTIN_PROFILES[self.kind]
        vals = np.asarray(fn(r), dtype=float)
        return np.where(r > self.radius, 0.0, vals)

    def scaled(self, r):
        """phi^eps(|x|) = eps^-2 phi(|x| / eps)."""
        return self.profile(np.asarray(r, dtype=float) / self.eps) / self.eps**2

    def with_eps(self, eps: float) -> "Mollifier":
        return Mollifier(eps=eps, kind=self.kind, radius=self.radius,
                         profile_fn=self.profile_fn)

    def mass(self) -> float:
        """Integral of the unit-scale profile over the plane."""
        val, _ = integrate.quad(
            lambda r: r * float(self.profile(r)), 0.0, self.radius,
            epsabs=1e-14, epsrel=1e-12, limit=200,
        )
        return TWO_PI * val

    def sup(self) -> float:
        rs = np.linspace(0.0, self.radius, 2001)
        return float(np.max(self.profile(rs)))

    def validate(self, tol: float = 1e-8) -> None:
        rs = np.linspace(0.0, 1.5 * self.radius, 301)
        vals = self.profile(rs)
        if np.any(vals < 0):
            raise ValidationError("mollifier profile takes negative values")
        mass = self.mass()
        if abs(mass - 1.0) > tol:
            raise ValidationError(f"mollifier mass is {mass:.12g}, expected 1")


# ---------------------------------------------------------------------------
# correlation R = phi * phi(-.)


@dataclass(frozen=True)
class Correlation:
    """Radial samples of ``R(x) = int phi(x + y) phi(y) dy`` (unit scale)."""

    radii: np.ndarray
    values: np.ndarray
    support_radius: float

    @functools.cached_property
    def _spline(self):
        return interpolate.CubicSpline(self.radii, self.values, bc_type=((1, 0.0), "not-a-knot"))

    def __call__(self, r):
        r = np.abs(np.asarray(r, dtype=float))
        out = np.asarray(self._spline(np.minimum(r, self.support_radius)))
        return np.where(r >= self.support_radius, 0.0, np.maximum(out, 0.0))

    def scaled(self, r, eps: float):
        """eps^-2 R(|x| / eps)."""
        return self(np.asarray(r, dtype=float) / eps) / eps**2

    def mass(self) -> float:
        val, _ = integrate.quad(
            lambda r: r * float(self(r)), 0.0, self.support_radius,
            epsabs=1e-13, epsrel=1e-11, limit=400,
        )
        return TWO_PI * val


_GL_THETA = np.polynomial.legendre.leggauss(96)


def _angular_overlap(m: Mollifier, r: float, d: float) -> float:
    """int_0^{2 pi} phi(|y + d e_1|) d theta for |y| = r."""
    a = m.radius
    if r == 0.0 or d == 0.0:
        return TWO_PI * float(m.profile(math.hypot(r, d)))
    c = (a * a - r * r - d * d) / (2.0 * r * d)
    if c <= -1.0:
        return 0.0
    lo = 0.0 if c >= 1.0 else math.acos(c)
    # integrand is smooth on [lo, pi]; the support boundary sits at lo
    nodes, weights = _GL_THETA
    theta = 0.5 * (math.pi - lo) * nodes + 0.5 * (math.pi + lo)
    rho = np.sqrt(np.maximum(r * r + d * d + 2.0 * r * d * np.cos(theta), 0.0))
    vals = m.profile(np.minimum(rho, a))
    vals = np.where(rho > a, 0.0, vals)
    return float(2.0 * 0.5 * (math.pi - lo) * np.dot(weights, vals))


def _correlation_at(m: Mollifier, d: float) -> float:
    a = m.radius
    if d >= 2.0 * a:
        return 0.0
    pts = sorted({p for p in (abs(a - d), d - a) if 0.0 < p < a})
    val, _ = integrate.quad(
        lambda r: r * float(m.profile(r)) * _angular_overlap(m, r, d),
        max(0.0, d - a), a, points=pts or None,
        epsabs=1e-14, epsrel=1e-12, limit=400,
    )
    return val


@functools.lru_cache(maxsize=32)
def _correlation_cached(kind, radius, profile_fn, n_nodes):
    m = Mollifier(eps=1.0, kind=kind, radius=radius, profile_fn=profile_fn)
    radii = np.linspace(0.0, 2.0 * radius, n_nodes)
    values = np.array([_correlation_at(m, d) for d in radii])
    return Correlation(radii=radii, values=values, support_radius=2.0 * radius)


def correlation_of(m: Mollifier, n_nodes: int = 257) -> Correlation:
    """Compute R for the unit-scale version of ``m`` by polar quadrature."""
    m.validate()
    return _correlation_cached(m.kind, m.radius, m.profile_fn, n_nodes)


# ---------------------------------------------------------------------------
# test functions


@dataclass(frozen=True)
class TestFunction:
    """A test function g on the plane, centred at ``center``.

    kinds:
      ``bump``          unit-mass smooth bump of radius ``scale``;
      ``heat_gaussian`` the heat kernel G_r with ``scale = r``;
      ``tabulated``     samples ``values`` on a square grid of spacing
                        ``spacing`` whose centre cell sits at ``center``.
    """

    __test__ = False  # keep pytest from collecting this class

    kind: str
    scale: float = 1.0
    center: tuple = (0.0, 0.0)
    values: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    spacing: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("bump", "heat_gaussian", "tabulated"):
            raise ValueError(f"unknown test function kind {self.kind!r}")
        if self.kind == "tabulated":
            if self.values is None or self.spacing is None:
                raise ValueError("tabulated test function needs values and spacing")
            v = np.asarray(self.values, dtype=float)
            if v.ndim != 2 or v.shape[0] != v.shape[1]:
                raise ValueError("tabulated values must be a square array")
        elif not self.scale > 0:
            raise DomainError(f"test function scale must be positive, got {self.scale!r}")

    @classmethod
    def bump(cls, radius: float = 1.0, center=(0.0, 0.0)) -> "TestFunction":
        return cls("bump", radius, tuple(center))

    @classmethod
    def heat_gaussian(cls, r: float, center=(0.0, 0.0)) -> "TestFunction":
        return cls("heat_gaussian", r, tuple(center))

    @classmethod
    def tabulated(cls, values, spacing: float, center=(0.0, 0.0)) -> "TestFunction":
        return cls("tabulated", 1.0, tuple(center), np.asarray(values, dtype=float), float(spacing))

    @property
    def width(self) -> float:
        """Length scale of the smallest feature of g."""
        if self.kind == "bump":
            return self.scale
        if self.kind == "heat_gaussian":
            return math.sqrt(self.scale)
        return self.spacing

    @property
    def support_radius(self) -> float:
        """Radius outside which g is zero (or below 1e-14 relative)."""
        if self.kind == "bump":
            return self.scale
        if self.kind == "heat_gaussian":
            return math.sqrt(2.0 * 32.0 * self.scale)
        n = np.asarray(self.values).shape[0]
        return 0.5 * math.sqrt(2.0) * n * self.spacing

    def evaluate(self, dx, dy):
        """g at displacement (dx, dy) from its centre."""
        dx = np.asarray(dx, dtype=float)
        dy = np.asarray(dy, dtype=float)
        if self.kind == "bump":
            rho = self.scale
            return _bump_profile(np.sqrt(dx * dx + dy * dy) / rho) / rho**2
        if self.kind == "heat_gaussian":
            return np.exp(-(dx * dx + dy * dy) / (2.0 * self.scale)) / (TWO_PI * self.scale)
        raise ValueError("tabulated test functions are only defined on their grid")

    def on_grid(self, L: float, n: int) -> np.ndarray:
        """Sample g on the torus grid ``x_i = i L / n`` (n x n, ``[ix, iy]``).

        The centre is placed at ``(L/2, L/2) + center`` and displacements use
        the minimal periodic image.
        """
        h = L / n
        if self.kind == "tabulated":
            v = np.asarray(self.values, dtype=float)
            if v.shape != (n, n) or not math.isclose(self.spacing, h, rel_tol=1e-12):
                raise ValueError("tabulated test function does not match the grid")
            return v.copy()
        x = np.arange(n) * h
        cx = 0.5 * L + self.center[0]
        cy = 0.5 * L + self.center[1]
        dx = x - cx
        dx -= L * np.round(dx / L)
        dy = x - cy
        dy -= L * np.round(dy / L)
        return self.evaluate(dx[:, None], dy[None, :])

    def looks_singular(self) -> bool:
        """True when g is delta-like at its own resolution (one dominant cell)."""
        if self.kind != "tabulated":
            return False
        v = np.abs(np.asarray(self.values, dtype=float))
        total = v.sum()
        return total > 0 and v.max() >= 0.5 * total

    def _spectral_weights(self, horizon: float):
        """Per-mode weights w_k and |k|^2 such that
        int (G_a * g)(G_b * g) dy = sum_k w_k exp(-(a + b) |k|^2 / 2).

        This is the trapezoid rule in space written through Parseval; the
        box is large enough that heat flow over ``horizon`` does not wrap.
        """
        if self.kind == "tabulated":
            v = np.asarray(self.values, dtype=float)
            delta = self.spacing
            pad = int(math.ceil(8.0 * math.sqrt(max(horizon, 0.0)) / delta))
            n = 1 << int(math.ceil(math.log2(v.shape[0] + 2 * pad)))
            samples = np.zeros((n, n))
            samples[: v.shape[0], : v.shape[1]] = v
        else:
            delta = self.width / (6.0 if self.kind == "heat_gaussian" else 24.0)
            half = self.support_radius + 8.0 * math.sqrt(max(horizon, 0.0)) + 4.0 * delta
            n = 1 << int(math.ceil(math.log2(2.0 * half / delta)))
            n = max(n, 64)
            x = (np.arange(n) - n // 2) * delta
            samples = self.evaluate(x[:, None], x[None, :])
        f = np.fft.rfft2(samples)
        k = TWO_PI * np.fft.fftfreq(n, d=delta)
        kr = TWO_PI * np.fft.rfftfreq(n, d=delta)
        k2 = k[:, None] ** 2 + kr[None, :] ** 2
        w = np.abs(f) ** 2 * delta**2 / n**2
        # rfft keeps half the plane: double the interior columns
        w[:, 1:] *= 2.0
        if n % 2 == 0:
            w[:, -1] /= 2.0
        return w.ravel(), k2.ravel()


# ---------------------------------------------------------------------------
# limit variance and multi-time covariance


class _Overlap:
    """tau -> int (G_tau' * g)(G_tau'' * g) dy with tau = (tau' + tau'') / 2."""

    def __init__(self, g: TestFunction, horizon: float):
        self.w, self.k2 = g._spectral_weights(horizon)

    def __call__(self, tau: float) -> float:
        return float(np.dot(self.w, np.exp(-tau * self.k2)))


def _check_g(g: TestFunction):
    if g.looks_singular():
        raise DivergentIntegralError(
            "test function is delta-like: the limit variance integral is not finite"
        )


def sigma_gT(nu: float, T: float, g: TestFunction, *, epsabs: float = 1e-10,
             epsrel: float = 1e-10, full_output: bool = False):
    """Limit variance ``nu^2 int_0^T int |G_{T-s} * g(y)|^2 dy ds``.

    Returns the value, or ``(value, abserr)`` when ``full_output`` is set.
    """
    if T < 0:
        raise DomainError(f"horizon must be non-negative, got {T!r}")
    _check_g(g)
    if T == 0:
        return (0.0, 0.0) if full_output else 0.0
    ov = _Overlap(g, T)
    val, err = integrate.quad(lambda s: ov(T - s), 0.0, T, epsabs=epsabs,
                              epsrel=epsrel, limit=200)
    scale = nu * nu
    if full_output:
        return scale * val, scale * err
    return scale * val


def covariance_cij(nu: float, times: Sequence[float], g: TestFunction, *,
                   epsabs: float = 1e-10, epsrel: float = 1e-10) -> np.ndarray:
    """Covariance matrix of the limiting field tested against g at ``times``."""
    times = [float(t) for t in times]
    if not times:
        raise ValueError("need at least one time")
    if times[0] < 0 or any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("times must satisfy 0 <= t_1 < ... < t_m")
    _check_g(g)
    m = len(times)
    C = np.zeros((m, m))
    ov = _Overlap(g, times[-1])
    for i, ti in enumerate(times):
        C[i, i] = sigma_gT(nu, ti, g, epsabs=epsabs, epsrel=epsrel)
        for j in range(i + 1, m):
            tj = times[j]
            if ti == 0:
                continue
            mid = 0.5 * (ti + tj)
            val, _ = integrate.quad(lambda s: ov(mid - s), 0.0, ti,
                                    epsabs=epsabs, epsrel=epsrel, limit=200)
            C[i, j] = C[j, i] = nu * nu * val
    return C
