"""Exponential-Euler time stepping of the 2D stochastic heat equation.

One step is

    u <- exp(dt Laplacian / 2) [u + a sigma(u) w],   a = beta / sqrt(log 1/eps),

with the heat propagator applied exactly in Fourier space on the torus and
sigma evaluated at the left point (Ito). sigma is extended by zero to
negative arguments.
"""

from __future__ import annotations

import functools
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
import scipy.fft as sfft

from .errors import BlowUpError, ConfigurationError, ValidationError
from .kernel import Mollifier
from .noise import (FIELD_MAGIC, FILTERS, GridSpec, NoiseStream, NoiseIncrement,
                    next_increment, write_field_binary)

SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class SigmaFunction:
    """Globally Lipschitz noise coefficient with sigma(0) = 0."""

    func: Callable = field(repr=False)
    lip: float
    label: str

    def __call__(self, u):
        # extension by zero below 0 keeps sigma(0) = 0 and the Lipschitz bound
        return self.func(np.maximum(u, 0.0))

    def validate(self, n_pairs: int = 10_000, upper: float = 10.0) -> None:
        if float(self(np.array(0.0))) != 0.0:
            raise ValidationError(f"{self.label}: sigma(0) must be 0")
        if float(self(np.array(1.0))) == 0.0:
            raise ValidationError(f"{self.label}: sigma(1) must be non-zero")
        if not self.lip > 0:
            raise ValidationError(f"{self.label}: Lipschitz constant must be positive")
        rng = np.random.default_rng(12345)
        x = rng.uniform(0.0, upper, n_pairs)
        y = rng.uniform(0.0, upper, n_pairs)
        keep = x != y
        ratio = np.abs(self(x[keep]) - self(y[keep])) / np.abs(x[keep] - y[keep])
        if np.max(ratio) > self.lip * (1 + 1e-12):
            raise ValidationError(
                f"{self.label}: empirical Lipschitz ratio {np.max(ratio):.6g} "
                f"exceeds declared {self.lip:.6g}"
            )


def _linear(x, slope):
    return slope * x


def _saturating(x, scale):
    return scale * -np.expm1(-x)


def sigma_linear(slope: float = 1.0) -> SigmaFunction:
    label = "linear" if slope == 1.0 else f"linear({slope:g})"
    return SigmaFunction(functools.partial(_linear, slope=slope), abs(slope), label)


def sigma_saturating(scale: float = 1.0) -> SigmaFunction:
    """sigma(x) = scale (1 - exp(-x)); Lipschitz constant ``scale``."""
    label = "saturating" if scale == 1.0 else f"saturating({scale:g})"
    return SigmaFunction(functools.partial(_saturating, scale=scale), abs(scale), label)


_SIGMAS = {"linear": sigma_linear, "saturating": sigma_saturating}


def sigma_from_spec(label: str, **params) -> SigmaFunction:
    """Build a built-in sigma by name (``linear`` or ``saturating``)."""
    try:
        factory = _SIGMAS[label]
    except KeyError:
        raise ConfigurationError(f"unknown sigma {label!r}; choose from {sorted(_SIGMAS)}")
    return factory(**params)


def auto_dt(T: float, eps: float, steps_per_eps2: float = 40.0, min_steps: int = 16) -> float:
    """Largest ``T / 2^k`` that is at most ``eps^2 / steps_per_eps2``."""
    k = max(0, math.ceil(math.log2(T * steps_per_eps2 / eps**2)))
    return T / max(2**k, min_steps)


@dataclass(frozen=True)
class SolverConfig:
    beta: float
    eps: float
    sigma: SigmaFunction
    grid: GridSpec
    T: float
    mollifier_kind: str = "bump"
    noise_filter: str = "covariance_root"
    scheme: str = "exponential_euler"

    def __post_init__(self):
        if not 0.0 < self.eps < 1.0:
            raise ConfigurationError(f"eps must lie in (0, 1), got {self.eps!r}")
        if self.beta < 0:
            raise ConfigurationError(f"beta must be non-negative, got {self.beta!r}")
        if not self.T > 0:
            raise ConfigurationError(f"horizon T must be positive, got {self.T!r}")
        if self.scheme != "exponential_euler":
            raise ConfigurationError(f"unsupported scheme {self.scheme!r}")
        if self.noise_filter not in FILTERS:
            raise ConfigurationError(f"unknown noise filter {self.noise_filter!r}")
        steps = self.T / self.grid.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ConfigurationError("T must be an integer multiple of dt")
        self.grid.check_resolves(self.eps)
        if not math.isfinite(self.attenuation):
            raise ConfigurationError("noise attenuation is not finite")

    @property
    def attenuation(self) -> float:
        """beta / sqrt(log 1/eps)."""
        return self.beta / math.sqrt(math.log(1.0 / self.eps))

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.grid.dt))

    @property
    def mollifier(self) -> Mollifier:
        return Mollifier(eps=self.eps, kind=self.mollifier_kind)

    def regime_warnings(self) -> list:
        """Human-readable notes about where beta sits relative to the thresholds."""
        from .limit import beta_threshold

        notes = []
        lip = self.sigma.lip
        if self.beta * lip >= SQRT_2PI:
            notes.append(
                f"beta*sigma_Lip = {self.beta * lip:.4g} >= sqrt(2 pi): supercritical"
            )
        elif self.beta >= beta_threshold(2, lip).theorem_bound:
            notes.append(
                f"beta = {self.beta:.4g} is above the proven CLT threshold "
                f"{beta_threshold(2, lip).theorem_bound:.4g}: results are exploratory"
            )
        return notes

    def fingerprint(self) -> dict:
        return {
            "beta": self.beta, "eps": self.eps, "sigma": self.sigma.label,
            "sigma_lip": self.sigma.lip, "L": self.grid.L, "n": self.grid.n,
            "dt": self.grid.dt, "T": self.T, "mollifier": self.mollifier_kind,
            "noise_filter": self.noise_filter, "scheme": self.scheme,
        }

    def with_eps(self, eps: float, grid: Optional[GridSpec] = None) -> "SolverConfig":
        return SolverConfig(self.beta, eps, self.sigma, grid or self.grid, self.T,
                            self.mollifier_kind, self.noise_filter, self.scheme)


@dataclass
class FieldState:
    u: np.ndarray
    t: float
    replica_id: int = 0
    step_index: int = 0

    @property
    def subzero_fraction(self) -> float:
        return float(np.mean(self.u < 0.0))


def initial_state(cfg: SolverConfig, replica_id: int = 0) -> FieldState:
    n = cfg.grid.n
    return FieldState(np.ones((n, n)), 0.0, replica_id, 0)


def heat_multiplier(grid: GridSpec, dt: Optional[float] = None) -> np.ndarray:
    dt = grid.dt if dt is None else dt
    return np.exp(-0.5 * dt * grid.wavenumbers_sq())


def step(state: FieldState, cfg: SolverConfig, w: NoiseIncrement,
         _heat: Optional[np.ndarray] = None) -> FieldState:
    """Advance one exponential-Euler step of length ``cfg.grid.dt``."""
    grid = cfg.grid
    if w.values.shape != state.u.shape or not math.isclose(w.h, grid.h):
        raise ValueError("noise increment was not generated on this grid")
    if state.t + grid.dt > cfg.T + 1e-12:
        raise ValueError("step would pass the horizon T")
    heat = heat_multiplier(grid) if _heat is None else _heat
    v = state.u + cfg.attenuation * cfg.sigma(state.u) * w.values
    u = sfft.irfft2(sfft.rfft2(v) * heat, s=state.u.shape)
    t = (state.step_index + 1) * grid.dt
    if not np.all(np.isfinite(u)):
        raise BlowUpError(t)
    return FieldState(u, t, state.replica_id, state.step_index + 1)


def _output_steps(cfg: SolverConfig, times: Sequence[float]) -> list:
    out = []
    for t in times:
        if t < -1e-12 or t > cfg.T + 1e-12:
            raise ValueError(f"output time {t} outside [0, T]")
        k = t / cfg.grid.dt
        if abs(k - round(k)) > 1e-8 * max(1.0, k):
            raise ValueError(f"output time {t} is not a multiple of dt")
        out.append(int(round(k)))
    return out


def iter_evolve(cfg: SolverConfig, stream: NoiseStream, output_times: Sequence[float],
                substeps: int = 1) -> Iterator[FieldState]:
    """Yield snapshots (copies) at each requested output time, in time order."""
    wanted = sorted(set(_output_steps(cfg, output_times)))
    if not wanted:
        return
    m = cfg.mollifier
    heat = heat_multiplier(cfg.grid)
    state = initial_state(cfg, stream.replica_id)
    pending = list(wanted)
    if pending[0] == 0:
        yield FieldState(state.u.copy(), 0.0, state.replica_id, 0)
        pending.pop(0)
    while pending:
        w = next_increment(stream, cfg.grid, m, substeps=substeps,
                           filter_kind=cfg.noise_filter)
        state = step(state, cfg, w, heat)
        if state.step_index == pending[0]:
            yield FieldState(state.u.copy(), state.t, state.replica_id, state.step_index)
            pending.pop(0)


def evolve(cfg: SolverConfig, stream: NoiseStream, output_times: Sequence[float],
           substeps: int = 1) -> list:
    """Run one replica and return its snapshots at ``output_times`` (sorted)."""
    return list(iter_evolve(cfg, stream, output_times, substeps))


# ---------------------------------------------------------------------------
# microscopic description


@dataclass(frozen=True)
class MicroDescription:
    """Microscopic problem equal in law to the macroscopic one:
    ``u(t, x) = V(t / eps^2, x / eps)`` with a unit-scale mollifier."""

    horizon: float
    length_dilation: float
    torus_side: float
    dt: float
    eps: float
    mollifier_scale: float = 1.0


def micro_params(cfg: SolverConfig) -> MicroDescription:
    e2 = cfg.eps**2
    return MicroDescription(
        horizon=cfg.T / e2, length_dilation=1.0 / cfg.eps,
        torus_side=cfg.grid.L / cfg.eps, dt=cfg.grid.dt / e2, eps=cfg.eps,
    )


def macro_from_micro(micro: MicroDescription) -> dict:
    """Invert :func:`micro_params` (horizon, torus side and dt in macro units)."""
    e2 = micro.eps**2
    return {"T": micro.horizon * e2, "L": micro.torus_side * micro.eps,
            "dt": micro.dt * e2, "eps": micro.eps}


# ---------------------------------------------------------------------------
# snapshot export


def write_snapshot(state: FieldState, cfg: SolverConfig, path) -> str:
    """Write one field snapshot; returns the sha256 of the file."""
    write_field_binary(path, state.u, cfg.grid.h, cfg.grid.dt, cfg.eps, FIELD_MAGIC)
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_trajectory(states: Sequence[FieldState], cfg: SolverConfig, directory) -> Path:
    """Write snapshots plus a JSON manifest (times and checksums)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in states:
        name = f"field_r{s.replica_id:05d}_k{s.step_index:07d}.bin"
        entries.append({"t": s.t, "step": s.step_index, "file": name,
                        "sha256": write_snapshot(s, cfg, directory / name)})
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps({"config": cfg.fingerprint(), "snapshots": entries},
                                   indent=2, sort_keys=True))
    return manifest
