"""Mollified space-time white noise on a periodic grid.

Each increment is cell white noise (variance dt per unit area) convolved by
FFT with a radial filter. Two filters are available:

``"covariance_root"`` (default)
    the lattice square root of ``eps^-2 R(./eps)``; the increment covariance
    equals ``dt eps^-2 R((x - x')/eps)`` exactly at every lattice lag.
``"mollifier"``
    ``phi^eps`` itself sampled on the grid and renormalised to unit discrete
    mass; its covariance matches R only up to the lattice quadrature error.

Random numbers are counter based: the normals for (master seed, replica,
step) come from a Philox generator whose key is derived from the seed and
replica and whose counter starts at the step index. Any step of any replica
can be regenerated independently and in any order.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from .errors import ConfigurationError
from .kernel import Mollifier, correlation_of

NOISE_MAGIC = b"EW2DNOIS"
FIELD_MAGIC = b"EW2DFELD"
_HEADER = struct.Struct("<8sIIfff4x")
assert _HEADER.size == 32

FILTERS = ("covariance_root", "mollifier")


@dataclass(frozen=True)
class GridSpec:
    """Torus ``[0, L)^2`` with ``n`` points per side and time step ``dt``.

    ``min_points_per_eps`` is the resolution rule ``h <= eps / min_points_per_eps``.
    """

    L: float
    n: int
    dt: float
    min_points_per_eps: float = 4.0

    def __post_init__(self):
        if not self.L > 0:
            raise ConfigurationError(f"torus side must be positive, got {self.L!r}")
        if self.n < 2 or self.n & (self.n - 1):
            raise ConfigurationError(f"n must be a power of two, got {self.n!r}")
        if not self.dt > 0:
            raise ConfigurationError(f"dt must be positive, got {self.dt!r}")

    @property
    def h(self) -> float:
        return self.L / self.n

    def resolves(self, eps: float) -> bool:
        return self.h <= eps / self.min_points_per_eps * (1 + 1e-12)

    def check_resolves(self, eps: float) -> None:
        if not self.resolves(eps):
            raise ConfigurationError(
                f"grid spacing h={self.h:.6g} does not resolve eps={eps:.6g} "
                f"(need h <= eps/{self.min_points_per_eps:g} = "
                f"{eps / self.min_points_per_eps:.6g})"
            )

    def offsets(self) -> np.ndarray:
        """Minimal-image displacement of each index from index 0."""
        i = np.arange(self.n)
        return ((i + self.n // 2) % self.n - self.n // 2) * self.h

    def wavenumbers_sq(self) -> np.ndarray:
        """|k|^2 on the rfft2 layout."""
        return _wavenumbers_sq(self.L, self.n)


@functools.lru_cache(maxsize=16)
def _wavenumbers_sq(L, n):
    k = 2.0 * math.pi * sfft.fftfreq(n, d=L / n)
    kr = 2.0 * math.pi * sfft.rfftfreq(n, d=L / n)
    return k[:, None] ** 2 + kr[None, :] ** 2


@functools.lru_cache(maxsize=32)
def noise_filter(L: float, n: int, mollifier: Mollifier, kind: str = "covariance_root"):
    """rfft2 multiplier F such that an increment is irfft2(F * rfft2(cell noise))."""
    if kind not in FILTERS:
        raise ValueError(f"unknown noise filter {kind!r}")
    h = L / n
    eps = mollifier.eps
    off = ((np.arange(n) + n // 2) % n - n // 2) * h
    r = np.sqrt(off[:, None] ** 2 + off[None, :] ** 2)
    if 2.0 * mollifier.radius * eps >= 0.5 * L:
        raise ConfigurationError("torus too small for the noise correlation length")
    if kind == "mollifier":
        phi = mollifier.scaled(r)
        phi /= phi.sum() * h * h
        return sfft.rfft2(phi) * h * h
    R = correlation_of(mollifier).scaled(r, eps)
    spec = sfft.rfft2(R) * h * h
    # Poisson summation makes this non-negative up to round-off
    return np.sqrt(np.maximum(spec.real, 0.0))


@dataclass
class NoiseStream:
    """Deterministic generator of cell white noise for one replica."""

    master_seed: int
    replica_id: int
    step: int = 0

    def __post_init__(self):
        ss = np.random.SeedSequence([int(self.master_seed), int(self.replica_id)])
        self._key = ss.generate_state(2, dtype=np.uint64)

    def normals(self, step: int, shape) -> np.ndarray:
        """Standard normals attached to counter ``step``."""
        bitgen = np.random.Philox(key=self._key, counter=[0, int(step), 0, 0])
        return np.random.Generator(bitgen).standard_normal(shape)


def make_stream(master_seed: int, replica_id: int) -> NoiseStream:
    return NoiseStream(int(master_seed), int(replica_id))


@dataclass
class NoiseIncrement:
    values: np.ndarray
    seed_lineage: tuple
    dt: float
    h: float
    eps: float

    def dump(self, path) -> None:
        write_field_binary(path, self.values, self.h, self.dt, self.eps, NOISE_MAGIC)


def next_increment(stream: NoiseStream, grid: GridSpec, m: Mollifier, *,
                   substeps: int = 1, filter_kind: str = "covariance_root") -> NoiseIncrement:
    """Draw the increment for ``stream.step`` and advance the stream.

    With ``substeps = s`` the increment is the sum of ``s`` consecutive
    fine increments of step ``dt / s`` (fine counters ``s*step .. s*step+s-1``),
    so runs at ``dt`` and ``dt / s`` can share one noise realisation.
    """
    grid.check_resolves(m.eps)
    n = grid.n
    step = stream.step
    xi = stream.normals(step * substeps, (n, n))
    for j in range(1, substeps):
        xi += stream.normals(step * substeps + j, (n, n))
    fine_dt = grid.dt / substeps
    filt = noise_filter(grid.L, n, m, filter_kind)
    w = sfft.irfft2(sfft.rfft2(xi) * filt, s=(n, n))
    w *= math.sqrt(fine_dt) / grid.h
    stream.step += 1
    return NoiseIncrement(w, (stream.master_seed, stream.replica_id, step),
                          grid.dt, grid.h, m.eps)


# ---------------------------------------------------------------------------
# binary dumps: 32-byte header, then n*n little-endian float64, row-major


def write_field_binary(path, values, h, dt, eps, magic=NOISE_MAGIC) -> None:
    values = np.ascontiguousarray(values, dtype="<f8")
    n = values.shape[0]
    if values.shape != (n, n):
        raise ValueError("field must be square")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, n, 1, h, dt, eps))
        fh.write(values.tobytes(order="C"))


def read_field_binary(path, magic=None):
    """Return ``(values, header_dict)``."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError("file too short for header")
    mg, n, version, h, dt, eps = _HEADER.unpack_from(data)
    if magic is not None and mg != magic:
        raise ValueError(f"bad magic {mg!r}")
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    if body.size != n * n:
        raise ValueError("payload size does not match header")
    return body.reshape(n, n).copy(), {
        "magic": mg.decode("ascii"), "n": n, "version": version,
        "h": h, "dt": dt, "eps": eps,
    }
