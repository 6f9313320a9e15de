"""Monte Carlo ensembles of the fluctuation statistic and the checks run on them.

For one replica the statistic at time t is

    X(t) = sqrt(log 1/eps) * h^2 * sum_cells (u(t) - 1) g,

and an ensemble is compared against the limit variance and multi-time
covariance evaluated at the effective coefficient from :mod:`ew2d.limit`.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats as sps

from . import kernel
from .errors import BlowUpError, ConfigurationError
from .limit import LimitCoefficient, beta_threshold, limit_coefficient
from .noise import GridSpec, make_stream
from .solver import FieldState, SolverConfig, iter_evolve

SCHEMA = "ew2d-report/1"
MIN_TEST_SAMPLES = 100


def fluctuation_statistic(traj: Sequence[FieldState], g: np.ndarray, eps: float,
                          h: float) -> np.ndarray:
    """X(t) for each snapshot of ``traj``; ``g`` is sampled on the same grid."""
    g = np.asarray(g, dtype=float)
    scale = math.sqrt(math.log(1.0 / eps)) * h * h
    out = np.empty(len(traj))
    for i, s in enumerate(traj):
        if s.u.shape != g.shape:
            raise ValueError(f"test function grid {g.shape} does not match field {s.u.shape}")
        out[i] = scale * np.sum((s.u - 1.0) * g)
    return out


# ---------------------------------------------------------------------------
# normality and distances


@dataclass(frozen=True)
class NormalityResult:
    ks_statistic: float
    p_value: float
    skewness: float
    excess_kurtosis: float
    scale: float
    degenerate: bool = False


def normality_test(samples, mean: float = 0.0) -> NormalityResult:
    """One-sample KS test against N(mean, s^2), s^2 the empirical second
    moment about ``mean``; asymptotic Kolmogorov p-value."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < MIN_TEST_SAMPLES:
        raise ValueError(f"normality test needs at least {MIN_TEST_SAMPLES} samples")
    s = math.sqrt(float(np.mean((x - mean) ** 2)))
    if s == 0.0 or np.ptp(x) == 0.0:
        return NormalityResult(math.nan, math.nan, math.nan, math.nan, s, True)
    res = sps.kstest(x, "norm", args=(mean, s), method="asymp")
    return NormalityResult(float(res.statistic), float(res.pvalue), float(sps.skew(x)),
                           float(sps.kurtosis(x)), s)


@dataclass(frozen=True)
class OnePointResult:
    ks_distance: float
    p_value: float
    n_field: int
    n_xi: int


def one_point_test(u_samples, xi_samples, cfg: Optional[SolverConfig] = None,
                   xi_key: Optional[tuple] = None) -> OnePointResult:
    """Two-sample KS distance between samples of u(T, x0) and of Xi(2).

    ``xi_key = (beta, sigma_label)`` identifies the limit samples; when given
    together with ``cfg`` it must match the simulated problem.
    """
    if cfg is not None and xi_key is not None:
        beta, label = xi_key
        if not math.isclose(beta, cfg.beta) or label != cfg.sigma.label:
            raise ValueError(f"limit samples for {xi_key} do not match "
                             f"({cfg.beta}, {cfg.sigma.label})")
    u = np.asarray(u_samples, dtype=float).ravel()
    xi = np.asarray(xi_samples, dtype=float).ravel()
    res = sps.ks_2samp(u, xi)
    return OnePointResult(float(res.statistic), float(res.pvalue), u.size, xi.size)


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class MomentDiagnostic:
    p: int
    sup: float
    sup_se: float
    per_time: list
    ceiling: Optional[float]
    exceeds: bool
    exploratory: bool
    note: str = ""


def moment_diagnostic(u_probe, p: int, beta: float = 0.0, sigma_lip: float = 1.0,
                      ceiling: Optional[float] = None) -> MomentDiagnostic:
    """Sup over probed (t, x) of the empirical p-th moment of u.

    ``u_probe`` has shape (replicas, times) or (replicas, times, probes).
    """
    if p not in (2, 4):
        raise ValueError("p must be 2 or 4")
    u = np.asarray(u_probe, dtype=float)
    if u.ndim == 2:
        u = u[:, :, None]
    up = u**p
    mom = up.mean(axis=0)
    se = up.std(axis=0, ddof=1) / math.sqrt(u.shape[0]) if u.shape[0] > 1 else np.zeros_like(mom)
    k = np.unravel_index(np.argmax(mom), mom.shape)
    note = ""
    exploratory = beta >= beta_threshold(p, sigma_lip).moment_bound
    if exploratory:
        note = (f"beta={beta:g} is not below the p={p} moment threshold "
                f"{beta_threshold(p, sigma_lip).moment_bound:.4g}; diagnostic is exploratory")
    sup = float(mom[k])
    return MomentDiagnostic(p, sup, float(se[k]), mom.max(axis=1).tolist(), ceiling,
                            ceiling is not None and sup > ceiling, exploratory, note)


@dataclass(frozen=True)
class PathIncrementResult:
    slope: float
    lags: list
    moments: list
    degenerate: bool = False


def path_increment_diagnostic(times, samples, p: int = 4,
                              max_lag: Optional[float] = None) -> PathIncrementResult:
    """Log-log slope of E|X(t) - X(s)|^p against t - s.

    ``samples`` has shape (replicas, len(times)); times must be equally spaced.
    Every pair at a given lag contributes to that lag's moment.
    """
    t = np.asarray(times, dtype=float)
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2 or x.shape[1] != t.size:
        raise ValueError("samples must have shape (replicas, len(times))")
    d = np.diff(t)
    if t.size < 2 or not np.allclose(d, d[0], rtol=1e-9):
        raise ValueError("times must be equally spaced")
    n_lags = t.size - 1
    if max_lag is not None:
        n_lags = min(n_lags, int(math.floor(max_lag / d[0] + 1e-9)))
    if n_lags < 4:
        raise ValueError("need at least 4 distinct time lags")
    lags, moms = [], []
    for k in range(1, n_lags + 1):
        inc = x[:, k:] - x[:, :-k]
        lags.append(float(k * d[0]))
        moms.append(float(np.mean(np.abs(inc) ** p)))
    if max(moms) == 0.0:
        return PathIncrementResult(math.nan, lags, moms, True)
    slope = float(np.polyfit(np.log(lags), np.log(moms), 1)[0])
    return PathIncrementResult(slope, lags, moms)


def batch_means_se(x, n_batches: int = 20, stat=np.mean) -> float:
    """Standard error of ``stat`` from the spread of its value on batches."""
    x = np.asarray(x, dtype=float)
    b = min(n_batches, x.size // 5)
    if b < 2:
        return math.nan
    m = x.size // b
    vals = np.array([stat(x[i * m:(i + 1) * m]) for i in range(b)])
    return float(vals.std(ddof=1) / math.sqrt(b))


def _var(x):
    return np.var(x, ddof=1)


# ---------------------------------------------------------------------------
# replicas


@dataclass
class ReplicaResult:
    replica_id: int
    X: np.ndarray
    u_probe: np.ndarray
    subzero: np.ndarray
    blowup_t: Optional[float] = None


def _probe_indices(grid: GridSpec, probes) -> tuple:
    idx = np.array([[int(round(p[0] / grid.h)) % grid.n, int(round(p[1] / grid.h)) % grid.n]
                    for p in probes])
    return idx[:, 0], idx[:, 1]


def default_probes(grid: GridSpec) -> list:
    """The torus centre (the point x0) and a far point for stationarity checks."""
    return [(0.5 * grid.L, 0.5 * grid.L), (0.0, 0.0)]


def simulate_replica(cfg: SolverConfig, g_grid: np.ndarray, sample_times, probes,
                     master_seed: int, replica_id: int) -> ReplicaResult:
    ix, iy = _probe_indices(cfg.grid, probes)
    nt = len(sample_times)
    X = np.full(nt, np.nan)
    U = np.full((nt, len(probes)), np.nan)
    Z = np.full(nt, np.nan)
    scale = math.sqrt(math.log(1.0 / cfg.eps)) * cfg.grid.h**2
    k = 0
    try:
        for k, s in enumerate(iter_evolve(cfg, make_stream(master_seed, replica_id),
                                          sample_times)):
            X[k] = scale * np.sum((s.u - 1.0) * g_grid)
            U[k] = s.u[ix, iy]
            Z[k] = s.subzero_fraction
    except BlowUpError as exc:
        return ReplicaResult(replica_id, X, U, Z, exc.t)
    return ReplicaResult(replica_id, X, U, Z)


def _worker(args):
    cfg_state, g_grid, sample_times, probes, seed, ids = args
    cfg = _cfg_from_state(cfg_state)
    return [simulate_replica(cfg, g_grid, sample_times, probes, seed, r) for r in ids]


def _cfg_state(cfg: SolverConfig) -> dict:
    return {"beta": cfg.beta, "eps": cfg.eps, "sigma": cfg.sigma, "grid": cfg.grid,
            "T": cfg.T, "mollifier_kind": cfg.mollifier_kind,
            "noise_filter": cfg.noise_filter}


def _cfg_from_state(state: dict) -> SolverConfig:
    return SolverConfig(**state)


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("EW2D_JOBS", "1")))
    except ValueError:
        raise ConfigurationError("EW2D_JOBS must be an integer")


def simulate_replicas(cfg: SolverConfig, g: kernel.TestFunction, sample_times,
                      replica_ids: Sequence[int], master_seed: int, probes=None,
                      jobs: Optional[int] = None) -> list:
    """Evolve the listed replicas (in parallel up to ``jobs``); ordered by id."""
    jobs = default_jobs() if jobs is None else max(1, int(jobs))
    probes = default_probes(cfg.grid) if probes is None else probes
    g_grid = g.on_grid(cfg.grid.L, cfg.grid.n)
    ids = list(replica_ids)
    if jobs == 1 or len(ids) < 2:
        return [simulate_replica(cfg, g_grid, sample_times, probes, master_seed, r)
                for r in ids]
    chunks = [ids[i::jobs] for i in range(jobs)]
    state = _cfg_state(cfg)
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        parts = pool.map(_worker, [(state, g_grid, list(sample_times), probes,
                                    master_seed, c) for c in chunks if c])
        results = [r for part in parts for r in part]
    return sorted(results, key=lambda r: r.replica_id)


# ---------------------------------------------------------------------------
# reports


def _tf_dict(g: kernel.TestFunction) -> dict:
    if g.kind == "tabulated":
        return {"kind": "tabulated", "spacing": g.spacing, "center": list(g.center),
                "sha256": hashlib.sha256(np.ascontiguousarray(g.values).tobytes()).hexdigest()}
    return {"kind": g.kind, "scale": g.scale, "center": list(g.center)}


def test_function_from_dict(d: dict) -> kernel.TestFunction:
    if d["kind"] == "tabulated":
        raise ValueError("tabulated test functions cannot be rebuilt from a report")
    return kernel.TestFunction(d["kind"], float(d["scale"]), tuple(d["center"]))


def sample_time_grid(T: float, times: Sequence[float], path_points: int = 16) -> list:
    grid = [k * T / path_points for k in range(path_points + 1)] if path_points else []
    merged = sorted(set(round(t, 12) for t in list(times) + grid))
    return [float(t) for t in merged]


@dataclass
class EnsembleReport:
    config: dict
    test_function: dict
    master_seed: int
    times: list
    sample_times: list
    probes: list
    replica_ids: list
    X: list                       # [replica][sample time]
    u_probe: list                 # [replica][sample time][probe]
    subzero: list                 # [replica][sample time]
    nu_eff: dict
    sigma_theory: list
    cov_theory: list
    failed_ids: list = field(default_factory=list)
    blowup_times: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    runtime: dict = field(default_factory=dict)
    schema: str = SCHEMA

    # -- derived views ---------------------------------------------------
    @property
    def n_replicas(self) -> int:
        return len(self.replica_ids)

    def samples_at(self, t: float) -> np.ndarray:
        k = _time_index(self.sample_times, t)
        return np.asarray(self.X, dtype=float)[:, k]

    def samples_matrix(self, times=None) -> np.ndarray:
        times = self.times if times is None else times
        X = np.asarray(self.X, dtype=float).reshape(-1, len(self.sample_times))
        return X[:, [_time_index(self.sample_times, t) for t in times]]

    def probe_at(self, t: float, probe: int = 0) -> np.ndarray:
        k = _time_index(self.sample_times, t)
        return np.asarray(self.u_probe, dtype=float)[:, k, probe]

    def subset(self, n: int) -> "EnsembleReport":
        """Report restricted to the first ``n`` successful replicas."""
        if n > self.n_replicas:
            raise ValueError(f"report holds only {self.n_replicas} replicas")
        rep = EnsembleReport(**{**asdict(self), "replica_ids": self.replica_ids[:n],
                                "X": self.X[:n], "u_probe": self.u_probe[:n],
                                "subzero": self.subzero[:n], "summary": {}})
        rep.summary = _summarise(rep)
        return rep

    # -- serialization ---------------------------------------------------
    def to_json(self, include_runtime: bool = True) -> str:
        d = asdict(self)
        if not include_runtime:
            d.pop("runtime")
        return json.dumps(d, sort_keys=True, allow_nan=True)

    def numeric_payload(self) -> str:
        """Everything except runtime metadata; byte-stable for a fixed input."""
        return self.to_json(include_runtime=False)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "EnsembleReport":
        d = json.loads(text)
        if not isinstance(d, dict) or d.get("schema") != SCHEMA:
            raise ValueError(f"not an {SCHEMA} report")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "EnsembleReport":
        return cls.from_json(Path(path).read_text())

    def write_samples_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["replica_id", "t", "X"])
            for rid, row in zip(self.replica_ids, self.X):
                for t, x in zip(self.sample_times, row):
                    w.writerow([rid, repr(t), repr(float(x))])


def _time_index(sample_times, t) -> int:
    for k, s in enumerate(sample_times):
        if math.isclose(s, t, rel_tol=1e-9, abs_tol=1e-12):
            return k
    raise KeyError(f"time {t} was not sampled")


def _summarise(rep: EnsembleReport) -> dict:
    n = rep.n_replicas
    out = {"n_replicas": n, "n_failed": len(rep.failed_ids),
           "blowup_fraction": len(rep.failed_ids) / max(1, n + len(rep.failed_ids))}
    if rep.failed_ids:
        out["status"] = "failed"
    per_time = []
    Xm = rep.samples_matrix()
    degenerate = n > 0 and bool(np.all(Xm == 0.0))
    for k, t in enumerate(rep.times):
        x = Xm[:, k] if n else np.empty(0)
        entry = {"t": t, "mean": math.nan, "mean_se": math.nan, "var": math.nan,
                 "var_se": math.nan, "sigma_theory": rep.sigma_theory[k], "ratio": math.nan}
        if n >= 2:
            var = float(_var(x))
            entry.update(mean=float(np.mean(x)), mean_se=batch_means_se(x),
                         var=var, var_se=batch_means_se(x, stat=_var))
            if rep.sigma_theory[k] > 0:
                entry["ratio"] = var / rep.sigma_theory[k]
        if n >= MIN_TEST_SAMPLES:
            entry["normality"] = asdict(normality_test(x))
        per_time.append(entry)
    out["per_time"] = per_time
    if n >= 2:
        out["cov_empirical"] = np.cov(Xm, rowvar=False, ddof=1).reshape(
            len(rep.times), len(rep.times)).tolist()
    Z = np.asarray(rep.subzero, dtype=float).reshape(-1, len(rep.sample_times))
    out["subzero_fraction_max"] = float(np.nanmax(Z)) if Z.size else 0.0
    out["subzero_fraction_mean_T"] = float(np.nanmean(Z[:, -1])) if Z.size else 0.0
    out.setdefault("status", "degenerate" if degenerate else "ok")
    return out


def build_report(cfg: SolverConfig, g: kernel.TestFunction, times, sample_times,
                 results: Sequence[ReplicaResult], master_seed: int,
                 nu: LimitCoefficient, probes, runtime: Optional[dict] = None) -> EnsembleReport:
    ok = [r for r in results if r.blowup_t is None]
    bad = [r for r in results if r.blowup_t is not None]
    C = kernel.covariance_cij(nu.nu_eff, times, g)
    sig = [kernel.sigma_gT(nu.nu_eff, t, g) for t in times]
    rep = EnsembleReport(
        config=cfg.fingerprint(), test_function=_tf_dict(g), master_seed=int(master_seed),
        times=[float(t) for t in times], sample_times=[float(t) for t in sample_times],
        probes=[list(map(float, p)) for p in probes],
        replica_ids=[r.replica_id for r in ok],
        X=[r.X.tolist() for r in ok], u_probe=[r.u_probe.tolist() for r in ok],
        subzero=[r.subzero.tolist() for r in ok], nu_eff=asdict(nu),
        sigma_theory=sig, cov_theory=C.tolist(),
        failed_ids=[r.replica_id for r in bad], blowup_times=[r.blowup_t for r in bad],
        runtime=runtime or {},
    )
    rep.summary = _summarise(rep)
    return rep


def _key(cfg, g, times, sample_times, probes, master_seed) -> str:
    blob = json.dumps({"cfg": cfg.fingerprint(), "g": _tf_dict(g), "times": list(times),
                       "sample_times": list(sample_times), "probes": probes,
                       "seed": master_seed}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_ensemble(cfg: SolverConfig, g: kernel.TestFunction, times: Sequence[float],
                 n_replicas: int, master_seed: int, *, path_points: int = 16,
                 probes=None, jobs: Optional[int] = None,
                 nu: Optional[LimitCoefficient] = None, cache_dir=None,
                 chunk: int = 50, progress=None) -> EnsembleReport:
    """Simulate ``n_replicas`` replicas and summarise them against the limit.

    With ``cache_dir`` the replica results are checkpointed in chunks so an
    interrupted run resumes where it stopped; chunks are keyed by the full
    configuration, so they are shared by runs that differ only in size.
    """
    times = [float(t) for t in times]
    if any(t < 0 or t > cfg.T + 1e-12 for t in times):
        raise ValueError("report times must lie in [0, T]")
    probes = default_probes(cfg.grid) if probes is None else [tuple(p) for p in probes]
    sample_times = sample_time_grid(cfg.T, times, path_points)
    if nu is None:
        nu = limit_coefficient(cfg.beta, cfg.sigma, "pde")
    t0 = time.perf_counter()
    if cache_dir is None:
        results = simulate_replicas(cfg, g, sample_times, range(n_replicas), master_seed,
                                    probes, jobs)
    else:
        cache = Path(cache_dir)
        cache.mkdir(parents=True, exist_ok=True)
        key = _key(cfg, g, times, sample_times, probes, master_seed)
        results = []
        for start in range(0, n_replicas, chunk):
            ids = range(start, min(start + chunk, n_replicas))
            path = cache / f"{key}_{start:06d}_{len(ids)}.npz"
            if path.exists():
                part = _load_chunk(path)
            else:
                part = simulate_replicas(cfg, g, sample_times, ids, master_seed, probes, jobs)
                _save_chunk(path, part)
            results.extend(part)
            if progress:
                progress(len(results), n_replicas)
    runtime = {"seconds": time.perf_counter() - t0, "jobs": jobs or default_jobs()}
    return build_report(cfg, g, times, sample_times, results, master_seed, nu, probes,
                        runtime)


def _save_chunk(path: Path, part: Sequence[ReplicaResult]) -> None:
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, ids=np.array([r.replica_id for r in part]),
             X=np.array([r.X for r in part]), U=np.array([r.u_probe for r in part]),
             Z=np.array([r.subzero for r in part]),
             blow=np.array([np.nan if r.blowup_t is None else r.blowup_t for r in part]))
    os.replace(tmp, path)


def _load_chunk(path: Path) -> list:
    with np.load(path) as d:
        return [ReplicaResult(int(i), x, u, z, None if np.isnan(b) else float(b))
                for i, x, u, z, b in zip(d["ids"], d["X"], d["U"], d["Z"], d["blow"])]
