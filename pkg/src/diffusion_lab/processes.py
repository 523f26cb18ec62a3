"""Simulation of the comparison chain, the sampler and their relatives.

All simulations are vectorized over paths and split into chunks of
consecutive path indices. Path ``i`` draws from the stream
``(master_seed, role << 48 | i)``, so output does not depend on chunk size or
worker count.

Per-path counter usage (``b = ceil(d / 2)`` blocks per normal vector):

* comparison: X (1 + b), then one normal vector per step.
* sampler: one normal vector per step.
* reverse: X (1 + b), endpoint noise (b), then one normal vector per step
  walking down from k = n - 1 to 0.
* conditional_rep: per step a posterior draw (1 + b) then the noise (b).
* moment_matched: per step a kernel draw (1 + b) then the noise (b), except
  gaussian_matched, which uses a single normal vector per step.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Callable, Iterator
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import estimators as est
from . import targets as tg
from .rng import StreamBatch, path_stream_ids
from .schedules import Schedule

ROLES = {"comparison": 1, "sampler": 2, "reverse": 3, "conditional_rep": 4, "moment_matched": 5}

DEFAULT_CHUNK = 1 << 16
DEFAULT_MEMORY_BUDGET = 20_000_000  # stored floats
MAX_FAILED_FRACTION = 1e-3


class SimulationError(RuntimeError):
    pass


@dataclass
class TrajectorySet:
    states: np.ndarray  # (paths, len(steps), d)
    steps: np.ndarray  # indices k of the retained states
    schedule: Schedule
    kind: str
    latent_x: np.ndarray | None = None
    failed: np.ndarray | None = None
    seed_manifest: dict = field(default_factory=dict)

    @property
    def paths(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    def at(self, k: int) -> np.ndarray:
        """States Y_k (or Z_k) for all paths, shape (paths, d)."""
        pos = np.flatnonzero(self.steps == k)
        if pos.size == 0:
            raise KeyError(f"step {k} was not retained")
        return self.states[:, pos[0], :]

    def write_csv(self, path) -> None:
        times = self.schedule.times
        d = self.dim
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "k", "t"] + [f"coord{i}" for i in range(d)])
            for p in range(self.paths):
                for j, k in enumerate(self.steps):
                    w.writerow([p, int(k), repr(float(times[k]))] + [repr(float(x)) for x in self.states[p, j]])


@dataclass
class ReverseDiagnostics:
    B_increments: np.ndarray  # (paths, n - 1, d), B_k for k = 1..n-1
    W_samples: np.ndarray  # (paths, n, d), W_m for m = 1..n
    cross_covariances: np.ndarray  # (n - 1, n): cov(B_k, W_m) per coordinate
    cross_se: np.ndarray
    var_B: np.ndarray  # (n - 1,)
    var_B_se: np.ndarray
    expected_var_B: np.ndarray  # delta_{k+1}

    @property
    def z_scores(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.cross_covariances / self.cross_se

    def future_mask(self) -> np.ndarray:
        """True where m > k (entries that must vanish)."""
        n = self.cross_covariances.shape[1]
        k = np.arange(1, n)[:, None]
        m = np.arange(1, n + 1)[None, :]
        return m > k


# --------------------------------------------------------------------------
# chunked execution


def _chunks(paths: int, chunk: int) -> list[tuple[int, int]]:
    return [(s, min(s + chunk, paths)) for s in range(0, paths, chunk)]


def map_chunks(fn: Callable[[int, int], object], paths: int, workers: int = 1, chunk: int = DEFAULT_CHUNK) -> list:
    """Apply ``fn(start, stop)`` to consecutive path ranges, results in path order."""
    if paths < 1:
        raise ValueError("paths must be >= 1")
    ranges = _chunks(paths, chunk)
    if workers <= 1 or len(ranges) == 1:
        return [fn(a, b) for a, b in ranges]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda r: fn(*r), ranges))


def _resolve_keep(keep, n: int, paths: int, d: int, budget: int) -> np.ndarray:
    if keep is None:
        if paths * (n + 1) * d <= budget:
            return np.arange(n + 1)
        return np.array([n])
    if isinstance(keep, str):
        if keep == "all":
            return np.arange(n + 1)
        if keep == "final":
            return np.array([n])
        raise ValueError(f"unknown keep spec {keep!r}")
    ks = np.unique(np.asarray(keep, dtype=int))
    if ks.size == 0 or ks.min() < 0 or ks.max() > n:
        raise ValueError("kept steps out of range")
    return ks


def _manifest(kind: str, master_seed: int, paths: int) -> dict:
    return {"master_seed": int(master_seed), "role": ROLES[kind], "kind": kind, "stream_ids": f"role<<48 | path, path in [0, {paths})"}


# --------------------------------------------------------------------------
# step generators: yield (k, state_before, state_after) for k = 1..n


def comparison_steps(model: tg.TargetModel, schedule: Schedule, batch: StreamBatch) -> Iterator:
    """Y_k = Y_{k-1} + delta_k X + sqrt(delta_k) N_k; first yields the latent X."""
    x = tg.sample_batch(model, batch)
    yield x
    y = np.zeros_like(x)
    for k, dk in enumerate(schedule.increments, start=1):
        nxt = y + dk * x + math.sqrt(dk) * batch.normals(model.dim)
        yield k, y, nxt
        y = nxt


def sampler_steps(spec: est.EstimatorSpec, schedule: Schedule, batch: StreamBatch, p: int) -> Iterator:
    z = np.zeros((p, spec.model.dim))
    times = schedule.times
    for k, dk in enumerate(schedule.increments, start=1):
        drift = est.evaluate_batch(spec, z, times[k - 1])
        nxt = z + dk * drift + math.sqrt(dk) * batch.normals(spec.model.dim)
        yield k, z, nxt
        z = nxt


def conditional_steps(model: tg.TargetModel, schedule: Schedule, batch: StreamBatch, p: int) -> Iterator:
    y = np.zeros((p, model.dim))
    times = schedule.times
    for k, dk in enumerate(schedule.increments, start=1):
        xk = tg.sample_posterior_batch(model, y, times[k - 1], batch)
        nxt = y + dk * xk + math.sqrt(dk) * batch.normals(model.dim)
        yield k, y, nxt
        y = nxt


def moment_matched_steps(kernel: est.KernelSpec, schedule: Schedule, batch: StreamBatch, p: int) -> Iterator:
    model = kernel.model
    z = np.zeros((p, model.dim))
    times = schedule.times
    eye = np.eye(model.dim)
    for k, dk in enumerate(schedule.increments, start=1):
        t = times[k - 1]
        if kernel.variant == "gaussian_matched":
            mean, cov = est.kernel_moments_batch(kernel, z, t)
            root = est.psd_sqrt(dk * dk * cov + dk * eye)
            nxt = z + dk * mean + np.einsum("pij,pj->pi", root, batch.normals(model.dim))
        else:
            xk = est.sample_kernel_batch(kernel, z, t, batch)
            nxt = z + dk * xk + math.sqrt(dk) * batch.normals(model.dim)
        yield k, z, nxt
        z = nxt


# --------------------------------------------------------------------------
# forward simulations


def _collect_forward(kind, make_steps, schedule, paths, master_seed, d, keep, workers, chunk, memory_budget, latent):
    n = schedule.n
    ks = _resolve_keep(keep, n, paths, d, memory_budget)
    role = ROLES[kind]

    def run(a: int, b: int):
        batch = StreamBatch(master_seed, path_stream_ids(role, a, b))
        p = b - a
        out = np.empty((p, ks.size, d))
        pos = {int(k): j for j, k in enumerate(ks)}
        if 0 in pos:
            out[:, pos[0], :] = 0.0
        failed = np.zeros(p, dtype=bool)
        steps = make_steps(batch, p)
        x = next(steps) if latent else None
        for k, _, nxt in steps:
            bad = ~np.all(np.isfinite(nxt), axis=1)
            if bad.any():
                failed |= bad
                nxt[bad] = np.nan
            if k in pos:
                out[:, pos[k], :] = nxt
        return out, x, failed

    parts = map_chunks(run, paths, workers, chunk)
    failed = np.concatenate([p[2] for p in parts])
    if failed.mean() > MAX_FAILED_FRACTION:
        raise SimulationError(f"{int(failed.sum())} of {paths} paths produced non-finite states")
    return TrajectorySet(
        states=np.concatenate([p[0] for p in parts]),
        steps=ks,
        schedule=schedule,
        kind=kind,
        latent_x=np.concatenate([p[1] for p in parts]) if latent else None,
        failed=failed,
        seed_manifest=_manifest(kind, master_seed, paths),
    )


def simulate_comparison(model, schedule, paths, master_seed, *, keep=None, workers=1, chunk=DEFAULT_CHUNK,
                        memory_budget=DEFAULT_MEMORY_BUDGET) -> TrajectorySet:
    """Comparison chain driven by one latent X per path (stored in ``latent_x``)."""
    return _collect_forward(
        "comparison", lambda batch, p: comparison_steps(model, schedule, batch),
        schedule, paths, master_seed, model.dim, keep, workers, chunk, memory_budget, latent=True,
    )


def simulate_sampler(spec: est.EstimatorSpec, schedule, paths, master_seed, *, keep=None, workers=1,
                     chunk=DEFAULT_CHUNK, memory_budget=DEFAULT_MEMORY_BUDGET) -> TrajectorySet:
    """Z_k = Z_{k-1} + delta_k f(Z_{k-1}, t_{k-1}) + sqrt(delta_k) N_k from Z_0 = 0."""
    return _collect_forward(
        "sampler", lambda batch, p: sampler_steps(spec, schedule, batch, p),
        schedule, paths, master_seed, spec.model.dim, keep, workers, chunk, memory_budget, latent=False,
    )


def simulate_conditional_representation(model, schedule, paths, master_seed, *, keep=None, workers=1,
                                        chunk=DEFAULT_CHUNK, memory_budget=DEFAULT_MEMORY_BUDGET) -> TrajectorySet:
    """Chain that redraws X_k from the exact posterior at every step."""
    return _collect_forward(
        "conditional_rep", lambda batch, p: conditional_steps(model, schedule, batch, p),
        schedule, paths, master_seed, model.dim, keep, workers, chunk, memory_budget, latent=False,
    )


def simulate_moment_matched(model, schedule, paths, master_seed, kernel: est.KernelSpec, *, keep=None, workers=1,
                            chunk=DEFAULT_CHUNK, memory_budget=DEFAULT_MEMORY_BUDGET) -> TrajectorySet:
    if kernel.model is not model:
        kernel = est.KernelSpec(model, kernel.variant)
    return _collect_forward(
        "moment_matched", lambda batch, p: moment_matched_steps(kernel, schedule, batch, p),
        schedule, paths, master_seed, model.dim, keep, workers, chunk, memory_budget, latent=False,
    )


def simulate_reverse(model, schedule, paths, master_seed, *, keep=None, workers=1, chunk=DEFAULT_CHUNK,
                     memory_budget=DEFAULT_MEMORY_BUDGET) -> TrajectorySet:
    """Draw Y_n = t_n X + sqrt(t_n) N, then walk down with
    Y_k = (t_k / t_{k+1}) Y_{k+1} + sqrt(t_k / t_{k+1}) B_k, B_k ~ N(0, delta_{k+1} I)."""
    n, d = schedule.n, model.dim
    ks = _resolve_keep(keep, n, paths, d, memory_budget)
    times, inc = schedule.times, schedule.increments

    def run(a: int, b: int):
        batch = StreamBatch(master_seed, path_stream_ids(ROLES["reverse"], a, b))
        x = tg.sample_batch(model, batch)
        tn = times[n]
        y = tn * x + math.sqrt(tn) * batch.normals(d)
        out = np.empty((b - a, ks.size, d))
        pos = {int(k): j for j, k in enumerate(ks)}
        if n in pos:
            out[:, pos[n], :] = y
        for k in range(n - 1, -1, -1):
            ratio = times[k] / times[k + 1]
            bk = math.sqrt(inc[k]) * batch.normals(d)  # inc[k] is delta_{k+1}
            y = ratio * y + math.sqrt(ratio) * bk
            if k in pos:
                out[:, pos[k], :] = y
        return out, x

    parts = map_chunks(run, paths, workers, chunk)
    return TrajectorySet(
        states=np.concatenate([p[0] for p in parts]),
        steps=ks,
        schedule=schedule,
        kind="reverse",
        latent_x=np.concatenate([p[1] for p in parts]),
        failed=np.zeros(paths, dtype=bool),
        seed_manifest=_manifest("reverse", master_seed, paths),
    )


def reverse_diagnostics(model, schedule, paths, master_seed, *, workers=1, chunk=DEFAULT_CHUNK) -> ReverseDiagnostics:
    """B_k = sqrt(t_{k+1}/t_k) Y_k - sqrt(t_k/t_{k+1}) Y_{k+1} from forward paths,
    with sample covariances against W_m = Y_m - t_m X."""
    n = schedule.n
    if n < 2:
        raise ValueError("need n >= 2")
    traj = simulate_comparison(model, schedule, paths, master_seed, keep="all", workers=workers, chunk=chunk,
                               memory_budget=np.inf)
    t = schedule.times
    y = traj.states  # (P, n+1, d)
    w = y[:, 1:, :] - t[None, 1:, None] * traj.latent_x[:, None, :]
    tk, tk1 = t[1:n], t[2:n + 1]
    b = np.sqrt(tk1 / tk)[None, :, None] * y[:, 1:n, :] - np.sqrt(tk / tk1)[None, :, None] * y[:, 2:n + 1, :]
    p, d = paths, model.dim

    bc = b - b.mean(axis=0)
    wc = w - w.mean(axis=0)
    # per-path products averaged over coordinates: (P, n-1, n)
    prod = np.einsum("pkd,pmd->pkm", bc, wc) / d
    cov = prod.mean(axis=0)
    se = prod.std(axis=0, ddof=1) / math.sqrt(p)
    sq = np.mean(b**2, axis=2)  # zero-mean by construction
    return ReverseDiagnostics(
        B_increments=b,
        W_samples=w,
        cross_covariances=cov,
        cross_se=se,
        var_B=sq.mean(axis=0),
        var_B_se=sq.std(axis=0, ddof=1) / math.sqrt(p),
        expected_var_B=schedule.increments[1:].copy(),
    )
