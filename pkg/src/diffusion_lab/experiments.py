"""Experiment orchestration: config parsing, runs, CSV/manifest persistence."""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import divergence as dv
from . import estimators as est
from . import schedules as sc
from . import targets as tg
from .processes import (
    reverse_diagnostics,
    simulate_comparison,
    simulate_conditional_representation,
    simulate_moment_matched,
    simulate_reverse,
    simulate_sampler,
)
from .stats import fit_loglog_slope
from .svg import SvgCanvas

EXPERIMENTS = ("divergence", "rate_study", "schedule_sweep", "reverse_check", "tweedie_check", "figure1")
DEFAULT_N_GRID = [8, 16, 32, 64, 128, 256, 512]
DEFAULT_PATHS = 100_000

EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


@dataclass
class RunConfig:
    experiment: str
    target: dict
    schedule: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    estimator: dict | None = None
    kernel: dict | None = None
    paths: int = DEFAULT_PATHS
    seed: int = 0
    out: str = "results"
    workers: int = 1
    tolerance: float = 1e-8
    options: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return config_digest(self.raw)


def config_digest(doc: dict) -> str:
    """SHA-256 of the canonical JSON form; stable under key reordering."""
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


_KNOWN = {"experiment", "target", "schedule", "sweep", "estimator", "kernel", "paths", "seed", "out", "workers", "tolerance"}


def parse_config(doc: dict, experiment: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Validate a config document; ``overrides`` replace top-level keys."""
    doc = dict(doc)
    for k, v in (overrides or {}).items():
        if v is not None:
            doc[k] = v
    if experiment is not None:
        doc["experiment"] = experiment
    exp = doc.get("experiment")
    if exp not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {exp!r}")
    if "target" not in doc or not isinstance(doc["target"], dict):
        raise ConfigError("config needs a 'target' object")
    try:
        seed = int(doc.get("seed", 0))
        paths = int(doc.get("paths", DEFAULT_PATHS))
        workers = int(doc.get("workers", 1))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if not 0 <= seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    if paths < 0 or workers < 1:
        raise ConfigError("paths must be >= 0 and workers >= 1")
    cfg = RunConfig(
        experiment=exp,
        target=doc["target"],
        schedule=doc.get("schedule") or {},
        sweep=doc.get("sweep") or {},
        estimator=doc.get("estimator"),
        kernel=doc.get("kernel"),
        paths=paths,
        seed=seed,
        out=str(doc.get("out", "results")),
        workers=workers,
        tolerance=float(doc.get("tolerance", 1e-8)),
        options={k: v for k, v in doc.items() if k not in _KNOWN},
        raw=doc,
    )
    # fail early on invalid specs
    try:
        model = tg.from_config(cfg.target)
        if cfg.estimator is not None:
            est.estimator_from_config(cfg.estimator, model)
        if cfg.kernel is not None:
            est.kernel_from_config(cfg.kernel, model)
        for sched in _schedule_grid(cfg):
            sc.from_config(sched)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    for key, vals in cfg.sweep.items():
        if not isinstance(vals, list) or not vals:
            raise ConfigError(f"sweep grid {key!r} must be a nonempty list")
    return cfg


def load_config(path, experiment=None, overrides=None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    return parse_config(doc, experiment, overrides)


def _schedule_grid(cfg: RunConfig) -> list[dict]:
    base = dict(cfg.schedule)
    if cfg.experiment == "schedule_sweep":
        alphas = cfg.options.get("alpha_grid", [1.0])
        return [dict(base, family="geometric", alpha=a) for a in alphas] if base else []
    if cfg.experiment == "rate_study":
        grid = cfg.options.get("n_grid", DEFAULT_N_GRID)
        return [dict(base, family="uniform", n=n) for n in grid] if base else []
    if not base:
        return []
    keys = [k for k in ("T", "alpha", "n") if k in cfg.sweep]
    if not keys:
        return [base]
    out = []
    for combo in itertools.product(*(cfg.sweep[k] for k in keys)):
        out.append(dict(base, **dict(zip(keys, combo))))
    return out


# --------------------------------------------------------------------------
# results


@dataclass
class ExperimentResult:
    columns: list[str]
    rows: list[list]
    violations: list[str] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    svg: str | None = None
    trajectories: object | None = None

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_fmt(v) for v in row])
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def _model_label(cfg: RunConfig, model: tg.TargetModel) -> str:
    return cfg.target.get("name", model.kind)


def _sched_alpha(s: sc.Schedule):
    return s.alpha if s.alpha is not None else None


# --------------------------------------------------------------------------
# experiments


def run_divergence(cfg: RunConfig) -> ExperimentResult:
    model = tg.from_config(cfg.target)
    estimator = est.estimator_from_config(cfg.estimator or {}, model)
    kernel = est.kernel_from_config(cfg.kernel, model) if cfg.kernel else None
    cols = ["model", "schedule", "alpha", "T", "n", "estimator", "delta_exact", "thm1", "thm2", "mc", "mc_se", "tv"]
    rows, violations = [], []
    reports = []
    for sched_cfg in _schedule_grid(cfg):
        sched = sc.from_config(sched_cfg)
        rep = dv.delta_exact(model, sched, estimator, cfg.tolerance)
        if cfg.paths > 0:
            sampler = kernel if kernel is not None else estimator
            kl = dv.pathwise_kl_estimate(model, sched, sampler, cfg.paths, cfg.seed, workers=cfg.workers)
            rep.mc_estimate, rep.mc_stderr, rep.paths_used = kl.estimate, kl.stderr, kl.paths
        for v in rep.violations:
            violations.append(f"{sched.family} T={sched.T} n={sched.n}: {v}")
        reports.append(rep)
        rows.append([
            _model_label(cfg, model), sched.family, _sched_alpha(sched), sched.T, sched.n,
            (kernel.label if kernel is not None else estimator.label),
            rep.delta_exact, rep.thm1_bound, rep.thm2_bound, rep.mc_estimate, rep.mc_stderr, rep.tv_bound,
        ])
    result = ExperimentResult(cols, rows, violations, {"points": len(rows)})
    dump = cfg.options.get("dump_trajectories")
    if dump:
        result.trajectories = _dump_trajectories(cfg, model, estimator, kernel, dump)
    result.summary["reports"] = [r.__dict__ | {"violations": list(r.violations)} for r in reports]
    return result


def _dump_trajectories(cfg, model, estimator, kernel, dump: dict):
    sched = sc.from_config(_schedule_grid(cfg)[0])
    kind = dump.get("kind", "comparison")
    paths = int(dump.get("paths", 10))
    if kind == "comparison":
        return simulate_comparison(model, sched, paths, cfg.seed, keep="all")
    if kind == "sampler":
        return simulate_sampler(estimator, sched, paths, cfg.seed, keep="all")
    if kind == "reverse":
        return simulate_reverse(model, sched, paths, cfg.seed, keep="all")
    if kind == "conditional_rep":
        return simulate_conditional_representation(model, sched, paths, cfg.seed, keep="all")
    if kind == "moment_matched":
        return simulate_moment_matched(model, sched, paths, cfg.seed, kernel or est.KernelSpec(model), keep="all")
    raise ConfigError(f"unknown trajectory kind {kind!r}")


def run_rate_study(cfg: RunConfig) -> ExperimentResult:
    """Divergence against n on uniform grids and a log-log slope fit.

    Order 1 uses the exact decomposition. Order 2 uses the Monte Carlo
    estimate with the Gaussian-matched kernel; paths scale as
    ``paths * (n / n_max)^2`` (floored at ``min_paths``) since the relative
    standard error behaves like ``1 / sqrt(delta * paths)``.
    """
    model = tg.from_config(cfg.target)
    order = int(cfg.options.get("order", 1))
    grid = sorted(int(n) for n in cfg.options.get("n_grid", DEFAULT_N_GRID))
    T = float(cfg.schedule.get("T", 1.0))
    if order not in (1, 2):
        raise ConfigError("order must be 1 or 2")
    rows, vals, ses = [], [], []
    if order == 1:
        estimator = est.estimator_from_config(cfg.estimator or {}, model)
        label = estimator.label
        for n in grid:
            rep = dv.delta_exact(model, sc.uniform_schedule(T, n), estimator, cfg.tolerance)
            rows.append([n, rep.delta_exact, 0.0, 0, rep.thm1_bound])
            vals.append(rep.delta_exact)
            ses.append(0.0)
    else:
        kernel = est.kernel_from_config(cfg.kernel or {"variant": "gaussian_matched"}, model)
        label = kernel.label
        n_max = grid[-1]
        min_paths = int(cfg.options.get("min_paths", 10_000))
        for n in grid:
            p = max(min_paths, int(math.ceil(cfg.paths * (n / n_max) ** 2)))
            kl = dv.pathwise_kl_estimate(model, sc.uniform_schedule(T, n), kernel, p, cfg.seed, workers=cfg.workers)
            rows.append([n, kl.estimate, kl.stderr, kl.paths, dv.thm1_bound(model, sc.uniform_schedule(T, n))])
            vals.append(kl.estimate)
            ses.append(kl.stderr)
    vals, ses = np.array(vals), np.array(ses)
    summary = {"order": order, "sampler": label, "T": T, "n_grid": grid}
    violations = []
    floor = 1e-12
    # "indistinguishable from zero" only counts when the noise itself is tiny;
    # otherwise a fit is required (and fails loudly if the paths are too few)
    resolution = float(cfg.options.get("zero_resolution", 1e-6))
    zero_consistent = bool(np.all(np.abs(vals) <= 3.0 * ses + floor) and np.all(ses <= resolution))
    if order == 2 and zero_consistent:
        summary["zero_consistent"] = True
        summary["slope"] = None
    else:
        if order == 2 and not (ses[-1] < 0.1 * vals[-1]):
            raise NumericalFailure(
                f"Monte Carlo noise too large at n={grid[-1]} (estimate {vals[-1]:.3e} +- {ses[-1]:.3e}); increase paths"
            )
        try:
            fit = fit_loglog_slope(grid, vals, ses if order == 2 else None)
        except ValueError as exc:
            raise NumericalFailure(f"{exc}; increase paths") from exc
        summary.update(zero_consistent=False, slope=fit.slope, slope_se=fit.slope_se, ci_low=fit.ci_low, ci_high=fit.ci_high)
        rng = cfg.options.get("expected_slope")
        if rng is not None and not (rng[0] <= fit.slope <= rng[1]):
            violations.append(f"slope {fit.slope:.4f} outside {rng}")
    cols = ["n", "delta", "stderr", "paths", "thm1"]
    return ExperimentResult(cols, rows, violations, summary)


def run_schedule_sweep(cfg: RunConfig) -> ExperimentResult:
    model = tg.from_config(cfg.target)
    T = float(cfg.schedule["T"])
    n = int(cfg.schedule["n"])
    alphas = []
    for a in cfg.options.get("alpha_grid", [1.0]):
        alphas.append(sc.corollary_alpha(T, n) if a == "corollary" else float(a))
    info_T = tg.mutual_information(model, T, cfg.tolerance)
    rows, violations = [], []
    for a in alphas:
        sched = sc.geometric_schedule(T, n, a)
        rep = dv.delta_exact(model, sched, None, cfg.tolerance)
        b2 = dv.thm2_bound(model, T, n, a, cfg.tolerance)
        ratio = rep.delta_exact * n / (math.log(T) * info_T) if T > 1 and info_T > 0 else None
        if rep.delta_exact > b2 + 1e-9:
            violations.append(f"alpha={a!r}: delta {rep.delta_exact:.6g} > bound {b2:.6g}")
        violations.extend(f"alpha={a!r}: {v}" for v in rep.violations)
        rows.append([a, sched.family, rep.delta_exact, b2, rep.thm1_bound, ratio])
    d = np.array([r[2] for r in rows])
    b = np.array([r[3] for r in rows])
    summary = {
        "T": T,
        "n": n,
        "argmin_delta_alpha": alphas[int(np.argmin(d))],
        "argmin_thm2_alpha": alphas[int(np.argmin(b))],
        "corollary_alpha": sc.corollary_alpha(T, n) if T * math.log(T) > 1 else None,
        "uniform_limit_bound": dv.thm2_bound(model, T, n, 1.0, cfg.tolerance),
    }
    cols = ["alpha", "family", "delta_exact", "thm2", "thm1", "corollary_ratio"]
    return ExperimentResult(cols, rows, violations, summary)


def run_reverse_check(cfg: RunConfig) -> ExperimentResult:
    model = tg.from_config(cfg.target)
    sched = sc.from_config(cfg.schedule)
    diag = reverse_diagnostics(model, sched, cfg.paths, cfg.seed, workers=cfg.workers)
    zmax = float(cfg.options.get("z_threshold", 4.0))
    rows, violations = [], []
    z = diag.z_scores
    mask = diag.future_mask()
    n = sched.n
    for i in range(n - 1):
        for j in range(n):
            k, m = i + 1, j + 1
            rows.append(["cov", k, m, diag.cross_covariances[i, j], 0.0 if mask[i, j] else None, diag.cross_se[i, j], z[i, j]])
            if mask[i, j] and not abs(z[i, j]) < zmax:
                violations.append(f"cov(B_{k}, W_{m}) z-score {z[i, j]:.2f}")
    for i in range(n - 1):
        zv = (diag.var_B[i] - diag.expected_var_B[i]) / diag.var_B_se[i]
        rows.append(["var", i + 1, None, diag.var_B[i], diag.expected_var_B[i], diag.var_B_se[i], zv])
        if not abs(zv) < zmax:
            violations.append(f"Var(B_{i + 1}) z-score {zv:.2f}")
    summary = {"max_future_abs_z": float(np.max(np.abs(z[mask]))), "paths": cfg.paths}
    return ExperimentResult(["quantity", "k", "m", "value", "expected", "se", "z"], rows, violations, summary)


def run_tweedie_check(cfg: RunConfig) -> ExperimentResult:
    model = tg.from_config(cfg.target)
    grid = cfg.options.get("y_grid", {"start": -5.0, "stop": 5.0, "num": 101})
    ys = np.linspace(float(grid["start"]), float(grid["stop"]), int(grid["num"]))
    a = float(cfg.options.get("a", 1.0))
    sigma = float(cfg.options.get("sigma", 1.0))
    h = float(cfg.options.get("fd_step", 1e-5))
    tol = float(cfg.options.get("tweedie_tol", 1e-4))
    if model.dim != 1:
        raise ConfigError("tweedie_check supports d = 1 targets")
    y2 = ys[:, None]
    score = est.tweedie_score(model, y2, a, sigma)[:, 0]
    fd = (tg.log_marginal_density(model, y2 + h, a, sigma) - tg.log_marginal_density(model, y2 - h, a, sigma)) / (2 * h)
    dev = np.abs(score - fd)
    rows = [[y, s, f, e] for y, s, f, e in zip(ys, score, fd, dev)]
    violations = [] if dev.max() < tol else [f"max deviation {dev.max():.3e} >= {tol}"]
    return ExperimentResult(["y", "score_tweedie", "score_fd", "abs_dev"], rows, violations, {"max_abs_dev": float(dev.max())})


def run_figure1(cfg: RunConfig) -> ExperimentResult:
    model = tg.from_config(cfg.target)
    sched = sc.from_config(cfg.schedule or {"family": "uniform", "T": 5.0, "n": 5})
    fig = dv.figure1_decomposition(model, sched, int(cfg.options.get("samples", 201)), cfg.tolerance)
    rows = [["curve", t, m] for t, m in zip(fig.curve_t, fig.curve_m)]
    rows += [["step", t, m] for t, m in zip(fig.step_t, fig.step_m)]
    limit = sched.delta_max * model.trace_cov
    violations = [] if fig.gap_area <= limit + 1e-9 else [f"gap area {fig.gap_area:.6g} exceeds {limit:.6g}"]
    summary = {"riemann_area": fig.riemann_area, "info_area": fig.info_area, "gap_area": fig.gap_area,
               "delta": fig.gap_area / 2.0, "gap_limit": limit}
    return ExperimentResult(["series", "t", "M"], rows, violations, summary, svg=figure1_svg(fig, model))


def figure1_svg(fig: dv.Figure1Data, model: tg.TargetModel) -> str:
    c = SvgCanvas()
    T = float(fig.times[-1])
    top = max(model.trace_cov, 1e-12) * 1.1
    c.set_limits((0.0, T * 1.02), (0.0, top))
    # shaded M(t) area (mutual information) and the Riemann gaps
    c.filled([0.0, *fig.curve_t, T], [0.0, *fig.curve_m, 0.0], fill="blue", opacity=0.15)
    for k in range(len(fig.times) - 1):
        a, b = fig.times[k], fig.times[k + 1]
        sel = (fig.curve_t >= a) & (fig.curve_t <= b)
        xs = np.concatenate([[a], fig.curve_t[sel], [b]])
        ys = tg.mmse(model, xs)
        c.filled([a, *xs, b], [fig.m_at_times[k], *ys, fig.m_at_times[k]], fill="red", opacity=0.35)
    c.axes()
    c.polyline(fig.curve_t, fig.curve_m, stroke="blue", width=2.5)
    c.polyline(fig.step_t, fig.step_m, stroke="red", width=2.0)
    for k, t in enumerate(fig.times):
        c.text(t, -0.05 * top, f"t{k}", size=11)
    c.text(T * 0.75, top * 0.9, "M(t)", size=13)
    c.text(T * 0.75, top * 0.82, f"gap area = {fig.gap_area:.6f}", size=12)
    return c.render()


RUNNERS = {
    "divergence": run_divergence,
    "rate_study": run_rate_study,
    "schedule_sweep": run_schedule_sweep,
    "reverse_check": run_reverse_check,
    "tweedie_check": run_tweedie_check,
    "figure1": run_figure1,
}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def execute(cfg: RunConfig) -> tuple[ExperimentResult, dict]:
    """Run an experiment and persist results.csv, manifest.json and extras."""
    start = time.perf_counter()
    result = RUNNERS[cfg.experiment](cfg)
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory not writable: {exc}") from exc
    files = ["results.csv"]
    (out / "results.csv").write_text(result.csv_text(), encoding="utf-8")
    if result.svg is not None:
        (out / "figure1.svg").write_text(result.svg, encoding="utf-8")
        files.append("figure1.svg")
    if result.trajectories is not None:
        result.trajectories.write_csv(out / "trajectories.csv")
        files.append("trajectories.csv")
    model = tg.from_config(cfg.target)
    manifest = {
        "tool": "diffusion_lab",
        "version": __version__,
        "experiment": cfg.experiment,
        "config_digest": cfg.digest,
        "model_hash": config_digest(cfg.target),
        "seed": cfg.seed,
        "paths": cfg.paths,
        "workers": cfg.workers,
        "schedule": cfg.schedule,
        "subgaussian_L": model.subgaussian_L,
        "tolerances": {"quadrature": cfg.tolerance, "invariant": 1e-9, "mmse_rule": model.quadrature},
        "outputs": files + ["manifest.json"],
        "violations": result.violations,
        "summary": _jsonable(result.summary),
        "wall_clock_seconds": time.perf_counter() - start,
    }
    (out / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return result, manifest
