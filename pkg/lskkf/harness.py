"""
Experiment harness
Runs synthetic truth plus every configured observer over the heating schedule,
computes probe RMS and the STD(e_k) estimate, writes ``report.json``,
``steps.csv`` and optional field snapshots, and times per-step cost across grid
sizes for the scaling benchmark.
"""

import json
import logging
import math
import time
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, NamedTuple

from .config import (
    ExperimentConfig,
    ObserverSection,
    build_material_config,
    build_noise_config,
    config_digest,
    resolve_thread_count,
)
from .errors import LskkfError, ShapeError
from .fields import ScalarField, write_pgm, write_sf1
from .model import (
    NoiseConfig,
    SystemModel,
    assemble_system,
    describe,
    export_trajectory,
    input_matrix,
    noise_normalization,
    phantom_config,
    pod_reduce,
    pod_snapshots,
    simulate_truth,
)
from .observers import (
    ObserverState,
    current_estimate,
    init_enkf,
    init_lskkf,
    init_luenberger,
    init_romkf,
    kernel_factor,
    step,
)

import duckdb
import numpy as np
import pandas as pd
import psutil

logger = logging.getLogger(__name__)

PROBE_COUNT = 6
STEPS_LOG = "steps.csv"
REPORT_FILE = "report.json"
CONFIG_FILE = "config.json"
RECOVERABLE = (LskkfError, FloatingPointError, MemoryError, np.linalg.LinAlgError)


class ProbeRms(NamedTuple):
    per_probe: np.ndarray
    total: float


@dataclass
class ObserverResult:
    name: str
    type: str
    probe_rms: list[float] = field(default_factory=list)
    total_rms: float | None = None
    std_estimate: float | None = None
    std_pair: tuple[int, int] | None = None
    cg_iterations: list[int] | None = None
    cg_converged: list[bool] | None = None
    steps_completed: int = 0
    failure: str | None = None
    extra: dict[str, Any] = field(default_factory=dict)
    step_times: list[float] = field(default_factory=list)

    @property
    def mean_step_time(self) -> float | None:
        return float(np.mean(self.step_times)) if self.step_times else None


@dataclass
class ExperimentReport:
    seed: int
    digest: str
    steps: int
    probe_indices: list[int]
    model: dict[str, Any]
    observers: dict[str, ObserverResult] = field(default_factory=dict)
    setup_time: float = 0.0

    @property
    def partial(self) -> bool:
        return any(r.failure for r in self.observers.values())

    def to_dict(self) -> dict[str, Any]:
        """Report as plain data; every wall-clock value sits under ``timing``."""
        observers = {}
        timing = {"setup_s": self.setup_time, "observers": {}}
        for name, res in self.observers.items():
            entry = asdict(res)
            entry.pop("step_times")
            observers[name] = entry
            timing["observers"][name] = {"step_times_s": res.step_times, "mean_step_time_s": res.mean_step_time}
        return {
            "seed": self.seed,
            "digest": self.digest,
            "steps": self.steps,
            "probe_indices": self.probe_indices,
            "model": self.model,
            "partial": self.partial,
            "observers": observers,
            "timing": timing,
        }


# Metrics ======================================================================
def rms_at_probes(estimates: np.ndarray, truth: np.ndarray, probe_indices: np.ndarray) -> ProbeRms:
    """
    Per-probe RMS over time and the RMS over all probe residuals.

    Args:
        estimates: (steps, n) estimated states.
        truth: (steps, n) true states, aligned with ``estimates``.
        probe_indices: columns to evaluate.
    """
    estimates = np.atleast_2d(np.asarray(estimates, dtype=np.float64))
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    probe_indices = np.asarray(probe_indices, dtype=np.int64)
    if estimates.shape != truth.shape:
        raise ShapeError(f"estimates {estimates.shape} and truth {truth.shape} are not aligned")
    if estimates.shape[0] == 0 or probe_indices.size == 0:
        raise ShapeError("RMS needs at least one step and one probe")
    residual = estimates[:, probe_indices] - truth[:, probe_indices]
    per_probe = np.sqrt(np.mean(residual**2, axis=0))
    return ProbeRms(per_probe=per_probe, total=float(np.sqrt(np.mean(residual**2))))


def std_estimate(x_k: np.ndarray, x_next: np.ndarray) -> float:
    """(√2/2)·sample std of x̂_k − x̂_{k+1}: the error spread of a nearly static estimate."""
    diff = np.asarray(x_k, dtype=np.float64) - np.asarray(x_next, dtype=np.float64)
    if diff.ndim != 1 or diff.size < 2:
        raise ShapeError(f"STD estimate needs two equal-length vectors of at least 2 entries, got {diff.shape}")
    return float(math.sqrt(2.0) / 2.0 * np.std(diff, ddof=1))


def default_probe_indices(model: SystemModel, count: int = PROBE_COUNT) -> np.ndarray:
    """
    ``count`` measurable cells stratified by distance to the nearest heat-load focus.

    Distance quantiles grow quadratically, so the first probe sits on a focus and
    the last one far from both.
    """
    candidates = model.measurement_indices
    coords = model.grid.coordinates()
    foci = list(model.material.foci) if model.material is not None and model.material.foci else []
    if foci:
        centres = coords[foci]
    else:
        centres = coords.mean(axis=0, keepdims=True)
    cand = coords[candidates]
    distance = np.min(np.linalg.norm(cand[:, None, :] - centres[None, :, :], axis=2), axis=1)
    order = candidates[np.argsort(distance, kind="stable")]
    quantiles = 0.9 * (np.arange(count) / max(count - 1, 1)) ** 2
    picks = np.unique(np.round(quantiles * (order.size - 1)).astype(int))
    return order[picks]


# Observers ====================================================================
def child_seeds(seed: int, count: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count, dtype=np.uint64)]


def lskkf_gamma(spec: ObserverSection, noise: NoiseConfig, model: SystemModel) -> tuple[float, float]:
    """(γ, σ) for the LSK-KF prior: configured values, else ``prior_scale`` times the nominal L_Q."""
    sigma = spec.param("sigma") or noise.process_sigma
    gamma = spec.param("gamma")
    if gamma is None:
        gamma = spec.param("prior_scale") * noise.process_std
        if spec.param("kernel") == "masked_gaussian":
            gamma /= noise_normalization(model.grid, sigma)
    return float(gamma), float(sigma)


def init_observer(
    spec: ObserverSection, model: SystemModel, noise: NoiseConfig, seed: int, threads: int = 1
) -> tuple[ObserverState, dict[str, Any]]:
    """Build the initial state for one configured observer, plus descriptive extras."""
    if spec.type == "lskkf":
        gamma, sigma = lskkf_gamma(spec, noise, model)
        L = kernel_factor(model, spec.param("kernel"), gamma, sigma)
        st = init_lskkf(
            model,
            L,
            cg_tol=spec.param("cg_tol"),
            cg_max_iter=spec.param("cg_max_iter"),
            warm_start=spec.param("warm_start"),
        )
        return st, {"kernel": spec.param("kernel"), "gamma": gamma, "sigma": sigma}
    if spec.type == "enkf":
        st = init_enkf(model, spec.param("members"), seed, mode=spec.param("mode"), threads=threads)
        return st, {"members": spec.param("members"), "mode": spec.param("mode")}
    if spec.type == "romkf":
        V = pod_reduce(pod_snapshots(model, spec.param("snapshot_steps")), spec.param("energy_fraction"))
        return init_romkf(model, V, p0_scale=spec.param("p0_scale")), {"n_r": int(V.shape[1])}
    st = init_luenberger(model, n_samples=spec.param("samples"), seed=seed)
    return st, {"gain_mean": float(np.mean(st.gain))}


def _run_observer(
    spec: ObserverSection,
    model: SystemModel,
    noise: NoiseConfig,
    run: tuple[np.ndarray, np.ndarray],
    probes: np.ndarray,
    seed: int,
    threads: int,
    keep: set[int],
) -> tuple[ObserverResult, np.ndarray, dict[int, np.ndarray]]:
    """Step one observer through the run; probe values every step, full estimates only at ``keep``."""
    inputs, outputs = run
    steps = outputs.shape[0]
    result = ObserverResult(name=spec.name, type=spec.type)
    kept: dict[int, np.ndarray] = {}
    at_probes = np.full((steps, probes.size), np.nan)
    if spec.type == "lskkf":
        result.cg_iterations, result.cg_converged = [], []
    try:
        st, result.extra = init_observer(spec, model, noise, seed, threads)
        if 0 in keep:
            kept[0] = current_estimate(st).copy()
        for k in range(1, steps + 1):
            t0 = time.perf_counter()
            st = step(st, model, inputs[k - 1], outputs[k - 1])
            result.step_times.append(time.perf_counter() - t0)
            x_hat = current_estimate(st)
            at_probes[k - 1] = x_hat[probes]
            if k in keep:
                kept[k] = x_hat.copy()
            if spec.type == "lskkf":
                result.cg_iterations.append(st.last_report.iterations)
                result.cg_converged.append(st.last_report.converged)
            result.steps_completed = k
    except RECOVERABLE as e:
        result.failure = f"{type(e).__name__}: {e}"
        logger.error(f"❌ Observer {spec.name} failed at step {result.steps_completed + 1}: {e}")
    return result, at_probes[: result.steps_completed], kept


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, threads: int | None = None) -> ExperimentReport:
    """
    Run truth plus all configured observers and write the artifacts.

    Model assembly, POD and kernel construction are excluded from step timing.
    Observer failures are recorded in the report instead of aborting the run.
    """
    out_dir = Path(out_dir if out_dir is not None else cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    threads = resolve_thread_count() if threads is None else threads
    digest = config_digest(cfg)
    t_setup = time.perf_counter()

    noise = build_noise_config(cfg)
    model = assemble_system(build_material_config(cfg), noise=noise, dt=cfg.model.dt)
    steps = cfg.model.steps
    inputs = input_matrix(steps)
    seeds = child_seeds(cfg.seed, len(cfg.observers) + 1)
    traj = simulate_truth(model, inputs, steps, seeds[0])
    probes = default_probe_indices(model)
    setup_time = time.perf_counter() - t_setup
    logger.info(f"🔄 Running {len(cfg.observers)} observers over {steps} steps (seed {cfg.seed})")
    logger.debug(f"Probes: {probes.tolist()}")

    report = ExperimentReport(
        seed=cfg.seed,
        digest=digest,
        steps=steps,
        probe_indices=[int(p) for p in probes],
        model=describe(model),
        setup_time=setup_time,
    )
    snapshot = cfg.snapshot_step
    keep = {steps - 1, steps, snapshot}
    rows = []
    snapshots = {"truth": traj.states[snapshot]}
    for spec, seed in zip(cfg.observers, seeds[1:], strict=True):
        run = (inputs, traj.outputs)
        result, probe_est, kept = _run_observer(spec, model, noise, run, probes, seed, threads, keep)
        done = result.steps_completed
        if done > 0:
            rms = rms_at_probes(probe_est, traj.states[1 : done + 1][:, probes], np.arange(probes.size))
            result.probe_rms = rms.per_probe.tolist()
            result.total_rms = rms.total
            for k in range(1, done + 1):
                for p, index in enumerate(probes):
                    rows.append(
                        {
                            "k": k,
                            "observer": spec.name,
                            "probe": p,
                            "index": int(index),
                            "estimate": float(probe_est[k - 1, p]),
                            "truth": float(traj.states[k, index]),
                            "step_time_s": result.step_times[k - 1],
                            "cg_iterations": result.cg_iterations[k - 1] if result.cg_iterations else None,
                        }
                    )
        if done == steps:
            result.std_estimate = std_estimate(kept[steps - 1], kept[steps])
            result.std_pair = (steps - 1, steps)
        if snapshot in kept:
            snapshots[spec.name] = kept[snapshot]
        report.observers[spec.name] = result
        if result.failure is None:
            logger.info(
                f"📊 {spec.name}: total RMS {result.total_rms:.4f} K, STD {result.std_estimate:.4f} K, "
                f"mean step {result.mean_step_time:.4f} s"
            )

    steps_log = pd.DataFrame(
        rows, columns=["k", "observer", "probe", "index", "estimate", "truth", "step_time_s", "cg_iterations"]
    )
    steps_log["digest"] = digest
    steps_log.to_csv(out_dir / STEPS_LOG, index=False)
    write_snapshots(snapshots, model, out_dir, snapshot, digest)
    if cfg.export_trajectory:
        export_trajectory(traj, model.grid, out_dir / "trajectory", digest)
    write_report(report, out_dir)
    if report.partial:
        logger.warning(f"⚠️ Partial report: {[n for n, r in report.observers.items() if r.failure]} failed")
    return report


def write_snapshots(snapshots: dict[str, np.ndarray], model: SystemModel, out_dir: Path, k: int, digest: str) -> None:
    """SF1 and PGM of truth and every estimate at step ``k``; 3-D fields are cut at the middle of the last axis."""
    slice_args = (2, model.grid.shape[2] // 2) if model.grid.ndim == 3 else (None, None)
    for name, values in snapshots.items():
        fld = ScalarField(model.grid, values)
        write_sf1(fld, out_dir / f"snapshot_k{k:02d}_{name}.sf1")
        write_pgm(fld, out_dir / f"snapshot_k{k:02d}_{name}.pgm", *slice_args)
    (out_dir / f"snapshot_k{k:02d}.digest").write_text(f"{digest}\n")


def write_report(report: ExperimentReport, out_dir: str | Path) -> Path:
    path = Path(out_dir) / REPORT_FILE
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    logger.info(f"✅ Report written to {path}")
    return path


def audit_steps_log(path: str | Path) -> dict[str, dict[str, Any]]:
    """Recompute per-probe and total RMS per observer from ``steps.csv`` with SQL."""
    conn = duckdb.connect(":memory:")
    try:
        source = str(Path(path)).replace("'", "''")
        per_probe = conn.execute(
            f"""
            SELECT observer, probe, sqrt(avg((estimate - truth) * (estimate - truth))) AS rms
            FROM read_csv_auto('{source}', header = true)
            GROUP BY observer, probe
            ORDER BY observer, probe
            """
        ).fetchall()
        totals = conn.execute(
            f"""
            SELECT observer, sqrt(avg((estimate - truth) * (estimate - truth))) AS rms, max(k) AS steps
            FROM read_csv_auto('{source}', header = true)
            GROUP BY observer
            ORDER BY observer
            """
        ).fetchall()
    finally:
        conn.close()
    audit: dict[str, dict[str, Any]] = {}
    for observer, total, last_step in totals:
        audit[observer] = {"probe_rms": [], "total_rms": float(total), "steps": int(last_step)}
    for observer, _probe, rms in per_probe:
        audit[observer]["probe_rms"].append(float(rms))
    return audit


# Scaling benchmark ============================================================
def _bench_shape(n: int) -> tuple[int, int]:
    side = max(2, int(round(math.sqrt(n))))
    return side, max(2, n // side)


def _memory_estimate(n: int, kind: str, members: int) -> int:
    """Rough bytes for model, factorization and observer state at ``n`` states."""
    per_state = 8 * (64 + 4 * math.log2(max(n, 2)))
    if kind == "enkf":
        per_state += 8 * 4 * members
    if kind == "romkf":
        per_state += 8 * 2 * 20
    return int(n * per_state)


def scaling_benchmark(
    sizes: list[int],
    observers: list[str],
    steps: int = 5,
    ensemble_sizes: Sequence[int] = (5, 10, 20),
    seed: int = 0,
    threads: int = 1,
    memory_budget: float | None = None,
) -> pd.DataFrame:
    """
    Median per-step wall-clock per grid size and observer.

    Rows whose memory estimate exceeds the budget (default: half the available
    memory) or that hit ``MemoryError`` are marked ``skipped``. The
    ``loglog_slope`` column holds the fitted slope of log(time) against log(n)
    per observer row group.
    """
    if steps < 5:
        raise ShapeError(f"benchmark needs at least 5 timed steps, got {steps}")
    budget = memory_budget if memory_budget is not None else 0.5 * psutil.virtual_memory().available
    noise = NoiseConfig()
    rows = []
    for requested in sizes:
        shape = _bench_shape(requested)
        n = math.prod(shape)
        try:
            model = assemble_system(phantom_config(shape), noise=noise)
            traj = simulate_truth(model, input_matrix(steps), steps, seed)
        except MemoryError:
            for kind in observers:
                for members in ensemble_sizes if kind == "enkf" else [None]:
                    rows.append(
                        {"n": n, "observer": kind, "members": members, "status": "skipped", "reason": "MemoryError"}
                    )
            continue
        for kind in observers:
            for members in ensemble_sizes if kind == "enkf" else [None]:
                row = {"n": n, "observer": kind, "members": members, "status": "ok", "reason": ""}
                need = _memory_estimate(n, kind, members or 0)
                if need > budget:
                    row.update(status="skipped", reason=f"needs ~{need / 2**20:.0f} MiB")
                    logger.warning(f"⚠️ Skipping {kind} at n={n}: {row['reason']}")
                    rows.append(row)
                    continue
                params = (("members", members),) if members else ()
                spec = ObserverSection(kind, params=params)
                try:
                    st, _ = init_observer(spec, model, noise, seed, threads)
                    times = []
                    for k in range(steps):
                        t0 = time.perf_counter()
                        st = step(st, model, traj.inputs[k], traj.outputs[k])
                        times.append(time.perf_counter() - t0)
                    row["median_step_s"] = float(np.median(times))
                except MemoryError:
                    row.update(status="skipped", reason="MemoryError")
                rows.append(row)
                if row["status"] == "ok":
                    logger.info(f"📊 bench n={n} {spec.name}: {row['median_step_s']:.4g} s/step")
    table = pd.DataFrame(rows)
    if "median_step_s" not in table:
        table["median_step_s"] = np.nan
    table["loglog_slope"] = np.nan
    ok = table[table["status"] == "ok"].assign(group_members=lambda t: t["members"].fillna(0))
    for _key, group in ok.groupby(["observer", "group_members"]):
        if group["n"].nunique() >= 2:
            slope = np.polyfit(np.log(group["n"]), np.log(group["median_step_s"]), 1)[0]
            table.loc[group.index, "loglog_slope"] = slope
    return table


def run_benchmark(cfg: ExperimentConfig, out_dir: str | Path | None = None, threads: int | None = None) -> pd.DataFrame:
    out_dir = Path(out_dir if out_dir is not None else cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    threads = resolve_thread_count() if threads is None else threads
    table = scaling_benchmark(
        list(cfg.bench.sizes),
        list(cfg.bench.observers),
        steps=cfg.bench.steps,
        ensemble_sizes=list(cfg.bench.ensemble_sizes),
        seed=cfg.seed,
        threads=threads,
    )
    table["digest"] = config_digest(cfg)
    path = out_dir / "bench.csv"
    table.to_csv(path, index=False)
    logger.info(f"✅ Benchmark table written to {path}")
    return table
