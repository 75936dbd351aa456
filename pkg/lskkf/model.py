"""
Heat-equation system model
Finite-volume / implicit-Euler discretization of

    ρc ∂T/∂t = ∇·(k∇T) + Σ_i b_i u_i   on Ω,      k∇T·n = −hT   on ∂Ω

into the discrete-time LTI form x_{k+1} = A x_k + B u_k + w_k, y_k = C x_k + η_k,
synthetic truth generation, and the snapshot-POD reduced-order projection.

Temperatures are relative to ambient. The implicit step (M + dt·K)⁻¹M is held as a
sparse LU factorization plus a diagonal, never as a dense matrix.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

from .errors import ConfigError, MaskError, NumericError, ShapeError
from .fields import Grid, MaskSet, ScalarField, write_sf1
from .linop import (
    ComposeOperator,
    DiagonalOperator,
    FactorizedSolveOperator,
    LinearOperator,
    SparseOperator,
    combine,
    gaussian_kernel,
    make_masked_kernel,
)

import numpy as np
import pandas as pd
import scipy.linalg as sla
import scipy.sparse as sparse

logger = logging.getLogger(__name__)

SAMPLE_TIME = 93.0
SLAB_THICKNESS = 0.25
STABILITY_CHECK_MAX = 4096
N_INPUTS = 2


@dataclass(frozen=True)
class Material:
    name: str
    rho: float
    c: float
    k: float

    def __post_init__(self) -> None:
        if not self.rho > 0 or not self.c > 0:
            raise ConfigError(f"materials.{self.name}", "rho > 0 and c > 0", (self.rho, self.c))
        if self.k < 0:
            raise ConfigError(f"materials.{self.name}.k", ">= 0", self.k)


SOFT_TISSUE = Material("soft_tissue", rho=1050.0, c=3600.0, k=0.55)
SHELL = Material("shell", rho=1300.0, c=1300.0, k=0.35)


@dataclass(frozen=True)
class MaterialConfig:
    """
    Physical description of the domain.

    ``labels`` assigns a material index to every cell; ``loads`` holds one heat-load
    column b_i (W/m³ per unit input) per input. Cells of ``measured_material``
    are the measurable ones.
    """

    grid: Grid
    materials: tuple[Material, ...]
    labels: np.ndarray = field(repr=False)
    loads: np.ndarray = field(repr=False)
    h: float = 10.0
    measured_material: int = 0
    slab_thickness: float = SLAB_THICKNESS
    foci: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if labels.size != self.grid.size:
            raise ShapeError(f"labels have {labels.size} entries for a grid of {self.grid.size} cells")
        loads = np.asarray(self.loads, dtype=np.float64).reshape(self.grid.size, -1)
        if self.h < 0:
            raise ConfigError("materials.h", ">= 0", self.h)
        if not 0 <= self.measured_material < len(self.materials):
            raise ConfigError("layout.measured_material", f"index below {len(self.materials)}", self.measured_material)
        if not self.slab_thickness > 0:
            raise ConfigError("layout.slab_thickness", "> 0", self.slab_thickness)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "loads", loads)

    @property
    def cell_volume(self) -> float:
        return self.grid.cell_volume * self.slab_thickness ** (3 - self.grid.ndim)

    def masks(self) -> MaskSet:
        return MaskSet.from_labels(self.grid, self.labels, len(self.materials))

    def property_field(self, name: str) -> np.ndarray:
        values = np.array([getattr(m, name) for m in self.materials])
        if np.any(self.labels < 0):
            raise MaskError("some cells carry no material label")
        return values[self.labels]


@dataclass(frozen=True)
class NoiseConfig:
    """Process noise: per-cell std (K per step) and correlation length; measurement variance (K²)."""

    process_std: float = 0.2
    process_sigma: float = 0.0075
    measurement_var: float = 0.05
    r_overrides: tuple[tuple[int, float], ...] = ()
    truth_process_scale: float = 0.25

    def __post_init__(self) -> None:
        if self.process_std < 0:
            raise ConfigError("noise.process_std", ">= 0", self.process_std)
        if not self.process_sigma > 0:
            raise ConfigError("noise.process_sigma", "> 0", self.process_sigma)
        if not self.measurement_var > 0:
            raise ConfigError("noise.measurement_var", "> 0", self.measurement_var)
        if self.truth_process_scale < 0:
            raise ConfigError("noise.truth_process_scale", ">= 0", self.truth_process_scale)
        for index, var in self.r_overrides:
            if not var > 0:
                raise ConfigError(f"noise.r_overrides.{index}", "> 0", var)


@dataclass(frozen=True)
class SystemModel:
    A: LinearOperator
    B: np.ndarray = field(repr=False)
    C: LinearOperator
    L_Q: LinearOperator
    r_diag: np.ndarray = field(repr=False)
    grid: Grid
    masks: MaskSet = field(repr=False)
    dt: float
    measurement_indices: np.ndarray = field(repr=False)
    mass: np.ndarray = field(repr=False)
    stiffness: sparse.csr_matrix = field(repr=False)
    truth_process_scale: float = 1.0
    material: MaterialConfig | None = field(default=None, repr=False)

    @property
    def n_x(self) -> int:
        return self.A.rows

    @property
    def n_y(self) -> int:
        return self.C.rows

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def r_inv_diag(self) -> np.ndarray:
        return 1.0 / self.r_diag

    def energy(self, x: np.ndarray) -> float:
        """Σ ρ c V x over all cells."""
        return float(self.mass @ x)


class Trajectory(NamedTuple):
    states: np.ndarray  # (K+1, n_x)
    inputs: np.ndarray  # (K, n_u)
    outputs: np.ndarray  # (K, n_y): y_1..y_K
    seed: int


class ReducedModel(NamedTuple):
    A_r: np.ndarray
    B_r: np.ndarray
    C_r: np.ndarray
    Q_r: np.ndarray


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox generator; every stochastic path goes through here."""
    return np.random.Generator(np.random.Philox(seed))


def spawn_rngs(seed: int, count: int) -> list[np.random.Generator]:
    return [np.random.Generator(np.random.Philox(s)) for s in np.random.SeedSequence(seed).spawn(count)]


# Discretization ===============================================================
def conductance_matrix(cfg: MaterialConfig) -> sparse.csr_matrix:
    """
    Symmetric positive semidefinite conductance matrix K (W/K).

    Interior faces use the harmonic mean of the two cell conductivities; boundary
    faces carry the series resistance of half a cell and the film 1/h.
    """
    grid = cfg.grid
    n = grid.size
    k_cell = cfg.property_field("k").reshape(grid.shape)
    idx = np.arange(n).reshape(grid.shape)
    volume = cfg.cell_volume
    rows, cols, vals = [], [], []
    diag = np.zeros(n)
    for d, dx in enumerate(grid.spacing):
        area = volume / dx
        if grid.shape[d] > 1:
            lo = [slice(None)] * grid.ndim
            hi = [slice(None)] * grid.ndim
            lo[d], hi[d] = slice(0, -1), slice(1, None)
            k_lo, k_hi = k_cell[tuple(lo)].ravel(), k_cell[tuple(hi)].ravel()
            i, j = idx[tuple(lo)].ravel(), idx[tuple(hi)].ravel()
            k_sum = k_lo + k_hi
            g = np.divide(2.0 * area * k_lo * k_hi, k_sum * dx, out=np.zeros_like(k_sum), where=k_sum > 0)
            rows += [i, j]
            cols += [j, i]
            vals += [-g, -g]
            np.add.at(diag, i, g)
            np.add.at(diag, j, g)
        if cfg.h > 0:
            for end in (0, grid.shape[d] - 1):
                cells = np.take(idx, end, axis=d).ravel()
                k_b = k_cell.ravel()[cells]
                g_b = np.zeros_like(k_b)
                conducting = k_b > 0
                g_b[conducting] = area / (dx / (2.0 * k_b[conducting]) + 1.0 / cfg.h)
                np.add.at(diag, cells, g_b)
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    return sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()


def noise_normalization(grid: Grid, sigma: float) -> float:
    """Per-cell standard deviation of the unit-γ kernel applied to white noise (away from masks' edges)."""
    return float(np.sqrt(np.sum(gaussian_kernel(grid, 1.0, sigma) ** 2)))


def process_noise_factor(masks: MaskSet, noise: NoiseConfig) -> LinearOperator:
    """L_Q: masked Gaussian kernel scaled so that interior cells see ``process_std`` K per step."""
    grid = masks.grid
    kernel = make_masked_kernel(masks, 1.0, noise.process_sigma)
    return combine("scale", [kernel], noise.process_std / noise_normalization(grid, noise.process_sigma))


def measurement_operator(indices: np.ndarray, n_x: int) -> SparseOperator:
    indices = np.asarray(indices, dtype=np.int64)
    return SparseOperator.from_triplets(indices.size, n_x, np.arange(indices.size), indices, np.ones(indices.size))


def spectral_radius(op: LinearOperator, iterations: int = 200, seed: int = 0) -> float:
    """Power-iteration estimate of the largest |eigenvalue|."""
    v = make_rng(seed).standard_normal(op.cols)
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(iterations):
        w = op.apply(v)
        estimate = float(np.linalg.norm(w))
        if estimate == 0.0:
            return 0.0
        v = w / estimate
    return estimate


def assemble_system(
    cfg: MaterialConfig,
    measurement_mask: np.ndarray | None = None,
    noise: NoiseConfig | None = None,
    dt: float = SAMPLE_TIME,
) -> SystemModel:
    """
    Discretize the heat equation into an LTI system.

    Args:
        cfg: materials, labels, loads and boundary coefficient.
        measurement_mask: boolean per cell; defaults to the cells of ``cfg.measured_material``.
        noise: process/measurement noise settings.
        dt: sample time in seconds.

    Returns:
        The assembled :class:`SystemModel`.
    """
    noise = noise or NoiseConfig()
    if not dt > 0:
        raise ConfigError("model.dt", "> 0", dt)
    grid = cfg.grid
    masks = cfg.masks()
    if not masks.covers():
        raise MaskError("material masks do not cover every cell")

    volume = cfg.cell_volume
    mass = cfg.property_field("rho") * cfg.property_field("c") * volume
    stiffness = conductance_matrix(cfg)
    system = (sparse.diags(mass) + dt * stiffness).tocsc()
    solve = FactorizedSolveOperator(system)
    A = ComposeOperator([solve, DiagonalOperator(mass)])
    B = solve.apply(dt * volume * cfg.loads)

    if measurement_mask is None:
        measurement_mask = cfg.labels == cfg.measured_material
    measurement_mask = np.asarray(measurement_mask, dtype=bool).ravel()
    if measurement_mask.size != grid.size:
        raise ShapeError(f"measurement mask has {measurement_mask.size} entries for {grid.size} cells")
    indices = np.flatnonzero(measurement_mask)
    if indices.size == 0:
        raise MaskError("measurement mask selects no cells")
    C = measurement_operator(indices, grid.size)

    r_diag = np.full(indices.size, noise.measurement_var)
    position = {int(i): p for p, i in enumerate(indices)}
    for index, var in noise.r_overrides:
        if int(index) not in position:
            raise ConfigError(f"noise.r_overrides.{index}", "a measured flat index", index)
        r_diag[position[int(index)]] = var

    L_Q = process_noise_factor(masks, noise)

    if grid.size <= STABILITY_CHECK_MAX:
        radius = spectral_radius(A)
        if radius > 1.0 + 1e-8:
            raise NumericError(f"implicit step is unstable: spectral radius {radius:.6f}")
        logger.debug(f"spectral radius of A: {radius:.6f}")

    logger.info(
        f"✅ Assembled heat model: grid {grid.shape}, n_x={grid.size}, n_y={indices.size}, "
        f"n_u={B.shape[1]}, dt={dt:g}s, nnz(K)={stiffness.nnz}"
    )
    return SystemModel(
        A=A,
        B=B,
        C=C,
        L_Q=L_Q,
        r_diag=r_diag,
        grid=grid,
        masks=masks,
        dt=float(dt),
        measurement_indices=indices,
        mass=mass,
        stiffness=stiffness,
        truth_process_scale=noise.truth_process_scale,
        material=cfg,
    )


def linear_system(
    A: np.ndarray,
    B: np.ndarray,
    C: np.ndarray,
    L_Q: np.ndarray,
    r_diag: np.ndarray,
    dt: float = 1.0,
) -> SystemModel:
    """Wrap small dense matrices as a SystemModel on a 1-D single-material grid."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    n_x = A.shape[0]
    grid = Grid((n_x,), (1.0,))
    C_op = SparseOperator(np.atleast_2d(C))
    r_diag = np.asarray(r_diag, dtype=np.float64).ravel()
    if C_op.cols != n_x or r_diag.size != C_op.rows:
        raise ShapeError(f"C is {C_op.shape} and R has {r_diag.size} entries for n_x={n_x}")
    return SystemModel(
        A=SparseOperator(A),
        B=np.asarray(B, dtype=np.float64).reshape(n_x, -1),
        C=C_op,
        L_Q=SparseOperator(np.atleast_2d(L_Q)),
        r_diag=r_diag,
        grid=grid,
        masks=MaskSet(grid, (np.ones(n_x),)),
        dt=float(dt),
        measurement_indices=np.arange(C_op.rows),
        mass=np.ones(n_x),
        stiffness=sparse.csr_matrix((n_x, n_x)),
        truth_process_scale=1.0,
    )


# Synthetic phantom ============================================================
def _normalized_coordinates(grid: Grid) -> np.ndarray:
    """Cell centers mapped to [-1, 1] per axis, shape (size, ndim)."""
    coords = grid.coordinates()
    extent = np.array([(n - 1) * dx for n, dx in zip(grid.shape, grid.spacing, strict=True)])
    half = np.where(extent > 0, extent / 2.0, 1.0)
    return (coords - extent / 2.0) / half


def default_foci(ndim: int) -> list[tuple[float, ...]]:
    """Heat-load centers left and right of the middle, in normalized coordinates."""
    offset = 0.35
    if ndim == 1:
        return [(-offset,), (offset,)]
    return [(0.0, -offset), (0.0, offset)]


def gaussian_loads(
    grid: Grid,
    support: np.ndarray,
    centers: list[tuple[float, ...]],
    width: float,
    power: float,
    slab_thickness: float = SLAB_THICKNESS,
) -> tuple[np.ndarray, list[int]]:
    """
    One Gaussian heat-load column per center, restricted to ``support``.

    Centers are normalized coordinates in [-1, 1] (missing trailing axes are 0);
    each column integrates to ``power`` W. Also returns the support cell closest
    to each center.
    """
    support = np.asarray(support, dtype=bool).ravel()
    u = _normalized_coordinates(grid)
    volume = grid.cell_volume * slab_thickness ** (3 - grid.ndim)
    loads = np.zeros((grid.size, len(centers)))
    foci = []
    for col, centre in enumerate(centers):
        c = np.zeros(grid.ndim)
        c[: len(centre)] = centre[: grid.ndim]
        r2 = np.sum((u - c) ** 2, axis=1)
        blob = np.exp(-r2 / width**2) * support
        total = blob.sum() * volume
        if total > 0:
            loads[:, col] = blob * (power / total)
        foci.append(int(np.argmin(np.where(support, r2, np.inf))))
    return loads, foci


def phantom_config(
    shape: tuple[int, ...] = (128, 128),
    spacing: tuple[float, ...] | None = None,
    h: float = 10.0,
    load_power: float = 200.0,
    load_width: float = 0.3,
    slab_thickness: float = SLAB_THICKNESS,
    soft_tissue: Material = SOFT_TISSUE,
    shell: Material = SHELL,
) -> MaterialConfig:
    """
    Synthetic two-material phantom.

    Material 0 (soft tissue) fills an ellipse of radius 0.8 of the half-extent in
    the first two axes, minus two round inclusions above and below center;
    material 1 (shell) is everything else. Two Gaussian heat loads of width
    ``load_width`` (in half-extents) sit left and right of center inside the soft
    tissue, each scaled to inject ``load_power`` W per unit input.
    """
    spacing = spacing or tuple(0.0025 for _ in shape)
    grid = Grid(tuple(shape), tuple(spacing))
    u = _normalized_coordinates(grid)
    plane = u[:, :2]
    inside = np.sum(plane**2, axis=1) < 0.8**2
    if grid.ndim >= 2:
        for centre in ((0.45, 0.0), (-0.45, 0.0)):
            inside &= np.sum((plane - np.array(centre)) ** 2, axis=1) >= 0.12**2
    if not np.any(inside):
        raise MaskError(f"phantom on grid {grid.shape} has no soft-tissue cells")
    labels = np.where(inside, 0, 1)

    loads, focus_indices = gaussian_loads(grid, inside, default_foci(grid.ndim), load_width, load_power, slab_thickness)

    logger.debug(f"phantom {grid.shape}: {int(inside.sum())} soft-tissue cells, foci {focus_indices}")
    return MaterialConfig(
        grid=grid,
        materials=(soft_tissue, shell),
        labels=labels,
        loads=loads,
        h=h,
        measured_material=0,
        slab_thickness=slab_thickness,
        foci=tuple(focus_indices),
    )


# Inputs and truth =============================================================
def input_sequence(k: int) -> tuple[float, float]:
    """Heating schedule: input 1 on for 2 ≤ k ≤ 7, input 2 on for 8 ≤ k ≤ 15."""
    if k < 0:
        raise ValueError(f"step index must be non-negative, got {k}")
    return (1.0 if 2 <= k <= 7 else 0.0, 1.0 if 8 <= k <= 15 else 0.0)


def input_matrix(steps: int) -> np.ndarray:
    return np.array([input_sequence(k) for k in range(steps)], dtype=np.float64).reshape(steps, N_INPUTS)


def simulate_truth(
    model: SystemModel,
    inputs: np.ndarray,
    steps: int,
    seed: int,
    x0: np.ndarray | None = None,
    *,
    process_noise: bool = True,
    measurement_noise: bool = True,
) -> Trajectory:
    """
    Generate x_0..x_K and y_1..y_K.

    Process noise is ``truth_process_scale · L_Q v_k`` with v_k ∼ N(0, I);
    measurement noise is η_k ∼ N(0, diag(r_diag)). Independent Philox streams are
    spawned from ``seed`` for the two noise sources.
    """
    inputs = np.asarray(inputs, dtype=np.float64).reshape(-1, model.n_u)
    if inputs.shape[0] < steps:
        raise ShapeError(f"{inputs.shape[0]} inputs supplied for {steps} steps")
    process_rng, measurement_rng = spawn_rngs(seed, 2)
    r_std = np.sqrt(model.r_diag)
    states = np.zeros((steps + 1, model.n_x))
    outputs = np.zeros((steps, model.n_y))
    if x0 is not None:
        states[0] = np.asarray(x0, dtype=np.float64)
    scale = model.truth_process_scale
    for k in range(steps):
        x = model.A.apply(states[k]) + model.B @ inputs[k]
        if process_noise and scale > 0:
            x += scale * model.L_Q.apply(process_rng.standard_normal(model.n_x))
        states[k + 1] = x
        y = model.C.apply(x)
        if measurement_noise:
            y += r_std * measurement_rng.standard_normal(model.n_y)
        outputs[k] = y
    if not np.all(np.isfinite(states)):
        raise NumericError("truth trajectory contains NaN or Inf")
    return Trajectory(states=states, inputs=inputs[:steps].copy(), outputs=outputs, seed=int(seed))


def export_trajectory(traj: Trajectory, grid: Grid, out_dir: str | Path, digest: str | None = None) -> Path:
    """Write every state as ``state_XXXX.sf1`` plus a ``manifest.csv`` listing them."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for k, state in enumerate(traj.states):
        name = f"state_{k:04d}.sf1"
        write_sf1(ScalarField(grid, state), out_dir / name)
        u = traj.inputs[k] if k < len(traj.inputs) else np.full(traj.inputs.shape[1], np.nan)
        rows.append({"k": k, "file": name, **{f"u{i + 1}": float(v) for i, v in enumerate(u)}})
    manifest = pd.DataFrame(rows)
    manifest["seed"] = traj.seed
    manifest["digest"] = digest or ""
    path = out_dir / "manifest.csv"
    manifest.to_csv(path, index=False)
    logger.info(f"✅ Exported {len(traj.states)} states to {out_dir}")
    return path


# Reduced-order model ==========================================================
def pod_snapshots(model: SystemModel, steps: int = 20) -> np.ndarray:
    """Impulse and step responses of every input from a zero state, as columns."""
    n_u = model.n_u
    impulse = model.B.copy()
    step = model.B.copy()
    columns = [impulse, step]
    for _ in range(steps - 1):
        impulse = model.A.apply(impulse)
        step = model.A.apply(step) + model.B
        columns += [impulse, step]
    snapshots = np.concatenate(columns, axis=1)
    logger.debug(f"collected {snapshots.shape[1]} POD snapshots ({n_u} inputs, {steps} steps)")
    return snapshots


def pod_reduce(snapshots: np.ndarray, energy_fraction: float = 0.999) -> np.ndarray:
    """
    Orthonormal POD basis capturing ``energy_fraction`` of the snapshot energy.

    Returns:
        V of shape (n_x, n_r), with n_r the smallest r such that Σ_{i≤r} σ_i² reaches
        ``energy_fraction`` of the total. Numerically zero singular values are dropped.
    """
    snapshots = np.asarray(snapshots, dtype=np.float64)
    if snapshots.ndim != 2 or snapshots.shape[1] < 2:
        raise ShapeError(f"POD needs at least two snapshot columns, got shape {snapshots.shape}")
    if not 0 < energy_fraction <= 1:
        raise ConfigError("observers.romkf.energy_fraction", "in (0, 1]", energy_fraction)
    U, s, _ = sla.svd(snapshots, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        raise ShapeError("snapshots carry no energy")
    keep = s > s[0] * max(snapshots.shape) * np.finfo(np.float64).eps
    U, s = U[:, keep], s[keep]
    energy = np.cumsum(s**2)
    n_r = int(np.searchsorted(energy, energy_fraction * energy[-1] * (1.0 - 1e-12))) + 1
    n_r = min(n_r, s.size)
    logger.info(f"📊 POD basis: n_r={n_r} of {s.size} nonzero modes ({energy[n_r - 1] / energy[-1]:.6f} energy)")
    return U[:, :n_r]


def project_rom(model: SystemModel, V: np.ndarray) -> ReducedModel:
    """
    Galerkin projection onto span(V).

    Q_r = (L_Qᵀ V)ᵀ(L_Qᵀ V) = Vᵀ Q V; for the symmetric masked kernel this is the
    same as (L_Q V)ᵀ(L_Q V).
    """
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] != model.n_x:
        raise ShapeError(f"projection basis of shape {V.shape} does not match n_x={model.n_x}")
    A_r = V.T @ model.A.apply(V)
    B_r = V.T @ model.B
    C_r = model.C.apply(V)
    LV = model.L_Q.apply_adjoint(V)
    Q_r = LV.T @ LV
    return ReducedModel(A_r=A_r, B_r=B_r, C_r=C_r, Q_r=0.5 * (Q_r + Q_r.T))


def total_input_power(cfg: MaterialConfig) -> np.ndarray:
    """Σ b_i V per input, in W."""
    return cfg.loads.sum(axis=0) * cfg.cell_volume


def describe(model: SystemModel) -> dict:
    return {
        "n_x": model.n_x,
        "n_y": model.n_y,
        "n_u": model.n_u,
        "dt": model.dt,
        "grid": list(model.grid.shape),
        "spacing": list(model.grid.spacing),
        "cells_per_material": [int(m.sum()) for m in model.masks.masks],
        "max_conductance": float(model.stiffness.diagonal().max()) if model.n_x else math.nan,
    }
