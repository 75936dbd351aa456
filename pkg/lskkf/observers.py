"""
Online state estimators
LSK-KF, ensemble Kalman filter, reduced-order Kalman filter and a diagonal-gain
Luenberger observer behind one predict/update interface: ``step`` and
``current_estimate`` dispatch on the state type.

Every observer applies its correction with the dissipative orientation
x̂ = x̄ + K(y − Cx̄).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import singledispatch

from .errors import ConfigError, NotSPDError, NumericError, ShapeError
from .linop import IdentityOperator, LinearOperator, combine, make_masked_kernel
from .model import ReducedModel, SystemModel, make_rng, project_rom
from .solver import CG_MAX_ITER, CG_TOL, CgReport, cg_solve, lsk_normal_operator, lsk_rhs_map, woodbury_apply

import numpy as np
import scipy.linalg as sla

logger = logging.getLogger(__name__)

ENKF_MODES = ("stochastic", "literal")
ROM_REGULARIZATION = 1e-12
LUENBERGER_SAMPLES = 500


# States =======================================================================
@dataclass
class LskkfState:
    x_hat: np.ndarray
    L: LinearOperator
    normal_op: LinearOperator = field(repr=False)
    rhs_map: LinearOperator = field(repr=False)
    cg_tol: float = CG_TOL
    cg_max_iter: int = CG_MAX_ITER
    warm_start: bool = False
    last_f: np.ndarray | None = field(default=None, repr=False)
    last_report: CgReport | None = None


@dataclass
class EnkfState:
    ensemble: np.ndarray = field(repr=False)
    rng: np.random.Generator = field(repr=False)
    mode: str = "stochastic"
    threads: int = 1
    collapsed: bool = False

    @property
    def size(self) -> int:
        return self.ensemble.shape[1]


@dataclass
class RomkfState:
    z_hat: np.ndarray
    P: np.ndarray = field(repr=False)
    rom: ReducedModel = field(repr=False)
    V: np.ndarray = field(repr=False)
    r_diag: np.ndarray = field(repr=False)
    regularized: bool = False


@dataclass
class LuenbergerState:
    x_hat: np.ndarray
    gain: np.ndarray = field(repr=False)


ObserverState = LskkfState | EnkfState | RomkfState | LuenbergerState


def _check_finite(values: np.ndarray, observer: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"{observer} estimate became non-finite")


def _check_measurement(model: SystemModel, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (model.n_y,):
        raise ShapeError(f"measurement of shape {y.shape} does not match n_y={model.n_y}")
    return y


def _predict(model: SystemModel, x: np.ndarray, u_prev: np.ndarray) -> np.ndarray:
    return model.A.apply(x) + model.B @ np.asarray(u_prev, dtype=np.float64)


# LSK-KF =======================================================================
def kernel_factor(model: SystemModel, kind: str, gamma: float, sigma: float | None = None) -> LinearOperator:
    """Prior factor L: ``masked_gaussian`` (γ, σ) on the material masks, or ``identity`` scaled by γ."""
    if kind == "masked_gaussian":
        if sigma is None:
            raise ConfigError("observers.lskkf.sigma", "a positive length for the masked Gaussian kernel")
        return make_masked_kernel(model.masks, gamma, sigma)
    if kind == "identity":
        return combine("scale", [IdentityOperator(model.n_x)], gamma)
    raise ConfigError("observers.lskkf.kernel", "'masked_gaussian' or 'identity'", kind)


def init_lskkf(
    model: SystemModel,
    L: LinearOperator,
    x0: np.ndarray | None = None,
    cg_tol: float = CG_TOL,
    cg_max_iter: int = CG_MAX_ITER,
    warm_start: bool = False,
) -> LskkfState:
    """Cache the normal operator and right-hand-side map for a fixed factor L."""
    if L.rows != model.n_x:
        raise ShapeError(f"prior factor has {L.rows} rows for n_x={model.n_x}")
    r_inv = model.r_inv_diag
    x0 = np.zeros(model.n_x) if x0 is None else np.array(x0, dtype=np.float64)
    return LskkfState(
        x_hat=x0,
        L=L,
        normal_op=lsk_normal_operator(L, model.C, r_inv),
        rhs_map=lsk_rhs_map(L, model.C, r_inv),
        cg_tol=cg_tol,
        cg_max_iter=cg_max_iter,
        warm_start=warm_start,
    )


def lskkf_step(st: LskkfState, model: SystemModel, u_prev: np.ndarray, y: np.ndarray) -> LskkfState:
    """
    One LSK-KF predict/update.

    Solves (I + LᵀCᵀR⁻¹CL) f = LᵀCᵀR⁻¹(y − Cx̄) by CG and sets x̂ = x̄ + L f.
    A CG run that misses its tolerance still applies its best iterate.
    """
    y = _check_measurement(model, y)
    x_bar = _predict(model, st.x_hat, u_prev)
    rhs = st.rhs_map.apply(y - model.C.apply(x_bar))
    x0 = st.last_f if st.warm_start else None
    f, report = cg_solve(st.normal_op, rhs, tol=st.cg_tol, max_iter=st.cg_max_iter, x0=x0)
    x_hat = x_bar + st.L.apply(f)
    _check_finite(x_hat, "LSK-KF")
    logger.debug(f"LSK-KF CG: {report.iterations} iterations, residual {report.final_relative_residual:.2e}")
    return replace(st, x_hat=x_hat, last_f=f, last_report=report)


# EnKF =========================================================================
def init_enkf(
    model: SystemModel,
    n_members: int,
    seed: int,
    x0: np.ndarray | None = None,
    mode: str = "stochastic",
    threads: int = 1,
) -> EnkfState:
    """Initial members x̂₀ + L_Q v^⟨j⟩ with v^⟨j⟩ ∼ N(0, I)."""
    if n_members < 2:
        raise ConfigError("observers.enkf.members", ">= 2", n_members)
    if mode not in ENKF_MODES:
        raise ConfigError("observers.enkf.mode", f"one of {ENKF_MODES}", mode)
    rng = make_rng(seed)
    x0 = np.zeros(model.n_x) if x0 is None else np.asarray(x0, dtype=np.float64)
    ensemble = x0[:, None] + model.L_Q.apply(rng.standard_normal((model.n_x, n_members)))
    return EnkfState(ensemble=ensemble, rng=rng, mode=mode, threads=max(1, int(threads)))


def _propagate_members(
    model: SystemModel, ensemble: np.ndarray, forcing: np.ndarray, noise: np.ndarray, threads: int
) -> np.ndarray:
    """A X + B u + L_Q V, split column-wise over worker threads."""

    def chunk(cols: slice) -> np.ndarray:
        return model.A.apply(ensemble[:, cols]) + forcing[:, None] + model.L_Q.apply(noise[:, cols])

    n_members = ensemble.shape[1]
    if threads <= 1 or n_members < 2 * threads:
        return chunk(slice(None))
    bounds = np.linspace(0, n_members, threads + 1).astype(int)
    slices = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:], strict=True) if b > a]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(chunk, slices))
    return np.concatenate(parts, axis=1)


def enkf_step(st: EnkfState, model: SystemModel, u_prev: np.ndarray, y: np.ndarray) -> EnkfState:
    """
    One ensemble Kalman filter predict/update.

    ``stochastic`` mode perturbs the measurement per member (y + η^⟨j⟩ − C x^⟨j⟩);
    ``literal`` mode uses the replicated measurement minus the output anomalies.
    """
    y = _check_measurement(model, y)
    n_members = st.size
    # draw all randomness here so the result does not depend on the thread count
    process = st.rng.standard_normal((model.n_x, n_members))
    perturbation = np.sqrt(model.r_diag)[:, None] * st.rng.standard_normal((model.n_y, n_members))

    forcing = model.B @ np.asarray(u_prev, dtype=np.float64)
    members = _propagate_members(model, st.ensemble, forcing, process, st.threads)

    mean = members.mean(axis=1, keepdims=True)
    X_bar = (members - mean) / np.sqrt(n_members - 1)
    if not np.any(X_bar):
        logger.warning("⚠️ EnKF ensemble collapsed: all members identical, update skipped")
        return replace(st, ensemble=members, collapsed=True)
    Y_bar = model.C.apply(X_bar)

    if st.mode == "stochastic":
        innovation = y[:, None] + perturbation - model.C.apply(members)
    else:
        innovation = y[:, None] - Y_bar
    weights = woodbury_apply(model.r_diag ** -1, Y_bar, innovation)
    members = members + X_bar @ (Y_bar.T @ weights)
    _check_finite(members, "EnKF")
    return replace(st, ensemble=members, collapsed=False)


# ROM-KF =======================================================================
def init_romkf(
    model: SystemModel,
    V: np.ndarray,
    x0: np.ndarray | None = None,
    p0_scale: float = 1.0,
) -> RomkfState:
    """Project the model onto V; P₀ = p0_scale · Q_r."""
    rom = project_rom(model, V)
    z0 = np.zeros(V.shape[1]) if x0 is None else V.T @ np.asarray(x0, dtype=np.float64)
    return RomkfState(z_hat=z0, P=p0_scale * rom.Q_r, rom=rom, V=np.asarray(V), r_diag=model.r_diag.copy())


def _inverse_spd(M: np.ndarray) -> tuple[np.ndarray, bool]:
    """Inverse of an SPD matrix; falls back once to M + 1e-12·I."""
    eye = np.eye(M.shape[0])
    try:
        return sla.cho_solve(sla.cho_factor(M, lower=True), eye), False
    except np.linalg.LinAlgError:
        pass
    try:
        return sla.cho_solve(sla.cho_factor(M + ROM_REGULARIZATION * eye, lower=True), eye), True
    except np.linalg.LinAlgError as e:
        raise NotSPDError(f"reduced prior covariance is not positive definite: {e}") from e


def romkf_step(st: RomkfState, u_prev: np.ndarray, y: np.ndarray) -> RomkfState:
    """Kalman filter on the reduced coordinates, gain in information form."""
    A_r, B_r, C_r, Q_r = st.rom
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (C_r.shape[0],):
        raise ShapeError(f"measurement of shape {y.shape} does not match n_y={C_r.shape[0]}")
    r_inv = 1.0 / st.r_diag
    z_bar = A_r @ st.z_hat + B_r @ np.asarray(u_prev, dtype=np.float64)
    P_bar = A_r @ st.P @ A_r.T + Q_r
    P_bar = 0.5 * (P_bar + P_bar.T)
    P_bar_inv, regularized = _inverse_spd(P_bar)
    if regularized:
        logger.warning(f"⚠️ ROM-KF prior covariance singular, regularized with {ROM_REGULARIZATION:g}·I")
    weighted = C_r.T * r_inv
    information = weighted @ C_r + P_bar_inv
    try:
        K = sla.solve(information, weighted, assume_a="pos")
    except np.linalg.LinAlgError as e:
        raise NotSPDError(f"ROM-KF information matrix is not positive definite: {e}") from e
    z_hat = z_bar + K @ (y - C_r @ z_bar)
    P = (np.eye(P_bar.shape[0]) - K @ C_r) @ P_bar
    P = 0.5 * (P + P.T)
    _check_finite(z_hat, "ROM-KF")
    return replace(st, z_hat=z_hat, P=P, regularized=st.regularized or regularized)


# Luenberger ===================================================================
def design_luenberger_gain(
    r_diag: np.ndarray,
    L_Q: LinearOperator,
    n_samples: int = LUENBERGER_SAMPLES,
    seed: int = 0,
    chunk: int = 50,
) -> np.ndarray:
    """
    Diagonal gain D(i,i) = d / (d + R(i,i)).

    d = trace(WWᵀ)/n_x, the mean squared entry of ``n_samples`` process-noise
    realizations w = L_Q v.
    """
    if n_samples < 2:
        raise ConfigError("observers.luenberger.samples", ">= 2", n_samples)
    rng = make_rng(seed)
    total = 0.0
    drawn = 0
    while drawn < n_samples:
        m = min(chunk, n_samples - drawn)
        W = L_Q.apply(rng.standard_normal((L_Q.cols, m)))
        total += float(np.sum(W**2))
        drawn += m
    d = total / (L_Q.rows * n_samples)
    r_diag = np.asarray(r_diag, dtype=np.float64)
    logger.info(f"📊 Luenberger gain: d={d:.4g} from {n_samples} noise draws")
    return d / (d + r_diag)


def init_luenberger(
    model: SystemModel,
    gain: np.ndarray | None = None,
    x0: np.ndarray | None = None,
    n_samples: int = LUENBERGER_SAMPLES,
    seed: int = 0,
) -> LuenbergerState:
    if gain is None:
        gain = design_luenberger_gain(model.r_diag, model.L_Q, n_samples, seed)
    gain = np.asarray(gain, dtype=np.float64)
    if gain.shape != (model.n_y,):
        raise ShapeError(f"gain of shape {gain.shape} does not match n_y={model.n_y}")
    x0 = np.zeros(model.n_x) if x0 is None else np.array(x0, dtype=np.float64)
    return LuenbergerState(x_hat=x0, gain=gain)


def luenberger_step(st: LuenbergerState, model: SystemModel, u_prev: np.ndarray, y: np.ndarray) -> LuenbergerState:
    """x̂ = x̄ − Cᵀ(D(Cx̄ − y)); unmeasured states only see the prediction."""
    y = _check_measurement(model, y)
    x_bar = _predict(model, st.x_hat, u_prev)
    x_hat = x_bar - model.C.apply_adjoint(st.gain * (model.C.apply(x_bar) - y))
    _check_finite(x_hat, "Luenberger")
    return replace(st, x_hat=x_hat)


# Common interface =============================================================
@singledispatch
def current_estimate(st: object) -> np.ndarray:
    raise TypeError(f"not an observer state: {type(st).__name__}")


@current_estimate.register
def _(st: LskkfState) -> np.ndarray:
    return st.x_hat


@current_estimate.register
def _(st: LuenbergerState) -> np.ndarray:
    return st.x_hat


@current_estimate.register
def _(st: EnkfState) -> np.ndarray:
    return st.ensemble.mean(axis=1)


@current_estimate.register
def _(st: RomkfState) -> np.ndarray:
    return st.V @ st.z_hat


@singledispatch
def step(st: object, model: SystemModel, u_prev: np.ndarray, y: np.ndarray) -> ObserverState:
    """Advance any observer state by one predict/update."""
    raise TypeError(f"not an observer state: {type(st).__name__}")


@step.register
def _(st: LskkfState, model: SystemModel, u_prev: np.ndarray, y: np.ndarray) -> LskkfState:
    return lskkf_step(st, model, u_prev, y)


@step.register
def _(st: EnkfState, model: SystemModel, u_prev: np.ndarray, y: np.ndarray) -> EnkfState:
    return enkf_step(st, model, u_prev, y)


@step.register
def _(st: RomkfState, model: SystemModel, u_prev: np.ndarray, y: np.ndarray) -> RomkfState:
    return romkf_step(st, u_prev, y)


@step.register
def _(st: LuenbergerState, model: SystemModel, u_prev: np.ndarray, y: np.ndarray) -> LuenbergerState:
    return luenberger_step(st, model, u_prev, y)
