"""
Linear solvers
Conjugate gradient for the kernel-regularized normal equations, the Woodbury-form
inverse used by the ensemble update, and a Cholesky solve for small dense systems.
"""

import logging
from dataclasses import dataclass

from .errors import NotSPDError, NumericError, ShapeError
from .linop import ComposeOperator, DiagonalOperator, IdentityOperator, LinearOperator, combine

import numpy as np
import scipy.linalg as sla

logger = logging.getLogger(__name__)

CG_TOL = 1e-8
CG_MAX_ITER = 500
DENSE_CAP = 2000
# recompute the residual from scratch every this many iterations
RESIDUAL_REFRESH = 50


@dataclass(frozen=True)
class CgReport:
    iterations: int
    final_relative_residual: float
    converged: bool


def cg_solve(
    op: LinearOperator,
    rhs: np.ndarray,
    tol: float = CG_TOL,
    max_iter: int = CG_MAX_ITER,
    x0: np.ndarray | None = None,
) -> tuple[np.ndarray, CgReport]:
    """
    Solve ``op·f = rhs`` for a symmetric positive definite operator.

    Args:
        op: SPD operator (symmetry is the caller's responsibility).
        rhs: right-hand side of length ``op.rows``.
        tol: relative residual ‖op·f − rhs‖ / ‖rhs‖ to reach.
        max_iter: iteration budget.
        x0: optional warm start; the zero vector otherwise.

    Returns:
        The best iterate and a :class:`CgReport`. Running out of iterations is not
        an error; ``converged`` is False and the caller decides what to do.
    """
    if op.rows != op.cols:
        raise ShapeError(f"cg_solve needs a square operator, got {op.kind} {op.shape}")
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape != (op.rows,):
        raise ShapeError(f"rhs of shape {rhs.shape} does not match operator {op.shape}")

    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        return np.zeros_like(rhs), CgReport(0, 0.0, True)

    if x0 is None:
        x = np.zeros_like(rhs)
        r = rhs.copy()
    else:
        x = np.array(x0, dtype=np.float64)
        r = rhs - op.apply(x)
    p = r.copy()
    rr = float(r @ r)
    rel = np.sqrt(rr) / rhs_norm
    it = 0
    while rel > tol and it < max_iter:
        q = op.apply(p)
        pq = float(p @ q)
        if not np.isfinite(pq) or pq <= 0.0:
            if not np.isfinite(pq):
                raise NumericError(f"non-finite curvature in CG at iteration {it}")
            logger.warning(f"⚠️ CG hit non-positive curvature {pq:.3e} at iteration {it}; operator is not SPD")
            break
        alpha = rr / pq
        x += alpha * p
        it += 1
        if it % RESIDUAL_REFRESH == 0:
            r = rhs - op.apply(x)
        else:
            r -= alpha * q
        rr_new = float(r @ r)
        if not np.isfinite(rr_new):
            raise NumericError(f"non-finite residual in CG at iteration {it}")
        p = r + (rr_new / rr) * p
        rr = rr_new
        rel = np.sqrt(rr) / rhs_norm

    if not np.all(np.isfinite(x)):
        raise NumericError("CG iterate contains NaN or Inf")
    converged = bool(rel <= tol)
    if not converged:
        logger.warning(f"⚠️ CG stopped after {it} iterations at relative residual {rel:.3e} (tol {tol:.1e})")
    return x, CgReport(it, float(rel), converged)


def lsk_rhs_map(L: LinearOperator, C: LinearOperator, r_inv_diag: np.ndarray) -> LinearOperator:
    """z ↦ Lᵀ(Cᵀ(R⁻¹ z)) for a measurement-space vector z."""
    r_inv_diag = np.asarray(r_inv_diag, dtype=np.float64).ravel()
    if C.cols != L.rows:
        raise ShapeError(f"measurement operator has {C.cols} columns but L has {L.rows} rows")
    if r_inv_diag.size != C.rows:
        raise ShapeError(f"R⁻¹ has {r_inv_diag.size} entries for {C.rows} measurements")
    if not np.all(r_inv_diag > 0):
        raise NotSPDError(f"R⁻¹ must have strictly positive diagonal entries, got min {r_inv_diag.min():g}")
    return ComposeOperator([combine("adjoint", [L]), combine("adjoint", [C]), DiagonalOperator(r_inv_diag)])


def lsk_normal_operator(L: LinearOperator, C: LinearOperator, r_inv_diag: np.ndarray) -> LinearOperator:
    """
    The SPD operator v ↦ v + Lᵀ(Cᵀ(R⁻¹(C(L v)))).

    The identity term bounds the spectrum below by one; the coordinate change
    ``d = L f`` serves as the preconditioner, so CG runs plain on this.
    """
    rhs_map = lsk_rhs_map(L, C, r_inv_diag)
    data_term = ComposeOperator([rhs_map, C, L])
    return combine("sum", [IdentityOperator(L.cols), data_term])


def woodbury_apply(r_inv_diag: np.ndarray, Ybar: np.ndarray, residuals: np.ndarray) -> np.ndarray:
    """
    (R + ȲȲᵀ)⁻¹·residuals = R⁻¹(I − Ȳ(I + ȲᵀR⁻¹Ȳ)⁻¹ȲᵀR⁻¹)·residuals.

    Only the N×N core is factorized, so the cost is O(n_y·N² + N³).
    """
    r_inv = np.asarray(r_inv_diag, dtype=np.float64).ravel()
    Ybar = np.atleast_2d(np.asarray(Ybar, dtype=np.float64))
    residuals = np.asarray(residuals, dtype=np.float64)
    vector = residuals.ndim == 1
    res = residuals[:, None] if vector else residuals
    if Ybar.shape[0] != r_inv.size or res.shape[0] != r_inv.size:
        raise ShapeError(
            f"woodbury_apply: R has {r_inv.size} entries, Ȳ is {Ybar.shape}, residuals are {residuals.shape}"
        )
    n_ens = Ybar.shape[1]
    weighted_y = r_inv[:, None] * Ybar
    core = np.eye(n_ens) + Ybar.T @ weighted_y
    weighted_res = r_inv[:, None] * res
    try:
        factor = sla.cho_factor(core, lower=True)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise NumericError(f"Cholesky of the {n_ens}×{n_ens} Woodbury core failed: {e}") from e
    out = weighted_res - weighted_y @ sla.cho_solve(factor, Ybar.T @ weighted_res)
    return out[:, 0] if vector else out


def dense_solve_spd(M: np.ndarray, rhs: np.ndarray, dense_cap: int = DENSE_CAP) -> np.ndarray:
    """Cholesky solve of a small symmetric positive definite system."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ShapeError(f"dense_solve_spd needs a square matrix, got {M.shape}")
    if M.shape[0] > dense_cap:
        raise ShapeError(f"dense solve of size {M.shape[0]} exceeds the dense cap {dense_cap}")
    if not np.all(np.isfinite(M)):
        raise NumericError("matrix contains NaN or Inf")
    try:
        factor = sla.cho_factor(M, lower=True, check_finite=False)
    except np.linalg.LinAlgError as e:
        raise NotSPDError(f"matrix of size {M.shape[0]} is not positive definite: {e}") from e
    return sla.cho_solve(factor, np.asarray(rhs, dtype=np.float64), check_finite=False)
