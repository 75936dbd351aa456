"""
Matrix-free linear operators
Building blocks (diagonal, FFT convolution, separable Kronecker, masked kernel,
sparse, factorized solve, identity) and lazy combinators (sum, compose, scale,
adjoint). Every operator exposes ``apply`` and ``apply_adjoint`` and never stores
a dense matrix at scale.

Operators are immutable after construction. ``apply`` accepts either a vector of
length ``cols`` or a block of column vectors of shape ``(cols, m)``; any scratch
space is allocated per call, so operators are safe to share across threads.
"""

import logging
import math
from abc import ABC, abstractmethod
from collections.abc import Sequence

from .errors import MaskError, ShapeError
from .fields import Grid, MaskSet

import numpy as np
import scipy.fft as sfft
import scipy.sparse as sparse
from scipy.sparse.linalg import splu

logger = logging.getLogger(__name__)

KERNEL_TRUNCATE = 4.0
BOUNDARY_MODES = ("zero", "periodic")


class LinearOperator(ABC):
    """Abstract ``rows × cols`` linear map known only through its products."""

    kind: str = "abstract"

    def __init__(self, rows: int, cols: int):
        self.rows = int(rows)
        self.cols = int(cols)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(kind={self.kind!r}, shape={self.shape})"

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.ndim not in (1, 2) or v.shape[0] != self.cols:
            raise ShapeError(f"{self.kind} operator {self.shape} cannot apply to input of shape {v.shape}")
        return self._apply(v)

    def apply_adjoint(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.ndim not in (1, 2) or v.shape[0] != self.rows:
            raise ShapeError(f"{self.kind} adjoint {self.shape[::-1]} cannot apply to input of shape {v.shape}")
        return self._apply_adjoint(v)

    @abstractmethod
    def _apply(self, v: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def _apply_adjoint(self, v: np.ndarray) -> np.ndarray: ...


# Building blocks ==============================================================
class IdentityOperator(LinearOperator):
    kind = "identity"

    def __init__(self, n: int):
        super().__init__(n, n)

    def _apply(self, v: np.ndarray) -> np.ndarray:
        return v.copy()

    _apply_adjoint = _apply


class DiagonalOperator(LinearOperator):
    """L(i,i) = l(r_i): pointwise multiplication by a field."""

    kind = "diagonal"

    def __init__(self, diag: np.ndarray):
        self.diag = np.array(diag, dtype=np.float64).ravel()
        self.diag.setflags(write=False)
        super().__init__(self.diag.size, self.diag.size)

    def _apply(self, v: np.ndarray) -> np.ndarray:
        return self.diag * v if v.ndim == 1 else self.diag[:, None] * v

    _apply_adjoint = _apply


class SparseOperator(LinearOperator):
    """Explicit sparse matrix (CSR), e.g. row selection or a dense test matrix."""

    kind = "sparse"

    def __init__(self, matrix: sparse.spmatrix | np.ndarray):
        self.matrix = sparse.csr_matrix(matrix, dtype=np.float64)
        self._matrix_t = self.matrix.T.tocsr()
        super().__init__(*self.matrix.shape)

    @classmethod
    def from_triplets(
        cls, rows: int, cols: int, i: Sequence[int], j: Sequence[int], values: Sequence[float]
    ) -> "SparseOperator":
        return cls(sparse.coo_matrix((values, (i, j)), shape=(rows, cols)))

    def _apply(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(self.matrix @ v)

    def _apply_adjoint(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(self._matrix_t @ v)


class FactorizedSolveOperator(LinearOperator):
    """v ↦ S⁻¹v through a sparse LU factorization computed once."""

    kind = "factorized"

    def __init__(self, matrix: sparse.spmatrix):
        matrix = sparse.csc_matrix(matrix, dtype=np.float64)
        if matrix.shape[0] != matrix.shape[1]:
            raise ShapeError(f"factorized operator needs a square matrix, got {matrix.shape}")
        self._lu = splu(matrix)
        super().__init__(*matrix.shape)

    def _apply(self, v: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.ascontiguousarray(v))

    def _apply_adjoint(self, v: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.ascontiguousarray(v), trans="T")


class ConvolutionOperator(LinearOperator):
    """
    L(i,j) = l(r_i − r_j) evaluated with FFTs.

    The kernel is an array with odd extent per axis, centered on offset zero. With
    ``boundary="zero"`` the convolution is linear: inputs are embedded in a grid
    padded to at least ``n + kernel_support − 1`` per axis. With ``"periodic"`` the
    kernel wraps around the grid.
    """

    kind = "convolution"

    def __init__(self, kernel: np.ndarray, grid: Grid, boundary: str = "zero"):
        kernel = np.asarray(kernel, dtype=np.float64)
        if kernel.ndim != grid.ndim:
            raise ShapeError(f"kernel is {kernel.ndim}-D but grid is {grid.ndim}-D")
        if any(s % 2 == 0 for s in kernel.shape):
            raise ShapeError(f"kernel extent must be odd per axis, got {kernel.shape}")
        if boundary not in BOUNDARY_MODES:
            raise ValueError(f"boundary must be one of {BOUNDARY_MODES}, got {boundary!r}")
        super().__init__(grid.size, grid.size)
        self.grid = grid
        self.boundary = boundary
        self.kernel = kernel
        half = tuple(s // 2 for s in kernel.shape)
        if boundary == "zero":
            self._fft_shape = tuple(sfft.next_fast_len(n + 2 * h, real=True) for n, h in zip(grid.shape, half, strict=True))
        else:
            self._fft_shape = grid.shape
        # kernel with offset zero moved to index zero (negative offsets wrap)
        wrapped = np.zeros(self._fft_shape)
        offsets = np.meshgrid(*[np.arange(-h, h + 1) for h in half], indexing="ij")
        target = tuple(o % n for o, n in zip(offsets, self._fft_shape, strict=True))
        np.add.at(wrapped, target, kernel)
        self._axes = tuple(range(grid.ndim))
        self._kernel_hat = sfft.rfftn(wrapped, s=self._fft_shape, axes=self._axes)
        self._kernel_hat.setflags(write=False)

    def _convolve(self, v: np.ndarray, kernel_hat: np.ndarray) -> np.ndarray:
        block = v.ndim == 2
        field = v.reshape(self.grid.shape + ((v.shape[1],) if block else ()))
        spec = sfft.rfftn(field, s=self._fft_shape, axes=self._axes)
        if block:
            spec *= kernel_hat[..., np.newaxis]
        else:
            spec *= kernel_hat
        out = sfft.irfftn(spec, s=self._fft_shape, axes=self._axes)
        crop = tuple(slice(0, n) for n in self.grid.shape)
        out = out[crop]
        return out.reshape(v.shape)

    def _apply(self, v: np.ndarray) -> np.ndarray:
        return self._convolve(v, self._kernel_hat)

    def _apply_adjoint(self, v: np.ndarray) -> np.ndarray:
        # correlation with l(−r): the transform of the flipped real kernel is the conjugate
        return self._convolve(v, np.conj(self._kernel_hat))


class SeparableOperator(LinearOperator):
    """L = L_1 ⊗ … ⊗ L_D applied through per-axis tensor contractions."""

    kind = "separable"

    def __init__(self, factors: Sequence[np.ndarray], grid: Grid):
        factors = [np.array(f, dtype=np.float64) for f in factors]
        if len(factors) != grid.ndim:
            raise ShapeError(f"separable operator needs {grid.ndim} factors, got {len(factors)}")
        for d, (f, n) in enumerate(zip(factors, grid.shape, strict=True)):
            if f.ndim != 2 or f.shape[1] != n:
                raise ShapeError(f"factor {d} has shape {f.shape}, expected (m, {n})")
        self.factors = tuple(factors)
        self.in_shape = grid.shape
        self.out_shape = tuple(f.shape[0] for f in factors)
        super().__init__(math.prod(self.out_shape), math.prod(self.in_shape))

    @staticmethod
    def _contract(x: np.ndarray, factors: Sequence[np.ndarray]) -> np.ndarray:
        for d, f in enumerate(factors):
            x = np.moveaxis(np.tensordot(f, x, axes=([1], [d])), 0, d)
        return x

    def _apply(self, v: np.ndarray) -> np.ndarray:
        extra = (v.shape[1],) if v.ndim == 2 else ()
        x = self._contract(v.reshape(self.in_shape + extra), self.factors)
        return x.reshape((self.rows,) + extra)

    def _apply_adjoint(self, v: np.ndarray) -> np.ndarray:
        extra = (v.shape[1],) if v.ndim == 2 else ()
        x = self._contract(v.reshape(self.out_shape + extra), [f.T for f in self.factors])
        return x.reshape((self.cols,) + extra)


class MaskedKernelOperator(LinearOperator):
    """d = Σ_i φ_i ⊙ (k ∗ (φ_i ⊙ v)); no coupling between different masks."""

    kind = "masked_kernel"

    def __init__(self, masks: MaskSet, convolution: ConvolutionOperator):
        if masks.grid.size != convolution.cols:
            raise ShapeError(f"masks cover {masks.grid.size} cells but the kernel acts on {convolution.cols}")
        super().__init__(convolution.rows, convolution.cols)
        self.masks = masks
        self.convolution = convolution

    def _masked(self, v: np.ndarray, adjoint: bool) -> np.ndarray:
        conv = self.convolution.apply_adjoint if adjoint else self.convolution.apply
        out = np.zeros_like(v)
        for phi in self.masks.masks:
            phi = phi if v.ndim == 1 else phi[:, None]
            out += phi * conv(phi * v)
        return out

    def _apply(self, v: np.ndarray) -> np.ndarray:
        return self._masked(v, adjoint=False)

    def _apply_adjoint(self, v: np.ndarray) -> np.ndarray:
        return self._masked(v, adjoint=True)


# Combinators ==================================================================
class SumOperator(LinearOperator):
    kind = "sum"

    def __init__(self, parts: Sequence[LinearOperator]):
        if not parts:
            raise ShapeError("sum needs at least one operator")
        shape = parts[0].shape
        for p in parts[1:]:
            if p.shape != shape:
                raise ShapeError(f"sum of {p.kind} {p.shape} and {parts[0].kind} {shape}: shapes differ")
        super().__init__(*shape)
        self.parts = tuple(parts)

    def _apply(self, v: np.ndarray) -> np.ndarray:
        out = self.parts[0].apply(v)
        for p in self.parts[1:]:
            out = out + p.apply(v)
        return out

    def _apply_adjoint(self, v: np.ndarray) -> np.ndarray:
        out = self.parts[0].apply_adjoint(v)
        for p in self.parts[1:]:
            out = out + p.apply_adjoint(v)
        return out


class ComposeOperator(LinearOperator):
    """parts[0] ∘ parts[1] ∘ … ; applied right to left."""

    kind = "compose"

    def __init__(self, parts: Sequence[LinearOperator]):
        if not parts:
            raise ShapeError("compose needs at least one operator")
        for outer, inner in zip(parts[:-1], parts[1:], strict=True):
            if outer.cols != inner.rows:
                raise ShapeError(
                    f"cannot compose {outer.kind} {outer.shape} with {inner.kind} {inner.shape}: "
                    f"{outer.cols} != {inner.rows}"
                )
        super().__init__(parts[0].rows, parts[-1].cols)
        self.parts = tuple(parts)

    def _apply(self, v: np.ndarray) -> np.ndarray:
        for p in reversed(self.parts):
            v = p.apply(v)
        return v

    def _apply_adjoint(self, v: np.ndarray) -> np.ndarray:
        for p in self.parts:
            v = p.apply_adjoint(v)
        return v


class ScaledOperator(LinearOperator):
    kind = "scale"

    def __init__(self, op: LinearOperator, scalar: float):
        super().__init__(*op.shape)
        self.op = op
        self.scalar = float(scalar)

    def _apply(self, v: np.ndarray) -> np.ndarray:
        return self.scalar * self.op.apply(v)

    def _apply_adjoint(self, v: np.ndarray) -> np.ndarray:
        return self.scalar * self.op.apply_adjoint(v)


class AdjointOperator(LinearOperator):
    kind = "adjoint"

    def __init__(self, op: LinearOperator):
        super().__init__(op.cols, op.rows)
        self.op = op

    def _apply(self, v: np.ndarray) -> np.ndarray:
        return self.op.apply_adjoint(v)

    def _apply_adjoint(self, v: np.ndarray) -> np.ndarray:
        return self.op.apply(v)


def combine(kind: str, parts: Sequence[LinearOperator], scalar: float | None = None) -> LinearOperator:
    """Lazy combinator: ``sum``, ``compose``, ``scale`` or ``adjoint``."""
    parts = list(parts)
    if kind == "sum":
        return SumOperator(parts)
    if kind == "compose":
        return ComposeOperator(parts)
    if kind == "scale":
        if len(parts) != 1 or scalar is None:
            raise ShapeError("scale takes exactly one operator and a scalar")
        return ScaledOperator(parts[0], scalar)
    if kind == "adjoint":
        if len(parts) != 1:
            raise ShapeError("adjoint takes exactly one operator")
        op = parts[0]
        return op.op if isinstance(op, AdjointOperator) else AdjointOperator(op)
    raise ValueError(f"unknown combinator kind {kind!r}")


# Construction helpers =========================================================
def gaussian_kernel(grid: Grid, gamma: float, sigma: float, truncate: float = KERNEL_TRUNCATE) -> np.ndarray:
    """
    Tabulate k(r) = γ·exp(−‖r‖²/σ²) on the grid offsets within ``truncate·σ``.

    The half-width per axis is capped at ``n_d − 1`` since larger offsets never
    occur between two cells of the grid.
    """
    half = [min(int(math.ceil(truncate * sigma / dx)), n - 1) for n, dx in zip(grid.shape, grid.spacing, strict=True)]
    axes = [np.arange(-h, h + 1) * dx for h, dx in zip(half, grid.spacing, strict=True)]
    mesh = np.meshgrid(*axes, indexing="ij")
    r2 = sum(m**2 for m in mesh)
    return gamma * np.exp(-r2 / sigma**2)


def build_block(spec: dict, grid: Grid) -> LinearOperator:
    """
    Build one building block from a description dict.

    Args:
        spec: ``{"kind": "diagonal", "field": values}``,
            ``{"kind": "convolution", "kernel": array, "boundary": "zero"}``,
            ``{"kind": "separable", "factors": [L_1, ..., L_D]}``,
            ``{"kind": "sparse", "rows": .., "cols": .., "i": [..], "j": [..], "values": [..]}``
            (or ``"matrix": dense_or_sparse``), ``{"kind": "identity", "n": n}``.
        grid: grid the block acts on.

    Returns:
        The operator.
    """
    kind = spec.get("kind")
    if kind == "diagonal":
        diag = np.asarray(spec["field"], dtype=np.float64).ravel()
        if diag.size != grid.size:
            raise ShapeError(f"diagonal field has {diag.size} values for a grid of {grid.size} cells")
        return DiagonalOperator(diag)
    if kind == "convolution":
        return ConvolutionOperator(spec["kernel"], grid, spec.get("boundary", "zero"))
    if kind == "separable":
        return SeparableOperator(spec["factors"], grid)
    if kind == "sparse":
        if "matrix" in spec:
            return SparseOperator(spec["matrix"])
        return SparseOperator.from_triplets(spec["rows"], spec["cols"], spec["i"], spec["j"], spec["values"])
    if kind == "identity":
        return IdentityOperator(spec.get("n", grid.size))
    raise ValueError(f"unknown building block kind {kind!r}")


def make_masked_kernel(masks: MaskSet, gamma: float, sigma: float, grid: Grid | None = None) -> MaskedKernelOperator:
    """Masked Gaussian kernel with decaying exponent k(r) = γ·exp(−‖r‖²/σ²)."""
    grid = masks.grid if grid is None else grid
    if not gamma > 0 or not sigma > 0:
        raise ValueError(f"gamma and sigma must be positive, got gamma={gamma}, sigma={sigma}")
    if grid != masks.grid:
        raise MaskError(f"masks are defined on {masks.grid.shape}, kernel grid is {grid.shape}")
    conv = ConvolutionOperator(gaussian_kernel(grid, gamma, sigma), grid, "zero")
    return MaskedKernelOperator(masks, conv)


def from_matrix(matrix: np.ndarray | sparse.spmatrix) -> SparseOperator:
    return SparseOperator(matrix)


def to_dense(op: LinearOperator) -> np.ndarray:
    """Probe ``op`` with unit vectors; only for small operators."""
    return np.asarray(op.apply(np.eye(op.cols)))


def adjoint_mismatch(op: LinearOperator, seed: int = 0) -> float:
    """|⟨Lu,v⟩ − ⟨u,Lᵀv⟩| / (‖u‖‖v‖) for random u, v."""
    rng = np.random.Generator(np.random.Philox(seed))
    u = rng.standard_normal(op.cols)
    v = rng.standard_normal(op.rows)
    lhs = float(np.dot(op.apply(u), v))
    rhs = float(np.dot(u, op.apply_adjoint(v)))
    return abs(lhs - rhs) / (np.linalg.norm(u) * np.linalg.norm(v))
