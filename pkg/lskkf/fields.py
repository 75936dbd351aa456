"""
Scalar fields on rectilinear grids
Grid metadata, field values, material masks and the SF1 / CSV / PGM codecs.

Flat indices are row-major over (axis 1, axis 2, axis 3); every module and every
file format in the toolkit relies on that single ordering.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import FieldFormatError, MaskError, ShapeError

import numpy as np

logger = logging.getLogger(__name__)

SF1_MAGIC = "SF1"
CSV_HEADER_PREFIX = "# SF1-csv"
PGM_MAXVAL = 65535


@dataclass(frozen=True)
class Grid:
    """Rectilinear grid: per-axis counts and physical spacing in meters."""

    shape: tuple[int, ...]
    spacing: tuple[float, ...]

    def __post_init__(self) -> None:
        shape = tuple(int(n) for n in self.shape)
        spacing = tuple(float(dx) for dx in self.spacing)
        if len(shape) not in (1, 2, 3):
            raise ShapeError(f"grid dimension must be 1, 2 or 3, got {len(shape)}")
        if len(spacing) != len(shape):
            raise ShapeError(f"grid spacing has {len(spacing)} entries for a {len(shape)}-D shape")
        if any(n < 1 for n in shape):
            raise ShapeError(f"grid counts must be positive, got {shape}")
        if any(not dx > 0 for dx in spacing):
            raise ShapeError(f"grid spacing must be strictly positive, got {spacing}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing", spacing)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def cell_volume(self) -> float:
        return math.prod(self.spacing)

    def point(self, index: int) -> np.ndarray:
        """Physical coordinates r_i of flat index ``index`` (cell centers, origin at cell 0)."""
        multi = np.unravel_index(int(index), self.shape)
        return np.array([m * dx for m, dx in zip(multi, self.spacing, strict=True)])

    def coordinates(self) -> np.ndarray:
        """All cell-center coordinates, shape (size, ndim), in flat-index order."""
        axes = [np.arange(n) * dx for n, dx in zip(self.shape, self.spacing, strict=True)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def flat_index(self, multi: tuple[int, ...]) -> int:
        return int(np.ravel_multi_index(tuple(multi), self.shape))


@dataclass(frozen=True)
class ScalarField:
    """Values on a grid; the spatial view of a state vector."""

    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if values.size != self.grid.size:
            raise ShapeError(f"field has {values.size} values for grid {self.grid.shape} ({self.grid.size} cells)")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.grid.shape

    @property
    def spacing(self) -> tuple[float, ...]:
        return self.grid.spacing

    def as_array(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)

    def slice2d(self, axis: int | None = None, index: int | None = None) -> np.ndarray:
        """Return a 2-D image of the field; 3-D fields need an axis and an index."""
        arr = self.as_array()
        if arr.ndim == 1:
            return arr[np.newaxis, :]
        if arr.ndim == 2:
            return arr
        if axis is None or index is None:
            raise ShapeError("a 3-D field needs slice axis and index for a 2-D image")
        if not 0 <= axis < 3:
            raise ShapeError(f"slice axis {axis} out of range for a 3-D field")
        if not 0 <= index < arr.shape[axis]:
            raise ShapeError(f"slice index {index} out of range for axis {axis} of length {arr.shape[axis]}")
        return np.take(arr, index, axis=axis)


@dataclass(frozen=True)
class MaskSet:
    """Pairwise-disjoint binary material masks on one grid."""

    grid: Grid
    masks: tuple[np.ndarray, ...] = field(repr=False)

    def __post_init__(self) -> None:
        masks = []
        for i, mask in enumerate(self.masks):
            arr = np.asarray(mask, dtype=np.float64).ravel()
            if arr.size != self.grid.size:
                raise MaskError(f"mask {i} has {arr.size} values for a grid of {self.grid.size} cells")
            if not np.all((arr == 0.0) | (arr == 1.0)):
                raise MaskError(f"mask {i} is not binary")
            masks.append(arr)
        if masks:
            overlap = np.sum(masks, axis=0)
            if np.any(overlap > 1.0):
                bad = int(np.flatnonzero(overlap > 1.0)[0])
                raise MaskError(f"masks overlap at flat index {bad}")
        object.__setattr__(self, "masks", tuple(masks))

    @classmethod
    def from_labels(cls, grid: Grid, labels: np.ndarray, count: int | None = None) -> "MaskSet":
        """Build masks from an integer label per cell (negative = no material)."""
        labels = np.asarray(labels).ravel()
        count = int(labels.max()) + 1 if count is None else count
        return cls(grid, tuple((labels == i).astype(np.float64) for i in range(count)))

    def __len__(self) -> int:
        return len(self.masks)

    def labels(self) -> np.ndarray:
        """Material index per cell, -1 where no mask is set."""
        out = np.full(self.grid.size, -1, dtype=np.int64)
        for i, mask in enumerate(self.masks):
            out[mask == 1.0] = i
        return out

    def covers(self) -> bool:
        return bool(np.all(self.labels() >= 0))

    def indices(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.masks[i] == 1.0)


# SF1 binary ===================================================================
def write_sf1(fld: ScalarField, path: str | Path) -> Path:
    """Write ``SF1 D n_1..n_D dx_1..dx_D\\n`` followed by little-endian float64 values."""
    path = Path(path)
    dims = " ".join(str(n) for n in fld.shape)
    spacing = " ".join(repr(dx) for dx in fld.spacing)
    header = f"{SF1_MAGIC} {fld.grid.ndim} {dims} {spacing}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(fld.values.astype("<f8").tobytes())
    return path


def read_sf1(path: str | Path) -> ScalarField:
    path = Path(path)
    raw = path.read_bytes()
    end = raw.find(b"\n")
    if end < 0:
        raise FieldFormatError(f"{path}: missing SF1 header line")
    tokens = raw[:end].decode("ascii").split()
    if not tokens or tokens[0] != SF1_MAGIC:
        raise FieldFormatError(f"{path}: not an SF1 file")
    try:
        ndim = int(tokens[1])
        shape = tuple(int(t) for t in tokens[2:2 + ndim])
        spacing = tuple(float(t) for t in tokens[2 + ndim:2 + 2 * ndim])
    except (IndexError, ValueError) as e:
        raise FieldFormatError(f"{path}: malformed SF1 header: {e}") from e
    if len(tokens) != 2 + 2 * ndim:
        raise FieldFormatError(f"{path}: SF1 header has {len(tokens)} tokens, expected {2 + 2 * ndim}")
    payload = raw[end + 1:]
    expected = math.prod(shape) * 8
    if len(payload) != expected:
        raise FieldFormatError(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return ScalarField(Grid(shape, spacing), values)


# CSV ==========================================================================
def write_field_csv(fld: ScalarField, path: str | Path, digest: str | None = None) -> Path:
    """One value per line under a ``# SF1-csv shape=...`` header, row-major."""
    path = Path(path)
    header = (
        f"{CSV_HEADER_PREFIX} shape={'x'.join(str(n) for n in fld.shape)}"
        f" spacing={','.join(repr(dx) for dx in fld.spacing)}"
    )
    if digest:
        header += f" digest={digest}"
    np.savetxt(path, fld.values, fmt="%.17g", header=header, comments="")
    return path


def read_field_csv(path: str | Path) -> ScalarField:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip()
    if not header.startswith(CSV_HEADER_PREFIX):
        raise FieldFormatError(f"{path}: missing '{CSV_HEADER_PREFIX}' header")
    attrs = dict(tok.split("=", 1) for tok in header[len(CSV_HEADER_PREFIX):].split() if "=" in tok)
    try:
        shape = tuple(int(n) for n in attrs["shape"].split("x"))
        spacing = tuple(float(dx) for dx in attrs.get("spacing", ",".join(["1.0"] * len(shape))).split(","))
    except (KeyError, ValueError) as e:
        raise FieldFormatError(f"{path}: malformed header: {header}") from e
    values = np.loadtxt(path, skiprows=1, dtype=np.float64, ndmin=1)
    return ScalarField(Grid(shape, spacing), values)


# PGM heatmap ==================================================================
def write_pgm(fld: ScalarField, path: str | Path, axis: int | None = None, index: int | None = None) -> Path:
    """16-bit binary PGM, linear map of [min, max]; the range goes to a ``.txt`` sidecar."""
    path = Path(path)
    image = fld.slice2d(axis, index)
    lo, hi = float(np.min(image)), float(np.max(image))
    if hi > lo:
        scaled = np.rint((image - lo) / (hi - lo) * PGM_MAXVAL)
    else:
        scaled = np.zeros_like(image)
    pixels = scaled.astype(">u2")
    rows, cols = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n{PGM_MAXVAL}\n".encode("ascii"))
        fh.write(pixels.tobytes())
    sidecar = path.with_name(path.name + ".txt")
    sidecar.write_text(f"min={lo!r}\nmax={hi!r}\nslice_axis={axis}\nslice_index={index}\n")
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    """Read back the raw 16-bit pixel array written by :func:`write_pgm`."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise FieldFormatError(f"{path}: not a binary PGM")
    cols, rows = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2").reshape(rows, cols)
