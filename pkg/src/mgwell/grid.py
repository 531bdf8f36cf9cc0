"""Cartesian grid geometry, cell-centered scalar fields and the coarsening
operators that move fields between grid fidelities.

A grid fidelity factor ``beta`` in (0, 1] shrinks an ``m x n`` grid to
``floor(beta*m) x floor(beta*n)``.  Restriction aggregates fine cells into
their owning coarse cell (mean / harmonic mean / sum depending on the
physical role of the field); prolongation is piecewise-constant injection,
so ``restrict(prolong(x), mean) == x`` holds exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InvalidFidelityError

# Physical role of a field decides how it is aggregated when coarsened.
ROLE_AGGREGATION = {
    "saturation": "mean",
    "pressure": "mean",
    "porosity": "mean",
    "permeability": "harmonic-mean",
    "log-permeability": "harmonic-mean",  # applied in permeability space
    "flow-control": "sum",
}

_BINARY_HEADER = struct.Struct("<iidd")  # nx, ny (int32), lx, ly (float64)


@dataclass(frozen=True)
class CartesianGrid:
    """Uniform 2D cell-centered grid over a rectangular domain (ft)."""

    nx: int
    ny: int
    lx: float
    ly: float

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ContractError(f"cell counts must be >= 1, got {self.nx}x{self.ny}")
        if self.lx <= 0 or self.ly <= 0:
            raise ContractError(f"domain extents must be positive, got {self.lx}x{self.ly}")

    @property
    def dx(self) -> float:
        return self.lx / self.nx

    @property
    def dy(self) -> float:
        return self.ly / self.ny

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    def cell_index(self, ix: int, iy: int) -> int:
        """Flat row-major index of cell (ix, iy); iy is the row from the top."""
        if not (0 <= ix < self.nx and 0 <= iy < self.ny):
            raise ContractError(f"cell ({ix},{iy}) outside {self.nx}x{self.ny} grid")
        return iy * self.nx + ix

    def cell_center(self, ix: int, iy: int) -> tuple[float, float]:
        """(x, y) of the cell center; y measured downward from the top edge."""
        return (ix + 0.5) * self.dx, (iy + 0.5) * self.dy


@dataclass
class ScalarField:
    """Flat row-major array of cell values tagged with a physical role."""

    grid: CartesianGrid
    values: np.ndarray
    role: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.values.size != self.grid.n_cells:
            raise ContractError(
                f"field of length {self.values.size} on a {self.grid.nx}x{self.grid.ny} grid"
            )
        if self.role not in ROLE_AGGREGATION:
            raise ContractError(f"unknown field role {self.role!r}")
        if self.role == "saturation":
            if self.values.min() < 0.0 or self.values.max() > 1.0:
                raise ContractError("saturation values must lie in [0, 1]")
        if self.role == "permeability" and self.values.min() <= 0.0:
            raise ContractError("permeability values must be positive")

    def as_grid(self) -> np.ndarray:
        """(ny, nx) view; row 0 is the top of the domain."""
        return self.values.reshape(self.grid.ny, self.grid.nx)

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy(), self.role)


def constant_field(grid: CartesianGrid, value: float, role: str) -> ScalarField:
    return ScalarField(grid, np.full(grid.n_cells, value), role)


@dataclass(frozen=True)
class PartitionMap:
    """Ownership of fine cells by coarse cells for a fidelity factor beta.

    Along an axis of fine length ``m`` with coarse count ``mc = floor(beta*m)``
    fine index ``i`` belongs to coarse index ``i * mc // m``; blocks are
    contiguous and their sizes along an axis differ by at most one cell.
    """

    fine_nx: int
    fine_ny: int
    coarse_nx: int
    coarse_ny: int
    owner: np.ndarray = field(repr=False)  # flat fine index -> flat coarse index

    @property
    def is_identity(self) -> bool:
        return self.fine_nx == self.coarse_nx and self.fine_ny == self.coarse_ny

    def coarse_grid(self, fine: CartesianGrid) -> CartesianGrid:
        return CartesianGrid(self.coarse_nx, self.coarse_ny, fine.lx, fine.ly)

    def coarse_cell_of(self, fine_index: int) -> int:
        return int(self.owner[fine_index])


def build_partition(m: int, n: int, beta: float) -> PartitionMap:
    """Partition an ``m x n`` fine grid into ``floor(beta*m) x floor(beta*n)``."""
    if not (0.0 < beta <= 1.0):
        raise InvalidFidelityError(f"fidelity factor must be in (0, 1], got {beta}")
    mc = int(np.floor(beta * m))
    nc = int(np.floor(beta * n))
    if mc < 1 or nc < 1:
        raise InvalidFidelityError(
            f"beta={beta} collapses {m}x{n} to {mc}x{nc}; need at least one cell per axis"
        )
    owner_x = (np.arange(m) * mc) // m
    owner_y = (np.arange(n) * nc) // n
    owner = owner_y[:, None] * mc + owner_x[None, :]  # (n, m) row-major
    return PartitionMap(m, n, mc, nc, owner.ravel())


def _block_counts(pmap: PartitionMap) -> np.ndarray:
    return np.bincount(pmap.owner, minlength=pmap.coarse_nx * pmap.coarse_ny)


def restrict(fld: ScalarField, pmap: PartitionMap, how: str | None = None) -> ScalarField:
    """Aggregate a fine field onto the coarse grid of ``pmap``.

    The aggregation defaults to the field role's rule (saturation, porosity
    and pressure: mean; permeability: harmonic mean; flow control: sum).
    Passing an explicit ``how`` that conflicts with the role is an error.
    """
    if fld.grid.nx != pmap.fine_nx or fld.grid.ny != pmap.fine_ny:
        raise ContractError(
            f"field dims {fld.grid.nx}x{fld.grid.ny} do not match partition fine dims "
            f"{pmap.fine_nx}x{pmap.fine_ny}"
        )
    default = ROLE_AGGREGATION[fld.role]
    if how is None:
        how = default
    elif how != default:
        raise ContractError(f"aggregation {how!r} conflicts with role {fld.role!r} ({default})")

    if pmap.is_identity:
        return fld.copy()  # beta=1: keep the operator bit-exact

    values = fld.values
    log_space = fld.role == "log-permeability"
    if log_space:
        values = np.exp(values)  # harmonic mean acts on permeability, not its log

    n_coarse = pmap.coarse_nx * pmap.coarse_ny
    counts = _block_counts(pmap)
    if how == "sum":
        out = np.bincount(pmap.owner, weights=values, minlength=n_coarse)
    elif how == "mean":
        # anchor on one block member so constant blocks restrict bit-exactly,
        # which makes restrict(prolong(x)) == x an identity rather than an
        # approximation
        first = np.zeros(n_coarse)
        first[pmap.owner[::-1]] = values[::-1]  # forward overwrite keeps the first
        dev = values - first[pmap.owner]
        out = first + np.bincount(pmap.owner, weights=dev, minlength=n_coarse) / counts
    elif how == "harmonic-mean":
        if values.min() <= 0.0:
            raise ContractError("harmonic mean requires strictly positive values")
        out = counts / np.bincount(pmap.owner, weights=1.0 / values, minlength=n_coarse)
    else:  # pragma: no cover - ROLE_AGGREGATION is exhaustive
        raise ContractError(f"unknown aggregation {how!r}")

    if log_space:
        out = np.log(out)
    coarse = pmap.coarse_grid(fld.grid)
    return ScalarField(coarse, out, fld.role)


def prolong(fld: ScalarField, pmap: PartitionMap) -> ScalarField:
    """Piecewise-constant injection of a coarse field onto the fine grid."""
    if fld.grid.nx != pmap.coarse_nx or fld.grid.ny != pmap.coarse_ny:
        raise ContractError(
            f"field dims {fld.grid.nx}x{fld.grid.ny} do not match partition coarse dims "
            f"{pmap.coarse_nx}x{pmap.coarse_ny}"
        )
    if pmap.is_identity:
        return fld.copy()
    fine = CartesianGrid(pmap.fine_nx, pmap.fine_ny, fld.grid.lx, fld.grid.ly)
    return ScalarField(fine, fld.values[pmap.owner], fld.role)


# ---------------------------------------------------------------------------
# Serialization: CSV (ny rows x nx columns) and a flat binary format with a
# fixed little-endian header: nx, ny as int32, lx, ly as float64 (24 bytes),
# followed by nx*ny row-major float64 cell values.
# ---------------------------------------------------------------------------

def save_field_csv(fld: ScalarField, path) -> None:
    np.savetxt(path, fld.as_grid(), delimiter=",")


def load_field_csv(path, grid: CartesianGrid, role: str) -> ScalarField:
    values = np.loadtxt(path, delimiter=",", ndmin=2)
    if values.shape != (grid.ny, grid.nx):
        raise ContractError(f"CSV shape {values.shape} does not match {grid.ny}x{grid.nx}")
    return ScalarField(grid, values.ravel(), role)


def save_field_binary(fld: ScalarField, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_BINARY_HEADER.pack(fld.grid.nx, fld.grid.ny, fld.grid.lx, fld.grid.ly))
        fh.write(fld.values.astype("<f8").tobytes())


def load_field_binary(path, role: str) -> ScalarField:
    with open(path, "rb") as fh:
        header = fh.read(_BINARY_HEADER.size)
        nx, ny, lx, ly = _BINARY_HEADER.unpack(header)
        values = np.frombuffer(fh.read(), dtype="<f8")
    grid = CartesianGrid(nx, ny, lx, ly)
    if values.size != grid.n_cells:
        raise ContractError(f"binary payload holds {values.size} values, expected {grid.n_cells}")
    return ScalarField(grid, values.copy(), role)
