"""Single-phase incompressible Darcy flow with explicit upwind tracer transport.

Pressure obeys ``-div((k/mu) grad p) = a`` with no-flow boundaries and is
discretized with a two-point flux approximation (harmonic face
transmissibilities).  Given the face velocities from Darcy's law, the tracer
saturation follows ``phi ds/dt = a+ + s a- - div(s v)`` and is advanced with
a first-order upwind scheme sub-stepped at CFL <= 0.9, which keeps
``s in [0, 1]`` for free.  Wells are point sources at single cells.

Rates carry units of ft^2/day (2D flow per unit depth); the flow-control
field stores the source density a = rate / cell area.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConstraintViolationError, ContractError, NumericalError
from .grid import CartesianGrid, ScalarField, constant_field

CFL_NUMBER = 0.9
_PRESSURE_ATOL = 1e-10


@dataclass(frozen=True)
class WellSet:
    """Injector/producer cell indices plus the total injection rate c."""

    injectors: tuple[int, ...]
    producers: tuple[int, ...]
    rate: float  # total injection = total production, ft^2/day

    def __post_init__(self):
        object.__setattr__(self, "injectors", tuple(int(i) for i in self.injectors))
        object.__setattr__(self, "producers", tuple(int(i) for i in self.producers))
        if self.rate <= 0:
            raise ContractError(f"total rate must be positive, got {self.rate}")
        cells = self.injectors + self.producers
        if len(set(cells)) != len(cells):
            raise ContractError("well cells must be distinct")

    @property
    def n_injectors(self) -> int:
        return len(self.injectors)

    @property
    def n_producers(self) -> int:
        return len(self.producers)


@dataclass
class ReservoirModel:
    """Static model data: grid, permeability, porosity, viscosity and wells."""

    grid: CartesianGrid
    permeability: ScalarField  # role "permeability", mD
    porosity: ScalarField  # role "porosity"
    viscosity: float  # cP
    wells: WellSet
    _tpfa: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.permeability.values.min() <= 0:
            raise ContractError("permeability must be positive")
        phi = self.porosity.values
        if phi.min() <= 0 or phi.max() > 1:
            raise ContractError("porosity must lie in (0, 1]")
        if self.viscosity <= 0:
            raise ContractError("viscosity must be positive")
        for c in self.wells.injectors + self.wells.producers:
            if not (0 <= c < self.grid.n_cells):
                raise ContractError(f"well cell {c} outside the grid")

    def face_transmissibilities(self) -> tuple[np.ndarray, np.ndarray]:
        """Interior-face transmissibilities (flux = T * dp), harmonic in k.

        Returns (tx, ty): tx has shape (ny, nx+1), ty shape (ny+1, nx);
        boundary faces are zero (no-flow).
        """
        g = self.grid
        k = self.permeability.as_grid()
        tx = np.zeros((g.ny, g.nx + 1))
        ty = np.zeros((g.ny + 1, g.nx))
        kl, kr = k[:, :-1], k[:, 1:]
        tx[:, 1:-1] = (2.0 * kl * kr / (kl + kr)) * g.dy / (self.viscosity * g.dx)
        ku, kd = k[:-1, :], k[1:, :]
        ty[1:-1, :] = (2.0 * ku * kd / (ku + kd)) * g.dx / (self.viscosity * g.dy)
        return tx, ty

    def _tpfa_system(self):
        """Cached sparse TPFA operator and diagonal preconditioner."""
        if self._tpfa is None:
            g = self.grid
            tx, ty = self.face_transmissibilities()
            n = g.n_cells
            idx = np.arange(n).reshape(g.ny, g.nx)
            a = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
            b = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
            t = np.concatenate([tx[:, 1:-1].ravel(), ty[1:-1, :].ravel()])
            rows = np.concatenate([a, b, a, b])
            cols = np.concatenate([b, a, a, b])
            vals = np.concatenate([-t, -t, t, t])
            mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
            diag = mat.diagonal()
            diag[diag == 0.0] = 1.0  # isolated cells (k contrast cannot produce these)
            precond = sp.diags(1.0 / diag)
            self._tpfa = (mat, precond, tx, ty)
        return self._tpfa


@dataclass
class ReservoirState:
    """Time-dependent fields of one simulation."""

    saturation: ScalarField
    pressure: ScalarField
    time: float = 0.0

    def copy(self) -> "ReservoirState":
        return ReservoirState(self.saturation.copy(), self.pressure.copy(), self.time)


def initial_state(model: ReservoirModel, s0: float = 0.0) -> ReservoirState:
    g = model.grid
    return ReservoirState(
        constant_field(g, s0, "saturation"), constant_field(g, 0.0, "pressure"), 0.0
    )


@dataclass(frozen=True)
class FaceVelocities:
    """Face-normal velocities (ft/day): vx on vertical faces, vy on horizontal."""

    vx: np.ndarray  # (ny, nx+1), positive towards +x
    vy: np.ndarray  # (ny+1, nx), positive towards +y (downward rows)


def source_field_from_rates(
    grid: CartesianGrid, wells: WellSet, rates: np.ndarray
) -> ScalarField:
    """Build the flow-control density field from per-well rates.

    ``rates`` is ordered injectors then producers (ft^2/day, producers
    negative); each rate is divided by the cell area to form a density.
    """
    rates = np.asarray(rates, dtype=np.float64)
    expected = wells.n_injectors + wells.n_producers
    if rates.size != expected:
        raise ContractError(f"expected {expected} rates, got {rates.size}")
    values = np.zeros(grid.n_cells)
    cells = np.array(wells.injectors + wells.producers)
    np.add.at(values, cells, rates / grid.cell_area)
    return ScalarField(grid, values, "flow-control")


def _cell_rates(source: ScalarField) -> np.ndarray:
    return source.values * source.grid.cell_area


def solve_pressure(model: ReservoirModel, source: ScalarField) -> ScalarField:
    """TPFA pressure solve with no-flow boundaries, zero-mean normalized.

    The pure-Neumann system is singular; a balanced source (the discrete
    incompressibility constraint) makes it consistent and conjugate
    gradients converge to a solution, which is then shifted to zero mean.
    """
    if source.grid != model.grid:
        raise ContractError("source field lives on a different grid")
    q = _cell_rates(source)
    scale = 0.5 * np.abs(q).sum()
    if scale > 0 and abs(q.sum()) > 1e-8 * scale:
        raise ConstraintViolationError(
            f"unbalanced source: sum={q.sum():.3e} against scale {scale:.3e}"
        )
    if scale == 0.0:
        return constant_field(model.grid, 0.0, "pressure")

    mat, precond, _, _ = model._tpfa_system()
    atol = _PRESSURE_ATOL * max(1.0, float(np.linalg.norm(q)))
    p, info = spla.cg(mat, q, rtol=0.0, atol=atol, M=precond, maxiter=20 * model.grid.n_cells)
    if info != 0:
        residual = float(np.linalg.norm(mat @ p - q))
        raise NumericalError(f"pressure CG did not converge (info={info}, residual={residual:.3e})")
    p -= p.mean()
    return ScalarField(model.grid, p, "pressure")


def darcy_velocity(model: ReservoirModel, pressure: ScalarField) -> FaceVelocities:
    """Face velocities v = -(k/mu) grad p; boundary faces are exactly zero."""
    if pressure.grid != model.grid:
        raise ContractError("pressure field lives on a different grid")
    g = model.grid
    _, _, tx, ty = model._tpfa_system()
    p = pressure.as_grid()
    vx = np.zeros((g.ny, g.nx + 1))
    vy = np.zeros((g.ny + 1, g.nx))
    # flux = T * (p_upstream - p_downstream); velocity = flux / face length
    vx[:, 1:-1] = tx[:, 1:-1] * (p[:, :-1] - p[:, 1:]) / g.dy
    vy[1:-1, :] = ty[1:-1, :] * (p[:-1, :] - p[1:, :]) / g.dx
    return FaceVelocities(vx, vy)


def advance_saturation(
    state: ReservoirState,
    model: ReservoirModel,
    velocities: FaceVelocities,
    source: ScalarField,
    dt: float,
    collect: list | None = None,
) -> ReservoirState:
    """Explicit upwind transport over ``dt`` days with CFL-limited sub-steps.

    Injectors add tracer at full concentration (a+ term), producers remove it
    at the local cell concentration (s a- term).  When ``collect`` is a list,
    one dict per sub-step is appended with the mass-balance bookkeeping
    (dt, injected, produced_tracer, produced_total, mass_before, mass_after).
    """
    if dt <= 0:
        raise ContractError(f"dt must be positive, got {dt}")
    g = model.grid
    if source.grid != g or state.saturation.grid != g:
        raise ContractError("state/source grid mismatch")

    q = _cell_rates(source).reshape(g.ny, g.nx)
    q_in = np.maximum(q, 0.0)
    q_out = np.minimum(q, 0.0)
    fx = velocities.vx * g.dy  # face fluxes, ft^2/day
    fy = velocities.vy * g.dx
    phi = model.porosity.as_grid()
    pore = phi * g.cell_area

    # total outflux per cell bounds the stable explicit step
    outflux = (
        np.maximum(fx[:, 1:], 0.0)
        + np.maximum(-fx[:, :-1], 0.0)
        + np.maximum(fy[1:, :], 0.0)
        + np.maximum(-fy[:-1, :], 0.0)
        - q_out
    )
    active = outflux > 0
    dt_stable = CFL_NUMBER * float((pore[active] / outflux[active]).min()) if active.any() else dt

    s = state.saturation.as_grid().copy()
    remaining = dt
    while remaining > 1e-14 * dt:
        step = min(dt_stable, remaining)
        if collect is not None:
            mass_before = float((pore * s).sum())
            produced_total = float(-q_out.sum()) * step
            produced_tracer = float(-(q_out * s).sum()) * step
            injected = float(q_in.sum()) * step

        # upwind tracer fluxes on interior faces
        sx = np.where(fx[:, 1:-1] > 0.0, s[:, :-1], s[:, 1:])
        sy = np.where(fy[1:-1, :] > 0.0, s[:-1, :], s[1:, :])
        adv = np.zeros_like(s)
        tracer_fx = fx[:, 1:-1] * sx
        tracer_fy = fy[1:-1, :] * sy
        adv[:, :-1] -= tracer_fx
        adv[:, 1:] += tracer_fx
        adv[:-1, :] -= tracer_fy
        adv[1:, :] += tracer_fy

        s = s + step / pore * (q_in + s * q_out + adv)
        if s.max() > 1.0 + 1e-10 or s.min() < -1e-10:
            raise NumericalError(
                f"saturation left [0,1] beyond tolerance: [{s.min():.3e}, {s.max():.3e}]"
            )
        s = np.clip(s, 0.0, 1.0)

        if collect is not None:
            collect.append(
                {
                    "dt": step,
                    "injected": injected,
                    "produced_tracer": produced_tracer,
                    "produced_total": produced_total,
                    "mass_before": mass_before,
                    "mass_after": float((pore * s).sum()),
                }
            )
        remaining -= step

    return ReservoirState(
        ScalarField(g, s.ravel(), "saturation"), state.pressure, state.time + dt
    )


def run_control_step(
    state: ReservoirState,
    model: ReservoirModel,
    rates: np.ndarray,
    duration: float,
) -> tuple[ReservoirState, float]:
    """Run one control step with fixed per-well rates.

    Pressure is solved once (flow is incompressible and the controls are
    constant within the step), then the saturation is advected over
    ``duration`` days.  Returns the new state and the time integral of the
    produced contaminant, sum over producers of |a-| (1 - s) dt, accumulated
    with a rectangle rule on the transport sub-steps.
    """
    if duration < 0:
        raise ContractError(f"duration must be nonnegative, got {duration}")
    if duration == 0.0:
        return state.copy(), 0.0
    source = source_field_from_rates(model.grid, model.wells, rates)
    pressure = solve_pressure(model, source)
    velocities = darcy_velocity(model, pressure)
    substeps: list = []
    new_state = advance_saturation(state, model, velocities, source, duration, collect=substeps)
    produced_contaminant = sum(s["produced_total"] - s["produced_tracer"] for s in substeps)
    return ReservoirState(new_state.saturation, pressure, new_state.time), produced_contaminant
