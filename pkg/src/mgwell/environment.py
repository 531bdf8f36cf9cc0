"""MDP wrapper over the flow simulator with multi-grid state/action mapping.

The policy always sees fine-grid observations and emits fine-grid well
weights.  Internally the environment runs at a fidelity ``beta``: model
parameters and per-well flows are restricted to the coarse grid, the
simulator advances there, and saturation/pressure are prolonged back to the
fine grid before sampling the observation at the well cells.

Observation layout: producer saturations, producer pressures, injector
pressures (saturation at injectors is pinned at one and carries no
information).  Actions are weight vectors w in [0.001, 1], injectors first,
normalized per group so the total injection and production rates both equal
the configured rate c.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, InvalidFidelityError
from .grid import (
    CartesianGrid,
    ScalarField,
    build_partition,
    constant_field,
    prolong,
    restrict,
)
from .simulator import (
    ReservoirModel,
    ReservoirState,
    WellSet,
    initial_state,
    run_control_step,
    solve_pressure,
    source_field_from_rates,
)

WEIGHT_MIN = 0.001
WEIGHT_MAX = 1.0


@dataclass(frozen=True)
class EnvironmentConfig:
    """One test case at one grid fidelity."""

    case: int  # 1: edge-to-edge channel sweep, 2: center-to-edges sweep
    beta: float = 1.0
    nx: int = 61
    ny: int = 61
    lx: float = 1200.0
    ly: float = 1200.0
    n_injectors: int = 31
    n_producers: int = 31
    total_rate: float = 2304.0  # ft^2/day
    horizon: float = 125.0  # days
    control_steps: int = 5
    viscosity: float = 0.3  # cP
    porosity: float = 0.2
    initial_saturation: float = 0.0

    def __post_init__(self):
        if self.case not in (1, 2):
            raise ContractError(f"unknown test case {self.case}")
        if self.control_steps < 1:
            raise ContractError("need at least one control step")
        if not (0.0 < self.beta <= 1.0):
            raise InvalidFidelityError(f"fidelity factor must be in (0,1], got {self.beta}")

    @property
    def fine_grid(self) -> CartesianGrid:
        return CartesianGrid(self.nx, self.ny, self.lx, self.ly)

    @property
    def n_obs(self) -> int:
        return 2 * self.n_producers + self.n_injectors

    @property
    def n_actions(self) -> int:
        return self.n_injectors + self.n_producers

    @property
    def step_duration(self) -> float:
        return self.horizon / self.control_steps

    def at_fidelity(self, beta: float) -> "EnvironmentConfig":
        return replace(self, beta=beta)


def case1_config(beta: float = 1.0, **overrides) -> EnvironmentConfig:
    """Edge-to-edge waterflood with a high-permeability channel."""
    return EnvironmentConfig(case=1, beta=beta, **overrides)


def case2_config(beta: float = 1.0, **overrides) -> EnvironmentConfig:
    """Central injector column flooding towards both lateral edges."""
    defaults = dict(
        nx=31, ny=91, lx=620.0, ly=1820.0,
        n_injectors=7, n_producers=14,
        total_rate=9072.0, horizon=25.0,
    )
    defaults.update(overrides)
    return EnvironmentConfig(case=2, beta=beta, **defaults)


def _spread_rows(ny: int, count: int) -> np.ndarray:
    if count > ny:
        raise ContractError(f"cannot place {count} wells in {ny} rows")
    return np.unique(np.round(np.linspace(0, ny - 1, count)).astype(int))


def well_layout(config: EnvironmentConfig) -> WellSet:
    """Fine-grid well cells for a test case.

    Case 1: injectors down the left edge, producers down the right edge.
    Case 2: producers split over both lateral edges, injectors on the
    central vertical axis.
    """
    g = config.fine_grid
    if config.case == 1:
        inj_rows = _spread_rows(g.ny, config.n_injectors)
        prod_rows = _spread_rows(g.ny, config.n_producers)
        injectors = [g.cell_index(0, r) for r in inj_rows]
        producers = [g.cell_index(g.nx - 1, r) for r in prod_rows]
    else:
        if config.n_producers % 2 != 0:
            raise ContractError("case 2 splits producers evenly over two edges")
        per_edge = config.n_producers // 2
        prod_rows = _spread_rows(g.ny, per_edge)
        inj_rows = _spread_rows(g.ny, config.n_injectors)
        mid = g.nx // 2
        injectors = [g.cell_index(mid, r) for r in inj_rows]
        producers = [g.cell_index(0, r) for r in prod_rows] + [
            g.cell_index(g.nx - 1, r) for r in prod_rows
        ]
    return WellSet(tuple(injectors), tuple(producers), config.total_rate)


def clip_weights(w: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(w, dtype=np.float64), WEIGHT_MIN, WEIGHT_MAX)


def action_to_flows(w: np.ndarray, wells: WellSet) -> np.ndarray:
    """Per-well rates from a weight vector (injectors then producers).

    Each group is normalized to the total rate, so the incompressibility
    constraint holds exactly: sum of rates is zero.
    """
    w = clip_weights(w)
    ni, np_ = wells.n_injectors, wells.n_producers
    if w.size != ni + np_:
        raise ContractError(f"expected {ni + np_} weights, got {w.size}")
    wi, wp = w[:ni], w[ni:]
    rates = np.empty(ni + np_)
    rates[:ni] = wells.rate * wi / wi.sum()
    rates[ni:] = -wells.rate * wp / wp.sum()
    # force the balance to be exact in floating point
    rates[ni:] *= rates[:ni].sum() / -rates[ni:].sum()
    return rates


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


class WellControlEnv:
    """Episodic well-control environment at a fixed grid fidelity."""

    def __init__(self, config: EnvironmentConfig):
        self.config = config
        self.fine_grid = config.fine_grid
        self.fine_wells = well_layout(config)
        self.partition = build_partition(config.nx, config.ny, config.beta)
        self.coarse_grid = self.partition.coarse_grid(self.fine_grid)
        self._build_coarse_wells()
        self._model: ReservoirModel | None = None
        self._state: ReservoirState | None = None
        self._step_count = 0
        self._recovery = 0.0
        self._pore_volume = config.porosity * config.lx * config.ly
        self._trace: list[dict] = []

    # -- construction helpers ------------------------------------------------

    def _build_coarse_wells(self):
        owner = self.partition.owner
        inj_cells = [owner[c] for c in self.fine_wells.injectors]
        prod_cells = [owner[c] for c in self.fine_wells.producers]
        coarse_inj = sorted(set(inj_cells))
        coarse_prod = sorted(set(prod_cells))
        if set(coarse_inj) & set(coarse_prod):
            raise InvalidFidelityError(
                f"beta={self.config.beta} merges an injector and a producer into one cell"
            )
        self._fine_inj_owner = np.array(inj_cells)
        self._fine_prod_owner = np.array(prod_cells)
        self._coarse_wells = WellSet(
            tuple(int(c) for c in coarse_inj),
            tuple(int(c) for c in coarse_prod),
            self.config.total_rate,
        )
        self._inj_slot = np.searchsorted(coarse_inj, inj_cells)
        self._prod_slot = np.searchsorted(coarse_prod, prod_cells)

    def _restrict_rates(self, fine_rates: np.ndarray) -> np.ndarray:
        """Sum fine per-well rates into the owning coarse well cells."""
        ni = self.fine_wells.n_injectors
        coarse = np.zeros(self._coarse_wells.n_injectors + self._coarse_wells.n_producers)
        np.add.at(coarse, self._inj_slot, fine_rates[:ni])
        np.add.at(
            coarse,
            self._coarse_wells.n_injectors + self._prod_slot,
            fine_rates[ni:],
        )
        return coarse

    # -- MDP interface -------------------------------------------------------

    def reset(self, log_permeability: ScalarField) -> np.ndarray:
        """Start an episode on one fine-grid log-permeability sample."""
        if log_permeability.grid != self.fine_grid:
            raise ContractError("permeability sample must live on the fine grid")
        if log_permeability.role != "log-permeability":
            raise ContractError("expected a log-permeability field")
        cfg = self.config
        k_coarse = restrict(log_permeability, self.partition)
        phi_fine = constant_field(self.fine_grid, cfg.porosity, "porosity")
        phi_coarse = restrict(phi_fine, self.partition)
        self._model = ReservoirModel(
            grid=self.coarse_grid,
            permeability=ScalarField(
                self.coarse_grid, np.exp(k_coarse.values), "permeability"
            ),
            porosity=phi_coarse,
            viscosity=cfg.viscosity,
            wells=self._coarse_wells,
        )
        self._state = initial_state(self._model, cfg.initial_saturation)
        self._step_count = 0
        self._recovery = 0.0
        self._trace = []
        # the first observation needs a pressure field before any control is
        # applied; use the equal-weight (base policy) source for it
        base = action_to_flows(np.ones(cfg.n_actions), self.fine_wells)
        src = source_field_from_rates(
            self.coarse_grid, self._coarse_wells, self._restrict_rates(base)
        )
        pressure = solve_pressure(self._model, src)
        self._state = ReservoirState(self._state.saturation, pressure, 0.0)
        return self.observe()

    def observe(self) -> np.ndarray:
        """Fine-grid observation vector; pure function of internal state."""
        if self._state is None:
            raise ContractError("environment must be reset first")
        s_fine = prolong(self._state.saturation, self.partition).values
        p_fine = prolong(self._state.pressure, self.partition).values
        prod = np.array(self.fine_wells.producers)
        inj = np.array(self.fine_wells.injectors)
        return np.concatenate([s_fine[prod], p_fine[prod], p_fine[inj]])

    @property
    def done(self) -> bool:
        return self._step_count >= self.config.control_steps

    @property
    def recovery_factor(self) -> float:
        return self._recovery

    def step(self, weights: np.ndarray) -> StepResult:
        """Apply one control step; reward is the recovery-factor increment."""
        if self._state is None:
            raise ContractError("environment must be reset first")
        if self.done:
            raise ContractError("episode is finished; call reset")
        w = clip_weights(weights)
        fine_rates = action_to_flows(w, self.fine_wells)
        coarse_rates = self._restrict_rates(fine_rates)
        self._state, produced = run_control_step(
            self._state, self._model, coarse_rates, self.config.step_duration
        )
        reward = produced / self._pore_volume
        self._recovery += reward
        self._step_count += 1
        self._record_trace(fine_rates, reward)
        return StepResult(
            observation=self.observe(),
            reward=reward,
            done=self.done,
            info={"recovery_factor": self._recovery, "step": self._step_count},
        )

    # -- bookkeeping ---------------------------------------------------------

    def _record_trace(self, fine_rates: np.ndarray, reward: float):
        s_fine = prolong(self._state.saturation, self.partition).values
        p_fine = prolong(self._state.pressure, self.partition).values
        cells = list(self.fine_wells.injectors) + list(self.fine_wells.producers)
        for wid, (cell, rate) in enumerate(zip(cells, fine_rates)):
            self._trace.append(
                {
                    "step": self._step_count,
                    "well_id": wid,
                    "rate": rate,
                    "saturation": s_fine[cell],
                    "pressure": p_fine[cell],
                    "reward": reward,
                }
            )

    def export_trace(self, path) -> None:
        """Per-episode CSV: (step, well id, rate, saturation, pressure, reward)."""
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["step", "well_id", "rate", "saturation", "pressure", "reward"]
            )
            writer.writeheader()
            writer.writerows(self._trace)


def episode_return(policy, log_permeability: ScalarField, config: EnvironmentConfig) -> float:
    """Cumulative recovery factor of a deterministic rollout.

    ``policy`` maps an observation vector to a weight vector (mean action).
    """
    env = WellControlEnv(config)
    obs = env.reset(log_permeability)
    while not env.done:
        result = env.step(policy(obs))
        obs = result.observation
    return env.recovery_factor


def base_policy_for(config: EnvironmentConfig):
    """All wells equally open; the comparison floor for learned policies."""
    n = config.n_actions

    def policy(obs: np.ndarray) -> np.ndarray:
        return np.ones(n)

    return policy
