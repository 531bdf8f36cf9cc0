"""Differential-evolution benchmark optimizer (rand/1/bin with dithered F).

DE cannot represent feedback policies, so the benchmark optimizes an
open-loop decision vector: one weight per well per control step
(control_steps * n_wells dimensions), evaluated as the cumulative recovery
factor of that control sequence on a single permeability sample at beta=1.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import numpy as np

from .environment import EnvironmentConfig, WellControlEnv
from .errors import ContractError

BOUNDS = (0.001, 1.0)


@dataclass(frozen=True)
class DeConfig:
    population: int = 310
    iterations: int = 1024
    recombination: float = 0.9
    mutation: tuple[float, float] = (0.5, 1.0)
    seed: int = 0
    seed_equal_weights: bool = True  # include the base-policy member

    def __post_init__(self):
        if self.population < 4:
            raise ContractError("rand/1/bin needs a population of at least 4")
        if not (0.0 <= self.recombination <= 1.0):
            raise ContractError("recombination probability must lie in [0, 1]")
        lo, hi = self.mutation
        if not (0.0 < lo <= hi):
            raise ContractError("mutation range must satisfy 0 < lo <= hi")


def de_optimize(objective, dim: int, config: DeConfig, workers: int = 1):
    """Maximize ``objective`` over [0.001, 1]^dim.

    rand/1/bin: mutant = x_a + F (x_b - x_c) with F drawn once per
    generation from the configured range, binomial crossover, greedy
    selection, clipping to the bounds.  Returns (best vector, best value,
    per-generation best history).
    """
    rng = np.random.default_rng(config.seed)
    lo, hi = BOUNDS
    pop = rng.uniform(lo, hi, size=(config.population, dim))
    if config.seed_equal_weights:
        pop[0] = 1.0

    pool = None
    if workers > 1:
        from multiprocessing import Pool

        pool = Pool(workers)

    def evaluate(vectors):
        if pool is not None:
            return np.array(pool.map(objective, list(vectors)))
        return np.array([objective(v) for v in vectors])

    try:
        fitness = evaluate(pop)
        history = [float(fitness.max())]
        n = config.population
        for _ in range(config.iterations):
            f_factor = rng.uniform(*config.mutation)
            trials = np.empty_like(pop)
            for i in range(n):
                choices = rng.choice(n - 1, size=3, replace=False)
                choices[choices >= i] += 1  # distinct from i and each other
                a, b, c = pop[choices]
                mutant = np.clip(a + f_factor * (b - c), lo, hi)
                cross = rng.random(dim) < config.recombination
                cross[rng.integers(dim)] = True  # at least one mutant gene
                trials[i] = np.where(cross, mutant, pop[i])
            trial_fitness = evaluate(trials)
            better = trial_fitness > fitness
            pop[better] = trials[better]
            fitness[better] = trial_fitness[better]
            history.append(float(fitness.max()))
    finally:
        if pool is not None:
            pool.close()
            pool.join()
    best = int(fitness.argmax())
    return pop[best].copy(), float(fitness[best]), history


def open_loop_recovery(
    weights: np.ndarray, log_permeability, config: EnvironmentConfig
) -> float:
    """Cumulative recovery factor of an open-loop weight sequence."""
    steps = config.control_steps
    n_act = config.n_actions
    weights = np.asarray(weights, dtype=np.float64)
    if weights.size != steps * n_act:
        raise ContractError(f"expected {steps * n_act} weights, got {weights.size}")
    env = WellControlEnv(config)
    env.reset(log_permeability)
    for m in range(steps):
        env.step(weights[m * n_act : (m + 1) * n_act])
    return env.recovery_factor


def de_wellcontrol(
    log_permeability,
    config: EnvironmentConfig,
    de_config: DeConfig,
    workers: int = 1,
):
    """Benchmark optimal recovery for one sample at the finest grid.

    Returns (best recovery factor, best open-loop weights, history).
    """
    fine = config.at_fidelity(1.0)
    objective = partial(
        open_loop_recovery, log_permeability=log_permeability, config=fine
    )
    dim = fine.control_steps * fine.n_actions
    best_vec, best_val, history = de_optimize(objective, dim, de_config, workers=workers)
    return best_val, best_vec, history
