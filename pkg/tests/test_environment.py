import numpy as np
import pytest

from mgwell.environment import (
    WellControlEnv,
    action_to_flows,
    base_policy_for,
    case1_config,
    case2_config,
    episode_return,
    well_layout,
)
from mgwell.errors import ContractError
from mgwell.grid import ScalarField, constant_field
from mgwell.simulator import ReservoirModel, initial_state, run_control_step
from mgwell.uncertainty import sample_g1


@pytest.fixture(scope="module")
def small_config():
    return case1_config(nx=15, ny=15, n_injectors=8, n_producers=8)


@pytest.fixture(scope="module")
def sample_small(small_config):
    return sample_g1(np.random.default_rng(0), small_config.fine_grid)


class TestConfigs:
    def test_case1_dimensions(self):
        cfg = case1_config()
        assert cfg.n_obs == 93
        assert cfg.n_actions == 62
        assert (cfg.nx, cfg.ny) == (61, 61)

    def test_case2_dimensions(self):
        cfg = case2_config()
        assert cfg.n_obs == 35
        assert cfg.n_actions == 21
        assert (cfg.nx, cfg.ny) == (31, 91)
        assert cfg.total_rate == 9072.0

    def test_well_layouts_are_distinct_cells(self):
        for cfg in (case1_config(), case2_config()):
            wells = well_layout(cfg)
            cells = wells.injectors + wells.producers
            assert len(set(cells)) == len(cells)
            assert len(wells.injectors) == cfg.n_injectors
            assert len(wells.producers) == cfg.n_producers


class TestActionToFlows:
    def test_equal_weights_case1(self):
        wells = well_layout(case1_config())
        rates = action_to_flows(np.ones(62), wells)
        np.testing.assert_allclose(rates[:31], 2304.0 / 31)
        np.testing.assert_allclose(rates[31:], -2304.0 / 31)

    def test_scale_invariance_of_injector_group(self):
        # stay above the clip floor so scaling does not change clipped values
        wells = well_layout(case1_config())
        w = np.random.default_rng(1).uniform(0.1, 1.0, 62)
        scaled = w.copy()
        scaled[:31] *= 0.5
        np.testing.assert_allclose(
            action_to_flows(w, wells)[:31], action_to_flows(scaled, wells)[:31]
        )

    def test_dominant_injector_rate(self):
        wells = well_layout(case1_config())
        w = np.full(62, 0.001)
        w[0] = 1.0
        w[31:] = 1.0
        rates = action_to_flows(w, wells)
        assert rates[0] == pytest.approx(2304.0 / (1 + 30 * 0.001), rel=1e-9)

    def test_exact_balance_for_random_weights(self):
        wells = well_layout(case2_config())
        rng = np.random.default_rng(5)
        for _ in range(50):
            rates = action_to_flows(rng.uniform(-2, 2, 21), wells)
            assert rates.sum() == pytest.approx(0.0, abs=1e-9)

    def test_weights_clipped_before_normalizing(self):
        wells = well_layout(case1_config())
        rates = action_to_flows(np.zeros(62), wells)
        np.testing.assert_allclose(rates[:31], 2304.0 / 31)


class TestResetAndObserve:
    def test_case1_full_scale_observation(self):
        cfg = case1_config()
        env = WellControlEnv(cfg)
        obs = env.reset(sample_g1(np.random.default_rng(2), cfg.fine_grid))
        assert obs.shape == (93,)
        np.testing.assert_array_equal(obs[:31], 0.0)  # producer saturations at s0

    def test_case2_full_scale_observation_length(self):
        cfg = case2_config()
        env = WellControlEnv(cfg)
        obs = env.reset(constant_field(cfg.fine_grid, 2.41, "log-permeability"))
        assert obs.shape == (35,)

    def test_coarse_internal_grid_keeps_fine_observation(self, small_config, sample_small):
        env = WellControlEnv(small_config.at_fidelity(0.25))
        assert env.coarse_grid.nx == 3
        obs = env.reset(sample_small)
        assert obs.shape == (small_config.n_obs,)

    def test_observation_is_pure(self, small_config, sample_small):
        env = WellControlEnv(small_config)
        env.reset(sample_small)
        a = env.observe()
        b = env.observe()
        np.testing.assert_array_equal(a, b)

    def test_requires_fine_grid_sample(self, small_config):
        env = WellControlEnv(small_config)
        wrong = sample_g1(np.random.default_rng(0), case1_config(nx=7, ny=7).fine_grid)
        with pytest.raises(ContractError):
            env.reset(wrong)


class TestStep:
    def test_episode_rewards_and_monotone_recovery(self, small_config, sample_small):
        env = WellControlEnv(small_config)
        env.reset(sample_small)
        rng = np.random.default_rng(3)
        last = 0.0
        total = 0.0
        while not env.done:
            res = env.step(rng.uniform(0.001, 1.0, small_config.n_actions))
            assert res.reward >= 0.0
            total += res.reward
            assert res.info["recovery_factor"] == pytest.approx(total)
            assert res.info["recovery_factor"] >= last
            last = res.info["recovery_factor"]
        assert 0.0 <= env.recovery_factor <= 1.0

    def test_step_after_done_raises(self, small_config, sample_small):
        env = WellControlEnv(small_config)
        env.reset(sample_small)
        for _ in range(small_config.control_steps):
            env.step(np.ones(small_config.n_actions))
        with pytest.raises(ContractError):
            env.step(np.ones(small_config.n_actions))

    def test_beta_one_matches_direct_simulation(self, small_config, sample_small):
        cfg = small_config
        env = WellControlEnv(cfg)
        env.reset(sample_small)
        result = env.step(np.ones(cfg.n_actions))

        # the same control step straight on the simulator
        g = cfg.fine_grid
        wells = well_layout(cfg)
        model = ReservoirModel(
            g,
            ScalarField(g, np.exp(sample_small.values), "permeability"),
            constant_field(g, cfg.porosity, "porosity"),
            cfg.viscosity,
            wells,
        )
        state = initial_state(model, 0.0)
        rates = action_to_flows(np.ones(cfg.n_actions), wells)
        new_state, produced = run_control_step(state, model, rates, cfg.step_duration)
        assert result.reward == produced / (cfg.porosity * cfg.lx * cfg.ly)
        prod = np.array(wells.producers)
        np.testing.assert_array_equal(
            result.observation[: cfg.n_producers], new_state.saturation.values[prod]
        )

    def test_deterministic_rollouts(self, small_config, sample_small):
        returns = [
            episode_return(base_policy_for(small_config), sample_small, small_config)
            for _ in range(2)
        ]
        assert returns[0] == returns[1]
        assert 0.0 < returns[0] <= 1.0

    def test_trace_export(self, small_config, sample_small, tmp_path):
        env = WellControlEnv(small_config)
        env.reset(sample_small)
        while not env.done:
            env.step(np.ones(small_config.n_actions))
        path = tmp_path / "trace.csv"
        env.export_trace(path)
        lines = path.read_text().strip().splitlines()
        expected = small_config.control_steps * small_config.n_actions
        assert len(lines) == 1 + expected
        assert lines[0] == "step,well_id,rate,saturation,pressure,reward"


class TestCoarseFidelity:
    @pytest.mark.parametrize("beta", [0.25, 0.5, 1.0])
    def test_returns_comparable_across_fidelities(self, small_config, sample_small, beta):
        cfg = small_config.at_fidelity(beta)
        r = episode_return(base_policy_for(cfg), sample_small, cfg)
        assert 0.0 < r <= 1.0

    def test_flow_restriction_preserves_totals(self, small_config, sample_small):
        env = WellControlEnv(small_config.at_fidelity(0.4))
        env.reset(sample_small)
        fine_rates = action_to_flows(
            np.random.default_rng(0).uniform(0.001, 1, small_config.n_actions),
            env.fine_wells,
        )
        coarse = env._restrict_rates(fine_rates)
        assert coarse.sum() == pytest.approx(0.0, abs=1e-12)
        assert coarse[: env._coarse_wells.n_injectors].sum() == pytest.approx(
            small_config.total_rate
        )
