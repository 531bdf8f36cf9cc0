import numpy as np
import pytest

from mgwell.environment import case1_config, case2_config, well_layout
from mgwell.errors import ContractError
from mgwell.grid import CartesianGrid
from mgwell.uncertainty import (
    BACKGROUND_PERM,
    CHANNEL_PERM,
    CHANNEL_WIDTH_RANGE,
    KRIGING_JITTER,
    KRIGING_OBSERVED_LOGPERM,
    KRIGING_ROTATION,
    KRIGING_SIGMA2,
    KrigingFieldSampler,
    KrigingModel,
    build_sample_library,
    channel_field,
    connectivity_distance,
    kmeans_cluster,
    kmeans_objective,
    kriging_posterior,
    load_library,
    mds_embed,
    sample_channel_params,
    sample_g1,
    sample_g2,
    save_library,
    trajectory_distance,
)
from mgwell.uncertainty import _exp_kernel, _rotate_clockwise


class TestChannelFields:
    def test_two_valued(self):
        g = CartesianGrid(20, 20, 1200.0, 1200.0)
        fld = channel_field(g, 240.0, 300.0, 500.0)
        vals = set(np.round(fld.values, 12))
        assert vals == {
            round(np.log(CHANNEL_PERM), 12),
            round(np.log(BACKGROUND_PERM), 12),
        }

    def test_horizontal_band_when_offsets_equal(self):
        g = CartesianGrid(10, 100, 1000.0, 1000.0)
        fld = channel_field(g, 200.0, 400.0, 400.0).as_grid()
        # every column identical; band spans y in [400, 600]
        for col in range(1, 10):
            np.testing.assert_array_equal(fld[:, col], fld[:, 0])
        ys = (np.arange(100) + 0.5) * 10.0
        inside = (ys >= 400.0) & (ys <= 600.0)
        np.testing.assert_array_equal(fld[:, 0] == np.log(CHANNEL_PERM), inside)

    def test_sampled_params_keep_channel_inside(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            w, l1, l2 = sample_channel_params(rng, 1200.0)
            assert CHANNEL_WIDTH_RANGE[0] <= w <= CHANNEL_WIDTH_RANGE[1]
            assert 0.0 <= l1 <= 1200.0 - w
            assert 0.0 <= l2 <= 1200.0 - w

    def test_mean_channel_area_fraction(self):
        # widths are uniform on (120, 360) over a 1200 ft domain, so the
        # expected channel fraction is 240/1200 = 0.2
        g = CartesianGrid(61, 61, 1200.0, 1200.0)
        rng = np.random.default_rng(1)
        logc = np.log(CHANNEL_PERM)
        frac = np.mean(
            [(sample_g1(rng, g).values == logc).mean() for _ in range(2000)]
        )
        assert frac == pytest.approx(0.2, abs=0.01)


def _posterior_oracle(obs_coords, obs_values, query):
    """Ordinary-kriging mean/variance via direct solves, point by point."""
    rot = _rotate_clockwise(np.atleast_2d(obs_coords), KRIGING_ROTATION)
    kmat = _exp_kernel(rot, rot) + KRIGING_JITTER * np.eye(len(obs_values))
    ones = np.ones(len(obs_values))
    k_inv_ones = np.linalg.solve(kmat, ones)
    mu = ones @ np.linalg.solve(kmat, obs_values) / (ones @ k_inv_ones)
    out = []
    for pt in np.atleast_2d(query):
        kx = _exp_kernel(rot, _rotate_clockwise(pt[None, :], KRIGING_ROTATION))[:, 0]
        w = np.linalg.solve(kmat, kx)
        mean = mu + w @ (obs_values - mu)
        var = KRIGING_SIGMA2 * (
            1.0 - kx @ w + (1.0 - ones @ w) ** 2 / (ones @ k_inv_ones)
        )
        out.append((mean, max(var, 0.0)))
    return np.array(out)


@pytest.fixture(scope="module")
def model():
    return KrigingModel.for_case2(case2_config())


class TestKriging:
    def test_interpolates_observations(self, model):
        cfg = case2_config()
        grid = cfg.fine_grid
        wells = well_layout(cfg)
        cells = list(wells.injectors) + list(wells.producers)
        assert len(cells) == 21
        pts = np.array([grid.cell_center(c % grid.nx, c // grid.nx) for c in cells])
        mean, std = kriging_posterior(model, pts)
        np.testing.assert_allclose(mean, KRIGING_OBSERVED_LOGPERM, atol=1e-8)
        assert std.max() <= 1e-3

    def test_matches_direct_solve_oracle(self, model):
        cfg = case2_config()
        rng = np.random.default_rng(2)
        query = np.column_stack(
            [rng.uniform(0, cfg.lx, 20), rng.uniform(0, cfg.ly, 20)]
        )
        grid = cfg.fine_grid
        wells = well_layout(cfg)
        cells = list(wells.injectors) + list(wells.producers)
        coords = np.array([grid.cell_center(c % grid.nx, c // grid.nx) for c in cells])
        oracle = _posterior_oracle(
            coords, np.full(21, KRIGING_OBSERVED_LOGPERM), query
        )
        mean, std = kriging_posterior(model, query)
        np.testing.assert_allclose(mean, oracle[:, 0], atol=1e-9)
        np.testing.assert_allclose(std, np.sqrt(oracle[:, 1]), atol=1e-7)

    def test_single_observation_closed_form(self):
        m = KrigingModel.from_locations(np.array([[100.0, 100.0]]), np.array([3.0]))
        assert m.mu_hat == pytest.approx(3.0)
        mean, std = kriging_posterior(m, np.array([5000.0, 100.0]))
        assert mean == pytest.approx(3.0)
        # far field: correlation ~ 0, variance -> sigma^2 * (1 + 1/(1 K^-1 1))
        rot = _rotate_clockwise(
            np.array([[100.0, 100.0], [5000.0, 100.0]]), KRIGING_ROTATION
        )
        k = _exp_kernel(rot[:1], rot[1:])[0, 0]
        expected = KRIGING_SIGMA2 * (1.0 - k * k + (1.0 - k) ** 2)
        assert std**2 == pytest.approx(expected, rel=1e-6)

    def test_variance_nonnegative_everywhere(self, model):
        cfg = case2_config()
        rng = np.random.default_rng(3)
        pts = np.column_stack(
            [rng.uniform(0, cfg.lx, 200), rng.uniform(0, cfg.ly, 200)]
        )
        _, std = kriging_posterior(model, pts)
        assert np.isfinite(std).all()
        assert std.min() >= 0.0


@pytest.fixture(scope="module")
def tiny_case2():
    return case2_config(nx=7, ny=13, n_injectors=3, n_producers=4)


@pytest.fixture(scope="module")
def tiny_sampler(tiny_case2):
    model = KrigingModel.for_case2(tiny_case2)
    return KrigingFieldSampler(model, tiny_case2.fine_grid)


class TestKrigingSampling:
    def test_seed_determinism(self, tiny_sampler):
        a = sample_g2(tiny_sampler, np.random.default_rng(7))
        b = sample_g2(tiny_sampler, np.random.default_rng(7))
        np.testing.assert_array_equal(a.values, b.values)

    def test_samples_pinned_at_well_cells(self, tiny_case2, tiny_sampler):
        wells = well_layout(tiny_case2)
        cells = np.array(list(wells.injectors) + list(wells.producers))
        rng = np.random.default_rng(8)
        for _ in range(5):
            fld = sample_g2(tiny_sampler, rng)
            np.testing.assert_allclose(
                fld.values[cells], KRIGING_OBSERVED_LOGPERM, atol=1e-3
            )

    def test_sample_mean_converges_to_posterior_mean(self, tiny_sampler):
        rng = np.random.default_rng(9)
        draws = np.array([sample_g2(tiny_sampler, rng).values for _ in range(400)])
        err = np.abs(draws.mean(axis=0) - tiny_sampler.mean)
        # per-cell std is at most sqrt(2 sigma2) ~ 7.1; 400 draws give a
        # standard error around 0.35
        assert err.max() <= 1.5


class TestConnectivityDistance:
    def test_two_step_hand_value(self):
        ti = np.array([[0.0], [1.0]])
        tj = np.array([[0.0], [0.0]])
        assert trajectory_distance(ti, tj, 1.0) == 1.0
        assert trajectory_distance(ti, tj, 0.5) == 0.5

    def test_symmetry_and_identity(self):
        rng = np.random.default_rng(4)
        ti, tj = rng.random((2, 5, 3))
        assert trajectory_distance(ti, tj, 2.0) == trajectory_distance(tj, ti, 2.0)
        assert trajectory_distance(ti, ti, 2.0) == 0.0

    def test_field_level_distance(self):
        cfg = case1_config(nx=11, ny=11, n_injectors=4, n_producers=4, beta=0.5)
        a = channel_field(cfg.fine_grid, 240.0, 100.0, 100.0)
        b = channel_field(cfg.fine_grid, 240.0, 800.0, 800.0)
        assert connectivity_distance(a, a, cfg) == 0.0
        dab = connectivity_distance(a, b, cfg)
        assert dab > 0.0
        assert dab == pytest.approx(connectivity_distance(b, a, cfg))


class TestMds:
    def test_equilateral_triangle(self):
        d = np.ones((3, 3)) - np.eye(3)
        coords = mds_embed(d)
        for i in range(3):
            for j in range(i + 1, 3):
                assert np.linalg.norm(coords[i] - coords[j]) == pytest.approx(1.0)

    def test_zero_distances_collapse(self):
        coords = mds_embed(np.zeros((4, 4)))
        np.testing.assert_allclose(coords, 0.0, atol=1e-12)

    def test_recovers_planar_configuration(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(10, 2))
        d = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
        coords = mds_embed(d)
        d2 = np.linalg.norm(coords[:, None] - coords[None, :], axis=2)
        np.testing.assert_allclose(d2, d, atol=1e-8)

    def test_rejects_asymmetric_matrix(self):
        d = np.zeros((3, 3))
        d[0, 1] = 1.0
        with pytest.raises(ContractError):
            mds_embed(d)


class TestKmeans:
    def test_one_cluster_per_point(self):
        pts = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
        centers, assignments = kmeans_cluster(pts, 3, np.random.default_rng(0))
        assert sorted(assignments) == [0, 1, 2]
        assert kmeans_objective(pts, centers, assignments) == pytest.approx(0.0)

    def test_separated_blobs_recovered(self):
        rng = np.random.default_rng(6)
        blobs = [rng.normal(c, 0.1, size=(20, 2)) for c in ((0, 0), (10, 0), (0, 10))]
        pts = np.vstack(blobs)
        _, assignments = kmeans_cluster(pts, 3, np.random.default_rng(1))
        labels = [assignments[i * 20 : (i + 1) * 20] for i in range(3)]
        for group in labels:
            assert len(set(group)) == 1
        assert len({g[0] for g in labels}) == 3

    def test_too_few_points_rejected(self):
        with pytest.raises(ContractError):
            kmeans_cluster(np.zeros((2, 2)), 3, np.random.default_rng(0))


@pytest.fixture(scope="module")
def library():
    cfg = case1_config(nx=11, ny=11, n_injectors=4, n_producers=4)
    return build_sample_library(cfg, n_samples=12, n_clusters=4, seed=3)


class TestSampleLibrary:
    def test_structure(self, library):
        assert len(library.fields) == 12
        assert library.coords.shape == (12, 2)
        assert library.assignments.shape == (12,)
        assert len(library.train_ids) == 4
        assert len(library.eval_ids) == 4
        assert len(library.training_fields) == 4

    def test_one_training_sample_per_cluster(self, library):
        clusters = [library.assignments[i] for i in library.train_ids]
        assert len(set(clusters)) == len(clusters)

    def test_eval_sample_shares_cluster_with_its_train_sample(self, library):
        for t, e in zip(library.train_ids, library.eval_ids):
            assert library.assignments[t] == library.assignments[e]

    def test_train_member_is_nearest_center(self, library):
        for t in library.train_ids:
            c = library.assignments[t]
            members = np.flatnonzero(library.assignments == c)
            center = library.coords[members].mean(axis=0)
            d = ((library.coords[members] - center) ** 2).sum(axis=1)
            assert t == members[d.argmin()]

    def test_save_load_round_trip(self, library, tmp_path):
        save_library(library, tmp_path / "lib")
        back = load_library(tmp_path / "lib")
        assert back.train_ids == library.train_ids
        assert back.eval_ids == library.eval_ids
        np.testing.assert_array_equal(back.assignments, library.assignments)
        for a, b in zip(library.fields, back.fields):
            np.testing.assert_array_equal(a.values, b.values)

    def test_seed_determinism(self):
        cfg = case1_config(nx=11, ny=11, n_injectors=4, n_producers=4)
        a = build_sample_library(cfg, n_samples=8, n_clusters=3, seed=5)
        b = build_sample_library(cfg, n_samples=8, n_clusters=3, seed=5)
        assert a.train_ids == b.train_ids
        np.testing.assert_array_equal(a.coords, b.coords)
