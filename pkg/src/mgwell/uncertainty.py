"""Permeability uncertainty models and the clustering that picks training
samples.

Case 1 draws two-valued channel fields: a straight high-permeability band
crossing the domain, parameterized by its width and edge offsets.  Case 2
draws from an ordinary-kriging posterior conditioned on equal observed
log-permeability at every well, with an anisotropic exponential kernel
evaluated in coordinates rotated clockwise by pi/8.

Sample selection follows a dynamics-aware pipeline: connectivity distances
between fields (squared differences of base-policy saturation trajectories
at the producer cells, integrated in time), classical MDS into the plane,
then k-means; training fields are the per-cluster members nearest the
centers and evaluation fields are random per-cluster draws.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .environment import EnvironmentConfig, WellControlEnv, base_policy_for, well_layout
from .errors import ContractError, NumericalError
from .grid import CartesianGrid, ScalarField, load_field_binary, save_field_binary

CHANNEL_PERM = 245.0  # mD
BACKGROUND_PERM = 0.14  # mD
CHANNEL_WIDTH_RANGE = (120.0, 360.0)  # ft

KRIGING_OBSERVED_LOGPERM = 2.41
KRIGING_SIGMA2 = 25.0
KRIGING_LENGTHS = (620.0, 62.0)  # ft, along / across the rotated axes
KRIGING_ROTATION = np.pi / 8  # clockwise
KRIGING_JITTER = 1e-10


# ---------------------------------------------------------------------------
# Case 1: channel fields
# ---------------------------------------------------------------------------

def sample_channel_params(rng: np.random.Generator, domain_length: float):
    """(width, left offset, right offset) of one channel draw."""
    w = rng.uniform(*CHANNEL_WIDTH_RANGE)
    l1 = rng.uniform(0.0, domain_length - w)
    l2 = rng.uniform(0.0, domain_length - w)
    return w, l1, l2


def channel_field(grid: CartesianGrid, w: float, l1: float, l2: float) -> ScalarField:
    """Two-valued log-permeability field with a straight channel.

    Coordinates are cell centers with y measured from the top edge; the
    channel occupies (l2-l1) x/L + l1 <= y <= the same + w, with L the
    horizontal domain length.
    """
    xs = (np.arange(grid.nx) + 0.5) * grid.dx
    ys = (np.arange(grid.ny) + 0.5) * grid.dy
    x, y = np.meshgrid(xs, ys)
    top = (l2 - l1) * x / grid.lx + l1
    inside = (top <= y) & (y <= top + w)
    values = np.where(inside, np.log(CHANNEL_PERM), np.log(BACKGROUND_PERM))
    return ScalarField(grid, values.ravel(), "log-permeability")


def sample_g1(rng: np.random.Generator, grid: CartesianGrid) -> ScalarField:
    w, l1, l2 = sample_channel_params(rng, grid.ly)
    return channel_field(grid, w, l1, l2)


# ---------------------------------------------------------------------------
# Case 2: ordinary-kriging posterior
# ---------------------------------------------------------------------------

def _rotate_clockwise(coords: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, s], [-s, c]])
    return coords @ rot.T


def _exp_kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Anisotropic exponential kernel on already-rotated coordinates."""
    l1, l2 = KRIGING_LENGTHS
    d1 = (a[:, None, 0] - b[None, :, 0]) / l1
    d2 = (a[:, None, 1] - b[None, :, 1]) / l2
    return np.exp(-np.sqrt(d1 * d1 + d2 * d2))


@dataclass
class KrigingModel:
    """Ordinary-kriging posterior for the case-2 log-permeability field."""

    obs_coords: np.ndarray  # rotated well coordinates, (n, 2)
    obs_values: np.ndarray  # (n,)
    k_inv: np.ndarray
    mu_hat: float

    @classmethod
    def from_locations(cls, coords: np.ndarray, values: np.ndarray) -> "KrigingModel":
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        values = np.asarray(values, dtype=float).ravel()
        rotated = _rotate_clockwise(coords, KRIGING_ROTATION)
        kmat = _exp_kernel(rotated, rotated)
        kmat[np.diag_indices_from(kmat)] += KRIGING_JITTER
        try:
            k_inv = np.linalg.inv(kmat)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular kriging kernel matrix: {exc}") from exc
        ones = np.ones(len(values))
        denom = ones @ k_inv @ ones
        mu_hat = float(ones @ k_inv @ values / denom)
        return cls(rotated, values, k_inv, mu_hat)

    @classmethod
    def for_case2(cls, config: EnvironmentConfig) -> "KrigingModel":
        """Model conditioned on equal log-permeability at every well cell."""
        grid = config.fine_grid
        wells = well_layout(config)
        cells = list(wells.injectors) + list(wells.producers)
        coords = np.array(
            [grid.cell_center(c % grid.nx, c // grid.nx) for c in cells]
        )
        values = np.full(len(cells), KRIGING_OBSERVED_LOGPERM)
        return cls.from_locations(coords, values)


def kriging_posterior(model: KrigingModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and standard deviation at location(s) x (domain coords)."""
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    rotated = _rotate_clockwise(pts, KRIGING_ROTATION)
    kx = _exp_kernel(model.obs_coords, rotated)  # (n, m)
    ones = np.ones(len(model.obs_values))
    resid = model.obs_values - model.mu_hat
    mean = model.mu_hat + kx.T @ model.k_inv @ resid
    denom = ones @ model.k_inv @ ones
    lagr = (1.0 - ones @ model.k_inv @ kx) ** 2 / denom
    var = KRIGING_SIGMA2 * (1.0 - np.einsum("im,im->m", kx, model.k_inv @ kx) + lagr)
    var = np.maximum(var, 0.0)
    if np.asarray(x).ndim == 1:
        return float(mean[0]), float(np.sqrt(var[0]))
    return mean, np.sqrt(var)


class KrigingFieldSampler:
    """Draws whole-grid fields from the kriging posterior.

    The posterior covariance over all cell centers is factorized once with a
    symmetric eigendecomposition (negative eigenvalues clipped to zero), so
    repeated draws are cheap.
    """

    def __init__(self, model: KrigingModel, grid: CartesianGrid):
        self.model = model
        self.grid = grid
        xs = (np.arange(grid.nx) + 0.5) * grid.dx
        ys = (np.arange(grid.ny) + 0.5) * grid.dy
        x, y = np.meshgrid(xs, ys)
        pts = np.column_stack([x.ravel(), y.ravel()])
        rotated = _rotate_clockwise(pts, KRIGING_ROTATION)
        kx = _exp_kernel(model.obs_coords, rotated)  # (n, N)
        ones = np.ones(len(model.obs_values))
        resid = model.obs_values - model.mu_hat
        self.mean = model.mu_hat + kx.T @ model.k_inv @ resid
        denom = ones @ model.k_inv @ ones
        u = 1.0 - ones @ model.k_inv @ kx  # (N,)
        cov = KRIGING_SIGMA2 * (
            _exp_kernel(rotated, rotated)
            - kx.T @ model.k_inv @ kx
            + np.outer(u, u) / denom
        )
        cov[np.diag_indices_from(cov)] += KRIGING_JITTER
        evals, evecs = np.linalg.eigh(cov)
        if evals.min() < -1e-6 * max(1.0, evals.max()):
            raise NumericalError(f"posterior covariance indefinite (min eig {evals.min():.3e})")
        self._factor = evecs * np.sqrt(np.clip(evals, 0.0, None))

    def sample(self, rng: np.random.Generator) -> ScalarField:
        z = rng.standard_normal(self.grid.n_cells)
        values = self.mean + self._factor @ z
        return ScalarField(self.grid, values, "log-permeability")


def sample_g2(sampler: KrigingFieldSampler, rng: np.random.Generator) -> ScalarField:
    return sampler.sample(rng)


# ---------------------------------------------------------------------------
# Connectivity distance, MDS, k-means
# ---------------------------------------------------------------------------

def saturation_trajectory(
    log_permeability: ScalarField, config: EnvironmentConfig
) -> np.ndarray:
    """Producer-cell saturations at each control-step boundary, base policy.

    Shape (control_steps, n_producers); row m holds the values at t_{m+1}.
    """
    env = WellControlEnv(config)
    env.reset(log_permeability)
    policy = base_policy_for(config)
    np_ = config.n_producers
    rows = []
    while not env.done:
        obs = env.step(policy(None)).observation
        rows.append(obs[:np_].copy())
    return np.array(rows)


def trajectory_distance(traj_i: np.ndarray, traj_j: np.ndarray, dt: float) -> float:
    """Rectangle-rule time integral of the squared trajectory difference."""
    diff = traj_i - traj_j
    return float((diff * diff).sum() * dt)


def connectivity_distance(
    k_i: ScalarField, k_j: ScalarField, config: EnvironmentConfig
) -> float:
    """Dynamics-aware distance between two permeability fields."""
    ti = saturation_trajectory(k_i, config)
    tj = saturation_trajectory(k_j, config)
    return trajectory_distance(ti, tj, config.step_duration)


def mds_embed(distances: np.ndarray, dim: int = 2) -> np.ndarray:
    """Classical multidimensional scaling of a symmetric distance matrix."""
    d = np.asarray(distances, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ContractError("distance matrix must be square")
    if not np.allclose(d, d.T) or np.abs(np.diag(d)).max() > 1e-12:
        raise ContractError("distance matrix must be symmetric with zero diagonal")
    n = d.shape[0]
    j = np.eye(n) - np.ones((n, n)) / n
    b = -0.5 * j @ (d * d) @ j
    evals, evecs = np.linalg.eigh(b)
    order = np.argsort(evals)[::-1][:dim]
    coords = evecs[:, order] * np.sqrt(np.clip(evals[order], 0.0, None))
    return coords


def kmeans_cluster(
    points: np.ndarray, n_clusters: int, rng: np.random.Generator, max_iter: int = 300
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding; ties go to the lowest index."""
    pts = np.asarray(points, dtype=float)
    n = pts.shape[0]
    if n < n_clusters:
        raise ContractError(f"cannot form {n_clusters} clusters from {n} points")

    # k-means++ initialization
    centers = np.empty((n_clusters, pts.shape[1]))
    centers[0] = pts[rng.integers(n)]
    closest = ((pts - centers[0]) ** 2).sum(axis=1)
    for c in range(1, n_clusters):
        total = closest.sum()
        if total == 0.0:
            centers[c] = pts[rng.integers(n)]
        else:
            centers[c] = pts[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, ((pts - centers[c]) ** 2).sum(axis=1))

    assignments = np.full(n, -1)
    for _ in range(max_iter):
        d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assignments = d2.argmin(axis=1)  # argmin takes the lowest index on ties
        if np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments
        for c in range(n_clusters):
            members = pts[assignments == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    return centers, assignments


def kmeans_objective(points, centers, assignments) -> float:
    return float(((points - centers[assignments]) ** 2).sum())


# ---------------------------------------------------------------------------
# Sample library
# ---------------------------------------------------------------------------

@dataclass
class SampleLibrary:
    """N log-permeability fields with cluster structure and role labels."""

    fields: list[ScalarField]
    coords: np.ndarray  # (N, 2) MDS embedding
    assignments: np.ndarray  # (N,) cluster ids
    train_ids: list[int]
    eval_ids: list[int]
    seed: int

    @property
    def training_fields(self) -> list[ScalarField]:
        return [self.fields[i] for i in self.train_ids]

    @property
    def evaluation_fields(self) -> list[ScalarField]:
        return [self.fields[i] for i in self.eval_ids]


def _draw_fields(case: int, n: int, config: EnvironmentConfig, rng) -> list[ScalarField]:
    grid = config.fine_grid
    if case == 1:
        return [sample_g1(rng, grid) for _ in range(n)]
    sampler = KrigingFieldSampler(KrigingModel.for_case2(config), grid)
    return [sample_g2(sampler, rng) for _ in range(n)]


def build_sample_library(
    config: EnvironmentConfig,
    n_samples: int = 1000,
    n_clusters: int = 16,
    seed: int = 0,
    connectivity_beta: float = 0.5,
    workers: int = 1,
) -> SampleLibrary:
    """Sample fields, cluster them by flow response, pick train/eval sets.

    The base-policy trajectories behind the connectivity distances run at a
    reduced fidelity (default beta=0.5): distances only feed the clustering,
    so a cheaper ordinally-consistent proxy is sufficient.
    """
    rng = np.random.default_rng(seed)
    fields = _draw_fields(config.case, n_samples, config, rng)

    sim_config = config.at_fidelity(connectivity_beta)
    if workers > 1:
        from multiprocessing import Pool

        with Pool(workers) as pool:
            trajectories = pool.starmap(
                saturation_trajectory, [(f, sim_config) for f in fields]
            )
    else:
        trajectories = [saturation_trajectory(f, sim_config) for f in fields]

    flat = np.array([t.ravel() for t in trajectories])
    # D_ij = dt * ||flat_i - flat_j||^2, computed without the N^2 python loop
    sq = (flat * flat).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * flat @ flat.T
    d = np.maximum(d, 0.0) * sim_config.step_duration
    np.fill_diagonal(d, 0.0)
    d = 0.5 * (d + d.T)

    coords = mds_embed(d)
    centers, assignments = kmeans_cluster(coords, n_clusters, rng)

    train_ids, eval_ids = [], []
    for c in range(n_clusters):
        members = np.flatnonzero(assignments == c)
        if len(members) == 0:
            continue
        dist_to_center = ((coords[members] - centers[c]) ** 2).sum(axis=1)
        train = int(members[dist_to_center.argmin()])
        train_ids.append(train)
        pool_ids = [m for m in members if m != train] or [train]
        eval_ids.append(int(pool_ids[rng.integers(len(pool_ids))]))
    return SampleLibrary(fields, coords, assignments, train_ids, eval_ids, seed)


def save_library(library: SampleLibrary, path) -> None:
    """Persist as a directory: one binary field per sample plus a manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, fld in enumerate(library.fields):
        name = f"sample_{i:04d}.field"
        save_field_binary(fld, path / name)
        role = "train" if i in library.train_ids else (
            "eval" if i in library.eval_ids else "pool"
        )
        entries.append(
            {
                "id": i,
                "file": name,
                "cluster": int(library.assignments[i]),
                "role": role,
            }
        )
    manifest = {
        "seed": library.seed,
        "train_ids": list(map(int, library.train_ids)),
        "eval_ids": list(map(int, library.eval_ids)),
        "coords": library.coords.tolist(),
        "samples": entries,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_library(path) -> SampleLibrary:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    fields = [
        load_field_binary(path / entry["file"], "log-permeability")
        for entry in manifest["samples"]
    ]
    assignments = np.array([entry["cluster"] for entry in manifest["samples"]])
    return SampleLibrary(
        fields=fields,
        coords=np.array(manifest["coords"]),
        assignments=assignments,
        train_ids=manifest["train_ids"],
        eval_ids=manifest["eval_ids"],
        seed=manifest["seed"],
    )
