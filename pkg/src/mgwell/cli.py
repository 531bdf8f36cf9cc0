"""Config-driven experiment runner.

One YAML config describes one run: a test case, a framework (single-grid,
fixed or adaptive multi-grid training, the DE benchmark, library building,
or checkpoint evaluation) and the numeric parameters.  Defaults carry the
full-scale reference settings, so a run needs only the case, the framework
and a seed; ``--desk-scale`` swaps in reduced grids, sample counts and
episode budgets that finish on a workstation.

Every run writes a manifest with the fully resolved configuration; re-running
from a manifest reproduces returns.csv bit-identically.
"""

from __future__ import annotations

import argparse
import copy
import csv
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .baseline_de import DeConfig, de_wellcontrol
from .environment import (
    EnvironmentConfig,
    WellControlEnv,
    base_policy_for,
    case1_config,
    case2_config,
    episode_return,
)
from .errors import MgwellError, NumericalError
from .rl_ppo import PpoConfig, load_checkpoint, save_checkpoint
from .scheduler import FidelitySchedule, measure_runtime_ratios, run_training
from .uncertainty import build_sample_library, load_library, save_library

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_NUMERICAL_ERROR = 3

FRAMEWORKS = (
    "single-grid",
    "fixed-multigrid",
    "adaptive-multigrid",
    "de-benchmark",
    "build-library",
    "evaluate",
)

# Full-scale reference defaults per test case.
_CASE_DEFAULTS = {
    1: {
        "environment": {},
        "schedule": {
            "betas": [0.25, 0.5, 1.0],
            "episode_limits": [25000, 50000, 75000],
            "window": 25,
            "tolerance": 0.2,
        },
        "ppo": {
            "n_actors": 64, "n_steps": 40, "minibatch_size": 16, "epochs": 20,
            "gamma": 0.99, "clip_eps": 0.1, "learning_rate": 3e-6,
            "hidden_sizes": [150, 100, 80],
        },
        "de": {"population": 310, "iterations": 1024,
               "recombination": 0.9, "mutation": [0.5, 1.0]},
    },
    2: {
        "environment": {},
        "schedule": {
            "betas": [0.25, 0.5, 1.0],
            "episode_limits": [50000, 100000, 150000],
            "window": 25,
            "tolerance": 0.2,
        },
        "ppo": {
            "n_actors": 64, "n_steps": 40, "minibatch_size": 16, "epochs": 20,
            "gamma": 0.99, "clip_eps": 0.15, "learning_rate": 1e-4,
            "hidden_sizes": [70, 70, 50],
        },
        "de": {"population": 105, "iterations": 1024,
               "recombination": 0.9, "mutation": [0.5, 1.0]},
    },
}

_COMMON_DEFAULTS = {
    "library": {"n_samples": 1000, "n_clusters": 16, "connectivity_beta": 0.5},
    "runtime_ratio_episodes": 100,
    "de_samples": 3,  # evaluation samples fed to the DE benchmark
}

# Reduced settings that keep a full experiment under an hour on a desktop.
_DESK_SCALE = {
    1: {
        "environment": {"nx": 29, "ny": 29, "n_injectors": 15, "n_producers": 15},
        "schedule": {"episode_limits": [1300, 2600, 4000], "window": 6,
                     "tolerance": 0.05},
        "ppo": {"n_actors": 8, "minibatch_size": 64, "epochs": 10,
                "learning_rate": 3e-4, "clip_eps": 0.2, "hidden_sizes": [64, 64]},
        "library": {"n_samples": 100, "n_clusters": 8},
        "de": {"population": 32, "iterations": 60},
        "runtime_ratio_episodes": 100,
    },
    2: {
        "environment": {"nx": 15, "ny": 45, "n_injectors": 5, "n_producers": 10},
        "schedule": {"episode_limits": [1300, 2600, 4000], "window": 6,
                     "tolerance": 0.05},
        "ppo": {"n_actors": 8, "minibatch_size": 64, "epochs": 10,
                "learning_rate": 3e-4, "clip_eps": 0.2, "hidden_sizes": [64, 64]},
        "library": {"n_samples": 100, "n_clusters": 8},
        "de": {"population": 32, "iterations": 60},
        "runtime_ratio_episodes": 100,
    },
}


class ConfigError(MgwellError):
    pass


def _deep_update(base: dict, extra: dict) -> dict:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def resolve_config(raw: dict, desk_scale: bool = False) -> dict:
    """Merge user config over the per-case defaults into a full run description."""
    if "case" not in raw:
        raise ConfigError("config field 'case' is required (1 or 2)")
    case = raw["case"]
    if case not in (1, 2):
        raise ConfigError(f"case must be 1 or 2, got {case!r}")
    framework = raw.get("framework")
    if framework not in FRAMEWORKS:
        raise ConfigError(
            f"framework must be one of {', '.join(FRAMEWORKS)}; got {framework!r}"
        )
    resolved = copy.deepcopy(_COMMON_DEFAULTS)
    _deep_update(resolved, copy.deepcopy(_CASE_DEFAULTS[case]))
    if desk_scale or raw.get("desk_scale"):
        _deep_update(resolved, copy.deepcopy(_DESK_SCALE[case]))
        resolved["desk_scale"] = True
    user = {k: v for k, v in raw.items() if k != "desk_scale"}
    _deep_update(resolved, copy.deepcopy(user))
    resolved.setdefault("seed", 0)
    resolved.setdefault("output", "runs/latest")
    if framework == "single-grid":
        sched = resolved["schedule"]
        sched["betas"] = [1.0]
        sched["episode_limits"] = [sched["episode_limits"][-1]]
        sched["window"] = None
        sched["tolerance"] = 0.0
    elif framework == "fixed-multigrid":
        resolved["schedule"]["window"] = None
        resolved["schedule"]["tolerance"] = 0.0
    return resolved


def _environment_config(resolved: dict) -> EnvironmentConfig:
    factory = case1_config if resolved["case"] == 1 else case2_config
    return factory(**resolved.get("environment", {}))


def _schedule(resolved: dict) -> FidelitySchedule:
    sched = resolved["schedule"]
    window = sched.get("window")
    return FidelitySchedule(
        betas=tuple(float(b) for b in sched["betas"]),
        episode_limits=tuple(int(e) for e in sched["episode_limits"]),
        window=float("inf") if window in (None, "inf") else float(window),
        tolerance=float(sched.get("tolerance", 0.0)),
    )


def _ppo_config(resolved: dict) -> PpoConfig:
    ppo = dict(resolved["ppo"])
    ppo["hidden_sizes"] = tuple(ppo.get("hidden_sizes", (64, 64)))
    return PpoConfig(**ppo)


def _de_config(resolved: dict) -> DeConfig:
    de = dict(resolved["de"])
    de["mutation"] = tuple(de.get("mutation", (0.5, 1.0)))
    de["seed"] = int(resolved["seed"])
    return DeConfig(**de)


def _write_manifest(resolved: dict, outdir: Path):
    manifest = copy.deepcopy(resolved)
    manifest["code_version"] = __version__
    (outdir / "manifest.yaml").write_text(yaml.safe_dump(manifest, sort_keys=True))


def _library_path(resolved: dict, outdir: Path) -> Path:
    return Path(resolved.get("library_path", outdir.parent / "library"))


def _load_or_build_library(resolved, config, outdir, workers):
    path = _library_path(resolved, outdir)
    if (path / "manifest.json").exists():
        return load_library(path)
    library = build_sample_library(
        config,
        n_samples=int(resolved["library"]["n_samples"]),
        n_clusters=int(resolved["library"]["n_clusters"]),
        seed=int(resolved["seed"]),
        connectivity_beta=float(resolved["library"]["connectivity_beta"]),
        workers=workers,
    )
    save_library(library, path)
    return library


def _plot_returns(report, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    episodes = report.history.episodes
    ax.plot(episodes, report.history.returns, marker=".", lw=1)
    for e in report.switch_episodes[:-1]:
        ax.axvline(e, color="gray", ls="--", lw=0.8)
    ax.set_xlabel("episodes")
    ax.set_ylabel("policy return (recovery factor)")

    equivalent = report.history.equivalent_episodes
    if episodes and equivalent[-1] > 0:
        sec = ax.secondary_xaxis(
            "top",
            functions=(
                lambda x: np.interp(x, episodes, equivalent),
                lambda q: np.interp(q, equivalent, episodes),
            ),
        )
        sec.set_xlabel("equivalent fine-grid episodes")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def evaluate_checkpoint(agent, library, config: EnvironmentConfig, outdir: Path):
    """Deterministic rollouts of a checkpointed policy on the held-out
    samples at the finest grid; emits eval.csv and controls.csv."""
    fine = config.at_fidelity(1.0)
    rows, control_rows = [], []
    for sample_id, fld in zip(library.eval_ids, library.evaluation_fields):
        env = WellControlEnv(fine)
        obs = env.reset(fld)
        step = 0
        while not env.done:
            action = agent.act_deterministic(obs)
            for well_id, w in enumerate(action):
                control_rows.append([sample_id, step, well_id, f"{w:.8f}"])
            obs = env.step(action).observation
            step += 1
        rows.append([sample_id, f"{env.recovery_factor:.12f}"])
    with open(outdir / "eval.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "recovery_factor"])
        writer.writerows(rows)
    with open(outdir / "controls.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "step", "well_id", "weight"])
        writer.writerows(control_rows)
    return rows


def run_experiment(resolved: dict, workers: int = 1) -> int:
    outdir = Path(resolved["output"])
    outdir.mkdir(parents=True, exist_ok=True)
    _write_manifest(resolved, outdir)
    framework = resolved["framework"]
    config = _environment_config(resolved)
    seed = int(resolved["seed"])

    if framework == "build-library":
        library = build_sample_library(
            config,
            n_samples=int(resolved["library"]["n_samples"]),
            n_clusters=int(resolved["library"]["n_clusters"]),
            seed=seed,
            connectivity_beta=float(resolved["library"]["connectivity_beta"]),
            workers=workers,
        )
        save_library(library, _library_path(resolved, outdir))
        return EXIT_OK

    library = _load_or_build_library(resolved, config, outdir, workers)

    if framework == "de-benchmark":
        de_config = _de_config(resolved)
        n_samples = int(resolved["de_samples"])
        rows = []
        for sample_id, fld in list(zip(library.eval_ids, library.evaluation_fields))[:n_samples]:
            base = episode_return(base_policy_for(config), fld, config.at_fidelity(1.0))
            best, _, history = de_wellcontrol(fld, config, de_config, workers=workers)
            evaluations = de_config.population * (len(history))
            rows.append([sample_id, f"{best:.12f}", f"{base:.12f}", evaluations, de_config.seed])
        with open(outdir / "de_benchmark.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "best_recovery", "base_recovery", "evaluations", "seed"])
            writer.writerows(rows)
        return EXIT_OK

    if framework == "evaluate":
        checkpoint = resolved.get("checkpoint")
        if not checkpoint or not Path(checkpoint).exists():
            raise ConfigError(f"evaluate needs an existing checkpoint, got {checkpoint!r}")
        agent = load_checkpoint(checkpoint, _ppo_config(resolved))
        if agent.params.obs_dim != config.n_obs:
            raise ConfigError(
                f"checkpoint expects {agent.params.obs_dim} observations, "
                f"environment provides {config.n_obs}"
            )
        evaluate_checkpoint(agent, library, config, outdir)
        return EXIT_OK

    # training frameworks
    schedule = _schedule(resolved)
    ppo_config = _ppo_config(resolved)
    if "runtime_ratios" in resolved:
        ratios = {float(k): float(v) for k, v in resolved["runtime_ratios"].items()}
    else:
        ratios = measure_runtime_ratios(
            config,
            schedule.betas,
            library.training_fields[0],
            episodes_per_fidelity=int(resolved["runtime_ratio_episodes"]),
        )
        # pin the measured ratios so a rerun from the manifest is bit-identical
        resolved["runtime_ratios"] = {str(k): float(v) for k, v in ratios.items()}
        _write_manifest(resolved, outdir)
    report = run_training(
        schedule,
        ppo_config,
        config,
        library.training_fields,
        seed=seed,
        runtime_ratios=ratios,
        checkpoint_dir=outdir,
        progress=lambda lvl, beta, e, r: print(
            f"[beta={beta}] episodes={e} return={r:.4f}", flush=True
        ),
    )
    report.save_returns_csv(outdir / "returns.csv")
    save_checkpoint(report.agent, outdir / "checkpoint_final.npz")
    with open(outdir / "ratios.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["beta", "runtime_ratio"])
        for beta, ratio in sorted(report.runtime_ratios.items()):
            writer.writerow([beta, f"{ratio:.6f}"])
    evaluate_checkpoint(report.agent, library, config, outdir)
    _plot_returns(report, outdir / "returns.svg")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mgwell",
        description="Adaptive multi-grid RL experiments for robust well control",
    )
    parser.add_argument("--config", required=True, help="YAML experiment config (or a manifest)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument(
        "--workers", type=int,
        default=int(os.environ.get("MGRL_WORKERS", os.cpu_count() or 1)),
    )
    parser.add_argument("--output", default=None, help="override the output directory")
    parser.add_argument(
        "--desk-scale", action="store_true",
        help="apply reduced grid/sample/episode settings",
    )
    args = parser.parse_args(argv)

    try:
        raw = yaml.safe_load(Path(args.config).read_text())
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a mapping")
        if args.seed is not None:
            raw["seed"] = args.seed
        if args.output is not None:
            raw["output"] = args.output
        resolved = resolve_config(raw, desk_scale=args.desk_scale)
    except (ConfigError, OSError, yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except (TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR

    try:
        return run_experiment(resolved, workers=args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
