import numpy as np
import pytest
import yaml

from mgwell.cli import (
    EXIT_CONFIG_ERROR,
    EXIT_OK,
    ConfigError,
    main,
    resolve_config,
)


class TestResolveConfig:
    def test_case1_adaptive_defaults(self):
        resolved = resolve_config({"case": 1, "framework": "adaptive-multigrid"})
        assert resolved["schedule"]["betas"] == [0.25, 0.5, 1.0]
        assert resolved["schedule"]["episode_limits"] == [25000, 50000, 75000]
        assert resolved["schedule"]["window"] == 25
        assert resolved["schedule"]["tolerance"] == 0.2
        ppo = resolved["ppo"]
        assert ppo["n_actors"] == 64
        assert ppo["n_steps"] == 40
        assert ppo["minibatch_size"] == 16
        assert ppo["epochs"] == 20
        assert ppo["gamma"] == 0.99
        assert ppo["clip_eps"] == 0.1
        assert ppo["learning_rate"] == 3e-6
        assert ppo["hidden_sizes"] == [150, 100, 80]
        assert resolved["de"]["population"] == 310
        assert resolved["de"]["iterations"] == 1024

    def test_case2_differences(self):
        resolved = resolve_config({"case": 2, "framework": "adaptive-multigrid"})
        assert resolved["schedule"]["episode_limits"] == [50000, 100000, 150000]
        assert resolved["ppo"]["clip_eps"] == 0.15
        assert resolved["ppo"]["learning_rate"] == 1e-4
        assert resolved["ppo"]["hidden_sizes"] == [70, 70, 50]
        assert resolved["de"]["population"] == 105

    def test_single_grid_forces_finest_fidelity(self):
        resolved = resolve_config({"case": 1, "framework": "single-grid"})
        assert resolved["schedule"]["betas"] == [1.0]
        assert resolved["schedule"]["episode_limits"] == [75000]
        assert resolved["schedule"]["window"] is None

    def test_fixed_multigrid_disables_convergence_check(self):
        resolved = resolve_config({"case": 1, "framework": "fixed-multigrid"})
        assert resolved["schedule"]["betas"] == [0.25, 0.5, 1.0]
        assert resolved["schedule"]["window"] is None
        assert resolved["schedule"]["tolerance"] == 0.0

    def test_user_overrides_win(self):
        resolved = resolve_config(
            {
                "case": 1,
                "framework": "adaptive-multigrid",
                "schedule": {"window": 10},
                "ppo": {"learning_rate": 1e-3},
            }
        )
        assert resolved["schedule"]["window"] == 10
        assert resolved["schedule"]["betas"] == [0.25, 0.5, 1.0]  # untouched
        assert resolved["ppo"]["learning_rate"] == 1e-3
        assert resolved["ppo"]["n_actors"] == 64

    def test_desk_scale_reduces_sizes(self):
        resolved = resolve_config(
            {"case": 1, "framework": "adaptive-multigrid"}, desk_scale=True
        )
        assert resolved["environment"]["nx"] == 29
        assert resolved["library"]["n_samples"] == 100
        assert resolved["schedule"]["episode_limits"][-1] < 75000

    def test_missing_case(self):
        with pytest.raises(ConfigError):
            resolve_config({"framework": "single-grid"})

    def test_unknown_framework(self):
        with pytest.raises(ConfigError):
            resolve_config({"case": 1, "framework": "tabu-search"})


def tiny_run_config(tmp_path, output_name="run"):
    return {
        "case": 1,
        "framework": "adaptive-multigrid",
        "seed": 11,
        "output": str(tmp_path / output_name),
        "environment": {"nx": 9, "ny": 9, "n_injectors": 3, "n_producers": 3},
        "schedule": {
            "betas": [0.5, 1.0],
            "episode_limits": [2, 4],
            "window": None,
            "tolerance": 0.0,
        },
        "ppo": {
            "n_actors": 2, "n_steps": 10, "minibatch_size": 10,
            "epochs": 2, "hidden_sizes": [16],
        },
        "library": {"n_samples": 6, "n_clusters": 2, "connectivity_beta": 0.5},
        "runtime_ratio_episodes": 2,
        "de": {"population": 6, "iterations": 2},
        "de_samples": 1,
    }


def write_config(tmp_path, cfg, name="config.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


class TestMain:
    def test_bad_config_file_exit_code(self, tmp_path):
        path = tmp_path / "broken.yaml"
        path.write_text("just a string")
        assert main(["--config", str(path)]) == EXIT_CONFIG_ERROR

    def test_missing_framework_exit_code(self, tmp_path):
        path = write_config(tmp_path, {"case": 1})
        assert main(["--config", str(path)]) == EXIT_CONFIG_ERROR

    def test_training_run_artifacts(self, tmp_path):
        cfg = tiny_run_config(tmp_path)
        path = write_config(tmp_path, cfg)
        assert main(["--config", str(path), "--workers", "1"]) == EXIT_OK
        outdir = tmp_path / "run"
        for name in (
            "manifest.yaml", "returns.csv", "ratios.csv", "returns.svg",
            "checkpoint_final.npz", "checkpoint_beta_0.5.npz",
            "checkpoint_beta_1.0.npz", "eval.csv", "controls.csv",
        ):
            assert (outdir / name).exists(), name
        manifest = yaml.safe_load((outdir / "manifest.yaml").read_text())
        assert "runtime_ratios" in manifest  # pinned for reproducible reruns
        returns = (outdir / "returns.csv").read_text().strip().splitlines()
        assert returns[0] == "iteration,fidelity,episodes,equivalent_episodes,return"
        assert len(returns) >= 3  # at least one iteration per fidelity

    def test_rerun_from_manifest_is_bit_identical(self, tmp_path):
        cfg = tiny_run_config(tmp_path)
        path = write_config(tmp_path, cfg)
        assert main(["--config", str(path), "--workers", "1"]) == EXIT_OK
        first = (tmp_path / "run" / "returns.csv").read_bytes()

        manifest = tmp_path / "run" / "manifest.yaml"
        assert (
            main(
                [
                    "--config", str(manifest),
                    "--output", str(tmp_path / "rerun"),
                    "--workers", "1",
                ]
            )
            == EXIT_OK
        )
        second = (tmp_path / "rerun" / "returns.csv").read_bytes()
        assert first == second

    def test_de_benchmark_run(self, tmp_path):
        cfg = tiny_run_config(tmp_path, output_name="de_run")
        cfg["framework"] = "de-benchmark"
        path = write_config(tmp_path, cfg)
        assert main(["--config", str(path), "--workers", "1"]) == EXIT_OK
        lines = (tmp_path / "de_run" / "de_benchmark.csv").read_text().strip().splitlines()
        assert lines[0] == "sample_id,best_recovery,base_recovery,evaluations,seed"
        assert len(lines) == 2
        _, best, base, _, _ = lines[1].split(",")
        assert float(best) >= float(base)  # seeded equal-weight member floor

    def test_evaluate_framework(self, tmp_path):
        cfg = tiny_run_config(tmp_path)
        path = write_config(tmp_path, cfg)
        assert main(["--config", str(path), "--workers", "1"]) == EXIT_OK

        eval_cfg = tiny_run_config(tmp_path, output_name="eval_run")
        eval_cfg["framework"] = "evaluate"
        eval_cfg["checkpoint"] = str(tmp_path / "run" / "checkpoint_final.npz")
        eval_path = write_config(tmp_path, eval_cfg, name="eval.yaml")
        assert main(["--config", str(eval_path), "--workers", "1"]) == EXIT_OK
        lines = (tmp_path / "eval_run" / "eval.csv").read_text().strip().splitlines()
        assert lines[0] == "sample_id,recovery_factor"
        assert len(lines) == 3  # one row per held-out cluster sample
        for line in lines[1:]:
            assert 0.0 <= float(line.split(",")[1]) <= 1.0

    def test_evaluate_missing_checkpoint(self, tmp_path):
        cfg = tiny_run_config(tmp_path, output_name="bad_eval")
        cfg["framework"] = "evaluate"
        cfg["checkpoint"] = str(tmp_path / "nope.npz")
        path = write_config(tmp_path, cfg, name="bad_eval.yaml")
        assert main(["--config", str(path), "--workers", "1"]) == EXIT_CONFIG_ERROR

    def test_build_library_framework(self, tmp_path):
        cfg = tiny_run_config(tmp_path, output_name="lib_run")
        cfg["framework"] = "build-library"
        cfg["library_path"] = str(tmp_path / "the_library")
        path = write_config(tmp_path, cfg, name="lib.yaml")
        assert main(["--config", str(path), "--workers", "1"]) == EXIT_OK
        assert (tmp_path / "the_library" / "manifest.json").exists()

    def test_seed_override(self, tmp_path):
        cfg = tiny_run_config(tmp_path, output_name="seed_run")
        path = write_config(tmp_path, cfg, name="seed.yaml")
        assert main(["--config", str(path), "--seed", "99", "--workers", "1"]) == EXIT_OK
        manifest = yaml.safe_load(
            (tmp_path / "seed_run" / "manifest.yaml").read_text()
        )
        assert manifest["seed"] == 99
