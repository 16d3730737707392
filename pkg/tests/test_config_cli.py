import os

import pytest

from touchfuse.cli import EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_OK, main
from touchfuse.config import parse_config_text, validate_config
from touchfuse.errors import ConfigError, DependencyError
from touchfuse.pipeline import run_pipeline

MINIMAL = """
[scene]
dataset = data
out = out
"""


def write_config(tmp_path, text=MINIMAL, make_dataset=True):
    path = tmp_path / "scene.cfg"
    path.write_text(text)
    if make_dataset:
        os.makedirs(tmp_path / "data", exist_ok=True)
    return path


class TestConfigParsing:
    def test_minimal_file_fills_defaults(self, tmp_path):
        cfg = validate_config(write_config(tmp_path))
        assert cfg.get("sim", "shape") == "sphere"
        assert cfg.get("march", "step_fraction") == 0.9
        assert cfg.get("loss", "depth_weight") == 1.0
        assert cfg.get("kernel", "prior_mean") == "auto"
        assert cfg.seed == 0

    def test_unknown_key_line_numbered(self):
        with pytest.raises(ConfigError, match="line 4.*frobnicate"):
            parse_config_text("\n[scene]\ndataset = d\nfrobnicate = 1\nout = o\n")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match=r"line 2.*\[sorcery\]"):
            parse_config_text("\n[sorcery]\nx = 1\n")

    def test_duplicate_key_names_key(self):
        text = "[scene]\ndataset = a\nout = b\n[march]\nmax_steps = 5\nmax_steps = 9\n"
        with pytest.raises(ConfigError, match="duplicate key 'max_steps'"):
            parse_config_text(text)

    def test_out_of_range_step_fraction(self):
        text = "[scene]\ndataset = a\nout = b\n[march]\nstep_fraction = 1.5\n"
        with pytest.raises(ConfigError, match="step_fraction.*out of range"):
            parse_config_text(text)

    def test_missing_required_key(self):
        with pytest.raises(ConfigError, match="missing required key 'out'"):
            parse_config_text("[scene]\ndataset = a\n")

    def test_bad_number(self):
        text = "[scene]\ndataset = a\nout = b\nseed = seven\n"
        with pytest.raises(ConfigError, match="line 4"):
            parse_config_text(text)

    def test_color_needs_three_components(self):
        text = "[scene]\ndataset = a\nout = b\n[sim]\nobject_color = 0.5 0.5\n"
        with pytest.raises(ConfigError, match="three color components"):
            parse_config_text(text)
        text = "[scene]\ndataset = a\nout = b\n[sim]\nbackground_color = 0.5 0.5 1.5\n"
        with pytest.raises(ConfigError, match="three color components"):
            parse_config_text(text)

    def test_missing_dataset_directory(self, tmp_path):
        path = write_config(tmp_path, make_dataset=False)
        with pytest.raises(ConfigError, match="does not exist"):
            validate_config(path)

    def test_missing_dataset_ok_when_simulating(self, tmp_path):
        path = write_config(tmp_path, make_dataset=False)
        cfg = validate_config(path, require_dataset=False)
        assert cfg.dataset.endswith("data")

    def test_relative_paths_resolve_against_config(self, tmp_path):
        cfg = validate_config(write_config(tmp_path))
        assert cfg.dataset == str(tmp_path / "data")
        assert cfg.out == str(tmp_path / "out")


class TestPipelineOrchestration:
    def test_dependency_error_names_missing_stage(self, tmp_path):
        cfg = validate_config(write_config(tmp_path))
        with pytest.raises(DependencyError, match="simulate"):
            run_pipeline(cfg, ["fuse"])

    def test_unknown_stage_rejected(self, tmp_path):
        cfg = validate_config(write_config(tmp_path))
        with pytest.raises(ValueError, match="unknown stages"):
            run_pipeline(cfg, ["transmogrify"])

    def test_lock_conflict(self, tmp_path):
        cfg = validate_config(write_config(tmp_path))
        os.makedirs(cfg.out, exist_ok=True)
        with open(os.path.join(cfg.out, ".lock"), "w") as fh:
            fh.write("1")
        with pytest.raises(RuntimeError, match="locked"):
            run_pipeline(cfg, ["simulate"])


SMALL_SCENE = """
[scene]
dataset = data
out = out
seed = 3

[sim]
views = 2
width = 24
height = 24
focal = 18.0
touches = 12
points_per_touch = 16
patch_radius = 0.3

[conditioning]
voxel = 0.25

[train]
iters = 3
max_points = 200
"""


class TestCLI:
    def test_exit_code_config_error(self, tmp_path, capsys):
        path = tmp_path / "bad.cfg"
        path.write_text("[march]\nstep_fraction = 2.0\n")
        assert main(["pipeline", "--config", str(path)]) == EXIT_CONFIG
        assert "config error" in capsys.readouterr().err

    def test_exit_code_missing_config(self, capsys):
        assert main(["simulate", "--config", "/nonexistent/x.cfg"]) == EXIT_CONFIG

    def test_exit_code_dependency(self, tmp_path, capsys):
        path = write_config(tmp_path)
        assert main(["train", "--config", str(path)]) == EXIT_DEPENDENCY
        assert "dependency error" in capsys.readouterr().err

    def test_unknown_stage_flag(self, tmp_path):
        path = write_config(tmp_path)
        assert main(["pipeline", "--config", str(path), "--stages", "bogus"]) == EXIT_CONFIG

    def test_small_scene_runs_and_skips(self, tmp_path, capsys):
        path = write_config(tmp_path, SMALL_SCENE, make_dataset=False)
        assert main(["pipeline", "--config", str(path)]) == EXIT_OK
        first = capsys.readouterr().out
        assert first.count("ran") == 8
        out_dir = tmp_path / "out"
        for artifact in ("gpis.model", "init.ply", "splats.ply", "train_log.csv",
                         "eval_report.txt", "manifest.json"):
            assert (out_dir / artifact).exists()
        # rerun: everything skipped, exit 0
        assert main(["pipeline", "--config", str(path)]) == EXIT_OK
        second = capsys.readouterr().out
        assert second.count("skipped") == 8
        assert not (out_dir / ".lock").exists()

    def test_single_stage_rerun_after_pipeline(self, tmp_path, capsys):
        path = write_config(tmp_path, SMALL_SCENE, make_dataset=False)
        assert main(["pipeline", "--config", str(path)]) == EXIT_OK
        capsys.readouterr()
        assert main(["gpis-fit", "--config", str(path)]) == EXIT_OK
        assert "gpis-fit: skipped" in capsys.readouterr().out

    def test_seed_override_changes_params_hash(self, tmp_path, capsys):
        path = write_config(tmp_path, SMALL_SCENE, make_dataset=False)
        assert main(["simulate", "--config", str(path)]) == EXIT_OK
        capsys.readouterr()
        assert main(["simulate", "--config", str(path), "--seed", "9"]) == EXIT_OK
        assert "simulate: ran" in capsys.readouterr().out

    def test_fuse_without_align_names_align_stage(self, tmp_path, capsys):
        path = write_config(tmp_path, SMALL_SCENE, make_dataset=False)
        assert main(["pipeline", "--config", str(path),
                     "--stages", "simulate,gpis-fit,gpis-render"]) == EXIT_OK
        capsys.readouterr()
        assert main(["fuse", "--config", str(path)]) == EXIT_DEPENDENCY
        assert "align" in capsys.readouterr().err

    def test_exit_code_numerical_failure(self, tmp_path, capsys):
        text = SMALL_SCENE + "\n[conditioning]\ncap = 5\n"
        path = write_config(tmp_path, text, make_dataset=False)
        assert main(["pipeline", "--config", str(path),
                     "--stages", "simulate,gpis-fit"]) == 4
        assert "numerical failure" in capsys.readouterr().err
