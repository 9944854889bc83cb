import csv
import json
from pathlib import Path

import numpy as np
import pytest

from artifact.cli import main
from artifact.config import KEYS, STAGES, ExperimentConfig
from tinyrun import tiny_config, write_tiny

FIX = Path(__file__).parent / "fixtures" / "froc3"


class TestConfig:
    def test_ini_round_trip(self):
        for profile in ("desk", "paper"):
            cfg = ExperimentConfig.default(profile)
            again = ExperimentConfig.from_ini(cfg.to_ini())
            assert again == cfg and again.to_ini() == cfg.to_ini()

    def test_overrides_round_trip(self):
        cfg = tiny_config(7)
        assert ExperimentConfig.from_ini(cfg.to_ini()) == cfg
        assert cfg["meta.iterations"] == 2 and cfg["run.seed"] == 7

    def test_paper_profile_values(self):
        paper = ExperimentConfig.default("paper")
        assert paper["meta.iterations"] == 3000 and paper["meta.beta"] == 0.001
        assert paper["detector.lr"] == 1e-6 and paper["detector.hidden"] == 512
        assert paper["data.patients"] == 117
        desk = ExperimentConfig.default()
        assert desk["meta.first_order"] is True and paper["meta.first_order"] is False

    def test_profile_switch_in_file(self):
        text = ExperimentConfig.default().to_ini().replace("profile = desk", "profile = paper")
        assert ExperimentConfig.from_ini(text) == ExperimentConfig.default("paper")

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="bogus"):
            ExperimentConfig.from_ini("[meta]\nbogus = 1\n")
        with pytest.raises(KeyError):
            ExperimentConfig.default().with_overrides(**{"meta.bogus": 1})

    def test_every_key_has_a_desk_value(self):
        cfg = ExperimentConfig.default()
        assert all(cfg[f"{k.section}.{k.name}"] is not None for k in KEYS)

    def test_stage_seeds(self):
        cfg = ExperimentConfig.default()
        seeds = [cfg.stage_seed(s) for s in STAGES]
        assert len(set(seeds)) == len(seeds)
        assert seeds == [ExperimentConfig.default().stage_seed(s) for s in STAGES]
        other = cfg.with_overrides(**{"run.seed": 1})
        assert all(other.stage_seed(s) != cfg.stage_seed(s) for s in STAGES)


class TestCli:
    def test_missing_artifact_names_producer(self, tmp_path, capsys):
        assert main(["train-detector", "--out", str(tmp_path / "r")]) == 2
        assert "bvscreen gen-data" in capsys.readouterr().err
        write_tiny(tmp_path / "c.ini")
        assert main(["gen-data", "--out", str(tmp_path / "r"), "--config", str(tmp_path / "c.ini")]) == 0
        assert main(["train-detector", "--out", str(tmp_path / "r")]) == 2
        assert "bvscreen train-encoder" in capsys.readouterr().err
        assert main(["compare", "--out", str(tmp_path / "r")]) == 2
        assert "bvscreen evaluate" in capsys.readouterr().err

    def test_gen_data_reproducible(self, tmp_path):
        cfg = write_tiny(tmp_path / "c.ini")
        for name, seed in (("a", "3"), ("b", "3"), ("c", "4")):
            assert main(["gen-data", "--out", str(tmp_path / name), "--config", str(cfg), "--seed", seed]) == 0
        files = sorted(p.name for p in (tmp_path / "a" / "data").iterdir())
        assert files
        for f in files:
            assert (tmp_path / "a" / "data" / f).read_bytes() == (tmp_path / "b" / "data" / f).read_bytes()
        assert (tmp_path / "a" / "data" / "volumes.bin").read_bytes() != \
            (tmp_path / "c" / "data" / "volumes.bin").read_bytes()

    def test_write_config_then_reload(self, tmp_path):
        assert main(["write-config", "--out", str(tmp_path), "--seed", "5", "--pipeline", "post-hoc"]) == 0
        cfg = ExperimentConfig.load(tmp_path / "config.ini")
        assert cfg["run.seed"] == 5 and cfg["run.pipeline"] == "post-hoc"

    def test_golden_evaluate(self, tmp_path):
        out = tmp_path / "froc.csv"
        assert main(["evaluate", "--detections", str(FIX / "detections.csv"), "--truth", str(FIX / "truth.json"),
                     "--froc-out", str(out)]) == 0
        got = list(csv.reader(out.open()))
        want = list(csv.reader((FIX / "expected_A.csv").open()))
        assert got[0] == want[0] and len(got) == len(want)
        assert np.allclose(np.array(got[1:], float), np.array(want[1:], float), atol=1e-12)


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    write_tiny(d / "c.ini")
    assert main(["all", "--out", str(d / "r"), "--config", str(d / "c.ini")]) == 0
    return d / "r"


class TestPipeline:
    def test_artifacts(self, full_run):
        for name in ("encoder.ckpt", "detector.ckpt", "classifier.ckpt", "meta.ckpt", "screen.ckpt", "scratch.ckpt",
                     "saliency.ckpt", "detections_test.csv", "prehoc_scores.csv", "posthoc_scores.csv",
                     "posthoc_regions.csv", "metrics.json", "prehoc_froc.csv", "posthoc_froc_A.csv",
                     "posthoc_froc_plus.csv", "roc.svg", "compare.csv", "config.ini"):
            assert (full_run / name).exists(), name

    def test_metrics_in_range(self, full_run):
        m = json.loads((full_run / "metrics.json").read_text())
        for pipe in ("pre-hoc", "post-hoc"):
            assert 0.0 <= m[pipe]["breast"] <= 1.0 and 0.0 <= m[pipe]["patient"] <= 1.0

    def test_compare_table(self, full_run, capsys):
        assert main(["compare", "--out", str(full_run)]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 3
        assert lines[0].split() == ["AUC", "pre-hoc", "post-hoc"]
        assert [ln.split()[0] for ln in lines[1:]] == ["breast-wise", "patient-wise"]
        rows = list(csv.reader((full_run / "compare.csv").open()))
        assert rows[0] == ["level", "pre-hoc", "post-hoc"] and len(rows) == 3

    def test_stage_rerun_uses_saved_config(self, full_run):
        # evaluate alone picks up config.ini from the run directory and reproduces metrics.json
        before = (full_run / "metrics.json").read_bytes()
        assert main(["evaluate", "--out", str(full_run)]) == 0
        assert (full_run / "metrics.json").read_bytes() == before
