import csv
import json
from pathlib import Path

import pytest

import readlab.trainer as trainer_mod
from readlab.cli import main, parse_float_list, parse_int_list
from readlab.errors import ConfigError

DESK_KEYS = dict(outer_iterations=2, batch_size=8, max_len=10, d=12, enc_embed_dim=12,
                 embed_dim=8, state_dim=8, gen_ff_width=8, reward_hidden=8,
                 pretrain_epochs=0, eval_every=2, synth_train=80, synth_test=30)


@pytest.fixture()
def config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"variant": "BASELINE", "label_fraction": 0.5,
                                "seed": 1, **DESK_KEYS}), encoding="utf-8")
    return path


class TestTrainCommand:
    def test_happy_path_writes_manifest(self, config_path, tmp_path):
        outdir = tmp_path / "run"
        code = main(["train", "--config", str(config_path), "--variant", "BASELINE",
                     "--fraction", "1.0", "--outdir", str(outdir)])
        assert code == 0
        manifest = json.loads((outdir / "manifest.json").read_text())
        assert manifest["outcome"] == "ok"
        assert manifest["config"]["variant"] == "BASELINE"
        assert manifest["config"]["label_fraction"] == 1.0
        assert manifest["dataset_checksum"].startswith("sha256:")
        assert (outdir / "metrics.jsonl").exists()
        assert (outdir / "vocab.txt").exists()
        assert Path(manifest["artifacts"]["final_checkpoint"]).is_dir()

    def test_unknown_variant_exits_2(self, config_path, tmp_path, capsys):
        code = main(["train", "--config", str(config_path), "--variant", "BOGUS",
                     "--outdir", str(tmp_path / "x")])
        assert code == 2

    def test_unknown_config_key_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"variant": "BASELINE", "learning_rate": 1.0}))
        assert main(["train", "--config", str(bad)]) == 2

    def test_invalid_fraction_exits_2(self, config_path, tmp_path):
        assert main(["train", "--config", str(config_path), "--fraction", "0.0",
                     "--outdir", str(tmp_path / "x")]) == 2

    def test_flag_overrides_config_file(self, config_path, tmp_path):
        outdir = tmp_path / "run"
        main(["train", "--config", str(config_path), "--seed", "9",
              "--outdir", str(outdir)])
        manifest = json.loads((outdir / "manifest.json").read_text())
        assert manifest["seed"] == 9
        assert manifest["config"]["seed"] == 9
        assert manifest["config"]["label_fraction"] == 0.5  # from file

    def test_identical_invocations_byte_identical_metrics(self, config_path, tmp_path):
        argv = ["train", "--config", str(config_path), "--variant", "READ"]
        assert main(argv + ["--outdir", str(tmp_path / "a")]) == 0
        assert main(argv + ["--outdir", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == \
            (tmp_path / "b" / "metrics.jsonl").read_bytes()

    def test_default_outdir_from_env(self, config_path, tmp_path, monkeypatch):
        monkeypatch.setenv("READ_LAB_OUTDIR", str(tmp_path / "root"))
        assert main(["train", "--config", str(config_path)]) == 0
        assert (tmp_path / "root" / "train-BASELINE-f0.5-s1" / "metrics.jsonl").exists()

    def test_manifest_config_round_trips(self, config_path, tmp_path):
        outdir = tmp_path / "run"
        main(["train", "--config", str(config_path), "--outdir", str(outdir)])
        manifest = json.loads((outdir / "manifest.json").read_text())
        replay = tmp_path / "replay.json"
        cfg = dict(manifest["config"])
        cfg["outdir"] = None
        replay.write_text(json.dumps(cfg))
        assert main(["train", "--config", str(replay),
                     "--outdir", str(tmp_path / "run2")]) == 0
        assert (outdir / "metrics.jsonl").read_bytes() == \
            (tmp_path / "run2" / "metrics.jsonl").read_bytes()


class TestSweepCommand:
    def test_happy_path(self, config_path, tmp_path):
        outdir = tmp_path / "sweep"
        code = main(["sweep", "--config", str(config_path), "--fractions", "0.5",
                     "--variants", "BASELINE", "--seeds", "1..2",
                     "--outdir", str(outdir)])
        assert code == 0
        with open(outdir / "sweep.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 3

    def test_malformed_fraction_list_exits_2(self, config_path, tmp_path):
        assert main(["sweep", "--config", str(config_path), "--fractions", "0.5,abc",
                     "--variants", "BASELINE", "--seeds", "1",
                     "--outdir", str(tmp_path / "s")]) == 2

    def test_out_of_range_fraction_exits_2(self, config_path, tmp_path):
        assert main(["sweep", "--config", str(config_path), "--fractions", "1.5",
                     "--variants", "BASELINE", "--seeds", "1",
                     "--outdir", str(tmp_path / "s")]) == 2

    def test_unknown_variant_exits_2(self, config_path, tmp_path):
        assert main(["sweep", "--config", str(config_path), "--fractions", "0.5",
                     "--variants", "NOPE", "--seeds", "1",
                     "--outdir", str(tmp_path / "s")]) == 2

    def test_failed_cell_still_exits_0_with_failure_marked(self, config_path, tmp_path,
                                                           monkeypatch):
        real_run = trainer_mod.run

        def flaky(cfg, *args, **kw):
            if cfg.seed == 2:
                raise RuntimeError("injected failure")
            return real_run(cfg, *args, **kw)

        monkeypatch.setattr(trainer_mod, "run", flaky)
        outdir = tmp_path / "sweep"
        code = main(["sweep", "--config", str(config_path), "--fractions", "0.5",
                     "--variants", "BASELINE", "--seeds", "1..3",
                     "--outdir", str(outdir)])
        assert code == 0
        with open(outdir / "sweep.csv", newline="") as fh:
            assert len(list(csv.reader(fh))) == 3  # header + 2 ok cells
        fail_text = (outdir / "failures.csv").read_text()
        assert "injected failure" in fail_text

    def test_list_parsers(self):
        assert parse_int_list("1..4") == [1, 2, 3, 4]
        assert parse_int_list("3,9") == [3, 9]
        assert parse_float_list("0.01,0.5") == [0.01, 0.5]
        with pytest.raises(ConfigError):
            parse_int_list("a..b")
        with pytest.raises(ConfigError):
            parse_float_list("x")


class TestReportCommand:
    @pytest.fixture()
    def read_run(self, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"variant": "READ", "label_fraction": 0.5,
                                      "seed": 1, **DESK_KEYS}))
        outdir = tmp_path / "run"
        assert main(["train", "--config", str(config), "--outdir", str(outdir)]) == 0
        return outdir

    def test_gen_report_rows(self, read_run):
        assert main(["report", "--run", str(read_run), "--kind", "gen", "--n", "7"]) == 0
        lines = (read_run / "gen_report.tsv").read_text(encoding="utf-8").splitlines()
        assert len(lines) == 7

    def test_features_report_shape(self, read_run):
        assert main(["report", "--run", str(read_run), "--kind", "features"]) == 0
        lines = (read_run / "features.tsv").read_text(encoding="utf-8").splitlines()
        assert len(lines) == DESK_KEYS["synth_test"]
        assert all(len(line.split("\t")[1].split(",")) == DESK_KEYS["d"]
                   for line in lines)
        assert (read_run / "features_2d.csv").exists()

    def test_report_idempotent(self, read_run):
        main(["report", "--run", str(read_run), "--kind", "gen", "--n", "5"])
        first = (read_run / "gen_report.tsv").read_bytes()
        main(["report", "--run", str(read_run), "--kind", "gen", "--n", "5"])
        assert (read_run / "gen_report.tsv").read_bytes() == first

    def test_missing_checkpoint_exits_2(self, tmp_path):
        assert main(["report", "--run", str(tmp_path / "nowhere"),
                     "--kind", "gen"]) == 2

    def test_gen_report_without_generator_exits_2(self, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"variant": "BASELINE", "label_fraction": 0.5,
                                      "seed": 1, **DESK_KEYS}))
        outdir = tmp_path / "run"
        main(["train", "--config", str(config), "--outdir", str(outdir)])
        assert main(["report", "--run", str(outdir), "--kind", "gen"]) == 2


class TestGradcheckCommand:
    def test_all_components_pass(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "generator" in out and "reward" in out and "classifier" in out

    def test_single_component_scope(self, capsys):
        assert main(["gradcheck", "--component", "reward"]) == 0
        out = capsys.readouterr().out
        assert "reward" in out and "generator" not in out

    def test_corrupted_gradient_detected(self):
        assert main(["gradcheck", "--component", "reward", "--corrupt", "reward"]) == 1


def test_usage_error_exits_2():
    assert main(["train", "--no-such-flag"]) == 2
    assert main(["frobnicate"]) == 2
