"""Config parsing and the command-line pipeline end to end."""

import numpy as np
import pytest

from mmfuse.cli import load_config, run_command
from mmfuse.datamodel import (
    ModalityDescriptor,
    ModalityStream,
    read_stream_header,
    write_stream_file,
)
from mmfuse.errors import ConfigurationError, ParseError


def write_config(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadConfig:
    def test_empty_file_gives_published_defaults(self, tmp_path):
        config = load_config(write_config(tmp_path, ""))
        assert config.train.base_lr == 0.001
        assert config.train.epochs == 200
        assert config.train.batch_size == 8
        assert config.train.weight_decay == 0.01
        assert config.preset == "synth"
        assert config.eval_window_seconds == config.train.window_seconds

    def test_window_seconds_accepts_integer_literal(self, tmp_path):
        config = load_config(write_config(tmp_path,
                                          "train.window_seconds = 9\n"))
        assert config.train.window_seconds == 9.0

    def test_indivisible_heads_rejected(self, tmp_path):
        path = write_config(tmp_path, "train.heads = 3\n")
        with pytest.raises(ConfigurationError, match="3 heads"):
            load_config(path)

    def test_unknown_key_named_in_error(self, tmp_path):
        path = write_config(tmp_path, "train.warmup = 10\n")
        with pytest.raises(ConfigurationError, match="train.warmup"):
            load_config(path)
        path = write_config(tmp_path, "optimizer.lr = 1\n")
        with pytest.raises(ConfigurationError, match="optimizer.lr"):
            load_config(path)

    def test_type_mismatch_reports_line_number(self, tmp_path):
        path = write_config(tmp_path,
                            "# comment\ntrain.epochs = soon\n")
        with pytest.raises(ParseError) as exc:
            load_config(path)
        assert exc.value.line_number == 2
        assert "train.epochs" in str(exc.value)

    def test_comments_and_blank_lines_ignored(self, tmp_path):
        text = ("# full-line comment\n"
                "\n"
                "train.epochs = 7  # inline comment\n"
                "   \n")
        config = load_config(write_config(tmp_path, text))
        assert config.train.epochs == 7

    def test_duplicate_key_rejected(self, tmp_path):
        path = write_config(tmp_path, "train.epochs = 1\ntrain.epochs = 2\n")
        with pytest.raises(ParseError, match="duplicate"):
            load_config(path)

    def test_line_without_equals_rejected(self, tmp_path):
        path = write_config(tmp_path, "train.epochs\n")
        with pytest.raises(ParseError) as exc:
            load_config(path)
        assert exc.value.line_number == 1

    def test_daicwoz_preset_defaults(self, tmp_path):
        text = ("data.preset = daicwoz\n"
                "data.covarep_dim = 74\n"
                "data.action_unit_count = 20\n"
                "data.head_pose_dim = 6\n")
        config = load_config(write_config(tmp_path, text))
        assert config.train.heads == 4
        assert config.train.head_dim == 64
        assert config.train.window_seconds == 6.0
        names = [d.name for d in config.descriptors]
        assert "covarep" in names and "formants" in names

    def test_explicit_value_beats_preset_default(self, tmp_path):
        text = ("data.preset = daicwoz\n"
                "data.covarep_dim = 74\n"
                "data.action_unit_count = 20\n"
                "data.head_pose_dim = 6\n"
                "train.heads = 8\n"
                "train.window_seconds = 4.5\n")
        config = load_config(write_config(tmp_path, text))
        assert config.train.heads == 8
        assert config.train.window_seconds == 4.5

    def test_dvlog_preset_gates_on_face(self, tmp_path):
        config = load_config(write_config(tmp_path, "data.preset = dvlog\n"))
        assert config.train.gate_modality == "face_embedding"
        assert config.train.window_seconds == 9.0

    def test_gate_modality_none_clears_gate(self, tmp_path):
        text = "data.preset = dvlog\ntrain.gate_modality = none\n"
        config = load_config(write_config(tmp_path, text))
        assert config.train.gate_modality is None

    def test_eval_section_overrides(self, tmp_path):
        text = ("train.window_seconds = 8\n"
                "eval.window_seconds = 4\n"
                "eval.n_prime = 3\n")
        config = load_config(write_config(tmp_path, text))
        assert config.eval_window_seconds == 4.0
        assert config.n_prime == 3

    def test_unknown_preset_rejected(self, tmp_path):
        path = write_config(tmp_path, "data.preset = webcam\n")
        with pytest.raises(ConfigurationError, match="webcam"):
            load_config(path)

    def test_unknown_preset_override_rejected(self, tmp_path):
        path = write_config(tmp_path, "data.fps = 60\n")
        with pytest.raises(ConfigurationError, match="fps"):
            load_config(path)

    def test_gen_section_builds_spec(self, tmp_path):
        text = ("gen.train_records = 4\n"
                "gen.cue_magnitude = 2.5\n"
                "gen.seed = 9\n")
        config = load_config(write_config(tmp_path, text))
        assert config.synth.train_records == 4
        assert config.synth.cue_magnitude == 2.5
        assert config.synth.seed == 9

    def test_bool_parsing(self, tmp_path):
        config = load_config(write_config(tmp_path,
                                          "train.class_weighting = true\n"))
        assert config.train.class_weighting is True
        with pytest.raises(ParseError):
            load_config(write_config(tmp_path,
                                     "train.class_weighting = maybe\n"))


class TestUsageErrors:
    def test_unknown_subcommand_exits_2(self, capsys):
        assert run_command(["explode"]) == 2
        assert "usage" in capsys.readouterr().err

    def test_no_arguments_exits_2(self, capsys):
        assert run_command([]) == 2

    def test_missing_required_flag_exits_2(self, tmp_path, capsys):
        assert run_command(["gen", "--out", str(tmp_path)]) == 2

    def test_help_exits_0(self, capsys):
        assert run_command(["--help"]) == 0
        assert "gradcheck" in capsys.readouterr().out


class TestInspect:
    def test_prints_header_and_presence(self, tmp_path, capsys):
        desc = ModalityDescriptor(name="mic", rate=10.0, raw_dim=3,
                                  encoder_kind="projection")
        presence = np.array([1, 1, 0, 1], dtype=np.uint8)
        frames = np.ones((4, 3), dtype=np.float32) * presence[:, None]
        path = tmp_path / "s.mmds"
        write_stream_file(ModalityStream(desc, frames, presence), path)
        assert run_command(["inspect", str(path)]) == 0
        out = capsys.readouterr().out
        assert "magic: MMDS" in out
        assert "rate_hz: 10" in out
        assert "frames: 4" in out
        assert "presence_ratio: 0.7500" in out

    def test_truncated_file_exits_1(self, tmp_path, capsys):
        path = tmp_path / "bad.mmds"
        path.write_bytes(b"MMDS\x01\x00")
        assert run_command(["inspect", str(path)]) == 1
        assert "error:" in capsys.readouterr().err

    def test_missing_file_exits_1(self, tmp_path, capsys):
        assert run_command(["inspect", str(tmp_path / "nope.mmds")]) == 1
        assert "nope.mmds" in capsys.readouterr().err


class TestGradcheckCommand:
    def test_passes_and_exits_0(self, capsys):
        assert run_command(["gradcheck", "--samples", "1"]) == 0
        assert "PASS" in capsys.readouterr().out


SMOKE_CONFIG = """
# tiny end-to-end settings
gen.train_records = 6
gen.val_records = 2
gen.test_records = 6
gen.min_duration = 4.0
gen.max_duration = 6.5
gen.cue_magnitude = 2.0
train.window_seconds = 2.0
train.d = 8
train.layers = 1
train.heads = 2
train.dropout = 0.0
train.epochs = 2
train.batch_size = 3
train.base_lr = 0.003
"""


@pytest.fixture(scope="class")
def smoke(tmp_path_factory):
    """One generated dataset plus one trained run, shared by CLI tests."""
    root = tmp_path_factory.mktemp("smoke")
    config = write_config(root, SMOKE_CONFIG)
    data = root / "data"
    run = root / "run"
    assert run_command(["gen", "--config", str(config),
                        "--out", str(data)]) == 0
    assert run_command(["train", "--config", str(config),
                        "--manifest", str(data / "manifest.tsv"),
                        "--out", str(run)]) == 0
    return {"root": root, "config": config, "data": data, "run": run}


class TestPipeline:
    def test_gen_writes_streams_and_manifest(self, smoke, capsys):
        data = smoke["data"]
        assert (data / "manifest.tsv").exists()
        streams = sorted(data.glob("*.mmds"))
        assert len(streams) == 14 * 4
        header = read_stream_header(streams[0])
        assert header["magic"] == "MMDS"

    def test_train_writes_checkpoints_and_history(self, smoke):
        run = smoke["run"]
        assert (run / "best.mmck").exists()
        assert (run / "final.mmck").exists()
        history = (run / "history.tsv").read_text().strip().split("\n")
        assert len(history) == 2

    def test_eval_writes_metrics(self, smoke, tmp_path, capsys):
        out = tmp_path / "eval"
        code = run_command(["eval", "--config", str(smoke["config"]),
                            "--manifest", str(smoke["data"] / "manifest.tsv"),
                            "--checkpoint", str(smoke["run"] / "best.mmck"),
                            "--out", str(out)])
        assert code == 0
        metrics = dict()
        for line in (out / "metrics.tsv").read_text().strip().split("\n"):
            name, mean, std = line.split("\t")
            metrics[name] = (float(mean), float(std))
        assert set(metrics) >= {"precision", "recall", "f1", "accuracy"}
        assert all(std == 0.0 for _, std in metrics.values())
        predictions = (out / "predictions.tsv").read_text().strip().split("\n")
        assert len(predictions) == 1 + 6  # header + test records
        assert (out / "windows.tsv").exists()

    def test_eval_n_prime_adds_prefix_rows(self, smoke, tmp_path):
        out = tmp_path / "eval"
        code = run_command(["eval", "--config", str(smoke["config"]),
                            "--manifest", str(smoke["data"] / "manifest.tsv"),
                            "--checkpoint", str(smoke["run"] / "best.mmck"),
                            "--out", str(out), "--n-prime", "1"])
        assert code == 0
        text = (out / "metrics.tsv").read_text()
        assert "prefix1_f1" in text

    def test_eval_missing_checkpoint_exits_1_naming_path(self, smoke,
                                                         tmp_path, capsys):
        missing = smoke["run"] / "gone.mmck"
        code = run_command(["eval", "--config", str(smoke["config"]),
                            "--manifest", str(smoke["data"] / "manifest.tsv"),
                            "--checkpoint", str(missing),
                            "--out", str(tmp_path / "eval")])
        assert code == 1
        assert "gone.mmck" in capsys.readouterr().err

    def test_eval_runs_requires_placeholder(self, smoke, tmp_path, capsys):
        code = run_command(["eval", "--config", str(smoke["config"]),
                            "--manifest", str(smoke["data"] / "manifest.tsv"),
                            "--checkpoint", str(smoke["run"] / "best.mmck"),
                            "--out", str(tmp_path / "eval"), "--runs", "2"])
        assert code == 1
        assert "{seed}" in capsys.readouterr().err

    def test_eval_aggregates_runs(self, smoke, tmp_path, capsys):
        # second run with a different seed, then aggregate both
        root = smoke["root"]
        seeded_cfg = write_config(root, SMOKE_CONFIG + "train.seed = 1\n",
                                  name="seeded.cfg")
        run1 = root / "run_seed1"
        assert run_command(["train", "--config", str(seeded_cfg),
                            "--manifest", str(smoke["data"] / "manifest.tsv"),
                            "--out", str(run1)]) == 0
        by_seed = root / "by_seed"
        (by_seed / "0").mkdir(parents=True)
        (by_seed / "1").mkdir(parents=True)
        (by_seed / "0" / "best.mmck").write_bytes(
            (smoke["run"] / "best.mmck").read_bytes())
        (by_seed / "1" / "best.mmck").write_bytes(
            (run1 / "best.mmck").read_bytes())
        out = tmp_path / "agg"
        code = run_command(["eval", "--config", str(smoke["config"]),
                            "--manifest", str(smoke["data"] / "manifest.tsv"),
                            "--checkpoint", str(by_seed / "{seed}" / "best.mmck"),
                            "--out", str(out), "--runs", "2"])
        assert code == 0
        assert (out / "predictions_run0.tsv").exists()
        assert (out / "predictions_run1.tsv").exists()
        lines = (out / "metrics.tsv").read_text().strip().split("\n")
        assert len(lines) == 4

    def test_rerun_gen_is_byte_identical(self, smoke, tmp_path):
        other = tmp_path / "data2"
        assert run_command(["gen", "--config", str(smoke["config"]),
                            "--out", str(other)]) == 0
        for path in sorted(smoke["data"].glob("*")):
            twin = other / path.name
            assert twin.read_bytes() == path.read_bytes(), path.name

    def test_threads_flag_accepted(self, smoke, tmp_path):
        assert run_command(["--threads", "1", "gen",
                            "--config", str(smoke["config"]),
                            "--out", str(tmp_path / "d")]) == 0

    def test_threads_env_accepted(self, smoke, tmp_path, monkeypatch):
        monkeypatch.setenv("MMFUSE_THREADS", "1")
        assert run_command(["gen", "--config", str(smoke["config"]),
                            "--out", str(tmp_path / "d")]) == 0

    def test_bad_threads_env_exits_1(self, smoke, tmp_path, monkeypatch,
                                     capsys):
        monkeypatch.setenv("MMFUSE_THREADS", "many")
        assert run_command(["gen", "--config", str(smoke["config"]),
                            "--out", str(tmp_path / "d")]) == 1
