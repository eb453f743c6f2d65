"""Tests for the command-line interface.

Runs the real handlers in-process on a tiny two-record corpus with a few
training steps, checking wiring, artifacts, exit codes, and the config
resolution rules.  Model quality through the CLI is asserted end to end in
the acceptance suite.
"""

import json
import subprocess
import sys

import pytest

from speechmae.cli import _percent, build_parser, main


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_corpus")
    code = main(["corpus", "gen", "--out", str(out), "--preset", "random",
                 "--per-speaker", "1", "--seed", "3"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def tokenizers_path(corpus_dir, tmp_path_factory):
    path = tmp_path_factory.mktemp("cli_tok") / "tokenizers.pt"
    code = main(["train", "vqvae", "--corpus", str(corpus_dir),
                 "--out", str(path), "--steps", "30", "--batch-size", "64",
                 "--seed", "0"])
    assert code == 0
    return path


@pytest.fixture(scope="module")
def bundle_path(corpus_dir, tokenizers_path, tmp_path_factory):
    path = tmp_path_factory.mktemp("cli_bundle") / "bundle.pt"
    code = main(["train", "mae", "--corpus", str(corpus_dir),
                 "--tokenizers", str(tokenizers_path), "--out", str(path),
                 "--steps", "6", "--batch-size", "2", "--warmup-steps", "2",
                 "--seed", "0"])
    assert code == 0
    return path


class TestParsing:
    def test_percent_accepts_signs_and_suffix(self):
        assert _percent("+10%") == 10.0
        assert _percent("-50%") == -50.0
        assert _percent("12.5") == 12.5

    def test_percent_rejects_garbage(self):
        import argparse
        with pytest.raises(argparse.ArgumentTypeError):
            _percent("loud%")

    def test_unknown_subcommand_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["bogus"])
        assert exc.value.code == 2

    def test_missing_required_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["analyze", "in.wav"])
        assert exc.value.code == 2

    def test_help_exits_zero_as_console_script(self):
        proc = subprocess.run(
            [sys.executable, "-m", "speechmae.cli", "--help"],
            capture_output=True, text=True)
        assert proc.returncode == 0
        assert "resynth" in proc.stdout

    def test_runtime_error_exits_one(self, tmp_path):
        code = main(["analyze", str(tmp_path / "missing.wav"),
                     "--bundle", str(tmp_path / "missing.pt"),
                     "--out", str(tmp_path / "attrs.json")])
        assert code == 1


class TestConfigResolution:
    def test_config_file_fills_defaults(self, corpus_dir, tokenizers_path,
                                        tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"steps": 4, "batch_size": 2,
                                   "warmup_steps": 1}))
        code = main(["train", "mae", "--corpus", str(corpus_dir),
                     "--tokenizers", str(tokenizers_path),
                     "--out", str(tmp_path / "b.pt"), "--config", str(cfg)])
        assert code == 0
        line = capsys.readouterr().out.splitlines()[0]
        resolved = json.loads(line.split("config: ", 1)[1])
        assert resolved["steps"] == 4

    def test_explicit_flag_beats_config_file(self, corpus_dir,
                                             tokenizers_path, tmp_path,
                                             capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"steps": 4, "batch_size": 2,
                                   "warmup_steps": 1}))
        code = main(["train", "mae", "--corpus", str(corpus_dir),
                     "--tokenizers", str(tokenizers_path),
                     "--out", str(tmp_path / "b.pt"), "--config", str(cfg),
                     "--steps", "6"])
        assert code == 0
        line = capsys.readouterr().out.splitlines()[0]
        resolved = json.loads(line.split("config: ", 1)[1])
        assert resolved["steps"] == 6

    def test_unknown_config_key_is_runtime_error(self, corpus_dir,
                                                 tokenizers_path, tmp_path,
                                                 capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"stepz": 4}))
        code = main(["train", "mae", "--corpus", str(corpus_dir),
                     "--tokenizers", str(tokenizers_path),
                     "--out", str(tmp_path / "b.pt"), "--config", str(cfg)])
        assert code == 1

    def test_every_subcommand_prints_resolved_config(self, corpus_dir,
                                                     capsys):
        main(["corpus", "gen", "--out", str(corpus_dir), "--preset",
              "random", "--per-speaker", "1", "--seed", "3"])
        out = capsys.readouterr().out
        assert out.startswith("corpus gen config: ")
        json.loads(out.splitlines()[0].split("config: ", 1)[1])


class TestPipeline:
    def test_corpus_gen_writes_manifest(self, corpus_dir):
        lines = (corpus_dir / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == 2

    def test_analyze_writes_six_named_tracks(self, corpus_dir, bundle_path,
                                             tmp_path):
        wav = str(corpus_dir / "s01_u00.wav")
        out = tmp_path / "attrs.json"
        assert main(["analyze", wav, "--bundle", str(bundle_path),
                     "--out", str(out)]) == 0
        blob = json.loads(out.read_text())
        assert blob["schema_version"] == 1
        assert set(blob["tracks"]) == {"content", "f0_hz", "loudness",
                                       "speaker", "snr_db", "c50_db"}
        assert len(blob["tracks"]["f0_hz"]) == blob["n_frames"]
        assert blob["tracks"]["speaker"]["label"] in (1, 2)

    def test_resynth_writes_wav_and_report(self, corpus_dir, bundle_path,
                                           tmp_path):
        wav = str(corpus_dir / "s01_u00.wav")
        out = tmp_path / "out.wav"
        report = tmp_path / "report.json"
        code = main(["resynth", wav, "--bundle", str(bundle_path),
                     "--pitch-shift", "+10%", "--set-snr", "40",
                     "--out", str(out), "--report", str(report),
                     "--gl-iters", "4"])
        assert code == 0
        assert out.exists()
        blob = json.loads(report.read_text())
        assert blob["schema_version"] == 1
        assert blob["edits"] == ["pitch-shift +10%", "set-snr 40 dB"]
        assert "f0_aae_vs_target" in blob

    def test_resynth_negative_shift_with_equals_syntax(self, corpus_dir,
                                                       bundle_path,
                                                       tmp_path):
        wav = str(corpus_dir / "s01_u00.wav")
        code = main(["resynth", wav, "--bundle", str(bundle_path),
                     "--pitch-shift=-10%", "--out", str(tmp_path / "o.wav"),
                     "--gl-iters", "4"])
        assert code == 0

    def test_eval_f0_writes_artifacts(self, corpus_dir, bundle_path,
                                      tmp_path):
        code = main(["eval", "f0", "--bundle", str(bundle_path),
                     "--corpus", str(corpus_dir), "--out", str(tmp_path)])
        assert code == 0
        assert (tmp_path / "f0_robustness.csv").exists()
        assert (tmp_path / "f0_robustness.png").exists()

    def test_eval_denoise_without_noisy_records_fails(self, corpus_dir,
                                                      bundle_path, tmp_path,
                                                      capsys):
        code = main(["eval", "denoise", "--bundle", str(bundle_path),
                     "--corpus", str(corpus_dir), "--out", str(tmp_path)])
        assert code == 1
        assert "variant" in capsys.readouterr().err
