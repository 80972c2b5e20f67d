"""Command-line interface: exit codes, flag/config-file precedence, and the
artifacts each subcommand produces.

Commands run in process through cli.main(argv) so stdout, stderr, and the
return code can be asserted directly; a few subprocess tests at the end
confirm the installed entry points reach the same main(). The training
fixture runs one short synthetic job that the train-synth, eval, and infer
tests all share.
"""

import configparser
import re
import shutil
import subprocess
import sys

import numpy as np
import pytest

from canet import cli, train
from canet.fileio import load_ctnsr, load_pgm, save_ctnsr, save_pgm, save_ppm
from canet.gradcheck import CheckResult

# Frozen analytic totals for the two reference configurations (default
# analysis size 512×1024, one MAC counted as one FLOP). test_analysis.py
# derives these against per-layer arithmetic; here they pin CLI output.
MNV2_PARAMS = 4_390_037
MNV2_FLOPS_MAC = 19_376_137_216
MNV2_FLOPS_2X = 38_547_842_048
R18_PARAMS = 14_115_285
R18_FLOPS_MAC = 35_784_795_136

TINY_FLAGS = [
    "--backbone", "tiny",
    "--classes", "3",
    "--deconv-channels", "32",
    "--fusion-channels", "32",
    "--input-size", "32x32",
]

# One deterministic, fast training job shared by the artifact tests.
TRAIN_ARGV = [
    "train-synth",
    "--samples", "12",
    "--val-samples", "4",
    "--epochs", "2",
    "--seed", "0",
]


def run_cli(capsys, argv):
    code = cli.main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def machine_total(out):
    """params, flops from the TOTAL row of --machine output."""
    last = out.strip().splitlines()[-1].split("\t")
    assert last[0] == "TOTAL"
    return int(last[2]), int(last[3])


def summary_fields(report_path):
    """epochs, final_loss, final_val_miou from a written report."""
    line = report_path.read_text().strip().splitlines()[-1]
    m = re.fullmatch(
        r"summary epochs=(\d+) final_loss=([\d.]+) final_val_miou=([\d.]+)", line
    )
    assert m, f"unexpected summary line: {line!r}"
    return int(m.group(1)), float(m.group(2)), float(m.group(3))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    assert cli.main(TRAIN_ARGV + ["--out", str(out)]) == 0
    return out


# =============================================================================
# Argument parsing and error reporting
# =============================================================================


class TestParser:
    def test_help_exits_zero_and_lists_commands(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for command in ("count", "bench", "gradcheck", "train-synth", "eval", "infer"):
            assert command in out

    def test_subcommand_help(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["count", "--help"])
        assert exc.value.code == 0
        assert "--convention" in capsys.readouterr().out

    def test_missing_command_is_a_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main([])
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_backbone_choice(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["count", "--backbone", "vgg16"])
        assert exc.value.code == 2
        assert "invalid choice" in capsys.readouterr().err

    def test_unknown_variant_choice(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["count", "--variant", "bogus"])
        assert exc.value.code == 2


class TestErrorReporting:
    def test_malformed_size(self, capsys):
        code, _, err = run_cli(capsys, ["count", "--input-size", "tiny"])
        assert code == 2
        assert err.startswith("error:")
        assert "WxH" in err

    def test_size_not_divisible_by_stride(self, capsys):
        code, _, err = run_cli(capsys, ["count", "--input-size", "100x100"])
        assert code == 2
        assert "divisible by 32" in err

    def test_unknown_config_key(self, capsys, tmp_path):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[model]\nbackbon = tiny\n")
        code, _, err = run_cli(capsys, ["count", "--config", str(cfg)])
        assert code == 2
        assert "unknown key 'backbon'" in err

    def test_unknown_config_section(self, capsys, tmp_path):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[models]\nbackbone = tiny\n")
        code, _, err = run_cli(capsys, ["count", "--config", str(cfg)])
        assert code == 2
        assert "unknown config section [models]" in err

    def test_missing_config_file(self, capsys, tmp_path):
        code, _, err = run_cli(capsys, ["count", "--config", str(tmp_path / "no.ini")])
        assert code == 2
        assert "cannot read config file" in err

    def test_malformed_config_file(self, capsys, tmp_path):
        cfg = tmp_path / "junk.ini"
        cfg.write_text("not an ini file at all\n")
        code, _, err = run_cli(capsys, ["count", "--config", str(cfg)])
        assert code == 2
        assert "bad config file" in err

    def test_missing_data_file_reports_cleanly(self, capsys, tmp_path):
        argv = ["infer"] + TINY_FLAGS + [
            "--weights", str(tmp_path / "w.canw"),
            "--image", str(tmp_path / "missing.ctnsr"),
            "--out", str(tmp_path / "out.pgm"),
        ]
        code, _, err = run_cli(capsys, argv)
        assert code == 2
        assert err.startswith("error:")
        assert "missing.ctnsr" in err


# =============================================================================
# count
# =============================================================================


class TestCount:
    def test_default_machine_totals(self, capsys):
        code, out, _ = run_cli(capsys, ["count", "--machine"])
        assert code == 0
        assert out.strip().splitlines()[-1] == (
            f"TOTAL\t-\t{MNV2_PARAMS}\t{MNV2_FLOPS_MAC}\t-"
        )

    def test_default_human_totals(self, capsys):
        code, out, _ = run_cli(capsys, ["count"])
        assert code == 0
        assert out.strip().splitlines()[-1] == (
            "total at 512×1024 (mac): params=4,390,037 (4.39M), "
            "flops=19,376,137,216 (19.38G)"
        )

    def test_convention_flag_changes_flops_only(self, capsys):
        code, out, _ = run_cli(
            capsys, ["count", "--machine", "--convention", "mul_add_2x"]
        )
        assert code == 0
        assert machine_total(out) == (MNV2_PARAMS, MNV2_FLOPS_2X)

    def test_resnet_backbone(self, capsys):
        code, out, _ = run_cli(capsys, ["count", "--backbone", "resnet18", "--machine"])
        assert code == 0
        assert machine_total(out) == (R18_PARAMS, R18_FLOPS_MAC)

    def test_config_file_selects_model(self, capsys, tmp_path):
        cfg = tmp_path / "model.ini"
        cfg.write_text("[model]\nbackbone = resnet18\n")
        code, from_config, _ = run_cli(capsys, ["count", "--config", str(cfg), "--machine"])
        assert code == 0
        _, from_flag, _ = run_cli(capsys, ["count", "--backbone", "resnet18", "--machine"])
        assert from_config == from_flag

    def test_flag_beats_config_file(self, capsys, tmp_path):
        cfg = tmp_path / "model.ini"
        cfg.write_text("[model]\nbackbone = mobilenet_v2\nnum_classes = 19\n")
        code, overridden, _ = run_cli(
            capsys, ["count", "--config", str(cfg), "--backbone", "resnet18", "--machine"]
        )
        assert code == 0
        _, pure_flag, _ = run_cli(capsys, ["count", "--backbone", "resnet18", "--machine"])
        _, config_only, _ = run_cli(capsys, ["count", "--config", str(cfg), "--machine"])
        assert overridden == pure_flag
        assert overridden != config_only

    def test_input_size_scales_flops_not_params(self, capsys):
        base = ["count", "--backbone", "tiny", "--classes", "3", "--machine"]
        _, small, _ = run_cli(capsys, base + ["--input-size", "32x32"])
        _, large, _ = run_cli(capsys, base + ["--input-size", "64x64"])
        params_small, flops_small = machine_total(small)
        params_large, flops_large = machine_total(large)
        assert params_small == params_large
        assert flops_large > 2 * flops_small


# =============================================================================
# bench
# =============================================================================


class TestBench:
    def test_single_iteration_protocol(self, capsys):
        code, out, _ = run_cli(capsys, ["bench"] + TINY_FLAGS + ["--iters", "1"])
        assert code == 0
        assert "1 evaluations at 32×32" in out
        assert "mean" in out and "fps" in out

    def test_zero_iterations_rejected(self, capsys):
        code, _, err = run_cli(capsys, ["bench"] + TINY_FLAGS + ["--iters", "0"])
        assert code == 2
        assert err.startswith("error:")


# =============================================================================
# gradcheck
# =============================================================================


class TestGradcheckCommand:
    def test_all_checks_pass(self, capsys):
        code, out, err = run_cli(capsys, ["gradcheck", "--seeds", "1"])
        assert code == 0
        assert err == ""
        lines = out.strip().splitlines()
        checks, summary = lines[:-1], lines[-1]
        assert len(checks) == 32
        assert all("PASS" in line and "max_rel_err=" in line for line in checks)
        assert summary == "all 32 checks passed (threshold 0.0001)"

    def test_failing_check_exits_one_and_is_named(self, capsys, monkeypatch):
        fake = [CheckResult("mul", 1.0), CheckResult("add", 1e-9)]
        monkeypatch.setattr(cli.gradcheck, "run_all", lambda *a, **k: fake)
        code, out, err = run_cli(capsys, ["gradcheck"])
        assert code == 1
        assert "gradcheck failed for: mul" in err
        assert re.search(r"mul\s+max_rel_err=1\.000e\+00\s+FAIL", out)
        assert re.search(r"add\s+max_rel_err=1\.000e-09\s+PASS", out)


# =============================================================================
# train-synth
# =============================================================================


class TestTrainSynth:
    def test_writes_all_artifacts(self, trained):
        assert (trained / "config.ini").is_file()
        assert (trained / "report.txt").is_file()
        assert (trained / "weights.canw").is_file()
        ctnsrs = sorted(p.name for p in (trained / "val").glob("*.ctnsr"))
        pgms = sorted(p.name for p in (trained / "val").glob("*.pgm"))
        assert ctnsrs == [f"sample_{i:03d}.ctnsr" for i in range(4)]
        assert pgms == [f"sample_{i:03d}.pgm" for i in range(4)]

    def test_config_snapshot_records_resolved_settings(self, trained):
        cp = configparser.ConfigParser()
        cp.read(trained / "config.ini")
        assert cp["model"] == {
            "backbone": "tiny",
            "num_classes": "3",
            "deconv_channels": "32",
            "fusion_channels": "32",
            "variant": "spatial_then_channel",
            "input_size": "32x32",
        }
        assert cp["train"]["init_lr"] == "0.01"
        assert cp["train"]["max_epoch"] == "2"
        assert cp["train"]["scale_range"] == "1.0,1.0"
        assert cp["train"]["crop"] == "32x32"
        assert cp["train"]["class_weights"] == "auto"
        assert cp["synth"] == {
            "samples": "12",
            "val_samples": "4",
            "size": "32",
            "noise_sigma": "0.1",
        }

    def test_config_snapshot_is_reloadable(self, trained):
        sections = cli._read_config(str(trained / "config.ini"))
        assert set(sections) == {"model", "train", "synth"}

    def test_report_structure(self, trained):
        lines = (trained / "report.txt").read_text().strip().splitlines()
        assert len(lines) == 3
        for epoch, line in enumerate(lines[:2]):
            assert re.fullmatch(
                rf"epoch={epoch} lr=[\d.e-]+ loss=\d+\.\d{{6}} val_miou=\d+\.\d{{6}}",
                line,
            ), line
        epochs, loss, val_miou = summary_fields(trained / "report.txt")
        assert epochs == 2
        assert loss > 0
        assert 0.0 <= val_miou <= 1.0

    def test_val_exports_match_the_generated_split(self, trained):
        data = train.make_synthetic_dataset(3, 16, 32, 0, noise_sigma=0.1)
        val = data[12:]
        image = load_ctnsr(str(trained / "val" / "sample_000.ctnsr"))
        label = load_pgm(str(trained / "val" / "sample_000.pgm"))
        np.testing.assert_array_equal(image, train.normalize_image(val[0].image))
        np.testing.assert_array_equal(label, val[0].label)

    def test_progress_lines_on_stdout(self, capsys, tmp_path):
        argv = [
            "train-synth", "--out", str(tmp_path / "run"),
            "--samples", "8", "--val-samples", "2", "--epochs", "1", "--seed", "1",
        ]
        code, out, _ = run_cli(capsys, argv)
        assert code == 0
        lines = out.strip().splitlines()
        assert lines[0] == (
            "training tiny on 3-class synthetic task: "
            "8 train / 2 val samples at 32x32"
        )
        assert any(line.startswith("epoch=0 ") for line in lines)
        assert lines[-1].startswith("summary epochs=1 ")

    def test_repeated_run_is_bit_identical(self, trained, tmp_path):
        again = tmp_path / "again"
        assert cli.main(TRAIN_ARGV + ["--out", str(again)]) == 0
        assert (again / "report.txt").read_text() == (trained / "report.txt").read_text()
        assert (again / "weights.canw").read_bytes() == (trained / "weights.canw").read_bytes()
        assert (again / "val" / "sample_000.ctnsr").read_bytes() == (
            trained / "val" / "sample_000.ctnsr"
        ).read_bytes()


# =============================================================================
# eval
# =============================================================================


def save_label_pair(tmp_path, pred, gt, name="a.pgm"):
    pred_dir, gt_dir = tmp_path / "pred", tmp_path / "gt"
    pred_dir.mkdir(exist_ok=True)
    gt_dir.mkdir(exist_ok=True)
    save_pgm(str(pred_dir / name), np.asarray(pred, dtype=np.uint8))
    save_pgm(str(gt_dir / name), np.asarray(gt, dtype=np.uint8))
    return ["eval", "--pred-dir", str(pred_dir), "--gt-dir", str(gt_dir)]


class TestEval:
    def test_hand_tallied_pair(self, capsys, tmp_path):
        argv = save_label_pair(tmp_path, [[0, 1, 1]], [[0, 0, 1]])
        code, out, _ = run_cli(capsys, argv)
        assert code == 0
        assert "mIoU            0.5000" in out
        assert "global accuracy 0.6667" in out

    def test_extra_classes_leave_miou_alone(self, capsys, tmp_path):
        argv = save_label_pair(tmp_path, [[0, 1, 1]], [[0, 0, 1]])
        code, out, _ = run_cli(capsys, argv + ["--classes", "4"])
        assert code == 0
        assert "mIoU            0.5000" in out

    def test_ignore_label_flag(self, capsys, tmp_path):
        argv = save_label_pair(tmp_path, [[0, 1]], [[0, 7]])
        code, out, _ = run_cli(capsys, argv + ["--ignore-label", "7"])
        assert code == 0
        assert "mIoU            1.0000" in out

    def test_self_comparison_is_perfect(self, capsys, trained):
        val = str(trained / "val")
        code, out, _ = run_cli(capsys, ["eval", "--pred-dir", val, "--gt-dir", val])
        assert code == 0
        assert "mIoU            1.0000" in out
        assert "global accuracy 1.0000" in out

    def test_missing_prediction_file(self, capsys, tmp_path):
        argv = save_label_pair(tmp_path, [[0]], [[0]])
        save_pgm(str(tmp_path / "gt" / "b.pgm"), np.zeros((1, 1), dtype=np.uint8))
        code, _, err = run_cli(capsys, argv)
        assert code == 2
        assert "missing prediction for b.pgm" in err

    def test_empty_ground_truth_dir(self, capsys, tmp_path):
        (tmp_path / "pred").mkdir()
        (tmp_path / "gt").mkdir()
        argv = ["eval", "--pred-dir", str(tmp_path / "pred"), "--gt-dir", str(tmp_path / "gt")]
        code, _, err = run_cli(capsys, argv)
        assert code == 2
        assert "no .pgm label maps found" in err

    def test_nonexistent_dir(self, capsys, tmp_path):
        argv = ["eval", "--pred-dir", str(tmp_path / "nope"), "--gt-dir", str(tmp_path)]
        code, _, err = run_cli(capsys, argv)
        assert code == 2
        assert "not a directory" in err


# =============================================================================
# infer
# =============================================================================


class TestInfer:
    def infer_argv(self, trained, image, out, extra=()):
        return [
            "infer",
            "--config", str(trained / "config.ini"),
            "--weights", str(trained / "weights.canw"),
            "--image", str(image),
            "--out", str(out),
            *extra,
        ]

    def test_roundtrip_reproduces_validation_miou(self, capsys, trained, tmp_path):
        """infer over the exported validation tensors, scored by eval, must
        reproduce the final validation mIoU the training loop reported (the
        exported .ctnsr files are exactly the tensors evaluate() saw)."""
        preds = tmp_path / "preds"
        preds.mkdir()
        for image in sorted((trained / "val").glob("*.ctnsr")):
            argv = self.infer_argv(trained, image, preds / (image.stem + ".pgm"))
            assert cli.main(argv) == 0
        capsys.readouterr()
        argv = ["eval", "--pred-dir", str(preds), "--gt-dir", str(trained / "val"),
                "--classes", "3"]
        code, out, _ = run_cli(capsys, argv)
        assert code == 0
        scored = float(re.search(r"mIoU\s+([\d.]+)", out).group(1))
        _, _, reported = summary_fields(trained / "report.txt")
        # eval prints four decimals; the report keeps six.
        assert scored == pytest.approx(reported, abs=5.1e-5)

    def test_logits_export_matches_labels(self, capsys, trained, tmp_path):
        image = trained / "val" / "sample_000.ctnsr"
        out, logits_path = tmp_path / "p.pgm", tmp_path / "p.ctnsr"
        argv = self.infer_argv(trained, image, out, ["--logits", str(logits_path)])
        code, _, _ = run_cli(capsys, argv)
        assert code == 0
        logits = load_ctnsr(str(logits_path))
        assert logits.shape == (3, 32, 32)
        np.testing.assert_array_equal(np.argmax(logits, axis=0), load_pgm(str(out)))

    def test_ppm_input(self, capsys, trained, tmp_path, rng):
        image = tmp_path / "x.ppm"
        save_ppm(str(image), rng.integers(0, 256, (32, 32, 3), dtype=np.uint8))
        out = tmp_path / "x.pgm"
        code, _, _ = run_cli(capsys, self.infer_argv(trained, image, out))
        assert code == 0
        pred = load_pgm(str(out))
        assert pred.shape == (32, 32)
        assert pred.max() < 3

    def test_rejects_unknown_suffix(self, capsys, trained, tmp_path):
        image = tmp_path / "x.png"
        image.write_bytes(b"\x89PNG")
        code, _, err = run_cli(capsys, self.infer_argv(trained, image, tmp_path / "x.pgm"))
        assert code == 2
        assert "unsupported input format '.png'" in err

    def test_rejects_non_image_tensor(self, capsys, trained, tmp_path):
        image = tmp_path / "flat.ctnsr"
        save_ctnsr(str(image), np.zeros((4, 4), dtype=np.float32))
        code, _, err = run_cli(capsys, self.infer_argv(trained, image, tmp_path / "x.pgm"))
        assert code == 2
        assert "expected a 3xHxW image tensor" in err


# =============================================================================
# installed entry points
# =============================================================================


class TestEntryPoints:
    def test_module_invocation(self):
        proc = subprocess.run(
            [sys.executable, "-m", "canet.cli", "count", "--machine"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert machine_total(proc.stdout) == (MNV2_PARAMS, MNV2_FLOPS_MAC)

    def test_console_script(self):
        exe = shutil.which("canet")
        if exe is None:
            pytest.skip("console script not on PATH")
        proc = subprocess.run(
            [exe, "count", "--backbone", "resnet18", "--machine"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert machine_total(proc.stdout) == (R18_PARAMS, R18_FLOPS_MAC)

    def test_error_exit_code_from_subprocess(self):
        proc = subprocess.run(
            [sys.executable, "-m", "canet.cli", "count", "--input-size", "100x100"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 2
        assert proc.stderr.startswith("error:")
