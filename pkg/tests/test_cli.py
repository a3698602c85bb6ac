"""End-to-end command-line behavior and exit codes."""

import numpy as np
import pytest

from earloc.cli import main
from earloc.config import RunConfig

TINY_FUSION = dict(
    model_kind="fusion",
    input_size=64,
    block_widths=(2, 4, 4, 8, 8),
    reduce_channels=4,
    context_branch_channels=2,
    mid_scales=(12.0, 20.0),
    deep_scales=(24.0, 40.0),
    epochs=1,
    batch_size=6,
    lr_initial=0.01,
    lr_constant=True,
    trace_steps=4,
    score_threshold=0.05,
    seed=5,
)
TINY_MULTIBOX = dict(
    model_kind="multibox",
    input_size=160,
    block_widths=(2, 4, 4, 8, 8),
    set1_channels=8,
    bottleneck_channels=4,
    extra_channels=8,
    epochs=1,
    batch_size=6,
    lr_initial=0.01,
    lr_constant=True,
    seed=5,
)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset + tiny trained model shared by the read-only CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    ds = root / "ds"
    assert main(["gen", "--count", "6", "--out", str(ds), "--seed", "3", "--size", "64"]) == 0
    cfg_path = root / "fusion.cfg"
    cfg_path.write_text(RunConfig(**TINY_FUSION).to_text())
    model = root / "model.bin"
    assert (
        main(
            [
                "train",
                "--config",
                str(cfg_path),
                "--data",
                str(ds / "manifest.csv"),
                "--model-out",
                str(model),
            ]
        )
        == 0
    )
    return {"root": root, "ds": ds, "manifest": ds / "manifest.csv", "cfg": cfg_path, "model": model}


class TestUsageErrors:
    def test_no_arguments(self, capsys):
        assert main([]) == 1
        assert "error:" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_missing_required_flag(self, capsys):
        assert main(["gen", "--count", "4"]) == 1
        assert "error:" in capsys.readouterr().err

    def test_negative_count(self, tmp_path, capsys):
        assert main(["gen", "--count", "-2", "--out", str(tmp_path / "x")]) == 1

    def test_detect_requires_one_source(self, tmp_path):
        assert main(["detect", "--image", str(tmp_path / "img.png")]) == 1

    def test_bad_config_value_is_usage_error(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("not_a_real_knob = 1\n")
        code = main(
            [
                "train",
                "--config",
                str(cfg),
                "--data",
                str(tmp_path / "m.csv"),
                "--model-out",
                str(tmp_path / "m.bin"),
            ]
        )
        assert code == 1
        assert "unknown config keys" in capsys.readouterr().err


class TestDataErrors:
    def test_missing_manifest(self, workspace, capsys):
        code = main(
            [
                "train",
                "--config",
                str(workspace["cfg"]),
                "--data",
                str(workspace["root"] / "ghost.csv"),
                "--model-out",
                str(workspace["root"] / "m2.bin"),
            ]
        )
        assert code == 2
        assert "data error:" in capsys.readouterr().err

    def test_missing_model_file(self, workspace, capsys):
        img = workspace["ds"] / "images" / "synth-3-00000.png"
        code = main(["detect", "--model", str(workspace["root"] / "ghost.bin"), "--image", str(img)])
        assert code == 2

    def test_corrupt_model_file(self, workspace, tmp_path, capsys):
        bad = tmp_path / "junk.bin"
        bad.write_bytes(b"not a model at all")
        img = workspace["ds"] / "images" / "synth-3-00000.png"
        assert main(["detect", "--model", str(bad), "--image", str(img)]) == 2
        assert "data error:" in capsys.readouterr().err

    def test_missing_image(self, workspace, capsys):
        code = main(
            ["detect", "--model", str(workspace["model"]), "--image", str(workspace["root"] / "no.png")]
        )
        assert code == 2


class TestGen:
    def test_deterministic_across_runs(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert (
                main(["gen", "--count", "3", "--out", str(tmp_path / name), "--seed", "7", "--size", "64"])
                == 0
            )
        out = capsys.readouterr().out
        assert out.count("wrote 3 images") == 2
        ma = (tmp_path / "a" / "manifest.csv").read_bytes()
        mb = (tmp_path / "b" / "manifest.csv").read_bytes()
        assert ma == mb
        pa = tmp_path / "a" / "images" / "synth-7-00000.png"
        pb = tmp_path / "b" / "images" / "synth-7-00000.png"
        assert pa.read_bytes() == pb.read_bytes()

    def test_seed_changes_content(self, tmp_path):
        main(["gen", "--count", "1", "--out", str(tmp_path / "s1"), "--seed", "1", "--size", "64"])
        main(["gen", "--count", "1", "--out", str(tmp_path / "s2"), "--seed", "2", "--size", "64"])
        a = (tmp_path / "s1" / "images" / "synth-1-00000.png").read_bytes()
        b = (tmp_path / "s2" / "images" / "synth-2-00000.png").read_bytes()
        assert a != b


class TestTrainCommand:
    def test_trace_lines_and_outputs(self, workspace, tmp_path, capsys):
        model = tmp_path / "m.bin"
        code = main(
            [
                "train",
                "--config",
                str(workspace["cfg"]),
                "--data",
                str(workspace["manifest"]),
                "--model-out",
                str(model),
            ]
        )
        assert code == 0
        out = capsys.readouterr().out
        trace_lines = [ln for ln in out.splitlines() if ln.startswith("step ")]
        assert len(trace_lines) == 1  # 6 images / batch 6 -> one step
        assert trace_lines[0].startswith("step 0 loss ")
        float(trace_lines[0].rsplit(" ", 1)[1])  # repr parses back
        assert "epoch 0:" in out
        assert model.is_file()
        assert model.with_suffix(".loss.csv").is_file()  # default log placement
        assert model.with_suffix(".best.bin").is_file()

    def test_trace_is_repeatable_verbatim(self, workspace, tmp_path, capsys):
        argv = [
            "train",
            "--config",
            str(workspace["cfg"]),
            "--data",
            str(workspace["manifest"]),
            "--model-out",
            str(tmp_path / "t.bin"),
        ]
        assert main(argv) == 0
        first = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("step ")]
        assert main(argv) == 0
        second = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("step ")]
        assert first == second

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")  # divergence is the point
    def test_divergence_exits_three(self, workspace, tmp_path, capsys):
        cfg = dict(TINY_FUSION)
        cfg.update(epochs=3, lr_initial=1e6)
        cfg_path = tmp_path / "diverge.cfg"
        cfg_path.write_text(RunConfig(**cfg).to_text())
        code = main(
            [
                "train",
                "--config",
                str(cfg_path),
                "--data",
                str(workspace["manifest"]),
                "--model-out",
                str(tmp_path / "d.bin"),
            ]
        )
        assert code == 3
        assert "numerical failure:" in capsys.readouterr().err


class TestDetectCommand:
    def test_prints_parseable_rows(self, workspace, capsys):
        img = workspace["ds"] / "images" / "synth-3-00001.png"
        code = main(
            [
                "detect",
                "--model",
                str(workspace["model"]),
                "--image",
                str(img),
                "--score-threshold",
                "0.05",
            ]
        )
        assert code == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines
        for ln in lines:
            x0, y0, x1, y1, score = (float(v) for v in ln.split())
            assert x0 < x1 and y0 < y1
            assert 0.0 <= score <= 1.0
            assert 0 <= x0 and x1 <= 64 and 0 <= y0 and y1 <= 64


class TestEvalCommand:
    def test_writes_metric_files(self, workspace, tmp_path, capsys):
        out = tmp_path / "report"
        code = main(
            [
                "eval",
                "--model",
                str(workspace["model"]),
                "--data",
                str(workspace["manifest"]),
                "--out",
                str(out),
                "--score-threshold",
                "0.05",
                "--plot",
            ]
        )
        assert code == 0
        metrics = (out / "metrics.csv").read_text().splitlines()
        assert len(metrics) == 1 + 17  # 0.10 .. 0.90 by 0.05
        assert metrics[0].startswith("iou_threshold,accuracy")
        assert metrics[1].startswith("0.1000,")
        assert metrics[-1].startswith("0.9000,")
        sv = (out / "score_vs_iou.csv").read_text().splitlines()
        assert sv[0] == "threshold,accuracy_by_score,accuracy_by_iou"
        assert len(sv) == 1 + 17
        pairs = (out / "score_iou_pairs.csv").read_text().splitlines()
        assert len(pairs) == 1 + 6
        assert (out / "metrics.svg").read_text().startswith("<svg")
        stdout = capsys.readouterr().out
        assert "evaluated 6 images" in stdout

    def test_custom_grid_and_comparator(self, workspace, tmp_path):
        out = tmp_path / "r2"
        code = main(
            [
                "eval",
                "--model",
                str(workspace["model"]),
                "--data",
                str(workspace["manifest"]),
                "--out",
                str(out),
                "--iou-from",
                "0.5",
                "--iou-to",
                "0.8",
                "--iou-step",
                "0.1",
                "--iou-comparator",
                "ge",
                "--score-threshold",
                "0.05",
            ]
        )
        assert code == 0
        rows = (out / "metrics.csv").read_text().splitlines()
        assert len(rows) == 1 + 4
        assert not (out / "metrics.svg").exists()  # no --plot

    def test_bad_grid_is_usage_error(self, workspace, tmp_path, capsys):
        code = main(
            [
                "eval",
                "--model",
                str(workspace["model"]),
                "--data",
                str(workspace["manifest"]),
                "--out",
                str(tmp_path / "r3"),
                "--iou-step",
                "0",
            ]
        )
        assert code == 1
        assert "error:" in capsys.readouterr().err


class TestCascadeCommands:
    def test_train_then_detect(self, workspace, tmp_path, capsys):
        cfg1 = tmp_path / "s1.cfg"
        cfg1.write_text(RunConfig(**TINY_FUSION).to_text())
        cfg2 = tmp_path / "s2.cfg"
        cfg2.write_text(RunConfig(**TINY_MULTIBOX).to_text())
        out_dir = tmp_path / "cascade"
        code = main(
            [
                "train-cascade",
                "--config1",
                str(cfg1),
                "--config2",
                str(cfg2),
                "--data",
                str(workspace["manifest"]),
                "--out-dir",
                str(out_dir),
                "--expansion",
                "40",
            ]
        )
        assert code == 0
        assert "stage-2 dataset:" in capsys.readouterr().out
        for name in ("stage1.bin", "stage2.bin", "stage1_loss.csv", "stage2_loss.csv"):
            assert (out_dir / name).is_file()
        img = workspace["ds"] / "images" / "synth-3-00002.png"
        code = main(
            [
                "detect",
                "--cascade",
                str(out_dir / "stage1.bin"),
                str(out_dir / "stage2.bin"),
                "--image",
                str(img),
                "--score-threshold",
                "0.05",
                "--expansion",
                "40",
            ]
        )
        assert code == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines
        vals = [float(v) for v in lines[0].split()]
        assert len(vals) == 5


class TestGradcheckCommand:
    def test_all_checks_pass(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        lines = [ln for ln in out.splitlines() if " max_rel_err=" in ln]
        assert lines and all("PASS" in ln for ln in lines)
        assert out.splitlines()[-1].endswith("checks passed")
