import json
import os
import subprocess
import sys

import numpy as np
import pytest

from gridsplat.cli import main, read_report
from gridsplat.field import FieldConfig, RadianceField
from gridsplat.scene_io import load_dataset, load_splats, save_image, save_splats, write_manifest
from gridsplat.splats import Splats
from gridsplat.synth import toy_scene_spec


def run_cli(args):
    return main(list(args))


@pytest.fixture(scope="module")
def small_scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_scene")
    spec = toy_scene_spec(width=24, height=24, n_frames=12)
    spec_path = out / "spec.json"
    spec_path.write_text(spec.to_json())
    assert run_cli(["synth", "--spec", str(spec_path), "--out", str(out / "data")]) == 0
    return out


class TestSynth:
    def test_preset(self, tmp_path):
        spec = toy_scene_spec(width=8, height=8, n_frames=6)
        p = tmp_path / "s.json"
        p.write_text(spec.to_json())
        assert run_cli(["synth", "--spec", str(p), "--out", str(tmp_path / "d")]) == 0
        assert (tmp_path / "d" / "manifest.txt").is_file()

    def test_unknown_flag_nonzero_exit(self, capsys):
        rc = run_cli(["synth", "--bogus", "x"])
        assert rc != 0
        assert "usage" in capsys.readouterr().err.lower()

    def test_missing_input_nonzero_exit(self, tmp_path, capsys):
        rc = run_cli(["train", "--data", str(tmp_path / "nope.txt"), "--out",
                      str(tmp_path / "o")])
        assert rc == 1
        assert "error" in capsys.readouterr().err.lower()


class TestTrain:
    def test_zero_iters_writes_initial_checkpoint(self, small_scene, tmp_path):
        out = tmp_path / "run0"
        rc = run_cli([
            "train", "--data", str(small_scene / "data" / "manifest.txt"),
            "--out", str(out), "--iters", "0", "--quiet",
        ])
        assert rc == 0
        assert (out / "checkpoints" / "final.hogs").is_file()
        assert (out / "checkpoints" / "final.hogf").is_file()
        assert len(load_splats(out / "checkpoints" / "final.hogs")) == 0

    def test_short_run_outputs(self, small_scene, tmp_path):
        out = tmp_path / "run1"
        rc = run_cli([
            "train", "--data", str(small_scene / "data" / "manifest.txt"),
            "--out", str(out), "--iters", "25", "--warmup", "4",
            "--harvest", "8", "--rays", "64", "--samples", "8",
            "--field-levels", "3", "--field-table-log2", "7", "--field-res-max", "32",
            "--tau", "0.25", "--eval-interval", "10", "--quiet", "--seed", "3",
        ])
        assert rc == 0
        loss_path = out / "loss_stream.jsonl"
        recs = [json.loads(l) for l in loss_path.read_text().splitlines()]
        assert len(recs) == 25
        assert {"iteration", "l_g", "l_mse", "total", "n_splats"} <= set(recs[0])
        assert (out / "loss_curves.png").is_file()
        assert (out / "events.jsonl").is_file()
        assert (out / "final_metrics.txt").is_file()
        assert (out / "final_metrics.png").is_file()


@pytest.fixture(scope="module")
def trained_tiny(small_scene, tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_run")
    rc = run_cli([
        "train", "--data", str(small_scene / "data" / "manifest.txt"),
        "--out", str(out), "--iters", "40", "--warmup", "5",
        "--harvest", "10", "--rays", "96", "--samples", "10",
        "--field-levels", "3", "--field-table-log2", "7", "--field-res-max", "32",
        "--tau", "0.25", "--quiet", "--seed", "5", "--eval-interval", "0",
    ])
    assert rc == 0
    return out


class TestRenderEval:
    def test_render_writes_images(self, small_scene, trained_tiny, tmp_path):
        out = tmp_path / "renders"
        rc = run_cli([
            "render", "--scene", str(trained_tiny / "checkpoints" / "final.hogs"),
            "--field", str(trained_tiny / "checkpoints" / "final.hogf"),
            "--camera", str(small_scene / "data" / "manifest.txt"),
            "--out", str(out),
        ])
        assert rc == 0
        assert len(list(out.glob("render_*.png"))) == 12

    def test_eval_on_render_equals_gt_fixture(self, small_scene, trained_tiny, tmp_path):
        # render the checkpoint, then evaluate against those very renders:
        # the report must show the PSNR cap and SSIM 1
        data = small_scene / "data"
        render_dir = tmp_path / "gt_renders"
        rc = run_cli([
            "render", "--scene", str(trained_tiny / "checkpoints" / "final.hogs"),
            "--field", str(trained_tiny / "checkpoints" / "final.hogf"),
            "--camera", str(data / "manifest.txt"), "--out", str(render_dir),
        ])
        assert rc == 0
        ds = load_dataset(data / "manifest.txt")
        for fr in ds.frames:
            fr.image_path = str(render_dir / f"render_{fr.index:04d}.png")
        fixture_manifest = render_dir / "manifest.txt"
        write_manifest(ds, fixture_manifest)
        report = tmp_path / "report.txt"
        rc = run_cli([
            "eval", "--scene", str(trained_tiny / "checkpoints" / "final.hogs"),
            "--field", str(trained_tiny / "checkpoints" / "final.hogf"),
            "--data", str(fixture_manifest), "--report", str(report),
        ])
        assert rc == 0
        parsed = read_report(report)
        assert parsed["mean_psnr"] == 99.0
        assert parsed["mean_ssim"] == pytest.approx(1.0, abs=1e-9)
        assert (tmp_path / "report.png").is_file()

    def test_eval_report_structure(self, small_scene, trained_tiny, tmp_path):
        report = tmp_path / "metrics.txt"
        rc = run_cli([
            "eval", "--scene", str(trained_tiny / "checkpoints" / "final.hogs"),
            "--field", str(trained_tiny / "checkpoints" / "final.hogf"),
            "--data", str(small_scene / "data" / "manifest.txt"),
            "--report", str(report),
        ])
        assert rc == 0
        parsed = read_report(report)
        assert [r["index"] for r in parsed["per_view"]] == [0, 10]
        assert parsed["mean_psnr"] == pytest.approx(
            np.mean([r["psnr"] for r in parsed["per_view"]]), abs=1e-5
        )


class TestAblationFlags:
    def test_no_harvest_never_harvests(self, small_scene, tmp_path):
        out = tmp_path / "nh"
        rc = run_cli([
            "train", "--data", str(small_scene / "data" / "manifest.txt"),
            "--out", str(out), "--iters", "30", "--warmup", "4",
            "--no-harvest", "--init-random", "30", "--rays", "64", "--samples", "8",
            "--field-levels", "3", "--field-table-log2", "7", "--field-res-max", "32",
            "--quiet", "--seed", "2", "--eval-interval", "0",
        ])
        assert rc == 0
        events = [json.loads(l) for l in (out / "events.jsonl").read_text().splitlines()]
        assert all(e["op"] != "harvest" for e in events)
        # splat count evolves only through clone/split/prune of the random init
        n = len(load_splats(out / "checkpoints" / "final.hogs"))
        growth = sum(e.get("cloned", 0) + e.get("split", 0) for e in events)
        pruned = sum(e.get("pruned_opacity", 0) + e.get("pruned_size", 0) for e in events)
        assert n == 30 + growth - pruned

    def test_init_points_baseline(self, small_scene, tmp_path):
        pts = tmp_path / "seed_points.ply"
        rng = np.random.default_rng(0)
        lines = ["ply", "format ascii 1.0", "element vertex 25",
                 "property float x", "property float y", "property float z",
                 "end_header"]
        lines += [" ".join(f"{v:.4f}" for v in p) for p in rng.uniform(-1, 1, (25, 3))]
        pts.write_text("\n".join(lines) + "\n")
        out = tmp_path / "ip"
        rc = run_cli([
            "train", "--data", str(small_scene / "data" / "manifest.txt"),
            "--out", str(out), "--iters", "6", "--warmup", "2",
            "--no-harvest", "--init-points", str(pts), "--rays", "48", "--samples", "8",
            "--field-levels", "3", "--field-table-log2", "7", "--field-res-max", "32",
            "--quiet", "--seed", "2", "--eval-interval", "0",
        ])
        assert rc == 0
        assert len(load_splats(out / "checkpoints" / "final.hogs")) == 25

    def test_field_only_color_mode(self, small_scene, tmp_path):
        out = tmp_path / "fo"
        rc = run_cli([
            "train", "--data", str(small_scene / "data" / "manifest.txt"),
            "--out", str(out), "--iters", "15", "--warmup", "3",
            "--no-harvest", "--init-random", "10", "--rays", "48", "--samples", "8",
            "--field-levels", "3", "--field-table-log2", "7", "--field-res-max", "32",
            "--color-mode", "field-only", "--quiet", "--seed", "2",
            "--eval-interval", "0",
        ])
        assert rc == 0


class TestSubprocessEntry:
    def test_module_invocation(self, tmp_path):
        # the CLI is also reachable via python -m (used by the acceptance runs)
        spec = toy_scene_spec(width=8, height=8, n_frames=3)
        p = tmp_path / "s.json"
        p.write_text(spec.to_json())
        proc = subprocess.run(
            [sys.executable, "-m", "gridsplat.cli", "synth", "--spec", str(p),
             "--out", str(tmp_path / "d")],
            capture_output=True, text=True, timeout=300,
        )
        assert proc.returncode == 0, proc.stderr
