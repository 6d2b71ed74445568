import numpy as np
import pytest

from gridsplat.scene_io import (
    FLOATS_PER_SPLAT,
    load_dataset,
    load_image,
    load_points,
    load_splats,
    quantize,
    save_image,
    save_splats,
    write_manifest,
)
from gridsplat.splats import Splats
from gridsplat.synth import toy_scene_spec, generate_synthetic


def f32_random_splats(n, seed):
    rng = np.random.default_rng(seed)
    # values pre-rounded to f32 so file round trips are bitwise
    def f32(a):
        return a.astype(np.float32).astype(np.float64)

    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return Splats(
        positions=f32(rng.uniform(-10, 10, (n, 3))),
        log_scales=f32(rng.uniform(-4, 1, (n, 3))),
        rotations=f32(q),
        opacity_logits=f32(rng.uniform(-4, 4, n)),
        color_logits=f32(rng.normal(size=(n, 3))),
    )


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    spec = toy_scene_spec(width=24, height=24, n_frames=30)
    generate_synthetic(spec, out)
    return out


class TestManifest:
    def test_round_trip(self, scene_dir, tmp_path):
        ds = load_dataset(scene_dir / "manifest.txt")
        copy_path = tmp_path / "copy.txt"
        write_manifest(ds, copy_path)
        ds2 = load_dataset(copy_path)
        assert len(ds2) == len(ds)
        assert ds2.scene_radius == pytest.approx(ds.scene_radius)
        for a, b in zip(ds.frames, ds2.frames):
            assert a.index == b.index
            assert a.camera.camera_id == b.camera.camera_id
            np.testing.assert_allclose(a.camera.rotation_w2c, b.camera.rotation_w2c,
                                       atol=1e-12)
            np.testing.assert_allclose(a.camera.translation_w2c, b.camera.translation_w2c)
            assert (a.camera.fx, a.camera.fy, a.camera.cx, a.camera.cy) == (
                b.camera.fx, b.camera.fy, b.camera.cx, b.camera.cy
            )
            np.testing.assert_array_equal(a.image, b.image)

    def test_split_rule(self, scene_dir):
        ds = load_dataset(scene_dir / "manifest.txt")
        test_ids = [f.index for f in ds.test_frames()]
        assert test_ids == [0, 10, 20]
        assert len(ds.train_frames()) == 27

    def test_scene_radius(self, scene_dir):
        ds = load_dataset(scene_dir / "manifest.txt")
        centers = np.array([f.camera.center for f in ds.frames])
        expected = 1.1 * np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1))
        assert ds.scene_radius == pytest.approx(expected)

    def test_rejects_scaled_rotation(self, scene_dir):
        lines = (scene_dir / "manifest.txt").read_text().splitlines()
        scaled_one = False
        for k, ln in enumerate(lines):
            if ln.startswith("frame") and not scaled_one:
                parts = ln.split()
                # scale the whole rotation block of the first frame by 2
                for j in range(11, 14):
                    parts[j] = repr(float(parts[j]) * 2)
                lines[k] = " ".join(parts)
                scaled_one = True
        bad = scene_dir / "badrot.txt"
        bad.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValueError, match="orthonormal"):
            load_dataset(bad)

    def test_rejects_duplicate_index(self, scene_dir):
        text = (scene_dir / "manifest.txt").read_text()
        frame_lines = [ln for ln in text.splitlines() if ln.startswith("frame")]
        bad = scene_dir / "dup.txt"
        bad.write_text(text + frame_lines[0] + "\n")
        with pytest.raises(ValueError, match="duplicate frame index"):
            load_dataset(bad)

    def test_rejects_missing_image(self, scene_dir):
        text = (scene_dir / "manifest.txt").read_text()
        text = text.replace("frame_0003.png", "frame_9999.png")
        bad = scene_dir / "missing.txt"
        bad.write_text(text)
        with pytest.raises(ValueError, match="missing image"):
            load_dataset(bad)

    def test_render_only_load_skips_images(self, scene_dir):
        text = (scene_dir / "manifest.txt").read_text()
        text = text.replace("frame_0003.png", "frame_9999.png")
        bad = scene_dir / "poses_only.txt"
        bad.write_text(text)
        ds = load_dataset(bad, require_images=False)
        assert len(ds) == 30 and ds.frames[0].image is None


class TestSplatFile:
    def test_round_trip_bitwise(self, tmp_path):
        sp = f32_random_splats(1000, 1)
        p = tmp_path / "x.hogs"
        save_splats(sp, p)
        sp2 = load_splats(p)
        for name in ("positions", "log_scales", "rotations", "opacity_logits",
                     "color_logits"):
            np.testing.assert_array_equal(getattr(sp, name), getattr(sp2, name))
        # and the file itself round-trips byte for byte
        p2 = tmp_path / "y.hogs"
        save_splats(sp2, p2)
        assert p.read_bytes() == p2.read_bytes()

    def test_file_size_formula(self, tmp_path):
        for n in (0, 1, 17, 333):
            p = tmp_path / f"s{n}.hogs"
            save_splats(f32_random_splats(n, n + 1), p)
            assert p.stat().st_size == 16 + FLOATS_PER_SPLAT * 4 * n

    def test_payload_is_14_floats(self):
        assert FLOATS_PER_SPLAT == 14

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.hogs"
        p.write_bytes(b"XXXX" + b"\0" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_splats(p)

    def test_bad_version(self, tmp_path):
        p = tmp_path / "v.hogs"
        save_splats(f32_random_splats(2, 2), p)
        raw = bytearray(p.read_bytes())
        raw[4] = 9
        p.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="version"):
            load_splats(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "t.hogs"
        save_splats(f32_random_splats(5, 3), p)
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(ValueError, match="truncated"):
            load_splats(p)


class TestPoints:
    def test_xyz_lines(self, tmp_path):
        p = tmp_path / "pts.txt"
        p.write_text("# comment\n1 2 3\n4 5 6\n")
        np.testing.assert_array_equal(load_points(p), [[1, 2, 3], [4, 5, 6]])

    def test_ascii_ply(self, tmp_path):
        p = tmp_path / "pts.ply"
        p.write_text(
            "ply\nformat ascii 1.0\nelement vertex 2\n"
            "property float x\nproperty float y\nproperty float z\n"
            "end_header\n0.5 1.5 -2.0\n3 4 5\n"
        )
        np.testing.assert_array_equal(load_points(p), [[0.5, 1.5, -2.0], [3, 4, 5]])


class TestImages:
    def test_save_load_quantized(self, tmp_path, rng):
        img = rng.uniform(0, 1, (12, 10, 3))
        p = tmp_path / "i.png"
        save_image(p, img)
        back = load_image(p)
        np.testing.assert_allclose(back, quantize(img), atol=1e-12)
