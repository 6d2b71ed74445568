"""Dataset ingestion and scene serialization.

Manifest format (line-oriented text, one frame per line, ``#`` comments):

    frame <index> <camera_id> <width> <height> <fx> <fy> <cx> <cy> \
          <near> <far> <16 row-major world-to-camera floats> <image_path>

Image paths are resolved relative to the manifest's directory. Every tenth
frame (index % 10 == 0) is held out for testing.

Splat files ("HOGS"): magic, version u32, count u64, then per splat 14
little-endian f32: position x3, log_scale x3, rotation x4, opacity_logit x1,
base_color x3 (the degree-0 color logits). Round trips are bit-exact.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .geometry import Camera
from .splats import Splats

HOGS_MAGIC = b"HOGS"
HOGS_VERSION = 1
FLOATS_PER_SPLAT = 14


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return img / 255.0


def save_image(path, img: np.ndarray):
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round-trip an image through the 8-bit domain (the CLI metric domain)."""
    return np.clip(np.round(img * 255.0), 0, 255) / 255.0


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

@dataclass
class Frame:
    index: int
    camera: Camera
    image_path: str
    image: np.ndarray | None = None


@dataclass
class Dataset:
    frames: list[Frame]
    scene_radius: float

    def train_frames(self) -> list[Frame]:
        return [f for f in self.frames if f.index % 10 != 0]

    def test_frames(self) -> list[Frame]:
        return [f for f in self.frames if f.index % 10 == 0]

    def centroid(self) -> np.ndarray:
        return np.mean([f.camera.center for f in self.frames], axis=0)

    def __len__(self) -> int:
        return len(self.frames)


def compute_scene_radius(cameras: list[Camera]) -> float:
    centers = np.array([c.center for c in cameras])
    centroid = centers.mean(axis=0)
    return float(1.1 * np.max(np.linalg.norm(centers - centroid, axis=1)))


def load_dataset(manifest_path, require_images: bool = True) -> Dataset:
    """Parse and validate a manifest. Raises ValueError naming the offending
    line on missing images, non-orthonormal rotations, or duplicate indices."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    frames: list[Frame] = []
    seen: set[int] = set()
    with open(manifest_path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] != "frame" or len(parts) != 28:
                raise ValueError(
                    f"{manifest_path}:{lineno}: expected 'frame' line with 27 fields, "
                    f"got {len(parts) - 1}"
                )
            idx = int(parts[1])
            if idx in seen:
                raise ValueError(f"{manifest_path}:{lineno}: duplicate frame index {idx}")
            seen.add(idx)
            cam_id = parts[2]
            width, height = int(parts[3]), int(parts[4])
            fx, fy, cx, cy, near, far = (float(v) for v in parts[5:11])
            m = np.array([float(v) for v in parts[11:27]]).reshape(4, 4)
            R = m[:3, :3]
            err = np.linalg.norm(R @ R.T - np.eye(3))
            if err > 1e-3:
                raise ValueError(
                    f"{manifest_path}:{lineno}: rotation not orthonormal "
                    f"(|RR^T - I|_F = {err:.3g})"
                )
            # re-orthonormalize tiny drift so Camera's strict gate passes
            u, _, vt = np.linalg.svd(R)
            R = u @ vt
            image_path = os.path.join(base, parts[27])
            if require_images and not os.path.isfile(image_path):
                raise ValueError(f"{manifest_path}:{lineno}: missing image file {image_path}")
            cam = Camera(
                fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                rotation_w2c=R, translation_w2c=m[:3, 3],
                near=near, far=far, camera_id=cam_id,
            )
            image = load_image(image_path) if require_images else None
            frames.append(Frame(index=idx, camera=cam, image_path=image_path, image=image))
    if not frames:
        raise ValueError(f"{manifest_path}: no frames")
    frames.sort(key=lambda f: f.index)
    return Dataset(frames=frames, scene_radius=compute_scene_radius([f.camera for f in frames]))


def write_manifest(dataset: Dataset, path):
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w") as fh:
        fh.write("# gridsplat manifest v1\n")
        fh.write(
            "# frame <index> <camera_id> <width> <height> <fx> <fy> <cx> <cy>"
            " <near> <far> <w2c row-major x16> <image_path>\n"
        )
        for fr in dataset.frames:
            c = fr.camera
            m = np.eye(4)
            m[:3, :3] = c.rotation_w2c
            m[:3, 3] = c.translation_w2c
            rel = os.path.relpath(fr.image_path, base)
            nums = " ".join(repr(float(v)) for v in m.ravel())
            head = " ".join(
                repr(float(v)) for v in (c.fx, c.fy, c.cx, c.cy, c.near, c.far)
            )
            fh.write(
                f"frame {fr.index} {c.camera_id} {c.width} {c.height} {head} {nums} {rel}\n"
            )


# ---------------------------------------------------------------------------
# splat files
# ---------------------------------------------------------------------------

def save_splats(splats: Splats, path):
    n = len(splats)
    payload = np.empty((n, FLOATS_PER_SPLAT), dtype="<f4")
    payload[:, 0:3] = splats.positions
    payload[:, 3:6] = splats.log_scales
    payload[:, 6:10] = splats.rotations
    payload[:, 10] = splats.opacity_logits
    payload[:, 11:14] = splats.color_logits
    with open(path, "wb") as fh:
        fh.write(HOGS_MAGIC)
        fh.write(struct.pack("<I", HOGS_VERSION))
        fh.write(struct.pack("<Q", n))
        fh.write(payload.tobytes())


def load_splats(path) -> Splats:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != HOGS_MAGIC:
        raise ValueError(f"{path}: not a splat file (bad magic {data[:4]!r})")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != HOGS_VERSION:
        raise ValueError(f"{path}: unsupported splat file version {version}")
    (count,) = struct.unpack_from("<Q", data, 8)
    want = 16 + count * FLOATS_PER_SPLAT * 4
    if len(data) != want:
        raise ValueError(
            f"{path}: truncated or oversized payload ({len(data)} bytes, expected {want})"
        )
    payload = (
        np.frombuffer(data, dtype="<f4", offset=16)
        .reshape(count, FLOATS_PER_SPLAT)
        .astype(np.float64)
    )
    return Splats(
        positions=payload[:, 0:3],
        log_scales=payload[:, 3:6],
        rotations=payload[:, 6:10],
        opacity_logits=payload[:, 10],
        color_logits=payload[:, 11:14],
    )


def load_points(path) -> np.ndarray:
    """Positions-only point list: ASCII PLY or bare x y z lines."""
    with open(path) as fh:
        first = fh.readline().strip()
        pts = []
        if first == "ply":
            n = None
            for line in fh:
                line = line.strip()
                if line.startswith("element vertex"):
                    n = int(line.split()[-1])
                if line == "end_header":
                    break
            for line in fh:
                parts = line.split()
                if len(parts) >= 3:
                    pts.append([float(v) for v in parts[:3]])
                if n is not None and len(pts) >= n:
                    break
        else:
            if first and not first.startswith("#"):
                pts.append([float(v) for v in first.split()[:3]])
            for line in fh:
                line = line.strip()
                if line and not line.startswith("#"):
                    pts.append([float(v) for v in line.split()[:3]])
    return np.asarray(pts, dtype=np.float64).reshape(-1, 3)
