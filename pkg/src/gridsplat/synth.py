"""Synthetic scene generator and the independent brute-force ray tracer that
produces ground-truth images for it.

The tracer knows nothing about Gaussians or the radiance field: analytic
sphere/box/disk intersection, Lambertian shading under one directional light,
and an optional Phong lobe. It is fully deterministic from the scene spec, so
its renders serve as the oracle for all end-to-end checks.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np

from .geometry import Camera
from .scene_io import Dataset, Frame, compute_scene_radius, save_image, write_manifest


@dataclass
class Primitive:
    kind: str  # "box" | "sphere" | "disk"
    center: tuple = (0.0, 0.0, 0.0)
    size: tuple = (0.5, 0.5, 0.5)  # box half-extents; (radius,...) for sphere/disk
    color: tuple = (0.8, 0.2, 0.2)
    color2: tuple | None = None  # checker partner color
    checker: float = 0.0  # checker cell size in meters (0 = solid)
    specular: float = 0.0  # Phong lobe strength
    shininess: float = 32.0

    @property
    def radius(self) -> float:
        return float(self.size[0]) if isinstance(self.size, (tuple, list)) else float(self.size)


@dataclass
class SyntheticSceneSpec:
    seed: int = 0
    width: int = 64
    height: int = 64
    n_frames: int = 60
    trajectory: str = "rig"  # "rig" (multi-camera) or "orbit"
    rig_cameras: int = 3
    rig_yaw_deg: float = 35.0
    path_radius: float = 5.0
    path_height: float = 1.8
    path_span_deg: float = 150.0
    target: tuple = (0.0, 0.0, 0.6)
    fov_deg: float = 55.0
    near: float = 0.1
    far: float = 30.0
    light_dir: tuple = (-0.45, 0.3, -0.84)  # direction light travels
    ambient: float = 0.35
    background: tuple = (1.0, 1.0, 1.0)
    primitives: list[Primitive] = dc_field(default_factory=list)

    def __post_init__(self):
        # JSON round trips turn tuples into lists; normalize so specs compare
        for name in ("target", "light_dir", "background"):
            setattr(self, name, tuple(getattr(self, name)))
        self.primitives = [
            p if isinstance(p, Primitive) else Primitive(**p) for p in self.primitives
        ]
        for p in self.primitives:
            p.center = tuple(p.center)
            p.size = tuple(np.atleast_1d(p.size))
            p.color = tuple(p.color)
            if p.color2 is not None:
                p.color2 = tuple(p.color2)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SyntheticSceneSpec":
        return cls(**json.loads(text))  # __post_init__ rebuilds the primitives


def toy_scene_spec(**overrides) -> SyntheticSceneSpec:
    """The seeded 3-primitive rig scene used by the acceptance suite: a ground
    disk, a matte box, and a glossy sphere."""
    spec = SyntheticSceneSpec(
        seed=7,
        primitives=[
            Primitive(
                kind="disk", center=(0.0, 0.0, 0.0), size=(7.0,),
                color=(0.55, 0.62, 0.5), color2=(0.42, 0.47, 0.4), checker=1.4,
            ),
            Primitive(
                kind="box", center=(-0.9, 0.15, 0.55), size=(0.55, 0.5, 0.55),
                color=(0.75, 0.18, 0.15),
            ),
            Primitive(
                kind="sphere", center=(0.85, -0.25, 0.62), size=(0.62,),
                color=(0.16, 0.3, 0.72), specular=0.5, shininess=24.0,
            ),
        ],
    )
    for k, v in overrides.items():
        setattr(spec, k, v)
    return spec


PRESETS = {"toy": toy_scene_spec}


# ---------------------------------------------------------------------------
# intersections (vectorized over rays)
# ---------------------------------------------------------------------------

def _intersect_sphere(o, d, prim):
    c = np.asarray(prim.center)
    r = prim.radius
    oc = o - c
    b = np.sum(oc * d, axis=1)
    cterm = np.sum(oc * oc, axis=1) - r * r
    disc = b * b - cterm
    hit = disc > 0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > 1e-6, t0, t1)
    hit &= t > 1e-6
    t = np.where(hit, t, np.inf)
    p = o + t[:, None] * d
    n = (p - c) / r
    return t, n


def _intersect_box(o, d, prim):
    c = np.asarray(prim.center)
    h = np.asarray(prim.size, dtype=np.float64)
    lo, hi = c - h, c + h
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
    t1 = (lo - o) * inv
    t2 = (hi - o) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    t_enter = np.max(tmin, axis=1)
    t_exit = np.min(tmax, axis=1)
    hit = (t_enter <= t_exit) & (t_exit > 1e-6)
    t = np.where(t_enter > 1e-6, t_enter, t_exit)
    t = np.where(hit, t, np.inf)
    axis = np.argmax(tmin, axis=1)
    inside = t_enter <= 1e-6  # ray starts inside: normal from exit face
    exit_axis = np.argmin(tmax, axis=1)
    axis = np.where(inside, exit_axis, axis)
    n = np.zeros_like(o)
    rows = np.arange(len(o))
    n[rows, axis] = np.sign(d[rows, axis]) * np.where(inside, 1.0, -1.0)
    return t, n


def _intersect_disk(o, d, prim):
    cz = prim.center[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (cz - o[:, 2]) / d[:, 2]
    p = o + t[:, None] * d
    rad = np.linalg.norm(p[:, :2] - np.asarray(prim.center[:2]), axis=1)
    hit = (t > 1e-6) & (rad <= prim.radius) & np.isfinite(t)
    t = np.where(hit, t, np.inf)
    n = np.zeros_like(o)
    n[:, 2] = np.where(o[:, 2] >= cz, 1.0, -1.0)
    return t, n


_INTERSECT = {"sphere": _intersect_sphere, "box": _intersect_box, "disk": _intersect_disk}


def _albedo(prim: Primitive, p: np.ndarray) -> np.ndarray:
    base = np.asarray(prim.color)
    if prim.checker <= 0 or prim.color2 is None:
        return np.broadcast_to(base, p.shape).copy()
    cell = np.floor(p / prim.checker).astype(np.int64)
    parity = (cell.sum(axis=1) % 2).astype(bool)
    other = np.asarray(prim.color2)
    return np.where(parity[:, None], other, base)


def trace_rays(spec: SyntheticSceneSpec, o: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Nearest-hit shading of the spec's primitives; background where no hit."""
    R = len(o)
    best_t = np.full(R, np.inf)
    best_n = np.zeros((R, 3))
    best_prim = np.full(R, -1, dtype=np.int64)
    for pi, prim in enumerate(spec.primitives):
        t, n = _INTERSECT[prim.kind](o, d, prim)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n[closer] = n[closer]
        best_prim[closer] = pi

    img = np.tile(np.asarray(spec.background, dtype=np.float64), (R, 1))
    hit = best_prim >= 0
    if not hit.any():
        return img
    p = o[hit] + best_t[hit, None] * d[hit]
    n = best_n[hit]
    light = np.asarray(spec.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    diffuse = np.maximum(0.0, -(n @ light))
    shade = spec.ambient + (1.0 - spec.ambient) * diffuse

    colors = np.zeros((hit.sum(), 3))
    for pi, prim in enumerate(spec.primitives):
        sel = best_prim[hit] == pi
        if not sel.any():
            continue
        alb = _albedo(prim, p[sel])
        c = alb * shade[sel][:, None]
        if prim.specular > 0:
            refl = light - 2.0 * (n[sel] @ light)[:, None] * n[sel]
            spec_term = np.maximum(0.0, -np.sum(refl * d[hit][sel], axis=1))
            c = c + prim.specular * (spec_term**prim.shininess)[:, None]
        colors[sel] = c
    img[hit] = np.clip(colors, 0.0, 1.0)
    return img


def trace_image(spec: SyntheticSceneSpec, camera: Camera) -> np.ndarray:
    pix = camera.pixel_grid()
    o, d = camera.pixel_rays(pix)
    return trace_rays(spec, o, d).reshape(camera.height, camera.width, 3)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def _look_at(position, target) -> tuple[np.ndarray, np.ndarray]:
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # looking straight down: pick an arbitrary right axis
        right = np.array([1.0, 0.0, 0.0])
    else:
        right /= nr
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return R, -R @ position


def scene_cameras(spec: SyntheticSceneSpec) -> list[Camera]:
    fx = 0.5 * spec.width / np.tan(np.deg2rad(spec.fov_deg) / 2.0)
    fy = fx
    cx, cy = spec.width / 2.0, spec.height / 2.0
    target = np.asarray(spec.target, dtype=np.float64)
    cams: list[Camera] = []

    def make(pos, tgt, cam_id):
        R, t = _look_at(pos, tgt)
        return Camera(
            fx=fx, fy=fy, cx=cx, cy=cy, width=spec.width, height=spec.height,
            rotation_w2c=R, translation_w2c=t, near=spec.near, far=spec.far,
            camera_id=cam_id,
        )

    if spec.trajectory == "orbit":
        angles = np.deg2rad(np.linspace(0.0, spec.path_span_deg, spec.n_frames))
        for a in angles:
            pos = np.array(
                [spec.path_radius * np.cos(a), spec.path_radius * np.sin(a), spec.path_height]
            )
            cams.append(make(pos, target, "cam0"))
    elif spec.trajectory == "rig":
        n_pos = spec.n_frames // spec.rig_cameras
        if n_pos * spec.rig_cameras != spec.n_frames:
            raise ValueError("n_frames must be a multiple of rig_cameras")
        angles = np.deg2rad(np.linspace(0.0, spec.path_span_deg, n_pos))
        yaws = np.deg2rad(
            np.linspace(-spec.rig_yaw_deg, spec.rig_yaw_deg, spec.rig_cameras)
        )
        for a in angles:
            pos = np.array(
                [spec.path_radius * np.cos(a), spec.path_radius * np.sin(a), spec.path_height]
            )
            f = target - pos
            for j, yaw in enumerate(yaws):
                cz, sz = np.cos(yaw), np.sin(yaw)
                Rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
                cams.append(make(pos, pos + Rz @ f, f"cam{j}"))
    else:
        raise ValueError(f"unknown trajectory {spec.trajectory!r}")
    return cams


def generate_synthetic(spec: SyntheticSceneSpec, out_dir=None) -> Dataset:
    """Trace every frame of the spec; optionally write images + manifest.

    The returned Dataset holds the oracle images in memory either way.
    """
    cams = scene_cameras(spec)
    frames = []
    img_dir = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        img_dir = os.path.join(out_dir, "images")
        os.makedirs(img_dir, exist_ok=True)
        with open(os.path.join(out_dir, "scene_spec.json"), "w") as fh:
            fh.write(spec.to_json())
    for i, cam in enumerate(cams):
        img = trace_image(spec, cam)
        path = os.path.join(img_dir, f"frame_{i:04d}.png") if img_dir else f"frame_{i:04d}.png"
        if img_dir:
            save_image(path, img)
        frames.append(Frame(index=i, camera=cam, image_path=path, image=img))
    ds = Dataset(frames=frames, scene_radius=compute_scene_radius(cams))
    if out_dir is not None:
        write_manifest(ds, os.path.join(out_dir, "manifest.txt"))
    return ds
