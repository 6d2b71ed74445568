"""Neural warping: virtual supervision views fabricated by bounded random
rotation of real camera poses, with pseudo-ground-truth rendered from the
field and a transmittance-based confidence mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import render_field_image
from .geometry import Camera


@dataclass
class VirtualView:
    camera: Camera
    target_image: np.ndarray  # (H,W,3) field render (background composited)
    confidence_mask: np.ndarray  # (H,W) in {0,1}: 1 where the field hit geometry
    source_camera_id: str
    iteration_created: int = 0


def _axis_rotations(ax: float, ay: float, az: float) -> np.ndarray:
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rx @ Ry @ Rz


def perturb_pose(
    camera: Camera, rng: np.random.Generator, max_angle_deg: float = 10.0
) -> Camera:
    """Rotate the camera about its own center by independent uniform angles in
    [-max_angle_deg, +max_angle_deg] about each local axis (composed XYZ).
    Intrinsics and the camera center are unchanged.
    """
    if max_angle_deg <= 0:
        raise ValueError("max_angle_deg must be > 0")
    angles = np.deg2rad(rng.uniform(-max_angle_deg, max_angle_deg, size=3))
    if not np.any(angles):
        return camera
    center = camera.center
    R_new = _axis_rotations(*angles) @ camera.rotation_w2c
    return Camera(
        fx=camera.fx,
        fy=camera.fy,
        cx=camera.cx,
        cy=camera.cy,
        width=camera.width,
        height=camera.height,
        rotation_w2c=R_new,
        translation_w2c=-R_new @ center,
        near=camera.near,
        far=camera.far,
        camera_id=camera.camera_id,
    )


def warp_point(
    p_cam: np.ndarray, K: np.ndarray, R_v: np.ndarray, T_v: np.ndarray
) -> np.ndarray | None:
    """Reproject a camera-space 3D point through a virtual pose:
    p_v = K (R_v p + T_v), dehomogenized to pixel coordinates.

    Returns None when the transformed point lands at non-positive depth
    (behind the virtual camera); callers skip such points.
    """
    q = R_v @ np.asarray(p_cam, dtype=np.float64) + np.asarray(T_v, dtype=np.float64)
    if q[2] <= 0:
        return None
    h = K @ q
    return h[:2] / h[2]


def make_virtual_view(
    field_like,
    camera: Camera,
    rng: np.random.Generator,
    stride: int = 1,
    max_angle_deg: float = 10.0,
    n_samples: int = 64,
    background: np.ndarray | None = None,
    hit_transmittance: float = 0.5,
    min_mask_fraction: float = 0.05,
    iteration: int = 0,
) -> VirtualView | None:
    """Perturb ``camera``, render the field there, and build the confidence
    mask. Returns None (view rejected, caller resamples) when fewer than
    ``min_mask_fraction`` of pixels hit field geometry.
    """
    cam_v = perturb_pose(camera, rng, max_angle_deg)
    img, _, trans = render_field_image(
        field_like, cam_v, stride=stride, n_samples=n_samples, rng=rng,
        background=background,
    )
    mask = (trans < hit_transmittance).astype(np.float64)
    if mask.mean() < min_mask_fraction:
        return None
    return VirtualView(
        camera=cam_v,
        target_image=np.clip(img, 0.0, 1.0),
        confidence_mask=mask,
        source_camera_id=camera.camera_id,
        iteration_created=iteration,
    )
