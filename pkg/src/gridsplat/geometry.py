"""Core differentiable geometry: covariance construction, perspective
projection of anisotropic Gaussians, and the unbounded-scene contraction.

All functions are pure and operate on float64 numpy arrays, vectorized over
the splat axis. Every forward that feeds the optimizer has a matching
``*_backward`` implementing the exact vector-Jacobian product; correctness is
pinned against central finite differences in the test suite.

Conventions (fixed project-wide): quaternions are (w, x, y, z), extrinsics
are world-to-camera, +z looks forward, image origin is top-left, and pixel
(i, j) samples the continuous point (j + 0.5, i + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Low-pass dilation added to the projected 2x2 covariance, in px^2.
LOW_PASS = 0.3
# Frustum guard band: splats whose view ray leaves 1.3x the frustum are culled.
GUARD_BAND = 1.3


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels, world-to-camera pose in meters."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation_w2c: np.ndarray  # (3,3) orthonormal
    translation_w2c: np.ndarray  # (3,)
    near: float = 0.05
    far: float = 100.0
    camera_id: str = "cam0"

    def __post_init__(self):
        self.rotation_w2c = np.asarray(self.rotation_w2c, dtype=np.float64)
        self.translation_w2c = np.asarray(self.translation_w2c, dtype=np.float64)
        for name in ("fx", "fy", "cx", "cy", "near", "far"):
            setattr(self, name, float(getattr(self, name)))
        self.width = int(self.width)
        self.height = int(self.height)
        self.validate()

    def validate(self):
        R = self.rotation_w2c
        err = np.linalg.norm(R @ R.T - np.eye(3))
        if err > 1e-6:
            raise ValueError(f"rotation_w2c not orthonormal (|RR^T - I|_F = {err:.3g})")
        if not (0.0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got near={self.near}, far={self.far}")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation_w2c.T @ self.translation_w2c

    def world_to_cam(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.rotation_w2c.T + self.translation_w2c

    def pixel_rays(self, pixels_xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World-space rays through continuous pixel coordinates (x, y).

        Returns (origins, unit directions) with origins all at the camera
        center. Directions are normalized.
        """
        pixels_xy = np.asarray(pixels_xy, dtype=np.float64)
        d_cam = np.stack(
            [
                (pixels_xy[:, 0] - self.cx) / self.fx,
                (pixels_xy[:, 1] - self.cy) / self.fy,
                np.ones(len(pixels_xy)),
            ],
            axis=1,
        )
        d_world = d_cam @ self.rotation_w2c  # R^T applied to rows
        d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
        o = np.broadcast_to(self.center, d_world.shape).copy()
        return o, d_world

    def pixel_grid(self, stride: int = 1) -> np.ndarray:
        """Continuous (x, y) sample points of every stride-th pixel, row-major."""
        ys = np.arange(0, self.height, stride, dtype=np.float64) + 0.5
        xs = np.arange(0, self.width, stride, dtype=np.float64) + 0.5
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    @property
    def forward_axis(self) -> np.ndarray:
        """World-space +z (viewing) direction of the camera."""
        return self.rotation_w2c.T @ np.array([0.0, 0.0, 1.0])


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------

def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(N,4) unit quaternions (w,x,y,z) -> (N,3,3) rotation matrices."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_backward(q_unit: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """VJP of quat_to_rotmat w.r.t. the *unit* quaternion."""
    w, x, y, z = q_unit[:, 0], q_unit[:, 1], q_unit[:, 2], q_unit[:, 3]
    g = np.zeros_like(q_unit)
    # dR/dw
    g[:, 0] = (
        -2 * z * dR[:, 0, 1] + 2 * y * dR[:, 0, 2]
        + 2 * z * dR[:, 1, 0] - 2 * x * dR[:, 1, 2]
        - 2 * y * dR[:, 2, 0] + 2 * x * dR[:, 2, 1]
    )
    # dR/dx
    g[:, 1] = (
        2 * y * dR[:, 0, 1] + 2 * z * dR[:, 0, 2]
        + 2 * y * dR[:, 1, 0] - 4 * x * dR[:, 1, 1] - 2 * w * dR[:, 1, 2]
        + 2 * z * dR[:, 2, 0] + 2 * w * dR[:, 2, 1] - 4 * x * dR[:, 2, 2]
    )
    # dR/dy
    g[:, 2] = (
        -4 * y * dR[:, 0, 0] + 2 * x * dR[:, 0, 1] + 2 * w * dR[:, 0, 2]
        + 2 * x * dR[:, 1, 0] + 2 * z * dR[:, 1, 2]
        - 2 * w * dR[:, 2, 0] + 2 * z * dR[:, 2, 1] - 4 * y * dR[:, 2, 2]
    )
    # dR/dz
    g[:, 3] = (
        -4 * z * dR[:, 0, 0] - 2 * w * dR[:, 0, 1] + 2 * x * dR[:, 0, 2]
        + 2 * w * dR[:, 1, 0] - 4 * z * dR[:, 1, 1] + 2 * y * dR[:, 1, 2]
        + 2 * x * dR[:, 2, 0] + 2 * y * dR[:, 2, 1]
    )
    return g


def normalize_backward(v: np.ndarray, dunit: np.ndarray) -> np.ndarray:
    """VJP of v -> v/|v| (rows)."""
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    u = v / n
    return (dunit - u * np.sum(u * dunit, axis=-1, keepdims=True)) / n


# ---------------------------------------------------------------------------
# covariance
# ---------------------------------------------------------------------------

def build_covariance(log_scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Sigma = R S S^T R^T with S = diag(exp(log_scale)).

    Accepts (N,3) log-scales and (N,4) quaternions (normalized internally);
    returns (N,3,3) symmetric PSD matrices.
    """
    q = normalize_quaternions(np.atleast_2d(rotation))
    s = np.exp(np.atleast_2d(log_scale))
    R = quat_to_rotmat(q)
    M = R * s[:, None, :]  # R @ diag(s)
    return M @ np.transpose(M, (0, 2, 1))


def build_covariance_backward(
    log_scale: np.ndarray, rotation: np.ndarray, dSigma: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """VJP of build_covariance. dSigma is the (N,3,3) upstream gradient
    (treated as a full-matrix gradient; symmetrize before calling if it was
    assembled from packed entries). Returns (dlog_scale, drotation) where
    drotation is w.r.t. the raw (unnormalized) quaternion.
    """
    rotation = np.atleast_2d(rotation)
    log_scale = np.atleast_2d(log_scale)
    q = normalize_quaternions(rotation)
    s = np.exp(log_scale)
    R = quat_to_rotmat(q)
    M = R * s[:, None, :]
    G = 0.5 * (dSigma + np.transpose(dSigma, (0, 2, 1)))
    dM = 2.0 * (G @ M)
    dR = dM * s[:, None, :]
    ds = np.einsum("nij,nij->nj", R, dM)
    dlog_scale = ds * s
    dq_unit = quat_to_rotmat_backward(q, dR)
    dq = normalize_backward(rotation, dq_unit)
    return dlog_scale, dq


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

@dataclass
class SplatProjection:
    """Screen-space footprint of the splats that survived culling.

    ``indices`` maps rows back into the original splat arrays. ``conic`` holds
    (A, B, C) of the inverse regularized 2x2 covariance; ``cov2d`` the packed
    (a, b, c) covariance itself. ``n_culled_degenerate`` counts splats dropped
    because the regularized covariance was not invertible.
    """

    indices: np.ndarray  # (M,) int
    mean2d: np.ndarray  # (M,2) px
    conic: np.ndarray  # (M,3) px^-2
    depth: np.ndarray  # (M,) camera-space z, > 0
    radius: np.ndarray  # (M,) px, 3-sigma extent
    cov2d: np.ndarray  # (M,3)
    n_culled_degenerate: int = 0
    # caches for the backward pass
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.indices)


def project_splats(
    positions: np.ndarray,
    log_scales: np.ndarray,
    rotations: np.ndarray,
    camera: Camera,
) -> SplatProjection:
    """EWA projection of every splat through ``camera``.

    Culls splats whose camera-space depth leaves (near, far) or whose view ray
    leaves the 1.3x frustum guard band, then forms
    Sigma' = J W Sigma W^T J^T + LOW_PASS * I and inverts it to a conic.
    Degenerate covariances (det <= 0 after regularization) are culled and
    counted in ``n_culled_degenerate``.
    """
    N = len(positions)
    W3 = camera.rotation_w2c
    t = positions @ W3.T + camera.translation_w2c  # (N,3) camera space

    tz = t[:, 2]
    lim_x = GUARD_BAND * 0.5 * camera.width / camera.fx
    lim_y = GUARD_BAND * 0.5 * camera.height / camera.fy
    with np.errstate(divide="ignore", invalid="ignore"):
        txz = t[:, 0] / tz
        tyz = t[:, 1] / tz
    keep = (
        (tz > camera.near)
        & (tz < camera.far)
        & (np.abs(txz) <= lim_x)
        & (np.abs(tyz) <= lim_y)
    )
    idx = np.nonzero(keep)[0]

    t = t[idx]
    tz = t[:, 2]
    Sigma = build_covariance(log_scales[idx], rotations[idx])

    fx, fy = camera.fx, camera.fy
    # Affine Jacobian of the perspective map at the camera-space mean. Inside
    # the guard band no clamping is active, so J uses t directly.
    M = len(idx)
    J = np.zeros((M, 2, 3), dtype=np.float64)
    J[:, 0, 0] = fx / tz
    J[:, 0, 2] = -fx * t[:, 0] / tz**2
    J[:, 1, 1] = fy / tz
    J[:, 1, 2] = -fy * t[:, 1] / tz**2

    T2 = J @ W3  # (M,2,3)
    C2 = T2 @ Sigma @ np.transpose(T2, (0, 2, 1))
    a = C2[:, 0, 0] + LOW_PASS
    b = C2[:, 0, 1]
    c = C2[:, 1, 1] + LOW_PASS

    det = a * c - b * b
    ok = det > 0
    n_degenerate = int(np.sum(~ok))
    if n_degenerate:
        idx, t, tz, a, b, c, det = (arr[ok] for arr in (idx, t, tz, a, b, c, det))
        Sigma, J, T2 = Sigma[ok], J[ok], T2[ok]

    inv_det = 1.0 / det
    conic = np.stack([c * inv_det, -b * inv_det, a * inv_det], axis=1)

    mean2d = np.stack(
        [fx * t[:, 0] / tz + camera.cx, fy * t[:, 1] / tz + camera.cy], axis=1
    )
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(lam_max)

    proj = SplatProjection(
        indices=idx,
        mean2d=mean2d,
        conic=conic,
        depth=tz.copy(),
        radius=radius,
        cov2d=np.stack([a, b, c], axis=1),
        n_culled_degenerate=n_degenerate,
    )
    proj._cache = dict(t=t, J=J, T2=T2, Sigma=Sigma, camera=camera)
    return proj


def project_splats_backward(
    proj: SplatProjection,
    log_scales: np.ndarray,
    rotations: np.ndarray,
    dmean2d: np.ndarray,
    dconic: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """VJP of project_splats for the surviving splats.

    ``dmean2d`` (M,2) and ``dconic`` (M,3, packed A/B/C) are upstream
    gradients; returns dense (N-shaped slices at proj.indices) gradients
    (dposition (M,3), dlog_scale (M,3), drotation (M,4)).
    """
    cache = proj._cache
    t, J, T2, Sigma = cache["t"], cache["J"], cache["T2"], cache["Sigma"]
    camera: Camera = cache["camera"]
    W3 = camera.rotation_w2c
    fx, fy = camera.fx, camera.fy
    tz = t[:, 2]
    M = len(proj)

    # conic = inv(C2), packed. Unpack gradients to full-matrix convention.
    dconic_full = np.empty((M, 2, 2), dtype=np.float64)
    dconic_full[:, 0, 0] = dconic[:, 0]
    dconic_full[:, 0, 1] = 0.5 * dconic[:, 1]
    dconic_full[:, 1, 0] = 0.5 * dconic[:, 1]
    dconic_full[:, 1, 1] = dconic[:, 2]

    a, b, c = proj.cov2d[:, 0], proj.cov2d[:, 1], proj.cov2d[:, 2]
    Cinv = np.empty((M, 2, 2), dtype=np.float64)
    Cinv[:, 0, 0] = proj.conic[:, 0]
    Cinv[:, 0, 1] = proj.conic[:, 1]
    Cinv[:, 1, 0] = proj.conic[:, 1]
    Cinv[:, 1, 1] = proj.conic[:, 2]

    dC2 = -Cinv @ dconic_full @ Cinv  # full-matrix gradient of C2
    dC2 = 0.5 * (dC2 + np.transpose(dC2, (0, 2, 1)))

    # C2 = T2 Sigma T2^T + low-pass (constant)
    dSigma = np.transpose(T2, (0, 2, 1)) @ dC2 @ T2
    dT2 = 2.0 * dC2 @ T2 @ Sigma
    dJ = dT2 @ W3.T

    # J entries depend on t (no clamping inside the guard band)
    dt = np.zeros((M, 3), dtype=np.float64)
    dt[:, 0] += dJ[:, 0, 2] * (-fx / tz**2)
    dt[:, 1] += dJ[:, 1, 2] * (-fy / tz**2)
    dt[:, 2] += (
        dJ[:, 0, 0] * (-fx / tz**2)
        + dJ[:, 1, 1] * (-fy / tz**2)
        + dJ[:, 0, 2] * (2.0 * fx * t[:, 0] / tz**3)
        + dJ[:, 1, 2] * (2.0 * fy * t[:, 1] / tz**3)
    )

    # mean2d = (fx tx/tz + cx, fy ty/tz + cy)
    dt[:, 0] += dmean2d[:, 0] * fx / tz
    dt[:, 1] += dmean2d[:, 1] * fy / tz
    dt[:, 2] += -(dmean2d[:, 0] * fx * t[:, 0] + dmean2d[:, 1] * fy * t[:, 1]) / tz**2

    dposition = dt @ W3

    dlog_scale, drotation = build_covariance_backward(
        log_scales[proj.indices], rotations[proj.indices], dSigma
    )
    return dposition, dlog_scale, drotation


# ---------------------------------------------------------------------------
# contraction
# ---------------------------------------------------------------------------

def contract(x: np.ndarray) -> np.ndarray:
    """Norm-dependent warp of all of space into the open ball of radius 2.

    Identity inside the unit ball; (2 - 1/|x|) * x/|x| outside. Continuous,
    injective, C^1 across the unit sphere.
    """
    x = np.asarray(x, dtype=np.float64)
    r = np.linalg.norm(x, axis=-1, keepdims=True)
    safe_r = np.where(r > 1.0, r, 1.0)
    out = np.where(r <= 1.0, x, (2.0 - 1.0 / safe_r) * x / safe_r)
    return out


def contract_jacobian(x: np.ndarray) -> np.ndarray:
    """(N,3) -> (N,3,3) Jacobian d(contract)/dx."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    N = len(x)
    r = np.linalg.norm(x, axis=-1)
    Jm = np.tile(np.eye(3), (N, 1, 1))
    out = r > 1.0
    if np.any(out):
        xo = x[out]
        ro = r[out]
        g = 2.0 / ro - 1.0 / ro**2
        gp = -2.0 / ro**2 + 2.0 / ro**3
        outer = xo[:, :, None] * xo[:, None, :]
        Jm[out] = g[:, None, None] * np.eye(3) + (gp / ro)[:, None, None] * outer
    return Jm


def contract_backward(x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    """VJP of contract: dL/dx given dL/d(contract(x))."""
    Jm = contract_jacobian(x)
    return np.einsum("nij,ni->nj", Jm, np.atleast_2d(dout))
