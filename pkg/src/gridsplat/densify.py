"""Point densification: harvesting new splat positions from the field's
expected-depth ray casts, plus the clone/split/prune adaptive density control
loop driven by accumulated view-space positional gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial import cKDTree

from .field import render_rays
from .geometry import Camera, contract, normalize_quaternions, quat_to_rotmat
from .rasterizer import GradAccumulator
from .splats import Splats, logit


@dataclass
class DensifyConfig:
    tau: float = 1.0  # density threshold for harvested candidates
    eps_alpha: float = 0.005  # opacity prune threshold
    grad_threshold: float = 2e-4  # view-space positional-gradient threshold
    densify_interval: int = 100
    harvest_iterations: tuple[int, ...] = (5000, 15000, 25000)
    opacity_reset_interval: int = 3000
    max_splats: int = 500_000
    scene_bound: float = 1.9  # contracted-space norm bound for candidates
    harvest_stride: int = 4  # pixel subsampling for harvest rays
    harvest_samples: int = 64  # quadrature samples per harvest ray
    dedup_resolution: int = 256  # voxel grid over the contracted domain
    hit_transmittance: float = 0.5  # ray must end below this to count as a hit
    percent_dense: float = 0.01  # clone-vs-split scale threshold, scene-relative
    split_factor: float = 1.6
    new_opacity: float = 0.1

    def validate(self, total_iterations: int | None = None):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if not (0.0 < self.eps_alpha < 1.0):
            raise ValueError("eps_alpha must be in (0,1)")
        hs = tuple(self.harvest_iterations)
        if any(b <= a for a, b in zip(hs, hs[1:])):
            raise ValueError("harvest_iterations must be strictly increasing")
        # a zero-iteration run is a valid degenerate case (initial checkpoint
        # only); the schedule is inert then
        if total_iterations and any(h > total_iterations for h in hs):
            raise ValueError("harvest_iterations must lie within total iterations")


@dataclass
class HarvestReport:
    rays_cast: int = 0
    passing_tau: int = 0
    in_bounds: int = 0
    added: int = 0
    capped: bool = False
    per_camera: dict = dc_field(default_factory=dict)

    def as_record(self) -> dict:
        return {
            "op": "harvest",
            "rays_cast": self.rays_cast,
            "passing_tau": self.passing_tau,
            "in_bounds": self.in_bounds,
            "added": self.added,
            "capped": self.capped,
            "per_camera": self.per_camera,
        }


@dataclass
class EditLog:
    n_before: int = 0
    n_cloned: int = 0
    n_split: int = 0
    n_pruned_opacity: int = 0
    n_pruned_size: int = 0
    n_after: int = 0

    def as_record(self) -> dict:
        return {
            "op": "density_control",
            "before": self.n_before,
            "cloned": self.n_cloned,
            "split": self.n_split,
            "pruned_opacity": self.n_pruned_opacity,
            "pruned_size": self.n_pruned_size,
            "after": self.n_after,
        }


def harvest_points(
    field_like,
    cameras: list[Camera],
    config: DensifyConfig,
    rng: np.random.Generator,
    scene_radius: float,
    existing_count: int = 0,
) -> tuple[Splats, HarvestReport]:
    """Cast subsampled pixel rays from every camera, place candidates at the
    expected depth, and keep those that land in real density.

    A candidate x = o + D*d survives if query_density(x) >= tau, its
    contracted position lies within scene_bound, and the ray actually
    terminated (final transmittance below the hit threshold). Survivors are
    deduplicated to one per occupied voxel of a dedup_resolution^3 grid over
    the contracted domain.
    """
    report = HarvestReport()
    pts, dirs_kept = [], []
    for cam in cameras:
        pix = cam.pixel_grid(config.harvest_stride)
        o, d = cam.pixel_rays(pix)
        _, depth, trans = render_rays(
            field_like, o, d, cam.near, cam.far, config.harvest_samples, rng
        )
        x = o + depth[:, None] * d
        sigma = field_like.query_density(x)
        cnorm = np.linalg.norm(contract(x / scene_radius), axis=1)
        pass_tau = sigma >= config.tau
        accept = pass_tau & (cnorm <= config.scene_bound) & (trans < config.hit_transmittance)
        report.rays_cast += len(o)
        report.passing_tau += int(pass_tau.sum())
        report.in_bounds += int(accept.sum())
        report.per_camera[cam.camera_id] = report.per_camera.get(cam.camera_id, 0) + int(
            accept.sum()
        )
        if accept.any():
            pts.append(x[accept])
            dirs_kept.append(d[accept])

    if not pts:
        return Splats.empty(), report

    x = np.concatenate(pts, axis=0)
    d = np.concatenate(dirs_kept, axis=0)

    # one point per occupied voxel at the dedup resolution (contracted domain)
    res = config.dedup_resolution
    vox = np.floor((contract(x / scene_radius) + 2.0) / 4.0 * res).astype(np.int64)
    vox = np.clip(vox, 0, res - 1)
    key = (vox[:, 0] * res + vox[:, 1]) * res + vox[:, 2]
    _, first = np.unique(key, return_index=True)
    first.sort()
    x, d = x[first], d[first]

    budget = config.max_splats - existing_count
    if len(x) > budget:
        keep = rng.choice(len(x), size=max(budget, 0), replace=False)
        keep.sort()
        x, d = x[keep], d[keep]
        report.capped = True

    n = len(x)
    report.added = n
    if n == 0:
        return Splats.empty(), report

    if n >= 4:
        dist, _ = cKDTree(x).query(x, k=4)
        mean_d = np.maximum(dist[:, 1:].mean(axis=1), 1e-7)
    else:
        mean_d = np.full(n, 4.0 * scene_radius / res)
    log_scales = np.repeat(np.log(mean_d)[:, None], 3, axis=1)

    colors = field_like.query_color(x, d)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    new = Splats(
        positions=x,
        log_scales=log_scales,
        rotations=rotations,
        opacity_logits=np.full(n, float(logit(config.new_opacity))),
        color_logits=logit(np.clip(colors, 1e-4, 1.0 - 1e-4)),
    )
    return new, report


def adaptive_density_control(
    splats: Splats,
    accum: GradAccumulator,
    config: DensifyConfig,
    scene_extent: float,
    rng: np.random.Generator,
) -> tuple[Splats, np.ndarray, EditLog]:
    """Clone small / split large high-gradient splats, then prune.

    Returns (new splats, carry_from, log). ``carry_from[i]`` is the index of
    the surviving splat's source row (for optimizer-moment carry-over) or -1
    for freshly created rows. Gradient accumulators must be reset by the
    caller afterwards.
    """
    n = len(splats)
    log = EditLog(n_before=n)
    if n == 0:
        return splats, np.zeros(0, dtype=np.int64), log

    grads = accum.mean_viewspace()
    max_scale = splats.scales.max(axis=1)
    hot = grads >= config.grad_threshold
    # clone and split each grow the set by one net splat; cap the number of
    # densified candidates so the total never exceeds max_splats
    budget = max(config.max_splats - n, 0)
    if int(hot.sum()) > budget:
        order = np.argsort(-grads, kind="stable")
        allowed = np.zeros(n, dtype=bool)
        allowed[order[:budget]] = True
        hot &= allowed
    small = max_scale <= config.percent_dense * scene_extent
    clone_mask = hot & small
    split_mask = hot & ~small
    log.n_cloned = int(clone_mask.sum())
    log.n_split = int(split_mask.sum())

    parts = [splats]
    carry = [np.arange(n, dtype=np.int64)]

    if clone_mask.any():
        clones = splats.select(clone_mask)
        g = accum.mean_world_grad()[clone_mask]
        gn = np.linalg.norm(g, axis=1, keepdims=True)
        step = np.where(gn > 0, -g / np.where(gn > 0, gn, 1.0), 0.0)
        clones.positions = clones.positions + step * 0.5 * clones.scales.mean(
            axis=1, keepdims=True
        )
        parts.append(clones)
        carry.append(np.full(len(clones), -1, dtype=np.int64))

    if split_mask.any():
        parent = splats.select(split_mask)
        for _ in range(2):
            child = parent.copy()
            eps = rng.standard_normal(child.positions.shape)
            R = quat_to_rotmat(normalize_quaternions(child.rotations))
            child.positions = child.positions + np.einsum(
                "nij,nj->ni", R, eps * child.scales
            )
            child.log_scales = child.log_scales - np.log(config.split_factor)
            parts.append(child)
            carry.append(np.full(len(child), -1, dtype=np.int64))

    merged = Splats.concatenate(parts)
    carry = np.concatenate(carry)

    # split parents are replaced by their children
    drop = np.zeros(len(merged), dtype=bool)
    drop[:n] = split_mask
    low_alpha = merged.opacities < config.eps_alpha
    oversized = merged.scales.max(axis=1) > scene_extent
    log.n_pruned_opacity = int((low_alpha & ~drop).sum())
    log.n_pruned_size = int((oversized & ~low_alpha & ~drop).sum())
    keep = ~(drop | low_alpha | oversized)

    out = merged.select(keep)
    log.n_after = len(out)
    return out, carry[keep], log


def clamp_opacities(splats: Splats, ceiling: float = 0.01) -> int:
    """Opacity reset: alpha <- min(alpha, ceiling). Returns rows touched."""
    cap = float(logit(ceiling))
    mask = splats.opacity_logits > cap
    splats.opacity_logits[mask] = cap
    return int(mask.sum())
