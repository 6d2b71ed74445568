"""Tile-based forward splatting with alpha compositing and the full analytic
backward pass.

The hot loops are numba kernels parallelized over tiles. Every parallel
region writes disjoint outputs and every floating-point reduction runs in a
fixed order (per-pixel front-to-back inside a tile; instance-to-splat
reduction in sorted instance order), so renders and gradients are
bit-reproducible regardless of thread count or schedule. The ``deterministic``
flag required by the API contract is therefore always honored on this
backend.

Backward memory is proportional to pixels plus tile-list instances, not
pixels x splats: the blend is replayed back-to-front per pixel from the
stored final transmittance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .geometry import Camera, SplatProjection, project_splats, project_splats_backward
from .splats import Splats

ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
T_TERMINATE = 1e-4
DEFAULT_TILE = 16


@dataclass
class TileLists:
    """Per-tile, depth-sorted splat instance lists.

    ``instance_splat`` holds indices into the *visible* (projected) arrays;
    ``tile_ranges[t]:tile_ranges[t+1]`` is tile t's slice, sorted front-to-back
    with depth ties broken by ascending splat index.
    """

    instance_splat: np.ndarray  # (I,) int64
    instance_tile: np.ndarray  # (I,) int64
    tile_ranges: np.ndarray  # (n_tiles+1,) int64
    tiles_x: int
    tiles_y: int
    tile_size: int

    @property
    def n_instances(self) -> int:
        return len(self.instance_splat)

    def splats_in_tile(self, tx: int, ty: int) -> np.ndarray:
        t = ty * self.tiles_x + tx
        return self.instance_splat[self.tile_ranges[t] : self.tile_ranges[t + 1]]


@njit(cache=True)
def _fill_instances(rect_min, rect_max, offsets, tiles_x, out_tile, out_splat):
    for s in range(rect_min.shape[0]):
        k = offsets[s]
        for ty in range(rect_min[s, 1], rect_max[s, 1]):
            for tx in range(rect_min[s, 0], rect_max[s, 0]):
                out_tile[k] = ty * tiles_x + tx
                out_splat[k] = s
                k += 1


def bin_and_sort(
    proj: SplatProjection, width: int, height: int, tile_size: int = DEFAULT_TILE
) -> TileLists:
    """Assign each projected splat to every tile its radius square overlaps and
    sort each tile's list front-to-back (depth, then splat index)."""
    tiles_x = (width + tile_size - 1) // tile_size
    tiles_y = (height + tile_size - 1) // tile_size
    M = len(proj)
    if M == 0:
        return TileLists(
            instance_splat=np.zeros(0, dtype=np.int64),
            instance_tile=np.zeros(0, dtype=np.int64),
            tile_ranges=np.zeros(tiles_x * tiles_y + 1, dtype=np.int64),
            tiles_x=tiles_x,
            tiles_y=tiles_y,
            tile_size=tile_size,
        )

    lo = np.floor((proj.mean2d - proj.radius[:, None]) / tile_size).astype(np.int64)
    hi = np.floor((proj.mean2d + proj.radius[:, None]) / tile_size).astype(np.int64) + 1
    rect_min = np.clip(lo, 0, [tiles_x, tiles_y])
    rect_max = np.clip(hi, 0, [tiles_x, tiles_y])
    rect_max = np.maximum(rect_max, rect_min)

    counts = np.prod(rect_max - rect_min, axis=1)
    offsets = np.zeros(M, dtype=np.int64)
    np.cumsum(counts[:-1], out=offsets[1:])
    total = int(offsets[-1] + counts[-1]) if M else 0

    inst_tile = np.empty(total, dtype=np.int64)
    inst_splat = np.empty(total, dtype=np.int64)
    _fill_instances(
        np.ascontiguousarray(rect_min),
        np.ascontiguousarray(rect_max),
        offsets,
        tiles_x,
        inst_tile,
        inst_splat,
    )

    order = np.lexsort((inst_splat, proj.depth[inst_splat], inst_tile))
    inst_tile = inst_tile[order]
    inst_splat = inst_splat[order]
    tile_ranges = np.searchsorted(inst_tile, np.arange(tiles_x * tiles_y + 1))
    return TileLists(
        instance_splat=np.ascontiguousarray(inst_splat),
        instance_tile=np.ascontiguousarray(inst_tile),
        tile_ranges=np.ascontiguousarray(tile_ranges),
        tiles_x=tiles_x,
        tiles_y=tiles_y,
        tile_size=tile_size,
    )


@njit(cache=True, parallel=True)
def _forward_kernel(
    mean2d,
    conic,
    opacity,
    colors,
    inst_splat,
    tile_ranges,
    tiles_x,
    tile_size,
    height,
    width,
    background,
    image,
    t_final,
    last_idx,
    n_contrib,
):
    n_tiles = tile_ranges.shape[0] - 1
    for tile in prange(n_tiles):
        lo = tile_ranges[tile]
        hi = tile_ranges[tile + 1]
        x0 = (tile % tiles_x) * tile_size
        y0 = (tile // tiles_x) * tile_size
        for py in range(y0, min(y0 + tile_size, height)):
            for px in range(x0, min(x0 + tile_size, width)):
                pxf = px + 0.5
                pyf = py + 0.5
                T = 1.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                cnt = 0
                last = lo
                for ii in range(lo, hi):
                    s = inst_splat[ii]
                    dx = pxf - mean2d[s, 0]
                    dy = pyf - mean2d[s, 1]
                    power = (
                        -0.5 * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy)
                        - conic[s, 1] * dx * dy
                    )
                    if power > 0.0:
                        continue
                    alpha = opacity[s] * np.exp(power)
                    if alpha > ALPHA_CLAMP:
                        alpha = ALPHA_CLAMP
                    if alpha < ALPHA_SKIP:
                        continue
                    test_T = T * (1.0 - alpha)
                    if test_T < T_TERMINATE:
                        break
                    w = alpha * T
                    cr += w * colors[s, 0]
                    cg += w * colors[s, 1]
                    cb += w * colors[s, 2]
                    T = test_T
                    cnt += 1
                    last = ii + 1
                image[py, px, 0] = cr + T * background[0]
                image[py, px, 1] = cg + T * background[1]
                image[py, px, 2] = cb + T * background[2]
                t_final[py, px] = T
                last_idx[py, px] = last
                n_contrib[py, px] = cnt


@njit(cache=True, parallel=True)
def _backward_kernel(
    mean2d,
    conic,
    opacity,
    colors,
    inst_splat,
    tile_ranges,
    tiles_x,
    tile_size,
    height,
    width,
    background,
    t_final,
    last_idx,
    grad_image,
    inst_grads,
):
    n_tiles = tile_ranges.shape[0] - 1
    for tile in prange(n_tiles):
        lo = tile_ranges[tile]
        x0 = (tile % tiles_x) * tile_size
        y0 = (tile // tiles_x) * tile_size
        for py in range(y0, min(y0 + tile_size, height)):
            for px in range(x0, min(x0 + tile_size, width)):
                pxf = px + 0.5
                pyf = py + 0.5
                dLr = grad_image[py, px, 0]
                dLg = grad_image[py, px, 1]
                dLb = grad_image[py, px, 2]
                if dLr == 0.0 and dLg == 0.0 and dLb == 0.0:
                    continue
                T_fin = t_final[py, px]
                bg_dot = (
                    background[0] * dLr + background[1] * dLg + background[2] * dLb
                )
                T = T_fin
                acc_r = 0.0
                acc_g = 0.0
                acc_b = 0.0
                last_alpha = 0.0
                last_r = 0.0
                last_g = 0.0
                last_b = 0.0
                for ii in range(last_idx[py, px] - 1, lo - 1, -1):
                    s = inst_splat[ii]
                    dx = pxf - mean2d[s, 0]
                    dy = pyf - mean2d[s, 1]
                    A = conic[s, 0]
                    B = conic[s, 1]
                    C = conic[s, 2]
                    power = -0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy
                    if power > 0.0:
                        continue
                    G = np.exp(power)
                    raw_alpha = opacity[s] * G
                    clamped = raw_alpha > ALPHA_CLAMP
                    alpha = ALPHA_CLAMP if clamped else raw_alpha
                    if alpha < ALPHA_SKIP:
                        continue
                    T = T / (1.0 - alpha)  # transmittance in front of this splat
                    w = alpha * T

                    inst_grads[ii, 6] += w * dLr
                    inst_grads[ii, 7] += w * dLg
                    inst_grads[ii, 8] += w * dLb

                    # suffix color accumulated behind this splat
                    acc_r = last_alpha * last_r + (1.0 - last_alpha) * acc_r
                    acc_g = last_alpha * last_g + (1.0 - last_alpha) * acc_g
                    acc_b = last_alpha * last_b + (1.0 - last_alpha) * acc_b
                    last_r = colors[s, 0]
                    last_g = colors[s, 1]
                    last_b = colors[s, 2]
                    last_alpha = alpha

                    dalpha = T * (
                        (colors[s, 0] - acc_r) * dLr
                        + (colors[s, 1] - acc_g) * dLg
                        + (colors[s, 2] - acc_b) * dLb
                    )
                    dalpha += -(T_fin / (1.0 - alpha)) * bg_dot

                    if clamped:
                        continue  # d(alpha)/d(opacity, power) = 0 at the clamp
                    dopa = G * dalpha
                    dpower = alpha * dalpha
                    inst_grads[ii, 2] += -0.5 * dx * dx * dpower
                    inst_grads[ii, 3] += -dx * dy * dpower
                    inst_grads[ii, 4] += -0.5 * dy * dy * dpower
                    inst_grads[ii, 5] += dopa
                    ddx = -(A * dx + B * dy) * dpower
                    ddy = -(B * dx + C * dy) * dpower
                    inst_grads[ii, 0] += -ddx
                    inst_grads[ii, 1] += -ddy


@njit(cache=True, parallel=True)
def _reduce_instances(inst_grads, order, starts, out):
    for s in prange(starts.shape[0] - 1):
        for k in range(starts[s], starts[s + 1]):
            ii = order[k]
            for c in range(9):
                out[s, c] += inst_grads[ii, c]


@dataclass
class RenderOutput:
    """Composited image plus the per-pixel statistics densification consumes."""

    image: np.ndarray  # (H,W,3) linear RGB in [0,1]
    accum_alpha: np.ndarray  # (H,W) = 1 - final transmittance
    contrib_count: np.ndarray  # (H,W) int32, splats blended per pixel
    _cache: dict = field(default_factory=dict, repr=False)


@dataclass
class SplatGradients:
    """Per-splat parameter gradients from one backward pass, plus the
    view-space positional statistics consumed by adaptive density control."""

    positions: np.ndarray  # (N,3)
    log_scales: np.ndarray  # (N,3)
    rotations: np.ndarray  # (N,4)
    opacity_logits: np.ndarray  # (N,)
    color_logits: np.ndarray  # (N,3) filled by splat-color backward, zero here
    viewspace_norm: np.ndarray  # (N,) |dL/dmean2d| in half-image units
    visible: np.ndarray  # (N,) bool

    @classmethod
    def zeros(cls, n: int) -> "SplatGradients":
        return cls(
            positions=np.zeros((n, 3)),
            log_scales=np.zeros((n, 3)),
            rotations=np.zeros((n, 4)),
            opacity_logits=np.zeros(n),
            color_logits=np.zeros((n, 3)),
            viewspace_norm=np.zeros(n),
            visible=np.zeros(n, dtype=bool),
        )


class GradAccumulator:
    """Monotone accumulators reset by the densifier: view-space positional
    gradient norms, hit counts, and mean world-space position gradients."""

    def __init__(self, n: int):
        self.viewspace_sum = np.zeros(n)
        self.hits = np.zeros(n, dtype=np.int64)
        self.world_grad_sum = np.zeros((n, 3))

    def __len__(self):
        return len(self.viewspace_sum)

    def add(self, grads: SplatGradients):
        vis = grads.visible
        self.viewspace_sum[vis] += grads.viewspace_norm[vis]
        self.hits[vis] += 1
        self.world_grad_sum[vis] += grads.positions[vis]

    def mean_viewspace(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            g = self.viewspace_sum / self.hits
        return np.nan_to_num(g, nan=0.0, posinf=0.0)

    def mean_world_grad(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            g = self.world_grad_sum / self.hits[:, None]
        return np.nan_to_num(g, nan=0.0, posinf=0.0)

    def reset(self, n: int | None = None):
        self.__init__(len(self) if n is None else n)


def rasterize_forward(
    splats: Splats,
    colors: np.ndarray,
    camera: Camera,
    background: np.ndarray,
    tile_size: int = DEFAULT_TILE,
    proj: SplatProjection | None = None,
) -> RenderOutput:
    """Project, bin, and composite ``splats`` with per-splat ``colors``.

    colors must already be view-dependent (the field module supplies them) and
    lie in [0,1]^3. Zero splats yields the pure background.
    """
    H, W = camera.height, camera.width
    background = np.asarray(background, dtype=np.float64)
    if proj is None:
        proj = project_splats(splats.positions, splats.log_scales, splats.rotations, camera)
    tiles = bin_and_sort(proj, W, H, tile_size)

    image = np.empty((H, W, 3), dtype=np.float64)
    t_final = np.ones((H, W), dtype=np.float64)
    last_idx = np.zeros((H, W), dtype=np.int64)
    n_contrib = np.zeros((H, W), dtype=np.int32)

    vis_colors = np.ascontiguousarray(colors[proj.indices], dtype=np.float64)
    vis_opacity = np.ascontiguousarray(splats.opacities[proj.indices])
    if len(proj) == 0:
        image[:] = background
    else:
        _forward_kernel(
            proj.mean2d,
            proj.conic,
            vis_opacity,
            vis_colors,
            tiles.instance_splat,
            tiles.tile_ranges,
            tiles.tiles_x,
            tiles.tile_size,
            H,
            W,
            background,
            image,
            t_final,
            last_idx,
            n_contrib,
        )

    out = RenderOutput(image=image, accum_alpha=1.0 - t_final, contrib_count=n_contrib)
    out._cache = dict(
        proj=proj,
        tiles=tiles,
        splats=splats,
        background=background,
        t_final=t_final,
        last_idx=last_idx,
        vis_colors=vis_colors,
        vis_opacity=vis_opacity,
        camera=camera,
    )
    return out


def rasterize_backward(
    render: RenderOutput,
    grad_image: np.ndarray,
    deterministic: bool = True,
) -> tuple[SplatGradients, np.ndarray]:
    """Exact reverse-mode of rasterize_forward.

    Returns per-splat parameter gradients and the gradient w.r.t. the input
    per-splat colors (N,3). Splats culled or skipped in the forward pass get
    exactly zero. ``deterministic`` is accepted per the API contract; the CPU
    reduction is bit-reproducible in both modes.
    """
    cache = render._cache
    proj: SplatProjection = cache["proj"]
    tiles: TileLists = cache["tiles"]
    splats: Splats = cache["splats"]
    camera: Camera = cache["camera"]
    if grad_image.shape != render.image.shape:
        raise ValueError(
            f"grad_image shape {grad_image.shape} != image shape {render.image.shape}"
        )

    N = len(splats)
    grads = SplatGradients.zeros(N)
    dcolors = np.zeros((N, 3))
    if len(proj) == 0:
        return grads, dcolors

    inst_grads = np.zeros((tiles.n_instances, 9), dtype=np.float64)
    _backward_kernel(
        proj.mean2d,
        proj.conic,
        cache["vis_opacity"],
        cache["vis_colors"],
        tiles.instance_splat,
        tiles.tile_ranges,
        tiles.tiles_x,
        tiles.tile_size,
        camera.height,
        camera.width,
        cache["background"],
        cache["t_final"],
        cache["last_idx"],
        np.ascontiguousarray(grad_image, dtype=np.float64),
        inst_grads,
    )

    # deterministic instance -> splat reduction in sorted instance order
    M = len(proj)
    order = np.argsort(tiles.instance_splat, kind="stable")
    starts = np.searchsorted(tiles.instance_splat[order], np.arange(M + 1))
    per_splat = np.zeros((M, 9), dtype=np.float64)
    _reduce_instances(inst_grads, order, starts, per_splat)

    dmean2d = per_splat[:, 0:2]
    dconic = per_splat[:, 2:5]
    dopacity = per_splat[:, 5]
    dcolors[proj.indices] = per_splat[:, 6:9]

    dpos_v, dls_v, drot_v = project_splats_backward(
        proj, splats.log_scales, splats.rotations, dmean2d, dconic
    )
    opa = cache["vis_opacity"]
    dlogit_v = dopacity * opa * (1.0 - opa)

    idx = proj.indices
    grads.positions[idx] = dpos_v
    grads.log_scales[idx] = dls_v
    grads.rotations[idx] = drot_v
    grads.opacity_logits[idx] = dlogit_v
    grads.visible[idx] = True
    # view-space statistic in half-image units so thresholds are
    # resolution-independent (NDC convention of the splatting baseline)
    scale = np.array([camera.width * 0.5, camera.height * 0.5])
    grads.viewspace_norm[idx] = np.linalg.norm(dmean2d * scale, axis=1)
    return grads, dcolors
