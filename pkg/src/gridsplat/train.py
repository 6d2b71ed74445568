"""Hybrid optimization loop: joint gradient descent of splat parameters and
field parameters under L_total = L_g + lambda1 * L_MSE, with a field-only
warm-up, the harvest/clone/split/prune schedules, and virtual-view
supervision.

The loop is a single logical thread; per-step work (rasterization tiles, ray
batches) fans out inside the kernels and joins before the optimizer update.
All randomness flows from one seeded generator in a fixed order, so runs are
bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np

from .densify import DensifyConfig, adaptive_density_control, clamp_opacities, harvest_points
from .field import FieldConfig, RadianceField, render_rays
from .geometry import Camera
from .metrics import gaussian_loss_and_grad, psnr, ssim
from .rasterizer import GradAccumulator, SplatGradients, rasterize_backward, rasterize_forward
from .splats import PARAM_NAMES, Splats, random_splats
from .warp import VirtualView, make_virtual_view

BACKGROUNDS = {"white": np.ones(3), "black": np.zeros(3)}


@dataclass
class TrainConfig:
    total_iterations: int = 30000
    warmup_iterations: int = 3000  # field-only phase; must precede first harvest
    lambda_ssim: float = 0.2  # weight of the SSIM term inside L_g
    lambda_field: float = 0.1  # lambda1, weight of the field MSE term
    lr_position: float = 1.6e-4  # scaled by scene radius, decays exponentially
    lr_position_final: float = 1.6e-6
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_field: float = 1e-2
    rays_per_batch: int = 4096
    samples_per_ray: int = 64
    seed: int = 0
    background: str = "white"
    color_mode: str = "residual"  # or "field-only"
    deterministic: bool = False
    use_warp: bool = True
    use_harvest: bool = True
    init_random: int = 0  # random splats at start (0 = point-free)
    init_points_path: str | None = None  # optional positions-only list (ablation)
    virtual_interval: int = 10  # apply a virtual view every k post-warm-up steps
    virtual_weight: float = 0.5
    virtual_refresh: int = 500  # regenerate the virtual-view pool every n iters
    virtual_max_angle: float = 10.0  # degrees
    virtual_stride: int = 1
    eval_interval: int = 500  # PSNR cadence in the loss stream (0 = off)
    checkpoint_interval: int = 5000
    densify_stop: int | None = None  # default: total_iterations - 500
    densify: DensifyConfig = dc_field(default_factory=DensifyConfig)
    field: FieldConfig = dc_field(default_factory=FieldConfig)

    def validate(self):
        if not (0.0 <= self.lambda_ssim <= 1.0):
            raise ValueError("lambda_ssim must lie in [0, 1]")
        if self.lambda_field < 0:
            raise ValueError("lambda_field must be >= 0")
        if self.use_harvest and self.densify.harvest_iterations:
            first = min(self.densify.harvest_iterations)
            if self.warmup_iterations >= first:
                raise ValueError(
                    f"warm-up ({self.warmup_iterations}) must end before the first "
                    f"harvest ({first})"
                )
        self.densify.validate(self.total_iterations if self.use_harvest else None)
        if self.background not in BACKGROUNDS:
            raise ValueError(f"unknown background policy {self.background!r}")

    @property
    def densify_stop_iteration(self) -> int:
        if self.densify_stop is not None:
            return self.densify_stop
        return max(self.total_iterations - 500, 0)


class Adam:
    """Per-array adaptive moments (beta1=0.9, beta2=0.999, eps=1e-15) with
    row remapping so moment buffers always shape-match the parameters."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float):
        if name not in self.m:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
            self.t[name] = 0
        m, v = self.m[name], self.v[name]
        self.t[name] += 1
        t = self.t[name]
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad * grad
        mhat = m / (1 - self.beta1**t)
        vhat = v / (1 - self.beta2**t)
        param -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def remap_rows(self, name: str, carry_from: np.ndarray, new_len: int):
        """Rebuild a buffer after a splat edit: rows with carry_from >= 0 keep
        their moments, fresh rows start at zero."""
        if name not in self.m:
            return
        for store in (self.m, self.v):
            old = store[name]
            new = np.zeros((new_len,) + old.shape[1:], dtype=old.dtype)
            src = carry_from >= 0
            new[src] = old[carry_from[src]]
            store[name] = new

    def reset_key(self, name: str):
        if name in self.m:
            self.m[name][:] = 0.0
            self.v[name][:] = 0.0

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
            out[f"t/{name}"] = np.array(self.t[name])
        return out


def expon_lr(step: int, lr_init: float, lr_final: float, max_steps: int) -> float:
    t = min(max(step / max(max_steps, 1), 0.0), 1.0)
    return float(np.exp(np.log(lr_init) * (1 - t) + np.log(lr_final) * t))


@dataclass
class TrainState:
    splats: Splats
    field: RadianceField
    adam: Adam
    iteration: int
    rng: np.random.Generator
    accum: GradAccumulator
    virtual_pool: list[VirtualView] = dc_field(default_factory=list)
    view_queue: list[int] = dc_field(default_factory=list)


@dataclass
class Batch:
    frame_index: int
    camera: Camera
    gt_image: np.ndarray
    ray_origins: np.ndarray
    ray_dirs: np.ndarray
    ray_gt: np.ndarray
    ray_near: float
    ray_far: float
    virtual: VirtualView | None = None


@dataclass
class LossReport:
    iteration: int
    l_g: float
    l_mse: float
    l_virtual: float
    total: float
    n_splats: int
    psnr: float | None = None
    events: list[dict] = dc_field(default_factory=list)

    def as_record(self) -> dict:
        rec = {
            "iteration": self.iteration,
            "l_g": self.l_g,
            "l_mse": self.l_mse,
            "l_virtual": self.l_virtual,
            "total": self.total,
            "n_splats": self.n_splats,
        }
        if self.psnr is not None:
            rec["psnr"] = self.psnr
        return rec


class RunContext:
    """Everything train_step needs besides the mutable state: the dataset
    split, background color, scene scale, and optional output directory for
    diagnostic dumps."""

    def __init__(self, dataset, config: TrainConfig, out_dir=None):
        self.dataset = dataset
        self.config = config
        self.background = BACKGROUNDS[config.background].copy()
        self.scene_radius = dataset.scene_radius
        self.train_frames = dataset.train_frames()
        self.test_frames = dataset.test_frames()
        self.out_dir = out_dir
        cams = {}
        for fr in self.train_frames:
            cams.setdefault(fr.camera.camera_id, []).append(fr)
        self.frames_by_camera = cams


def init_state(ctx: RunContext) -> TrainState:
    cfg = ctx.config
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    field_cfg = cfg.field
    if field_cfg.scene_radius != ctx.scene_radius:
        from dataclasses import replace

        field_cfg = replace(field_cfg, scene_radius=ctx.scene_radius)
        cfg.field = field_cfg
    field = RadianceField.init(field_cfg, rng)
    if cfg.init_points_path:
        splats = splats_from_points(_load_init_points(cfg.init_points_path), rng)
    elif cfg.init_random > 0:
        splats = random_splats(
            cfg.init_random, rng, center=ctx.dataset.centroid(), radius=0.7 * ctx.scene_radius
        )
    else:
        splats = Splats.empty()
    return TrainState(
        splats=splats,
        field=field,
        adam=Adam(),
        iteration=0,
        rng=rng,
        accum=GradAccumulator(len(splats)),
    )


def _load_init_points(path) -> np.ndarray:
    from .scene_io import load_points

    return load_points(path)


def splats_from_points(points: np.ndarray, rng: np.random.Generator) -> Splats:
    """Baseline initialization from an external point list (positions only):
    nearest-neighbor scales, identity rotations, opacity 0.1, gray colors."""
    from scipy.spatial import cKDTree

    from .splats import logit

    n = len(points)
    if n == 0:
        return Splats.empty()
    if n >= 4:
        d, _ = cKDTree(points).query(points, k=4)
        mean_d = np.maximum(d[:, 1:].mean(axis=1), 1e-7)
    else:
        mean_d = np.full(n, 0.1)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return Splats(
        positions=np.asarray(points, dtype=np.float64),
        log_scales=np.repeat(np.log(mean_d)[:, None], 3, axis=1),
        rotations=rotations,
        opacity_logits=np.full(n, float(logit(0.1))),
        color_logits=np.zeros((n, 3)),
    )


def make_batch(state: TrainState, ctx: RunContext) -> Batch:
    cfg = ctx.config
    if not state.view_queue:
        state.view_queue = list(state.rng.permutation(len(ctx.train_frames)))
    fi = state.view_queue.pop()
    frame = ctx.train_frames[fi]
    cam = frame.camera
    # field ray batch from an independently chosen training frame
    rf = ctx.train_frames[int(state.rng.integers(len(ctx.train_frames)))]
    h, w = rf.image.shape[:2]
    pix_idx = state.rng.integers(0, h * w, size=cfg.rays_per_batch)
    iy, ix = pix_idx // w, pix_idx % w
    pix = np.stack([ix + 0.5, iy + 0.5], axis=1).astype(np.float64)
    o, d = rf.camera.pixel_rays(pix)
    return Batch(
        frame_index=frame.index,
        camera=cam,
        gt_image=frame.image,
        ray_origins=o,
        ray_dirs=d,
        ray_gt=rf.image[iy, ix],
        ray_near=rf.camera.near,
        ray_far=rf.camera.far,
    )


def render_view(splats: Splats, field: RadianceField, camera: Camera,
                background: np.ndarray, mode: str):
    """Rasterize with field-supplied splat colors. Returns (output, color cache).

    Colors are queried only for splats that survive culling; the rest never
    influence the image and keep exactly zero gradients."""
    if len(splats) == 0:
        out = rasterize_forward(splats, np.zeros((0, 3)), camera, background)
        return out, None
    from .geometry import project_splats

    proj = project_splats(splats.positions, splats.log_scales, splats.rotations, camera)
    colors = np.zeros((len(splats), 3))
    cache = None
    if len(proj):
        vis = splats.select(proj.indices)
        vis_colors, cache = field.splat_colors(vis, camera, mode=mode)
        colors[proj.indices] = vis_colors
        cache["vis_indices"] = proj.indices
    out = rasterize_forward(splats, colors, camera, background, proj=proj)
    return out, cache


def view_backward(out, color_cache, grad_image, field: RadianceField):
    """Backward through rasterizer and splat-color coupling.

    Returns (SplatGradients with the color-path position term folded in,
    field param grads or None)."""
    grads, dcolors = rasterize_backward(out, grad_image)
    gfield = None
    if color_cache is not None:
        vis = color_cache["vis_indices"]
        dcl, dmu, gfield = field.splat_colors_backward(color_cache, dcolors[vis])
        grads.color_logits[vis] += dcl
        grads.positions[vis] += dmu
    return grads, gfield


def _add_field_grads(total: dict | None, extra: dict | None, scale: float = 1.0):
    if extra is None:
        return total
    extra = {k: v for k, v in extra.items() if not k.startswith("_")}
    if total is None:
        return {k: v * scale if scale != 1.0 else v for k, v in extra.items()}
    for k, v in extra.items():
        total[k] += v * scale if scale != 1.0 else v
    return total


def field_loss(
    field,
    origins: np.ndarray,
    dirs: np.ndarray,
    gt_colors: np.ndarray,
    near: float,
    far: float,
    n_samples: int = 64,
    background: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Summed squared error between field-rendered and ground-truth ray colors
    (background composited before comparison)."""
    colors, _, trans = render_rays(field, origins, dirs, near, far, n_samples, rng)
    if background is not None:
        colors = colors + trans[:, None] * np.asarray(background)
    resid = np.asarray(colors, dtype=np.float64) - gt_colors
    return float(np.sum(resid * resid))


def image_loss_and_gradients(
    splats: Splats,
    field: RadianceField,
    camera: Camera,
    target: np.ndarray,
    background: np.ndarray,
    mode: str = "residual",
):
    """Mean L2 image loss with full analytic gradients through both the
    rasterizer and the splat-color coupling (the surface the gradient-check
    suite pins). Mean, not sum: keeps the loss O(1) so central-difference
    roundoff stays far below the verification floor."""
    out, cache = render_view(splats, field, camera, background, mode)
    diff = out.image - target
    loss = float(np.mean(diff * diff))
    grads, gfield = view_backward(out, cache, (2.0 / diff.size) * diff, field)
    return loss, grads, gfield


def train_step(state: TrainState, batch: Batch, ctx: RunContext) -> LossReport:
    """One hybrid optimization step: warm-up trains the field alone; afterwards
    the real view (and scheduled virtual view) drive the splat branch while the
    ray batch keeps supervising the field, with gradients coupled through the
    splat colors. Densifier schedules run at the end of the step."""
    cfg = ctx.config
    state.iteration += 1
    it = state.iteration
    warm = it <= cfg.warmup_iterations
    lam1 = cfg.lambda_field

    l_g = 0.0
    l_virtual = 0.0
    splat_grads: SplatGradients | None = None
    field_grads: dict | None = None

    if not warm:
        out, cache = render_view(state.splats, state.field, batch.camera,
                                 ctx.background, cfg.color_mode)
        l_g, dimage = gaussian_loss_and_grad(out.image, batch.gt_image, cfg.lambda_ssim)
        splat_grads, gfield = view_backward(out, cache, dimage, state.field)
        field_grads = _add_field_grads(field_grads, gfield)

        if batch.virtual is not None:
            vv = batch.virtual
            vout, vcache = render_view(state.splats, state.field, vv.camera,
                                       ctx.background, cfg.color_mode)
            m = vv.confidence_mask[:, :, None]
            lv, dmasked = gaussian_loss_and_grad(
                vout.image * m, vv.target_image * m, cfg.lambda_ssim
            )
            l_virtual = cfg.virtual_weight * lv
            vgrads, vgfield = view_backward(
                vout, vcache, cfg.virtual_weight * dmasked * m, state.field
            )
            field_grads = _add_field_grads(field_grads, vgfield)
            if splat_grads is not None:
                for name in PARAM_NAMES:
                    arr = getattr(splat_grads, name)
                    arr += getattr(vgrads, name)
                splat_grads.viewspace_norm += vgrads.viewspace_norm
                splat_grads.visible |= vgrads.visible

    # field MSE branch (Eq-style sum of squared errors over the ray batch)
    colors, depths, trans, cache = state.field.render_rays_train(
        batch.ray_origins, batch.ray_dirs, batch.ray_near, batch.ray_far,
        cfg.samples_per_ray, rng=state.rng,
    )
    final = colors + trans[:, None] * ctx.background
    resid = final - batch.ray_gt
    l_mse = float(np.sum(resid * resid))
    if lam1 > 0:
        dfinal = (2.0 * lam1) * resid
        gf = state.field.render_rays_backward(cache, dfinal, dfinal @ ctx.background)
        field_grads = _add_field_grads(field_grads, gf)

    total = l_g + l_virtual + lam1 * l_mse
    if not np.isfinite(total):
        _dump_diagnostics(state, batch, ctx, dict(l_g=l_g, l_virtual=l_virtual, l_mse=l_mse))

    # optimizer updates
    if field_grads is not None:
        for name, param in state.field.param_items():
            state.adam.step(f"field/{name}", param, field_grads[name], cfg.lr_field)
    if splat_grads is not None and len(state.splats):
        sr = ctx.scene_radius
        lr_pos = expon_lr(it, cfg.lr_position, cfg.lr_position_final, cfg.total_iterations) * sr
        lrs = {
            "positions": lr_pos,
            "log_scales": cfg.lr_scale,
            "rotations": cfg.lr_rotation,
            "opacity_logits": cfg.lr_opacity,
            "color_logits": cfg.lr_color,
        }
        for name in PARAM_NAMES:
            state.adam.step(
                f"splats/{name}",
                getattr(state.splats, name),
                getattr(splat_grads, name),
                lrs[name],
            )
        state.splats.normalize_rotations()
        state.accum.add(splat_grads)

    events = _run_schedules(state, ctx)
    rep = LossReport(
        iteration=it,
        l_g=l_g,
        l_mse=l_mse,
        l_virtual=l_virtual,
        total=total,
        n_splats=len(state.splats),
        events=events,
    )
    if cfg.eval_interval and it % cfg.eval_interval == 0 and ctx.test_frames:
        fr = ctx.test_frames[0]
        out, _ = render_view(state.splats, state.field, fr.camera, ctx.background,
                             cfg.color_mode)
        rep.psnr = psnr(out.image, fr.image)
    return rep


def _run_schedules(state: TrainState, ctx: RunContext) -> list[dict]:
    cfg = ctx.config
    dc = cfg.densify
    it = state.iteration
    events: list[dict] = []

    # adaptive density control
    if (
        len(state.splats)
        and it > cfg.warmup_iterations
        and it <= cfg.densify_stop_iteration
        and it % dc.densify_interval == 0
    ):
        new_splats, carry, log = adaptive_density_control(
            state.splats, state.accum, dc, ctx.scene_radius, state.rng
        )
        state.splats = new_splats
        for name in PARAM_NAMES:
            state.adam.remap_rows(f"splats/{name}", carry, len(new_splats))
        state.accum.reset(len(new_splats))
        events.append({"iteration": it, **log.as_record()})

    # opacity reset
    if (
        len(state.splats)
        and it > cfg.warmup_iterations
        and it <= cfg.densify_stop_iteration
        and dc.opacity_reset_interval
        and it % dc.opacity_reset_interval == 0
    ):
        touched = clamp_opacities(state.splats)
        state.adam.reset_key("splats/opacity_logits")
        events.append({"iteration": it, "op": "opacity_reset", "clamped": touched})

    # harvest
    if cfg.use_harvest and it in dc.harvest_iterations:
        cams = [fr.camera for fr in ctx.train_frames]
        new, report = harvest_points(
            state.field, cams, dc, state.rng, ctx.scene_radius,
            existing_count=len(state.splats),
        )
        if len(new):
            n_old = len(state.splats)
            state.splats = Splats.concatenate([state.splats, new])
            carry = np.concatenate(
                [np.arange(n_old, dtype=np.int64), np.full(len(new), -1, dtype=np.int64)]
            )
            for name in PARAM_NAMES:
                state.adam.remap_rows(f"splats/{name}", carry, len(state.splats))
            state.accum.reset(len(state.splats))
        events.append({"iteration": it, **report.as_record()})

    # virtual-view pool refresh; an empty pool (all views rejected) retries on
    # a slower cadence so a weak field does not pay full renders every step
    if (
        cfg.use_warp
        and it > cfg.warmup_iterations
        and (
            it % cfg.virtual_refresh == 0
            or (not state.virtual_pool and (it - cfg.warmup_iterations - 1) % 25 == 0)
        )
    ):
        pool = []
        for cam_id in sorted(ctx.frames_by_camera):
            frames = ctx.frames_by_camera[cam_id]
            for _ in range(4):  # resample on rejection
                fr = frames[int(state.rng.integers(len(frames)))]
                vv = make_virtual_view(
                    state.field,
                    fr.camera,
                    state.rng,
                    stride=cfg.virtual_stride,
                    max_angle_deg=cfg.virtual_max_angle,
                    n_samples=cfg.samples_per_ray,
                    background=ctx.background,
                    iteration=it,
                )
                if vv is not None:
                    pool.append(vv)
                    break
        if pool:
            state.virtual_pool = pool
            events.append({"iteration": it, "op": "warp_refresh", "views": len(pool)})
    return events


def _dump_diagnostics(state: TrainState, batch: Batch, ctx: RunContext, losses: dict):
    msg = f"non-finite loss at iteration {state.iteration}: {losses}"
    if ctx.out_dir is not None:
        import os

        path = os.path.join(str(ctx.out_dir), f"diagnostic_iter{state.iteration}.npz")
        np.savez(
            path,
            frame_index=batch.frame_index,
            gt_image=batch.gt_image,
            ray_origins=batch.ray_origins,
            ray_dirs=batch.ray_dirs,
            ray_gt=batch.ray_gt,
            positions=state.splats.positions,
            opacity_logits=state.splats.opacity_logits,
        )
        msg += f" (batch dumped to {path})"
    raise RuntimeError(msg)


def should_apply_virtual(state: TrainState, ctx: RunContext) -> VirtualView | None:
    cfg = ctx.config
    it = state.iteration + 1  # the step about to run
    if (
        not cfg.use_warp
        or it <= cfg.warmup_iterations
        or not state.virtual_pool
        or cfg.virtual_interval <= 0
        or it % cfg.virtual_interval != 0
    ):
        return None
    k = (it // cfg.virtual_interval) % len(state.virtual_pool)
    return state.virtual_pool[k]


def evaluate(splats: Splats, field: RadianceField, frames, config: TrainConfig):
    """PSNR and SSIM per held-out view plus arithmetic means."""
    if not frames:
        raise ValueError("empty test set")
    bg = BACKGROUNDS[config.background]
    rows = []
    for fr in frames:
        out, _ = render_view(splats, field, fr.camera, bg, config.color_mode)
        rows.append(
            {
                "index": fr.index,
                "camera_id": fr.camera.camera_id,
                "psnr": psnr(out.image, fr.image),
                "ssim": ssim(out.image, fr.image),
            }
        )
    return {
        "per_view": rows,
        "mean_psnr": float(np.mean([r["psnr"] for r in rows])),
        "mean_ssim": float(np.mean([r["ssim"] for r in rows])),
    }


def train(dataset, config: TrainConfig, out_dir=None, progress=None) -> TrainState:
    """Run the full loop; writes loss/event streams and periodic checkpoints
    when ``out_dir`` is given. Returns the final state."""
    import os

    ctx = RunContext(dataset, config, out_dir)
    state = init_state(ctx)
    loss_fh = events_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
        loss_fh = open(os.path.join(out_dir, "loss_stream.jsonl"), "w")
        events_fh = open(os.path.join(out_dir, "events.jsonl"), "w")
        with open(os.path.join(out_dir, "train_config.json"), "w") as f:
            json.dump(asdict(config), f, indent=2, default=str)

    try:
        for _ in range(config.total_iterations):
            batch = make_batch(state, ctx)
            batch.virtual = should_apply_virtual(state, ctx)
            rep = train_step(state, batch, ctx)
            if loss_fh is not None:
                loss_fh.write(json.dumps(rep.as_record(), sort_keys=True) + "\n")
                for ev in rep.events:
                    events_fh.write(json.dumps(ev, sort_keys=True) + "\n")
            if progress is not None:
                progress(rep)
            if (
                out_dir is not None
                and config.checkpoint_interval
                and state.iteration % config.checkpoint_interval == 0
            ):
                save_checkpoint(state, config, os.path.join(out_dir, "checkpoints"))
        if out_dir is not None:
            save_checkpoint(state, config, os.path.join(out_dir, "checkpoints"), tag="final")
    finally:
        if loss_fh is not None:
            loss_fh.close()
            events_fh.close()
    return state


def save_checkpoint(state: TrainState, config: TrainConfig, ckpt_dir, tag=None):
    import os

    from .scene_io import save_splats

    tag = tag or f"iter_{state.iteration:06d}"
    save_splats(state.splats, os.path.join(ckpt_dir, f"{tag}.hogs"))
    state.field.save(os.path.join(ckpt_dir, f"{tag}.hogf"))
    np.savez(
        os.path.join(ckpt_dir, f"{tag}_optimizer.npz"),
        iteration=state.iteration,
        **state.adam.state_arrays(),
    )
