"""Command-line surface: synth / train / render / eval.

Training defaults mirror the full-scale configuration (30k iterations,
harvests at 5k/15k/25k, lambda=0.2, lambda1=0.1); the sizing flags exist so
desk-scale runs can scale everything down.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .densify import DensifyConfig
from .field import FieldConfig, RadianceField
from .metrics import psnr as psnr_metric, ssim as ssim_metric
from .scene_io import load_dataset, load_splats, quantize, save_image
from .synth import PRESETS, SyntheticSceneSpec, generate_synthetic
from .train import BACKGROUNDS, TrainConfig, evaluate, train


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridsplat", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="generate a synthetic scene + oracle renders")
    g = ps.add_mutually_exclusive_group(required=True)
    g.add_argument("--spec", help="scene spec JSON file")
    g.add_argument("--preset", choices=sorted(PRESETS), help="built-in scene preset")
    ps.add_argument("--out", required=True, help="output directory")

    pt = sub.add_parser("train", help="train splats + field on a dataset")
    pt.add_argument("--data", required=True, help="dataset manifest")
    pt.add_argument("--out", required=True, help="run output directory")
    pt.add_argument("--iters", type=int, default=30000)
    pt.add_argument("--lambda", dest="lambda_ssim", type=float, default=0.2)
    pt.add_argument("--lambda1", type=float, default=0.1)
    pt.add_argument("--tau", type=float, default=1.0)
    pt.add_argument("--harvest", default="5000,15000,25000",
                    help="comma-separated harvest iterations")
    pt.add_argument("--no-warp", action="store_true")
    pt.add_argument("--no-harvest", action="store_true")
    pt.add_argument("--color-mode", choices=["residual", "field-only"], default="residual")
    pt.add_argument("--seed", type=int, default=0)
    pt.add_argument("--deterministic", action="store_true")
    pt.add_argument("--warmup", type=int, default=3000)
    pt.add_argument("--rays", type=int, default=4096, help="field rays per batch")
    pt.add_argument("--samples", type=int, default=64, help="quadrature samples per ray")
    pt.add_argument("--bg", choices=sorted(BACKGROUNDS), default="white")
    pt.add_argument("--init-random", type=int, default=0,
                    help="random splats at start (0 = point-free)")
    pt.add_argument("--init-points", help="positions-only ASCII point list (.ply)")
    pt.add_argument("--field-levels", type=int, default=16)
    pt.add_argument("--field-table-log2", type=int, default=19)
    pt.add_argument("--field-res-max", type=int, default=2048)
    pt.add_argument("--grad-threshold", type=float, default=2e-4)
    pt.add_argument("--densify-interval", type=int, default=100)
    pt.add_argument("--densify-stop", type=int, default=None)
    pt.add_argument("--opacity-reset-interval", type=int, default=3000)
    pt.add_argument("--harvest-stride", type=int, default=4)
    pt.add_argument("--max-splats", type=int, default=500000)
    pt.add_argument("--virtual-interval", type=int, default=10)
    pt.add_argument("--virtual-refresh", type=int, default=500)
    pt.add_argument("--eval-interval", type=int, default=500)
    pt.add_argument("--checkpoint-interval", type=int, default=5000)
    pt.add_argument("--quiet", action="store_true")

    pr = sub.add_parser("render", help="render splats + field along a camera manifest")
    pr.add_argument("--scene", required=True, help="splat file (.hogs)")
    pr.add_argument("--field", required=True, help="field checkpoint (.hogf)")
    pr.add_argument("--camera", required=True, help="manifest of poses to render")
    pr.add_argument("--out", required=True)
    pr.add_argument("--bg", choices=sorted(BACKGROUNDS), default="white")
    pr.add_argument("--color-mode", choices=["residual", "field-only"], default="residual")

    pe = sub.add_parser("eval", help="evaluate on the held-out split of a dataset")
    pe.add_argument("--scene", required=True, help="splat file (.hogs)")
    pe.add_argument("--field", required=True, help="field checkpoint (.hogf)")
    pe.add_argument("--data", required=True, help="dataset manifest")
    pe.add_argument("--report", required=True, help="report file to write")
    pe.add_argument("--bg", choices=sorted(BACKGROUNDS), default="white")
    pe.add_argument("--color-mode", choices=["residual", "field-only"], default="residual")
    return p


def cmd_synth(args) -> int:
    if args.preset:
        spec = PRESETS[args.preset]()
    else:
        with open(args.spec) as fh:
            spec = SyntheticSceneSpec.from_json(fh.read())
    ds = generate_synthetic(spec, args.out)
    print(f"wrote {len(ds)} frames to {args.out} (scene radius {ds.scene_radius:.3f} m)")
    return 0


def cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    harvest = tuple(int(v) for v in args.harvest.split(",") if v) if args.harvest else ()
    config = TrainConfig(
        total_iterations=args.iters,
        warmup_iterations=min(args.warmup, args.iters),
        lambda_ssim=args.lambda_ssim,
        lambda_field=args.lambda1,
        rays_per_batch=args.rays,
        samples_per_ray=args.samples,
        seed=args.seed,
        background=args.bg,
        color_mode=args.color_mode,
        deterministic=args.deterministic,
        use_warp=not args.no_warp,
        use_harvest=not args.no_harvest and bool(harvest),
        init_random=args.init_random,
        init_points_path=args.init_points,
        virtual_interval=args.virtual_interval,
        virtual_refresh=args.virtual_refresh,
        eval_interval=args.eval_interval,
        checkpoint_interval=args.checkpoint_interval,
        densify_stop=args.densify_stop,
        densify=DensifyConfig(
            tau=args.tau,
            grad_threshold=args.grad_threshold,
            densify_interval=args.densify_interval,
            harvest_iterations=harvest,
            opacity_reset_interval=args.opacity_reset_interval,
            max_splats=args.max_splats,
            harvest_stride=args.harvest_stride,
        ),
        field=FieldConfig(
            levels=args.field_levels,
            table_log2=args.field_table_log2,
            res_max=args.field_res_max,
        ),
    )
    if args.iters > 0:
        config.validate()

    progress = None
    if not args.quiet:
        from tqdm import tqdm

        bar = tqdm(total=args.iters, unit="it", dynamic_ncols=True)

        def progress(rep):
            bar.update(1)
            if rep.iteration % 50 == 0:
                bar.set_postfix(
                    total=f"{rep.total:.4f}", splats=rep.n_splats,
                    psnr=f"{rep.psnr:.2f}" if rep.psnr is not None else "-",
                )

    state = train(dataset, config, out_dir=args.out, progress=progress)
    if not args.quiet:
        bar.close()

    # loss-curve figure alongside the loss stream
    loss_path = os.path.join(args.out, "loss_stream.jsonl")
    if os.path.isfile(loss_path) and args.iters > 0:
        from .plots import save_loss_curves

        save_loss_curves(loss_path, os.path.join(args.out, "loss_curves.png"))

    test = dataset.test_frames()
    if test and args.iters > 0:
        metrics = evaluate(state.splats, state.field, test, config)
        _write_report(
            os.path.join(args.out, "final_metrics.txt"),
            metrics,
            scene=os.path.join(args.out, "checkpoints", "final.hogs"),
            field=os.path.join(args.out, "checkpoints", "final.hogf"),
            data=args.data,
        )
        print(
            f"final held-out PSNR {metrics['mean_psnr']:.2f} dB, "
            f"SSIM {metrics['mean_ssim']:.4f}, {len(state.splats)} splats"
        )
    return 0


def cmd_render(args) -> int:
    splats = load_splats(args.scene)
    field = RadianceField.load(args.field)
    dataset = load_dataset(args.camera, require_images=False)
    os.makedirs(args.out, exist_ok=True)
    from .train import render_view

    bg = BACKGROUNDS[args.bg]
    for fr in dataset.frames:
        out, _ = render_view(splats, field, fr.camera, bg, args.color_mode)
        save_image(os.path.join(args.out, f"render_{fr.index:04d}.png"), out.image)
    print(f"rendered {len(dataset)} views to {args.out}")
    return 0


def cmd_eval(args) -> int:
    splats = load_splats(args.scene)
    field = RadianceField.load(args.field)
    dataset = load_dataset(args.data)
    test = dataset.test_frames()
    if not test:
        raise ValueError("dataset has no test frames (every tenth index)")
    from .train import render_view

    bg = BACKGROUNDS[args.bg]
    rows = []
    for fr in test:
        out, _ = render_view(splats, field, fr.camera, bg, args.color_mode)
        render8 = quantize(out.image)  # metrics in the 8-bit domain
        rows.append(
            {
                "index": fr.index,
                "camera_id": fr.camera.camera_id,
                "psnr": psnr_metric(render8, fr.image),
                "ssim": ssim_metric(render8, fr.image),
            }
        )
    metrics = {
        "per_view": rows,
        "mean_psnr": float(np.mean([r["psnr"] for r in rows])),
        "mean_ssim": float(np.mean([r["ssim"] for r in rows])),
    }
    _write_report(args.report, metrics, scene=args.scene, field=args.field, data=args.data)
    print(f"PSNR {metrics['mean_psnr']:.2f} dB  SSIM {metrics['mean_ssim']:.4f}")
    return 0


def _write_report(path, metrics, scene, field, data):
    rows = metrics["per_view"]
    with open(path, "w") as fh:
        fh.write("# gridsplat eval report\n")
        fh.write(f"# scene: {scene}\n# field: {field}\n# data: {data}\n")
        fh.write("index\tcamera\tpsnr_db\tssim\n")
        for r in rows:
            fh.write(f"{r['index']}\t{r['camera_id']}\t{r['psnr']:.6f}\t{r['ssim']:.6f}\n")
        fh.write(f"mean\t-\t{metrics['mean_psnr']:.6f}\t{metrics['mean_ssim']:.6f}\n")
    from .plots import save_metric_bars

    fig_path = os.path.splitext(path)[0] + ".png"
    save_metric_bars(rows, metrics["mean_psnr"], metrics["mean_ssim"], fig_path)


def read_report(path) -> dict:
    """Parse an eval report back into rows + means (used by tests/scripts)."""
    rows = []
    means = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("index\t"):
                continue
            idx, cam, p, s = line.split("\t")
            if idx == "mean":
                means = {"mean_psnr": float(p), "mean_ssim": float(s)}
            else:
                rows.append(
                    {"index": int(idx), "camera_id": cam, "psnr": float(p), "ssim": float(s)}
                )
    return {"per_view": rows, **means}


_COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
