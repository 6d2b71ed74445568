"""Matplotlib figures written next to the delimited outputs: training loss
curves from the loss stream, and per-view metric bars from eval reports.
"""

from __future__ import annotations

import json

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def save_loss_curves(loss_jsonl_path, out_png):
    its, l_g, l_mse, total, psnr_it, psnr_v, n_splats = [], [], [], [], [], [], []
    with open(loss_jsonl_path) as fh:
        for line in fh:
            rec = json.loads(line)
            its.append(rec["iteration"])
            l_g.append(rec["l_g"])
            l_mse.append(rec["l_mse"])
            total.append(rec["total"])
            n_splats.append(rec["n_splats"])
            if "psnr" in rec:
                psnr_it.append(rec["iteration"])
                psnr_v.append(rec["psnr"])
    if not its:
        return
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    ax = axes[0]
    ax.plot(its, total, lw=0.8, label="total")
    ax.plot(its, l_g, lw=0.8, label="splat loss")
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_title("losses")
    ax.legend(fontsize=8)
    ax2 = axes[1]
    ax2.plot(its, l_mse, lw=0.8, color="tab:green")
    ax2.set_yscale("log")
    ax2.set_xlabel("iteration")
    ax2.set_title("field MSE (sum over ray batch)")
    ax3 = axes[2]
    ax3.plot(its, n_splats, lw=1.0, color="tab:gray", label="splats")
    ax3.set_xlabel("iteration")
    ax3.set_ylabel("splat count")
    if psnr_v:
        ax3b = ax3.twinx()
        ax3b.plot(psnr_it, psnr_v, "o-", ms=2.5, lw=0.8, color="tab:red", label="PSNR")
        ax3b.set_ylabel("held-out PSNR (dB)")
    ax3.set_title("model size / quality")
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)


def save_metric_bars(rows, mean_psnr, mean_ssim, out_png):
    """Per-view PSNR/SSIM bars from eval rows (dicts with index/psnr/ssim)."""
    idx = [str(r["index"]) for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.4))
    ax1.bar(idx, [r["psnr"] for r in rows], color="tab:blue")
    ax1.axhline(mean_psnr, color="tab:red", lw=1.0, ls="--", label=f"mean {mean_psnr:.2f} dB")
    ax1.set_xlabel("test frame")
    ax1.set_ylabel("PSNR (dB)")
    ax1.legend(fontsize=8)
    ax2.bar(idx, [r["ssim"] for r in rows], color="tab:orange")
    ax2.axhline(mean_ssim, color="tab:red", lw=1.0, ls="--", label=f"mean {mean_ssim:.3f}")
    ax2.set_xlabel("test frame")
    ax2.set_ylabel("SSIM")
    ax2.set_ylim(0, 1.05)
    ax2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)
