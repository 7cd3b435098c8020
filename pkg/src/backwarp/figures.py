"""Matplotlib renderings that accompany the delimited/JSON reports."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_SAVE_KW = dict(dpi=110, metadata={"Software": None})


def render_loss_curves(log_path, out_png) -> None:
    """Frame/flow/total loss per step from a JSON-lines training log."""
    steps, frame, flow, total = [], [], [], []
    for line in Path(log_path).read_text().splitlines():
        rec = json.loads(line)
        steps.append(rec["step"])
        frame.append(rec["frame_loss"])
        flow.append(rec["flow_loss"])
        total.append(rec["total"])
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, total, label="total", lw=1.2)
    if any(v is not None for v in frame):
        ax.plot([s for s, v in zip(steps, frame) if v is not None],
                [v for v in frame if v is not None], label="frame", lw=0.9)
    if any(v is not None for v in flow):
        ax.plot([s for s, v in zip(steps, flow) if v is not None],
                [v for v in flow if v is not None], label="flow", lw=0.9)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(out_png, **_SAVE_KW)
    plt.close(fig)


def render_quality_per_frame(report_dict: dict, out_png) -> None:
    """Mean PSNR/SSIM against latent frame position."""
    psnr = report_dict["per_frame_psnr"]
    ssim = report_dict["per_frame_ssim"]
    idx = list(range(len(psnr)))
    fig, ax1 = plt.subplots(figsize=(7, 4))
    ax1.plot(idx, psnr, "o-", color="tab:blue", label="PSNR")
    ax1.set_xlabel("latent frame position")
    ax1.set_ylabel("PSNR (dB)", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(idx, ssim, "s--", color="tab:orange", label="SSIM")
    ax2.set_ylabel("SSIM", color="tab:orange")
    n = len(psnr) // 2
    for ref in (n // 2, n + n // 2):
        ax1.axvline(ref, color="gray", ls=":", lw=0.8)
    ax1.set_title("reconstruction quality per frame (reference frames dotted)")
    fig.tight_layout()
    fig.savefig(out_png, **_SAVE_KW)
    plt.close(fig)


def render_epe_per_flow(report_dict: dict, out_png) -> None:
    """Mean endpoint error per estimated flow pair."""
    epe = report_dict.get("per_flow_epe") or []
    if not epe:
        return
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(range(len(epe)), epe, color="tab:green")
    ax.set_xlabel("flow pair index (non-middle -> ref0, then -> ref1)")
    ax.set_ylabel("EPE (px)")
    ax.set_title("endpoint error per flow")
    fig.tight_layout()
    fig.savefig(out_png, **_SAVE_KW)
    plt.close(fig)
