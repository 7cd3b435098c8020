"""PSNR, SSIM, endpoint error and the two evaluation protocols.

Interpolation quality scores every reconstructed latent frame of a pair;
deblurring quality restricts the same scores to the two reference frames.
Evaluation applies the temporal ordering rule before scoring and also runs
the copy-blur baseline (every latent frame predicted as its blurry input),
which anchors the acceptance comparison.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DimensionError
from .indexing import FrameIndexing
from .model import Model, ModelConfig
from .ordering import decide_order_from_output, apply_order
from .synth import DatasetManifest, load_sample
from .tensor import no_grad

PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for images in [0, 1]; identical images report the cap."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: shapes differ ({a.shape} vs {b.shape})")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return PSNR_CAP
    return min(float(10.0 * np.log10(1.0 / mse)), PSNR_CAP)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of a 2-D image with a 1-D kernel."""
    from numpy.lib.stride_tricks import sliding_window_view
    t = sliding_window_view(img, k.size, axis=0) @ k
    return sliding_window_view(t, k.size, axis=1) @ k


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Structural similarity with a Gaussian window, per channel then averaged.

    Follows the classic formulation (Gaussian 11x11, sigma 1.5, population
    statistics); the mean is taken over the valid interior of the map.
    """
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shapes differ ({a.shape} vs {b.shape})")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    elif a.ndim == 3 and a.shape[-1] in (1, 3) and a.shape[0] not in (1, 3):
        a = a.transpose(2, 0, 1)
        b = b.transpose(2, 0, 1)
    kern = _gaussian_kernel(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[0]):
        x, y = a[ch], b[ch]
        ux = _filter_valid(x, kern)
        uy = _filter_valid(y, kern)
        uxx = _filter_valid(x * x, kern)
        uyy = _filter_valid(y * y, kern)
        uxy = _filter_valid(x * y, kern)
        vx = uxx - ux * ux
        vy = uyy - uy * uy
        vxy = uxy - ux * uy
        num = (2 * ux * uy + c1) * (2 * vxy + c2)
        den = (ux ** 2 + uy ** 2 + c1) * (vx + vy + c2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


def endpoint_error(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean per-pixel Euclidean distance between two (2, H, W) flows."""
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"epe: shapes differ ({pred.shape} vs {gt.shape})")
    d = pred - gt
    return float(np.sqrt(d[0] ** 2 + d[1] ** 2).mean())


def baseline_copy_blur(blurs: np.ndarray, n: int) -> np.ndarray:
    """Predict every latent frame of each window as the blurry input itself."""
    return np.concatenate([np.repeat(blurs[0][None], n, axis=0),
                           np.repeat(blurs[1][None], n, axis=0)])


@dataclass
class EvalReport:
    n: int
    sample_count: int
    interp_psnr: float
    interp_ssim: float
    deblur_psnr: float
    deblur_ssim: float
    baseline_psnr: float
    baseline_ssim: float
    epe: Optional[float]
    epe_constant_translation: Optional[float]
    ordering_accuracy: Optional[float]
    per_sample: list = field(default_factory=list)
    per_frame_psnr: list = field(default_factory=list)
    per_frame_ssim: list = field(default_factory=list)
    per_flow_epe: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n": self.n, "sample_count": self.sample_count,
            "interpolation": {"psnr": self.interp_psnr, "ssim": self.interp_ssim},
            "deblurring": {"psnr": self.deblur_psnr, "ssim": self.deblur_ssim},
            "baseline_copy_blur": {"psnr": self.baseline_psnr, "ssim": self.baseline_ssim},
            "epe": self.epe,
            "epe_constant_translation": self.epe_constant_translation,
            "ordering_accuracy": self.ordering_accuracy,
            "per_frame_psnr": self.per_frame_psnr,
            "per_frame_ssim": self.per_frame_ssim,
            "per_flow_epe": self.per_flow_epe,
            "per_sample": self.per_sample,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, frame_csv_path, flow_csv_path=None) -> None:
        """Delimited per-frame (and per-flow) scores for external tooling."""
        lines = ["sample,frame,psnr,ssim\n"]
        for rec in self.per_sample:
            for i, (p, s) in enumerate(zip(rec["frame_psnr"], rec["frame_ssim"])):
                lines.append(f"{rec['index']},{i},{p:.6f},{s:.6f}\n")
        Path(frame_csv_path).write_text("".join(lines))
        if flow_csv_path is not None:
            lines = ["sample,flow,epe\n"]
            for rec in self.per_sample:
                if rec.get("flow_epe") is None:
                    continue
                for m, e in enumerate(rec["flow_epe"]):
                    lines.append(f"{rec['index']},{m},{e:.6f}\n")
            Path(flow_csv_path).write_text("".join(lines))


def evaluate(manifest: DatasetManifest, model: Model) -> EvalReport:
    """Score a model over a manifest with both protocols.

    Per sample: run the pipeline on the blur pair, order the full-scale
    frames with the flow rule, clamp to [0, 1], then score all 2N frames
    (interpolation) and the two reference frames (deblurring); flows are
    scored against the stored ground truth where present.
    """
    fi = FrameIndexing(manifest.n)
    refs = fi.ref_positions
    per_sample = []
    frame_psnr_tab = None
    frame_ssim_tab = None
    flow_epe_tab = None
    order_hits = []
    for i in range(len(manifest)):
        s = load_sample(manifest, i)
        with no_grad():
            out = model.forward(s["blurs"][0][None], s["blurs"][1][None])
        frames = np.stack([out.frame(1, p).data[0] for p in range(fi.n_total)])
        decisions = None
        if out.flows is not None:
            decisions = decide_order_from_output(out, 0)
            frames = apply_order(frames[:fi.n], frames[fi.n:], decisions)
            order_hits.append(float(not decisions[0].reversed)
                              + float(not decisions[1].reversed))
        frames = np.clip(frames, 0.0, 1.0)
        gt = s["frames"]
        fp = [psnr(frames[p], gt[p]) for p in range(fi.n_total)]
        fs = [ssim(frames[p], gt[p]) for p in range(fi.n_total)]
        base = baseline_copy_blur(s["blurs"], fi.n)
        bp = [psnr(base[p], gt[p]) for p in range(fi.n_total)]
        bs = [ssim(base[p], gt[p]) for p in range(fi.n_total)]
        rec = {
            "index": i,
            "frame_psnr": fp, "frame_ssim": fs,
            "interp_psnr": float(np.mean(fp)), "interp_ssim": float(np.mean(fs)),
            "deblur_psnr": float(np.mean([fp[p] for p in refs])),
            "deblur_ssim": float(np.mean([fs[p] for p in refs])),
            "baseline_psnr": float(np.mean(bp)), "baseline_ssim": float(np.mean(bs)),
            "tags": s["tags"],
        }
        if decisions is not None:
            rec["decisions"] = [d.to_dict() for d in decisions]
        if out.flows is not None and s["flows"] is not None:
            pred_flows = out.flows[0].data   # (M, 2, H, W) at batch 1
            fe = [endpoint_error(pred_flows[m], s["flows"][m])
                  for m in range(fi.n_flows)]
            rec["flow_epe"] = fe
            rec["mean_epe"] = float(np.mean(fe))
            flow_epe_tab = (np.zeros(fi.n_flows) if flow_epe_tab is None else flow_epe_tab)
            flow_epe_tab += np.asarray(fe)
        per_sample.append(rec)
        frame_psnr_tab = (np.zeros(fi.n_total) if frame_psnr_tab is None else frame_psnr_tab)
        frame_psnr_tab += np.asarray(fp)
        frame_ssim_tab = (np.zeros(fi.n_total) if frame_ssim_tab is None else frame_ssim_tab)
        frame_ssim_tab += np.asarray(fs)

    count = len(per_sample)
    epe_vals = [r["mean_epe"] for r in per_sample if "mean_epe" in r]
    const_epe = [r["mean_epe"] for r in per_sample
                 if "mean_epe" in r and r["tags"].get("constant_translation")]
    return EvalReport(
        n=manifest.n, sample_count=count,
        interp_psnr=float(np.mean([r["interp_psnr"] for r in per_sample])),
        interp_ssim=float(np.mean([r["interp_ssim"] for r in per_sample])),
        deblur_psnr=float(np.mean([r["deblur_psnr"] for r in per_sample])),
        deblur_ssim=float(np.mean([r["deblur_ssim"] for r in per_sample])),
        baseline_psnr=float(np.mean([r["baseline_psnr"] for r in per_sample])),
        baseline_ssim=float(np.mean([r["baseline_ssim"] for r in per_sample])),
        epe=float(np.mean(epe_vals)) if epe_vals else None,
        epe_constant_translation=float(np.mean(const_epe)) if const_epe else None,
        ordering_accuracy=(float(np.sum(order_hits) / (2 * count)) if order_hits else None),
        per_sample=per_sample,
        per_frame_psnr=(frame_psnr_tab / count).tolist(),
        per_frame_ssim=(frame_ssim_tab / count).tolist(),
        per_flow_epe=(flow_epe_tab / count).tolist() if flow_epe_tab is not None else [],
    )
