"""Losses, schedule and the training loop.

The multi-scale frame loss is a weighted sum over levels of per-frame mean
absolute error; the flow loss is the weighted multi-scale endpoint error over
all 2*(2N)-4 flows.  Ground truth is box-downsampled per level (flow values
are halved with each level).  An initial flow-only phase trains everything
except the synthesis heads with the frame term switched off.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractError, NumericError
from .model import Model, ModelConfig, PipelineOutput
from .optim import Adam
from .synth import DatasetManifest, load_sample
from .tensor import Tensor

DEFAULT_LEVEL_WEIGHTS = (0.005, 0.01, 0.02, 0.04, 0.08, 0.32)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    crop: int = 16
    lr: float = 1e-4
    lr_milestones: tuple = (15, 20, 25)
    flow_only_epochs: int = 4
    frame_weights: tuple = DEFAULT_LEVEL_WEIGHTS
    flow_weights: tuple = DEFAULT_LEVEL_WEIGHTS
    alpha_frame: float = 1.0
    alpha_flow: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 4e-4
    seed: int = 0
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.crop < 2:
            raise ConfigError("epochs, batch size and crop must be positive")

    def learning_rate(self, epoch: int) -> float:
        """Base rate halved at each milestone reached."""
        halvings = sum(1 for m in self.lr_milestones if epoch >= m)
        return self.lr * (0.5 ** halvings)

    def alphas(self, epoch: int) -> tuple[float, float]:
        if epoch < self.flow_only_epochs:
            return 0.0, self.alpha_flow
        return self.alpha_frame, self.alpha_flow

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "batch_size": self.batch_size, "crop": self.crop,
            "lr": self.lr, "lr_milestones": list(self.lr_milestones),
            "flow_only_epochs": self.flow_only_epochs,
            "frame_weights": list(self.frame_weights),
            "flow_weights": list(self.flow_weights),
            "alpha_frame": self.alpha_frame, "alpha_flow": self.alpha_flow,
            "beta1": self.beta1, "beta2": self.beta2,
            "weight_decay": self.weight_decay, "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


def level_weights(weights, levels: int) -> list[float]:
    if len(weights) < levels:
        raise ConfigError(f"need {levels} level weights, got {len(weights)}")
    return list(weights[:levels])


def downsample2x(arr: np.ndarray) -> np.ndarray:
    """2x2 box downsampling over the trailing two axes (edge pad when odd)."""
    h, w = arr.shape[-2], arr.shape[-1]
    if h % 2 or w % 2:
        pad = [(0, 0)] * (arr.ndim - 2) + [(0, h % 2), (0, w % 2)]
        arr = np.pad(arr, pad, mode="edge")
    return 0.25 * (arr[..., 0::2, 0::2] + arr[..., 0::2, 1::2]
                   + arr[..., 1::2, 0::2] + arr[..., 1::2, 1::2])


def pyramid_targets(arr: np.ndarray, levels: int, is_flow: bool = False) -> list[np.ndarray]:
    """Per-level ground truth; flow values are rescaled with resolution."""
    out = [np.ascontiguousarray(arr, np.float32)]
    cur = out[0]
    for _ in range(levels - 1):
        cur = downsample2x(cur)
        if is_flow:
            cur = cur * 0.5
        out.append(np.ascontiguousarray(cur, np.float32))
    return out


def frame_loss(out: PipelineOutput, gt_ref_levels, gt_nm_levels, weights) -> Tensor:
    """Sum over frames and levels of weighted mean absolute error.

    Per frame the reduction over pixels/channels is the mean, and the batch
    is averaged, so one frame with constant error e at level l contributes
    w_l * e.
    """
    n_ref = 2
    n_nm = out.indexing.n_total - 2
    terms = []
    for lvl, w in enumerate(weights, start=1):
        pr = out.frames_ref[lvl - 1]
        pn = out.frames_nm[lvl - 1]
        if pr.shape != gt_ref_levels[lvl - 1].shape or pn.shape != gt_nm_levels[lvl - 1].shape:
            raise ContractError(
                f"frame loss level {lvl}: prediction/target shapes differ "
                f"({pr.shape} vs {gt_ref_levels[lvl - 1].shape})")
        terms.append(ops.l1_mean(pr, Tensor(gt_ref_levels[lvl - 1])) * (w * n_ref))
        terms.append(ops.l1_mean(pn, Tensor(gt_nm_levels[lvl - 1])) * (w * n_nm))
    return _sum(terms)


def flow_loss(out: PipelineOutput, gt_flow_levels, weights) -> Tensor:
    """Weighted multi-scale endpoint error over all estimated flows."""
    if out.flows is None:
        raise ContractError("flow loss requires a model that estimates flows")
    n_flows = out.indexing.n_flows
    terms = []
    for lvl, w in enumerate(weights, start=1):
        pf = out.flows[lvl - 1]
        gt = gt_flow_levels[lvl - 1]
        if pf.shape != gt.shape:
            raise ContractError(
                f"flow loss level {lvl}: prediction/target shapes differ "
                f"({pf.shape} vs {gt.shape})")
        terms.append(ops.epe(pf, Tensor(gt)) * (w * n_flows))
    return _sum(terms)


def total_loss(frame_term: Optional[Tensor], flow_term: Optional[Tensor],
               alpha_frame: float, alpha_flow: float) -> Tensor:
    terms = []
    if frame_term is not None and alpha_frame != 0.0:
        terms.append(frame_term * alpha_frame)
    if flow_term is not None and alpha_flow != 0.0:
        terms.append(flow_term * alpha_flow)
    if not terms:
        raise ContractError("total loss has no active terms")
    return _sum(terms)


def _sum(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc


SYNTH_PREFIXES = ("synthref/", "synthnon/")


def synthesis_param_names(model: Model) -> set[str]:
    return {n for n in model.params if n.startswith(SYNTH_PREFIXES)}


def crop_batch(arrays: np.ndarray, idx, oys, oxs, crop: int) -> np.ndarray:
    """Crop selected samples at per-sample offsets.

    One offset pair applies to every frame/flow of its sample, so images and
    flow fields stay aligned; flow values are cropped, never rescaled.
    """
    return np.stack([arrays[s, ..., y:y + crop, x:x + crop]
                     for s, y, x in zip(idx, oys, oxs)])


@dataclass
class _Dataset:
    """All samples resident in memory as float32 arrays."""
    frames: np.ndarray           # (S, 2N, 3, H, W)
    blurs: np.ndarray            # (S, 2, 3, H, W)
    flows: Optional[np.ndarray]  # (S, M, 2, H, W) or None
    tags: list

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "_Dataset":
        frames, blurs, flows, tags = [], [], [], []
        have_flows = True
        for i in range(len(manifest)):
            s = load_sample(manifest, i)
            frames.append(s["frames"])
            blurs.append(s["blurs"])
            tags.append(s["tags"])
            if s["flows"] is None:
                have_flows = False
            else:
                flows.append(s["flows"])
        return cls(frames=np.stack(frames), blurs=np.stack(blurs),
                   flows=np.stack(flows) if have_flows else None, tags=tags)


def train(manifest: DatasetManifest, model_cfg: ModelConfig, cfg: TrainConfig,
          out_dir, resume: Optional[str] = None, quiet: bool = False) -> dict:
    """Train a model on a dataset; returns a summary dict.

    Writes ckpt_epoch{e:03d}.bwck, log.jsonl and config.json into
    ``out_dir``.  Batch order and crop offsets are drawn from a per-epoch
    stream seeded by (seed, epoch), so resuming from an epoch checkpoint
    reproduces the continuation bit for bit.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = _Dataset.from_manifest(manifest)
    n_samples = data.frames.shape[0]
    if n_samples < 1:
        raise ConfigError("empty dataset")
    model = Model(model_cfg)
    adam = Adam(model.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                weight_decay=cfg.weight_decay)
    start_epoch = 0
    if resume is not None:
        entries = load_checkpoint(resume)
        model.load_state_entries(entries)
        adam.load_state_entries(entries)
        start_epoch = int(entries.get("meta/epoch", np.asarray([-1.0])).reshape(-1)[0]) + 1

    (out_dir / "config.json").write_text(json.dumps(
        {"model": model_cfg.to_dict(), "train": cfg.to_dict()},
        indent=2, sort_keys=True) + "\n")

    fi = model.indexing
    fw = level_weights(cfg.frame_weights, model_cfg.levels)
    flw = level_weights(cfg.flow_weights, model_cfg.levels)
    frozen = synthesis_param_names(model)
    log_path = out_dir / "log.jsonl"
    log_lines = []
    if resume is not None and log_path.exists():
        log_lines = log_path.read_text().splitlines(keepends=True)
        log_lines = [ln for ln in log_lines
                     if json.loads(ln)["epoch"] < start_epoch]

    crop = cfg.crop
    h, w = data.frames.shape[-2], data.frames.shape[-1]
    if crop > min(h, w):
        raise ConfigError(f"crop {crop} exceeds frame size {h}x{w}")
    global_step = start_epoch * math.ceil(n_samples / cfg.batch_size)

    for epoch in range(start_epoch, cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n_samples)
        oys = rng.integers(0, h - crop + 1, n_samples)
        oxs = rng.integers(0, w - crop + 1, n_samples)
        lr = cfg.learning_rate(epoch)
        a_frame, a_flow = cfg.alphas(epoch)
        flow_only = a_frame == 0.0 and data.flows is not None

        for bstart in range(0, n_samples, cfg.batch_size):
            idx = order[bstart:bstart + cfg.batch_size]
            oy, ox = oys[bstart:bstart + cfg.batch_size], oxs[bstart:bstart + cfg.batch_size]
            bframes = crop_batch(data.frames, idx, oy, ox, crop)  # (B, 2N, 3, c, c)
            bblurs = crop_batch(data.blurs, idx, oy, ox, crop)
            bflows = None
            if data.flows is not None:
                bflows = crop_batch(data.flows, idx, oy, ox, crop)  # (B, M, 2, c, c)

            out = model.forward(bblurs[:, 0], bblurs[:, 1],
                                compute_frames=not flow_only)

            frame_term = None
            if not flow_only:
                gt_ref = np.concatenate([bframes[:, p] for p in fi.ref_positions])
                gt_nm = np.concatenate([bframes[:, p] for p in fi.nonmiddle])
                frame_term = frame_loss(
                    out, pyramid_targets(gt_ref, model_cfg.levels),
                    pyramid_targets(gt_nm, model_cfg.levels), fw)
            flow_term = None
            if model_cfg.use_flow and bflows is not None:
                gt_flow = np.concatenate(
                    [bflows[:, mth] for mth in range(fi.n_flows)])
                flow_term = flow_loss(
                    out, pyramid_targets(gt_flow, model_cfg.levels, is_flow=True), flw)

            loss = total_loss(frame_term, flow_term, a_frame, a_flow)
            lval = float(loss)
            if not np.isfinite(lval):
                diag = {
                    "epoch": epoch, "batch_start": bstart,
                    "batch_indices": [int(i) for i in idx],
                    "param_norms": {n: float(np.linalg.norm(p.data))
                                    for n, p in sorted(model.params.items())},
                }
                (out_dir / "nan_diagnostic.json").write_text(
                    json.dumps(diag, indent=2) + "\n")
                raise NumericError(
                    f"non-finite loss at epoch {epoch} batch {bstart // cfg.batch_size}"
                    f" (diagnostic in nan_diagnostic.json)")
            loss.backward()
            adam.step(lr=lr, freeze=frozen if flow_only else ())
            global_step += 1
            rec = {
                "epoch": epoch, "step": global_step,
                "frame_loss": None if frame_term is None else float(frame_term),
                "flow_loss": None if flow_term is None else float(flow_term),
                "total": lval, "lr": lr, "alpha1": a_frame, "alpha2": a_flow,
            }
            log_lines.append(json.dumps(rec) + "\n")

        if (epoch + 1) % cfg.checkpoint_every == 0 or epoch == cfg.epochs - 1:
            entries = model.state_entries()
            entries.update(adam.state_entries())
            entries["meta/epoch"] = np.asarray([float(epoch)], np.float32)
            save_checkpoint(out_dir / f"ckpt_epoch{epoch:03d}.bwck", entries)
        log_path.write_text("".join(log_lines))
        if not quiet:
            last = json.loads(log_lines[-1])
            print(f"epoch {epoch}: total {last['total']:.5f} lr {lr:g}")

    final = out_dir / f"ckpt_epoch{cfg.epochs - 1:03d}.bwck"
    return {"checkpoint": str(final), "log": str(log_path),
            "epochs": cfg.epochs, "steps": global_step}
