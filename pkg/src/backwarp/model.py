"""The restoration network: encoder, latent-feature decoders, coarse-to-fine
flow estimation over cost volumes, and multi-scale frame synthesis.

One forward pass consumes a pair of blurry inputs and emits, at every pyramid
level, all 2N latent frames plus the 2*(2N)-4 flows from each non-middle
latent position toward both reference positions.  Per-pair work is folded
into the batch axis so the flow estimator, context network and synthesis
heads each run once per level regardless of N.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .errors import CheckpointError, ConfigError, ContractError, DimensionError
from .indexing import FrameIndexing
from .tensor import Tensor, concat, narrow, no_grad, repeat_batch

LEAKY_SLOPE = 0.1


@dataclass
class ModelConfig:
    levels: int = 6
    channels: tuple = (16, 32, 32, 64, 64, 96)
    frames_per_blur: int = 7
    max_disp: int = 4
    use_stn: bool = True
    use_motion_decoder: bool = True
    use_flow: bool = True
    share_offsets: bool = False
    stn_width: int = 16
    flow_widths: tuple = (64, 32)
    synth_width: int = 32
    context_widths: tuple = (32, 32)
    context_dilations: tuple = (1, 2, 4)
    seed: int = 0

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError(f"need at least 2 pyramid levels, got {self.levels}")
        if len(self.channels) != self.levels:
            raise ConfigError(
                f"channels list has {len(self.channels)} entries for {self.levels} levels")
        if self.frames_per_blur % 2 == 0 or self.frames_per_blur < 3:
            raise ConfigError(f"frames per blur must be odd >= 3, got {self.frames_per_blur}")
        if self.use_flow and not (self.use_stn or self.use_motion_decoder):
            raise ConfigError("flow estimation needs the STN or the motion decoder enabled")
        if len(self.context_widths) + 1 != len(self.context_dilations):
            raise ConfigError("context net needs one dilation per layer (widths + output)")

    def to_dict(self) -> dict:
        return {
            "levels": self.levels, "channels": list(self.channels),
            "frames_per_blur": self.frames_per_blur, "max_disp": self.max_disp,
            "use_stn": self.use_stn, "use_motion_decoder": self.use_motion_decoder,
            "use_flow": self.use_flow, "share_offsets": self.share_offsets,
            "stn_width": self.stn_width, "flow_widths": list(self.flow_widths),
            "synth_width": self.synth_width, "context_widths": list(self.context_widths),
            "context_dilations": list(self.context_dilations), "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass
class PipelineOutput:
    """Per-level stacked outputs of one forward pass.

    Within a level, reference frames stack as [t0, t1] blocks of B, non-middle
    frames in ascending position order, and flows in the canonical pair order
    of :class:`FrameIndexing`.
    """
    indexing: FrameIndexing
    batch: int
    level_dims: list
    frames_ref: Optional[list] = None
    frames_nm: Optional[list] = None
    flows: Optional[list] = None
    ref_pyramid: Optional[list] = None
    nm_pyramid: Optional[list] = None

    def frame(self, level: int, position: int) -> Tensor:
        """(B, 3, h, w) prediction for one latent position at one level."""
        b = self.batch
        refs = self.indexing.ref_positions
        if position in refs:
            return narrow(self.frames_ref[level - 1], 0, refs.index(position) * b, b)
        slot = self.indexing.nonmiddle.index(position)
        return narrow(self.frames_nm[level - 1], 0, slot * b, b)

    def frames_at(self, level: int) -> list:
        return [self.frame(level, p) for p in range(self.indexing.n_total)]

    def flow(self, level: int, pair_idx: int) -> Tensor:
        return narrow(self.flows[level - 1], 0, pair_idx * self.batch, self.batch)

    def frame_count(self, level: int) -> int:
        return (self.frames_ref[level - 1].shape[0]
                + self.frames_nm[level - 1].shape[0]) // self.batch

    def flow_count(self, level: int) -> int:
        return self.flows[level - 1].shape[0] // self.batch


class _Conv:
    """Conv layer whose parameters live in the model's registry."""

    def __init__(self, model: "Model", name: str, cin: int, cout: int, k: int = 3,
                 stride: int = 1, padding=None, dilation: int = 1, zero_init: bool = False):
        self.stride = stride
        self.dilation = dilation
        self.padding = padding if padding is not None else dilation * (k // 2)
        if zero_init:
            w = np.zeros((cout, cin, k, k), np.float32)
        else:
            fan_in = cin * k * k
            std = np.sqrt(2.0 / (1.0 + LEAKY_SLOPE ** 2) / fan_in)
            w = (model.rng.standard_normal((cout, cin, k, k)) * std).astype(np.float32)
        self.w = model._register(f"{name}/weight", w)
        self.b = model._register(f"{name}/bias", np.zeros(cout, np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.w, self.b, stride=self.stride,
                          padding=self.padding, dilation=self.dilation)


class _ConvT2x:
    def __init__(self, model: "Model", name: str, cin: int, cout: int):
        fan_in = cin * 16
        std = np.sqrt(2.0 / (1.0 + LEAKY_SLOPE ** 2) / fan_in)
        w = (model.rng.standard_normal((cin, cout, 4, 4)) * std).astype(np.float32)
        self.w = model._register(f"{name}/weight", w)
        self.b = model._register(f"{name}/bias", np.zeros(cout, np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.w, self.b, stride=2, padding=1)


class _Stn:
    """Two stride-2 convs, global average pool, linear head to 6 affine params.

    The head is zero-initialized with an identity bias so training starts
    from the identity transform.
    """

    def __init__(self, model: "Model", name: str, cin: int, width: int):
        self.c0 = _Conv(model, f"{name}/layer0", cin, width, stride=2)
        self.c1 = _Conv(model, f"{name}/layer1", width, width, stride=2)
        self.fw = model._register(f"{name}/fc/weight", np.zeros((width, 6), np.float32))
        self.fb = model._register(
            f"{name}/fc/bias", np.asarray([1, 0, 0, 0, 1, 0], np.float32))

    def __call__(self, feat: Tensor) -> Tensor:
        h = self.c0(feat).leaky_relu(LEAKY_SLOPE)
        h = self.c1(h).leaky_relu(LEAKY_SLOPE)
        theta = ops.linear(ops.global_avg_pool(h), self.fw, self.fb)
        return ops.affine_grid_sample(feat, theta)


class Model:
    """Pipeline network; parameters are registered under canonical names
    ("module/level{l}/offset{k}/layer{i}/{weight|bias}") so checkpoints of
    ablation configurations load subsets cleanly."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.indexing = FrameIndexing(config.frames_per_blur)
        self.rng = np.random.default_rng(config.seed)
        self.params: dict[str, Tensor] = {}
        self._build()

    def _register(self, name: str, array: np.ndarray) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name}")
        t = Tensor(array, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _offset_key(self, position: int) -> str:
        return "shared" if self.config.share_offsets else str(position)

    def _build(self):
        cfg = self.config
        ch = cfg.channels
        k = cfg.levels
        d2 = (2 * cfg.max_disp + 1) ** 2

        self.enc = []
        for l in range(1, k + 1):
            cin = 3 if l == 1 else ch[l - 2]
            stride = 1 if l == 1 else 2
            self.enc.append((
                _Conv(self, f"encoder/level{l}/layer0", cin, ch[l - 1], stride=stride),
                _Conv(self, f"encoder/level{l}/layer1", ch[l - 1], ch[l - 1]),
            ))

        self.refdec_up = {}
        self.refdec = {}
        for l in range(1, k + 1):
            cin = ch[l - 1] if l == k else 2 * ch[l - 1]
            if l < k:
                self.refdec_up[l] = _ConvT2x(self, f"refdec/level{l}/up", ch[l], ch[l - 1])
            self.refdec[l] = (
                _Conv(self, f"refdec/level{l}/layer0", cin, ch[l - 1]),
                _Conv(self, f"refdec/level{l}/layer1", ch[l - 1], ch[l - 1]),
            )

        self.stn = {}
        self.motdec = {}
        offset_keys = (["shared"] if cfg.share_offsets else
                       [str(p) for p in self.indexing.nonmiddle])
        for l in range(1, k + 1):
            c = ch[l - 1]
            for key in offset_keys:
                if cfg.use_stn:
                    self.stn[(l, key)] = _Stn(
                        self, f"stn/level{l}/offset{key}", c, cfg.stn_width)
                if cfg.use_motion_decoder:
                    cin = 2 * c if l == k else 2 * c + ch[l]
                    self.motdec[(l, key)] = (
                        _Conv(self, f"motdec/level{l}/offset{key}/layer0", cin, c),
                        _Conv(self, f"motdec/level{l}/offset{key}/layer1", c, c),
                    )

        if cfg.use_flow:
            self.flow_head = {}
            w0, w1 = cfg.flow_widths
            for l in range(1, k + 1):
                cin = d2 + ch[l - 1] + 2
                self.flow_head[l] = (
                    _Conv(self, f"flow/level{l}/layer0", cin, w0),
                    _Conv(self, f"flow/level{l}/layer1", w0, w1),
                    _Conv(self, f"flow/level{l}/layer2", w1, 2, zero_init=True),
                )
            widths = list(cfg.context_widths) + [2]
            cins = [ch[0] + 2] + list(cfg.context_widths)
            self.context = [
                _Conv(self, f"context/layer{i}", cins[i], widths[i],
                      dilation=cfg.context_dilations[i],
                      zero_init=(i == len(widths) - 1))
                for i in range(len(widths))
            ]

        self.synth_ref = {}
        self.synth_non = {}
        for l in range(1, k + 1):
            c = ch[l - 1]
            self.synth_ref[l] = (
                _Conv(self, f"synthref/level{l}/layer0", c + 3, cfg.synth_width),
                _Conv(self, f"synthref/level{l}/layer1", cfg.synth_width, 3),
            )
            cin = (3 * c + 3) if cfg.use_flow else (c + 3)
            self.synth_non[l] = (
                _Conv(self, f"synthnon/level{l}/layer0", cin, cfg.synth_width),
                _Conv(self, f"synthnon/level{l}/layer1", cfg.synth_width, 3),
            )

    # -- persistence ---------------------------------------------------------

    def state_entries(self) -> dict[str, np.ndarray]:
        return {name: t.numpy() for name, t in self.params.items()}

    def load_state_entries(self, entries: dict[str, np.ndarray]):
        missing = [n for n in self.params if n not in entries]
        if missing:
            raise CheckpointError(
                "checkpoint is missing tensors: " + ", ".join(sorted(missing)[:8])
                + ("..." if len(missing) > 8 else ""))
        for name, t in self.params.items():
            arr = entries[name]
            if tuple(arr.shape) != t.shape:
                raise CheckpointError(
                    f"checkpoint tensor {name} has shape {tuple(arr.shape)}, expected {t.shape}")
            t._buf[...] = Tensor(arr)._buf

    # -- building blocks ------------------------------------------------------

    @staticmethod
    def _block(convs, x: Tensor) -> Tensor:
        h = convs[0](x).leaky_relu(LEAKY_SLOPE)
        return convs[1](h).leaky_relu(LEAKY_SLOPE)

    @staticmethod
    def _crop_to(t: Tensor, h: int, w: int) -> Tensor:
        """Trim a 2x-upsampled tensor to a ceil-halved target (at most 1 px)."""
        dh = t.shape[2] - h
        dw = t.shape[3] - w
        if dh == 0 and dw == 0:
            return t
        if not (0 <= dh <= 1 and 0 <= dw <= 1):
            raise DimensionError(
                f"pyramid size mismatch: {t.shape[2:]} cannot crop to {(h, w)}")
        return narrow(narrow(t, 2, 0, h), 3, 0, w)

    def encode(self, blur: Tensor) -> list[Tensor]:
        """Feature pyramid of one (stacked) input, levels 1..K."""
        feats = []
        h = blur
        for c0, c1 in self.enc:
            h = c1(c0(h).leaky_relu(LEAKY_SLOPE)).leaky_relu(LEAKY_SLOPE)
            feats.append(h)
        return feats

    def decode_reference(self, enc_l: Tensor, up_prev: Optional[Tensor], level: int) -> Tensor:
        if up_prev is None:
            x = enc_l
        else:
            up = self.refdec_up[level](up_prev).leaky_relu(LEAKY_SLOPE)
            up = self._crop_to(up, enc_l.shape[2], enc_l.shape[3])
            x = concat([up, enc_l], axis=1)
        return self._block(self.refdec[level], x)

    def decode_motion(self, enc_l: Tensor, up_prev: Optional[Tensor],
                      level: int, position: int) -> Tensor:
        """Decode one non-middle latent feature (single-offset path)."""
        if position not in self.indexing.nonmiddle:
            raise ContractError(f"position {position} is not a non-middle latent index")
        key = self._offset_key(position)
        cfg = self.config
        if cfg.use_stn:
            transformed = self.stn[(level, key)](enc_l)
        else:
            transformed = enc_l
        if not cfg.use_motion_decoder:
            return transformed
        parts = [transformed]
        if up_prev is not None:
            parts.append(self._crop_to(ops.upsample_bilinear2x(up_prev),
                                       enc_l.shape[2], enc_l.shape[3]))
        parts.append(enc_l)
        return self._block(self.motdec[(level, key)], concat(parts, axis=1))

    def _decode_motion_bank(self, enc_sides: Tensor, up_prev: Optional[Tensor],
                            level: int) -> Tensor:
        """All non-middle features of a level at once.

        ``enc_sides`` stacks the encoded feature of each offset's input in
        canonical non-middle order; per-offset weights run as grouped convs,
        which matches the single-offset path bit for bit.
        """
        cfg = self.config
        keys = [self._offset_key(p) for p in self.indexing.nonmiddle]
        if cfg.use_stn:
            banks = [self.stn[(level, k)] for k in keys]
            h = ops.conv2d_grouped(enc_sides, [s.c0.w for s in banks],
                                   [s.c0.b for s in banks], stride=2)
            h = h.leaky_relu(LEAKY_SLOPE)
            h = ops.conv2d_grouped(h, [s.c1.w for s in banks],
                                   [s.c1.b for s in banks], stride=2)
            h = h.leaky_relu(LEAKY_SLOPE)
            theta = ops.linear_grouped(ops.global_avg_pool(h),
                                       [s.fw for s in banks], [s.fb for s in banks])
            transformed = ops.affine_grid_sample(enc_sides, theta)
        else:
            transformed = enc_sides
        if not cfg.use_motion_decoder:
            return transformed
        parts = [transformed]
        if up_prev is not None:
            parts.append(self._crop_to(ops.upsample_bilinear2x(up_prev),
                                       enc_sides.shape[2], enc_sides.shape[3]))
        parts.append(enc_sides)
        x = concat(parts, axis=1)
        decs = [self.motdec[(level, k)] for k in keys]
        h = ops.conv2d_grouped(x, [d[0].w for d in decs], [d[0].b for d in decs])
        h = h.leaky_relu(LEAKY_SLOPE)
        h = ops.conv2d_grouped(h, [d[1].w for d in decs], [d[1].b for d in decs])
        return h.leaky_relu(LEAKY_SLOPE)

    def estimate_flow_level(self, v_src: Tensor, v_ref: Tensor, up_flow: Tensor,
                            level: int) -> Tensor:
        """One coarse-to-fine refinement: warp, correlate, residual head."""
        warped = ops.grid_sample(v_ref, up_flow)
        cost = ops.correlation(v_src, warped, self.config.max_disp)
        h = concat([cost, v_src, up_flow], axis=1)
        c0, c1, c2 = self.flow_head[level]
        h = c0(h).leaky_relu(LEAKY_SLOPE)
        h = c1(h).leaky_relu(LEAKY_SLOPE)
        return up_flow + c2(h)

    def refine_context(self, flow_full: Tensor, features_full: Tensor) -> Tensor:
        h = concat([flow_full, features_full], axis=1)
        for conv in self.context[:-1]:
            h = conv(h).leaky_relu(LEAKY_SLOPE)
        return flow_full + self.context[-1](h)

    def synthesize_reference(self, v_ref: Tensor, up_img: Tensor, level: int) -> Tensor:
        c0, c1 = self.synth_ref[level]
        return c1(c0(concat([v_ref, up_img], axis=1)).leaky_relu(LEAKY_SLOPE))

    def synthesize_nonmiddle(self, head_in: Tensor, level: int) -> Tensor:
        c0, c1 = self.synth_non[level]
        return c1(c0(head_in).leaky_relu(LEAKY_SLOPE))

    # -- forward ---------------------------------------------------------------

    def forward(self, blur0, blur1, compute_frames: bool = True) -> PipelineOutput:
        """Run the full pipeline on a pair of blurry inputs.

        Inputs are (B, 3, H, W) arrays or tensors in [0, 1].  Dimensions that
        do not divide 2^(K-1) are replicate-padded for the pyramid and every
        output is cropped back to the ceil-halved original size per level.
        """
        cfg = self.config
        fi = self.indexing
        b0 = blur0.data if isinstance(blur0, Tensor) else np.asarray(blur0, np.float32)
        b1 = blur1.data if isinstance(blur1, Tensor) else np.asarray(blur1, np.float32)
        if b0.shape != b1.shape:
            raise DimensionError(f"input pair shapes differ: {b0.shape} vs {b1.shape}")
        if b0.ndim != 4 or b0.shape[1] != 3:
            raise DimensionError(f"inputs must be (B, 3, H, W), got {b0.shape}")
        b, _, h, w = b0.shape
        # per-level dims, ceil-halved; stride-2 convs realize the same rounding
        out_dims = []
        th, tw = h, w
        for _ in range(cfg.levels):
            out_dims.append((th, tw))
            th, tw = (th + 1) // 2, (tw + 1) // 2

        stacked = Tensor(np.concatenate([b0, b1], axis=0))
        enc = self.encode(stacked)           # per level, (2B, C, h, w)
        nm = fi.nonmiddle
        n_nm = len(nm)
        half_nm = n_nm // 2

        vref_prev = None
        nm_prev = None
        flow_prev = None
        img_ref_prev = None
        img_nm_prev = None

        frames_ref = [None] * cfg.levels
        frames_nm = [None] * cfg.levels
        flows = [None] * cfg.levels
        ref_pyr = [None] * cfg.levels
        nm_pyr = [None] * cfg.levels

        for level in range(cfg.levels, 0, -1):
            enc_l = enc[level - 1]
            lh, lw = enc_l.shape[2], enc_l.shape[3]
            vref = self.decode_reference(enc_l, vref_prev, level)
            ref_pyr[level - 1] = vref
            ref0 = narrow(vref, 0, 0, b)
            ref1 = narrow(vref, 0, b, b)

            enc0 = narrow(enc_l, 0, 0, b)
            enc1 = narrow(enc_l, 0, b, b)
            enc_sides = concat([repeat_batch(enc0, half_nm),
                                repeat_batch(enc1, half_nm)], axis=0)
            nm_stack = self._decode_motion_bank(enc_sides, nm_prev, level)
            nm_pyr[level - 1] = nm_stack

            if cfg.use_flow:
                if flow_prev is None:
                    up_flow = Tensor(np.zeros((n_nm * 2 * b, 2, lh, lw), np.float32))
                else:
                    up_flow = self._crop_to(
                        ops.upsample_bilinear2x(flow_prev, scale_values=True), lh, lw)
                src = repeat_batch(nm_stack, 2)
                refs = concat([repeat_batch(ref0, n_nm), repeat_batch(ref1, n_nm)], axis=0)
                flow_l = self.estimate_flow_level(src, refs, up_flow, level)
                if level == 1:
                    flow_l = self.refine_context(flow_l, src)
                flows[level - 1] = flow_l
                flow_prev = flow_l

            if compute_frames:
                if img_ref_prev is None:
                    up_ref = Tensor(np.zeros((2 * b, 3, lh, lw), np.float32))
                    up_nm = Tensor(np.zeros((n_nm * b, 3, lh, lw), np.float32))
                else:
                    up_ref = self._crop_to(ops.upsample_bilinear2x(img_ref_prev), lh, lw)
                    up_nm = self._crop_to(ops.upsample_bilinear2x(img_nm_prev), lh, lw)
                img_ref = self.synthesize_reference(vref, up_ref, level)
                if cfg.use_flow:
                    fl = flows[level - 1]
                    w0 = ops.grid_sample(repeat_batch(ref0, n_nm),
                                         narrow(fl, 0, 0, n_nm * b))
                    w1 = ops.grid_sample(repeat_batch(ref1, n_nm),
                                         narrow(fl, 0, n_nm * b, n_nm * b))
                    head_in = concat([w0, w1, nm_stack, up_nm], axis=1)
                else:
                    head_in = concat([nm_stack, up_nm], axis=1)
                img_nm = self.synthesize_nonmiddle(head_in, level)
                frames_ref[level - 1] = img_ref
                frames_nm[level - 1] = img_nm
                img_ref_prev = img_ref
                img_nm_prev = img_nm

            vref_prev = vref
            nm_prev = nm_stack

        # crop padded outputs back to the recorded per-level target dims
        def croplist(tensors):
            if tensors is None or tensors[0] is None:
                return None
            out = []
            for lvl, t in enumerate(tensors):
                th, tw = out_dims[lvl]
                if t.shape[2:] != (th, tw):
                    t = narrow(narrow(t, 2, 0, th), 3, 0, tw)
                out.append(t)
            return out

        return PipelineOutput(
            indexing=fi, batch=b, level_dims=out_dims,
            frames_ref=croplist(frames_ref), frames_nm=croplist(frames_nm),
            flows=croplist(flows), ref_pyramid=ref_pyr, nm_pyramid=nm_pyr)

    def infer(self, blur0, blur1) -> PipelineOutput:
        with no_grad():
            return self.forward(blur0, blur1)
