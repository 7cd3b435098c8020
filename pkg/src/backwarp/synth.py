"""Synthetic high-speed sequences with analytic ground-truth flows.

Scenes are textured sprites moving over a textured background with an
optional global camera pan.  Motion is known exactly, so the dataset carries
analytic flows between any two frames, and blurry inputs are synthesized by
frame averaging.  Velocities snap to multiples of 0.25 px/frame so that
positions, bilinear weights and flow compositions stay exactly representable
in float32.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, IngestError, RangeError
from .flowio import read_flo, write_flo
from .indexing import FrameIndexing
from .pngio import read_png, write_png

MANIFEST_NAME = "manifest.json"
SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# scene specification
# ---------------------------------------------------------------------------

@dataclass
class SpriteSpec:
    texture_seed: int
    size: tuple[int, int]          # (height, width) in px
    position: tuple[float, float]  # center (x, y) at frame 0
    velocity: tuple[float, float]  # screen-space (vx, vy) px/frame
    rotation: float = 0.0          # deg/frame about the sprite center


@dataclass
class SceneSpec:
    height: int
    width: int
    background_seed: int
    sprites: list[SpriteSpec] = field(default_factory=list)
    camera: tuple[float, float] = (0.0, 0.0)  # background (vx, vy) px/frame
    length: int = 14
    seed: int = 0

    def validate(self, n: Optional[int] = None):
        if self.height < 8 or self.width < 8:
            raise ConfigError(f"canvas {self.height}x{self.width} is too small")
        if n is not None and self.length < 2 * n:
            raise ConfigError(
                f"sequence length {self.length} is shorter than one disjoint pair (2N = {2 * n})")
        for s in self.sprites:
            if s.size[0] >= self.height or s.size[1] >= self.width:
                raise ConfigError(
                    f"sprite of size {s.size} does not fit the {self.height}x{self.width} canvas")
            if not all(math.isfinite(v) for v in (*s.position, *s.velocity, s.rotation)):
                raise ConfigError("sprite trajectory parameters must be finite")

    def to_dict(self) -> dict:
        return {
            "height": self.height, "width": self.width,
            "background_seed": self.background_seed,
            "camera": list(self.camera), "length": self.length, "seed": self.seed,
            "sprites": [{"texture_seed": s.texture_seed, "size": list(s.size),
                         "position": list(s.position), "velocity": list(s.velocity),
                         "rotation": s.rotation} for s in self.sprites],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(height=d["height"], width=d["width"],
                   background_seed=d["background_seed"],
                   sprites=[SpriteSpec(texture_seed=s["texture_seed"],
                                       size=tuple(s["size"]),
                                       position=tuple(s["position"]),
                                       velocity=tuple(s["velocity"]),
                                       rotation=s.get("rotation", 0.0))
                            for s in d.get("sprites", [])],
                   camera=tuple(d.get("camera", (0.0, 0.0))),
                   length=d.get("length", 14), seed=d.get("seed", 0))


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def value_noise(height: int, width: int, seed: int) -> np.ndarray:
    """Smooth seeded RGB noise in [0, 1], (H, W, 3) float32.

    Two octaves of bilinearly upsampled lattice noise; enough local structure
    for cost volumes to lock onto.
    """
    rng = np.random.default_rng(seed)
    out = np.zeros((height, width, 3), np.float64)
    for cell, weight in ((7, 0.7), (3, 0.3)):
        gh = height // cell + 2
        gw = width // cell + 2
        lattice = rng.random((gh, gw, 3))
        ys = np.arange(height) / cell
        xs = np.arange(width) / cell
        y0 = ys.astype(int)
        x0 = xs.astype(int)
        fy = (ys - y0)[:, None, None]
        fx = (xs - x0)[None, :, None]
        a = lattice[y0][:, x0]
        b = lattice[y0][:, x0 + 1]
        c = lattice[y0 + 1][:, x0]
        d = lattice[y0 + 1][:, x0 + 1]
        out += weight * ((1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d))
    return out.astype(np.float32)


def _sample_bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Border-clamped bilinear lookup of (H, W, 3) at float coordinates."""
    h, w = img.shape[:2]
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    return ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
            + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))


def _sprite_geometry(sprite: SpriteSpec, frame: int):
    cx = sprite.position[0] + frame * sprite.velocity[0]
    cy = sprite.position[1] + frame * sprite.velocity[1]
    theta = math.radians(frame * sprite.rotation)
    return cx, cy, theta


def _sprite_local_coords(sprite: SpriteSpec, frame: int, height: int, width: int):
    """Sprite-texture coordinates of every canvas pixel, plus the inside mask."""
    cx, cy, theta = _sprite_geometry(sprite, frame)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    dx = xs - cx
    dy = ys - cy
    cos_t, sin_t = math.cos(-theta), math.sin(-theta)
    lx = cos_t * dx - sin_t * dy + (sprite.size[1] - 1) / 2.0
    ly = sin_t * dx + cos_t * dy + (sprite.size[0] - 1) / 2.0
    inside = (lx >= 0) & (lx <= sprite.size[1] - 1) & (ly >= 0) & (ly <= sprite.size[0] - 1)
    return lx, ly, inside


def sprite_mask(spec: SceneSpec, sprite_idx: int, frame: int) -> np.ndarray:
    """Pixels owned by a sprite at a frame, honoring painter's-order occlusion.

    Later sprites in the list draw on top, so a pixel belongs to the
    front-most (= last listed) sprite containing it.
    """
    _, _, inside = _sprite_local_coords(spec.sprites[sprite_idx], frame,
                                        spec.height, spec.width)
    for j in range(sprite_idx + 1, len(spec.sprites)):
        _, _, occ = _sprite_local_coords(spec.sprites[j], frame, spec.height, spec.width)
        inside &= ~occ
    return inside


def render_sequence(spec: SceneSpec) -> np.ndarray:
    """Render all frames of a scene, (T, H, W, 3) float32 in [0, 1]."""
    spec.validate()
    h, w, t_len = spec.height, spec.width, spec.length
    vx, vy = spec.camera
    base_x = 1.0 + (t_len - 1) * max(vx, 0.0)
    base_y = 1.0 + (t_len - 1) * max(vy, 0.0)
    tex_h = h + 3 + int(math.ceil((t_len - 1) * abs(vy)))
    tex_w = w + 3 + int(math.ceil((t_len - 1) * abs(vx)))
    bg = value_noise(tex_h, tex_w, spec.background_seed)
    textures = [value_noise(s.size[0], s.size[1], s.texture_seed) for s in spec.sprites]

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    frames = np.empty((t_len, h, w, 3), np.float32)
    for k in range(t_len):
        # scene content moves by +camera per frame
        canvas = _sample_bilinear(bg, ys - k * vy + base_y, xs - k * vx + base_x)
        for sprite, tex in zip(spec.sprites, textures):
            lx, ly, inside = _sprite_local_coords(sprite, k, h, w)
            patch = _sample_bilinear(tex, ly, lx)
            canvas = np.where(inside[..., None], patch, canvas)
        frames[k] = canvas
    return frames


def analytic_flow(spec: SceneSpec, from_idx: int, to_idx: int) -> np.ndarray:
    """Exact displacement field from one frame to another, (2, H, W) float32.

    Background pixels carry the camera flow; pixels occupied by a sprite at
    the source frame carry that sprite's motion (front-most sprite wins).
    Disoccluded regions are approximated with the background flow.
    """
    if not (0 <= from_idx < spec.length and 0 <= to_idx < spec.length):
        raise RangeError(
            f"flow indices ({from_idx}, {to_idx}) outside sequence of length {spec.length}")
    h, w = spec.height, spec.width
    gap = to_idx - from_idx
    flow = np.empty((2, h, w), np.float32)
    flow[0] = np.float32(spec.camera[0]) * np.float32(gap)
    flow[1] = np.float32(spec.camera[1]) * np.float32(gap)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    for i, sprite in enumerate(spec.sprites):
        mask = sprite_mask(spec, i, from_idx)
        if not mask.any():
            continue
        ax, ay, atheta = _sprite_geometry(sprite, from_idx)
        bx, by, btheta = _sprite_geometry(sprite, to_idx)
        dtheta = btheta - atheta
        if dtheta == 0.0:
            u = np.float32(bx - ax)
            v = np.float32(by - ay)
            flow[0][mask] = u
            flow[1][mask] = v
        else:
            cos_t, sin_t = math.cos(dtheta), math.sin(dtheta)
            dx = xs - ax
            dy = ys - ay
            px = bx + cos_t * dx - sin_t * dy
            py = by + sin_t * dx + cos_t * dy
            flow[0][mask] = (px - xs)[mask].astype(np.float32)
            flow[1][mask] = (py - ys)[mask].astype(np.float32)
    return flow


def synthesize_blur(frames: np.ndarray, center: int, n: int) -> np.ndarray:
    """Arithmetic mean of the N frames centered at ``center``.

    Accumulation runs in float64, which is exact for float32 frame values,
    so forward and reversed windows produce bit-identical blurs.
    """
    if n < 1 or n % 2 == 0:
        raise ConfigError(f"blur window must be odd, got {n}")
    frames = np.asarray(frames)
    half = n // 2
    lo, hi = center - half, center + half + 1
    if lo < 0 or hi > frames.shape[0]:
        raise RangeError(
            f"blur window [{lo}, {hi}) outside sequence of length {frames.shape[0]}")
    return frames[lo:hi].mean(axis=0, dtype=np.float64).astype(np.float32)


# ---------------------------------------------------------------------------
# dataset manifest
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    n: int
    height: int
    width: int
    split: str
    samples: list[dict]
    schema_version: int = SCHEMA_VERSION
    root: Optional[Path] = None

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "n": self.n, "height": self.height, "width": self.width,
            "split": self.split, "samples": self.samples,
        }

    def save(self, path) -> None:
        path = Path(path)
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        path.write_text(text)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"{path}: unsupported manifest schema {d.get('schema_version')}")
        m = cls(n=d["n"], height=d["height"], width=d["width"],
                split=d["split"], samples=d["samples"])
        m.root = path.parent
        return m

    def validate(self) -> None:
        if self.n % 2 == 0:
            raise ConfigError(f"manifest N must be odd, got {self.n}")
        root = self.root or Path(".")
        for rec in self.samples:
            for key in ("latents", "flows", "blurs"):
                paths = rec.get(key)
                if paths is None:
                    continue
                for p in paths:
                    if not (root / p).exists():
                        raise ConfigError(f"manifest references missing file {p}")

    def __len__(self) -> int:
        return len(self.samples)


def load_sample(manifest: DatasetManifest, idx: int) -> dict:
    """Materialize one sample: latent frames, blur pair, optional GT flows.

    The blurry inputs are recomputed from the stored latent frames (Eq.-style
    frame averaging at load time); the blur PNGs on disk are for inspection.
    """
    rec = manifest.samples[idx]
    root = manifest.root or Path(".")
    frames = np.stack([read_png(root / p) for p in rec["latents"]])  # (2N, 3, H, W)
    fi = FrameIndexing(manifest.n)
    hwc = frames.transpose(0, 2, 3, 1)
    blurs = np.stack([
        synthesize_blur(hwc, fi.ref_positions[0], manifest.n).transpose(2, 0, 1),
        synthesize_blur(hwc, fi.ref_positions[1], manifest.n).transpose(2, 0, 1),
    ])
    flows = None
    if rec.get("flows"):
        flows = np.stack([read_flo(root / p) for p in rec["flows"]])  # (M, 2, H, W)
    return {"frames": frames, "blurs": blurs, "flows": flows,
            "tags": rec.get("tags", {})}


# ---------------------------------------------------------------------------
# dataset construction
# ---------------------------------------------------------------------------

def build_dataset(specs: Sequence[SceneSpec], out_dir, n: int = 7,
                  split: str = "train") -> DatasetManifest:
    """Render scenes to PNG frames + .flo flows and write a manifest."""
    if not specs:
        raise ConfigError("build_dataset needs at least one scene")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fi = FrameIndexing(n)
    records = []
    height = width = None
    for i, spec in enumerate(specs):
        spec.validate(n)
        if height is None:
            height, width = spec.height, spec.width
        elif (spec.height, spec.width) != (height, width):
            raise ConfigError("all scenes in a dataset must share the canvas size")
        frames = render_sequence(spec)[:fi.n_total]
        sdir = out_dir / f"sample_{i:04d}"
        sdir.mkdir(exist_ok=True)
        latents = []
        quant = np.empty_like(frames)
        for j in range(fi.n_total):
            rel = f"sample_{i:04d}/latent_{j:02d}.png"
            write_png(out_dir / rel, frames[j])
            quant[j] = np.round(np.clip(frames[j], 0, 1) * 255) / 255
            latents.append(rel)
        blurs = []
        for b, ref in enumerate(fi.ref_positions):
            rel = f"sample_{i:04d}/blur_{b}.png"
            write_png(out_dir / rel, synthesize_blur(quant, ref, n))
            blurs.append(rel)
        flows = []
        for m, (src, ref) in enumerate(fi.pairs):
            rel = f"sample_{i:04d}/flow_{m:02d}.flo"
            write_flo(out_dir / rel, analytic_flow(spec, src, ref))
            flows.append(rel)
        records.append({
            "dir": f"sample_{i:04d}",
            "latents": latents, "blurs": blurs, "flows": flows,
            "tags": {
                "constant_translation": bool(not spec.sprites and any(spec.camera)),
                "camera": list(spec.camera),
            },
            "scene": spec.to_dict(),
        })
    manifest = DatasetManifest(n=n, height=height, width=width, split=split,
                               samples=records, root=out_dir)
    manifest.save(out_dir / MANIFEST_NAME)
    return manifest


def ingest_frames(frame_dir, n: int = 7) -> DatasetManifest:
    """Build a manifest over a directory of lexicographically ordered frames.

    Consecutive disjoint groups of 2N frames become samples.  If a ``flows``
    subdirectory supplies ``flow_{sample:04d}_{m:02d}.flo`` files they are
    referenced; samples without flows are usable for the frame loss only.
    """
    frame_dir = Path(frame_dir)
    fi = FrameIndexing(n)
    paths = sorted(p for p in frame_dir.iterdir()
                   if p.suffix.lower() == ".png" and p.is_file())
    if len(paths) < fi.n_total:
        raise IngestError(
            f"{frame_dir}: found {len(paths)} frames, need at least {fi.n_total}")
    size = None
    for p in paths:
        img = read_png(p)
        if size is None:
            size = img.shape[1:]
        elif img.shape[1:] != size:
            raise IngestError(
                f"{p.name}: frame size {img.shape[1:]} differs from {size}")
    records = []
    flow_dir = frame_dir / "flows"
    for s, start in enumerate(range(0, len(paths) - fi.n_total + 1, fi.n_total)):
        group = paths[start:start + fi.n_total]
        flows = None
        if flow_dir.is_dir():
            cand = [flow_dir / f"flow_{s:04d}_{m:02d}.flo" for m in range(fi.n_flows)]
            if all(c.exists() for c in cand):
                flows = [str(c.relative_to(frame_dir)) for c in cand]
        records.append({
            "dir": ".",
            "latents": [p.name for p in group],
            "blurs": None,
            "flows": flows,
            "tags": {},
        })
    manifest = DatasetManifest(n=n, height=size[0], width=size[1],
                               split="ingested", samples=records, root=frame_dir)
    return manifest


# ---------------------------------------------------------------------------
# random scene generation (desk-scale defaults)
# ---------------------------------------------------------------------------

def _dyadic(rng: np.random.Generator, lo: float, hi: float) -> float:
    """Random multiple of 0.25 in [lo, hi] (exact in float32)."""
    steps = np.arange(math.ceil(lo / 0.25), math.floor(hi / 0.25) + 1)
    return float(rng.choice(steps) * 0.25)


def _velocity(rng: np.random.Generator, lo: float, hi: float) -> tuple[float, float]:
    """Random dyadic (vx, vy) whose magnitude lands in [lo, hi]."""
    for _ in range(200):
        vx = _dyadic(rng, -hi, hi)
        vy = _dyadic(rng, -hi, hi)
        if lo <= math.hypot(vx, vy) <= hi:
            return vx, vy
    return lo, 0.0


def make_random_scene(rng: np.random.Generator, height: int = 64, width: int = 64,
                      n: int = 7, constant_translation: bool = False,
                      min_speed: float = 0.5, max_speed: float = 3.0,
                      sprite_count: tuple[int, int] = (2, 4),
                      rotation: bool = False) -> SceneSpec:
    """Draw one scene; constant-translation scenes pan a bare background."""
    length = 2 * n
    if constant_translation:
        cam = _velocity(rng, max(min_speed, 0.5), min(1.0, max_speed))
        return SceneSpec(height=height, width=width,
                         background_seed=int(rng.integers(2 ** 31)),
                         sprites=[], camera=cam, length=length,
                         seed=int(rng.integers(2 ** 31)))
    cam = _velocity(rng, 0.0, 1.0) if rng.random() < 0.7 else (0.0, 0.0)
    sprites = []
    for _ in range(int(rng.integers(sprite_count[0], sprite_count[1] + 1))):
        sh = int(rng.integers(12, 25))
        sw = int(rng.integers(12, 25))
        margin = 6
        px = float(rng.uniform(margin + sw / 2, width - margin - sw / 2))
        py = float(rng.uniform(margin + sh / 2, height - margin - sh / 2))
        vel = _velocity(rng, min_speed, max_speed)
        rot = float(rng.uniform(-3.0, 3.0)) if rotation and rng.random() < 0.5 else 0.0
        sprites.append(SpriteSpec(texture_seed=int(rng.integers(2 ** 31)),
                                  size=(sh, sw), position=(px, py),
                                  velocity=vel, rotation=rot))
    return SceneSpec(height=height, width=width,
                     background_seed=int(rng.integers(2 ** 31)),
                     sprites=sprites, camera=cam, length=length,
                     seed=int(rng.integers(2 ** 31)))


def generate_scenes(count: int, seed: int, height: int = 64, width: int = 64,
                    n: int = 7, constant_translation_fraction: float = 0.3,
                    min_speed: float = 0.5, max_speed: float = 3.0,
                    rotation: bool = False) -> list[SceneSpec]:
    """Deterministic scene list; each scene derives its own rng stream from
    (seed, index) so parallel and serial generation agree bit for bit."""
    scenes = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        const = rng.random() < constant_translation_fraction
        scenes.append(make_random_scene(
            rng, height=height, width=width, n=n, constant_translation=const,
            min_speed=min_speed, max_speed=max_speed, rotation=rotation))
    return scenes
