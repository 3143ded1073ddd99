"""Synthetic drift sequences and OTB-layout sequence I/O.

Frames are HxWx3 uint8 RGB arrays. Synthetic frames are rendered on demand
from a compact per-sequence state, so a few hundred training sequences fit
in memory.
"""
from __future__ import annotations

import json
import math
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence as SequenceT

import cv2
import numpy as np

from .geometry import BBox

# positions and sizes are snapped to this grid so that corner/centre and
# 0/1-index conversions are exact in binary floating point
QUANTUM = 1.0 / 16.0
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class DataError(ValueError):
    pass


@dataclass
class Sequence:
    name: str
    frames: Any                      # len() and integer indexing, HxWx3 uint8
    gt: list[BBox | None]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.frames) != len(self.gt):
            raise DataError(f"{self.name}: {len(self.frames)} frames but {len(self.gt)} boxes")

    def __len__(self) -> int:
        return len(self.gt)

    @property
    def valid_indices(self) -> list[int]:
        return [i for i, b in enumerate(self.gt) if b is not None]


# ---------------------------------------------------------------------------
# synthetic generation

@dataclass
class SynthConfig:
    frame_width: int = 192
    frame_height: int = 192
    length: int = 60
    object_size: list[float] = field(default_factory=lambda: [28.0, 44.0])
    aspect_range: list[float] = field(default_factory=lambda: [0.7, 1.4])
    scale_change: float = 0.2        # max |relative size change| over the sequence
    speed: float = 1.5               # max initial speed, px/frame
    motion_noise: float = 0.3        # velocity noise std, px/frame
    drift_rate: float = 0.02         # appearance blend advance per frame
    occlusions: list[list[int]] = field(default_factory=list)   # [start, length]
    random_occlusions: int = 0
    occlusion_length: list[int] = field(default_factory=lambda: [3, 8])
    blurs: list[list[int]] = field(default_factory=list)        # [start, length]
    random_blurs: int = 0
    blur_sigma: float = 1.5
    texture_cells: int = 5
    background_cells: int = 12
    background_contrast: float = 0.8
    distractors: int = 0

    def validate(self) -> None:
        lo, hi = self.object_size
        if not 0 < lo <= hi:
            raise DataError("object_size must be 0 < min <= max")
        big = hi * max(self.aspect_range) * (1 + self.scale_change)
        if big + 4 >= min(self.frame_width, self.frame_height):
            raise DataError("object larger than frame")
        if not 0.0 <= self.drift_rate <= 1.0:
            raise DataError("drift_rate must be in [0, 1]")
        if self.length < 1:
            raise DataError("length must be >= 1")
        for start, n in list(self.occlusions) + list(self.blurs):
            if start < 0 or n < 1 or start + n > self.length:
                raise DataError(f"event [{start}, {n}] outside sequence of length {self.length}")


def value_noise(rng: np.random.Generator, cells: int, width: int, height: int,
                contrast: float = 1.0) -> np.ndarray:
    """Smooth colour noise in [0, 255], float32 HxWx3."""
    grid = rng.random((cells, cells, 3)).astype(np.float32)
    tex = cv2.resize(grid, (width, height), interpolation=cv2.INTER_CUBIC)
    tex = 0.5 + contrast * (np.clip(tex, 0.0, 1.0) - 0.5)
    return tex * 255.0


def _snap(x):
    return np.round(np.asarray(x, dtype=np.float64) / QUANTUM) * QUANTUM


def _superellipse_mask(cx, cy, w, h, n, x0, y0, x1, y1):
    xs = (np.arange(x0, x1 + 1) - cx) / (w / 2.0)
    ys = (np.arange(y0, y1 + 1) - cy) / (h / 2.0)
    return (np.abs(xs)[None, :] ** n + np.abs(ys)[:, None] ** n) <= 1.0


def _paint(canvas, tex, cx, cy, w, h, n, mask_only=None):
    """Paint a superellipse filled with ``tex`` (resized to the box)."""
    x0, y0 = math.ceil(cx - w / 2), math.ceil(cy - h / 2)
    x1, y1 = math.floor(cx + w / 2), math.floor(cy + h / 2)
    x0c, y0c = max(x0, 0), max(y0, 0)
    x1c, y1c = min(x1, canvas.shape[1] - 1), min(y1, canvas.shape[0] - 1)
    if x1c < x0c or y1c < y0c:
        return
    mask = _superellipse_mask(cx, cy, w, h, n, x0c, y0c, x1c, y1c)
    patch = cv2.resize(tex, (x1 - x0 + 1, y1 - y0 + 1), interpolation=cv2.INTER_LINEAR)
    patch = patch[y0c - y0:y1c - y0 + 1, x0c - x0:x1c - x0 + 1]
    region = canvas[y0c:y1c + 1, x0c:x1c + 1]
    region[mask] = patch[mask]


def _trajectory(rng, length, sizes, width, height, speed, noise, start=None):
    pos = np.empty((length, 2))
    if start is None:
        start = (rng.uniform(sizes[0, 0] / 2 + 2, width - sizes[0, 0] / 2 - 2),
                 rng.uniform(sizes[0, 1] / 2 + 2, height - sizes[0, 1] / 2 - 2))
    p = np.array(start, dtype=np.float64)
    ang = rng.uniform(0, 2 * np.pi)
    v = rng.uniform(0, speed) * np.array([np.cos(ang), np.sin(ang)])
    lims = np.array([width, height], dtype=np.float64)
    for t in range(length):
        if t > 0:
            if noise > 0:
                v = v + rng.normal(0, noise, 2)
            p = p + v
        lo = sizes[t] / 2 + 1
        hi = lims - sizes[t] / 2 - 1
        for k in range(2):
            if p[k] < lo[k]:
                p[k] = min(2 * lo[k] - p[k], hi[k])
                v[k] = abs(v[k])
            elif p[k] > hi[k]:
                p[k] = max(2 * hi[k] - p[k], lo[k])
                v[k] = -abs(v[k])
        pos[t] = p
    return pos


class SynthFrames:
    """Lazily rendered frames of one synthetic sequence."""

    def __init__(self, cfg: SynthConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        ss = np.random.SeedSequence(seed)
        r_shape, r_tex, r_motion, r_bg, r_events, r_distr = (np.random.default_rng(s) for s in ss.spawn(6))
        W, H, L = cfg.frame_width, cfg.frame_height, cfg.length

        side = r_shape.uniform(*cfg.object_size)
        aspect = r_shape.uniform(*cfg.aspect_range)      # h / w
        w0, h0 = side / math.sqrt(aspect), side * math.sqrt(aspect)
        growth = 1.0 + r_shape.uniform(-cfg.scale_change, cfg.scale_change)
        frac = np.linspace(0.0, 1.0, L) if L > 1 else np.zeros(1)
        scale = 1.0 + (growth - 1.0) * frac
        self.sizes = _snap(np.stack([w0 * scale, h0 * scale], axis=1))
        self.exponent = r_shape.uniform(1.6, 4.0)

        self.tex_start = value_noise(r_tex, cfg.texture_cells, 64, 64)
        self.tex_end = value_noise(r_tex, cfg.texture_cells, 64, 64)
        self.background = value_noise(r_bg, cfg.background_cells, W, H, cfg.background_contrast)
        self.occluder_tex = value_noise(r_bg, cfg.background_cells, W, H, cfg.background_contrast)

        self.centres = _snap(_trajectory(r_motion, L, self.sizes, W, H, cfg.speed, cfg.motion_noise))

        occl = [tuple(e) for e in cfg.occlusions]
        blurs = [tuple(e) for e in cfg.blurs]
        for _ in range(cfg.random_occlusions):
            n = int(r_events.integers(cfg.occlusion_length[0], cfg.occlusion_length[1] + 1))
            if L > n + 1:
                occl.append((int(r_events.integers(1, L - n)), n))
        for _ in range(cfg.random_blurs):
            n = int(r_events.integers(2, 6))
            if L > n + 1:
                blurs.append((int(r_events.integers(1, L - n)), n))
        # occluder covers 40-70% of the object width, anchored on a random side
        self.occlusions = [(s, n, r_events.uniform(0.4, 0.7), int(r_events.integers(4))) for s, n in occl]
        self.blurs = blurs

        self.distractors = []
        for _ in range(cfg.distractors):
            dside = r_distr.uniform(*cfg.object_size)
            dsize = np.tile([dside, dside * r_distr.uniform(*cfg.aspect_range)], (L, 1))
            traj = _trajectory(r_distr, L, dsize, W, H, cfg.speed, cfg.motion_noise)
            self.distractors.append((value_noise(r_distr, cfg.texture_cells, 64, 64),
                                     dsize, traj, r_distr.uniform(1.6, 4.0)))

    def __len__(self) -> int:
        return self.cfg.length

    def box(self, t: int) -> BBox:
        (cx, cy), (w, h) = self.centres[t], self.sizes[t]
        return BBox(float(cx), float(cy), float(w), float(h))

    def appearance(self, t: int) -> np.ndarray:
        alpha = min(1.0, self.cfg.drift_rate * t)
        if alpha == 0.0:
            return self.tex_start
        return (1.0 - alpha) * self.tex_start + alpha * self.tex_end

    def __getitem__(self, t: int) -> np.ndarray:
        if not -len(self) <= t < len(self):
            raise IndexError(t)
        t = t % len(self)
        canvas = self.background.copy()
        for tex, dsize, traj, n in self.distractors:
            _paint(canvas, tex, traj[t, 0], traj[t, 1], dsize[t, 0], dsize[t, 1], n)
        cx, cy = self.centres[t]
        w, h = self.sizes[t]
        _paint(canvas, self.appearance(t), cx, cy, w, h, self.exponent)
        for start, n, cover, side in self.occlusions:
            if start <= t < start + n:
                self._occlude(canvas, cx, cy, w, h, cover, side)
        for start, n in self.blurs:
            if start <= t < start + n:
                canvas = cv2.GaussianBlur(canvas, (0, 0), self.cfg.blur_sigma)
        return np.clip(np.rint(canvas), 0, 255).astype(np.uint8)

    def _occlude(self, canvas, cx, cy, w, h, cover, side):
        x0, y0, x1, y1 = cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2
        if side == 0:
            x1 = x0 + cover * w
        elif side == 1:
            x0 = x1 - cover * w
        elif side == 2:
            y1 = y0 + cover * h
        else:
            y0 = y1 - cover * h
        xa, ya = max(int(math.floor(x0)), 0), max(int(math.floor(y0)), 0)
        xb = min(int(math.ceil(x1)), canvas.shape[1] - 1)
        yb = min(int(math.ceil(y1)), canvas.shape[0] - 1)
        canvas[ya:yb + 1, xa:xb + 1] = self.occluder_tex[ya:yb + 1, xa:xb + 1]


def synth_sequence(cfg: SynthConfig, seed: int, name: str | None = None) -> Sequence:
    frames = SynthFrames(cfg, seed)
    gt = [frames.box(t) for t in range(len(frames))]
    return Sequence(name or f"synth_{seed:06d}", frames, gt,
                    {"seed": int(seed), "config": asdict(cfg)})


def synth_dataset(cfg: SynthConfig, count: int, seed: int, prefix: str = "synth") -> list[Sequence]:
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [synth_sequence(cfg, int(s), f"{prefix}_{i:04d}") for i, s in enumerate(seeds)]


# ---------------------------------------------------------------------------
# OTB layout

class ImageFrames:
    def __init__(self, paths: SequenceT[Path]):
        self.paths = list(paths)

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, t: int) -> np.ndarray:
        img = cv2.imread(str(self.paths[t]), cv2.IMREAD_COLOR)
        if img is None:
            raise DataError(f"cannot read image {self.paths[t]}")
        return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def parse_gt_line(line: str, lineno: int) -> BBox | None:
    parts = [p for p in re.split(r"[,\t ]+", line.strip()) if p]
    if len(parts) != 4:
        raise DataError(f"groundtruth line {lineno}: expected 4 values, got {line.strip()!r}")
    try:
        x, y, w, h = (float(p) for p in parts)
    except ValueError:
        raise DataError(f"groundtruth line {lineno}: unparseable {line.strip()!r}") from None
    if not all(math.isfinite(v) for v in (x, y, w, h)) or w <= 0 or h <= 0:
        return None
    return BBox.from_xywh(x - 1.0, y - 1.0, w, h)


def load_sequence(path: str | os.PathLike) -> Sequence:
    root = Path(path)
    img_dir, gt_file = root / "img", root / "groundtruth_rect.txt"
    if not img_dir.is_dir():
        raise DataError(f"missing image directory {img_dir}")
    if not gt_file.is_file():
        raise DataError(f"missing ground truth file {gt_file}")
    paths = [p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_EXTS]
    try:
        paths.sort(key=lambda p: int(p.stem))
    except ValueError:
        raise DataError(f"non-numeric frame names in {img_dir}") from None
    lines = [l for l in gt_file.read_text().splitlines() if l.strip()]
    gt = [parse_gt_line(l, i + 1) for i, l in enumerate(lines)]
    if len(gt) != len(paths):
        raise DataError(f"{root.name}: {len(paths)} frames but {len(gt)} ground-truth lines")
    meta = {}
    if (root / "meta.json").is_file():
        meta = json.loads((root / "meta.json").read_text())
    return Sequence(root.name, ImageFrames(paths), gt, meta)


def format_number(v: float) -> str:
    return repr(float(v)) if v != int(v) else str(int(v))


def write_sequence(seq: Sequence, path: str | os.PathLike) -> Path:
    root = Path(path)
    (root / "img").mkdir(parents=True, exist_ok=True)
    for t in range(len(seq)):
        frame = seq.frames[t]
        cv2.imwrite(str(root / "img" / f"{t + 1:04d}.png"), cv2.cvtColor(frame, cv2.COLOR_RGB2BGR))
    lines = []
    for b in seq.gt:
        if b is None:
            lines.append("NaN,NaN,NaN,NaN")
        else:
            x, y, w, h = b.xywh()
            lines.append(",".join(format_number(v) for v in (x + 1.0, y + 1.0, w, h)))
    (root / "groundtruth_rect.txt").write_text("\n".join(lines) + "\n")
    (root / "meta.json").write_text(json.dumps(seq.metadata, indent=2, sort_keys=True) + "\n")
    return root
