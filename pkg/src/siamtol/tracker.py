"""Online tracking with confidence-gated update samples and periodic refresh.

Per frame: ``track_step`` -> ``store_update_candidate`` -> ``refresh_template``.
The fuser always combines the *initial* exemplar features with the latest
buffered sample, so templates never compound.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import TemplateSet
from .geometry import BBox, context_size, crop_patch, decode_array, generate_anchors
from .loss import flat_deltas, foreground_prob
from .model import SiamTOL, response_size
from .trainer import CropConfig, to_tensor


class TrackingError(RuntimeError):
    pass


@dataclass
class TrackerConfig:
    T_m: float = 0.9
    N: int = 10
    window_influence: float = 0.40
    penalty_k: float = 0.05
    smoothing: float = 0.30
    update_enabled: bool = True
    min_size: float = 10.0

    def validate(self) -> None:
        if not 0.0 < self.T_m < 1.0:
            raise ValueError("T_m must lie in (0, 1)")
        if self.N < 1:
            raise ValueError("N must be >= 1")


@dataclass
class UpdateSample:
    patch: np.ndarray
    confidence: float
    frame: int


@dataclass
class TrackState:
    zf: TemplateSet
    active_template: TemplateSet
    prev_box: BBox
    frame_size: tuple[int, int]          # (width, height)
    cfg: TrackerConfig
    crop: CropConfig
    update_buffer: UpdateSample | None = None
    frame_counter: int = 0
    refreshes: list[int] = field(default_factory=list)


def _change(r):
    return np.maximum(r, 1.0 / r)


def _sz(w, h):
    p = (w + h) * 0.5
    return np.sqrt((w + p) * (h + p))


class _Geometry:
    """Anchors and cosine window, cached per model configuration."""

    def __init__(self, model: SiamTOL, crop: CropConfig):
        r = response_size(crop.search_size)
        self.anchors = generate_anchors(model.anchor_cfg, r, crop.search_size)
        hann = np.hanning(r)
        self.window = np.tile(np.outer(hann, hann).ravel(), self.anchors.num_anchors)
        self.centre = (crop.search_size - 1) / 2.0


_GEOM_CACHE: dict = {}


def _geometry(model: SiamTOL, crop: CropConfig) -> _Geometry:
    key = (crop.search_size, tuple(model.anchor_cfg.ratios), tuple(model.anchor_cfg.scales),
           model.anchor_cfg.stride)
    if key not in _GEOM_CACHE:
        _GEOM_CACHE[key] = _Geometry(model, crop)
    return _GEOM_CACHE[key]


def _template_from_patch(model: SiamTOL, patch: np.ndarray, tag: str) -> TemplateSet:
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        return model.template(to_tensor([patch], dtype), tag)


def init_track(frame: np.ndarray, gt: BBox, model: SiamTOL, cfg: TrackerConfig | None = None,
               crop: CropConfig | None = None) -> TrackState:
    cfg = cfg or TrackerConfig()
    cfg.validate()
    crop = crop or CropConfig()
    h, w = frame.shape[:2]
    model.eval()
    s_z = context_size(gt.w, gt.h, crop.context_amount)
    patch = crop_patch(frame, (gt.cx, gt.cy), s_z, crop.exemplar_size)
    zf = _template_from_patch(model, patch, "initial")
    return TrackState(zf=zf, active_template=zf, prev_box=gt, frame_size=(w, h), cfg=cfg, crop=crop)


def score_candidates(state: TrackState, model: SiamTOL, frame: np.ndarray):
    """Raw foreground probabilities, decoded boxes (patch-centred) and scale."""
    crop, prev = state.crop, state.prev_box
    s_z = context_size(prev.w, prev.h, crop.context_amount)
    scale_z = crop.exemplar_size / s_z
    s_x = s_z * crop.search_size / crop.exemplar_size
    patch = crop_patch(frame, (prev.cx, prev.cy), s_x, crop.search_size)
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model.detect(state.active_template, model.encode(to_tensor([patch], dtype)))
        score = foreground_prob(out.cls)[0].double().numpy()
        deltas = flat_deltas(out.reg)[0].double().numpy()
    geom = _geometry(model, crop)
    boxes = decode_array(geom.anchors.flat, deltas)
    boxes[:, 0] -= geom.centre
    boxes[:, 1] -= geom.centre
    return score, boxes, scale_z


def select_candidate(score: np.ndarray, boxes: np.ndarray, prev: BBox, scale_z: float,
                     window: np.ndarray, cfg: TrackerConfig) -> tuple[int, float]:
    """Index of the chosen anchor and its smoothing rate."""
    s_c = _change(_sz(boxes[:, 2], boxes[:, 3]) / _sz(prev.w * scale_z, prev.h * scale_z))
    r_c = _change((prev.w / prev.h) / (boxes[:, 2] / boxes[:, 3]))
    penalty = np.exp(cfg.penalty_k * (1.0 - r_c * s_c))
    pscore = penalty * score
    pscore = pscore * (1.0 - cfg.window_influence) + window * cfg.window_influence
    best = int(np.argmax(pscore))
    return best, float(penalty[best] * score[best] * cfg.smoothing)


def track_step(state: TrackState, frame: np.ndarray, model: SiamTOL) -> tuple[BBox, float]:
    score, boxes, scale_z = score_candidates(state, model, frame)
    if not (np.all(np.isfinite(score)) and np.all(np.isfinite(boxes))):
        raise TrackingError(f"non-finite scores at frame {state.frame_counter + 1}")
    prev, cfg = state.prev_box, state.cfg
    best, rate = select_candidate(score, boxes, prev, scale_z, _geometry(model, state.crop).window, cfg)
    bx = boxes[best] / scale_z
    cx = prev.cx + bx[0]
    cy = prev.cy + bx[1]
    w = prev.w * (1.0 - rate) + bx[2] * rate
    h = prev.h * (1.0 - rate) + bx[3] * rate
    fw, fh = state.frame_size
    cx = float(np.clip(cx, 0, fw))
    cy = float(np.clip(cy, 0, fh))
    w = float(np.clip(w, cfg.min_size, fw))
    h = float(np.clip(h, cfg.min_size, fh))
    box = BBox(cx, cy, w, h)
    state.prev_box = box
    state.frame_counter += 1
    return box, float(score.max())


def store_update_candidate(state: TrackState, frame: np.ndarray, predicted: BBox, confidence: float) -> bool:
    """Buffer the crop at ``predicted`` if ``confidence`` exceeds T_m."""
    if confidence <= state.cfg.T_m:
        return False
    crop = state.crop
    s_z = context_size(predicted.w, predicted.h, crop.context_amount)
    patch = crop_patch(frame, (predicted.cx, predicted.cy), s_z, crop.exemplar_size)
    state.update_buffer = UpdateSample(patch, float(confidence), state.frame_counter)
    return True


def refresh_due(state: TrackState) -> bool:
    return (state.cfg.update_enabled and state.frame_counter % state.cfg.N == 0
            and state.update_buffer is not None)


def refresh_template(state: TrackState, model: SiamTOL) -> bool:
    if not refresh_due(state):
        return False
    uf = _template_from_patch(model, state.update_buffer.patch, "update")
    with torch.no_grad():
        state.active_template = model.fuse(state.zf, uf)
    state.refreshes.append(state.frame_counter)
    return True


class SiamTOLTracker:
    def __init__(self, model: SiamTOL, cfg: TrackerConfig | None = None, crop: CropConfig | None = None):
        self.model = model
        self.cfg = cfg or TrackerConfig()
        self.crop = crop or CropConfig()
        self.state: TrackState | None = None

    def init(self, frame: np.ndarray, box: BBox) -> None:
        self.state = init_track(frame, box, self.model, self.cfg, self.crop)

    def update(self, frame: np.ndarray) -> tuple[BBox, float]:
        if self.state is None:
            raise TrackingError("tracker not initialised")
        box, conf = track_step(self.state, frame, self.model)
        if self.cfg.update_enabled:
            store_update_candidate(self.state, frame, box, conf)
            refresh_template(self.state, self.model)
        return box, conf


def track_sequence(model: SiamTOL, sequence, cfg: TrackerConfig | None = None,
                   crop: CropConfig | None = None) -> list[tuple[BBox, float]]:
    """Track from the first frame's ground truth; frame 0 reports (gt, 1.0)."""
    tracker = SiamTOLTracker(model, cfg, crop)
    first = sequence.gt[0]
    if first is None:
        raise TrackingError(f"{sequence.name}: first frame has no ground truth")
    tracker.init(sequence.frames[0], first)
    results = [(first, 1.0)]
    for t in range(1, len(sequence)):
        results.append(tracker.update(sequence.frames[t]))
    return results


def format_results(results: list[tuple[BBox, float]]) -> str:
    """One ``x,y,w,h,confidence`` line per frame; corners 1-indexed like
    ``groundtruth_rect.txt``."""
    lines = []
    for box, conf in results:
        x, y, w, h = box.xywh()
        lines.append(f"{x + 1:.4f},{y + 1:.4f},{w:.4f},{h:.4f},{conf:.6f}")
    return "\n".join(lines) + "\n"
