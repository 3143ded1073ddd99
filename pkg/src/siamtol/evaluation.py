"""OTB-style success/precision metrics and the baseline-vs-updatable benchmark."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from .data import Sequence
from .geometry import BBox, iou_array
from .tracker import TrackerConfig, track_sequence

log = logging.getLogger(__name__)

THRESHOLDS = np.arange(21) / 20.0     # k / 20, correctly rounded
VARIANTS = ("baseline", "updatable")


def _as_array(boxes) -> np.ndarray:
    return np.array([b.as_array() if isinstance(b, BBox) else b for b in boxes], dtype=np.float64).reshape(-1, 4)


def _aligned(pred, gt):
    p, g = _as_array(pred), _as_array(gt)
    if p.shape != g.shape:
        raise ValueError(f"{len(p)} predictions vs {len(g)} ground-truth boxes")
    return p, g


def overlaps(pred, gt) -> np.ndarray:
    p, g = _aligned(pred, gt)
    return iou_array(p, g)


def success_curve(pred, gt) -> np.ndarray:
    """Fraction of frames with IoU strictly above each of 21 thresholds."""
    ov = overlaps(pred, gt)
    if ov.size == 0:
        return np.zeros_like(THRESHOLDS)
    return (ov[None, :] > THRESHOLDS[:, None]).mean(axis=1)


def success_auc(pred, gt) -> float:
    """Mean of the success curve, computed as hits / (21 * frames) so it is
    rounded once."""
    ov = overlaps(pred, gt)
    if ov.size == 0:
        return 0.0
    hits = int((ov[None, :] > THRESHOLDS[:, None]).sum())
    return hits / (len(THRESHOLDS) * ov.size)


def centre_errors(pred, gt) -> np.ndarray:
    p, g = _aligned(pred, gt)
    return np.hypot(p[:, 0] - g[:, 0], p[:, 1] - g[:, 1])


def precision_curve(pred, gt, radii=np.arange(0, 51)) -> np.ndarray:
    err = centre_errors(pred, gt)
    if err.size == 0:
        return np.zeros(len(radii))
    return (err[None, :] <= np.asarray(radii, dtype=np.float64)[:, None]).mean(axis=1)


def precision_at(pred, gt, radius: float = 20.0) -> float:
    err = centre_errors(pred, gt)
    return float((err <= radius).mean()) if err.size else 0.0


@dataclass
class SequenceResult:
    name: str
    mean_iou: float
    success_auc: float
    precision: float
    error: str | None = None


@dataclass
class EvalReport:
    variant: str
    seed: int | None
    sequences: list[SequenceResult] = field(default_factory=list)

    @property
    def ok(self) -> list[SequenceResult]:
        return [s for s in self.sequences if s.error is None]

    def aggregate(self) -> dict[str, float]:
        ok = self.ok
        if not ok:
            return {"mean_iou": float("nan"), "success_auc": float("nan"), "precision": float("nan")}
        return {k: float(np.mean([getattr(s, k) for s in ok])) for k in ("mean_iou", "success_auc", "precision")}

    def to_dict(self) -> dict:
        return {"variant": self.variant, "seed": self.seed,
                "sequences": [asdict(s) for s in self.sequences], "aggregate": self.aggregate()}


def evaluate_sequence(name: str, pred, gt) -> SequenceResult:
    """Metrics over frames that carry ground truth (absent entries skipped)."""
    keep = [i for i, g in enumerate(gt) if g is not None]
    p = [pred[i] for i in keep]
    g = [gt[i] for i in keep]
    return SequenceResult(name, float(overlaps(p, g).mean()) if keep else 0.0,
                          success_auc(p, g), precision_at(p, g))


def run_benchmark(model, sequences: Iterable[Sequence] | Callable[[int], Iterable[Sequence]],
                  variants=VARIANTS, seeds=(0,), tracker_cfg: TrackerConfig | None = None,
                  crop=None) -> list[EvalReport]:
    """Track every sequence with each variant; ``baseline`` disables updates.

    ``sequences`` may be a callable mapping a seed to that seed's sequence
    set; a plain iterable is reused for every seed.
    """
    tracker_cfg = tracker_cfg or TrackerConfig()
    if not callable(sequences):
        fixed = list(sequences)
        sequences = lambda seed: fixed  # noqa: E731
    reports = []
    for seed in seeds:
        seqs = list(sequences(seed))
        if not seqs:
            raise ValueError("benchmark needs at least one sequence")
        for variant in variants:
            if variant not in VARIANTS:
                raise ValueError(f"unknown variant {variant!r}")
            cfg = replace(tracker_cfg, update_enabled=(variant == "updatable"))
            rep = EvalReport(variant, seed)
            for seq in seqs:
                try:
                    res = track_sequence(model, seq, cfg, crop)
                    rep.sequences.append(evaluate_sequence(seq.name, [b for b, _ in res], seq.gt))
                except Exception as exc:  # recorded, batch continues
                    log.warning("sequence %s failed: %s", seq.name, exc)
                    rep.sequences.append(SequenceResult(seq.name, 0.0, 0.0, 0.0, error=str(exc)))
            reports.append(rep)
    return reports


def delta_summary(reports: list[EvalReport], metric: str = "success_auc") -> dict:
    """Per-seed updatable-minus-baseline aggregate deltas and their median."""
    by_seed: dict = {}
    for r in reports:
        by_seed.setdefault(r.seed, {})[r.variant] = r.aggregate()[metric]
    deltas = {s: v["updatable"] - v["baseline"] for s, v in by_seed.items()
              if "updatable" in v and "baseline" in v}
    per_seq = []
    for seed in by_seed:
        rs = {r.variant: r for r in reports if r.seed == seed}
        if "updatable" in rs and "baseline" in rs:
            for a, b in zip(rs["updatable"].sequences, rs["baseline"].sequences):
                per_seq.append(getattr(a, metric) - getattr(b, metric))
    return {"metric": metric,
            "per_seed": {str(k): v for k, v in deltas.items()},
            "median_delta": float(np.median(list(deltas.values()))) if deltas else float("nan"),
            "median_sequence_delta": float(np.median(per_seq)) if per_seq else float("nan"),
            "baseline": {str(s): v.get("baseline") for s, v in by_seed.items()},
            "updatable": {str(s): v.get("updatable") for s, v in by_seed.items()}}
