"""
General Object Detection (GOD) view construction.

Detected boxes are grouped by class, the most frequent classes are kept, and
each kept class contributes envelopes that merge the target region with a
random subset of that class's boxes. Training samples j-1 of these envelopes;
inference keeps the one that looks most different from the target.
"""
import logging
from collections import Counter
from typing import List, Sequence

import numpy as np

from models import BBox, CandidateView, Detection, DiscrepancyMode, GodConfig, PreconditionError, SceneInput
from modules.frozen_encoders import FrozenVisionEncoder, crop
from modules.tensor import Rng

logger = logging.getLogger("aligncap")

TARGET_SOURCE = "target"


def rank_classes(detections: Sequence[Detection], k: int) -> List[str]:
    """Classes by descending detection count, ties by name, truncated to k."""
    if k < 1:
        raise PreconditionError(f"rank_classes needs k >= 1, got {k}")
    counts = Counter(d.class_name for d in detections)
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    return [name for name, _ in ranked[:k]]


def merge_view(target: BBox, class_boxes: Sequence[BBox]) -> BBox:
    """Smallest box enclosing the target and every class box."""
    if not class_boxes:
        raise PreconditionError("merge_view needs at least one class box")
    boxes = [target, *class_boxes]
    return BBox(min(b.x0 for b in boxes), min(b.y0 for b in boxes),
                max(b.x1 for b in boxes), max(b.y1 for b in boxes))


def iou(a: BBox, b: BBox) -> float:
    w = min(a.x1, b.x1) - max(a.x0, b.x0)
    h = min(a.y1, b.y1) - max(a.y0, b.y0)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return inter / (a.area + b.area - inter)


def _class_envelopes(target: BBox, boxes: List[BBox], count: int, rng: Rng) -> List[BBox]:
    envelopes = []
    for _ in range(count):
        size = int(rng.integers(1, len(boxes) + 1))
        chosen = sorted(rng.choice(len(boxes), size=size, replace=False))
        envelopes.append(merge_view(target, [boxes[i] for i in chosen]))
    return envelopes


def build_candidates(target: BBox, detections: Sequence[Detection], config: GodConfig, rng: Rng) -> List[CandidateView]:
    """[target view] followed by j-1 sampled candidate envelopes."""
    target_view = CandidateView(target, TARGET_SOURCE, is_target=True)
    if not detections:
        logger.warning(f"GOD: no detections for target {target.to_list()}; repeating the target view {config.j} times")
        return [target_view] + [CandidateView(target, TARGET_SOURCE, is_target=False)] * (config.j - 1)

    needed = config.j - 1
    pool: List[CandidateView] = []
    for name in rank_classes(detections, config.k):
        boxes = [d.bbox for d in detections if d.class_name == name]
        for env in _class_envelopes(target, boxes, needed, rng.child("class", name)):
            pool.append(CandidateView(env, name, is_target=False))

    picker = rng.child("sample")
    idx = picker.choice(len(pool), size=needed, replace=len(pool) < needed)
    sampled = [pool[int(i)] for i in idx]
    logger.debug(f"GOD: {len(pool)} envelopes from {config.k} classes, sampled {needed}")
    return [target_view] + sampled


def _pooled_features(scene: SceneInput, box: BBox, encoder: FrozenVisionEncoder) -> np.ndarray:
    view, _ = crop(scene, box)
    return encoder.encode_image(view).data.reshape(-1, encoder.d_v).mean(axis=0)


def view_discrepancies(candidates: Sequence[CandidateView], target: BBox, scene: SceneInput,
                       encoder: FrozenVisionEncoder, mode: DiscrepancyMode) -> List[float]:
    if mode == DiscrepancyMode.ONE_MINUS_IOU:
        return [1.0 - iou(c.bbox, target) for c in candidates]
    ref = _pooled_features(scene, target, encoder)
    scores = []
    for c in candidates:
        feat = _pooled_features(scene, c.bbox, encoder)
        denom = max(np.linalg.norm(feat) * np.linalg.norm(ref), 1e-12)
        scores.append(1.0 - float(feat @ ref) / denom)
    return scores


def select_inference_view(candidates: Sequence[CandidateView], target: BBox, scene: SceneInput,
                          encoder: FrozenVisionEncoder, mode: DiscrepancyMode) -> CandidateView:
    """The candidate with the greatest discrepancy from the target; first one wins ties."""
    if not candidates:
        raise PreconditionError("select_inference_view needs at least one candidate")
    scores = view_discrepancies(candidates, target, scene, encoder, mode)
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return candidates[best]
