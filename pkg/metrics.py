# masrc/metrics.py
"""
Scene boundary metrics: AP over per-shot scores, mIoU between scene
segmentations and F1 at a score threshold.
"""
import logging
from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MiouMode = Literal["symmetric", "gt"]
SHORT_SCENE_MAX = 11


@dataclass(frozen=True)
class SceneSegmentation:
    """Ordered, contiguous inclusive [start, end] shot intervals covering 0..N-1."""
    scenes: tuple[tuple[int, int], ...]

    def __post_init__(self):
        scenes = tuple((int(s), int(e)) for s, e in self.scenes)
        if not scenes:
            raise ValueError("A segmentation needs at least one scene.")
        expected_start = 0
        for start, end in scenes:
            if start != expected_start or end < start:
                raise ValueError(f"Scenes must be contiguous and non-empty; got {scenes}.")
            expected_start = end + 1
        object.__setattr__(self, "scenes", scenes)

    @property
    def num_shots(self) -> int:
        return self.scenes[-1][1] + 1

    def __len__(self) -> int:
        return len(self.scenes)


def _as_arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length ({scores.size} vs {labels.size}).")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0/1.")
    return scores, labels


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Mean precision at the rank of every positive, scores sorted descending.

    Shots with equal scores are a single threshold: precision is taken after the
    whole tied group, so a constant scorer gets AP equal to the positive rate.
    """
    scores, labels = _as_arrays(scores, labels)
    num_pos = int(labels.sum())
    if num_pos == 0:
        raise ValueError("average_precision needs at least one positive label.")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    # Last index of each tied group in the sorted order.
    group_ends = np.nonzero(np.append(s[1:] != s[:-1], True))[0]
    tp = np.cumsum(y)[group_ends]
    seen = group_ends + 1
    group_pos = np.diff(np.concatenate(([0], tp)))
    return float((group_pos * tp / seen).sum() / num_pos)


def boundaries_to_scenes(labels: Sequence[int]) -> SceneSegmentation:
    labels = [int(v) for v in labels]
    if not labels:
        raise ValueError("boundaries_to_scenes needs at least one shot.")
    labels[-1] = 1
    scenes, start = [], 0
    for i, v in enumerate(labels):
        if v:
            scenes.append((start, i))
            start = i + 1
    return SceneSegmentation(tuple(scenes))


def scenes_to_boundaries(segmentation: SceneSegmentation, num_shots: Optional[int] = None) -> list[int]:
    n = segmentation.num_shots if num_shots is None else num_shots
    if n != segmentation.num_shots:
        raise ValueError(f"Segmentation covers {segmentation.num_shots} shots, expected {n}.")
    labels = [0] * n
    for _, end in segmentation.scenes:
        labels[end] = 1
    return labels


def _interval_iou(a: tuple[int, int], b: tuple[int, int]) -> float:
    inter = max(0, min(a[1], b[1]) - max(a[0], b[0]) + 1)
    union = (a[1] - a[0] + 1) + (b[1] - b[0] + 1) - inter
    return inter / union


def _directional(source: SceneSegmentation, target: SceneSegmentation) -> float:
    return float(np.mean([max(_interval_iou(s, t) for t in target.scenes) for s in source.scenes]))


def miou(pred: SceneSegmentation, gt: SceneSegmentation, mode: MiouMode = "symmetric") -> float:
    """
    Mean best-match IoU. ``symmetric`` averages the gt->pred and pred->gt
    directions; ``gt`` keeps only gt->pred.
    """
    if pred.num_shots != gt.num_shots:
        raise ValueError(f"Segmentations cover different shot counts ({pred.num_shots} vs {gt.num_shots}).")
    gt_side = _directional(gt, pred)
    if mode == "gt":
        return gt_side
    if mode != "symmetric":
        raise ValueError(f"Unknown mIoU mode '{mode}'.")
    return 0.5 * (gt_side + _directional(pred, gt))


def f1_at(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> float:
    scores, labels = _as_arrays(scores, labels)
    predicted = scores >= threshold
    tp = int(np.sum(predicted & (labels == 1)))
    fp = int(np.sum(predicted & (labels == 0)))
    fn = int(np.sum(~predicted & (labels == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def predicted_segmentation(scores: Sequence[float], threshold: float = 0.5) -> SceneSegmentation:
    return boundaries_to_scenes([int(s >= threshold) for s in scores])


def evaluate_predictions(per_video: dict[str, tuple[Sequence[float], Sequence[int]]], threshold: float = 0.5,
                         miou_mode: MiouMode = "symmetric") -> dict:
    """
    Scores a split.

    Args:
        per_video: video id -> (per-shot scores, per-shot 0/1 labels).
        threshold: Score at or above which a shot is predicted to end a scene.
        miou_mode: See ``miou``.

    Returns:
        Dict with pooled ``ap`` and ``f1`` over every shot of the split, ``miou``
        averaged over videos, the per-video means ``ap_video_mean`` /
        ``f1_video_mean``, and ``per_video`` rows.
    """
    if not per_video:
        raise ValueError("evaluate_predictions needs at least one video.")
    rows = []
    all_scores, all_labels = [], []
    for video_id, (scores, labels) in per_video.items():
        scores, labels = _as_arrays(scores, labels)
        gt = boundaries_to_scenes(labels)
        labels = np.asarray(scenes_to_boundaries(gt))
        rows.append({
            "video_id": video_id,
            "ap": average_precision(scores, labels),
            "miou": miou(predicted_segmentation(scores, threshold), gt, miou_mode),
            "f1": f1_at(scores, labels, threshold),
        })
        all_scores.append(scores)
        all_labels.append(labels)
    pooled_scores = np.concatenate(all_scores)
    pooled_labels = np.concatenate(all_labels)
    return {
        "ap": average_precision(pooled_scores, pooled_labels),
        "miou": float(np.mean([r["miou"] for r in rows])),
        "f1": f1_at(pooled_scores, pooled_labels, threshold),
        "ap_video_mean": float(np.mean([r["ap"] for r in rows])),
        "f1_video_mean": float(np.mean([r["f1"] for r in rows])),
        "per_video": rows,
    }


def ap_by_scene_length(scores: Sequence[float], labels: Sequence[int],
                       short_max: int = SHORT_SCENE_MAX) -> dict[str, Optional[float]]:
    """AP over shots of short (<= short_max shots) and long ground-truth scenes; None when a side is empty."""
    scores, labels = _as_arrays(scores, labels)
    short = np.zeros(labels.size, dtype=bool)
    for start, end in boundaries_to_scenes(labels).scenes:
        short[start:end + 1] = (end - start + 1) <= short_max
    labels = np.asarray(scenes_to_boundaries(boundaries_to_scenes(labels)))
    out: dict[str, Optional[float]] = {}
    for name, mask in (("short", short), ("long", ~short)):
        out[name] = average_precision(scores[mask], labels[mask]) if labels[mask].any() else None
    return out
