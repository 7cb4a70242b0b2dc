"""Axis-aligned box helpers. Boxes are ``[x1, y1, x2, y2]`` in pixels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Detection:
    frame: int
    class_id: int
    score: float
    box: tuple[float, float, float, float]

    def to_json(self) -> dict:
        return {
            "frame": int(self.frame),
            "class_id": int(self.class_id),
            "score": float(self.score),
            "box": [float(v) for v in self.box],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Detection":
        return cls(int(d["frame"]), int(d["class_id"]), float(d["score"]), tuple(float(v) for v in d["box"]))


def box_area(b) -> float:
    return max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])


def box_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = box_area(a) + box_area(b) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def nms(boxes, scores, iou_threshold: float) -> list[int]:
    """Greedy NMS; returns kept indices in descending score order (stable on ties)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = list(np.argsort(-scores, kind="stable"))
    if not order:
        return []
    ious = iou_matrix(boxes, boxes)
    keep = []
    suppressed = np.zeros(len(scores), dtype=bool)
    for idx in order:
        if suppressed[idx]:
            continue
        keep.append(int(idx))
        suppressed |= ious[idx] > iou_threshold
    return keep


def classwise_nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    out = []
    for cls in sorted({d.class_id for d in dets}):
        group = [d for d in dets if d.class_id == cls]
        keep = nms([d.box for d in group], [d.score for d in group], iou_threshold)
        out.extend(group[k] for k in keep)
    out.sort(key=lambda d: (-d.score, d.class_id))
    return out
