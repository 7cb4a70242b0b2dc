"""Detection evaluation: motion-IoU and size groups, per-group mAP, Seq-NMS."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .boxes import Detection, box_area, box_iou, classwise_nms, iou_matrix
from .config import EvalConfig
from .errors import ConfigError

MOTION_GROUPS = ("slow", "medium", "fast")
SIZE_GROUPS = ("small", "middle", "large")


@dataclass
class MotionGroupThresholds:
    slow_min: float = 0.9
    fast_max: float = 0.7
    window: int = 10

    def __post_init__(self):
        if not 0 <= self.fast_max <= self.slow_min <= 1:
            raise ConfigError("need 0 <= fast_max <= slow_min <= 1")

    def group(self, score: float) -> str:
        if score > self.slow_min:
            return "slow"
        if score < self.fast_max:
            return "fast"
        return "medium"


@dataclass
class SizeGroupThresholds:
    small_max_area: float = 50.0**2
    large_min_area: float = 150.0**2

    def __post_init__(self):
        if not self.small_max_area < self.large_min_area:
            raise ConfigError("small_max_area must be < large_min_area")

    def group(self, area: float) -> str:
        if area < self.small_max_area:
            return "small"
        if area > self.large_min_area:
            return "large"
        return "middle"


@dataclass
class SeqNmsConfig:
    link_iou: float = 0.5
    suppress_iou: float = 0.3

    def __post_init__(self):
        if not (0 <= self.link_iou <= 1 and 0 <= self.suppress_iou <= 1):
            raise ConfigError("Seq-NMS thresholds must lie in [0, 1]")


def motion_iou(track, frame: int, window: int = 10) -> float:
    """Mean IoU of the track's box at ``frame`` with its boxes within ``±window`` frames.

    Only frames where the track is present are compared; 1.0 if there are none.
    """
    if not (0 <= frame < len(track.present)) or not track.present[frame]:
        raise ConfigError(f"track {track.track_id} is not present at frame {frame}")
    box = track.boxes[frame]
    ious = [
        box_iou(box, track.boxes[frame + d])
        for d in range(-window, window + 1)
        if d != 0 and 0 <= frame + d < len(track.present) and track.present[frame + d]
    ]
    return sum(ious) / len(ious) if ious else 1.0


# --- mAP ---------------------------------------------------------------------------


@dataclass
class _GT:
    video: int
    frame: int
    class_id: int
    box: tuple
    motion: str
    size: str


def gt_instances(videos, cfg: EvalConfig) -> list[_GT]:
    mt = MotionGroupThresholds(cfg.motion_slow_min, cfg.motion_fast_max, cfg.motion_window)
    st = SizeGroupThresholds(cfg.size_small_max_area, cfg.size_large_min_area)
    out = []
    for v, (_, tracks) in enumerate(videos):
        for tr in tracks:
            for t in tr.frames():
                score = motion_iou(tr, t, mt.window)
                out.append(_GT(v, t, tr.class_id, tuple(tr.boxes[t]), mt.group(score), st.group(box_area(tr.boxes[t]))))
    return out


def average_precision(recall, precision, mode: str = "all-points") -> float:
    recall = np.asarray(recall, dtype=np.float64)
    precision = np.asarray(precision, dtype=np.float64)
    if mode == "11-point":
        return float(np.mean([precision[recall >= t].max() if np.any(recall >= t) else 0.0
                              for t in np.linspace(0, 1, 11)]))
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def match_detections(dets: list[tuple[int, Detection]], gts: list[_GT], iou_threshold: float):
    """Greedy matching by descending score; each GT matches at most once.

    A detection takes the unmatched same-class GT in its frame with the highest
    IoU, if that IoU reaches the threshold. Returns the detection order and the
    matched GT index (or -1) per detection in that order.
    """
    by_frame: dict[tuple, list[int]] = {}
    for g, gt in enumerate(gts):
        by_frame.setdefault((gt.video, gt.frame, gt.class_id), []).append(g)
    order = sorted(range(len(dets)), key=lambda k: -dets[k][1].score)
    taken = set()
    matches = []
    for k in order:
        v, d = dets[k]
        best, best_iou = -1, iou_threshold
        for g in by_frame.get((v, d.frame, d.class_id), []):
            if g in taken:
                continue
            iou = box_iou(d.box, gts[g].box)
            if iou >= best_iou:
                if iou > best_iou or best < 0:
                    best, best_iou = g, iou
        if best >= 0:
            taken.add(best)
        matches.append(best)
    return order, matches


def _pr_curve(scores, tp, n_gt):
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1e-300)
    return recall, precision


def evaluate_map(videos, cfg: EvalConfig | None = None, num_classes: int | None = None) -> dict:
    """Per-class AP and mAP overall and per motion/size group.

    ``videos`` is a list of ``(detections, tracks)`` pairs. Under the
    ``"exclude"`` group convention a detection matched to a GT outside the
    active group is dropped from that group's PR curve; under
    ``"false-positive"`` it counts as a false positive.
    """
    cfg = cfg or EvalConfig()
    gts = gt_instances(videos, cfg)
    classes = sorted({g.class_id for g in gts} | set(range(num_classes or 0)))
    seen = set()
    dets_all = []
    for v, (dets, _) in enumerate(videos):
        for d in dets:
            key = (v, d.frame, d.class_id, tuple(d.box), d.score)
            if key in seen:
                raise ConfigError(f"duplicate detection {key}")
            seen.add(key)
            dets_all.append((v, d))
    groups = {"all": None, **{g: ("motion", g) for g in MOTION_GROUPS}, **{g: ("size", g) for g in SIZE_GROUPS}}
    per_group = {name: {} for name in groups}
    curves = {}
    for cls in classes:
        cls_gt_idx = [k for k, g in enumerate(gts) if g.class_id == cls]
        cls_gts = [gts[k] for k in cls_gt_idx]
        cls_dets = [(v, d) for v, d in dets_all if d.class_id == cls]
        order, matches = match_detections(cls_dets, cls_gts, cfg.iou_threshold)
        for name, sel in groups.items():
            in_group = [sel is None or getattr(g, sel[0]) == sel[1] for g in cls_gts]
            n_gt = sum(in_group)
            if n_gt == 0:
                continue
            tp, scores = [], []
            for k, m in zip(order, matches):
                if m >= 0 and not in_group[m]:
                    if cfg.group_convention == "exclude":
                        continue
                    tp.append(0.0)
                else:
                    tp.append(1.0 if m >= 0 else 0.0)
                scores.append(cls_dets[k][1].score)
            if not tp:
                per_group[name][cls] = 0.0
                continue
            recall, precision = _pr_curve(scores, tp, n_gt)
            per_group[name][cls] = average_precision(recall, precision, cfg.ap_mode)
            if name == "all":
                curves[cls] = list(zip(scores, precision.tolist(), recall.tolist()))

    def mean(d):
        return float(np.mean(list(d.values()))) if d else None

    return {
        "map": mean(per_group["all"]),
        **{f"map_{g}": mean(per_group[g]) for g in MOTION_GROUPS + SIZE_GROUPS},
        "per_class": {str(c): ap for c, ap in sorted(per_group["all"].items())},
        "num_gt": len(gts),
        "num_gt_by_motion": {g: sum(x.motion == g for x in gts) for g in MOTION_GROUPS},
        "_curves": curves,
    }


def pr_curve_csv(curves: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class_id", "rank", "score", "precision", "recall"])
    for cls in sorted(curves):
        for rank, (s, p, r) in enumerate(curves[cls]):
            w.writerow([cls, rank, f"{s:.8f}", f"{p:.8f}", f"{r:.8f}"])
    return buf.getvalue()


# --- Seq-NMS -----------------------------------------------------------------------


def _best_path(frames, alive, links, scores):
    """Max-total-score path of length >= 2 over alive boxes; ``None`` if no link remains."""
    best = [np.where(alive[t], scores[t], -np.inf) for t in range(len(frames))]
    back = [np.full(len(frames[t]), -1, dtype=np.int64) for t in range(len(frames))]
    end, end_val = None, -np.inf
    for t in range(1, len(frames)):
        if not len(frames[t]) or not len(frames[t - 1]):
            continue
        ok = links[t] & alive[t - 1][None, :] & alive[t][:, None]  # [cur, prev]
        cand = np.where(ok, best[t - 1][None, :], -np.inf)
        prev = np.argmax(cand, axis=1) if cand.shape[1] else np.zeros(len(frames[t]), dtype=np.int64)
        has = ok.any(axis=1)
        pv = cand[np.arange(len(frames[t])), prev]
        best[t] = np.where(has, best[t] + pv, best[t])
        back[t] = np.where(has, prev, -1)
        for b in np.nonzero(has)[0]:
            if best[t][b] > end_val:
                end, end_val = (t, int(b)), best[t][b]
    if end is None:
        return None
    path = [end]
    t, b = end
    while back[t][b] >= 0:
        b = int(back[t][b])
        t -= 1
        path.append((t, b))
    return path[::-1]


def seq_nms_class(frames: list[list[Detection]], cfg: SeqNmsConfig) -> list[list[Detection]]:
    """Seq-NMS on one class: ``frames[t]`` holds that frame's boxes."""
    boxes = [np.array([d.box for d in f], dtype=np.float64).reshape(-1, 4) for f in frames]
    scores = [np.array([d.score for d in f], dtype=np.float64) for f in frames]
    alive = [np.ones(len(f), dtype=bool) for f in frames]
    links = [None] + [iou_matrix(boxes[t], boxes[t - 1]) >= cfg.link_iou for t in range(1, len(frames))]
    new_scores = [s.copy() for s in scores]
    locked = [np.zeros(len(f), dtype=bool) for f in frames]
    while True:
        path = _best_path(frames, alive, links, scores)
        if path is None:
            break
        avg = float(np.mean([scores[t][b] for t, b in path]))
        for t, b in path:
            new_scores[t][b] = avg
            locked[t][b] = True
            alive[t][b] = False
            overlap = iou_matrix(boxes[t][b], boxes[t])[0] >= cfg.suppress_iou
            alive[t] &= ~overlap
    out = []
    for t, f in enumerate(frames):
        keep = [
            Detection(d.frame, d.class_id, float(new_scores[t][k]), d.box)
            for k, d in enumerate(f)
            if locked[t][k] or alive[t][k]
        ]
        out.append(keep)
    return out


def seq_nms(per_frame: list[list[Detection]], cfg: SeqNmsConfig | None = None) -> list[list[Detection]]:
    """Link boxes through consecutive frames, rescore each sequence to its mean, suppress overlaps.

    Runs per class; survivors go through per-frame class-wise NMS at the
    suppression threshold.
    """
    cfg = cfg or SeqNmsConfig()
    n = len(per_frame)
    classes = sorted({d.class_id for f in per_frame for d in f})
    merged = [[] for _ in range(n)]
    for cls in classes:
        frames = [[d for d in f if d.class_id == cls] for f in per_frame]
        for t, f in enumerate(seq_nms_class(frames, cfg)):
            merged[t].extend(f)
    return [classwise_nms(f, cfg.suppress_iou) for f in merged]


def group_of_instances(tracks, cfg: EvalConfig) -> dict:
    """``(track_id, frame) -> motion group`` for every present GT instance."""
    mt = MotionGroupThresholds(cfg.motion_slow_min, cfg.motion_fast_max, cfg.motion_window)
    return {(tr.track_id, t): mt.group(motion_iou(tr, t, mt.window)) for tr in tracks for t in tr.frames()}


def finite_or_none(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x
