"""Independent brute-force oracles. Nothing here imports engine internals."""

from __future__ import annotations

import itertools
import math

import numpy as np


def naive_conv2d(x, k, b=None, stride=1, dilation=1):
    """Direct summation with explicit zero padding (six nested loops)."""
    c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    ph, pw = dilation * (kh - 1) // 2, dilation * (kw - 1) // 2
    ho, wo = math.ceil(h / stride), math.ceil(w / stride)
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for yo in range(ho):
            for xo in range(wo):
                acc = 0.0 if b is None else float(b[o])
                for c in range(c_in):
                    for a in range(kh):
                        for bb in range(kw):
                            y = yo * stride + a * dilation - ph
                            xx = xo * stride + bb * dilation - pw
                            if 0 <= y < h and 0 <= xx < w:
                                acc += x[c, y, xx] * k[o, c, a, bb]
                out[o, yo, xo] = acc
    return out


def naive_warp(src, flow):
    """Per-pixel bilinear sampling at p + M(p) with zero extension."""
    c, h, w = src.shape
    out = np.zeros_like(src, dtype=np.float64)

    def at(ch, y, x):
        return src[ch, y, x] if 0 <= y < h and 0 <= x < w else 0.0

    for y in range(h):
        for x in range(w):
            sx = x + flow[0, y, x]
            sy = y + flow[1, y, x]
            x0, y0 = math.floor(sx), math.floor(sy)
            ax, ay = sx - x0, sy - y0
            for ch in range(c):
                out[ch, y, x] = ((1 - ay) * ((1 - ax) * at(ch, y0, x0) + ax * at(ch, y0, x0 + 1))
                                 + ay * ((1 - ax) * at(ch, y0 + 1, x0) + ax * at(ch, y0 + 1, x0 + 1)))
    return out


def iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def shifted_box_iou(w, h, dx, dy):
    """IoU of a w x h box with its copy shifted by (dx, dy), by overlap arithmetic."""
    ox, oy = max(0.0, w - abs(dx)), max(0.0, h - abs(dy))
    inter = ox * oy
    return inter / (2 * w * h - inter)


def brute_ap(scored_tp, n_gt):
    """All-points AP: sum over recall steps of the max precision at or beyond that recall."""
    ranked = sorted(scored_tp, key=lambda st: -st[0])
    precisions, recalls = [], []
    tp = fp = 0
    for _, hit in ranked:
        tp += hit
        fp += 1 - hit
        precisions.append(tp / (tp + fp))
        recalls.append(tp / n_gt)
    ap, prev_r = 0.0, 0.0
    for idx, r in enumerate(recalls):
        if r > prev_r:
            ap += (r - prev_r) * max(precisions[idx:])
            prev_r = r
    return ap


def brute_greedy_matches(dets, gts, thr):
    """dets: [(frame, score, box)], gts: [(frame, box)]. Greedy by score; best unmatched GT."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
    used = set()
    hits = {}
    for i in order:
        f, _, box = dets[i]
        best, best_iou = None, thr
        for g, (gf, gbox) in enumerate(gts):
            if gf != f or g in used:
                continue
            v = iou(box, gbox)
            if v >= best_iou and (best is None or v > best_iou):
                best, best_iou = g, v
        hits[i] = best
        if best is not None:
            used.add(best)
    return hits


def exhaustive_best_path(frames_boxes, frames_scores, link_iou):
    """Max-total-score chain over consecutive frames of length >= 2, by full enumeration.

    Returns ``(total, [(frame, box_index), ...])`` or ``None``.
    """
    n = len(frames_boxes)
    best = None
    for s in range(n):
        for e in range(s + 1, n):
            choices = [range(len(frames_boxes[t])) for t in range(s, e + 1)]
            for combo in itertools.product(*choices):
                ok = all(
                    iou(frames_boxes[s + t][combo[t]], frames_boxes[s + t + 1][combo[t + 1]]) >= link_iou
                    for t in range(len(combo) - 1)
                )
                if not ok:
                    continue
                total = sum(frames_scores[s + t][combo[t]] for t in range(len(combo)))
                if best is None or total > best[0]:
                    best = (total, [(s + t, combo[t]) for t in range(len(combo))])
    return best


def exhaustive_seq_nms(frames_boxes, frames_scores, link_iou=0.5, suppress_iou=0.3):
    """Seq-NMS for one class with the path search done by enumeration, then per-frame NMS."""
    boxes = [list(fb) for fb in frames_boxes]
    scores = [list(fs) for fs in frames_scores]
    alive = [[True] * len(fb) for fb in boxes]
    final = [[None] * len(fb) for fb in boxes]
    while True:
        live_boxes = [[b for b, a in zip(boxes[t], alive[t]) if a] for t in range(len(boxes))]
        live_idx = [[i for i, a in enumerate(alive[t]) if a] for t in range(len(boxes))]
        live_scores = [[scores[t][i] for i in live_idx[t]] for t in range(len(boxes))]
        found = exhaustive_best_path(live_boxes, live_scores, link_iou)
        if found is None:
            break
        total, path = found
        avg = total / len(path)
        for t, li in path:
            i = live_idx[t][li]
            final[t][i] = avg
            alive[t][i] = False
            for other in live_idx[t]:
                if alive[t][other] and iou(boxes[t][other], boxes[t][i]) >= suppress_iou:
                    alive[t][other] = False
    out = []
    for t in range(len(boxes)):
        kept = [(final[t][i], boxes[t][i]) for i in range(len(boxes[t])) if final[t][i] is not None]
        kept += [(scores[t][i], boxes[t][i]) for i in range(len(boxes[t])) if alive[t][i]]
        kept.sort(key=lambda sb: -sb[0])
        survivors = []
        for s, b in kept:
            if all(iou(b, sb) <= suppress_iou for _, sb in survivors):
                survivors.append((s, b))
        out.append(survivors)
    return out
