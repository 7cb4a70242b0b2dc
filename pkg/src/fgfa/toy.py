"""Desk-scale stand-ins for the feature network and the detection head.

The head is a dense 1x1 convolution: per feature cell it predicts
``num_classes + 1`` logits (index 0 is background) and four box offsets
relative to a square anchor of fixed size centred on the cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import Detection, classwise_nms, iou_matrix
from .errors import ConfigError
from .nets import ConvStack, he_layer
from .weighting import make_embedding_net

MAX_LOG_SCALE = 4.0


def make_feature_net(in_channels=1, widths=(8, 16), strides=(2, 2), kernel_size=3, rng=None) -> ConvStack:
    rng = np.random.default_rng(0) if rng is None else rng
    if len(widths) != len(strides) or not widths:
        raise ConfigError("feature net widths and strides must be non-empty and equal length", key="model.feature_widths")
    layers = []
    c_in = in_channels
    for c_out, s in zip(widths, strides):
        layers.append(he_layer(rng, c_in, c_out, kernel_size, stride=s))
        c_in = c_out
    return ConvStack(layers, relu_last=True, kind="feature")


@dataclass
class ToyDetectionHead:
    conv: ConvStack
    num_classes: int
    anchor_size: float
    stride: int
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 100

    @property
    def in_channels(self) -> int:
        return self.conv.in_channels

    def forward(self, features, keep_cache=False):
        return self.conv.forward(features, keep_cache=keep_cache)

    def anchors(self, h: int, w: int) -> np.ndarray:
        """``[h*w, 4]`` anchor boxes in image pixels, row-major over cells."""
        cy, cx = np.mgrid[0:h, 0:w]
        cx = (cx.ravel() + 0.5) * self.stride
        cy = (cy.ravel() + 0.5) * self.stride
        half = self.anchor_size / 2
        return np.stack([cx - half, cy - half, cx + half, cy + half], axis=1)

    def decode(self, out):
        """Split raw head output into ``(probs [h*w, C+1], boxes [h*w, 4])``."""
        nc = self.num_classes + 1
        _, h, w = out.shape
        logits = out[:nc].reshape(nc, -1).T
        probs = softmax_rows(logits)
        t = out[nc : nc + 4].reshape(4, -1).T
        anchors = self.anchors(h, w)
        a = self.anchor_size
        cx = (anchors[:, 0] + anchors[:, 2]) / 2 + t[:, 0] * a
        cy = (anchors[:, 1] + anchors[:, 3]) / 2 + t[:, 1] * a
        bw = a * np.exp(np.clip(t[:, 2], -MAX_LOG_SCALE, MAX_LOG_SCALE))
        bh = a * np.exp(np.clip(t[:, 3], -MAX_LOG_SCALE, MAX_LOG_SCALE))
        boxes = np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=1)
        return probs, boxes


def make_head(in_channels, num_classes, anchor_size, stride, rng=None, **kw) -> ToyDetectionHead:
    rng = np.random.default_rng(0) if rng is None else rng
    layer = he_layer(rng, in_channels, num_classes + 1 + 4, 1, gain=0.1)
    return ToyDetectionHead(ConvStack([layer], relu_last=False, kind="head"), num_classes, anchor_size, stride, **kw)


def softmax_rows(logits) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward_detect(head: ToyDetectionHead, features, frame: int = 0) -> list[Detection]:
    """Run the head on ``features [C,H,W]`` and return class-wise NMS'd detections."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3 or features.shape[0] != head.in_channels:
        raise ConfigError(f"head expects {head.in_channels} channels, got shape {features.shape}")
    probs, boxes = head.decode(head.forward(features))
    dets = []
    for cls in range(head.num_classes):
        p = probs[:, cls + 1]
        for idx in np.nonzero(p > head.score_threshold)[0]:
            dets.append(Detection(frame, cls, float(p[idx]), tuple(float(v) for v in boxes[idx])))
    return classwise_nms(dets, head.nms_iou)[: head.max_detections]


# --- training targets and loss -------------------------------------------------


def cell_targets(head: ToyDetectionHead, h: int, w: int, gt, pos_iou=0.5, neg_iou=0.4):
    """Assign labels (-1 ignore, 0 background, 1+c class) and box offsets per cell.

    ``gt`` is a list of ``(class_id, box)``. Each GT also claims its best cell.
    """
    anchors = head.anchors(h, w)
    labels = np.zeros(h * w, dtype=np.int64)
    offsets = np.zeros((h * w, 4))
    if not gt:
        return labels, offsets
    gboxes = np.array([b for _, b in gt], dtype=np.float64)
    gcls = np.array([c for c, _ in gt], dtype=np.int64)
    ious = iou_matrix(anchors, gboxes)
    best_gt = ious.argmax(axis=1)
    best_iou = ious.max(axis=1)
    labels[(best_iou >= neg_iou) & (best_iou < pos_iou)] = -1
    pos = best_iou >= pos_iou
    for g in range(len(gt)):
        cell = int(ious[:, g].argmax())
        if ious[cell, g] > 0:
            pos[cell] = True
            best_gt[cell] = g
    labels[pos] = gcls[best_gt[pos]] + 1
    a = head.anchor_size
    acx = (anchors[:, 0] + anchors[:, 2]) / 2
    acy = (anchors[:, 1] + anchors[:, 3]) / 2
    gb = gboxes[best_gt]
    gw = np.maximum(gb[:, 2] - gb[:, 0], 1e-3)
    gh = np.maximum(gb[:, 3] - gb[:, 1], 1e-3)
    offsets[:, 0] = ((gb[:, 0] + gb[:, 2]) / 2 - acx) / a
    offsets[:, 1] = ((gb[:, 1] + gb[:, 3]) / 2 - acy) / a
    offsets[:, 2] = np.log(gw / a)
    offsets[:, 3] = np.log(gh / a)
    offsets[~pos] = 0.0
    return labels, offsets


def detection_loss(head: ToyDetectionHead, out, labels, offsets):
    """Cross-entropy over non-ignored cells plus smooth-L1 on positive offsets.

    Returns ``(loss, grad_out)`` with ``grad_out`` shaped like ``out``.
    """
    nc = head.num_classes + 1
    _, h, w = out.shape
    logits = out[:nc].reshape(nc, -1).T
    t = out[nc : nc + 4].reshape(4, -1).T
    valid = labels >= 0
    n_valid = max(int(valid.sum()), 1)
    probs = softmax_rows(logits)
    safe = np.where(valid, labels, 0)
    ce = -np.log(np.maximum(probs[np.arange(len(labels)), safe], 1e-300))
    loss_cls = float(ce[valid].sum() / n_valid)
    g_logits = probs.copy()
    g_logits[np.arange(len(labels)), safe] -= 1.0
    g_logits[~valid] = 0.0
    g_logits /= n_valid

    pos = labels > 0
    n_pos = max(int(pos.sum()), 1)
    diff = t - offsets
    ad = np.abs(diff)
    sl1 = np.where(ad < 1.0, 0.5 * diff**2, ad - 0.5)
    loss_box = float(sl1[pos].sum() / n_pos)
    g_t = np.where(ad < 1.0, diff, np.sign(diff))
    g_t[~pos] = 0.0
    g_t /= n_pos

    grad = np.zeros_like(out)
    grad[:nc] = g_logits.T.reshape(nc, h, w)
    grad[nc : nc + 4] = g_t.T.reshape(4, h, w)
    return loss_cls + loss_box, grad


@dataclass
class Model:
    """Feature net, embedding net and detection head bundled together."""

    feature: ConvStack
    embedding: ConvStack
    head: ToyDetectionHead

    def nets(self) -> dict:
        return {"feature": self.feature, "embedding": self.embedding, "head": self.head.conv}

    def copy(self) -> "Model":
        h = self.head
        return Model(
            self.feature.copy(),
            self.embedding.copy(),
            ToyDetectionHead(h.conv.copy(), h.num_classes, h.anchor_size, h.stride, h.score_threshold, h.nms_iou, h.max_detections),
        )


def build_model(model_cfg, head_cfg, seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    feature = make_feature_net(
        model_cfg.in_channels, tuple(model_cfg.feature_widths), tuple(model_cfg.feature_strides),
        model_cfg.feature_kernel, rng,
    )
    embedding = make_embedding_net(feature.out_channels, tuple(model_cfg.embed_widths), rng)
    head = make_head(
        feature.out_channels, model_cfg.num_classes, model_cfg.anchor_size, feature.stride, rng,
        score_threshold=head_cfg.score_threshold, nms_iou=head_cfg.nms_iou,
        max_detections=head_cfg.max_detections,
    )
    return Model(feature, embedding, head)
