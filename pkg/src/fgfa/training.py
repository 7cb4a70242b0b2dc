"""End-to-end training of the toy FGFA pipeline with temporal dropout."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aggregation import aggregate, aggregate_backward
from .config import PipelineConfig
from .errors import ConfigError, ContractViolation
from .flow import downscale_flow, warp_bilinear, warp_bilinear_grad
from .nets import ConvStack, load_nets, save_nets
from .toy import Model, ToyDetectionHead, build_model, cell_targets, detection_loss
from .weighting import adaptive_weights, adaptive_weights_backward, uniform_weights


def sample_training_window(i: int, T: int, k_train: int, rng, num_frames: int) -> list[int]:
    """Reference ``i`` plus ``k_train`` distinct neighbors drawn uniformly from ``[i-T, i+T]``.

    Candidates exclude ``i`` and indices outside the video; fewer are returned
    when the range is too small.
    """
    if num_frames < 1 or not 0 <= i < num_frames:
        return [max(0, min(i, num_frames - 1))] if num_frames >= 1 else []
    cands = [j for j in range(max(0, i - T), min(num_frames - 1, i + T) + 1) if j != i]
    picked = rng.choice(cands, size=min(k_train, len(cands)), replace=False).tolist() if cands and k_train > 0 else []
    return sorted([i] + [int(j) for j in picked])


def gt_at(tracks, t: int) -> list[tuple[int, tuple]]:
    return [(tr.class_id, tuple(tr.boxes[t])) for tr in tracks if tr.present[t]]


@dataclass
class Sample:
    """One training example: a reference frame with sampled neighbors."""

    images: dict  # frame index -> [C,H,W]
    reference: int
    flows: dict  # frame index -> feature-resolution flow reference -> frame
    gt: list  # [(class_id, box)]


def forward_backward(model: Model, sample: Sample, mode: str, cfg: PipelineConfig, need_flow_grads=False):
    """Loss and gradients for one sample.

    Returns ``(loss, grads)`` where ``grads`` maps ``"feature"``, ``"embedding"``,
    ``"head"`` to per-parameter gradient lists and, when requested,
    ``"flows"`` to ``{frame: grad_flow}`` and ``"features"`` to per-frame
    feature gradients.
    """
    i = sample.reference
    order = sorted(sample.images)
    feats, caches = {}, {}
    for j in order:
        feats[j], caches[j] = model.feature.forward(sample.images[j], keep_cache=True)
    use_flow = mode in ("fgfa", "fgfa-composed")
    adaptive = mode in ("adaptive", "fgfa", "fgfa-composed")
    grads_feat = {j: np.zeros_like(feats[j]) for j in order}
    grads = {"embedding": [np.zeros_like(p) for p in model.embedding.params()]}
    warped, weights, state = None, None, None
    if mode == "single":
        agg = feats[i]
    else:
        warped = []
        for j in order:
            if use_flow and j != i:
                warped.append(warp_bilinear(feats[j], sample.flows[j]))
            else:
                warped.append(feats[j])
        if adaptive:
            weights, state = adaptive_weights(model.embedding, warped, feats[i], keep_cache=True)
        else:
            weights = uniform_weights(len(warped), feats[i].shape[1:])
        agg = aggregate(warped, weights)
    h, w = agg.shape[1:]
    out, hcache = model.head.forward(agg, keep_cache=True)
    labels, offsets = cell_targets(model.head, h, w, sample.gt, cfg.train.pos_iou, cfg.train.neg_iou)
    loss, g_out = detection_loss(model.head, out, labels, offsets)
    if not np.isfinite(loss):
        raise ContractViolation("non-finite training loss", {"aggregated": agg, "head_out": out})
    g_agg, head_grads = model.head.conv.backward(hcache, g_out)
    grads["head"] = ConvStack.flatten_grads(head_grads)
    flow_grads = {}
    if mode == "single":
        grads_feat[i] += g_agg
    else:
        g_warped, g_w = aggregate_backward(warped, weights, g_agg)
        if adaptive:
            gw2, g_ref, emb_grads = adaptive_weights_backward(model.embedding, weights, state, g_w)
            g_warped = [a + b for a, b in zip(g_warped, gw2)]
            grads_feat[i] += g_ref
            grads["embedding"] = emb_grads
        for j, gj in zip(order, g_warped):
            if use_flow and j != i:
                gs, gf = warp_bilinear_grad(feats[j], sample.flows[j], gj)
                grads_feat[j] += gs
                flow_grads[j] = gf
            else:
                grads_feat[j] += gj
    fgrads = [np.zeros_like(p) for p in model.feature.params()]
    for j in order:
        _, layer_grads = model.feature.backward(caches[j], grads_feat[j])
        for acc, g in zip(fgrads, ConvStack.flatten_grads(layer_grads)):
            acc += g
    grads["feature"] = fgrads
    if need_flow_grads:
        grads["flows"] = flow_grads
        grads["features"] = grads_feat
    return loss, grads


class SGD:
    """Momentum SGD (``v = mu * v + g; p -= lr * v``) over a model's parameters."""

    def __init__(self, model: Model, trainable: str = "all", momentum: float = 0.9):
        names = ("feature", "embedding", "head") if trainable == "all" else ("embedding",)
        self.names = names
        self.momentum = momentum
        self.velocity = {n: [np.zeros_like(p) for p in self._params(model, n)] for n in names}

    @staticmethod
    def _params(model, name):
        return model.nets()[name].params()

    def step(self, model: Model, grads: dict, lr: float, clip: float | None = None) -> float:
        sq = sum(float(np.sum(g * g)) for n in self.names for g in grads[n])
        norm = float(np.sqrt(sq))
        scale = clip / norm if clip and norm > clip else 1.0
        for n in self.names:
            for p, v, g in zip(self._params(model, n), self.velocity[n], grads[n]):
                v *= self.momentum
                v += scale * g
                p -= lr * v
        return norm


def learning_rate(cfg, step: int) -> float:
    t = cfg.train
    boundary = int(round(t.lr_decay_at * t.iterations))
    return t.lr if step < boundary else t.lr * t.lr_decay


def make_sample(dataset, i, window, use_flow, factor) -> Sample:
    images = {j: dataset.frames[j] for j in window}
    flows = {}
    if use_flow:
        for j in window:
            if j != i:
                flows[j] = downscale_flow(dataset.pair_flow(i, j), factor)
    return Sample(images, i, flows, gt_at(dataset.tracks, i))


@dataclass
class TrainResult:
    model: Model
    log: list = field(default_factory=list)  # (step, loss, lr)
    rng_state: dict | None = None


def train_step(model: Model, opt: SGD, sample: Sample, cfg: PipelineConfig, lr: float) -> float:
    loss, grads = forward_backward(model, sample, cfg.train.mode, cfg)
    opt.step(model, grads, lr, cfg.train.clip_grad)
    return loss


def train(datasets: list, cfg: PipelineConfig, model: Model | None = None) -> TrainResult:
    """Train on random (clip, reference, neighbors) draws for ``train.iterations`` steps."""
    t = cfg.train
    if not datasets:
        raise ConfigError("training needs at least one clip")
    if t.mode != "single" and cfg.sample_range < t.k_train:
        key = "train.sample_range" if t.sample_range is not None else "aggregation.k_infer"
        raise ConfigError(f"neighbor range {cfg.sample_range} is smaller than train.k_train={t.k_train}", key=key)
    rng = np.random.default_rng(t.seed)
    if model is None:
        model = build_model(cfg.model, cfg.head, seed=t.seed)
    opt = SGD(model, t.trainable, t.momentum)
    use_flow = t.mode in ("fgfa", "fgfa-composed")
    k_train = 0 if t.mode == "single" else t.k_train
    log = []
    for step in range(t.iterations):
        c = int(rng.integers(len(datasets)))
        ds = datasets[c]
        n = len(ds.frames)
        i = int(rng.integers(n))
        window = sample_training_window(i, cfg.sample_range, k_train, rng, n)
        sample = make_sample(ds, i, window, use_flow, model.feature.stride)
        lr = learning_rate(cfg, step)
        loss = train_step(model, opt, sample, cfg, lr)
        log.append((step, loss, lr))
    return TrainResult(model, log, rng.bit_generator.state)


def log_csv(log) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "lr"])
    for step, loss, lr in log:
        w.writerow([step, repr(float(loss)), repr(float(lr))])
    return buf.getvalue()


def save_checkpoint(directory, model: Model, cfg: PipelineConfig | None = None, step: int = 0, rng_state=None) -> None:
    h = model.head
    extra = {
        "head": {"num_classes": h.num_classes, "anchor_size": h.anchor_size, "stride": h.stride,
                 "score_threshold": h.score_threshold, "nms_iou": h.nms_iou, "max_detections": h.max_detections},
        "step": step,
        "rng_state": rng_state,
        "train_mode": cfg.train.mode if cfg else None,
        "config": cfg.to_flat() if cfg else None,
    }
    save_nets(directory, model.nets(), extra)


def load_checkpoint(directory) -> tuple[Model, dict]:
    directory = Path(directory)
    if not (directory / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint manifest in {directory}")
    nets, manifest = load_nets(directory)
    for name in ("feature", "embedding", "head"):
        if name not in nets:
            raise ConfigError(f"checkpoint {directory} lacks the '{name}' net")
    h = manifest["head"]
    head = ToyDetectionHead(nets["head"], h["num_classes"], h["anchor_size"], h["stride"],
                            h["score_threshold"], h["nms_iou"], h["max_detections"])
    if nets["feature"].out_channels != head.in_channels or nets["embedding"].in_channels != head.in_channels:
        raise ConfigError("checkpoint nets disagree on feature channels")
    return Model(nets["feature"], nets["embedding"], head), manifest
