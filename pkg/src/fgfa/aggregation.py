"""Weighted temporal aggregation and the sliding-buffer inference loop."""

from __future__ import annotations

import csv
import io
import time
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .boxes import Detection
from .config import AggregationConfig
from .errors import ConfigError, ContractViolation
from .flow import compose_flows, downscale_flow, warp_bilinear
from .toy import Model, forward_detect
from .weighting import adaptive_weights, uniform_weights

WEIGHT_SUM_TOL = 1e-4


def aggregate(warped: list, weights: list) -> np.ndarray:
    """``out[c, p] = sum_j weights[j][p] * warped[j][c, p]``, summed in list order."""
    if len(warped) == 0 or len(warped) != len(weights):
        raise ConfigError(f"aggregate needs equal non-empty lists, got {len(warped)} maps and {len(weights)} weights")
    shape = np.shape(warped[0])
    for f, w in zip(warped, weights):
        if np.shape(f) != shape or np.shape(w) != shape[1:]:
            raise ConfigError(f"aggregate shape mismatch: feature {np.shape(f)}, weight {np.shape(w)}, expected {shape}")
    total = np.sum(np.stack(weights), axis=0)
    dev = float(np.abs(total - 1.0).max())
    if dev > WEIGHT_SUM_TOL:
        raise ContractViolation(
            f"aggregation weights do not sum to one (max deviation {dev:.3g})",
            {"weight_sum": total, **{f"weight_{k}": w for k, w in enumerate(weights)}},
        )
    out = weights[0] * warped[0]
    for f, w in zip(warped[1:], weights[1:]):
        out = out + w * f
    return out


def aggregate_backward(warped: list, weights: list, grad):
    grad_warped = [w[None] * grad for w in weights]
    grad_weights = [np.einsum("chw,chw->hw", f, grad) for f in warped]
    return grad_warped, grad_weights


class FrameBuffer:
    """Features of a contiguous run of frames, at most ``capacity`` of them."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("frame buffer capacity must be >= 1")
        self.capacity = capacity
        self._items: OrderedDict[int, np.ndarray] = OrderedDict()
        self._seen: set[int] = set()

    def __contains__(self, index: int) -> bool:
        return index in self._items

    def __getitem__(self, index: int) -> np.ndarray:
        return self._items[index]

    def __len__(self) -> int:
        return len(self._items)

    def indices(self) -> list[int]:
        return list(self._items)

    def push(self, index: int, features) -> None:
        if index in self._seen:
            raise ContractViolation(f"features for frame {index} were already extracted")
        if self._items and index != next(reversed(self._items)) + 1:
            raise ContractViolation(f"frame {index} does not extend buffer {self.indices()}")
        if len(self._items) >= self.capacity:
            raise ContractViolation(f"frame buffer full ({self.capacity}); evict before pushing {index}")
        self._items[index] = features
        self._seen.add(index)

    def evict_before(self, index: int) -> None:
        for k in [k for k in self._items if k < index]:
            del self._items[k]


class FlowSource:
    """Stand-in for the flow network, with call counters.

    ``pair_fn(i, j)`` returns the image-resolution flow from reference ``i`` to
    frame ``j``; ``adjacent_fn(i, j)`` does the same for ``|i - j| == 1`` (by
    default ``pair_fn``). Flows are downscaled by ``factor`` to feature
    resolution.
    """

    def __init__(self, pair_fn, adjacent_fn=None, factor: int = 1, noise_std: float = 0.0, noise_seed: int = 0):
        self.pair_fn = pair_fn
        self.adjacent_fn = adjacent_fn or pair_fn
        self.factor = factor
        self.noise_std = noise_std
        self.noise_seed = noise_seed
        self.direct_calls = 0
        self.pair_evaluations = 0

    @classmethod
    def from_dataset(cls, dataset, factor: int, noise_std=0.0, noise_seed=0) -> "FlowSource":
        return cls(dataset.pair_flow, dataset.adjacent_flow, factor, noise_std, noise_seed)

    def _finish(self, flow, i, j):
        flow = np.asarray(flow, dtype=np.float64)
        if self.noise_std > 0:
            rng = np.random.default_rng([self.noise_seed, i, j])
            flow = flow + rng.normal(0.0, self.noise_std, size=flow.shape)
        return downscale_flow(flow, self.factor) if self.factor > 1 else flow

    def direct(self, i: int, j: int) -> np.ndarray:
        self.direct_calls += 1
        return self._finish(self.pair_fn(i, j), i, j)

    def adjacent_pair(self, t: int):
        """Flows ``t -> t+1`` and ``t+1 -> t``; counts as one pair evaluation."""
        self.pair_evaluations += 1
        return self._finish(self.adjacent_fn(t, t + 1), t, t + 1), self._finish(self.adjacent_fn(t + 1, t), t + 1, t)


class ComposedFlows:
    """Builds reference-to-neighbor flows by chaining cached adjacent flows."""

    def __init__(self, source: FlowSource):
        self.source = source
        self._adjacent: dict[int, tuple] = {}

    def _pair(self, t):
        if t not in self._adjacent:
            self._adjacent[t] = self.source.adjacent_pair(t)
        return self._adjacent[t]

    def evict_before(self, t: int) -> None:
        for k in [k for k in self._adjacent if k < t]:
            del self._adjacent[k]

    def window(self, i: int, lo: int, hi: int) -> dict:
        flows = {}
        cur = None
        for j in range(i + 1, hi + 1):
            step = self._pair(j - 1)[0]  # (j-1) -> j
            cur = step if cur is None else compose_flows(cur, step)
            flows[j] = cur
        cur = None
        for j in range(i - 1, lo - 1, -1):
            step = self._pair(j)[1]  # (j+1) -> j
            cur = step if cur is None else compose_flows(cur, step)
            flows[j] = cur
        return flows


@dataclass
class InferenceResult:
    detections: list  # per frame list[Detection]
    features: list | None = None  # aggregated features per frame
    weights: list | None = None  # per frame {offset: [h, w]}
    feature_calls: int = 0
    direct_flow_calls: int = 0
    pair_evaluations: int = 0
    max_weight_sum_deviation: float = 0.0
    seconds: float = 0.0

    def all_detections(self) -> list[Detection]:
        return [d for frame in self.detections for d in frame]


def infer_video(frames, model: Model, config: AggregationConfig, flows: FlowSource | None = None,
                keep_features: bool = False) -> InferenceResult:
    """Detect on every frame with a sliding feature buffer of radius ``config.k_infer``.

    Frames ``0..K`` are extracted up front; after detecting frame ``i`` the
    features of frame ``i + K + 1`` are added and frame ``i - K`` is dropped.
    Windows are clipped to the video and weights renormalised over them.
    """
    n = len(frames)
    if n == 0:
        raise ConfigError("cannot run inference on an empty video")
    k = config.k_infer
    if k < 0:
        raise ConfigError("aggregation.k_infer must be >= 0", key="aggregation.k_infer")
    use_flow = config.use_flow and k > 0
    if use_flow and flows is None:
        raise ConfigError(f"mode '{config.mode}' needs a flow source")
    composed = ComposedFlows(flows) if use_flow and config.flow_mode == "composed-adjacent" else None
    start = time.perf_counter()
    calls0 = (flows.direct_calls, flows.pair_evaluations) if flows is not None else (0, 0)

    feature_calls = 0

    def extract(t):
        nonlocal feature_calls
        feature_calls += 1
        return model.feature(frames[t])

    buffer = FrameBuffer(2 * k + 1)
    for t in range(min(k + 1, n)):
        buffer.push(t, extract(t))

    result = InferenceResult(detections=[], features=[] if keep_features else None,
                             weights=[] if config.record_weights else None)
    max_dev = 0.0
    for i in range(n):
        lo, hi = max(0, i - k), min(n - 1, i + k)
        ref = buffer[i]
        if not config.aggregate:
            agg = ref
            weights = None
        else:
            window_flows = composed.window(i, lo, hi) if composed is not None else None
            warped = []
            for j in range(lo, hi + 1):
                f = buffer[j]
                if j != i and use_flow:
                    m = window_flows[j] if composed is not None else flows.direct(i, j)
                    f = warp_bilinear(f, m)
                warped.append(f)
            if config.use_adaptive_weights:
                weights = adaptive_weights(model.embedding, warped, ref)
            else:
                weights = uniform_weights(len(warped), ref.shape[1:])
            max_dev = max(max_dev, float(np.abs(np.sum(weights, axis=0) - 1.0).max()))
            agg = aggregate(warped, weights)
        result.detections.append(forward_detect(model.head, agg, frame=i))
        if keep_features:
            result.features.append(agg)
        if config.record_weights:
            if weights is None:
                result.weights.append({0: np.ones(ref.shape[1:])})
            else:
                result.weights.append({j - i: w for j, w in zip(range(lo, hi + 1), weights)})
        buffer.evict_before(i + 1 - k)
        if composed is not None:
            composed.evict_before(i + 1 - k)
        if i + k + 1 < n:
            buffer.push(i + k + 1, extract(i + k + 1))

    result.feature_calls = feature_calls
    if flows is not None:
        result.direct_flow_calls = flows.direct_calls - calls0[0]
        result.pair_evaluations = flows.pair_evaluations - calls0[1]
    result.max_weight_sum_deviation = max_dev
    result.seconds = time.perf_counter() - start
    return result


def infer_video_composed(frames, model: Model, config: AggregationConfig, flows: FlowSource,
                         keep_features: bool = False) -> InferenceResult:
    """:func:`infer_video` with neighbor flows composed from adjacent pairs."""
    cfg = AggregationConfig(**{**config.__dict__, "mode": "fgfa-composed"})
    return infer_video(frames, model, cfg, flows, keep_features)


def single_frame_features(frames, model: Model) -> list[np.ndarray]:
    return [model.feature(f) for f in frames]


# --- runtime cost model -----------------------------------------------------------


@dataclass
class CostModelInput:
    k: int
    flow: float = 0.0
    embedding: float = 0.0
    warp: float = 0.0
    feature: float = 1.0
    detection: float = 0.0


def cost_ratio(c: CostModelInput) -> float:
    """Per-frame cost of aggregation over ``2K+1`` frames relative to the single-frame baseline."""
    for name in ("flow", "embedding", "warp", "feature", "detection"):
        if getattr(c, name) < 0:
            raise ConfigError(f"cost '{name}' must be non-negative")
    denom = c.feature + c.detection
    if denom <= 0:
        raise ConfigError("feature + detection cost must be positive")
    return 1.0 + (2 * c.k + 1) * (c.flow + c.embedding + c.warp) / denom


# --- weight distribution analysis -------------------------------------------------


def _cells_in_box(box, h, w, stride):
    cx = (np.arange(w) + 0.5) * stride
    cy = (np.arange(h) + 0.5) * stride
    mx = (cx >= box[0]) & (cx <= box[2])
    my = (cy >= box[1]) & (cy <= box[3])
    return my[:, None] & mx[None, :]


def weight_histogram(weights: list, tracks, k: int, stride: int, motion_groups) -> list[dict]:
    """Mean weight mass per frame offset inside GT boxes, split by motion group.

    ``weights`` is :attr:`InferenceResult.weights`; ``motion_groups`` maps
    ``(track_id, frame)`` to ``"slow" | "medium" | "fast"``. Only reference
    frames with a full ``2K+1`` window are used, unless none exist.
    """
    if not weights:
        raise ContractViolation("no recorded weights; run inference with record_weights enabled")
    n = len(weights)
    full = [i for i in range(n) if len(weights[i]) == 2 * k + 1]
    frames = full or list(range(n))
    sums: dict[tuple[int, str], float] = {}
    counts: dict[tuple[int, str], int] = {}
    for i in frames:
        maps = weights[i]
        any_map = next(iter(maps.values()))
        h, w = any_map.shape
        for tr in tracks:
            if not tr.present[i]:
                continue
            group = motion_groups.get((tr.track_id, i))
            if group is None:
                continue
            mask = _cells_in_box(tr.boxes[i], h, w, stride)
            if not mask.any():
                continue
            for d in range(-k, k + 1):
                key = (d, group)
                val = float(maps[d][mask].mean()) if d in maps else 0.0
                sums[key] = sums.get(key, 0.0) + val
                counts[key] = counts.get(key, 0) + 1
    return [
        {"offset": d, "motion_group": g, "mean_mass": sums[(d, g)] / counts[(d, g)]}
        for d, g in sorted(sums, key=lambda x: (["slow", "medium", "fast"].index(x[1]), x[0]))
    ]


def histogram_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["offset", "motion_group", "mean_mass"], lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({**r, "mean_mass": f"{r['mean_mass']:.8f}"})
    return buf.getvalue()
