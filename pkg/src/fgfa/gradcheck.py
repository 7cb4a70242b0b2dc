"""Finite-difference gradient checks for every differentiable stage.

Each component builds a scalar ``loss()`` over a set of named input arrays,
reports its analytic gradient and is probed by central differences at
sampled coordinates. Coordinates whose one-sided differences disagree (a
kink of ReLU, smooth-L1 or bilinear interpolation lies inside the step) are
skipped and counted.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .aggregation import aggregate, aggregate_backward
from .config import HeadConfig, ModelConfig, PipelineConfig
from .errors import ConfigError
from .flow import warp_bilinear, warp_bilinear_grad
from .tensor import conv2d, conv2d_backward
from .toy import build_model
from .training import Sample, forward_backward
from .weighting import (
    cosine_similarity,
    cosine_similarity_backward,
    make_embedding_net,
    softmax_weights,
    softmax_weights_backward,
)

REL_FLOOR = 1e-6
MIN_COORDS = 500
MAX_SKIP_FRACTION = 0.05
KINK_JUMP = 1e-2


def rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), REL_FLOOR)


@dataclass
class GradCheckReport:
    component: str
    tolerance: float
    checked: int
    skipped: int
    max_rel_error: float
    mean_rel_error: float

    @property
    def passed(self) -> bool:
        if self.checked == 0:
            return False
        if self.skipped > MAX_SKIP_FRACTION * (self.checked + self.skipped):
            return False
        return self.max_rel_error < self.tolerance

    def to_json(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


@dataclass
class _Problem:
    loss: object  # () -> float, reads the arrays in ``inputs``
    inputs: dict  # name -> ndarray, perturbed in place
    grads: dict  # name -> analytic gradient, same shapes
    step: float
    tolerance: float


def run_problem(name: str, prob: _Problem, trials: int, rng) -> GradCheckReport:
    names = list(prob.inputs)
    sizes = np.array([prob.inputs[n].size for n in names])
    total = int(sizes.sum())
    # kink skips draw replacements, so ``trials`` coordinates get checked when possible
    flat = rng.permutation(total)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    errs, skipped = [], 0
    h = prob.step
    base = prob.loss()
    for f in flat:
        if len(errs) >= trials:
            break
        k = int(np.searchsorted(offsets, f, side="right") - 1)
        arr = prob.inputs[names[k]].reshape(-1)
        idx = int(f - offsets[k])
        orig = arr[idx]
        arr[idx] = orig + h
        up = prob.loss()
        arr[idx] = orig - h
        down = prob.loss()
        arr[idx] = orig
        fwd, bwd = (up - base) / h, (base - down) / h
        if abs(fwd - bwd) > KINK_JUMP * max(abs(fwd), abs(bwd), 1e-3):
            # a derivative jump sits inside [x-h, x+h]; smooth points differ by ~h*f"
            skipped += 1
            continue
        numeric = (up - down) / (2 * h)
        analytic = float(prob.grads[names[k]].reshape(-1)[idx])
        errs.append(rel_error(analytic, numeric))
    errs = np.asarray(errs) if errs else np.zeros(0)
    return GradCheckReport(
        component=name,
        tolerance=prob.tolerance,
        checked=len(errs),
        skipped=skipped,
        max_rel_error=float(errs.max()) if len(errs) else float("nan"),
        mean_rel_error=float(errs.mean()) if len(errs) else float("nan"),
    )


def _conv(rng) -> _Problem:
    x = rng.normal(size=(4, 11, 12))
    k = rng.normal(size=(5, 4, 3, 3))
    b = rng.normal(size=5)
    g = rng.normal(size=(5, 6, 6))

    def loss():
        return float(np.sum(g * conv2d(x, k, b, stride=2)))

    gx, gk, gb = conv2d_backward(x, k, g, stride=2)
    return _Problem(loss, {"input": x, "kernel": k, "bias": b}, {"input": gx, "kernel": gk, "bias": gb}, 1e-3, 1e-4)


def _warp(rng) -> _Problem:
    c, h, w = 3, 12, 12
    src = rng.normal(size=(c, h, w))
    # integer part anywhere in [-3, 3], fractional part kept off the kinks
    flow = rng.integers(-3, 3, size=(2, h, w)) + rng.uniform(0.1, 0.9, size=(2, h, w))
    g = rng.normal(size=(c, h, w))

    def loss():
        return float(np.sum(g * warp_bilinear(src, flow)))

    gs, gf = warp_bilinear_grad(src, flow, g)
    return _Problem(loss, {"source": src, "flow": flow}, {"source": gs, "flow": gf}, 1e-4, 1e-3)


def _embedding(rng) -> _Problem:
    net = make_embedding_net(4, (6, 6, 8), rng)
    x = rng.normal(size=(4, 7, 7))
    g = rng.normal(size=(8, 7, 7))
    inputs = {"input": x}
    for li, layer in enumerate(net.layers):
        inputs[f"layer{li}.weight"] = layer.weight
        inputs[f"layer{li}.bias"] = layer.bias

    def loss():
        return float(np.sum(g * net.forward(x)))

    _, cache = net.forward(x, keep_cache=True)
    gx, layer_grads = net.backward(cache, g)
    grads = {"input": gx}
    for li, (gw, gb) in enumerate(layer_grads):
        grads[f"layer{li}.weight"] = gw
        grads[f"layer{li}.bias"] = gb
    return _Problem(loss, inputs, grads, 1e-5, 1e-4)


def _weights(rng) -> _Problem:
    e, h, w, n = 6, 5, 5, 3
    ref = rng.normal(size=(e, h, w))
    nbrs = [rng.normal(size=(e, h, w)) for _ in range(n)]
    gs = [rng.normal(size=(h, w)) for _ in range(n)]

    def loss():
        ws = softmax_weights([cosine_similarity(a, ref) for a in nbrs])
        return float(sum(np.sum(g * wt) for g, wt in zip(gs, ws)))

    ws = softmax_weights([cosine_similarity(a, ref) for a in nbrs])
    gcos = softmax_weights_backward(ws, gs)
    grads = {"reference": np.zeros_like(ref)}
    for j, (a, gc) in enumerate(zip(nbrs, gcos)):
        ga, gr = cosine_similarity_backward(a, ref, gc)
        grads[f"neighbor{j}"] = ga
        grads["reference"] += gr
    inputs = {"reference": ref, **{f"neighbor{j}": a for j, a in enumerate(nbrs)}}
    return _Problem(loss, inputs, grads, 1e-5, 1e-4)


def _aggregate(rng) -> _Problem:
    c, h, w, n = 4, 6, 6, 3
    feats = [rng.normal(size=(c, h, w)) for _ in range(n)]
    raw = rng.uniform(0.2, 1.0, size=(n, h, w))
    weights = list(raw / raw.sum(axis=0))
    g = rng.normal(size=(c, h, w))

    def loss():
        return float(np.sum(g * aggregate(feats, weights)))

    gf, gw = aggregate_backward(feats, weights, g)
    inputs = {**{f"feature{j}": f for j, f in enumerate(feats)}, **{f"weight{j}": wt for j, wt in enumerate(weights)}}
    grads = {**{f"feature{j}": x for j, x in enumerate(gf)}, **{f"weight{j}": x for j, x in enumerate(gw)}}
    return _Problem(loss, inputs, grads, 1e-5, 1e-4)


def _composite(rng) -> _Problem:
    cfg = PipelineConfig()
    cfg.model = ModelConfig(feature_widths=[4, 6], feature_strides=[2, 2], embed_widths=[4, 4, 6],
                            num_classes=2, anchor_size=8.0)
    cfg.head = HeadConfig()
    model = build_model(cfg.model, cfg.head, seed=int(rng.integers(1 << 30)))
    size, frames, ref = 16, (0, 1, 2), 1
    images = {j: rng.uniform(0.0, 1.0, size=(1, size, size)) for j in frames}
    fs = size // model.feature.stride
    flows = {j: rng.integers(-1, 1, size=(2, fs, fs)) + rng.uniform(0.1, 0.9, size=(2, fs, fs)) for j in frames if j != ref}
    sample = Sample(images, ref, flows, [(0, (3.0, 4.0, 11.0, 12.0)), (1, (8.0, 1.0, 15.0, 9.0))])

    _, grads = forward_backward(model, sample, "fgfa", cfg, need_flow_grads=True)
    inputs, agrads = {}, {}
    for net_name, net_grads in (("feature", grads["feature"]), ("embedding", grads["embedding"]), ("head", grads["head"])):
        for pi, (p, g) in enumerate(zip(model.nets()[net_name].params(), net_grads)):
            inputs[f"{net_name}.{pi}"] = p
            agrads[f"{net_name}.{pi}"] = g
    for j, f in flows.items():
        inputs[f"flow{j}"] = f
        agrads[f"flow{j}"] = grads["flows"][j]

    def loss():
        return forward_backward(model, sample, "fgfa", cfg)[0]

    return _Problem(loss, inputs, agrads, 1e-5, 1e-2)


COMPONENTS = {
    "conv2d": _conv,
    "warp": _warp,
    "embedding": _embedding,
    "weights": _weights,
    "aggregate": _aggregate,
    "composite": _composite,
}


def grad_check(component: str = "all", trials: int = MIN_COORDS, seed: int = 0) -> list[GradCheckReport]:
    """Check one component (or ``"all"``) at ``trials`` coordinates each."""
    if component != "all" and component not in COMPONENTS:
        raise ConfigError(f"unknown gradcheck component '{component}' (known: {', '.join(COMPONENTS)})", key="component")
    if trials < 1:
        raise ConfigError("trials must be positive", key="trials")
    names = list(COMPONENTS) if component == "all" else [component]
    reports = []
    for name in names:
        rng = np.random.default_rng([seed, list(COMPONENTS).index(name)])
        reports.append(run_problem(name, COMPONENTS[name](rng), trials, rng))
    return reports
