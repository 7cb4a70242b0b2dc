"""Flow fields and flow-guided bilinear warping.

Convention: a flow ``M`` with dims ``[2, H, W]`` holds ``(dx, dy)`` per pixel and
``warp(f, M)(p)`` samples ``f`` at ``p + M(p)``. Samples falling outside the
grid read zero for each out-of-bounds corner.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .tensor import as_tensor


def check_flow(flow, name="flow") -> np.ndarray:
    flow = as_tensor(flow, name, rank=3)
    if flow.shape[0] != 2:
        raise ConfigError(f"{name} must have 2 channels, got {flow.shape[0]}")
    if not np.all(np.isfinite(flow)):
        raise ConfigError(f"{name} contains non-finite values")
    return flow


def zero_flow(h: int, w: int) -> np.ndarray:
    return np.zeros((2, h, w))


def _corners(flow):
    _, h, w = flow.shape
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = gx + flow[0]
    sy = gy + flow[1]
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    ax = sx - x0
    ay = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    return x0, y0, ax, ay


def _gather(src, yi, xi):
    """src[:, yi, xi] with zeros outside the grid."""
    _, h, w = src.shape
    valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    vals = src[:, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
    return np.where(valid, vals, 0.0), valid


def warp_bilinear(source, flow) -> np.ndarray:
    """Bilinearly resample ``source [C,H,W]`` along ``flow [2,H,W]``."""
    source = as_tensor(source, "source", rank=3)
    flow = check_flow(flow)
    if source.shape[1:] != flow.shape[1:]:
        raise ConfigError(f"source spatial dims {source.shape[1:]} != flow dims {flow.shape[1:]}")
    if not flow.any():
        return source.copy()
    x0, y0, ax, ay = _corners(flow)
    v00, _ = _gather(source, y0, x0)
    v01, _ = _gather(source, y0, x0 + 1)
    v10, _ = _gather(source, y0 + 1, x0)
    v11, _ = _gather(source, y0 + 1, x0 + 1)
    return (1 - ay) * ((1 - ax) * v00 + ax * v01) + ay * ((1 - ax) * v10 + ax * v11)


def warp_bilinear_grad(source, flow, upstream):
    """Analytic gradients of :func:`warp_bilinear`.

    Returns ``(grad_source [C,H,W], grad_flow [2,H,W])``. At integer sample
    coordinates the flow gradient is the right-hand derivative.
    """
    source = as_tensor(source, "source", rank=3)
    flow = check_flow(flow)
    upstream = as_tensor(upstream, "upstream", rank=3)
    if source.shape[1:] != flow.shape[1:] or upstream.shape != source.shape:
        raise ConfigError(
            f"shape mismatch: source {source.shape}, flow {flow.shape}, upstream {upstream.shape}"
        )
    c, h, w = source.shape
    x0, y0, ax, ay = _corners(flow)
    grad_src = np.zeros_like(source)
    corners = (
        (y0, x0, (1 - ay) * (1 - ax)),
        (y0, x0 + 1, (1 - ay) * ax),
        (y0 + 1, x0, ay * (1 - ax)),
        (y0 + 1, x0 + 1, ay * ax),
    )
    flat = grad_src.reshape(c, -1)
    for yi, xi, wt in corners:
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = (yi * w + xi)[valid]
        contrib = (upstream * wt)[:, valid]
        for ch in range(c):
            flat[ch] += np.bincount(idx, weights=contrib[ch], minlength=h * w)
    v00, _ = _gather(source, y0, x0)
    v01, _ = _gather(source, y0, x0 + 1)
    v10, _ = _gather(source, y0 + 1, x0)
    v11, _ = _gather(source, y0 + 1, x0 + 1)
    d_dx = (1 - ay) * (v01 - v00) + ay * (v11 - v10)
    d_dy = (1 - ax) * (v10 - v00) + ax * (v11 - v01)
    grad_flow = np.stack([(upstream * d_dx).sum(axis=0), (upstream * d_dy).sum(axis=0)])
    return grad_src, grad_flow


def downscale_flow(flow, factor: int) -> np.ndarray:
    """Average-pool a flow by ``factor`` and rescale displacements to the new grid."""
    flow = check_flow(flow)
    if factor < 1:
        raise ConfigError(f"downscale factor must be positive, got {factor}")
    _, h, w = flow.shape
    if h % factor or w % factor:
        raise ConfigError(f"flow dims {h}x{w} not divisible by factor {factor}")
    pooled = flow.reshape(2, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    return pooled / factor


def compose_flows(first, second) -> np.ndarray:
    """Chain ``first: i->j`` with ``second: j->k`` into ``i->k``.

    ``out(p) = first(p) + second(p + first(p))``; ``second`` is sampled
    bilinearly with zero extension.
    """
    first = check_flow(first, "first")
    second = check_flow(second, "second")
    if first.shape != second.shape:
        raise ConfigError(f"flow dims differ: {first.shape} vs {second.shape}")
    return first + warp_bilinear(second, first)
