"""Embedding sub-network and adaptive per-location aggregation weights.

The weight of neighbor ``j`` at location ``p`` is ``exp(cos(e_j(p), e_ref(p)))``
normalized over the frame window, where ``e = embed(features)``. Since the
cosine is bounded, this is computed as a max-shifted softmax of cosines.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractViolation
from .nets import ConvStack, he_layer

NORM_EPS = 1e-12
EMBED_KERNELS = (1, 3, 1)
PAPER_EMBED_WIDTHS = (512, 512, 2048)
DEFAULT_EMBED_WIDTHS = (8, 8, 16)


def make_embedding_net(in_channels: int, widths=DEFAULT_EMBED_WIDTHS, rng=None) -> ConvStack:
    """Randomly initialised 1x1 -> 3x3 -> 1x1 embedding net (ReLU between layers)."""
    rng = np.random.default_rng(0) if rng is None else rng
    if len(widths) != 3:
        raise ConfigError(f"embedding net needs 3 widths, got {widths}", key="embedding.widths")
    layers = []
    c_in = in_channels
    for idx, (c_out, k) in enumerate(zip(widths, EMBED_KERNELS)):
        gain = 2.0 if idx < 2 else 1.0
        layers.append(he_layer(rng, c_in, c_out, k, gain=gain))
        c_in = c_out
    return ConvStack(layers, relu_last=False, kind="embedding")


def check_embedding_net(net: ConvStack) -> None:
    kernels = tuple(l.kernel_size for l in net.layers)
    if kernels != EMBED_KERNELS or any(l.stride != 1 for l in net.layers):
        raise ConfigError(f"embedding net must have kernels {EMBED_KERNELS} at stride 1, got {kernels}")


def embed(net: ConvStack, features, keep_cache=False):
    check_embedding_net(net)
    return net.forward(features, keep_cache=keep_cache)


def _norms(a):
    return np.sqrt(np.einsum("chw,chw->hw", a, a))


def cosine_similarity(a, b) -> np.ndarray:
    """Per-location cosine between ``a [E,H,W]`` and ``b [E,H,W]``; 0 where a norm vanishes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3:
        raise ConfigError(f"cosine inputs must share a [E,H,W] shape, got {a.shape} and {b.shape}")
    na, nb = _norms(a), _norms(b)
    ok = (na >= NORM_EPS) & (nb >= NORM_EPS)
    dot = np.einsum("chw,chw->hw", a, b)
    return np.where(ok, dot / np.where(ok, na * nb, 1.0), 0.0)


def cosine_similarity_backward(a, b, grad):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = _norms(a), _norms(b)
    ok = (na >= NORM_EPS) & (nb >= NORM_EPS)
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    cos = np.where(ok, np.einsum("chw,chw->hw", a, b) / (na_s * nb_s), 0.0)
    g = np.where(ok, grad, 0.0)
    ga = g * (b / (na_s * nb_s) - cos * a / na_s**2)
    gb = g * (a / (na_s * nb_s) - cos * b / nb_s**2)
    return ga, gb


def raw_weight(emb_warped, emb_ref) -> np.ndarray:
    """Unnormalised weight ``exp(cosine)`` per location."""
    return np.exp(cosine_similarity(emb_warped, emb_ref))


def normalize_weights(raw: list) -> list[np.ndarray]:
    """Divide each map by the per-location sum over the window."""
    if len(raw) == 0:
        raise ConfigError("normalize_weights needs at least one map")
    stack = np.stack([np.asarray(r, dtype=np.float64) for r in raw])
    if stack.ndim != 3:
        raise ConfigError(f"weight maps must be [H,W], got stack shape {stack.shape}")
    if np.any(stack <= 0) or not np.all(np.isfinite(stack)):
        raise ContractViolation("raw weights must be finite and strictly positive", {"raw": stack})
    return list(stack / stack.sum(axis=0))


def normalize_weights_backward(raw: list, grads: list) -> list[np.ndarray]:
    stack = np.stack([np.asarray(r, dtype=np.float64) for r in raw])
    g = np.stack([np.asarray(x, dtype=np.float64) for x in grads])
    total = stack.sum(axis=0)
    out = stack / total
    return list((g - (g * out).sum(axis=0)) / total)


def softmax_weights(cosines: list) -> list[np.ndarray]:
    """Stable softmax across the window; equals ``normalize_weights([exp(c) ...])``."""
    if len(cosines) == 0:
        raise ConfigError("softmax_weights needs at least one map")
    stack = np.stack([np.asarray(c, dtype=np.float64) for c in cosines])
    e = np.exp(stack - stack.max(axis=0))
    return list(e / e.sum(axis=0))


def softmax_weights_backward(weights: list, grads: list) -> list[np.ndarray]:
    w = np.stack(weights)
    g = np.stack([np.asarray(x, dtype=np.float64) for x in grads])
    return list(w * (g - (w * g).sum(axis=0)))


def uniform_weights(n: int, shape) -> list[np.ndarray]:
    return [np.full(shape, 1.0 / n) for _ in range(n)]


def adaptive_weights(net: ConvStack, warped: list, reference, keep_cache=False):
    """Embed the warped neighbors and the reference and return normalised weights.

    With ``keep_cache`` also returns the state needed by
    :func:`adaptive_weights_backward`.
    """
    ref_emb, ref_cache = embed(net, reference, keep_cache=True)
    embs, caches, cosines = [], [], []
    for f in warped:
        e, c = embed(net, f, keep_cache=True)
        embs.append(e)
        caches.append(c)
        cosines.append(cosine_similarity(e, ref_emb))
    weights = softmax_weights(cosines)
    if not keep_cache:
        return weights
    state = {"ref_emb": ref_emb, "ref_cache": ref_cache, "embs": embs, "caches": caches}
    return weights, state


def adaptive_weights_backward(net: ConvStack, weights, state, grad_weights):
    """Returns ``(grad_warped list, grad_reference, param grads list)``."""
    gcos = softmax_weights_backward(weights, grad_weights)
    ref_emb = state["ref_emb"]
    g_ref_emb = np.zeros_like(ref_emb)
    pgrads = [np.zeros_like(p) for p in net.params()]
    grad_warped = []
    for e, cache, gc in zip(state["embs"], state["caches"], gcos):
        ge, gr = cosine_similarity_backward(e, ref_emb, gc)
        g_ref_emb += gr
        gx, layer_grads = net.backward(cache, ge)
        grad_warped.append(gx)
        for acc, g in zip(pgrads, ConvStack.flatten_grads(layer_grads)):
            acc += g
    g_ref, layer_grads = net.backward(state["ref_cache"], g_ref_emb)
    for acc, g in zip(pgrads, ConvStack.flatten_grads(layer_grads)):
        acc += g
    return grad_warped, g_ref, pgrads
