"""Small convolutional stacks with explicit forward/backward passes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .tensor import conv2d, conv2d_backward, read_tensor, relu, relu_backward, write_tensor


@dataclass
class ConvLayer:
    weight: np.ndarray  # [C_out, C_in, kh, kw]
    bias: np.ndarray  # [C_out]
    stride: int = 1
    dilation: int = 1

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]


def he_layer(rng, c_in, c_out, k, stride=1, dilation=1, gain=2.0) -> ConvLayer:
    std = np.sqrt(gain / (c_in * k * k))
    return ConvLayer(
        weight=rng.normal(0.0, std, size=(c_out, c_in, k, k)),
        bias=np.zeros(c_out),
        stride=stride,
        dilation=dilation,
    )


@dataclass
class ConvStack:
    """Convolutions separated by ReLU; ``relu_last`` also rectifies the output."""

    layers: list[ConvLayer]
    relu_last: bool = True
    kind: str = "stack"
    extra: dict = field(default_factory=dict)

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels

    @property
    def stride(self) -> int:
        s = 1
        for layer in self.layers:
            s *= layer.stride
        return s

    def _activates(self, idx: int) -> bool:
        return idx < len(self.layers) - 1 or self.relu_last

    def forward(self, x, keep_cache=False):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[0] != self.in_channels:
            raise ConfigError(
                f"{self.kind}: expected {self.in_channels} input channels, got shape {x.shape}"
            )
        cache = []
        for idx, layer in enumerate(self.layers):
            pre = conv2d(x, layer.weight, layer.bias, layer.stride, layer.dilation)
            cache.append((x, pre))
            x = relu(pre) if self._activates(idx) else pre
        return (x, cache) if keep_cache else x

    def __call__(self, x):
        return self.forward(x)

    def backward(self, cache, grad):
        """Backpropagate ``grad``; returns ``(grad_input, [(dW, db), ...])``."""
        grads = [None] * len(self.layers)
        for idx in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[idx]
            x, pre = cache[idx]
            if self._activates(idx):
                grad = relu_backward(pre, grad)
            grad, gw, gb = conv2d_backward(x, layer.weight, grad, layer.stride, layer.dilation)
            grads[idx] = (gw, gb)
        return grad, grads

    # parameters as a flat, ordered list of arrays (views, mutable in place)
    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    @staticmethod
    def flatten_grads(grads) -> list[np.ndarray]:
        return [g for pair in grads for g in pair]

    def copy(self) -> "ConvStack":
        return ConvStack(
            layers=[
                ConvLayer(l.weight.copy(), l.bias.copy(), l.stride, l.dilation) for l in self.layers
            ],
            relu_last=self.relu_last,
            kind=self.kind,
            extra=dict(self.extra),
        )

    def architecture(self) -> dict:
        return {
            "kind": self.kind,
            "relu_last": self.relu_last,
            "layers": [
                {
                    "in_channels": l.in_channels,
                    "out_channels": l.out_channels,
                    "kernel_size": l.kernel_size,
                    "stride": l.stride,
                    "dilation": l.dilation,
                }
                for l in self.layers
            ],
            "extra": self.extra,
        }

    def save(self, directory, prefix: str) -> dict:
        """Write ``{prefix}.{i}.weight.fgt`` / ``.bias.fgt``; returns the manifest entry."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for i, layer in enumerate(self.layers):
            write_tensor(directory / f"{prefix}.{i}.weight.fgt", layer.weight)
            write_tensor(directory / f"{prefix}.{i}.bias.fgt", layer.bias)
        return self.architecture()

    @classmethod
    def load(cls, directory, prefix: str, arch: dict) -> "ConvStack":
        directory = Path(directory)
        layers = []
        for i, spec in enumerate(arch["layers"]):
            w = read_tensor(directory / f"{prefix}.{i}.weight.fgt").astype(np.float64)
            b = read_tensor(directory / f"{prefix}.{i}.bias.fgt").astype(np.float64)
            expect = (spec["out_channels"], spec["in_channels"], spec["kernel_size"], spec["kernel_size"])
            if w.shape != expect:
                raise ConfigError(f"{prefix}.{i}: weight shape {w.shape} != manifest {expect}")
            layers.append(ConvLayer(w, b, spec["stride"], spec["dilation"]))
        return cls(layers, arch["relu_last"], arch["kind"], dict(arch.get("extra", {})))


def save_nets(directory, nets: dict, manifest_extra=None) -> None:
    """Save several stacks to ``directory`` with a single ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"nets": {name: net.save(directory, name) for name, net in nets.items()}}
    if manifest_extra:
        manifest.update(manifest_extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_nets(directory) -> tuple[dict, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    nets = {name: ConvStack.load(directory, name, arch) for name, arch in manifest["nets"].items()}
    return nets, manifest
