"""Layers, declarative network specs and parameter initialization."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from . import autodiff as ad
from .autodiff import Tensor

LayerKind = Literal["Conv2d", "Dense", "BatchNorm2d", "ReLU", "GlobalAvgPool"]


class SpecError(ValueError):
    """Raised for malformed network specs."""


class LayerSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: LayerKind
    in_channels: Optional[int] = None
    out_channels: Optional[int] = None
    kernel: Optional[int] = None
    stride: int = 1
    padding: int = 0
    bias: bool = True


class NetworkSpec(BaseModel):
    """Ordered layer list. Channel counts must chain from layer to layer."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    layers: List[LayerSpec]

    @property
    def in_channels(self) -> int:
        for layer in self.layers:
            if layer.in_channels is not None:
                return layer.in_channels
        raise SpecError("spec has no layer with input channels")

    @property
    def num_classes(self) -> int:
        dense = [l for l in self.layers if l.kind == "Dense"]
        if not dense:
            raise SpecError("spec has no Dense classifier")
        return dense[-1].out_channels

    def validate_chain(self) -> None:
        """Check channel chaining; raise :class:`SpecError` naming the bad layer."""
        if not self.layers:
            raise SpecError("spec has no layers")
        width: Optional[int] = None
        flat = self.layers[0].kind == "Dense"
        for i, layer in enumerate(self.layers):
            kind = layer.kind
            if kind in ("Conv2d", "Dense", "BatchNorm2d"):
                if layer.in_channels is None or layer.out_channels is None:
                    raise SpecError(f"layer {i} ({kind}) needs in_channels and out_channels")
                if layer.in_channels < 1 or layer.out_channels < 1:
                    raise SpecError(f"layer {i} ({kind}) has non-positive channel count")
                if width is not None and layer.in_channels != width:
                    raise SpecError(
                        f"layer {i} ({kind}) expects {layer.in_channels} input channels, "
                        f"previous layer produces {width}"
                    )
            if kind == "Conv2d":
                if flat:
                    raise SpecError(f"layer {i} (Conv2d) follows a pooled/flat layer")
                if layer.kernel is None or layer.kernel < 1 or layer.stride < 1 or layer.padding < 0:
                    raise SpecError(f"layer {i} (Conv2d) has invalid kernel/stride/padding")
                width = layer.out_channels
            elif kind == "BatchNorm2d":
                if flat:
                    raise SpecError(f"layer {i} (BatchNorm2d) follows a pooled/flat layer")
                if layer.in_channels != layer.out_channels:
                    raise SpecError(f"layer {i} (BatchNorm2d) must keep its channel count")
                width = layer.out_channels
            elif kind == "Dense":
                if not flat:
                    raise SpecError(f"layer {i} (Dense) needs a GlobalAvgPool before it")
                width = layer.out_channels
            elif kind == "GlobalAvgPool":
                if flat:
                    raise SpecError(f"layer {i} (GlobalAvgPool) applied twice")
                flat = True
        if self.layers[-1].kind != "Dense":
            raise SpecError(f"layer {len(self.layers) - 1} must be a Dense classifier")


def reference_cnn(in_channels: int = 3, num_classes: int = 10) -> NetworkSpec:
    """The tiny CNN used in the desk-scale experiments."""

    def conv(cin, cout, stride):
        return LayerSpec(kind="Conv2d", in_channels=cin, out_channels=cout, kernel=3,
                         stride=stride, padding=1, bias=False)

    def bn(c):
        return LayerSpec(kind="BatchNorm2d", in_channels=c, out_channels=c)

    relu = LayerSpec(kind="ReLU")
    return NetworkSpec(
        layers=[
            conv(in_channels, 8, 1), bn(8), relu,
            conv(8, 16, 2), bn(16), relu,
            conv(16, 16, 2), bn(16), relu,
            LayerSpec(kind="GlobalAvgPool"),
            LayerSpec(kind="Dense", in_channels=16, out_channels=num_classes),
        ]
    )


# batch norm ------------------------------------------------------------------


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def init(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm_forward(x: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Normalize per channel.

    In train mode the (biased) batch statistics normalize ``x`` and are
    blended into the running statistics with weight ``state.momentum``.
    Eval mode reads the running statistics only.
    """
    if x.ndim != 4:
        raise ad.ShapeError(f"batchnorm expects N×C×H×W input, got {x.shape}")
    if not train:
        return ad.batch_norm(x, state.gamma, state.beta, state.running_mean,
                             state.running_var, state.eps, batch_stats=False)
    n, _, h, w = x.shape
    if n * h * w < 2:
        raise ValueError(f"train-mode batchnorm needs N*H*W >= 2, got input {x.shape}")
    mu = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))
    out = ad.batch_norm(x, state.gamma, state.beta, mu, var, state.eps, batch_stats=True)
    m = state.momentum
    state.running_mean[...] = (1 - m) * state.running_mean + m * mu
    state.running_var[...] = (1 - m) * state.running_var + m * var
    return out


def dense_forward(x: Tensor, w: Tensor, b: Optional[Tensor]) -> Tensor:
    out = ad.matmul(x, w)
    return out if b is None else ad.add(out, b)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ad.ShapeError(f"global_avg_pool expects N×C×H×W input, got {x.shape}")
    return ad.mean(x, axis=(2, 3))


def forward_layers(
    spec: NetworkSpec,
    params: Dict[str, Tensor],
    bn: Dict[int, BatchNormState],
    x: Tensor,
    train: bool,
) -> Tensor:
    """Run ``x`` through ``spec`` using the supplied parameter tensors."""
    ndim = 2 if spec.layers[0].kind == "Dense" else 4
    if x.ndim != ndim or x.shape[1] != spec.in_channels:
        raise ad.ShapeError(
            f"input {x.shape} does not match spec input ({ndim}-d, {spec.in_channels} channels)"
        )
    h = x
    for i, layer in enumerate(spec.layers):
        if layer.kind == "Conv2d":
            h = ad.conv2d(h, params[f"{i}.weight"], params.get(f"{i}.bias"),
                          stride=layer.stride, padding=layer.padding)
        elif layer.kind == "BatchNorm2d":
            h = batchnorm_forward(h, bn[i], train)
        elif layer.kind == "ReLU":
            h = ad.relu(h)
        elif layer.kind == "GlobalAvgPool":
            h = global_avg_pool(h)
        elif layer.kind == "Dense":
            h = dense_forward(h, params[f"{i}.weight"], params.get(f"{i}.bias"))
    return h


def parameter_shapes(spec: NetworkSpec) -> Dict[str, tuple]:
    shapes = {}
    for i, layer in enumerate(spec.layers):
        if layer.kind == "Conv2d":
            shapes[f"{i}.weight"] = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
        elif layer.kind == "Dense":
            shapes[f"{i}.weight"] = (layer.in_channels, layer.out_channels)
        else:
            continue
        if layer.bias:
            shapes[f"{i}.bias"] = (layer.out_channels,)
    return shapes


def init_parameters(spec: NetworkSpec, seed: int) -> Dict[str, Tensor]:
    """Kaiming fan-in normal weights, zero biases."""
    spec.validate_chain()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(spec).items():
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        params[name] = Tensor(data, requires_grad=True)
    return params


def init_batchnorm(spec: NetworkSpec, momentum: float = 0.1, eps: float = 1e-5) -> Dict[int, BatchNormState]:
    return {
        i: BatchNormState.init(layer.out_channels, momentum, eps)
        for i, layer in enumerate(spec.layers)
        if layer.kind == "BatchNorm2d"
    }


@dataclass
class Network:
    """A standalone network: spec, parameters and batch-norm states."""

    spec: NetworkSpec
    params: Dict[str, Tensor]
    bn: Dict[int, BatchNormState] = field(default_factory=dict)

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        return forward_layers(self.spec, self.params, self.bn, x, train)

    __call__ = forward

    def named_parameters(self) -> Dict[str, Tensor]:
        """All trainable tensors, batch-norm affine params included."""
        named = dict(self.params)
        for i, state in self.bn.items():
            named[f"{i}.gamma"] = state.gamma
            named[f"{i}.beta"] = state.beta
        return named

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.grad = None


def build_network(spec: NetworkSpec, rng_seed: int, bn_momentum: float = 0.1, bn_eps: float = 1e-5) -> Network:
    """Initialize a network; a pure function of ``(spec, rng_seed)``."""
    return Network(spec, init_parameters(spec, rng_seed), init_batchnorm(spec, bn_momentum, bn_eps))
