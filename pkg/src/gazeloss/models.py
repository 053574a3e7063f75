"""Convolutional policy and reward networks with an exposed tap layer.

The tap is the 1-based index of the convolutional layer whose (post
activation) output the gaze loss or gaze-modulated dropout attaches to.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import gzt
from .errors import ConfigurationError, DimensionError, FormatError
from .gmd import apply_gmd
from .tensor import Tensor, conv2d, fully_connected, leaky_relu, relu

SPEC_FILE = "spec.json"
CHECKPOINT_FORMAT = "gazeloss-net/1"


@dataclass
class ConvLayerSpec:
    out_channels: int
    kernel: int
    stride: int
    activation: str = "relu"


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


@dataclass
class NetSpec:
    kind: str
    input_shape: Tuple[int, int, int]
    conv: List[ConvLayerSpec]
    hidden: List[int] = field(default_factory=list)
    outputs: int = 1
    tap: int = 1
    fc_activation: str = "leaky_relu"
    seed: int = 0

    def layer_shapes(self) -> List[Tuple[int, int, int]]:
        c, h, w = self.input_shape
        shapes = []
        for i, layer in enumerate(self.conv, start=1):
            if layer.kernel > h or layer.kernel > w:
                raise ConfigurationError(
                    f"conv layer {i}: kernel {layer.kernel} exceeds its {h}x{w} input"
                )
            h = conv_output_size(h, layer.kernel, layer.stride)
            w = conv_output_size(w, layer.kernel, layer.stride)
            shapes.append((layer.out_channels, h, w))
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        d = dict(d)
        d["conv"] = [ConvLayerSpec(**layer) for layer in d["conv"]]
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)


def _activate(x: Tensor, name: str) -> Tensor:
    if name == "relu":
        return relu(x)
    if name == "leaky_relu":
        return leaky_relu(x, 0.01)
    if name == "none":
        return x
    raise ConfigurationError(f"unknown activation {name!r}")


class ForwardResult:
    __slots__ = ("output", "features")

    def __init__(self, output: Tensor, features: List[Tensor]):
        self.output = output
        self.features = features

    def tap(self, layer: int) -> Tensor:
        return self.features[layer - 1]


class ConvNet:
    """Conv stack, flatten, fully connected layers. Parameters are seeded."""

    def __init__(self, spec: NetSpec):
        self.spec = spec
        self.shapes = spec.layer_shapes()
        if not 1 <= spec.tap <= len(spec.conv):
            raise ConfigurationError(f"tap layer {spec.tap} outside 1..{len(spec.conv)}")
        self.params: Dict[str, Tensor] = {}
        rng = np.random.default_rng(spec.seed)
        c_in = spec.input_shape[0]
        for i, layer in enumerate(spec.conv, start=1):
            fan_in = c_in * layer.kernel * layer.kernel
            bound = 1.0 / np.sqrt(fan_in)
            shape = (layer.out_channels, c_in, layer.kernel, layer.kernel)
            self.params[f"conv{i}.weight"] = Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)
            self.params[f"conv{i}.bias"] = Tensor(np.zeros(layer.out_channels), requires_grad=True)
            c_in = layer.out_channels
        width = int(np.prod(self.shapes[-1]))
        for i, units in enumerate(list(spec.hidden) + [spec.outputs], start=1):
            bound = 1.0 / np.sqrt(width)
            self.params[f"fc{i}.weight"] = Tensor(rng.uniform(-bound, bound, (units, width)), requires_grad=True)
            self.params[f"fc{i}.bias"] = Tensor(np.zeros(units), requires_grad=True)
            width = units

    @property
    def tap(self) -> int:
        return self.spec.tap

    @property
    def tap_shape(self) -> Tuple[int, int, int]:
        return self.shapes[self.spec.tap - 1]

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def forward(self, x, dropout: Optional[Tuple[int, np.ndarray]] = None) -> ForwardResult:
        """Run the network on ``[C,H,W]`` or ``[N,C,H,W]`` input.

        ``dropout=(layer, mask)`` multiplies that conv layer's output by a
        spatial mask (gaze-modulated dropout) before it feeds the next layer.
        """
        if not isinstance(x, Tensor):
            x = Tensor(x)
        batched = x.ndim == 4
        if x.shape[-3:] != tuple(self.spec.input_shape):
            raise DimensionError(f"network expects input {self.spec.input_shape}, got {x.shape}")
        features = []
        h = x
        for i, layer in enumerate(self.spec.conv, start=1):
            h = conv2d(h, self.params[f"conv{i}.weight"], layer.stride, self.params[f"conv{i}.bias"])
            h = _activate(h, layer.activation)
            if dropout is not None and dropout[0] == i:
                h = apply_gmd(h, dropout[1])
            features.append(h)
        h = h.reshape((h.shape[0], -1) if batched else (-1,))
        n_fc = len(self.spec.hidden) + 1
        for i in range(1, n_fc + 1):
            h = fully_connected(h, self.params[f"fc{i}.weight"], self.params[f"fc{i}.bias"])
            if i < n_fc:
                h = _activate(h, self.spec.fc_activation)
        return ForwardResult(h, features)

    __call__ = forward

    # --- persistence ---

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        for name, p in self.params.items():
            gzt.save(os.path.join(directory, f"{name}.gzt"), p.data)
        meta = {"format": CHECKPOINT_FORMAT, "spec": self.spec.to_dict(), "params": list(self.params)}
        with open(os.path.join(directory, SPEC_FILE), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, directory) -> "ConvNet":
        path = os.path.join(directory, SPEC_FILE)
        try:
            with open(path, encoding="utf-8") as fh:
                meta = json.load(fh)
        except FileNotFoundError:
            raise FormatError(f"{directory}: not a checkpoint (missing {SPEC_FILE})") from None
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise FormatError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        spec = NetSpec.from_dict(meta["spec"])
        net_cls = RewardNet if spec.kind == "trex" else PolicyNet
        net = net_cls(spec)
        for name, p in net.params.items():
            data = gzt.load(os.path.join(directory, f"{name}.gzt"))
            if data.shape != p.shape:
                raise FormatError(f"{directory}: parameter {name} has shape {data.shape}, expected {p.shape}")
            p.data = np.ascontiguousarray(data, dtype=p.data.dtype)
        return net


class PolicyNet(ConvNet):
    """Outputs action logits."""

    @property
    def num_actions(self) -> int:
        return self.spec.outputs


class RewardNet(ConvNet):
    """Outputs one scalar reward per state."""

    def snippet_return(self, states) -> Tensor:
        """Sum of per-state rewards over a snippet ``[L, C, H, W]``."""
        states = np.asarray(states.data if isinstance(states, Tensor) else states)
        if len(states) == 0:
            return Tensor(0.0)
        return self.forward(states).output.sum()


# --- builders -----------------------------------------------------------------------

BC_DEFAULT_CONV = [ConvLayerSpec(32, 8, 2), ConvLayerSpec(64, 4, 2), ConvLayerSpec(64, 3, 1)]
BCO_DEFAULT_CONV = [ConvLayerSpec(32, 8, 4), ConvLayerSpec(32, 4, 2), ConvLayerSpec(64, 3, 1)]
TREX_DEFAULT_CONV = [
    ConvLayerSpec(16, 7, 3, "leaky_relu"),
    ConvLayerSpec(16, 5, 2, "leaky_relu"),
    ConvLayerSpec(16, 3, 1, "leaky_relu"),
    ConvLayerSpec(16, 3, 1, "leaky_relu"),
]

BC_GAZE_GRID = (16, 16)
BCO_GAZE_GRID = (9, 9)
TREX_GAZE_GRID = (26, 26)


def _check_tap(net: ConvNet, expected: Tuple[int, int], allow_mismatch: bool) -> None:
    got = net.tap_shape[1:]
    if got != tuple(expected) and not allow_mismatch:
        raise ConfigurationError(
            f"{net.spec.kind} tap layer {net.tap} is {got[0]}x{got[1]}, expected "
            f"{expected[0]}x{expected[1]}; pass allow_tap_mismatch=True to override"
        )


def _layers(conv: Optional[Sequence], default: List[ConvLayerSpec]) -> List[ConvLayerSpec]:
    if conv is None:
        return [ConvLayerSpec(**asdict(layer)) for layer in default]
    return [layer if isinstance(layer, ConvLayerSpec) else ConvLayerSpec(**layer) for layer in conv]


def build_bc_net(
    num_actions: int,
    seed: int = 0,
    conv=None,
    input_shape=(1, 84, 84),
    tap: int = 3,
    allow_tap_mismatch: bool = False,
) -> PolicyNet:
    if num_actions < 2:
        raise ConfigurationError(f"num_actions must be >= 2, got {num_actions}")
    spec = NetSpec("bc", tuple(input_shape), _layers(conv, BC_DEFAULT_CONV), [], num_actions, tap, "relu", seed)
    net = PolicyNet(spec)
    _check_tap(net, BC_GAZE_GRID, allow_tap_mismatch)
    return net


def build_bco_net(
    num_actions: int,
    seed: int = 0,
    conv=None,
    input_shape=(4, 84, 84),
    tap: int = 2,
    allow_tap_mismatch: bool = False,
) -> PolicyNet:
    if num_actions < 2:
        raise ConfigurationError(f"num_actions must be >= 2, got {num_actions}")
    spec = NetSpec("bco", tuple(input_shape), _layers(conv, BCO_DEFAULT_CONV), [], num_actions, tap, "relu", seed)
    net = PolicyNet(spec)
    _check_tap(net, BCO_GAZE_GRID, allow_tap_mismatch)
    return net


def build_trex_net(
    seed: int = 0,
    conv=None,
    input_shape=(4, 84, 84),
    hidden=(64,),
    tap: int = 1,
    allow_tap_mismatch: bool = False,
) -> RewardNet:
    spec = NetSpec(
        "trex", tuple(input_shape), _layers(conv, TREX_DEFAULT_CONV), list(hidden), 1, tap, "leaky_relu", seed
    )
    net = RewardNet(spec)
    _check_tap(net, TREX_GAZE_GRID, allow_tap_mismatch)
    return net


BUILDERS = {"bc": build_bc_net, "bco": build_bco_net, "trex": build_trex_net}
