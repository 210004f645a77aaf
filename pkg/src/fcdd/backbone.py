"""Fully-convolutional backbones, latent-grid forward pass and receptive-field arithmetic.

A backbone is described declaratively by a :class:`BackboneSpec` (an ordered list of
layer descriptors) and realised as a :class:`Backbone` torch module. Only convolution,
max-pooling, batch-norm and pointwise nonlinearities are accepted, so every output cell
keeps a well-defined footprint in the input image.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import torch
from torch import nn


class Arch(str, Enum):
    FMNIST_CNN = "FMNIST_CNN"
    CIFAR_CNN = "CIFAR_CNN"
    VGG11_FCDD = "VGG11_FCDD"
    CUSTOM = "CUSTOM"


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int | None = None  # None -> "same"-style k // 2
    bias: bool = True
    kind: str = field(default="conv", init=False)

    @property
    def pad(self) -> int:
        return self.kernel // 2 if self.padding is None else self.padding


@dataclass(frozen=True)
class MaxPool:
    kernel: int = 2
    stride: int = 2
    kind: str = field(default="maxpool", init=False)


@dataclass(frozen=True)
class BatchNorm:
    momentum: float = 0.1
    kind: str = field(default="batchnorm", init=False)


@dataclass(frozen=True)
class LeakyReLU:
    negative_slope: float = 0.01
    kind: str = field(default="leaky_relu", init=False)


Layer = Union[Conv, MaxPool, BatchNorm, LeakyReLU]
_LAYER_TYPES = {"conv": Conv, "maxpool": MaxPool, "batchnorm": BatchNorm, "leaky_relu": LeakyReLU}


def layer_from_dict(d: dict) -> Layer:
    d = dict(d)
    kind = d.pop("kind")
    try:
        cls = _LAYER_TYPES[kind]
    except KeyError:
        raise ValueError(f"layer kind {kind!r} is not allowed in a fully-convolutional backbone") from None
    return cls(**d)


@dataclass(frozen=True)
class BackboneSpec:
    arch_id: Arch
    layer_list: tuple[Layer, ...]
    frozen_prefix_len: int
    input_shape: tuple[int, int, int]

    def __post_init__(self):
        for layer in self.layer_list:
            if not isinstance(layer, (Conv, MaxPool, BatchNorm, LeakyReLU)):
                raise TypeError(f"unsupported layer {layer!r}")
        if not any(isinstance(l, Conv) for l in self.layer_list):
            raise ValueError("network must contain at least one convolution")
        if not 0 <= self.frozen_prefix_len <= len(self.layer_list):
            raise ValueError("frozen_prefix_len must lie in [0, number of layers]")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be a positive (C, H, W), got {self.input_shape}")

    def output_shape(self) -> tuple[int, int, int]:
        """(C', U, V) produced for an input of ``input_shape``."""
        c, h, w = self.input_shape
        for layer in self.layer_list:
            if isinstance(layer, Conv):
                c = layer.out_channels
                h = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
                w = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
            elif isinstance(layer, MaxPool):
                h = (h - layer.kernel) // layer.stride + 1
                w = (w - layer.kernel) // layer.stride + 1
            if h < 1 or w < 1:
                raise ValueError(
                    f"input {self.input_shape[1:]} is smaller than the network's total downsampling"
                )
        return c, h, w

    def to_dict(self) -> dict:
        return {
            "arch_id": self.arch_id.value,
            "layer_list": [asdict(l) for l in self.layer_list],
            "frozen_prefix_len": self.frozen_prefix_len,
            "input_shape": list(self.input_shape),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(
            arch_id=Arch(d["arch_id"]),
            layer_list=tuple(layer_from_dict(l) for l in d["layer_list"]),
            frozen_prefix_len=int(d["frozen_prefix_len"]),
            input_shape=tuple(d["input_shape"]),
        )


@dataclass(frozen=True)
class ReceptiveField:
    size: float
    jump: float
    offset: float


def receptive_field(spec: BackboneSpec | Sequence[Layer]) -> ReceptiveField:
    """Compose receptive-field size, jump and first-centre offset over the layer list.

    Pixel centres are at integer coordinates, so the first output cell of an
    even-kernel pool sits between two pixels (offset 0.5).
    """
    layers = spec.layer_list if isinstance(spec, BackboneSpec) else tuple(spec)
    size, jump, offset = 1.0, 1.0, 0.0
    for layer in layers:
        if isinstance(layer, Conv):
            k, s, p = layer.kernel, layer.stride, layer.pad
        elif isinstance(layer, MaxPool):
            k, s, p = layer.kernel, layer.stride, 0
        else:
            continue
        offset += ((k - 1) / 2 - p) * jump
        size += (k - 1) * jump
        jump *= s
    return ReceptiveField(size=size, jump=jump, offset=offset)


# --- architectures -----------------------------------------------------------

# Channel widths are not given by the method description; these are our choices.
FMNIST_WIDTHS = (128, 128, 64)
CIFAR_WIDTHS = (128, 256, 256, 128, 64)
VGG11_HEAD_WIDTHS = (128, 64)
# Flat VGG11 feature extractor up to (and including) the 10th layer:
# conv64 relu pool conv128 relu pool conv256 relu conv256 relu
VGG11_PREFIX: tuple[Layer, ...] = (
    Conv(64), LeakyReLU(0.0), MaxPool(),
    Conv(128), LeakyReLU(0.0), MaxPool(),
    Conv(256), LeakyReLU(0.0),
    Conv(256), LeakyReLU(0.0),
)
# Indices into torchvision's ``vgg11().features`` matching VGG11_PREFIX.
_VGG11_TV_CONV_INDICES = {0: 0, 3: 3, 6: 6, 8: 8}


def arch_layers(arch_id: Arch, slope: float = 0.01, widths: Sequence[int] | None = None) -> tuple[tuple[Layer, ...], int]:
    arch_id = Arch(arch_id)
    if arch_id is Arch.FMNIST_CNN:
        a, b, c = widths or FMNIST_WIDTHS
        return (
            Conv(a), BatchNorm(), LeakyReLU(slope), MaxPool(),
            Conv(b), MaxPool(),
            Conv(c),
        ), 0
    if arch_id is Arch.CIFAR_CNN:
        a, b, c, d, e = widths or CIFAR_WIDTHS
        layers: list[Layer] = []
        for width in (a, b, c):
            layers += [Conv(width), BatchNorm(), LeakyReLU(slope), MaxPool()]
        layers += [Conv(d), Conv(e, kernel=1)]
        return tuple(layers), 0
    if arch_id is Arch.VGG11_FCDD:
        d, e = widths or VGG11_HEAD_WIDTHS
        return VGG11_PREFIX + (Conv(d), Conv(e, kernel=1)), len(VGG11_PREFIX)
    raise ValueError(f"architecture {arch_id} has no predefined layers; pass layer_list for CUSTOM")


class Backbone(nn.Module):
    """Torch realisation of a :class:`BackboneSpec`."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        self.spec.output_shape()  # validates the input size
        modules: list[nn.Module] = []
        channels = spec.input_shape[0]
        for layer in spec.layer_list:
            if isinstance(layer, Conv):
                modules.append(nn.Conv2d(channels, layer.out_channels, layer.kernel,
                                         stride=layer.stride, padding=layer.pad, bias=layer.bias))
                channels = layer.out_channels
            elif isinstance(layer, MaxPool):
                modules.append(nn.MaxPool2d(layer.kernel, layer.stride))
            elif isinstance(layer, BatchNorm):
                modules.append(nn.BatchNorm2d(channels, momentum=layer.momentum))
            else:
                modules.append(nn.LeakyReLU(layer.negative_slope))
        self.layers = nn.ModuleList(modules)
        for module in self.layers[: spec.frozen_prefix_len]:
            for p in module.parameters():
                p.requires_grad_(False)

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen normalisation layers keep their running statistics
        for module in self.layers[: self.spec.frozen_prefix_len]:
            module.train(False)
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for module in self.layers:
            x = module(x)
        return x

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    @property
    def receptive_field(self) -> ReceptiveField:
        return receptive_field(self.spec)


def build_backbone(
    arch_id: Arch | str,
    input_shape: Sequence[int],
    pretrained_weights: str | Path | None = None,
    *,
    layer_list: Sequence[Layer] | None = None,
    frozen_prefix_len: int = 0,
    negative_slope: float = 0.01,
    widths: Sequence[int] | None = None,
    seed: int | None = None,
) -> Backbone:
    """Build a backbone and initialise its parameters.

    Trainable convolutions use PyTorch's default fan-in uniform initialisation,
    made reproducible by ``seed``. For ``VGG11_FCDD`` the frozen prefix is loaded
    from ``pretrained_weights`` when given (torchvision ``vgg11`` state dict or one
    of our ``.npz`` weight archives); otherwise it stays randomly initialised.
    """
    arch_id = Arch(arch_id)
    if arch_id is Arch.CUSTOM:
        if layer_list is None:
            raise ValueError("CUSTOM backbones require layer_list")
        layers, frozen = tuple(layer_list), frozen_prefix_len
    else:
        layers, frozen = arch_layers(arch_id, negative_slope, widths)
    spec = BackboneSpec(arch_id, layers, frozen, tuple(int(v) for v in input_shape))
    if seed is not None:
        torch.manual_seed(seed)
    net = Backbone(spec)
    if pretrained_weights is not None:
        path = Path(pretrained_weights)
        if not path.is_file():
            raise FileNotFoundError(f"weight file {path} does not exist")
        if path.suffix == ".npz":
            load_weights(net, path, strict=False)
        else:
            _load_torchvision_vgg11(net, path)
    return net


def _load_torchvision_vgg11(net: Backbone, path: Path) -> None:
    if net.spec.arch_id is not Arch.VGG11_FCDD:
        raise ValueError("torchvision checkpoints can only initialise VGG11_FCDD")
    state = torch.load(path, map_location="cpu", weights_only=True)
    for ours, theirs in _VGG11_TV_CONV_INDICES.items():
        conv = net.layers[ours]
        for name in ("weight", "bias"):
            key = f"features.{theirs}.{name}"
            if key not in state:
                raise ValueError(f"{path} lacks {key}")
            tensor = state[key]
            target = getattr(conv, name)
            if tuple(tensor.shape) != tuple(target.shape):
                raise ValueError(f"{key}: shape {tuple(tensor.shape)} != expected {tuple(target.shape)}")
            with torch.no_grad():
                target.copy_(tensor)


def forward(backbone: Backbone, images: torch.Tensor) -> torch.Tensor:
    """Map a batch (B, C, H, W) to latent grids (B, C', U, V) in evaluation mode."""
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError(f"expected a non-empty (B, C, H, W) batch, got shape {tuple(images.shape)}")
    if tuple(images.shape[1:]) != tuple(backbone.spec.input_shape):
        raise ValueError(f"image shape {tuple(images.shape[1:])} != backbone input {backbone.spec.input_shape}")
    if not torch.isfinite(images).all():
        raise ValueError("images contain non-finite values")
    was_training = backbone.training
    backbone.eval()
    try:
        with torch.no_grad():
            return backbone(images)
    finally:
        backbone.train(was_training)


# --- weight archives ---------------------------------------------------------
# One .npz file; array keys are "<layer index>.<tensor name>", e.g. "0.weight",
# "1.running_mean". Buffers are stored alongside parameters.

def state_arrays(net: Backbone) -> dict[str, np.ndarray]:
    out = {}
    for key, tensor in net.layers.state_dict().items():
        out[key] = tensor.detach().cpu().numpy().copy()
    return out


def save_weights(net: Backbone, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **state_arrays(net))
    return path


def load_weights(net: Backbone, path: str | Path, strict: bool = True) -> None:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"weight file {path} does not exist")
    current = net.layers.state_dict()
    with np.load(path) as archive:
        keys = set(archive.files)
        if strict and keys != set(current):
            raise ValueError(f"{path}: keys differ from the network ({sorted(keys ^ set(current))})")
        update = {}
        for key in keys & set(current):
            array = archive[key]
            if tuple(array.shape) != tuple(current[key].shape):
                raise ValueError(f"{path}: {key} has shape {array.shape}, expected {tuple(current[key].shape)}")
            update[key] = torch.from_numpy(array).to(current[key].dtype)
    net.layers.load_state_dict(update, strict=False)
