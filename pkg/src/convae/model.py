"""Fully convolutional autoencoder: architecture, staged builds, forward pass.

The encoder has eight convolutions (7x7 then 3x3 kernels) and the decoder
mirrors each of them with a transposed convolution that restores the
mirrored layer's input extent and channel count.  Training proceeds in
stages of encoder depth 2, 4, 6 and 8; a stage-``s`` network holds encoder
layers ``enc1..enc{2s}`` followed by ``dec{2s}..dec1``.  Layer names are
shared across stages, which is what makes weight transfer a plain copy.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ContractError, DimensionError, TransferError
from .tensor import ConvSpec, Tensor, conv2d, conv_output_size, conv_transpose2d, relu

FULL_FILTERS = (64, 128, 256, 512, 1024, 512, 256, 128)
# As printed in the source publication; see ArchitectureSpec.full(filter_typo=True).
PRINTED_FILTERS = (64, 128, 256, 512, 1024, 521, 256, 128)
KERNELS = (7, 3, 3, 3, 3, 3, 3, 3)
STRIDES = ((2, 2), (2, 2), (2, 2), (2, 2), (2, 2), (2, 1), (1, 1), (1, 1))
INPUT_SHAPE = (128, 64, 1)
STAGE_DEPTHS = {1: 2, 2: 4, 3: 6, 4: 8}


@dataclass(frozen=True)
class ArchitectureSpec:
    filters: tuple = FULL_FILTERS
    kernels: tuple = KERNELS
    strides: tuple = STRIDES
    input_shape: tuple = INPUT_SHAPE
    padding: str = "same"
    final_activation: str = "linear"

    def __post_init__(self):
        if not (len(self.filters) == len(self.kernels) == len(self.strides) == 8):
            raise ContractError("an architecture needs exactly 8 encoder layers")
        if self.final_activation not in ("linear", "relu"):
            raise ContractError(f"final_activation must be 'linear' or 'relu', got {self.final_activation!r}")
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        object.__setattr__(self, "strides", tuple(tuple(int(v) for v in s) for s in self.strides))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))

    @classmethod
    def full(cls, filter_typo: bool = False, **kw) -> "ArchitectureSpec":
        """Full-width network; ``filter_typo`` uses 521 filters in layer 5 instead of 1024."""
        return cls(filters=PRINTED_FILTERS if filter_typo else FULL_FILTERS, **kw)

    @classmethod
    def desk(cls, width_divisor: int = 8, **kw) -> "ArchitectureSpec":
        """Full geometry with every filter count divided by ``width_divisor``."""
        return cls(filters=tuple(max(1, f // width_divisor) for f in FULL_FILTERS), **kw)

    # -- geometry ---------------------------------------------------------

    def encoder_specs(self) -> list[ConvSpec]:
        return [
            ConvSpec(k, k, s[0], s[1], f, self.padding)
            for f, k, s in zip(self.filters, self.kernels, self.strides)
        ]

    def shapes(self) -> list[tuple]:
        """(height, width, channels) after the input and after each encoder layer."""
        h, w, c = self.input_shape
        out = [(h, w, c)]
        for spec in self.encoder_specs():
            h, w = conv_output_size((h, w), spec)
            out.append((h, w, spec.filters))
        return out

    def decoder_spec(self, k: int) -> ConvSpec:
        """Transposed layer mirroring encoder layer ``k`` (1-based)."""
        enc = self.encoder_specs()[k - 1]
        h, w, c = self.shapes()[k - 1]
        return ConvSpec(
            enc.kernel_height, enc.kernel_width, enc.stride_h, enc.stride_w, c,
            self.padding, output_size=(h, w),
        )

    def latent_shape(self, stage: int = 4) -> tuple:
        return self.shapes()[STAGE_DEPTHS[stage]]

    def layer_names(self, stage: int) -> list[str]:
        depth = STAGE_DEPTHS[stage]
        return [f"enc{k}" for k in range(1, depth + 1)] + [f"dec{k}" for k in range(depth, 0, -1)]

    def layer_spec(self, name: str) -> ConvSpec:
        k = int(name[3:])
        return self.encoder_specs()[k - 1] if name.startswith("enc") else self.decoder_spec(k)

    def weight_shape(self, name: str) -> tuple:
        # Mirrored layers share their encoder partner's kernel array shape.
        k = int(name[3:])
        enc = self.encoder_specs()[k - 1]
        return enc.kernel + (self.shapes()[k - 1][2], enc.filters)

    def bias_shape(self, name: str) -> tuple:
        return (self.layer_spec(name).filters,)

    def descriptor(self) -> dict:
        return {
            "filters": list(self.filters),
            "kernels": list(self.kernels),
            "strides": [list(s) for s in self.strides],
            "input_shape": list(self.input_shape),
            "padding": self.padding,
            "final_activation": self.final_activation,
        }

    @classmethod
    def from_descriptor(cls, d: dict) -> "ArchitectureSpec":
        return cls(
            filters=tuple(d["filters"]), kernels=tuple(d["kernels"]),
            strides=tuple(tuple(s) for s in d["strides"]), input_shape=tuple(d["input_shape"]),
            padding=d["padding"], final_activation=d["final_activation"],
        )

    def fingerprint(self) -> str:
        text = json.dumps(self.descriptor(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Layer:
    name: str
    weights: Tensor
    bias: Tensor


@dataclass(frozen=True)
class AutoencoderParams:
    arch: ArchitectureSpec
    stage: int
    layers: tuple
    trainable: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return self.arch.fingerprint()

    @property
    def names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def tensors(self) -> dict:
        """Flat ``{"enc1.w": Tensor, "enc1.b": Tensor, ...}`` in layer order."""
        out = {}
        for layer in self.layers:
            out[f"{layer.name}.w"] = layer.weights
            out[f"{layer.name}.b"] = layer.bias
        return out

    def frozen(self) -> frozenset:
        """Flat tensor keys whose layer is masked out of training."""
        return frozenset(
            key for layer in self.layers if not self.trainable.get(layer.name, True)
            for key in (f"{layer.name}.w", f"{layer.name}.b")
        )

    def with_tensors(self, tensors: dict) -> "AutoencoderParams":
        layers = tuple(
            Layer(l.name, tensors.get(f"{l.name}.w", l.weights), tensors.get(f"{l.name}.b", l.bias))
            for l in self.layers
        )
        return replace(self, layers=layers)

    def unfreeze_all(self) -> "AutoencoderParams":
        return replace(self, trainable={name: True for name in self.names})

    def validate(self) -> None:
        expected = self.arch.layer_names(self.stage)
        if self.names != expected:
            raise DimensionError(f"stage {self.stage} expects layers {expected}, got {self.names}")
        for layer in self.layers:
            ws, bs = self.arch.weight_shape(layer.name), self.arch.bias_shape(layer.name)
            if layer.weights.shape != ws or layer.bias.shape != bs:
                raise DimensionError(
                    f"{layer.name}: shapes {layer.weights.shape}/{layer.bias.shape}, expected {ws}/{bs}"
                )


def _he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> Tensor:
    limit = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-limit, limit, size=shape), dtype=dtype)


def build(
    stage: int,
    init_rng: np.random.Generator,
    arch: Optional[ArchitectureSpec] = None,
    dtype=np.float64,
) -> AutoencoderParams:
    """Fresh He-uniform weights and zero biases for the stage-``stage`` network.

    Weights are drawn layer by layer in forward order.  Fan-in is the
    kernel area times the layer's input channels.
    """
    if stage not in STAGE_DEPTHS:
        raise ContractError(f"stage must be one of {sorted(STAGE_DEPTHS)}, got {stage}")
    arch = ArchitectureSpec() if arch is None else arch
    layers = []
    for name in arch.layer_names(stage):
        wshape = arch.weight_shape(name)
        kh, kw, c_lo, c_hi = wshape
        fan_in = kh * kw * (c_lo if name.startswith("enc") else c_hi)
        w = _he_uniform(init_rng, wshape, fan_in, dtype)
        b = Tensor(np.zeros(arch.bias_shape(name)), dtype=dtype)
        layers.append(Layer(name, w, b))
    params = AutoencoderParams(arch, stage, tuple(layers), {name: True for name in arch.layer_names(stage)})
    params.validate()
    return params


def forward(params: AutoencoderParams, batch: Tensor) -> tuple[Tensor, Tensor]:
    """Reconstruction ``(B, H, W, 1)`` and latent of the stage's deepest encoder layer.

    ReLU follows every layer except ``dec1`` when the architecture's final
    activation is linear.
    """
    arch = params.arch
    if batch.numpy().ndim != 4 or tuple(batch.shape[1:]) != arch.input_shape:
        raise DimensionError(f"batch must be (B,) + {arch.input_shape}, got {batch.shape}")
    depth = STAGE_DEPTHS[params.stage]
    h = batch
    latent = None
    for i, layer in enumerate(params.layers):
        spec = arch.layer_spec(layer.name)
        if layer.name.startswith("enc"):
            h = relu(conv2d(h, layer.weights, layer.bias, spec))
        else:
            h = conv_transpose2d(h, layer.weights, layer.bias, spec)
            if layer.name != "dec1" or arch.final_activation == "relu":
                h = relu(h)
        if i == depth - 1:
            latent = h
    return h, latent


def transfer_weights(shallow: AutoencoderParams, deep: AutoencoderParams) -> AutoencoderParams:
    """Copy ``shallow``'s layers into ``deep``; only the added inner layers stay trainable."""
    if shallow.stage >= deep.stage:
        raise TransferError(f"cannot transfer from stage {shallow.stage} to stage {deep.stage}")
    if shallow.fingerprint != deep.fingerprint:
        raise TransferError("architectures differ; transfer needs a shared layer geometry")
    if shallow.layers[0].weights.dtype != deep.layers[0].weights.dtype:
        raise TransferError("networks use different floating-point precision")
    carried = {layer.name: layer for layer in shallow.layers}
    layers = []
    for layer in deep.layers:
        src = carried.get(layer.name)
        if src is None:
            layers.append(layer)
            continue
        if src.weights.shape != layer.weights.shape or src.bias.shape != layer.bias.shape:
            raise TransferError(f"{layer.name}: shape mismatch during transfer")
        layers.append(src)
    trainable = {layer.name: layer.name not in carried for layer in deep.layers}
    return replace(deep, layers=tuple(layers), trainable=trainable)
