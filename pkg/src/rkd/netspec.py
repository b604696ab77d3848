"""Declarative architecture descriptions and shape inference.

A :class:`NetworkSpec` is ``K`` blocks of layers followed by an implicit
classifier (global average pooling, then a linear map to ``classes``).  The
output of each block is one feature tap.

JSON layout::

    {"name": "tinyres8", "input_shape": [1, 32, 32], "classes": 10,
     "blocks": [[{"kind": "conv", "channels_out": 16, "kernel": 3,
                  "stride": 1, "padding": 1}, ...], ...]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence, Union

from .tensor import conv_output_size

LAYER_KINDS = ("conv", "batchnorm", "relu", "avgpool", "residual-block", "linear")
REFERENCE_SPECS = ("resnet18", "resnet34", "tinyres8", "tinyres16")


class SpecError(ValueError):
    """A spec failed validation or shape inference."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    channels_out: Optional[int] = None
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 0
    shortcut: Optional[str] = None
    bias: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if isinstance(self.kernel, int):
            object.__setattr__(self, "kernel", (self.kernel, self.kernel))
        else:
            object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        if self.kind in ("conv", "residual-block", "linear"):
            if self.channels_out is None or self.channels_out < 1:
                raise SpecError(f"{self.kind} layer needs a positive channels_out")
        if self.kind == "residual-block" and self.shortcut not in ("identity", "projection"):
            raise SpecError(f"residual-block shortcut must be identity or projection, got {self.shortcut!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        kind = d.pop("kind")
        if kind == "residual-block":
            d.setdefault("shortcut", "identity")
            d.setdefault("padding", 1)
        if "kernel" in d:
            k = d["kernel"]
            d["kernel"] = (k, k) if isinstance(k, int) else tuple(k)
        try:
            return cls(kind=kind, **d)
        except TypeError as exc:
            raise SpecError(f"bad keys for {kind} layer: {exc}") from None

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.kind in ("conv", "residual-block", "linear"):
            d["channels_out"] = self.channels_out
        if self.kind in ("conv", "avgpool"):
            d["kernel"] = list(self.kernel)
        if self.kind in ("conv", "avgpool", "residual-block"):
            d["stride"] = self.stride
        if self.kind in ("conv", "avgpool"):
            d["padding"] = self.padding
        if self.kind == "residual-block":
            d["shortcut"] = self.shortcut
        if self.kind in ("conv", "linear") and self.bias:
            d["bias"] = True
        return d


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, int, int]
    blocks: tuple[tuple[LayerSpec, ...], ...]
    classes: int
    name: str = "network"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "blocks", tuple(tuple(b) for b in self.blocks))

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        try:
            blocks = [[LayerSpec.from_dict(layer) for layer in block] for block in d["blocks"]]
            return cls(input_shape=tuple(d["input_shape"]), blocks=blocks,
                       classes=int(d["classes"]), name=d.get("name", "network"))
        except KeyError as exc:
            raise SpecError(f"network spec missing key {exc}") from None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "classes": self.classes,
            "blocks": [[layer.to_dict() for layer in block] for block in self.blocks],
        }

    def to_json(self) -> str:
        # one layer per line keeps the shipped files diffable
        d = self.to_dict()
        blocks = ",\n".join(
            "  [\n" + ",\n".join("   " + json.dumps(layer) for layer in block) + "\n  ]"
            for block in d["blocks"]
        )
        return (
            f'{{\n "name": {json.dumps(d["name"])},\n "input_shape": {json.dumps(d["input_shape"])},\n'
            f' "classes": {d["classes"]},\n "blocks": [\n{blocks}\n ]\n}}'
        )

    def with_widths(self, widths: dict[tuple[int, int], int], name: Optional[str] = None) -> "NetworkSpec":
        """Copy with ``channels_out`` replaced at the given (block, layer) positions."""
        blocks = []
        for bi, block in enumerate(self.blocks):
            blocks.append([
                replace(layer, channels_out=widths[(bi, li)]) if (bi, li) in widths else layer
                for li, layer in enumerate(block)
            ])
        return NetworkSpec(self.input_shape, blocks, self.classes, name or self.name)


def load_spec(source: Union[str, Path, dict]) -> NetworkSpec:
    """Load a spec from a dict, a JSON file path, or a reference name."""
    if isinstance(source, dict):
        return NetworkSpec.from_dict(source)
    if isinstance(source, str) and source in REFERENCE_SPECS:
        text = resources.files("rkd.specs").joinpath(f"{source}.json").read_text()
        return NetworkSpec.from_dict(json.loads(text))
    return NetworkSpec.from_dict(json.loads(Path(source).read_text()))


# ---------------------------------------------------------------------------
# shape inference


@dataclass
class LayerInfo:
    """One weighted or unweighted primitive after expanding residual blocks."""

    id: str
    kind: str
    in_shape: tuple[int, int, int]
    out_shape: tuple[int, int, int]
    cin: int = 0
    cout: int = 0
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0
    position: Optional[tuple[int, int]] = None


@dataclass
class ShapeReport:
    layers: list[LayerInfo] = field(default_factory=list)
    taps: list[tuple[int, int, int]] = field(default_factory=list)
    block_inputs: list[tuple[int, int, int]] = field(default_factory=list)
    classifier_in: int = 0


def _conv_out(lid, shape, cout, kernel, stride, padding):
    c, h, w = shape
    try:
        ho = conv_output_size(h, kernel[0], stride, padding)
        wo = conv_output_size(w, kernel[1], stride, padding)
    except ValueError as exc:
        raise SpecError(f"layer {lid}: {exc} for input {shape}") from None
    if ho < 1 or wo < 1:
        raise SpecError(f"layer {lid}: empty output for input {shape}")
    return (cout, ho, wo)


def infer_shapes(spec: NetworkSpec, block_in_channels: Optional[Sequence[Optional[int]]] = None) -> ShapeReport:
    """Walk the spec and record every primitive's input and output shape.

    ``block_in_channels`` optionally overrides the channel count fed into each
    block (used when blocks consume features in another model's width).
    Raises :class:`SpecError` naming the first layer that cannot be placed.
    """
    if spec.num_blocks < 1:
        raise SpecError("a network needs at least one block")
    if spec.classes < 1:
        raise SpecError("classes must be positive")
    rep = ShapeReport()
    shape = spec.input_shape
    for bi, block in enumerate(spec.blocks):
        if block_in_channels is not None and block_in_channels[bi] is not None:
            shape = (int(block_in_channels[bi]),) + shape[1:]
        rep.block_inputs.append(shape)
        if not block:
            raise SpecError(f"block {bi} is empty")
        for li, layer in enumerate(block):
            lid = f"b{bi}.l{li}"
            if layer.kind == "conv":
                out = _conv_out(lid, shape, layer.channels_out, layer.kernel, layer.stride, layer.padding)
                rep.layers.append(LayerInfo(lid, "conv", shape, out, shape[0], out[0], layer.kernel,
                                            layer.stride, layer.padding, (bi, li)))
            elif layer.kind in ("batchnorm", "relu"):
                out = shape
                rep.layers.append(LayerInfo(lid, layer.kind, shape, out, position=(bi, li)))
            elif layer.kind == "avgpool":
                out = _conv_out(lid, shape, shape[0], layer.kernel, layer.stride, layer.padding)
                rep.layers.append(LayerInfo(lid, "avgpool", shape, out, kernel=layer.kernel,
                                            stride=layer.stride, padding=layer.padding, position=(bi, li)))
            elif layer.kind == "residual-block":
                cout = layer.channels_out
                changes = shape[0] != cout or layer.stride != 1
                if changes and layer.shortcut != "projection":
                    raise SpecError(
                        f"layer {lid}: identity shortcut cannot map {shape[0]} channels/stride"
                        f" {layer.stride} to {cout} channels; use a projection shortcut"
                    )
                k = layer.kernel
                pad = layer.padding
                mid = _conv_out(lid + ".conv1", shape, cout, k, layer.stride, pad)
                out = _conv_out(lid + ".conv2", mid, cout, k, 1, pad)
                rep.layers.append(LayerInfo(lid + ".conv1", "conv", shape, mid, shape[0], cout, k,
                                            layer.stride, pad, (bi, li)))
                rep.layers.append(LayerInfo(lid + ".conv2", "conv", mid, out, cout, cout, k, 1, pad, (bi, li)))
                if layer.shortcut == "projection":
                    sc = _conv_out(lid + ".shortcut", shape, cout, (1, 1), layer.stride, 0)
                    if sc != out:
                        raise SpecError(f"layer {lid}: shortcut shape {sc} does not match body {out}")
                    rep.layers.append(LayerInfo(lid + ".shortcut", "conv", shape, sc, shape[0], cout,
                                                (1, 1), layer.stride, 0, (bi, li)))
            else:
                raise SpecError(f"layer {lid}: {layer.kind} layers are only allowed as the classifier")
            shape = out
        rep.taps.append(shape)
    rep.classifier_in = shape[0]
    rep.layers.append(LayerInfo("classifier", "linear", (shape[0], 1, 1), (spec.classes, 1, 1),
                                shape[0], spec.classes))
    return rep


# ---------------------------------------------------------------------------
# reference topologies


def _resnet(name: str, stages: Sequence[int], widths: Sequence[int], input_shape, classes: int,
            stem: str) -> NetworkSpec:
    blocks = []
    for si, (count, width) in enumerate(zip(stages, widths)):
        layers: list[LayerSpec] = []
        if si == 0:
            if stem == "imagenet":
                layers += [LayerSpec("conv", width, (7, 7), 2, 3), LayerSpec("batchnorm"),
                           LayerSpec("relu"), LayerSpec("avgpool", kernel=(3, 3), stride=2, padding=1)]
            else:
                layers += [LayerSpec("conv", width, (3, 3), 1, 1), LayerSpec("batchnorm"), LayerSpec("relu")]
        for bi in range(count):
            stride = 2 if (si > 0 and bi == 0) else 1
            shortcut = "projection" if (si > 0 and bi == 0) else "identity"
            layers.append(LayerSpec("residual-block", width, (3, 3), stride, 1, shortcut))
        blocks.append(layers)
    return NetworkSpec(tuple(input_shape), blocks, classes, name)


def reference_spec(name: str) -> NetworkSpec:
    """Build one of the shipped topologies directly (mirrors the JSON files)."""
    if name == "resnet18":
        return _resnet(name, (2, 2, 2, 2), (64, 128, 256, 512), (3, 224, 224), 1000, "imagenet")
    if name == "resnet34":
        return _resnet(name, (3, 4, 6, 3), (64, 128, 256, 512), (3, 224, 224), 1000, "imagenet")
    if name == "tinyres8":
        return _resnet(name, (1, 1, 1, 1), (16, 32, 64, 128), (1, 32, 32), 10, "cifar")
    if name == "tinyres16":
        return _resnet(name, (2, 2, 2, 2), (16, 32, 64, 128), (1, 32, 32), 10, "cifar")
    raise KeyError(f"unknown reference spec {name!r}; choose from {REFERENCE_SPECS}")
