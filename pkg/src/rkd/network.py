"""Residual CNNs built from a :class:`NetworkSpec`, plus 1x1 channel adapters."""

from __future__ import annotations

import hashlib
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .netspec import LayerSpec, NetworkSpec, SpecError, infer_shapes
from .tensor import Tensor

MODES = ("train", "eval")


def _kaiming(rng: np.random.Generator, shape, fan_in: int, gain: float, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(gain / fan_in)).astype(dtype)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        return iter(())

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        return iter(())

    def forward(self, x: Tensor, training: bool) -> Tensor:
        raise NotImplementedError


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, stride, padding, bias, rng, dtype, gain=2.0):
        kh, kw = kernel
        self.stride, self.padding = stride, padding
        self.weight = T.parameter(_kaiming(rng, (cout, cin, kh, kw), cin * kh * kw, gain, dtype))
        self.bias = T.parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def named_parameters(self, prefix=""):
        yield prefix + "weight", self.weight
        if self.bias is not None:
            yield prefix + "bias", self.bias

    def forward(self, x, training):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, dtype, momentum=0.1, eps=1e-5):
        self.gamma = T.parameter(np.ones(channels, dtype=dtype))
        self.beta = T.parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum, self.eps = momentum, eps

    def named_parameters(self, prefix=""):
        yield prefix + "gamma", self.gamma
        yield prefix + "beta", self.beta

    def named_buffers(self, prefix=""):
        yield prefix + "running_mean", self.running_mean
        yield prefix + "running_var", self.running_var

    def forward(self, x, training):
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training, self.momentum, self.eps)


class Identity(Module):
    def forward(self, x, training):
        return x


class ReLU(Module):
    def forward(self, x, training):
        return T.relu(x)


class AvgPool(Module):
    def __init__(self, kernel, stride, padding):
        self.kernel, self.stride, self.padding = kernel[0], stride, padding

    def forward(self, x, training):
        return T.avg_pool2d(x, self.kernel, self.stride, self.padding)


class ResidualBlock(Module):
    """Basic block: conv-bn-relu-conv-bn plus shortcut, then relu."""

    def __init__(self, cin, cout, kernel, stride, padding, shortcut, rng, dtype, batchnorm):
        norm = (lambda c: BatchNorm2d(c, dtype)) if batchnorm else (lambda c: Identity())
        self.conv1 = Conv2d(cin, cout, kernel, stride, padding, False, rng, dtype)
        self.bn1 = norm(cout)
        self.conv2 = Conv2d(cout, cout, kernel, 1, padding, False, rng, dtype)
        self.bn2 = norm(cout)
        if shortcut == "projection":
            self.proj: Optional[Conv2d] = Conv2d(cin, cout, (1, 1), stride, 0, False, rng, dtype, gain=1.0)
            self.proj_bn = norm(cout)
        else:
            self.proj = None

    def _parts(self):
        parts = [("conv1.", self.conv1), ("bn1.", self.bn1), ("conv2.", self.conv2), ("bn2.", self.bn2)]
        if self.proj is not None:
            parts += [("shortcut.", self.proj), ("shortcut_bn.", self.proj_bn)]
        return parts

    def named_parameters(self, prefix=""):
        for name, part in self._parts():
            yield from part.named_parameters(prefix + name)

    def named_buffers(self, prefix=""):
        for name, part in self._parts():
            yield from part.named_buffers(prefix + name)

    def forward(self, x, training):
        h = T.relu(self.bn1.forward(self.conv1.forward(x, training), training))
        h = self.bn2.forward(self.conv2.forward(h, training), training)
        sc = x if self.proj is None else self.proj_bn.forward(self.proj.forward(x, training), training)
        return T.relu(T.add(h, sc))


class Linear(Module):
    def __init__(self, fin, fout, rng, dtype):
        self.weight = T.parameter(_kaiming(rng, (fout, fin), fin, 1.0, dtype))
        self.bias = T.parameter(np.zeros(fout, dtype=dtype))

    def named_parameters(self, prefix=""):
        yield prefix + "weight", self.weight
        yield prefix + "bias", self.bias

    def forward(self, x, training):
        return T.linear(x, self.weight, self.bias)


def _build_layer(layer: LayerSpec, cin: int, rng, dtype, batchnorm: bool) -> Module:
    if layer.kind == "conv":
        return Conv2d(cin, layer.channels_out, layer.kernel, layer.stride, layer.padding, layer.bias, rng, dtype)
    if layer.kind == "batchnorm":
        return BatchNorm2d(cin, dtype) if batchnorm else Identity()
    if layer.kind == "relu":
        return ReLU()
    if layer.kind == "avgpool":
        return AvgPool(layer.kernel, layer.stride, layer.padding)
    if layer.kind == "residual-block":
        return ResidualBlock(cin, layer.channels_out, layer.kernel, layer.stride, layer.padding,
                             layer.shortcut, rng, dtype, batchnorm)
    raise SpecError(f"cannot build a {layer.kind} layer inside a block")


class Network:
    """A built network: K blocks, each emitting one feature tap, and a classifier."""

    def __init__(self, spec: NetworkSpec, seed: int = 0, dtype=None, batchnorm: bool = True,
                 block_in_channels: Optional[Sequence[Optional[int]]] = None):
        self.spec = spec
        self.dtype = np.dtype(dtype) if dtype is not None else T.default_dtype()
        self.batchnorm = batchnorm
        self.block_in_channels = list(block_in_channels) if block_in_channels is not None else None
        self.shapes = infer_shapes(spec, self.block_in_channels)
        rng = np.random.default_rng(seed)
        self.blocks: list[list[Module]] = []
        for bi, block in enumerate(spec.blocks):
            cin = self.shapes.block_inputs[bi][0]
            mods = []
            for layer in block:
                mods.append(_build_layer(layer, cin, rng, self.dtype, batchnorm))
                if layer.channels_out is not None:
                    cin = layer.channels_out
            self.blocks.append(mods)
        self.classifier = Linear(self.shapes.classifier_in, spec.classes, rng, self.dtype)

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    @property
    def tap_shapes(self) -> list[tuple[int, int, int]]:
        return list(self.shapes.taps)

    @property
    def tap_channels(self) -> list[int]:
        return [s[0] for s in self.shapes.taps]

    def block_parameters(self, index: int) -> list[tuple[str, Tensor]]:
        out = []
        for li, mod in enumerate(self.blocks[index]):
            out.extend(mod.named_parameters(f"b{index}.l{li}."))
        return out

    def named_parameters(self, include_classifier: bool = True) -> list[tuple[str, Tensor]]:
        out = []
        for bi in range(self.num_blocks):
            out.extend(self.block_parameters(bi))
        if include_classifier:
            out.extend(self.classifier.named_parameters("classifier."))
        return out

    def parameters(self, include_classifier: bool = True) -> list[Tensor]:
        return [p for _, p in self.named_parameters(include_classifier)]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for bi, block in enumerate(self.blocks):
            for li, mod in enumerate(block):
                out.extend(mod.named_buffers(f"b{bi}.l{li}."))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters and normalization buffers, in a stable order."""
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"state is missing tensors: {sorted(missing)[:5]}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ValueError(f"tensor {name}: shape {src.shape} != expected {arr.shape}")
            arr[...] = src

    def _as_tensor(self, batch) -> Tensor:
        if isinstance(batch, Tensor):
            return batch if batch.dtype == self.dtype else Tensor(batch.data.astype(self.dtype))
        return Tensor(np.asarray(batch, dtype=self.dtype))

    def forward_block(self, index: int, x: Tensor, mode: str = "eval") -> Tensor:
        training = _training(mode)
        expected = self.shapes.block_inputs[index]
        if tuple(x.shape[1:]) != tuple(expected):
            raise ValueError(f"block {index} expects input [N, {', '.join(map(str, expected))}], got {x.shape}")
        for mod in self.blocks[index]:
            x = mod.forward(x, training)
        return x

    def features(self, batch, mode: str = "eval", stop: Optional[int] = None) -> list[Tensor]:
        """Taps f_1..f_stop (all K by default)."""
        x = self._as_tensor(batch)
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.shapes.block_inputs[0]):
            raise ValueError(f"batch shape {x.shape} does not match network input {self.spec.input_shape}")
        taps = []
        for bi in range(self.num_blocks if stop is None else stop):
            x = self.forward_block(bi, x, mode)
            taps.append(x)
        return taps

    def classify(self, feature: Tensor) -> Tensor:
        return self.classifier.forward(T.global_avg_pool(feature), False)

    def forward_with_taps(self, batch, mode: str = "eval") -> tuple[list[Tensor], Tensor]:
        taps = self.features(batch, mode)
        return taps, self.classify(taps[-1])


def _training(mode: str) -> bool:
    if mode not in MODES:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


def build_network(spec: NetworkSpec, seed: int = 0, dtype=None, batchnorm: bool = True,
                  block_in_channels: Optional[Sequence[Optional[int]]] = None) -> Network:
    """Allocate and seed-initialize every parameter of ``spec``.

    Conv and linear weights use fan-in (Kaiming) scaling; biases start at zero.
    """
    return Network(spec, seed, dtype, batchnorm, block_in_channels)


def forward_with_taps(net: Network, batch, mode: str = "eval") -> tuple[list[Tensor], Tensor]:
    return net.forward_with_taps(batch, mode)


# ---------------------------------------------------------------------------
# adapters


class Adapter:
    """Per-level 1x1 convolutions into the teacher's channel widths.

    Levels whose widths already agree get no convolution (identity pass-through).
    Levels are numbered 1..K. With ``zero_init`` the convolutions start at
    zero, so the adapted output is exactly zero until training moves it.
    """

    def __init__(self, in_channels: Sequence[int], out_channels: Sequence[int], seed: int = 0,
                 dtype=None, identity_when_equal: bool = True, zero_init: bool = False):
        if len(in_channels) != len(out_channels):
            raise ValueError("adapter needs one input and one output width per level")
        dtype = np.dtype(dtype) if dtype is not None else T.default_dtype()
        rng = np.random.default_rng(seed)
        self.in_channels = list(in_channels)
        self.out_channels = list(out_channels)
        self.convs: list[Optional[Conv2d]] = []
        for cin, cout in zip(in_channels, out_channels):
            if identity_when_equal and cin == cout:
                self.convs.append(None)
            else:
                conv = Conv2d(cin, cout, (1, 1), 1, 0, True, rng, dtype, gain=1.0)
                if zero_init:
                    conv.weight.data[...] = 0
                self.convs.append(conv)

    @classmethod
    def between(cls, model: Network, teacher: Network, seed: int = 0, zero_init: bool = False) -> "Adapter":
        return cls(model.tap_channels, teacher.tap_channels, seed, model.dtype, zero_init=zero_init)

    @property
    def num_levels(self) -> int:
        return len(self.convs)

    def level_parameters(self, level: int) -> list[tuple[str, Tensor]]:
        self._check(level)
        conv = self.convs[level - 1]
        return [] if conv is None else list(conv.named_parameters(f"adapter{level}."))

    def named_parameters(self, levels: Optional[Sequence[int]] = None) -> list[tuple[str, Tensor]]:
        out = []
        for lv in levels if levels is not None else range(1, self.num_levels + 1):
            out.extend(self.level_parameters(lv))
        return out

    def parameters(self, levels: Optional[Sequence[int]] = None) -> list[Tensor]:
        return [p for _, p in self.named_parameters(levels)]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            src = np.asarray(state[name])
            if src.shape != p.shape:
                raise ValueError(f"tensor {name}: shape {src.shape} != expected {p.shape}")
            p.data[...] = src

    def _check(self, level: int) -> None:
        if not 1 <= level <= self.num_levels:
            raise IndexError(f"adapter level {level} out of range 1..{self.num_levels}")

    def __call__(self, tap: Tensor, level: int) -> Tensor:
        self._check(level)
        if tap.ndim != 4 or tap.shape[1] != self.in_channels[level - 1]:
            raise ValueError(
                f"level {level} adapter expects {self.in_channels[level - 1]} channels, got tap {tap.shape}"
            )
        conv = self.convs[level - 1]
        return tap if conv is None else conv.forward(tap, False)


def adapt_feature(tap: Tensor, adapter: Adapter, level: int) -> Tensor:
    """Map ``tap`` into the teacher's width at ``level`` (1-based)."""
    return adapter(tap, level)


def identity_adapter(channels: Sequence[int], dtype=None) -> Adapter:
    return Adapter(channels, channels, dtype=dtype)


def checksum(params: Union[Network, Adapter, Sequence[Tensor], dict]) -> str:
    """SHA-256 over raw parameter bytes, for freeze assertions."""
    if isinstance(params, (Network, Adapter)):
        arrays = list(params.state_dict().values())
    elif isinstance(params, dict):
        arrays = list(params.values())
    else:
        arrays = [p.data for p in params]
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()
