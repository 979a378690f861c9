"""Layers, the residual block and ResNet builders.

Parameter names are dotted paths from the model root, e.g.
``stage3.block2.conv1.weight``. Batch-norm running statistics are buffers and
share the same naming scheme (``...bn1.running_mean``).
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .errors import ContractError
from .tensor import Tensor, get_default_dtype

STAGE_STRIDES = (1, 2, 2, 2)


class Parameter(Tensor):
    """A trainable tensor owned by a module."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def kaiming_uniform(shape: tuple, fan_in: int, rng: np.random.Generator, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _rng(rng) -> np.random.Generator:
    if rng is None:
        return np.random.default_rng()
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


class Module:
    kind = "module"

    def __init__(self):
        object.__setattr__(self, "_parameters", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        params, modules = self.__dict__.get("_parameters"), self.__dict__.get("_modules")
        if params is None:
            raise AttributeError("Module.__init__() must run before assigning attributes")
        params.pop(name, None)
        modules.pop(name, None)
        if isinstance(value, Parameter):
            params[name] = value
        elif isinstance(value, Module):
            modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        """Overwrite a buffer's contents in place (keeps references valid)."""
        self._buffers[name][...] = value

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    # traversal

    def named_children(self) -> Iterator[Tuple[str, "Module"]]:
        return iter(self._modules.items())

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._modules.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def modules(self) -> Iterator["Module"]:
        for _, m in self.named_modules():
            yield m

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for path, m in self.named_modules(prefix):
            for name, p in m._parameters.items():
                yield (f"{path}.{name}" if path else name), p

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for path, m in self.named_modules(prefix):
            for name, b in m._buffers.items():
                yield (f"{path}.{name}" if path else name), b

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        """Parameters followed by buffers, as copies."""
        state = OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())
        state.update((n, b.copy()) for n, b in self.named_buffers())
        return state

    def state_tensors(self) -> "OrderedDict[str, np.ndarray]":
        """Like ``state_dict`` but returns the live arrays."""
        state = OrderedDict((n, p.data) for n, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def assign_state(self, state: Dict[str, np.ndarray]) -> None:
        """Write arrays into matching parameters/buffers. Callers validate first."""
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for name, value in state.items():
            if name in params:
                p = params[name]
                p.data = np.array(value, dtype=p.dtype).reshape(p.shape)
            else:
                buf = buffers[name]
                buf[...] = value

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.size for p in self.parameters() if p.requires_grad or not trainable_only)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def extra_repr(self) -> str:
        return ""

    def __repr__(self) -> str:
        lines = [f"{type(self).__name__}({self.extra_repr()}"]
        for name, child in self._modules.items():
            body = repr(child).replace("\n", "\n  ")
            lines.append(f"  ({name}): {body}")
        return "\n".join(lines) + ")" if len(lines) > 1 else lines[0] + ")"


def set_mode(model: Module, mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")


def parameters(model: Module) -> List[Tuple[str, Parameter]]:
    return list(model.named_parameters())


class Conv2d(Module):
    kind = "conv2d"

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
        rng=None,
        dtype=None,
    ):
        super().__init__()
        dtype = dtype or get_default_dtype()
        rng = _rng(rng)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = Parameter(kaiming_uniform(shape, fan_in, rng, dtype), dtype=dtype)
        if bias:
            bound = 1.0 / np.sqrt(fan_in)
            self.bias = Parameter(rng.uniform(-bound, bound, out_channels), dtype=dtype)
        else:
            self.bias = None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def extra_repr(self):
        return (
            f"{self.in_channels}, {self.out_channels}, kernel_size={self.kernel_size}, "
            f"stride={self.stride}, padding={self.padding}, bias={self.bias is not None}"
        )


class BatchNorm2d(Module):
    """Batch normalisation over NCHW input.

    ``frozen`` pins the layer to its running statistics even in training mode;
    :func:`leafnet.train.freeze_backbone` sets it so that a frozen backbone is
    left completely untouched.
    """

    kind = "batchnorm2d"

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1, dtype=None):
        super().__init__()
        dtype = dtype or get_default_dtype()
        self.num_features, self.eps, self.momentum = num_features, eps, momentum
        self.frozen = False
        self.weight = Parameter(np.ones(num_features), dtype=dtype)
        self.bias = Parameter(np.zeros(num_features), dtype=dtype)
        self.register_buffer("running_mean", np.zeros(num_features, dtype=dtype))
        self.register_buffer("running_var", np.ones(num_features, dtype=dtype))

    def forward(self, x):
        return F.batch_norm2d(
            x,
            self.weight,
            self.bias,
            self.running_mean,
            self.running_var,
            training=self.training and not self.frozen,
            momentum=self.momentum,
            eps=self.eps,
        )

    def extra_repr(self):
        return f"{self.num_features}, eps={self.eps}, momentum={self.momentum}"


class ReLU(Module):
    kind = "relu"

    def forward(self, x):
        return F.relu(x)


class MaxPool2d(Module):
    kind = "maxpool2d"

    def __init__(self, kernel_size: int, stride: Optional[int] = None, padding: int = 0):
        super().__init__()
        self.kernel_size = kernel_size
        self.stride = stride if stride is not None else kernel_size
        self.padding = padding

    def forward(self, x):
        return F.max_pool2d(x, self.kernel_size, self.stride, self.padding)

    def extra_repr(self):
        return f"kernel_size={self.kernel_size}, stride={self.stride}, padding={self.padding}"


class AdaptiveAvgPool2d(Module):
    """Global average pooling to a 1x1 map."""

    kind = "adaptiveavgpool2d"

    def forward(self, x):
        return F.adaptive_avg_pool2d(x)


class Flatten(Module):
    kind = "flatten"

    def forward(self, x):
        return x.reshape(x.shape[0], -1)


class Linear(Module):
    kind = "linear"

    def __init__(self, in_features: int, out_features: int, bias: bool = True, rng=None, dtype=None):
        super().__init__()
        dtype = dtype or get_default_dtype()
        rng = _rng(rng)
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(
            kaiming_uniform((out_features, in_features), in_features, rng, dtype), dtype=dtype
        )
        if bias:
            bound = 1.0 / np.sqrt(in_features)
            self.bias = Parameter(rng.uniform(-bound, bound, out_features), dtype=dtype)
        else:
            self.bias = None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)

    def extra_repr(self):
        return f"{self.in_features}, {self.out_features}"


class Softmax(Module):
    kind = "softmax"

    def forward(self, x):
        return F.softmax(x, axis=1)


class Sequential(Module):
    kind = "sequential"

    def __init__(self, *layers):
        super().__init__()
        if len(layers) == 1 and isinstance(layers[0], (dict, OrderedDict)):
            items = list(layers[0].items())
        else:
            items = [(str(i), layer) for i, layer in enumerate(layers)]
        for name, layer in items:
            setattr(self, name, layer)

    def forward(self, x):
        for layer in self._modules.values():
            x = layer(x)
        return x

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, idx):
        return list(self._modules.values())[idx]


class BasicBlock(Module):
    """Two 3x3 conv/batch-norm pairs plus a shortcut: ``relu(F(x) + shortcut(x))``.

    The shortcut is the identity unless the stride or channel count changes, in
    which case it is a 1x1 strided conv followed by batch norm.
    """

    kind = "basicblock"

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1, rng=None, dtype=None):
        super().__init__()
        rng = _rng(rng)
        self.in_channels, self.out_channels, self.stride = in_channels, out_channels, stride
        self.conv1 = Conv2d(in_channels, out_channels, 3, stride, 1, bias=False, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(out_channels, dtype=dtype)
        self.relu = ReLU()
        self.conv2 = Conv2d(out_channels, out_channels, 3, 1, 1, bias=False, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(out_channels, dtype=dtype)
        if stride != 1 or in_channels != out_channels:
            self.downsample = Sequential(
                OrderedDict(
                    conv=Conv2d(in_channels, out_channels, 1, stride, 0, bias=False, rng=rng, dtype=dtype),
                    bn=BatchNorm2d(out_channels, dtype=dtype),
                )
            )
        else:
            self.downsample = None

    def residual(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        return self.bn2(self.conv2(out))

    def shortcut(self, x):
        return x if self.downsample is None else self.downsample(x)

    def forward(self, x):
        return F.relu(self.residual(x) + self.shortcut(x))

    def extra_repr(self):
        return f"{self.in_channels}, {self.out_channels}, stride={self.stride}"


class Stem(Module):
    """Input stem: conv, batch norm, ReLU and (for the ImageNet layout) a 3x3/2 max pool."""

    kind = "sequential"

    def __init__(self, in_channels: int, width: int, layout: str, rng=None, dtype=None):
        super().__init__()
        self.layout = layout
        if layout == "imagenet":
            self.conv = Conv2d(in_channels, width, 7, 2, 3, bias=False, rng=rng, dtype=dtype)
        elif layout == "compact":
            self.conv = Conv2d(in_channels, width, 3, 1, 1, bias=False, rng=rng, dtype=dtype)
        else:
            raise ContractError(f"unknown stem layout {layout!r}")
        self.bn = BatchNorm2d(width, dtype=dtype)
        self.relu = ReLU()
        self.pool = MaxPool2d(3, 2, 1) if layout == "imagenet" else None

    def forward(self, x):
        x = self.relu(self.bn(self.conv(x)))
        return self.pool(x) if self.pool is not None else x


class ResNet(Module):
    """Stem, four stages of :class:`BasicBlock`, global average pool and a linear head.

    ``forward`` returns logits. Softmax is applied only by :meth:`predict_proba`.
    """

    kind = "resnet"

    def __init__(
        self,
        blocks: Sequence[int],
        widths: Sequence[int],
        num_classes: int,
        stem: str = "imagenet",
        in_channels: int = 3,
        rng=None,
        dtype=None,
    ):
        super().__init__()
        if num_classes < 2:
            raise ContractError(f"num_classes must be >= 2, got {num_classes}")
        if len(blocks) != len(widths):
            raise ContractError("blocks and widths must have equal length")
        rng = _rng(rng)
        self.blocks, self.widths = tuple(blocks), tuple(widths)
        self.stem_layout, self.in_channels = stem, in_channels
        self.stem = Stem(in_channels, widths[0], stem, rng=rng, dtype=dtype)
        prev = widths[0]
        for s, (count, width) in enumerate(zip(blocks, widths), start=1):
            stride = STAGE_STRIDES[s - 1] if s <= len(STAGE_STRIDES) else 2
            layers = OrderedDict()
            for b in range(1, count + 1):
                layers[f"block{b}"] = BasicBlock(prev, width, stride if b == 1 else 1, rng=rng, dtype=dtype)
                prev = width
            setattr(self, f"stage{s}", Sequential(layers))
        self.pool = AdaptiveAvgPool2d()
        self.flatten = Flatten()
        self.head = Linear(prev, num_classes, rng=rng, dtype=dtype)
        # provenance of the current weights; set by checkpoint load/import
        self.weights_source: Optional[str] = None

    @property
    def num_classes(self) -> int:
        return self.head.out_features

    @property
    def stages(self) -> List[Sequential]:
        return [getattr(self, f"stage{s}") for s in range(1, len(self.blocks) + 1)]

    def features(self, x):
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
        return self.flatten(self.pool(x))

    def stage_outputs(self, x) -> "OrderedDict[str, Tensor]":
        """Activations after the stem and after each stage, keyed by module name."""
        outs = OrderedDict()
        x = self.stem(x)
        outs["stem"] = x
        for s, stage in enumerate(self.stages, start=1):
            x = stage(x)
            outs[f"stage{s}"] = x
        return outs

    def forward(self, x):
        return self.head(self.features(x))

    def predict_proba(self, x) -> Tensor:
        return F.softmax(self.forward(x), axis=1)

    def extra_repr(self):
        return f"blocks={list(self.blocks)}, widths={list(self.widths)}, num_classes={self.num_classes}"


RESNET34_BLOCKS = (3, 4, 6, 3)
RESNET34_WIDTHS = (64, 128, 256, 512)


def build_resnet34(num_classes: int = 4, seed=0, dtype=None) -> ResNet:
    """Standard ResNet-34: 7x7/2 stem + 3x3/2 max pool, stages [3, 4, 6, 3] x [64, 128, 256, 512]."""
    return ResNet(RESNET34_BLOCKS, RESNET34_WIDTHS, num_classes, stem="imagenet", rng=seed, dtype=dtype)


def build_toy_resnet(
    num_classes: int = 3,
    seed=0,
    widths: Sequence[int] = (8, 16, 32, 64),
    blocks: Sequence[int] = (1, 1, 1, 1),
    dtype=None,
) -> ResNet:
    """Reduced-depth variant for small (e.g. 32x32) inputs: 3x3/1 stem, no max pool."""
    return ResNet(blocks, widths, num_classes, stem="compact", rng=seed, dtype=dtype)


def basic_blocks(model: Module) -> List[BasicBlock]:
    return [m for m in model.modules() if isinstance(m, BasicBlock)]
