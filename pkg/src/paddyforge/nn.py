"""Layers with explicit forward/backward passes, He initialisation, network builders.

The kernel functions (``conv2d_forward`` and friends) are pure numpy: they
preserve the dtype of their inputs, which lets the gradient tests run them in
float64. Training always goes through :class:`Network`, which keeps float32
master weights in :class:`Parameter` objects.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError
from .loss import softmax
from .tensor import Shape2D, round_half


# ---------------------------------------------------------------------------
# initialisation


def kaiming_init(shape, fan_in, rng):
    """I.i.d. ``Normal(0, 2 / fan_in)`` samples as float32."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(tuple(shape)) * std).astype(np.float32)


# ---------------------------------------------------------------------------
# kernels


@dataclass
class ConvContext:
    cols: np.ndarray
    input_shape: tuple
    kernel: np.ndarray
    stride: int
    padding: int
    out_hw: tuple


def conv_output_extent(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def conv2d_forward(x, kernel, bias, stride=1, padding=0):
    """Zero-padded 2-D cross-correlation over an NCHW batch via im2col."""
    n, c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"kernel expects {ck} input channels, input has {c}")
    if stride < 1 or padding < 0:
        raise ShapeError("stride must be >= 1 and padding >= 0")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = conv_output_extent(h, kh, stride, padding)
    wo = conv_output_extent(w, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ kernel.reshape(o, -1).T + bias
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    return out, ConvContext(cols, x.shape, kernel, stride, padding, (ho, wo))


def conv2d_backward(ctx: ConvContext, grad_out, need_input_grad=True):
    """Return ``(grad_input, grad_kernel, grad_bias)``; grad_input is None if not requested."""
    n, c, h, w = ctx.input_shape
    o, _, kh, kw = ctx.kernel.shape
    ho, wo = ctx.out_hw
    if grad_out.shape != (n, o, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != output shape {(n, o, ho, wo)}")
    g2 = grad_out.transpose(0, 2, 3, 1).reshape(-1, o)
    grad_kernel = (g2.T @ ctx.cols).reshape(ctx.kernel.shape)
    grad_bias = g2.sum(axis=0)
    if not need_input_grad:
        return None, grad_kernel, grad_bias
    s, p = ctx.stride, ctx.padding
    gcols = (g2 @ ctx.kernel.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    grad_input = dxp[:, :, p:p + h, p:p + w] if p else dxp
    return np.ascontiguousarray(grad_input), grad_kernel, grad_bias


@dataclass
class PoolContext:
    argmax: np.ndarray
    input_shape: tuple
    window: tuple
    stride: int


def maxpool_forward(x, window=(2, 2), stride=None):
    if isinstance(window, int):
        window = (window, window)
    kh, kw = window
    stride = stride or kh
    n, c, h, w = x.shape
    if kh > h or kw > w:
        raise ShapeError(f"pool window {kh}x{kw} larger than input {h}x{w}")
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, kh * kw)
    # np.argmax returns the first occurrence, i.e. row-major tie-breaking
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, PoolContext(arg, x.shape, (kh, kw), stride)


def maxpool_backward(ctx: PoolContext, grad_out):
    if grad_out.shape != ctx.argmax.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != pooled shape {ctx.argmax.shape}")
    kh, kw = ctx.window
    s = ctx.stride
    ho, wo = grad_out.shape[2:]
    dx = np.zeros(ctx.input_shape, dtype=grad_out.dtype)
    for idx in range(kh * kw):
        i, j = divmod(idx, kw)
        dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += np.where(ctx.argmax == idx, grad_out, 0)
    return dx


def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def relu_backward(mask, grad_out):
    if grad_out.shape != mask.shape:
        raise ShapeError("grad_out shape does not match relu input")
    return np.where(mask, grad_out, 0).astype(grad_out.dtype, copy=False)


def linear_forward(x, weight, bias):
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear expects [batch, {weight.shape[1]}] input, got {list(x.shape)}")
    return x @ weight.T + bias, (x, weight)


def linear_backward(ctx, grad_out, need_input_grad=True):
    x, weight = ctx
    if grad_out.shape != (x.shape[0], weight.shape[0]):
        raise ShapeError("grad_out shape does not match linear output")
    grad_input = grad_out @ weight if need_input_grad else None
    return grad_input, grad_out.T @ x, grad_out.sum(axis=0)


@dataclass
class ResidualContext:
    conv1: ConvContext
    relu: np.ndarray
    conv2: ConvContext


def residual_forward(x, w1, b1, w2, b2):
    """``conv2(relu(conv1(x))) + x`` with 'same' padding and stride 1."""
    h1, c1 = conv2d_forward(x, w1, b1, 1, w1.shape[2] // 2)
    a, mask = relu_forward(h1)
    h2, c2 = conv2d_forward(a, w2, b2, 1, w2.shape[2] // 2)
    if h2.shape != x.shape:
        raise ShapeError(f"residual block changes shape {x.shape} -> {h2.shape}")
    return h2 + x, ResidualContext(c1, mask, c2)


def residual_backward(ctx: ResidualContext, grad_out, need_input_grad=True):
    """Return ``(grad_input, (gw1, gb1, gw2, gb2))``."""
    ga, gw2, gb2 = conv2d_backward(ctx.conv2, grad_out)
    gh1 = relu_backward(ctx.relu, ga)
    gx, gw1, gb1 = conv2d_backward(ctx.conv1, gh1, need_input_grad)
    if need_input_grad:
        gx = gx + grad_out
    return gx, (gw1, gb1, gw2, gb2)


# ---------------------------------------------------------------------------
# parameters and layer specs


class Parameter:
    """Float32 master weights, the working copy used in forward passes, and a gradient accumulator."""

    def __init__(self, name, value, half=False):
        self.name = name
        self.master = np.array(value, dtype=np.float32)
        self.grad = np.zeros_like(self.master)
        # running rounding error of compensated master updates (mixed precision only)
        self.comp = np.zeros_like(self.master)
        self.trainable = True
        self.sync(half)

    def sync(self, half=False):
        self.working = round_half(self.master) if half else self.master

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.master.shape}, trainable={self.trainable})"


KINDS = ("conv", "maxpool", "relu", "linear", "residual", "flatten", "gap", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    window: int = 2
    out_features: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1 or self.padding < 0:
            raise ConfigError("stride must be >= 1 and padding >= 0")

    @classmethod
    def conv(cls, out_channels, kernel=3, stride=1, padding=0):
        return cls("conv", out_channels=out_channels, kernel=kernel, stride=stride, padding=padding)

    @classmethod
    def pool(cls, window=2, stride=None):
        return cls("maxpool", window=window, stride=stride or window)

    @classmethod
    def linear(cls, out_features):
        return cls("linear", out_features=out_features)

    @classmethod
    def residual(cls, channels, kernel=3):
        return cls("residual", out_channels=channels, kernel=kernel)

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v != LayerSpec.__dataclass_fields__[k].default or k == "kind"}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


RELU = LayerSpec("relu")
FLATTEN = LayerSpec("flatten")
GAP = LayerSpec("gap")
SOFTMAX = LayerSpec("softmax")


# ---------------------------------------------------------------------------
# layers


class Layer:
    params: list = []
    parametrised = False

    def forward(self, x):
        raise NotImplementedError

    def backward(self, ctx, grad_out, need_input_grad, rounder):
        raise NotImplementedError

    def output_shape(self, shape):
        return shape

    def macs(self, shape):
        return 0


def _accumulate(param: Parameter, g, rounder):
    if param.trainable:
        param.grad += rounder(g) if rounder else g


class Conv2D(Layer):
    parametrised = True

    def __init__(self, name, in_channels, spec: LayerSpec, rng):
        k = spec.kernel
        self.stride, self.padding = spec.stride, spec.padding
        fan_in = in_channels * k * k
        self.weight = Parameter(f"{name}.weight", kaiming_init((spec.out_channels, in_channels, k, k), fan_in, rng))
        self.bias = Parameter(f"{name}.bias", np.zeros(spec.out_channels, dtype=np.float32))
        self.params = [self.weight, self.bias]

    def forward(self, x):
        return conv2d_forward(x, self.weight.working, self.bias.working, self.stride, self.padding)

    def backward(self, ctx, grad_out, need_input_grad, rounder):
        gx, gk, gb = conv2d_backward(ctx, grad_out, need_input_grad)
        _accumulate(self.weight, gk, rounder)
        _accumulate(self.bias, gb, rounder)
        return gx

    def output_shape(self, shape):
        c, h, w = shape
        o, ci, k, _ = self.weight.master.shape
        if c != ci:
            raise ShapeError(f"conv expects {ci} channels, got {c}")
        if h + 2 * self.padding < k or w + 2 * self.padding < k:
            raise ShapeError(f"input {h}x{w} too small for {k}x{k} kernel")
        return (o, conv_output_extent(h, k, self.stride, self.padding), conv_output_extent(w, k, self.stride, self.padding))

    def macs(self, shape):
        o, ho, wo = self.output_shape(shape)
        return o * ho * wo * self.weight.master[0].size


class MaxPool2D(Layer):
    def __init__(self, spec: LayerSpec):
        self.window = (spec.window, spec.window)
        self.stride = spec.stride

    def forward(self, x):
        return maxpool_forward(x, self.window, self.stride)

    def backward(self, ctx, grad_out, need_input_grad, rounder):
        return maxpool_backward(ctx, grad_out) if need_input_grad else None

    def output_shape(self, shape):
        c, h, w = shape
        k = self.window[0]
        if k > h or k > w:
            raise ShapeError(f"input {h}x{w} too small for {k}x{k} pooling")
        return (c, (h - k) // self.stride + 1, (w - k) // self.stride + 1)


class ReLU(Layer):
    def forward(self, x):
        return relu_forward(x)

    def backward(self, ctx, grad_out, need_input_grad, rounder):
        return relu_backward(ctx, grad_out) if need_input_grad else None


class Linear(Layer):
    parametrised = True

    def __init__(self, name, in_features, spec: LayerSpec, rng):
        self.weight = Parameter(f"{name}.weight", kaiming_init((spec.out_features, in_features), in_features, rng))
        self.bias = Parameter(f"{name}.bias", np.zeros(spec.out_features, dtype=np.float32))
        self.params = [self.weight, self.bias]

    def forward(self, x):
        return linear_forward(x, self.weight.working, self.bias.working)

    def backward(self, ctx, grad_out, need_input_grad, rounder):
        gx, gw, gb = linear_backward(ctx, grad_out, need_input_grad)
        _accumulate(self.weight, gw, rounder)
        _accumulate(self.bias, gb, rounder)
        return gx

    def output_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.weight.master.shape[1]:
            raise ShapeError(f"linear expects ({self.weight.master.shape[1]},) features, got {shape}")
        return (self.weight.master.shape[0],)

    def macs(self, shape):
        return self.weight.master.size


class Residual(Layer):
    parametrised = True

    def __init__(self, name, in_channels, spec: LayerSpec, rng):
        if spec.out_channels != in_channels:
            raise ShapeError(f"residual block must keep {in_channels} channels, spec has {spec.out_channels}")
        inner = LayerSpec.conv(in_channels, spec.kernel, 1, spec.kernel // 2)
        self.conv1 = Conv2D(f"{name}.conv1", in_channels, inner, rng)
        self.conv2 = Conv2D(f"{name}.conv2", in_channels, inner, rng)
        self.params = self.conv1.params + self.conv2.params

    def forward(self, x):
        return residual_forward(x, self.conv1.weight.working, self.conv1.bias.working,
                                self.conv2.weight.working, self.conv2.bias.working)

    def backward(self, ctx, grad_out, need_input_grad, rounder):
        gx, grads = residual_backward(ctx, grad_out, need_input_grad)
        for p, g in zip(self.params, grads):
            _accumulate(p, g, rounder)
        return gx

    def output_shape(self, shape):
        out = self.conv2.output_shape(self.conv1.output_shape(shape))
        if out != tuple(shape):
            raise ShapeError(f"residual block changes shape {shape} -> {out}")
        return out

    def macs(self, shape):
        return self.conv1.macs(shape) + self.conv2.macs(shape)


class Flatten(Layer):
    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, ctx, grad_out, need_input_grad, rounder):
        return grad_out.reshape(ctx) if need_input_grad else None

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


class GlobalAvgPool(Layer):
    def forward(self, x):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, ctx, grad_out, need_input_grad, rounder):
        if not need_input_grad:
            return None
        n, c, h, w = ctx
        return np.broadcast_to((grad_out / (h * w))[:, :, None, None], ctx).copy()

    def output_shape(self, shape):
        return (shape[0],)


# ---------------------------------------------------------------------------
# network


def _float_array(x):
    # float64 passes through untouched so gradient checks can run in double precision
    return np.asarray(x, dtype=np.result_type(x, np.float32))


@dataclass
class ForwardContext:
    layer_ctxs: list = field(default_factory=list)
    half: bool = False


ARCH_ALIASES = {
    "convnet": "convnet", "baseline": "convnet", "baselineconvnet": "convnet",
    "mini-resnet": "mini-resnet", "miniresnet": "mini-resnet", "resnet": "mini-resnet",
}


def baseline_convnet_specs(num_classes):
    specs = []
    for ch in (16, 32, 64):
        specs += [LayerSpec.conv(ch, 3, 1, 1), RELU, LayerSpec.pool(2)]
    specs += [FLATTEN, LayerSpec.linear(256), RELU, LayerSpec.linear(64), RELU,
              LayerSpec.linear(num_classes), SOFTMAX]
    return specs


def mini_resnet_specs(num_classes, width=16):
    return [
        LayerSpec.conv(width, 3, 1, 1), RELU,
        LayerSpec.residual(width), LayerSpec.residual(width),
        LayerSpec.pool(2),
        LayerSpec.residual(width), LayerSpec.residual(width),
        GAP, LayerSpec.linear(num_classes), SOFTMAX,
    ]


class Network:
    """An ordered stack of layers built from :class:`LayerSpec` entries.

    ``forward`` returns pre-softmax logits; a trailing ``softmax`` spec only
    marks the output as a probability head and is applied by :meth:`predict_proba`.
    """

    def __init__(self, specs: Sequence[LayerSpec], input_size: Shape2D, num_classes: int,
                 in_channels=3, seed=0, arch="custom", classes=None):
        self.specs = list(specs)
        self.input_size = input_size
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.seed = seed
        self.arch = arch
        self.classes = list(classes) if classes is not None else None
        self.half = False
        rng = np.random.default_rng(seed)
        self.layers: list[Layer] = []
        self.head_start = 0
        shape = (in_channels, input_size.height, input_size.width)
        body = [s for s in self.specs if s.kind != "softmax"]
        if len(body) != len(self.specs) and self.specs[-1].kind != "softmax":
            raise ConfigError("softmax may only appear as the final layer")
        for i, spec in enumerate(body):
            name = f"{i}.{spec.kind}"
            if spec.kind == "conv":
                layer = Conv2D(name, shape[0], spec, rng)
            elif spec.kind == "linear":
                if len(shape) != 1:
                    raise ShapeError("linear layer needs flattened input")
                layer = Linear(name, shape[0], spec, rng)
            elif spec.kind == "residual":
                layer = Residual(name, shape[0], spec, rng)
            elif spec.kind == "maxpool":
                layer = MaxPool2D(spec)
            elif spec.kind == "relu":
                layer = ReLU()
            elif spec.kind == "flatten":
                layer = Flatten()
            else:
                layer = GlobalAvgPool()
            if spec.kind in ("flatten", "gap"):
                self.head_start = i + 1
            shape = layer.output_shape(shape)
            self.layers.append(layer)
        if shape != (num_classes,):
            raise ShapeError(f"network produces {shape} per example, expected ({num_classes},)")

    # -- properties -------------------------------------------------------

    @property
    def global_pooled(self):
        return any(s.kind == "gap" for s in self.specs)

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.params]

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def body_parameters(self):
        return [p for layer in self.layers[:self.head_start] for p in layer.params]

    def head_parameters(self):
        return [p for layer in self.layers[self.head_start:] for p in layer.params]

    def set_precision(self, half: bool):
        self.half = bool(half)
        for p in self.parameters():
            p.sync(self.half)

    def set_input_size(self, size: Shape2D):
        """Change the expected image size; only global-pooled networks tolerate this."""
        if size == self.input_size:
            return
        if not self.global_pooled:
            raise ConfigError(f"{self.arch} has a size-dependent flatten width; cannot switch to {size}")
        shape = (self.in_channels, size.height, size.width)
        for layer in self.layers:
            shape = layer.output_shape(shape)
        self.input_size = size

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    # -- passes -----------------------------------------------------------

    def _check_input(self, x):
        expected = (self.in_channels, self.input_size.height, self.input_size.width)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"expected batch of {expected} images, got {list(x.shape)}")

    def forward(self, x):
        """Return ``(logits, ForwardContext)`` for an NCHW batch."""
        self._check_input(x)
        ctx = ForwardContext(half=self.half)
        h = round_half(x) if self.half else _float_array(x)
        for layer in self.layers:
            h, c = layer.forward(h)
            if self.half:
                h = round_half(h)
            ctx.layer_ctxs.append(c)
        return h, ctx

    def backward(self, ctx: ForwardContext, grad_logits):
        """Accumulate parameter gradients (trainable ones only) from ``grad_logits``."""
        if len(ctx.layer_ctxs) != len(self.layers):
            raise ShapeError("forward context does not belong to this network")
        rounder = round_half if ctx.half else None
        first = next((i for i, layer in enumerate(self.layers)
                      if any(p.trainable for p in layer.params)), None)
        if first is None:
            return
        g = _float_array(grad_logits)
        for i in range(len(self.layers) - 1, first - 1, -1):
            if rounder:
                g = rounder(g)
            g = self.layers[i].backward(ctx.layer_ctxs[i], g, i > first, rounder)

    def predict_proba(self, x):
        logits, _ = self.forward(x)
        return softmax(logits)

    def macs(self, input_size: Shape2D | None = None) -> int:
        """Multiply-accumulate count of one forward pass of a single image."""
        size = input_size or self.input_size
        shape = (self.in_channels, size.height, size.width)
        total = 0
        for layer in self.layers:
            total += layer.macs(shape)
            shape = layer.output_shape(shape)
        return total

    def describe(self) -> dict:
        return {
            "arch": self.arch,
            "input_size": [self.input_size.height, self.input_size.width],
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "seed": self.seed,
            "classes": self.classes,
            "layers": [s.to_dict() for s in self.specs],
        }


def build_network(arch, input_size: Shape2D, num_classes, seed=0, in_channels=3, classes=None) -> Network:
    key = ARCH_ALIASES.get(str(arch).lower())
    if key is None:
        raise ConfigError(f"unknown architecture {arch!r}")
    specs = baseline_convnet_specs(num_classes) if key == "convnet" else mini_resnet_specs(num_classes)
    return Network(specs, input_size, num_classes, in_channels, seed, key, classes)


def set_trainable(net: Network, selector="all"):
    """Set trainable flags.

    ``selector`` is ``"all"``, ``"body"`` (freeze everything before the head,
    i.e. the layers after the last flatten / global pool) or a custom mask:
    either a mapping from parameter name to flag or a sequence of flags in
    :meth:`Network.parameters` order.
    """
    params = net.parameters()
    if isinstance(selector, str):
        if selector in ("all", "none"):
            flags = [True] * len(params)
        elif selector in ("body", "body_only_frozen"):
            head = {id(p) for p in net.head_parameters()}
            flags = [id(p) in head for p in params]
        else:
            raise ConfigError(f"unknown trainable selector {selector!r}")
    elif isinstance(selector, Mapping):
        unknown = set(selector) - {p.name for p in params}
        if unknown:
            raise ConfigError(f"unknown parameters in mask: {sorted(unknown)}")
        flags = [bool(selector.get(p.name, p.trainable)) for p in params]
    else:
        flags = [bool(f) for f in selector]
        if len(flags) != len(params):
            raise ConfigError(f"mask has {len(flags)} entries for {len(params)} parameters")
    if not any(flags):
        raise ConfigError("trainable set would be empty")
    for p, f in zip(params, flags):
        p.trainable = f
