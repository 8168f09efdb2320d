"""Trainable layers: convolution, batch norm, involution and the DIPC block.

Layers follow a forward/backward protocol: ``forward`` caches what it needs
(only in training mode) and ``backward`` takes the gradient of the layer
output, accumulates parameter gradients into ``Parameter.grad`` and returns
the gradient of the layer input.
"""
from __future__ import annotations

from collections.abc import Iterator

import numpy as np

from speednet import ops


class Parameter:
    """A trainable array paired with its accumulated gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = np.zeros_like(value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size


class Module:
    """Minimal container that tracks parameters, buffers and sub-modules."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffer_names", [])
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffer_names.append(name)
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad[...] = 0

    def astype(self, dtype) -> "Module":
        """Cast every parameter and buffer in place (returns ``self``)."""
        for m in self.modules():
            for p in m._params.values():
                p.value = p.value.astype(dtype)
                p.grad = np.zeros_like(p.value)
            for name in m._buffer_names:
                object.__setattr__(m, name, getattr(m, name).astype(dtype))
        return self

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _need_cache(self, cache):
        if cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called without a training-mode forward")
        return cache


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        self._children[str(len(self._items))] = module
        self._items.append(module)

    def __getitem__(self, i):
        return self._items[i]

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, padding: int | None = None, dilation: int = 1,
                 bias: bool = True, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if padding is None:
            padding = dilation * (kernel_size - 1) // 2
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(he_uniform(
            rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(out_channels, dtype=np.float32)) if bias else None
        self._x = None

    def forward(self, x):
        b = self.bias.value if self.bias is not None else None
        out = ops.conv2d(x, self.weight.value, b, self.stride, self.padding, self.dilation)
        self._x = x if self.training else None
        return out

    def backward(self, grad_out):
        x = self._need_cache(self._x)
        gx, gw, gb = ops.conv2d_backward(
            x, self.weight.value, grad_out, self.stride, self.padding, self.dilation)
        self.weight.grad += gw
        if self.bias is not None:
            self.bias.grad += gb
        return gx

    def __repr__(self):
        return (f"Conv2d({self.in_channels}, {self.out_channels}, k={self.kernel_size}, "
                f"d={self.dilation})")


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = ops.BN_EPS, momentum: float = ops.BN_MOMENTUM):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))
        self._cache = None

    def forward(self, x):
        out, cache = ops.batchnorm2d(x, self.gamma.value, self.beta.value, self.running_mean,
                                     self.running_var, self.training, self.eps, self.momentum)
        self._cache = cache if self.training else None
        return out

    def backward(self, grad_out):
        gx, gg, gb = ops.batchnorm2d_backward(self._need_cache(self._cache), grad_out)
        self.gamma.grad += gg
        self.beta.grad += gb
        return gx


class ConvBlock(Module):
    """conv -> ReLU -> BatchNorm (post-activation normalisation)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 dilation: int = 1, rng=None):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel_size, dilation=dilation, rng=rng)
        self.bn = BatchNorm2d(out_channels)
        self._pre = None

    def forward(self, x):
        pre = self.conv(x)
        self._pre = pre if self.training else None
        return self.bn(ops.relu(pre))

    def backward(self, grad_out):
        pre = self._need_cache(self._pre)
        g = self.bn.backward(grad_out)
        return self.conv.backward(ops.relu_backward(pre, g))


class Involution(Module):
    """Involution with a two-layer 1x1 kernel generator.

    The generator maps the (optionally average-pooled) input to one
    ``K x K`` kernel per pixel and channel group:
    ``conv1x1(C -> C/r) -> ReLU -> BN -> conv1x1(C/r -> K*K*G)``.
    Channels in a group share the kernel; every pixel gets its own.
    """

    def __init__(self, channels: int, kernel_size: int = 3, groups: int | None = None,
                 reduction: int = 4, dilation: int = 1, stride: int = 1, rng=None):
        super().__init__()
        if groups is None:
            groups = max(1, channels // 16)
        if kernel_size % 2 != 1:
            raise ValueError(f"involution kernel size must be odd, got {kernel_size}")
        if channels % groups:
            raise ValueError(f"channels {channels} not divisible by groups {groups}")
        if channels % reduction:
            raise ValueError(f"channels {channels} not divisible by reduction {reduction}")
        self.channels = channels
        self.kernel_size = kernel_size
        self.groups = groups
        self.reduction = reduction
        self.dilation = dilation
        self.stride = stride
        hidden = channels // reduction
        self.reduce = Conv2d(channels, hidden, 1, rng=rng)
        self.bn = BatchNorm2d(hidden)
        self.span = Conv2d(hidden, kernel_size * kernel_size * groups, 1, rng=rng)
        self._cache = None

    def generate_kernels(self, x):
        src = ops.avgpool2d(x, self.stride) if self.stride > 1 else x
        hidden = self.reduce(src)
        return self.span(self.bn(ops.relu(hidden))), hidden

    def forward(self, x):
        kernels, hidden = self.generate_kernels(x)
        out = ops.involution2d(x, kernels, self.kernel_size, self.groups, self.stride, self.dilation)
        self._cache = (x, kernels, hidden) if self.training else None
        return out

    def backward(self, grad_out):
        x, kernels, hidden = self._need_cache(self._cache)
        gx, gk = ops.involution2d_backward(
            x, kernels, self.kernel_size, self.groups, self.stride, self.dilation, grad_out)
        g = self.span.backward(gk)
        g = ops.relu_backward(hidden, self.bn.backward(g))
        g = self.reduce.backward(g)
        if self.stride > 1:
            g = ops.avgpool2d_backward(x.shape, g, self.stride)
        return gx + g

    def __repr__(self):
        return (f"Involution(C={self.channels}, K={self.kernel_size}, G={self.groups}, "
                f"r={self.reduction}, d={self.dilation})")


class DipcBlock(Module):
    """Dilated-involutional pyramidal fusion stage.

    Takes encoder features ``f`` of shape ``(b, c, H, W)`` and the raw image
    batch, returns ``(b, 2c, H/2, W/2)``:

    1. ``S``: the image max-pooled ``level`` times (salient map).
    2. ``P = maxpool(f)``.
    3. ``E = P + conv1x1(S)``.
    4. ``Y_i`` = dilated involution of ``E`` for each pyramid dilation.
    5. ``Z = (Y_1 + Y_2) + (Y_2 + Y_3)``, adjacent pairs summed.
    6. ``A = sigmoid(conv3x3(Z))``.
    7. ``O = A * P``.
    8. ``out = ConvBlock(O + E)`` (``ConvBlock(O)`` when ``residual`` is off).

    With ``use_involution=False`` the branches are dilated ``K x K``
    convolutions instead (the no-involution ablation).
    """

    def __init__(self, level: int, channels: int, kernel_size: int = 3,
                 dilations=(1, 2, 4), reduction: int = 4, groups: int | None = None,
                 residual: bool = True, use_involution: bool = True,
                 image_channels: int = 3, rng=None):
        super().__init__()
        if level < 1:
            raise ValueError(f"DIPC level must be >= 1, got {level}")
        if len(dilations) < 2:
            raise ValueError("pairwise fusion needs at least two dilations")
        self.level = level
        self.channels = channels
        self.residual = residual
        self.use_involution = use_involution
        self.salient = Conv2d(image_channels, channels, 1, rng=rng)
        if use_involution:
            branches = [Involution(channels, kernel_size, groups, reduction, d, rng=rng)
                        for d in dilations]
        else:
            branches = [Conv2d(channels, channels, kernel_size, dilation=d, rng=rng)
                        for d in dilations]
        self.branches = ModuleList(branches)
        self.attention = Conv2d(channels, channels, 3, rng=rng)
        self.out_block = ConvBlock(channels, 2 * channels, 3, rng=rng)
        self._cache = None
        self.last_attention = None

    def salient_map(self, image):
        s = image
        for _ in range(self.level):
            s, _ = ops.maxpool2d(s, 2, 2)
        return s

    def forward(self, f, image):
        n, c, h, w = ops.check4(f, "dipc")
        if c != self.channels:
            raise ops.ShapeError(f"dipc level {self.level}", "channels", self.channels, c)
        s = self.salient_map(image)
        if s.shape[2:] != (h // 2, w // 2):
            raise ops.ShapeError(f"dipc level {self.level}", "salient map size",
                                 (h // 2, w // 2), s.shape[2:])
        p, argmax = ops.maxpool2d(f, 2, 2)
        e = ops.add(p, self.salient(s))
        ys = [br(e) for br in self.branches]
        z = ops.add(ys[0], ys[1])
        for i in range(1, len(ys) - 1):
            z = ops.add(z, ops.add(ys[i], ys[i + 1]))
        a = ops.sigmoid(self.attention(z))
        o = ops.mul(a, p)
        out = self.out_block(ops.add(o, e) if self.residual else o)
        self.last_attention = a
        self._cache = (f.shape, argmax, p, a) if self.training else None
        return out

    def backward(self, grad_out):
        f_shape, argmax, p, a = self._need_cache(self._cache)
        g = self.out_block.backward(grad_out)
        if self.residual:
            g_o, g_e = ops.add_backward(g)
        else:
            g_o, g_e = g, np.zeros_like(g)
        g_a, g_p = ops.mul_backward(a, p, g_o)
        g_z = self.attention.backward(ops.sigmoid_backward(a, g_a))
        g_ys = [np.zeros_like(g_z) for _ in self.branches]
        g_rest = g_z
        for i in range(len(g_ys) - 2, 0, -1):
            g_rest, g_pair = ops.add_backward(g_rest)
            gi, gj = ops.add_backward(g_pair)
            g_ys[i] += gi
            g_ys[i + 1] += gj
        g0, g1 = ops.add_backward(g_rest)
        g_ys[0] += g0
        g_ys[1] += g1
        for br, gy in zip(self.branches, g_ys):
            g_e = g_e + br.backward(gy)
        g_p2, g_s = ops.add_backward(g_e)
        self.salient.backward(g_s)
        return ops.maxpool2d_backward(f_shape, argmax, g_p + g_p2, 2, 2)
