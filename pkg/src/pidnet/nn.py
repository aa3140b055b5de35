"""Parameter containers, SGD with momentum, and conv+BN fusion."""

from __future__ import annotations

import zlib

import numpy as np

from . import ops
from .tensor import Tensor, default_dtype


class Module:
    """Minimal container: child modules and parameters register on assignment."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor):
            (self._params if value.trainable else self._buffers)[name] = value
        else:
            self._params.pop(name, None)
            self._buffers.pop(name, None)
            self._children.pop(name, None)
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children.items():
            yield from child.named_buffers(prefix + name + ".")

    def named_state(self, prefix: str = ""):
        """Parameters and buffers in a stable definition order."""
        for name, p in self._params.items():
            yield prefix + name, p
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children.items():
            yield from child.named_state(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    """Indexable module container; children register under their index."""

    def __init__(self, modules=()):
        super().__init__()
        self.items = list(modules)
        for i, m in enumerate(self.items):
            self._children[str(i)] = m

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]

    def forward(self, *args, **kwargs):
        raise TypeError("ModuleList is a container, not callable")


class Sequential(Module):
    def __init__(self, *modules):
        super().__init__()
        self.items = list(modules)
        for i, m in enumerate(modules):
            self._children[str(i)] = m

    def forward(self, x):
        for m in self.items:
            x = m(x)
        return x

    def flop_count(self, h, w):
        total = 0
        for m in self.items:
            f, (h, w) = m.flop_count(h, w)
            total += f
        return total, (h, w)

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)


class Conv2d(Module):
    """Convolution parameters plus the call into ops.conv2d."""

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0,
                 bias=False, pad_mode="zeros"):
        super().__init__()
        kh, kw = ops._pair(kernel)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = (kh, kw)
        self.stride = stride
        self.padding = padding
        self.pad_mode = pad_mode
        dt = default_dtype()
        self.weight = Tensor(np.zeros((out_channels, in_channels, kh, kw), dtype=dt),
                             trainable=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dt), trainable=True) if bias else None

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding,
                          self.pad_mode)

    def out_size(self, h, w):
        sh, sw = ops._pair(self.stride)
        ph, pw = ops._pair(self.padding)
        return (ops.conv_output_size(h, self.kernel[0], sh, ph),
                ops.conv_output_size(w, self.kernel[1], sw, pw))

    def flop_count(self, h, w):
        oh, ow = self.out_size(h, w)
        macs = self.out_channels * oh * ow * self.in_channels * self.kernel[0] * self.kernel[1]
        flops = 2 * macs
        if self.bias is not None:
            flops += self.out_channels * oh * ow
        return flops, (oh, ow)


class BatchNorm2d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        dt = default_dtype()
        self.gamma = Tensor(np.ones(channels, dtype=dt), trainable=True)
        self.beta = Tensor(np.zeros(channels, dtype=dt), trainable=True)
        self.running_mean = Tensor(np.zeros(channels, dtype=dt))
        self.running_var = Tensor(np.ones(channels, dtype=dt))

    def forward(self, x):
        return ops.batchnorm2d(x, self.gamma, self.beta,
                               self.running_mean.data, self.running_var.data,
                               self.eps, self.momentum, self.training)


class ConvBN(Module):
    """conv -> BN -> optional ReLU. The only place BNs live, so fusion can
    always remove them."""

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0,
                 act=True, pad_mode="zeros"):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel, stride, padding,
                           bias=False, pad_mode=pad_mode)
        self.bn = BatchNorm2d(out_channels)
        self.act = act

    def forward(self, x):
        y = self.conv(x)
        if self.bn is not None:
            y = self.bn(y)
        if self.act:
            y = ops.relu(y)
        return y

    def fuse(self):
        if self.bn is not None:
            self.conv = fuse_bn_into_conv(self.conv, self.bn)
            self.bn = None

    def flop_count(self, h, w):
        flops, (oh, ow) = self.conv.flop_count(h, w)
        numel = self.conv.out_channels * oh * ow
        if self.bn is not None:
            flops += 2 * numel
        if self.act:
            flops += numel
        return flops, (oh, ow)


def fuse_bn_into_conv(conv: Conv2d, bn: BatchNorm2d) -> Conv2d:
    """Fold eval-mode BN statistics into conv weights.

    w' = w * gamma / sqrt(var + eps), b' = (b - mean) * gamma / sqrt(var + eps) + beta.
    """
    if bn.training:
        raise ValueError("fuse_bn_into_conv: BN must be in eval mode")
    scale = bn.gamma.data / np.sqrt(bn.running_var.data + bn.eps)
    fused = Conv2d(conv.in_channels, conv.out_channels, conv.kernel, conv.stride,
                   conv.padding, bias=True, pad_mode=conv.pad_mode)
    fused.weight.data = conv.weight.data * scale[:, None, None, None]
    b = conv.bias.data if conv.bias is not None else 0.0
    fused.bias.data = (b - bn.running_mean.data) * scale + bn.beta.data
    fused.train(conv.training)
    return fused


def fuse_model(model: Module) -> Module:
    """Fuse every ConvBN in place; model must be in eval mode."""
    if model.training:
        raise ValueError("fuse_model: switch the model to eval mode first")
    for m in model.modules():
        if isinstance(m, ConvBN):
            m.fuse()
    remaining = [m for m in model.modules() if isinstance(m, BatchNorm2d)]
    if remaining:
        raise RuntimeError(f"fuse_model: {len(remaining)} BN layers left standalone")
    return model


# ---------------------------------------------------------------------------
# initialization


def _name_seed(seed: int, name: str) -> np.random.Generator:
    # parameter values depend only on (seed, qualified name), so two configs
    # sharing a module name initialize it identically
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def init_parameters(model: Module, seed: int) -> None:
    """Kaiming fan-out normal for conv weights; BN gamma=1, beta=0; biases 0."""
    for name, p in _named_conv_weights(model):
        cout, cin, kh, kw = p.shape
        std = float(np.sqrt(2.0 / (cout * kh * kw)))
        rng = _name_seed(seed, name)
        p.data = rng.normal(0.0, std, size=p.shape).astype(p.dtype)


def _named_conv_weights(model: Module):
    for m, prefix in _named_modules(model):
        if isinstance(m, Conv2d):
            yield prefix + ("." if prefix else "") + "weight", m.weight


def _named_modules(model: Module, prefix: str = ""):
    yield model, prefix
    for name, child in model._children.items():
        child_prefix = prefix + ("." if prefix else "") + name
        yield from _named_modules(child, child_prefix)


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(params, grads, velocities, lr, momentum=0.0, weight_decay=0.0):
    """In-place SGD with momentum; decay folds into the gradient first.

    g' = g + wd * w; v <- m * v + g'; w <- w - lr * (v if momentum else g').
    """
    for p, g, v in zip(params, grads, velocities):
        eff = g + weight_decay * p.data if weight_decay else g
        if momentum:
            v *= momentum
            v += eff
            p.data = p.data - lr * v
        else:
            p.data = p.data - lr * eff


class SGD:
    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None):
        use = self.lr if lr is None else lr
        live = [(p, v) for p, v in zip(self.params, self.velocities) if p.grad is not None]
        if not live:
            return
        ps, vs = zip(*live)
        sgd_step(ps, [p.grad for p in ps], vs, use, self.momentum, self.weight_decay)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
