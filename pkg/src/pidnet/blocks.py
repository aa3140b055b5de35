"""Architectural units of the segmentation network.

Residual blocks, the gated fusion units that blend the detail, context and
boundary streams, multi-scale context pooling, and the dense prediction
heads. Spatial convolutions here pad by replicating edge samples, so a
constant feature map stays constant through every unit.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .nn import Conv2d, ConvBN, Module, ModuleList
from .tensor import Tensor, active_tape


class BasicBlock(Module):
    """Two 3x3 conv units with an additive shortcut and a trailing ReLU."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        self.conv1 = ConvBN(in_channels, out_channels, 3, stride, 1,
                            act=True, pad_mode="edge")
        self.conv2 = ConvBN(out_channels, out_channels, 3, 1, 1,
                            act=False, pad_mode="edge")
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = ConvBN(in_channels, out_channels, 1, stride, act=False)
        self.out_channels = out_channels

    def forward(self, x):
        y = self.conv2(self.conv1(x))
        s = x if self.shortcut is None else self.shortcut(x)
        return ops.relu(ops.add(y, s))

    def flop_count(self, h, w):
        total, (oh, ow) = self.conv1.flop_count(h, w)
        f2, _ = self.conv2.flop_count(oh, ow)
        total += f2
        if self.shortcut is not None:
            fs, _ = self.shortcut.flop_count(h, w)
            total += fs
        total += 2 * self.out_channels * oh * ow  # residual add + ReLU
        return total, (oh, ow)


class Bottleneck(Module):
    """1x1 reduce, 3x3 spatial, 1x1 expand by 4, shortcut, trailing ReLU."""

    EXPANSION = 4

    def __init__(self, in_channels: int, mid_channels: int, stride: int = 1):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        out_channels = mid_channels * self.EXPANSION
        self.conv1 = ConvBN(in_channels, mid_channels, 1, act=True)
        self.conv2 = ConvBN(mid_channels, mid_channels, 3, stride, 1,
                            act=True, pad_mode="edge")
        self.conv3 = ConvBN(mid_channels, out_channels, 1, act=False)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = ConvBN(in_channels, out_channels, 1, stride, act=False)
        self.out_channels = out_channels

    def forward(self, x):
        y = self.conv3(self.conv2(self.conv1(x)))
        s = x if self.shortcut is None else self.shortcut(x)
        return ops.relu(ops.add(y, s))

    def flop_count(self, h, w):
        total, _ = self.conv1.flop_count(h, w)
        f2, (oh, ow) = self.conv2.flop_count(h, w)
        f3, _ = self.conv3.flop_count(oh, ow)
        total += f2 + f3
        if self.shortcut is not None:
            fs, _ = self.shortcut.flop_count(h, w)
            total += fs
        total += 2 * self.out_channels * oh * ow
        return total, (oh, ow)


class PagFusion(Module):
    """Pixel attention gate blending the context stream into the detail stream.

    The context map is projected to the detail width by a 1x1 conv at its own
    (low) resolution, then bilinearly resized up. A per-site scalar gate is the
    sigmoid of the channel dot product of two learned 1x1 embeddings;
    output = gate * context + (1 - gate) * detail, so every output value sits
    between the two streams. The most recent gate map is kept on `last_gate`
    for inspection dumps.
    """

    def __init__(self, detail_channels: int, context_channels: int,
                 embed_dim: int | None = None):
        super().__init__()
        if embed_dim is None:
            embed_dim = max(8, detail_channels // 2)
        self.project = ConvBN(context_channels, detail_channels, 1, act=False)
        self.embed_detail = ConvBN(detail_channels, embed_dim, 1, act=False)
        self.embed_context = ConvBN(detail_channels, embed_dim, 1, act=False)
        self.last_gate = None

    def forward(self, p, i):
        ci = self.project(i)
        if ci.shape[2:] != p.shape[2:]:
            ci = ops.bilinear_resize(ci, p.shape[2], p.shape[3])
        dot = ops.sum_channels(ops.mul(self.embed_detail(p), self.embed_context(ci)))
        gate = ops.sigmoid(dot)
        # diagnostic output, not model state: bypass buffer registration
        object.__setattr__(self, "last_gate", gate)
        return ops.add(ops.mul(ci, gate), ops.mul(p, ops.affine(gate, -1.0, 1.0)))

    def flop_count(self, p_hw, i_hw):
        ph, pw = p_hw
        total, (ih, iw) = self.project.flop_count(*i_hw)
        channels = self.project.conv.out_channels
        if (ih, iw) != (ph, pw):
            total += 8 * channels * ph * pw
        fe, _ = self.embed_detail.flop_count(ph, pw)
        total += 2 * fe  # both embeddings run at detail resolution
        embed = self.embed_detail.conv.out_channels
        sites = ph * pw
        total += embed * sites          # embedding product
        total += embed * sites          # channel-sum
        total += 4 * sites              # sigmoid
        total += channels * sites       # gate * context
        total += 2 * sites              # 1 - gate
        total += channels * sites       # (1-gate) * detail
        total += channels * sites       # final add
        return total, (ph, pw)


_PPM_SCALES = ((5, 2), (9, 4), (17, 8))


def _ppm_branches(in_channels: int, branch_channels: int):
    projections = ModuleList(
        [ConvBN(in_channels, branch_channels, 1, act=True) for _ in _PPM_SCALES]
        + [ConvBN(in_channels, branch_channels, 1, act=True)]
    )
    refinements = ModuleList(
        ConvBN(branch_channels, branch_channels, 3, 1, 1, act=True, pad_mode="edge")
        for _ in range(len(_PPM_SCALES) + 1)
    )
    return projections, refinements


def _pooled_maps(x, projections, out_h, out_w):
    maps = []
    for (kernel, stride), proj in zip(_PPM_SCALES, projections):
        y = proj(ops.avgpool2d(x, kernel, stride))
        maps.append(ops.bilinear_resize(y, out_h, out_w))
    y = projections[len(_PPM_SCALES)](ops.global_avgpool(x))
    maps.append(ops.bilinear_resize(y, out_h, out_w))
    return maps


def _pool_out_len(in_len, kernel, stride):
    return (in_len + 2 * ((kernel - 1) // 2) - kernel) // stride + 1


def _ppm_flop_count(ppm, h, w):
    """Shared analytic count for both pooling modules (same op multiset)."""
    in_ch = ppm.shortcut.conv.in_channels
    b = ppm.branch_channels
    total, _ = ppm.base.flop_count(h, w)
    for (kernel, stride), proj, refine in zip(_PPM_SCALES, ppm.projections,
                                              ppm.refinements):
        oh = _pool_out_len(h, kernel, stride)
        ow = _pool_out_len(w, kernel, stride)
        total += in_ch * oh * ow * kernel * kernel      # pooling windows
        fp, _ = proj.flop_count(oh, ow)
        total += fp
        total += 8 * b * h * w                          # resize back
        total += b * h * w                              # add base
        fr, _ = refine.flop_count(h, w)
        total += fr
    total += in_ch * h * w                              # global pool
    fp, _ = ppm.projections[len(_PPM_SCALES)].flop_count(1, 1)
    total += fp
    total += 8 * b * h * w
    total += b * h * w
    fr, _ = ppm.refinements[len(_PPM_SCALES)].flop_count(h, w)
    total += fr
    fc, _ = ppm.compress.flop_count(h, w)
    fs, _ = ppm.shortcut.flop_count(h, w)
    out_ch = ppm.shortcut.conv.out_channels
    total += fc + fs + out_ch * h * w                   # shortcut add
    return total, (h, w)


def _affine_inplace(buf, unit):
    """Fold a unit's BN stats (or raw conv bias) into a (n, ch, sites) buffer."""
    conv, bn = unit.conv, unit.bn
    if bn is not None:
        s = bn.gamma.data / np.sqrt(bn.running_var.data + bn.eps)
        t = bn.beta.data - bn.running_mean.data * s
        if conv.bias is not None:
            t = t + conv.bias.data * s
        buf *= s[None, :, None]
        buf += t[None, :, None]
    elif conv.bias is not None:
        buf += conv.bias.data[None, :, None]


class Pappm(Module):
    """Parallel multi-scale context pooling.

    Five branches: a 1x1 base at full block resolution, three average-pool
    scales, and global pooling. Pooled branches are projected down, resized
    back, summed with the base, and each refined by its own 3x3 conv; all
    five concatenate into a 1x1 compression, plus an additive 1x1 shortcut.
    The refinements are mutually independent, so in eval mode (no tape
    active) the whole block runs as one fused pipeline over a persistent
    workspace: the scales stack into a single column matrix and every 1x1
    stage is a direct matrix product; set ``batched_eval = False`` to force
    the per-op reference path. On inputs smaller than a pooling window the
    count-excluding-padding average degrades toward a global mean, so no
    scale needs a special case.
    """

    def __init__(self, in_channels: int, branch_channels: int, out_channels: int):
        super().__init__()
        self.base = ConvBN(in_channels, branch_channels, 1, act=True)
        self.projections, self.refinements = _ppm_branches(in_channels, branch_channels)
        n_scales = len(_PPM_SCALES) + 1
        self.compress = ConvBN(branch_channels * (n_scales + 1), out_channels, 1, act=False)
        self.shortcut = ConvBN(in_channels, out_channels, 1, act=False)
        self.branch_channels = branch_channels
        self.batched_eval = True
        self._workspace = None
        self._workspace_key = None

    def forward(self, x):
        h, w = x.shape[2], x.shape[3]
        if self.training or active_tape() is not None or not self.batched_eval:
            base = self.base(x)
            pooled = _pooled_maps(x, self.projections, h, w)
            pre = [ops.add(m, base) for m in pooled]
            refined = [refine(t) for refine, t in zip(self.refinements, pre)]
            cat = ops.concat_channels([base] + refined)
            return ops.add(self.compress(cat), self.shortcut(x))
        return Tensor(self._fused_eval(x))

    def _fused_eval(self, x):
        n, c, h, w = x.shape
        b = self.branch_channels
        k = len(self.refinements)
        cout = self.shortcut.conv.out_channels
        # eval-only fused pipeline: every 1x1 stage runs as a plain matrix
        # product on channel-flattened views, the refinements share one
        # padded scale stack and column matrix, and per-stage BN + ReLU land
        # as in-place passes. All buffers below persist across calls and are
        # rewritten in full each time, so the hot path allocates only the
        # returned output.
        key = (k, n, b, h, w, x.data.dtype)
        if self._workspace_key != key:
            dt = x.data.dtype
            self._workspace = (
                np.empty((n, b, h * w), dtype=dt),
                np.empty((k, n, b, h + 2, w + 2), dtype=dt),
                np.empty((k, n, b * 9, h * w), dtype=dt),
                np.empty((n, b, h * w), dtype=dt),
                np.empty((n, (k + 1) * b, h * w), dtype=dt),
                np.empty((n, cout, h * w), dtype=dt),
            )
            self._workspace_key = key
        base, padded, cols, scratch, cat, mixed = self._workspace

        xf = x.data.reshape(n, c, h * w)
        np.matmul(self.base.conv.weight.data.reshape(b, c), xf, out=base)
        _affine_inplace(base, self.base)
        np.maximum(base, 0.0, out=base)
        base4 = base.reshape(n, b, h, w)

        pooled = _pooled_maps(x, self.projections, h, w)
        interior = padded[:, :, :, 1:-1, 1:-1]
        for j, m in enumerate(pooled):
            np.add(m.data, base4, out=interior[j])
        padded[..., 0, :] = padded[..., 1, :]
        padded[..., -1, :] = padded[..., -2, :]
        padded[..., 0] = padded[..., 1]
        padded[..., -1] = padded[..., -2]
        win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(3, 4))
        np.copyto(cols.reshape(k, n, b, 3, 3, h, w), win.transpose(0, 1, 2, 5, 6, 3, 4))

        cat[:, :b] = base
        for j, unit in enumerate(self.refinements):
            np.matmul(unit.conv.weight.data.reshape(b, b * 9), cols[j], out=scratch)
            _affine_inplace(scratch, unit)
            np.maximum(scratch, 0.0, out=cat[:, (j + 1) * b:(j + 2) * b])

        np.matmul(self.compress.conv.weight.data.reshape(cout, (k + 1) * b), cat,
                  out=mixed)
        _affine_inplace(mixed, self.compress)

        out = np.empty((n, cout, h, w), dtype=x.data.dtype)
        of = out.reshape(n, cout, h * w)
        np.matmul(self.shortcut.conv.weight.data.reshape(cout, c), xf, out=of)
        _affine_inplace(of, self.shortcut)
        of += mixed
        return out

    def flop_count(self, h, w):
        return _ppm_flop_count(self, h, w)


class Dappm(Module):
    """Deep multi-scale context pooling.

    Same five branches as Pappm, but refinement is hierarchical: each scale's
    3x3 conv consumes its own pooled map plus the previous scale's refined
    output, so the branch depth grows with scale count.
    """

    def __init__(self, in_channels: int, branch_channels: int, out_channels: int):
        super().__init__()
        self.base = ConvBN(in_channels, branch_channels, 1, act=True)
        self.projections, self.refinements = _ppm_branches(in_channels, branch_channels)
        n_scales = len(_PPM_SCALES) + 1
        self.compress = ConvBN(branch_channels * (n_scales + 1), out_channels, 1, act=False)
        self.shortcut = ConvBN(in_channels, out_channels, 1, act=False)
        self.branch_channels = branch_channels

    def forward(self, x):
        h, w = x.shape[2], x.shape[3]
        base = self.base(x)
        pooled = _pooled_maps(x, self.projections, h, w)
        refined = []
        prev = base
        for refine, m in zip(self.refinements, pooled):
            prev = refine(ops.add(m, prev))
            refined.append(prev)
        out = self.compress(ops.concat_channels([base] + refined))
        return ops.add(out, self.shortcut(x))

    def flop_count(self, h, w):
        return _ppm_flop_count(self, h, w)


class AddLateral(Module):
    """Additive lateral tap: project the source stream with a 1x1 conv unit,
    resize to the target's extent, and add."""

    def __init__(self, source_channels: int, target_channels: int):
        super().__init__()
        self.project = ConvBN(source_channels, target_channels, 1, act=False)

    def forward(self, target, source):
        y = self.project(source)
        if y.shape[2:] != target.shape[2:]:
            y = ops.bilinear_resize(y, target.shape[2], target.shape[3])
        return ops.add(target, y)

    def flop_count(self, target_hw, source_hw):
        th, tw = target_hw
        total, (sh, sw) = self.project.flop_count(*source_hw)
        channels = self.project.conv.out_channels
        if (sh, sw) != (th, tw):
            total += 8 * channels * th * tw
        total += channels * th * tw
        return total, (th, tw)


class BagFusion(Module):
    """Boundary-attention fusion of all three streams.

    An elementwise sigmoid of the boundary stream gates between detail
    (where the gate is high) and context (where it is low); the blend goes
    through a 3x3 conv unit. Gate kept on `last_gate` for inspection.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.out = ConvBN(channels, channels, 3, 1, 1, act=True, pad_mode="edge")
        self.last_gate = None

    def forward(self, p, i, d):
        gate = ops.sigmoid(d)
        object.__setattr__(self, "last_gate", gate)
        mix = ops.add(ops.mul(ops.affine(gate, -1.0, 1.0), i), ops.mul(gate, p))
        return self.out(mix)

    def flop_count(self, h, w):
        channels = self.out.conv.in_channels
        n = channels * h * w
        total = 4 * n + 2 * n + n + n + n  # sigmoid, 1-gate, two blends, add
        f, _ = self.out.flop_count(h, w)
        return total + f, (h, w)


class LightBag(Module):
    """Light-weight boundary-attention fusion using two 1x1 conv units.

    out = f_p((1 - gate) * i + p) + f_i(gate * p + i), gate = sigmoid(d).
    The 1x1 units have no activation so the output stays linear in the
    detail and context streams for a frozen gate.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.f_p = ConvBN(channels, channels, 1, act=False)
        self.f_i = ConvBN(channels, channels, 1, act=False)
        self.last_gate = None

    def forward(self, p, i, d):
        gate = ops.sigmoid(d)
        object.__setattr__(self, "last_gate", gate)
        left = self.f_p(ops.add(ops.mul(ops.affine(gate, -1.0, 1.0), i), p))
        right = self.f_i(ops.add(ops.mul(gate, p), i))
        return ops.add(left, right)

    def flop_count(self, h, w):
        channels = self.f_p.conv.in_channels
        n = channels * h * w
        total = 4 * n + 2 * n + 2 * n + 2 * n  # sigmoid, 1-gate, blends, inner adds
        fp, _ = self.f_p.flop_count(h, w)
        fi, _ = self.f_i.flop_count(h, w)
        return total + fp + fi + n, (h, w)


class SegmentationHead(Module):
    """3x3 conv unit into a 1x1 classifier; emits logits at block resolution."""

    def __init__(self, in_channels: int, mid_channels: int, num_classes: int):
        super().__init__()
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        self.reduce = ConvBN(in_channels, mid_channels, 3, 1, 1,
                             act=True, pad_mode="edge")
        self.classify = Conv2d(mid_channels, num_classes, 1, bias=True)
        self.num_classes = num_classes

    def forward(self, x):
        return self.classify(self.reduce(x))

    def flop_count(self, h, w):
        total, _ = self.reduce.flop_count(h, w)
        fc, _ = self.classify.flop_count(h, w)
        return total + fc, (h, w)


class BoundaryHead(Module):
    """3x3 conv unit into a single-channel 1x1 logit map."""

    def __init__(self, in_channels: int, mid_channels: int):
        super().__init__()
        self.reduce = ConvBN(in_channels, mid_channels, 3, 1, 1,
                             act=True, pad_mode="edge")
        self.classify = Conv2d(mid_channels, 1, 1, bias=True)

    def forward(self, x):
        return self.classify(self.reduce(x))

    def flop_count(self, h, w):
        total, _ = self.reduce.flop_count(h, w)
        fc, _ = self.classify.flop_count(h, w)
        return total + fc, (h, w)
