"""Three-branch segmentation network assembly.

A detail branch runs at 1/8 resolution throughout, a context branch descends
1/8 -> 1/16 -> 1/32 -> 1/64 and is pooled by a multi-scale context module,
and a boundary branch runs at 1/8 fed by additive taps from the context
branch. The detail branch receives two gated (or additive) laterals from the
context branch; the three streams merge in a final fusion unit ahead of the
segmentation head, with a boundary head on the boundary stream and an
auxiliary segmentation head (training only) on the first lateral's output.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import ops
from .blocks import (
    AddLateral,
    BagFusion,
    BasicBlock,
    Bottleneck,
    BoundaryHead,
    Dappm,
    LightBag,
    PagFusion,
    Pappm,
    SegmentationHead,
)
from .nn import ConvBN, Module, Sequential
from .tensor import ShapeError, Tensor, default_dtype

FUSION_KINDS = ("pag_bag", "add")
CONTEXT_KINDS = ("pappm", "dappm")
BAG_KINDS = ("light", "full")


@dataclass(frozen=True)
class ModelConfig:
    """Widths, depths, and fusion choices for one network variant.

    Branch depth (total residual blocks, including the detail branch's
    bottleneck tail) must be strictly ordered context > detail > boundary.
    """

    name: str = "custom"
    base_width: int = 32
    num_classes: int = 19
    fusion: str = "pag_bag"
    context: str = "pappm"
    bag_kind: str = "light"
    ppm_branch_channels: int = 96
    depth_shared1: int = 1
    depth_shared2: int = 1
    depth_i3: int = 1
    depth_i4: int = 2
    depth_i5: int = 3
    depth_p3: int = 1
    depth_p4: int = 1
    depth_d3: int = 1
    depth_d4: int = 1
    boundary_radius: int = 2
    min_divisor: int = 64

    def validate(self) -> None:
        if self.base_width < 8 or self.base_width % 2:
            raise ValueError(f"base_width must be an even value >= 8, got {self.base_width}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.fusion not in FUSION_KINDS:
            raise ValueError(f"fusion must be one of {FUSION_KINDS}, got {self.fusion!r}")
        if self.context not in CONTEXT_KINDS:
            raise ValueError(f"context must be one of {CONTEXT_KINDS}, got {self.context!r}")
        if self.bag_kind not in BAG_KINDS:
            raise ValueError(f"bag_kind must be one of {BAG_KINDS}, got {self.bag_kind!r}")
        if self.ppm_branch_channels < 8:
            raise ValueError("ppm_branch_channels must be >= 8")
        if self.boundary_radius < 0:
            raise ValueError("boundary_radius must be >= 0")
        if self.min_divisor < 8 or self.min_divisor % 8:
            raise ValueError(f"min_divisor must be a multiple of 8, got {self.min_divisor}")
        depths = (self.depth_shared1, self.depth_shared2, self.depth_i3,
                  self.depth_i4, self.depth_i5, self.depth_p3, self.depth_p4,
                  self.depth_d3, self.depth_d4)
        if any(d < 1 for d in depths):
            raise ValueError(f"stage depths must be >= 1, got {depths}")
        context_depth = self.depth_i3 + self.depth_i4 + self.depth_i5
        detail_depth = self.depth_p3 + self.depth_p4 + 1
        boundary_depth = self.depth_d3 + self.depth_d4
        if not context_depth > detail_depth > boundary_depth:
            raise ValueError(
                "branch depths must be ordered context > detail > boundary, got "
                f"{context_depth} / {detail_depth} / {boundary_depth}"
            )


PRESETS = {
    "tiny": ModelConfig(
        name="tiny", base_width=16, num_classes=3, fusion="pag_bag",
        context="pappm", bag_kind="light", ppm_branch_channels=32,
        depth_shared1=2, depth_shared2=2, depth_i3=2, depth_i4=2, depth_i5=1,
        depth_p3=2, depth_p4=1, depth_d3=1, depth_d4=1, min_divisor=8,
    ),
    "s": ModelConfig(name="s", base_width=32),
    "m": ModelConfig(name="m", base_width=64),
    "l": ModelConfig(
        name="l", base_width=64, fusion="pag_bag", context="dappm",
        bag_kind="full", ppm_branch_channels=128,
        depth_shared1=2, depth_shared2=2, depth_i3=2, depth_i4=3, depth_i5=4,
        depth_p3=2, depth_p4=2, depth_d3=1, depth_d4=1,
    ),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class ForwardOutputs:
    main_logits: Tensor
    boundary_logits: Tensor
    aux_logits: Tensor | None = None


def _block_chain(block, widths, first_stride):
    blocks = [block(widths[0], widths[1], first_stride)]
    for _ in range(len(widths) - 2):
        blocks.append(block(widths[1], widths[1], 1))
    return Sequential(*blocks)


class PIDNet(Module):
    """The assembled three-branch network."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config.base_width
        ppm_in = Bottleneck.EXPANSION * 8 * c

        self.stem = Sequential(
            ConvBN(3, c, 3, 2, 1, act=True, pad_mode="edge"),
            ConvBN(c, c, 3, 2, 1, act=True, pad_mode="edge"),
        )
        self.layer1 = _block_chain(BasicBlock, [c] + [c] * config.depth_shared1, 1)
        self.layer2 = _block_chain(BasicBlock, [c] + [2 * c] * config.depth_shared2, 2)

        self.i3 = _block_chain(BasicBlock, [2 * c] + [4 * c] * config.depth_i3, 2)
        self.i4 = _block_chain(BasicBlock, [4 * c] + [8 * c] * config.depth_i4, 2)
        i5_blocks = [Bottleneck(8 * c, 8 * c, 2)]
        for _ in range(config.depth_i5 - 1):
            i5_blocks.append(Bottleneck(ppm_in, 8 * c, 1))
        self.i5 = Sequential(*i5_blocks)

        self.p3 = _block_chain(BasicBlock, [2 * c] + [2 * c] * config.depth_p3, 1)
        self.p4 = _block_chain(BasicBlock, [2 * c] + [2 * c] * config.depth_p4, 1)
        self.p5 = Bottleneck(2 * c, c // 2, 1)

        self.d3 = _block_chain(BasicBlock, [2 * c] + [c] * config.depth_d3, 1)
        self.d4 = _block_chain(BasicBlock, [c] + [2 * c] * config.depth_d4, 1)
        self.diff3 = AddLateral(4 * c, c)
        self.diff4 = AddLateral(8 * c, 2 * c)

        if config.fusion == "pag_bag":
            self.p_fuse3 = PagFusion(2 * c, 4 * c)
            self.p_fuse4 = PagFusion(2 * c, 8 * c)
            self.fuse = BagFusion(2 * c) if config.bag_kind == "full" else LightBag(2 * c)
        else:
            self.p_fuse3 = AddLateral(4 * c, 2 * c)
            self.p_fuse4 = AddLateral(8 * c, 2 * c)
            self.fuse = None

        context_cls = Pappm if config.context == "pappm" else Dappm
        self.context = context_cls(ppm_in, config.ppm_branch_channels, 4 * c)
        self.compress = ConvBN(4 * c, 2 * c, 1, act=False)

        self.seg_head = SegmentationHead(2 * c, 2 * c, config.num_classes)
        self.boundary_head = BoundaryHead(2 * c, c)
        self.aux_head = SegmentationHead(2 * c, 2 * c, config.num_classes)

        self._lateral_name = "pag" if config.fusion == "pag_bag" else "add"

    # -- forward ----------------------------------------------------------

    def _validate_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected N,3,H,W input, got {x.shape}")
        div = self.config.min_divisor
        if x.shape[2] % div or x.shape[3] % div:
            raise ShapeError(
                f"input extents {x.shape[2]}x{x.shape[3]} must divide by {div} "
                f"for config {self.config.name!r}"
            )

    def forward(self, x: Tensor, taps: dict | None = None,
                stage_stats: list | None = None) -> ForwardOutputs:
        self._validate_input(x)
        lat = self._lateral_name

        def run(name, fn, *args):
            meter = ops.active_meter()
            before = meter.total if (stage_stats is not None and meter is not None) else 0
            y = fn(*args)
            if taps is not None:
                taps[name] = y
            if stage_stats is not None:
                used = meter.total - before if meter is not None else 0
                stage_stats.append((name, y.shape, used))
            return y

        def tap(name, value):
            if taps is not None:
                taps[name] = value

        y = run("stem", self.stem, x)
        y = run("layer1", self.layer1, y)
        shared = run("layer2", self.layer2, y)

        p = run("p3", self.p3, shared)
        i = run("i3", self.i3, shared)
        d = run("d3", self.d3, shared)

        tap(f"{lat}1.p_in", p)
        tap(f"{lat}1.i_in", i)
        p = run(f"{lat}1", self.p_fuse3, p, i)
        if isinstance(self.p_fuse3, PagFusion):
            tap(f"{lat}1.sigma", self.p_fuse3.last_gate)
        aux_src = p
        d = run("diff3", self.diff3, d, i)

        i = run("i4", self.i4, i)
        p = run("p4", self.p4, p)
        d = run("d4", self.d4, d)

        tap(f"{lat}2.p_in", p)
        tap(f"{lat}2.i_in", i)
        p = run(f"{lat}2", self.p_fuse4, p, i)
        if isinstance(self.p_fuse4, PagFusion):
            tap(f"{lat}2.sigma", self.p_fuse4.last_gate)
        d = run("diff4", self.diff4, d, i)

        p = run("p5", self.p5, p)
        i = run("i5", self.i5, i)
        i = run("context", self.context, i)
        i = run("compress", self.compress, i)
        if i.shape[2:] != p.shape[2:]:
            i = ops.bilinear_resize(i, p.shape[2], p.shape[3])
        tap("fusion.p_in", p)
        tap("fusion.i_in", i)
        tap("fusion.d_in", d)
        if self.fuse is None:
            fused = run("fusion", lambda a, b, e: ops.add(ops.add(a, b), e), p, i, d)
        else:
            fused = run("fusion", self.fuse, p, i, d)
            tap("fusion.sigma", self.fuse.last_gate)

        main = run("seg_head", self.seg_head, fused)
        boundary = run("boundary_head", self.boundary_head, d)
        aux = None
        if self.training:
            aux = run("aux_head", self.aux_head, aux_src)
        return ForwardOutputs(main_logits=main, boundary_logits=boundary,
                              aux_logits=aux)

    def tap_names(self):
        """Stage and fusion tap names accepted by forward(taps=...)."""
        lat = self._lateral_name
        names = ["stem", "layer1", "layer2", "p3", "i3", "d3", f"{lat}1",
                 "diff3", "i4", "p4", "d4", f"{lat}2", "diff4", "p5", "i5",
                 "context", "compress", "fusion", "seg_head", "boundary_head"]
        if self.training:
            names.append("aux_head")
        return names

    # -- accounting --------------------------------------------------------

    def count_params(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def count_flops(self, input_h: int, input_w: int) -> int:
        """Analytic per-image FLOPs (multiply-accumulates doubled) of the
        inference path: the auxiliary head is excluded, everything else in
        the eval forward is walked with the same per-op charges the runtime
        meter applies."""
        div = self.config.min_divisor
        if input_h % div or input_w % div:
            raise ShapeError(f"input extents must divide by {div}")
        c = self.config.base_width
        total, hw4 = self.stem.flop_count(input_h, input_w)
        f, hw4 = self.layer1.flop_count(*hw4)
        total += f
        f, hw8 = self.layer2.flop_count(*hw4)
        total += f

        f, p_hw = self.p3.flop_count(*hw8)
        total += f
        f, hw16 = self.i3.flop_count(*hw8)
        total += f
        f, d_hw = self.d3.flop_count(*hw8)
        total += f

        f, p_hw = self.p_fuse3.flop_count(p_hw, hw16)
        total += f
        f, d_hw = self.diff3.flop_count(d_hw, hw16)
        total += f

        f, hw32 = self.i4.flop_count(*hw16)
        total += f
        f, p_hw = self.p4.flop_count(*p_hw)
        total += f
        f, d_hw = self.d4.flop_count(*d_hw)
        total += f

        f, p_hw = self.p_fuse4.flop_count(p_hw, hw32)
        total += f
        f, d_hw = self.diff4.flop_count(d_hw, hw32)
        total += f

        f, p_hw = self.p5.flop_count(*p_hw)
        total += f
        f, hw64 = self.i5.flop_count(*hw32)
        total += f
        f, hw64 = self.context.flop_count(*hw64)
        total += f
        f, i_hw = self.compress.flop_count(*hw64)
        total += f
        if i_hw != p_hw:
            total += 8 * 2 * c * p_hw[0] * p_hw[1]
        if self.fuse is None:
            total += 2 * 2 * c * p_hw[0] * p_hw[1]
        else:
            f, _ = self.fuse.flop_count(*p_hw)
            total += f
        f, _ = self.seg_head.flop_count(*p_hw)
        total += f
        f, _ = self.boundary_head.flop_count(*d_hw)
        total += f
        return total


def build_pidnet(config: ModelConfig | str, seed: int | None = None) -> PIDNet:
    """Construct a network from a config or preset name, optionally seeding
    every conv weight by its qualified parameter name."""
    from .nn import init_parameters

    if isinstance(config, str):
        config = preset(config)
    model = PIDNet(config)
    if seed is not None:
        init_parameters(model, seed)
    return model


def summary(model: PIDNet, input_h: int, input_w: int) -> str:
    """Per-stage text table: layer, output shape, params, analytic FLOPs."""
    was_training = model.training
    model.eval()
    ppm_flags = [(m, m.batched_eval) for m in model.modules() if isinstance(m, Pappm)]
    for m, _ in ppm_flags:
        m.batched_eval = False
    try:
        x = Tensor(np.zeros((1, 3, input_h, input_w), dtype=default_dtype()))
        stats: list = []
        with ops.metered_flops():
            model.forward(x, stage_stats=stats)
    finally:
        for m, flag in ppm_flags:
            m.batched_eval = flag
        model.train(was_training)

    child_params = {}
    for name, child in model._children.items():
        child_params[name] = sum(p.size for _, p in child.named_parameters())
    stage_to_child = {"pag1": "p_fuse3", "add1": "p_fuse3",
                      "pag2": "p_fuse4", "add2": "p_fuse4", "fusion": "fuse"}
    rows = [("layer", "output shape", "params", "flops")]
    for name, shape, flops in stats:
        child = stage_to_child.get(name, name)
        params = child_params.get(child, 0)
        rows.append((name, "x".join(str(s) for s in shape), str(params), str(flops)))
    rows.append(("total", f"input 1x3x{input_h}x{input_w}",
                 str(model.count_params()), str(model.count_flops(input_h, input_w))))
    widths = [max(len(r[k]) for r in rows) for k in range(4)]
    lines = ["  ".join(col.ljust(w) for col, w in zip(row, widths)).rstrip()
             for row in rows]
    return "\n".join(lines) + "\n"


def config_from_values(values) -> ModelConfig:
    """Rebuild a config from the numeric field list used in checkpoints."""
    ints = [int(round(v)) for v in values]
    if len(ints) != 17:
        raise ValueError(f"expected 17 config values, got {len(ints)}")
    cfg = ModelConfig(
        name="custom",
        base_width=ints[0], num_classes=ints[1],
        fusion=FUSION_KINDS[ints[2]], context=CONTEXT_KINDS[ints[3]],
        bag_kind=BAG_KINDS[ints[4]], ppm_branch_channels=ints[5],
        depth_shared1=ints[6], depth_shared2=ints[7],
        depth_i3=ints[8], depth_i4=ints[9], depth_i5=ints[10],
        depth_p3=ints[11], depth_p4=ints[12],
        depth_d3=ints[13], depth_d4=ints[14],
        boundary_radius=ints[15], min_divisor=ints[16],
    )
    for name, pre in PRESETS.items():
        if replace(cfg, name=name) == pre:
            return pre
    return cfg


def config_to_values(cfg: ModelConfig):
    return [
        cfg.base_width, cfg.num_classes,
        FUSION_KINDS.index(cfg.fusion), CONTEXT_KINDS.index(cfg.context),
        BAG_KINDS.index(cfg.bag_kind), cfg.ppm_branch_channels,
        cfg.depth_shared1, cfg.depth_shared2,
        cfg.depth_i3, cfg.depth_i4, cfg.depth_i5,
        cfg.depth_p3, cfg.depth_p4, cfg.depth_d3, cfg.depth_d4,
        cfg.boundary_radius, cfg.min_divisor,
    ]
