"""Desk-scale training, evaluation, and latency measurement.

The training loop is deterministic end to end: batch order is a seeded
permutation per epoch, augmentation draws come from per-sample generators
keyed on (seed, serial), and parameter updates follow the fixed reduction
order of the tensor core. Two runs with equal seeds produce identical
metrics files and checkpoints.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .checkpoint import save_checkpoint
from .data import SceneDataset, TrainConfig, augment, poly_lr
from .losses import (LossBreakdown, LossWeights, bas_loss, composite_loss,
                     cross_entropy, extract_boundary_gt, ohem_cross_entropy,
                     weighted_bce)
from .metrics import boundary_f_score, confusion_matrix, iou_per_class
from .network import PIDNet
from .nn import SGD, fuse_model
from .tensor import Tape, Tensor, backward, default_dtype

CSV_HEADER = "iter,l0,l1,l2,l3,total,miou,boundary_f"


class TrainingDiverged(RuntimeError):
    """Raised when a loss term stops being finite."""

    def __init__(self, iteration: int, tensor_name: str, value: float):
        super().__init__(
            f"non-finite value {value} in {tensor_name} at iteration {iteration}"
        )
        self.iteration = iteration
        self.tensor_name = tensor_name


@dataclass
class EvalResult:
    miou: float
    ious: np.ndarray
    boundary_f: float
    confusion: np.ndarray


@dataclass
class TrainResult:
    csv_rows: list[str]
    final_eval: EvalResult
    loss_trace: list[float] = field(default_factory=list)
    checkpoint_path: str | None = None
    metrics_path: str | None = None


def _zero_scalar() -> Tensor:
    return Tensor(np.zeros((), dtype=default_dtype()))


def _first_non_finite(iteration: int, breakdown: LossBreakdown) -> None:
    names = (("aux cross entropy", breakdown.l0),
             ("boundary bce", breakdown.l1),
             ("main cross entropy", breakdown.l2),
             ("boundary-gated cross entropy", breakdown.l3),
             ("total loss", breakdown.total))
    for name, t in names:
        v = float(t.data)
        if not np.isfinite(v):
            raise TrainingDiverged(iteration, name, v)


def compute_losses(model: PIDNet, images: Tensor, labels: np.ndarray,
                   weights: LossWeights, ohem: bool) -> LossBreakdown:
    """Forward the batch and assemble the four-term objective at label
    resolution. Boundary terms with zero weight are left out of the graph
    entirely, so their head receives no gradient."""
    h, w = labels.shape[1:]
    out = model.forward(images)
    main_up = ops.bilinear_resize(out.main_logits, h, w)
    if ohem:
        l2 = ohem_cross_entropy(main_up, labels)
    else:
        l2 = cross_entropy(main_up, labels)
    need_boundary = weights.lambda1 > 0 or weights.lambda3 > 0
    boundary_up = None
    if need_boundary:
        boundary_up = ops.bilinear_resize(out.boundary_logits, h, w)
    if weights.lambda1 > 0:
        gt = extract_boundary_gt(labels, radius=model.config.boundary_radius)
        l1 = weighted_bce(boundary_up, gt)
    else:
        l1 = _zero_scalar()
    if weights.lambda3 > 0:
        l3 = bas_loss(main_up, labels, boundary_up,
                      threshold=weights.boundary_threshold)
    else:
        l3 = _zero_scalar()
    if out.aux_logits is not None:
        l0 = cross_entropy(ops.bilinear_resize(out.aux_logits, h, w), labels)
    else:
        l0 = _zero_scalar()
    return composite_loss(l0, l1, l2, l3, weights)


def _epoch_order(seed: int, epoch: int, n: int) -> list[int]:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 101, epoch)))
    return rng.permutation(n).tolist()


def _augment_rng(seed: int, serial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, 202, serial)))


def train_loop(model: PIDNet, cfg: TrainConfig, train_set: SceneDataset,
               val_set: SceneDataset, weights: LossWeights = LossWeights(),
               out_dir: str | None = None) -> TrainResult:
    """Optimize with momentum SGD under the polynomial schedule, logging an
    evaluation row every cfg.eval_every iterations and at the end."""
    if len(train_set) == 0:
        raise ValueError("training dataset is empty")
    if len(val_set) == 0:
        raise ValueError("validation dataset is empty")
    model.train()
    opt = SGD(model.parameters(), cfg.base_lr, cfg.momentum, cfg.weight_decay)
    rows = [CSV_HEADER]
    queue: list[int] = []
    epoch = 0
    serial = 0
    ckpt_path = metrics_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(out_dir, "checkpoint.ckpt")
        metrics_path = os.path.join(out_dir, "metrics.csv")

    final_eval = None
    trace: list[float] = []
    logged_it = 0
    breakdown = None
    for it in range(1, cfg.iters + 1):
        lr = poly_lr(cfg.base_lr, it - 1, cfg.iters, cfg.poly_power)
        if cfg.stop_lr is not None and lr < cfg.stop_lr:
            break
        while len(queue) < cfg.batch_size:
            queue.extend(_epoch_order(cfg.seed, epoch, len(train_set)))
            epoch += 1
        idxs, queue = queue[:cfg.batch_size], queue[cfg.batch_size:]
        samples = train_set.batch(idxs)
        imgs, lbls = [], []
        for image, labels in samples:
            image, labels = augment(image, labels, cfg,
                                    _augment_rng(cfg.seed, serial))
            serial += 1
            imgs.append(image)
            lbls.append(labels)
        x = Tensor(np.stack(imgs))
        y = np.stack(lbls)

        with Tape() as tape:
            breakdown = compute_losses(model, x, y, weights, cfg.ohem)
        _first_non_finite(it, breakdown)
        trace.append(float(breakdown.total.data))
        backward(breakdown.total, tape)
        opt.step(lr)
        opt.zero_grad()

        if it % cfg.eval_every == 0 or it == cfg.iters:
            result = eval_loop(model, val_set)
            l0, l1, l2, l3, total = breakdown.values()
            rows.append(
                f"{it},{l0:.8g},{l1:.8g},{l2:.8g},{l3:.8g},{total:.8g},"
                f"{result.miou:.8g},{result.boundary_f:.8g}"
            )
            model.train()
            final_eval = result
            logged_it = it
            if out_dir is not None:
                save_checkpoint(model, ckpt_path)
                with open(metrics_path, "w") as f:
                    f.write("\n".join(rows) + "\n")

    completed = len(trace)
    if completed and logged_it != completed:
        # stopped early on the lr floor; log the last finished iteration
        result = eval_loop(model, val_set)
        l0, l1, l2, l3, total = breakdown.values()
        rows.append(
            f"{completed},{l0:.8g},{l1:.8g},{l2:.8g},{l3:.8g},{total:.8g},"
            f"{result.miou:.8g},{result.boundary_f:.8g}"
        )
        model.train()
        final_eval = result
        if out_dir is not None:
            save_checkpoint(model, ckpt_path)
            with open(metrics_path, "w") as f:
                f.write("\n".join(rows) + "\n")

    return TrainResult(csv_rows=rows, final_eval=final_eval, loss_trace=trace,
                       checkpoint_path=ckpt_path, metrics_path=metrics_path)


def eval_loop(model: PIDNet, dataset) -> EvalResult:
    """Single-image evaluation pass accumulating one confusion matrix.

    Predictions are the channel argmax of the main logits upsampled to label
    resolution; the boundary score compares class edges with the model
    config's dilation radius as tolerance.
    """
    if len(dataset) == 0:
        raise ValueError("evaluation dataset is empty")
    was_training = model.training
    model.eval()
    k = model.config.num_classes
    conf = np.zeros((k, k), dtype=np.int64)
    preds, gts = [], []
    for i in range(len(dataset)):
        image, labels = dataset[i]
        h, w = labels.shape
        out = model.forward(Tensor(image[None]))
        logits = ops.bilinear_resize(out.main_logits, h, w)
        pred = np.argmax(logits.data[0], axis=0)
        conf += confusion_matrix(pred, labels, k)
        preds.append(pred)
        gts.append(labels)
    if was_training:
        model.train()
    if conf.sum() == 0:
        raise ValueError("no valid pixels in the evaluation dataset")
    ious = iou_per_class(conf)
    bf = boundary_f_score(np.stack(preds), np.stack(gts), k,
                          radius=model.config.boundary_radius)
    return EvalResult(miou=float(np.nanmean(ious)), ious=ious,
                      boundary_f=bf, confusion=conf)


@dataclass
class BenchResult:
    median_s: float
    p5_s: float
    p95_s: float
    fps: float
    fused: bool
    fuse_max_err: float | None = None
    times_s: list[float] = field(default_factory=list)


def bench(model: PIDNet, h: int, w: int, warmup: int = 3, runs: int = 20,
          fuse_bn: bool = False, seed: int = 0) -> BenchResult:
    """Wall-clock single-image forward latency in eval mode.

    With fuse_bn the normalization layers are folded into their convolutions
    first, and the fused output is checked against the unfused one (max abs
    difference at most 1e-5) before any timing happens.
    """
    if warmup < 0 or runs < 1:
        raise ValueError(f"need warmup >= 0 and runs >= 1, got {warmup}/{runs}")
    model.eval()
    rng = np.random.default_rng(np.random.SeedSequence((seed, 303)))
    x = Tensor(rng.normal(size=(1, 3, h, w)).astype(np.float32))
    fuse_err = None
    if fuse_bn:
        reference = model.forward(x).main_logits.data.copy()
        fuse_model(model)
        fused_out = model.forward(x).main_logits.data
        # normalize by output magnitude: single-precision refactoring noise
        # grows with activation scale, the agreement contract should not
        denom = max(1.0, float(np.max(np.abs(reference))))
        fuse_err = float(np.max(np.abs(fused_out - reference))) / denom
        if fuse_err > 1e-5:
            raise RuntimeError(
                f"fused output deviates by {fuse_err:.3g} relative (limit 1e-5)"
            )
    for _ in range(warmup):
        model.forward(x)
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        model.forward(x)
        times.append(time.perf_counter() - t0)
    arr = np.array(times)
    median = float(np.median(arr))
    return BenchResult(median_s=median,
                       p5_s=float(np.percentile(arr, 5)),
                       p95_s=float(np.percentile(arr, 95)),
                       fps=1.0 / median,
                       fused=fuse_bn,
                       fuse_max_err=fuse_err,
                       times_s=times)
