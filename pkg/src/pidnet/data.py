"""Synthetic segmentation scenes and the training-time data pipeline.

Scenes are layered colored shapes on a noisy background, a pure function of
(seed, index): the same pair always yields byte-identical arrays, so any
corpus slice is reproducible without storage. Labels use 255 as ignore.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import pnm
from .losses import IGNORE_ID

SHAPE_KINDS = ("rectangle", "disk", "triangle")


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for one deterministic corpus of layered-shape scenes."""

    seed: int = 0
    height: int = 64
    width: int = 64
    num_classes: int = 3
    shapes_min: int = 2
    shapes_max: int = 5
    kinds: tuple[str, ...] = SHAPE_KINDS
    noise: float = 0.04
    texture_jitter: float = 0.1

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.height < 8 or self.width < 8:
            raise ValueError(f"extent too small: {self.height}x{self.width}")
        if not 0 <= self.shapes_min <= self.shapes_max:
            raise ValueError(
                f"bad shape count range [{self.shapes_min}, {self.shapes_max}]"
            )
        for k in self.kinds:
            if k not in SHAPE_KINDS:
                raise ValueError(f"unknown shape kind {k!r}")
        if not self.kinds:
            raise ValueError("at least one shape kind is required")
        if self.noise < 0 or self.texture_jitter < 0:
            raise ValueError("noise and texture_jitter must be >= 0")


def class_palette(num_classes: int) -> np.ndarray:
    """Well-separated RGB anchor per class, shape (K, 3), values in [0.1, 0.9]."""
    phases = 2.0 * np.pi * np.arange(num_classes)[:, None] / num_classes
    offsets = np.array([0.0, 2.0 * np.pi / 3.0, 4.0 * np.pi / 3.0])[None, :]
    return 0.5 + 0.4 * np.cos(phases + offsets)


def _disk_mask(h, w, rng):
    r = rng.uniform(1.5, max(1.6, min(h, w) / 5.0))
    cy = rng.uniform(r, h - r)
    cx = rng.uniform(r, w - r)
    ii, jj = np.mgrid[0:h, 0:w]
    return (ii - cy) ** 2 + (jj - cx) ** 2 <= r * r


def _rect_mask(h, w, rng):
    rh = int(rng.integers(3, max(4, h // 2)))
    rw = int(rng.integers(3, max(4, w // 2)))
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    mask = np.zeros((h, w), dtype=bool)
    mask[top:top + rh, left:left + rw] = True
    return mask


def _triangle_mask(h, w, rng):
    for _ in range(20):
        ys = rng.uniform(0, h - 1, size=3)
        xs = rng.uniform(0, w - 1, size=3)
        if np.ptp(ys) >= 3 and np.ptp(xs) >= 3:
            break
    ii, jj = np.mgrid[0:h, 0:w]
    inside = np.ones((h, w), dtype=bool)
    area = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (ys[1] - ys[0])
    if area < 0:
        xs = xs[::-1]
        ys = ys[::-1]
    for a in range(3):
        b = (a + 1) % 3
        cross = ((xs[b] - xs[a]) * (ii - ys[a])
                 - (jj - xs[a]) * (ys[b] - ys[a]))
        inside &= cross >= 0
    return inside


_RASTERIZERS = {"rectangle": _rect_mask, "disk": _disk_mask,
                "triangle": _triangle_mask}


def scene_rng(spec: SceneSpec, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((spec.seed, index)))


def gen_scene(spec: SceneSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Render scene `index`: float32 image (3, H, W) in [0, 1] and int64
    label map (H, W). Labels follow the topmost shape at each pixel."""
    if index < 0:
        raise ValueError(f"index must be >= 0, got {index}")
    rng = scene_rng(spec, index)
    h, w = spec.height, spec.width
    palette = class_palette(spec.num_classes)

    labels = np.zeros((h, w), dtype=np.int64)
    image = np.empty((3, h, w), dtype=np.float64)
    bg_tone = 1.0 + spec.texture_jitter * rng.uniform(-1.0, 1.0)
    image[:] = (palette[0] * bg_tone).clip(0.0, 1.0)[:, None, None]

    n_shapes = int(rng.integers(spec.shapes_min, spec.shapes_max + 1))
    for _ in range(n_shapes):
        kind = spec.kinds[int(rng.integers(0, len(spec.kinds)))]
        cls = int(rng.integers(1, spec.num_classes))
        mask = _RASTERIZERS[kind](h, w, rng)
        tone = 1.0 + spec.texture_jitter * rng.uniform(-1.0, 1.0)
        color = (palette[cls] * tone).clip(0.0, 1.0)
        image[:, mask] = color[:, None]
        labels[mask] = cls

    image += rng.normal(0.0, spec.noise, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), labels


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and augmentation knobs for the desk-scale loop."""

    iters: int = 2000
    base_lr: float = 0.05
    poly_power: float = 0.9
    weight_decay: float = 5e-4
    momentum: float = 0.9
    batch_size: int = 4
    crop: tuple[int, int] = (64, 64)
    scale_range: tuple[float, float] = (0.5, 2.0)
    flip_prob: float = 0.5
    seed: int = 0
    ohem: bool = False
    eval_every: int = 250
    stop_lr: float | None = None

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError(f"iters must be >= 1, got {self.iters}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad scale_range {self.scale_range}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.stop_lr is not None and not 0 < self.stop_lr < self.base_lr:
            raise ValueError(
                f"stop_lr must lie in (0, base_lr), got {self.stop_lr}"
            )


def poly_lr(base_lr: float, iteration: int, max_iter: int,
            power: float = 0.9) -> float:
    """Polynomial decay base_lr * (1 - iteration/max_iter)^power."""
    if max_iter == 0:
        raise ValueError("max_iter must be nonzero")
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return float(base_lr * (1.0 - iteration / max_iter) ** power)


@dataclass(frozen=True)
class FullRecipe:
    """Full-scale published schedule, kept for reference.

    These run for days on real hardware; desk-scale work builds a
    TrainConfig directly instead.
    """

    epochs: int
    base_lr: float
    weight_decay: float
    crop: tuple[int, int]
    batch_size: int
    stop_lr: float | None = None


FULL_RECIPES = {
    "cityscapes": FullRecipe(epochs=484, base_lr=1e-2, weight_decay=5e-4,
                             crop=(1024, 1024), batch_size=12),
    "camvid": FullRecipe(epochs=200, base_lr=1e-3, weight_decay=5e-4,
                         crop=(720, 960), batch_size=12, stop_lr=5e-4),
    "pascal-context": FullRecipe(epochs=200, base_lr=1e-3, weight_decay=1e-4,
                                 crop=(520, 520), batch_size=16),
}


def recipe_config(name: str, dataset_len: int, seed: int = 0) -> TrainConfig:
    """Expand a named full-scale recipe into a TrainConfig.

    Iteration count is epochs times ceil(dataset_len / batch_size), matching
    a per-epoch pass over a dataset of the given length.
    """
    if name not in FULL_RECIPES:
        raise ValueError(
            f"unknown recipe {name!r}; choose from {sorted(FULL_RECIPES)}"
        )
    if dataset_len < 1:
        raise ValueError(f"dataset_len must be >= 1, got {dataset_len}")
    recipe = FULL_RECIPES[name]
    steps_per_epoch = -(-dataset_len // recipe.batch_size)
    return TrainConfig(
        iters=recipe.epochs * steps_per_epoch,
        base_lr=recipe.base_lr,
        weight_decay=recipe.weight_decay,
        batch_size=recipe.batch_size,
        crop=recipe.crop,
        seed=seed,
        stop_lr=recipe.stop_lr,
    )


def _nearest_index(out_len: int, in_len: int) -> np.ndarray:
    src = (np.arange(out_len) + 0.5) * (in_len / out_len) - 0.5
    return np.clip(np.rint(src), 0, in_len - 1).astype(np.int64)


def _bilinear_axis(arr: np.ndarray, out_len: int, axis: int) -> np.ndarray:
    in_len = arr.shape[axis]
    src = np.clip((np.arange(out_len) + 0.5) * (in_len / out_len) - 0.5,
                  0.0, in_len - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_len - 1)
    frac = (src - lo).astype(arr.dtype)
    shape = [1] * arr.ndim
    shape[axis] = out_len
    frac = frac.reshape(shape)
    return (np.take(arr, lo, axis=axis) * (1 - frac)
            + np.take(arr, hi, axis=axis) * frac)


def _pad_to(image: np.ndarray, labels: np.ndarray, min_h: int, min_w: int):
    h, w = labels.shape
    if h >= min_h and w >= min_w:
        return image, labels
    add_h, add_w = max(0, min_h - h), max(0, min_w - w)
    top, left = add_h // 2, add_w // 2
    pads = ((top, add_h - top), (left, add_w - left))
    # mirror the image context, but never invent label evidence
    while pads != ((0, 0), (0, 0)):
        ph, pw = labels.shape
        step = ((min(pads[0][0], ph), min(pads[0][1], ph)),
                (min(pads[1][0], pw), min(pads[1][1], pw)))
        image = np.pad(image, ((0, 0), *step), mode="symmetric")
        labels = np.pad(labels, step, mode="constant",
                        constant_values=IGNORE_ID)
        pads = tuple((a - sa, b - sb)
                     for (a, b), (sa, sb) in zip(pads, step))
    return image, labels


def augment(image: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Joint random scale, horizontal flip, and crop.

    The image is resampled bilinearly and the label map by nearest neighbor,
    both under the half-pixel convention; crops falling outside the scaled
    extent see mirrored image content under ignore labels. Draw order is
    fixed (scale, flip, crop) so seeded runs replay exactly.
    """
    if image.shape[1:] != labels.shape:
        raise ValueError(
            f"image extent {image.shape[1:]} does not match labels {labels.shape}"
        )
    h, w = labels.shape
    s = rng.uniform(cfg.scale_range[0], cfg.scale_range[1])
    nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    if (nh, nw) != (h, w):
        image = _bilinear_axis(_bilinear_axis(image, nh, 1), nw, 2)
        labels = labels[np.ix_(_nearest_index(nh, h), _nearest_index(nw, w))]
    if rng.uniform() < cfg.flip_prob:
        image = image[:, :, ::-1]
        labels = labels[:, ::-1]
    ch, cw = cfg.crop
    image, labels = _pad_to(image, labels, ch, cw)
    top = int(rng.integers(0, labels.shape[0] - ch + 1))
    left = int(rng.integers(0, labels.shape[1] - cw + 1))
    return (np.ascontiguousarray(image[:, top:top + ch, left:left + cw]),
            np.ascontiguousarray(labels[top:top + ch, left:left + cw]))


class SceneDataset:
    """Fixed-length view of the (seed, index) scene corpus.

    Generation is a pure per-index function, so optional thread workers
    (PIDNET_THREADS) change wall time only, never content.
    """

    def __init__(self, spec: SceneSpec, length: int, offset: int = 0):
        if length < 0:
            raise ValueError(f"length must be >= 0, got {length}")
        self.spec = spec
        self.length = length
        self.offset = offset

    def __len__(self) -> int:
        return self.length

    def __getitem__(self, i: int):
        if not 0 <= i < self.length:
            raise IndexError(i)
        return gen_scene(self.spec, self.offset + i)

    def batch(self, indices) -> list[tuple[np.ndarray, np.ndarray]]:
        indices = list(indices)
        workers = _worker_count()
        if workers <= 1 or len(indices) <= 1:
            return [self[i] for i in indices]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(self.__getitem__, indices))


def _worker_count() -> int:
    raw = os.environ.get("PIDNET_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"PIDNET_THREADS must be an integer, got {raw!r}")
    return max(1, n)


def export_dataset(spec: SceneSpec, count: int, out_dir, offset: int = 0) -> str:
    """Write `count` scenes as PPM/PGM pairs plus a manifest of
    "index,image-path,label-path" lines. Returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for i in range(count):
        image, labels = gen_scene(spec, offset + i)
        img_rel = f"scene_{offset + i:05d}.ppm"
        lbl_rel = f"scene_{offset + i:05d}.pgm"
        pnm.write_ppm(os.path.join(out_dir, img_rel), image)
        pnm.write_pgm(os.path.join(out_dir, lbl_rel), labels.astype(np.uint8))
        lines.append(f"{offset + i},{img_rel},{lbl_rel}")
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w") as f:
        f.write("\n".join(lines) + "\n")
    return manifest


class ManifestDataset:
    """Samples read back from an export_dataset manifest."""

    def __init__(self, manifest_path):
        self.root = os.path.dirname(os.path.abspath(manifest_path))
        self.rows = []
        with open(manifest_path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                idx, img, lbl = line.split(",")
                self.rows.append((int(idx), img, lbl))

    def __len__(self) -> int:
        return len(self.rows)

    def __getitem__(self, i: int):
        _, img, lbl = self.rows[i]
        image = pnm.read_ppm(os.path.join(self.root, img))
        labels = pnm.read_pgm(os.path.join(self.root, lbl)).astype(np.int64)
        return image, labels
