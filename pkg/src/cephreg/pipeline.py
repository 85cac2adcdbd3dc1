"""Two-stage attention-guided landmark detection.

The global stage regresses coarse heatmaps on a heavily downscaled image.
Their per-channel maxima become the centres of proposal regions on a
higher-resolution copy, where a patch-based u-net regresses fine heatmaps.
Each proposal is explored with five overlapping patches (four corners of an
expanded square plus its centre); patch outputs are averaged into a merged
canvas and decoded by thresholded centroid.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dataset import CephItem, resize_area, sample_patch, stage_targets, standardize
from .heatmap import (Frame, HeatmapStack, LandmarkSet, check_frame, decode_coarse, decode_fine,
                      rescale_landmarks)
from .loss import LossConfig, heatmap_loss_logits
from .tensor import Tensor
from .unet import UNet, UNetConfig, build_unet

log = logging.getLogger(__name__)

MODES = ("full", "no-expand", "stage1")


@dataclass(frozen=True)
class StageConfig:
    scale_factor: float
    distribution_width: float
    patch_size: int | None = None          # None: whole image (global stage)
    inference_patch_size: int | None = None
    expand_epsilon: float = 1.8
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 4
    samples_per_epoch: int | None = None   # local stage; default one patch per item
    unet: UNetConfig = UNetConfig()

    def __post_init__(self):
        if self.scale_factor <= 0 or self.distribution_width <= 0:
            raise ValueError("scale_factor and distribution_width must be positive")
        if not 1.0 < self.expand_epsilon < 2.0:
            raise ValueError(f"expand_epsilon must lie in (1, 2), got {self.expand_epsilon}")
        if self.patch_size is not None and self.inference_patch_size is not None \
                and self.inference_patch_size < self.patch_size:
            raise ValueError("inference_patch_size must be >= patch_size")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")


GLOBAL_STAGE = StageConfig(scale_factor=0.15, distribution_width=40)
LOCAL_STAGE = StageConfig(scale_factor=0.5, distribution_width=30, patch_size=100, inference_patch_size=150)


@dataclass(frozen=True)
class Region:
    x: int
    y: int
    side: int
    frame: Frame = Frame.LOCAL
    anchor: int | None = None

    def __post_init__(self):
        if self.side <= 0:
            raise ValueError(f"region side must be positive, got {self.side}")

    def pixels(self) -> set[tuple[int, int]]:
        return {(x, y) for y in range(self.y, self.y + self.side) for x in range(self.x, self.x + self.side)}


def _round(v: float) -> int:
    return int(math.floor(v + 0.5))


def expanded_side(patch_size: int, epsilon: float) -> int:
    return _round(epsilon * patch_size)


def expansive_regions(center, patch_size: int, epsilon: float, canvas: tuple[int, int] | None = None,
                      anchor: int | None = None, frame: Frame = Frame.LOCAL) -> list[Region]:
    """Four corner patches of the ``epsilon * P`` square around ``center`` plus a centred one.

    Order: top-left, top-right, bottom-left, bottom-right, centre.  When a
    canvas is given the whole square is shifted inward so that it lies on the
    canvas; each patch is then clamped individually if the canvas is smaller
    than the square.
    """
    if not 1.0 <= epsilon <= 2.0:
        raise ValueError(f"epsilon must lie in [1, 2], got {epsilon}")
    p = patch_size
    e = expanded_side(p, epsilon)
    cx, cy = _round(center[0]), _round(center[1])
    left, top = cx - e // 2, cy - e // 2
    mid_x, mid_y = cx - p // 2, cy - p // 2
    if canvas is not None:
        h, w = canvas
        if p > h or p > w:
            raise ValueError(f"patch size {p} exceeds canvas {h}x{w}")
        dx = _shift_inside(left, e, w) if e <= w else 0
        dy = _shift_inside(top, e, h) if e <= h else 0
        left, top, mid_x, mid_y = left + dx, top + dy, mid_x + dx, mid_y + dy
    corners = [(left, top), (left + e - p, top), (left, top + e - p), (left + e - p, top + e - p), (mid_x, mid_y)]
    out = []
    for x, y in corners:
        if canvas is not None:
            x = min(max(x, 0), canvas[1] - p)
            y = min(max(y, 0), canvas[0] - p)
        out.append(Region(x, y, p, frame, anchor))
    return out


def _shift_inside(start: int, size: int, limit: int) -> int:
    if start < 0:
        return -start
    if start + size > limit:
        return limit - size - start
    return 0


def propose_regions(coarse: LandmarkSet, patch_size: int, epsilon: float,
                    canvas: tuple[int, int] | None = None) -> list[list[Region]]:
    check_frame(coarse.frame, Frame.LOCAL, "coarse landmarks")
    return [expansive_regions(pt, patch_size, epsilon, canvas, anchor=i, frame=coarse.frame)
            for i, pt in enumerate(coarse.points)]


def merge_patches(patches, canvas: tuple[int, int], all_channels: bool = False,
                  frame: Frame = Frame.LOCAL) -> HeatmapStack:
    """Average patch predictions over the canvas; uncovered pixels stay 0.

    ``patches`` is a sequence of (HeatmapStack or array, Region).  By default a
    patch only contributes its anchor landmark's channel and the background
    channel.
    """
    h, w = canvas
    acc = None
    for stack, region in patches:
        ch = np.asarray(getattr(stack, "channels", stack), dtype=np.float64)
        if acc is None:
            c = ch.shape[0]
            acc = np.zeros((c, h, w))
            cnt = np.zeros((c, h, w))
        if region.x < 0 or region.y < 0 or region.x + region.side > w or region.y + region.side > h:
            raise ValueError(f"region {region} lies outside the {h}x{w} canvas")
        if ch.shape[1:] != (region.side, region.side):
            raise ValueError(f"patch shape {ch.shape} does not match region side {region.side}")
        if all_channels or region.anchor is None:
            chans = slice(None)
        else:
            chans = [region.anchor, c - 1]
        sl = (chans, slice(region.y, region.y + region.side), slice(region.x, region.x + region.side))
        acc[sl] += ch[chans]
        cnt[sl] += 1.0
    if acc is None:
        raise ValueError("no patches to merge")
    merged = np.divide(acc, cnt, out=np.zeros_like(acc), where=cnt > 0)
    return HeatmapStack(merged, frame)


# ------------------------------------------------------------------ training


@dataclass
class TrainLog:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float | None] = field(default_factory=list)

    def add(self, epoch: int, train: float, val: float | None) -> None:
        self.epochs.append(epoch)
        self.train_loss.append(train)
        self.val_loss.append(val)

    def to_csv(self, path) -> None:
        rows = ["epoch,train_loss,val_loss"]
        for e, t, v in zip(self.epochs, self.train_loss, self.val_loss):
            rows.append(f"{e},{t:.9g}," + ("" if v is None else f"{v:.9g}"))
        with open(path, "w") as fh:
            fh.write("\n".join(rows) + "\n")


def _batch_loss(model: UNet, images: np.ndarray, targets: np.ndarray, loss_cfg: LossConfig, epoch: int,
                train: bool, opt: T.Adam | None = None) -> float:
    x = Tensor(images[:, None])
    if not train:
        return heatmap_loss_logits(model.forward_padded(x, logits=True), targets, loss_cfg, len(images), epoch).item()
    with T.Tape() as tape:
        loss = heatmap_loss_logits(model.forward_padded(x, logits=True), targets, loss_cfg, len(images), epoch)
    tape.backward(loss)
    opt.step()
    return loss.item()


def _require(items, frame: Frame, what: str):
    if not items:
        raise ValueError(f"{what}: empty dataset")
    for it in items:
        check_frame(it.frame, frame, f"{what} item {it.id}")


def train_global(items: list[CephItem], config: StageConfig, seed: int = 0, loss_cfg: LossConfig = LossConfig(),
                 val_items: list[CephItem] | None = None, source: str = "average",
                 dtype=np.float32) -> tuple[UNet, TrainLog]:
    """Fit the global u-net on whole downscaled images (items already in the global frame)."""
    _require(items, Frame.GLOBAL, "train_global")
    images = np.stack([standardize(it.image) for it in items]).astype(dtype)
    targets = np.stack([stage_targets(it, config.distribution_width, source, dtype) for it in items])
    model = build_unet(config.unet, seed, dtype)
    opt = T.Adam(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(seed)
    val = None
    if val_items:
        _require(val_items, Frame.GLOBAL, "train_global validation")
        val = (np.stack([standardize(it.image) for it in val_items]).astype(dtype),
               np.stack([stage_targets(it, config.distribution_width, source, dtype) for it in val_items]))
    history = TrainLog()
    for epoch in range(config.epochs):
        order = rng.permutation(len(items))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            losses.append(_batch_loss(model, images[idx], targets[idx], loss_cfg, epoch, True, opt))
        vloss = None
        if val is not None:
            vloss = float(np.mean([_batch_loss(model, val[0][i:i + 1], val[1][i:i + 1], loss_cfg, epoch, False)
                                   for i in range(len(val[0]))]))
        history.add(epoch, float(np.mean(losses)), vloss)
        log.info("global epoch %d loss %.4f", epoch, history.train_loss[-1])
    return model, history


class PatchSampler:
    """Draws (image patch, target patch) pairs around random landmarks of random items."""

    def __init__(self, items: list[CephItem], patch_size: int, distribution_width: float,
                 source: str = "average", dtype=np.float32):
        self.patch_size = patch_size
        self.images = [standardize(it.image).astype(dtype) for it in items]
        self.targets = [stage_targets(it, distribution_width, source, dtype) for it in items]
        self.landmarks = [it.ground_truth(source) for it in items]
        for it in items:
            h, w = it.image.shape
            if patch_size > h or patch_size > w:
                raise ValueError(f"patch size {patch_size} exceeds image {h}x{w} of item {it.id}")

    def __len__(self) -> int:
        return len(self.images)

    def draw(self, item_index: int, rng):
        return sample_patch(self.images[item_index], self.targets[item_index], self.landmarks[item_index],
                            self.patch_size, rng)

    def batch(self, item_indices, rng):
        imgs, tgts = [], []
        for i in item_indices:
            img, tgt, _, _ = self.draw(int(i), rng)
            imgs.append(img)
            tgts.append(tgt)
        return np.stack(imgs), np.stack(tgts)


def train_local(items: list[CephItem], config: StageConfig, seed: int = 0, loss_cfg: LossConfig = LossConfig(),
                val_items: list[CephItem] | None = None, source: str = "average",
                dtype=np.float32) -> tuple[UNet, TrainLog]:
    """Fit the patch u-net on random patches around landmarks (items already in the local frame)."""
    _require(items, Frame.LOCAL, "train_local")
    if config.patch_size is None:
        raise ValueError("local stage needs a training patch_size")
    sampler = PatchSampler(items, config.patch_size, config.distribution_width, source, dtype)
    model = build_unet(config.unet, seed, dtype)
    opt = T.Adam(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(seed)
    val = None
    if val_items:
        _require(val_items, Frame.LOCAL, "train_local validation")
        vs = PatchSampler(val_items, config.patch_size, config.distribution_width, source, dtype)
        val = vs.batch(range(len(vs)), np.random.default_rng(seed + 1))
    per_epoch = config.samples_per_epoch or len(items)
    history = TrainLog()
    for epoch in range(config.epochs):
        picks = np.concatenate([rng.permutation(len(items)) for _ in range(-(-per_epoch // len(items)))])[:per_epoch]
        losses = []
        for start in range(0, per_epoch, config.batch_size):
            imgs, tgts = sampler.batch(picks[start:start + config.batch_size], rng)
            losses.append(_batch_loss(model, imgs, tgts, loss_cfg, epoch, True, opt))
        vloss = None
        if val is not None:
            vloss = float(np.mean([_batch_loss(model, val[0][i:i + 1], val[1][i:i + 1], loss_cfg, epoch, False)
                                   for i in range(len(val[0]))]))
        history.add(epoch, float(np.mean(losses)), vloss)
        log.info("local epoch %d loss %.4f", epoch, history.train_loss[-1])
    return model, history


# ----------------------------------------------------------------- inference


@dataclass
class InferenceResult:
    landmarks: LandmarkSet                 # raw (uncropped) frame
    coarse: LandmarkSet                    # global frame
    global_heatmaps: HeatmapStack
    merged_heatmaps: HeatmapStack | None
    fallback: np.ndarray                   # landmarks whose proposals defaulted to the image centre


def _predict(model: UNet, image: np.ndarray) -> np.ndarray:
    dtype = model.params["head.bias"].dtype
    return model.forward_padded(Tensor(np.asarray(image, dtype=dtype)[None, None])).data[0]


def infer(image: np.ndarray, global_model: UNet, local_model: UNet | None,
          global_cfg: StageConfig = GLOBAL_STAGE, local_cfg: StageConfig = LOCAL_STAGE,
          crop_top: int = 0, mode: str = "full", threshold: float = 0.5,
          epsilon: float | None = None, all_channels: bool = False) -> InferenceResult:
    """Landmarks for one square-cropped image, returned in the uncropped frame.

    ``mode`` is ``full`` (expansive exploration), ``no-expand`` (one centred
    patch per landmark) or ``stage1`` (global argmax only).  ``epsilon``
    overrides the configured expansion and may be exactly 1.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    g, s = global_cfg.scale_factor, local_cfg.scale_factor
    h_g = HeatmapStack(_predict(global_model, standardize(resize_area(image, g))), Frame.GLOBAL)
    coarse = decode_coarse(h_g)
    shift = np.array([0.0, crop_top])

    if mode == "stage1":
        out = rescale_landmarks(coarse, 1.0 / g, Frame.ORIGINAL)
        out = out.copy(points=out.points + shift, frame=Frame.RAW)
        return InferenceResult(out, coarse, h_g, None, np.zeros(len(coarse), bool))
    if local_model is None:
        raise ValueError(f"mode {mode!r} needs a local model")

    local_img = standardize(resize_area(image, s))
    canvas = local_img.shape
    coarse_local = rescale_landmarks(coarse, s / g, Frame.LOCAL)
    fallback = ~coarse.valid
    if fallback.any():
        log.warning("coarse detection failed for landmarks %s; searching around the image centre",
                    np.flatnonzero(fallback).tolist())
        coarse_local.points[fallback] = [(canvas[1] - 1) / 2.0, (canvas[0] - 1) / 2.0]

    p = local_cfg.inference_patch_size or local_cfg.patch_size
    eps = local_cfg.expand_epsilon if epsilon is None else epsilon
    patches = []
    for k, center in enumerate(coarse_local.points):
        if mode == "no-expand":
            regions = expansive_regions(center, p, 1.0, canvas, anchor=k)[-1:]
        else:
            regions = expansive_regions(center, p, eps, canvas, anchor=k)
        seen = set()
        for r in regions:
            if (r.x, r.y) in seen:
                continue
            seen.add((r.x, r.y))
            pred = _predict(local_model, local_img[r.y:r.y + p, r.x:r.x + p])
            patches.append((pred, r))
    h_m = merge_patches(patches, canvas, all_channels)
    fine = decode_fine(h_m, threshold)
    out = rescale_landmarks(fine, 1.0 / s, Frame.ORIGINAL)
    out = out.copy(points=out.points + shift, frame=Frame.RAW)
    return InferenceResult(out, coarse, h_g, h_m, fallback)

