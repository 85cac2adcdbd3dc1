"""Landmark <-> multi-channel Gaussian heatmap conversion.

A stack has ``K + 1`` channels: one truncated circular Gaussian per landmark
and a shared background channel holding whatever probability mass is left.
Coordinates are ``(x, y)`` = ``(column, row)`` in pixel units, with pixel
``(i, j)`` centred at integer coordinates.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np


class Frame(str, Enum):
    RAW = "raw"            # uncropped acquisition frame
    ORIGINAL = "original"  # square-cropped, full resolution
    GLOBAL = "global"      # cropped then scaled for the global stage
    LOCAL = "local"        # cropped then scaled for the local stage
    PATCH = "patch"        # relative to a patch's top-left corner


class FrameError(ValueError):
    pass


def check_frame(got: Frame, want: Frame, what: str = "input") -> None:
    if Frame(got) != Frame(want):
        raise FrameError(f"{what} is in frame {Frame(got).value!r}, expected {Frame(want).value!r}")


@dataclass(frozen=True)
class HeatmapSpec:
    canvas_height: int
    canvas_width: int
    num_landmarks: int
    distribution_width: float
    frame: Frame = Frame.ORIGINAL

    def __post_init__(self):
        if self.distribution_width <= 0:
            raise ValueError(f"distribution_width must be positive, got {self.distribution_width}")
        if self.num_landmarks < 1 or self.canvas_height < 1 or self.canvas_width < 1:
            raise ValueError("canvas dimensions and num_landmarks must be positive")

    @property
    def sigma(self) -> float:
        # support edge sits at 3 sigma
        return self.distribution_width / 6.0

    @property
    def correlation_rho(self) -> float:
        return 0.0

    @property
    def num_channels(self) -> int:
        return self.num_landmarks + 1


@dataclass
class LandmarkSet:
    points: np.ndarray
    frame: Frame
    valid: np.ndarray = None
    confident: np.ndarray = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.frame = Frame(self.frame)
        k = len(self.points)
        self.valid = np.ones(k, bool) if self.valid is None else np.asarray(self.valid, bool).copy()
        self.confident = self.valid.copy() if self.confident is None else np.asarray(self.confident, bool).copy()

    def __len__(self) -> int:
        return len(self.points)

    def copy(self, **changes) -> "LandmarkSet":
        base = replace(self, points=self.points.copy(), valid=self.valid.copy(), confident=self.confident.copy())
        return replace(base, **changes) if changes else base

    def on_canvas(self, height: int, width: int) -> np.ndarray:
        x, y = self.points[:, 0], self.points[:, 1]
        return (x >= 0) & (y >= 0) & (x <= width - 1) & (y <= height - 1)


@dataclass
class HeatmapStack:
    channels: np.ndarray
    frame: Frame = Frame.ORIGINAL
    clamped: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.frame = Frame(self.frame)
        if self.channels.ndim != 3 or self.channels.shape[0] < 2:
            raise ValueError(f"heatmap stack must be (K+1, H, W) with K >= 1, got {self.channels.shape}")

    @property
    def num_landmarks(self) -> int:
        return self.channels.shape[0] - 1

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.channels.shape


def gaussian_channel(center, spec: HeatmapSpec, dtype=np.float64) -> np.ndarray:
    """Truncated isotropic Gaussian with unit peak, zero outside its support circle."""
    sigma = spec.sigma
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    cx, cy = float(center[0]), float(center[1])
    ys = np.arange(spec.canvas_height, dtype=np.float64)[:, None]
    xs = np.arange(spec.canvas_width, dtype=np.float64)[None, :]
    d2 = (xs - cx) ** 2 + (ys - cy) ** 2
    g = np.exp(-d2 / (2.0 * sigma * sigma))
    g[d2 > (spec.distribution_width / 2.0) ** 2] = 0.0
    return g.astype(dtype, copy=False)


def encode_heatmaps(landmarks: LandmarkSet, spec: HeatmapSpec, dtype=np.float64) -> HeatmapStack:
    check_frame(landmarks.frame, spec.frame, "landmarks")
    if len(landmarks) != spec.num_landmarks:
        raise ValueError(f"expected {spec.num_landmarks} landmarks, got {len(landmarks)}")
    k = spec.num_landmarks
    out = np.zeros((k + 1, spec.canvas_height, spec.canvas_width), dtype=np.float64)
    for i, (pt, ok) in enumerate(zip(landmarks.points, landmarks.valid)):
        if ok:
            out[i] = gaussian_channel(pt, spec)
    bg = 1.0 - out[:k].sum(axis=0)
    clamped = bg < 0
    out[k] = np.maximum(bg, 0.0)
    return HeatmapStack(out.astype(dtype, copy=False), spec.frame, clamped)


def decode_coarse(stack: HeatmapStack, flat_tol: float = 1e-6) -> LandmarkSet:
    """Integer argmax per landmark channel; ties resolve to the first pixel in row-major order."""
    k = stack.num_landmarks
    _, h, w = stack.shape
    flat = stack.channels[:k].reshape(k, -1)
    idx = flat.argmax(axis=1)
    peak = flat[np.arange(k), idx]
    pts = np.stack([idx % w, idx // w], axis=1).astype(np.float64)
    valid = peak > 0
    confident = valid & (peak - flat.mean(axis=1) > flat_tol)
    return LandmarkSet(pts, stack.frame, valid, confident)


def decode_fine(stack: HeatmapStack, threshold: float = 0.5) -> LandmarkSet:
    """Normalise each landmark channel by its peak, drop values below ``threshold``,
    and return the unweighted centroid of what survives."""
    k = stack.num_landmarks
    _, h, w = stack.shape
    pts = np.zeros((k, 2))
    valid = np.zeros(k, bool)
    for i in range(k):
        ch = stack.channels[i]
        peak = ch.max()
        if not peak > 0:
            continue
        rows, cols = np.nonzero(ch / peak >= threshold)
        pts[i] = cols.mean(), rows.mean()
        valid[i] = True
    return LandmarkSet(pts, stack.frame, valid)


def rescale_landmarks(landmarks: LandmarkSet, factor: float, target_frame: Frame) -> LandmarkSet:
    if factor <= 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    return landmarks.copy(points=landmarks.points * factor, frame=Frame(target_frame))


def compress_channels(stack: HeatmapStack) -> np.ndarray:
    """Per-pixel max over landmark channels, for visual inspection."""
    return stack.channels[:-1].max(axis=0)


# dump format: magic, u32 version, u32 C, H, W, u16 tag length, tag, float32 data (little-endian)
_HM_MAGIC = b"CEPHHMAP"


def save_heatmap(path, stack: HeatmapStack) -> None:
    c, h, w = stack.shape
    tag = stack.frame.value.encode()
    with open(path, "wb") as fh:
        fh.write(_HM_MAGIC)
        fh.write(struct.pack("<IIIIH", 1, c, h, w, len(tag)))
        fh.write(tag)
        fh.write(np.ascontiguousarray(stack.channels, dtype="<f4").tobytes())


def load_heatmap(path) -> HeatmapStack:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != _HM_MAGIC:
        raise ValueError(f"{path}: not a heatmap dump")
    version, c, h, w, tlen = struct.unpack_from("<IIIIH", buf, 8)
    if version != 1:
        raise ValueError(f"{path}: unsupported heatmap dump version {version}")
    pos = 8 + 18
    frame = Frame(buf[pos:pos + tlen].decode())
    pos += tlen
    data = np.frombuffer(buf[pos:pos + 4 * c * h * w], dtype="<f4").reshape(c, h, w).astype(np.float32)
    return HeatmapStack(data, frame)
