"""Dataset ingestion, preprocessing, patch sampling and synthetic data.

On-disk layout understood by :func:`load_isbi`::

    root/
      manifest.json                  optional; written by write_dataset
      <any>/<id>.bmp|png|tif         images, numeric ids
      <any>/<annotator dir>/<id>.txt one "x,y" line per landmark

Without a manifest, splits follow the challenge id ranges (1-150 train,
151-300 test1, 301-400 test2) and the pixel spacing is 0.1 mm.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .heatmap import Frame, HeatmapSpec, LandmarkSet, check_frame, encode_heatmaps

log = logging.getLogger(__name__)

ISBI_SPACING_MM = 0.1
ISBI_NUM_LANDMARKS = 19
ISBI_ANNOTATORS = {"senior": "400_senior", "junior": "400_junior"}
IMAGE_SUFFIXES = (".bmp", ".png", ".tif", ".tiff", ".jpg")


class AnnotationError(ValueError):
    pass


@dataclass
class CephItem:
    id: str
    image: np.ndarray
    annotations: dict[str, LandmarkSet]
    frame: Frame = Frame.RAW
    split: str = "train"
    out_of_crop: np.ndarray | None = None

    def ground_truth(self, source: str = "average") -> LandmarkSet:
        """Annotator set by name, or the mean over all annotators."""
        if source != "average":
            if source not in self.annotations:
                raise KeyError(f"item {self.id} has no annotations from {source!r}")
            return self.annotations[source].copy()
        sets = [self.annotations[k] for k in sorted(self.annotations)]
        if not sets:
            raise KeyError(f"item {self.id} has no annotations")
        pts = np.mean([s.points for s in sets], axis=0)
        valid = np.logical_and.reduce([s.valid for s in sets])
        return LandmarkSet(pts, sets[0].frame, valid)


@dataclass
class CephDataset:
    items: list[CephItem]
    pixel_spacing: float = ISBI_SPACING_MM
    num_landmarks: int = ISBI_NUM_LANDMARKS
    rejected: list[str] = field(default_factory=list)

    def __post_init__(self):
        shapes = {it.image.shape for it in self.items}
        if len(shapes) > 1:
            raise ValueError(f"dataset mixes image resolutions: {sorted(shapes)}")
        for it in self.items:
            if not it.annotations:
                raise ValueError(f"item {it.id} has no annotation set")
            for name, s in it.annotations.items():
                if len(s) != self.num_landmarks:
                    raise ValueError(f"item {it.id} annotator {name}: {len(s)} landmarks, expected {self.num_landmarks}")

    def __len__(self) -> int:
        return len(self.items)

    def split(self, *names: str) -> "CephDataset":
        return CephDataset([it for it in self.items if it.split in names],
                           self.pixel_spacing, self.num_landmarks)

    def subset(self, ids) -> "CephDataset":
        wanted = set(ids)
        return CephDataset([it for it in self.items if it.id in wanted],
                           self.pixel_spacing, self.num_landmarks)

    def by_id(self) -> dict[str, CephItem]:
        return {it.id: it for it in self.items}


@dataclass(frozen=True)
class PreprocessSpec:
    crop_top: int = 465
    global_scale: float = 0.15
    local_scale: float = 0.5


# ------------------------------------------------------------------- loading


def parse_annotation(path, num_landmarks: int, frame: Frame = Frame.RAW) -> LandmarkSet:
    pts = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if len(pts) == num_landmarks:
                break
            text = line.strip()
            parts = text.split(",")
            try:
                if len(parts) != 2:
                    raise ValueError
                pts.append((float(parts[0]), float(parts[1])))
            except ValueError:
                raise AnnotationError(f"{path}:{lineno}: expected 'x,y', got {text!r}") from None
    if len(pts) < num_landmarks:
        raise AnnotationError(f"{path}: {len(pts)} coordinate lines, expected {num_landmarks}")
    arr = np.array(pts, dtype=np.float64)
    return LandmarkSet(arr, frame, valid=np.all(np.isfinite(arr), axis=1))


def write_annotation(path, landmarks: LandmarkSet) -> None:
    lines = []
    for (x, y), ok in zip(landmarks.points, landmarks.valid):
        lines.append(f"{x:.4f},{y:.4f}" if ok else "nan,nan")
    Path(path).write_text("\n".join(lines) + "\n")


def read_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("I") if im.mode not in ("L", "I;16", "I") else im)
    arr = arr.astype(np.float64)
    top = 65535.0 if arr.max() > 255 else 255.0
    return (arr / top).astype(np.float32)


def write_image(path, image: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG", optimize=False)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _challenge_split(item_id: str) -> str:
    n = int(re.sub(r"\D", "", item_id) or 0)
    if n <= 150:
        return "train"
    return "test1" if n <= 300 else "test2"


def load_isbi(root, annotators: dict[str, str] | None = None,
              num_landmarks: int = ISBI_NUM_LANDMARKS) -> CephDataset:
    """Load images and per-annotator landmark files under ``root``.

    ``annotators`` maps an annotator name to the directory name holding its
    files; mirrors of the challenge data disagree on these names.
    """
    root = Path(root)
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        return _load_manifest(root, json.loads(manifest_path.read_text()))

    annotators = annotators or ISBI_ANNOTATORS
    ann_dirs = {}
    for name, dirname in annotators.items():
        hits = sorted(p for p in root.rglob(dirname) if p.is_dir())
        if hits:
            ann_dirs[name] = hits[0]
    if not ann_dirs:
        raise FileNotFoundError(f"{root}: none of the annotation directories {sorted(annotators.values())} found")
    images = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES and p.stem.isdigit())

    items, rejected = [], []
    for img_path in images:
        item_id = img_path.stem
        anns = {}
        for name, d in ann_dirs.items():
            f = d / f"{item_id}.txt"
            if f.exists():
                anns[name] = parse_annotation(f, num_landmarks)
        if not anns:
            log.warning("rejecting %s: no annotation file in %s", img_path, sorted(map(str, ann_dirs.values())))
            rejected.append(item_id)
            continue
        items.append(CephItem(item_id, read_image(img_path), anns, Frame.RAW, _challenge_split(item_id)))
    ds = CephDataset(items, ISBI_SPACING_MM, num_landmarks, rejected)
    return ds


def _load_manifest(root: Path, manifest: dict) -> CephDataset:
    k = manifest["num_landmarks"]
    items, rejected = [], []
    for entry in manifest["items"]:
        anns = {}
        for name, rel in entry["annotations"].items():
            f = root / rel
            if not f.exists():
                continue
            anns[name] = parse_annotation(f, k)
        if not anns:
            log.warning("rejecting %s: annotation files missing", entry["id"])
            rejected.append(entry["id"])
            continue
        items.append(CephItem(entry["id"], read_image(root / entry["image"]), anns, Frame.RAW, entry["split"]))
    return CephDataset(items, manifest["pixel_spacing"], k, rejected)


def write_dataset(ds: CephDataset, root) -> Path:
    """Write images, annotation files and a checksummed manifest."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for it in ds.items:
        img_rel = f"images/{it.id}.png"
        write_image(root / img_rel, it.image)
        ann = {}
        for name, s in sorted(it.annotations.items()):
            (root / "annotations" / name).mkdir(parents=True, exist_ok=True)
            rel = f"annotations/{name}/{it.id}.txt"
            write_annotation(root / rel, s)
            ann[name] = rel
        checks = {img_rel: sha256_file(root / img_rel)}
        checks.update({rel: sha256_file(root / rel) for rel in ann.values()})
        entries.append({"id": it.id, "split": it.split, "image": img_rel, "annotations": ann, "sha256": checks})
    manifest = {"format": "cephreg-dataset", "version": 1, "pixel_spacing": ds.pixel_spacing,
                "num_landmarks": ds.num_landmarks, "items": entries}
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# -------------------------------------------------------------- preprocessing


def preprocess(item: CephItem, spec: PreprocessSpec = PreprocessSpec()) -> CephItem:
    """Drop the top ``crop_top`` rows so the image is square; shift y accordingly."""
    check_frame(item.frame, Frame.RAW, f"item {item.id}")
    h, w = item.image.shape
    if h - spec.crop_top != w:
        raise ValueError(f"item {item.id}: removing {spec.crop_top} rows from {h}x{w} does not give a square")
    image = item.image[spec.crop_top:, :].copy()
    anns = {}
    out = np.zeros(0, bool)
    for name, s in item.annotations.items():
        pts = s.points - np.array([0.0, spec.crop_top])
        moved = LandmarkSet(pts, Frame.ORIGINAL, s.valid)
        inside = moved.on_canvas(w, w)
        moved.valid &= inside
        moved.confident &= inside
        out = ~inside if out.size == 0 else out | ~inside
        anns[name] = moved
    if out.any():
        log.warning("item %s: landmarks %s fall outside the crop", item.id, np.flatnonzero(out).tolist())
    return CephItem(item.id, image, anns, Frame.ORIGINAL, item.split, out)


def scaled_size(n: int, factor: float) -> int:
    # round half up
    return int(math.floor(n * factor + 0.5))


def _area_matrix(n_in: int, factor: float) -> np.ndarray:
    """Row j averages the input pixels overlapping [(j - 1/2)/f, (j + 1/2)/f],
    weighted by overlap, so pixel j sits at input coordinate j / f."""
    n_out = scaled_size(n_in, factor)
    j = np.arange(n_out)[:, None]
    i = np.arange(n_in)[None, :]
    lo = np.maximum((j - 0.5) / factor, i - 0.5)
    hi = np.minimum((j + 0.5) / factor, i + 0.5)
    m = np.clip(hi - lo, 0.0, None)
    return m / m.sum(axis=1, keepdims=True)


def resize_area(image: np.ndarray, factor: float) -> np.ndarray:
    h, w = image.shape
    ry, rx = _area_matrix(h, factor), _area_matrix(w, factor)
    return (ry @ image.astype(np.float64) @ rx.T).astype(image.dtype)


def scale_item(item: CephItem, factor: float, frame: Frame) -> CephItem:
    check_frame(item.frame, Frame.ORIGINAL, f"item {item.id}")
    anns = {k: s.copy(points=s.points * factor, frame=frame) for k, s in item.annotations.items()}
    return CephItem(item.id, resize_area(item.image, factor), anns, Frame(frame), item.split, item.out_of_crop)


def standardize(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return ((image - image.mean()) / (image.std() + 1e-6)).astype(np.float32)


# ----------------------------------------------------------------- sampling


def patch_origin(anchor, patch_size: int, height: int, width: int, rng) -> tuple[int, int]:
    """Uniform top-left corner keeping ``anchor`` off the patch border, clamped on-canvas."""
    if patch_size > height or patch_size > width:
        raise ValueError(f"patch size {patch_size} exceeds image {height}x{width}")
    out = []
    for a, n in ((anchor[0], width), (anchor[1], height)):
        a = int(math.floor(a + 0.5))
        lo = max(0, a - patch_size + 2)
        hi = min(n - patch_size, a - 1)
        out.append(int(rng.integers(lo, hi + 1)) if lo <= hi else min(max(a - patch_size // 2, 0), n - patch_size))
    return out[0], out[1]


def sample_patch(image: np.ndarray, target: np.ndarray, landmarks: LandmarkSet, patch_size: int, rng):
    """Random training patch around a uniformly chosen landmark.

    Returns (image patch, target patch, anchor index, (x0, y0)).
    """
    candidates = np.flatnonzero(landmarks.valid)
    anchor = int(candidates[rng.integers(len(candidates))])
    h, w = image.shape[-2:]
    x0, y0 = patch_origin(landmarks.points[anchor], patch_size, h, w, rng)
    sl = (..., slice(y0, y0 + patch_size), slice(x0, x0 + patch_size))
    return image[sl], target[sl], anchor, (x0, y0)


# ---------------------------------------------------------------- synthetic

_TEMPLATE_SEED = 20190
_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


@dataclass(frozen=True)
class SynthStyle:
    noise: float = 0.03
    min_separation: float = 0.08   # fraction of the canvas side
    distractors: int = 3


def _template(num_landmarks: int, min_sep: float):
    """Nominal layout in unit-canvas coordinates: ellipse, then wedge corners."""
    ellipse = (0.42, 0.45, 0.19, 0.16)
    cx, cy, a, b = ellipse
    pts = [(cx, cy - b), (cx - a, cy)]
    rng = np.random.default_rng(_TEMPLATE_SEED)
    fixed = [(0.78, 0.28), (0.72, 0.76), (0.30, 0.80), (0.80, 0.52), (0.20, 0.18)]
    for i in range(2, num_landmarks):
        cand = fixed[i - 2] if i - 2 < len(fixed) else None
        while cand is None or not _template_ok(cand, pts, ellipse, min_sep):
            cand = tuple(rng.uniform(0.14, 0.86, 2))
        pts.append(cand)
    return ellipse, np.array(pts[:num_landmarks])


def _template_ok(p, pts, ellipse, min_sep) -> bool:
    cx, cy, a, b = ellipse
    if ((p[0] - cx) / (a + 0.08)) ** 2 + ((p[1] - cy) / (b + 0.08)) ** 2 < 1:
        return False
    return all(math.dist(p, q) > 1.6 * min_sep for q in pts)


def _coverage(sd: np.ndarray) -> np.ndarray:
    # anti-aliased fill from a signed distance (negative inside)
    return np.clip(0.5 - sd, 0.0, 1.0)


def render_ellipse(xx, yy, cx, cy, a, b) -> np.ndarray:
    u, v = (xx - cx) / a, (yy - cy) / b
    r = np.sqrt(u * u + v * v)
    grad = np.sqrt((u / a) ** 2 + (v / b) ** 2) / np.maximum(r, 1e-9)
    return _coverage((r - 1.0) / np.maximum(grad, 1e-9))


def render_wedge(xx, yy, corner, angle, opening, radius) -> np.ndarray:
    """Pie slice with its apex at ``corner``, bisector pointing along ``angle``."""
    dx, dy = xx - corner[0], yy - corner[1]
    sd = np.hypot(dx, dy) - radius
    for side in (-1.0, 1.0):
        t = angle + side * opening / 2.0
        # outward normal of each bounding ray
        nx, ny = -math.sin(t) * side, math.cos(t) * side
        sd = np.maximum(sd, dx * nx + dy * ny)
    return _coverage(sd)


def render_ridge(xx, yy, p, q, width) -> np.ndarray:
    px, py = p
    vx, vy = q[0] - px, q[1] - py
    t = np.clip(((xx - px) * vx + (yy - py) * vy) / (vx * vx + vy * vy), 0.0, 1.0)
    d = np.hypot(xx - px - t * vx, yy - py - t * vy)
    return _coverage(d - width / 2.0)


def synth_item(rng, canvas: int, num_landmarks: int, style: SynthStyle = SynthStyle()):
    """Render one image; returns (image, landmarks in pixel coordinates)."""
    (ecx, ecy, ea, eb), template = _template(num_landmarks, style.min_separation)
    for _ in range(1000):
        scale = rng.uniform(0.92, 1.08)
        shift = rng.uniform(-0.05, 0.05, 2)
        jitter = rng.uniform(-0.035, 0.035, (num_landmarks, 2))
        jitter[:2] = 0.0
        ax, ay = ea * scale * rng.uniform(0.9, 1.1), eb * scale * rng.uniform(0.9, 1.1)
        cx = 0.5 + (ecx - 0.5) * scale + shift[0]
        cy = 0.5 + (ecy - 0.5) * scale + shift[1]
        pts = 0.5 + (template - 0.5) * scale + shift + jitter
        pts[0] = (cx, cy - ay)
        if num_landmarks > 1:
            pts[1] = (cx - ax, cy)
        pts_px = pts * (canvas - 1)
        margin = 0.06 * canvas
        if np.any(pts_px < margin) or np.any(pts_px > canvas - 1 - margin):
            continue
        d = np.hypot(*(pts_px[:, None, :] - pts_px[None, :, :]).transpose(2, 0, 1))
        np.fill_diagonal(d, np.inf)
        if d.min() > style.min_separation * canvas:
            break
    else:
        raise RuntimeError("could not place synthetic landmarks; lower min_separation")

    s = canvas - 1
    yy, xx = np.mgrid[0:canvas, 0:canvas].astype(np.float64)
    gx, gy = rng.uniform(-0.08, 0.08, 2)
    img = 0.15 + gx * (xx / s - 0.5) + gy * (yy / s - 0.5)
    for _ in range(style.distractors):
        p, q = rng.uniform(0.05, 0.95, (2, 2)) * s
        img += rng.uniform(0.15, 0.3) * render_ridge(xx, yy, p, q, rng.uniform(1.5, 3.0))
    img += rng.uniform(0.45, 0.6) * render_ellipse(xx, yy, cx * s, cy * s, ax * s, ay * s)
    for i in range(2, num_landmarks):
        angle = i * _GOLDEN_ANGLE + rng.uniform(-0.15, 0.15)
        opening = math.pi / 2 + 0.35 * math.sin(3.0 * i)
        img += rng.uniform(0.5, 0.7) * render_wedge(xx, yy, pts_px[i], angle, opening, 0.09 * canvas)
    if style.noise:
        img += rng.normal(0.0, style.noise, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), pts_px


def synth_generate(seed: int, count: int, canvas: int = 256, num_landmarks: int = 5,
                   test_fraction: float = 0.25, style: SynthStyle = SynthStyle()) -> CephDataset:
    """Procedural dataset with exactly known landmarks; pixel spacing 1 (errors in px).

    Landmark 0 is the topmost point of the ellipse, landmark 1 its leftmost
    point, and the rest are apexes of pie-slice wedges.
    """
    if canvas < 128:
        raise ValueError(f"synthetic canvas must be >= 128 px, got {canvas}")
    rng = np.random.default_rng(seed)
    n_test = int(round(count * test_fraction))
    items = []
    for n in range(count):
        img, pts = synth_item(rng, canvas, num_landmarks, style)
        item_id = f"{n + 1:03d}"
        split = "train" if n < count - n_test else "test"
        items.append(CephItem(item_id, img, {"synthetic": LandmarkSet(pts, Frame.RAW)}, Frame.RAW, split))
    return CephDataset(items, pixel_spacing=1.0, num_landmarks=num_landmarks)


def stage_targets(item: CephItem, distribution_width: float, source: str = "average",
                  dtype=np.float32) -> np.ndarray:
    """Full-frame ``K + 1`` channel target for an already scaled item."""
    gt = item.ground_truth(source)
    h, w = item.image.shape
    spec = HeatmapSpec(h, w, len(gt), distribution_width, item.frame)
    return encode_heatmaps(gt, spec, dtype).channels
