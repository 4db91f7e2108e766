"""Synthetic images, entity-crop extraction and patch-based visual tokens.

Images are float32 numpy arrays of shape (H, W, 3) with values in [0, 1].
Scenes are rasterized deterministically from shape specs so that ground-truth
entity boxes are exact; crops honor a configurable minimum short-side
resolution (full-scale systems use 512 px, the toy default is 32 px).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .grammar import BoundingBox, denormalize_box, normalize_box

DEFAULT_MIN_SIDE = 32
FULL_SCALE_MIN_SIDE = 512
DEFAULT_PATCH = 8

COLORS = {
    "red": (0.9, 0.15, 0.15),
    "green": (0.15, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.9),
    "yellow": (0.92, 0.85, 0.1),
    "purple": (0.6, 0.2, 0.8),
    "orange": (0.95, 0.55, 0.1),
}
SHAPES = ("square", "circle", "triangle")


def check_image(image: np.ndarray) -> np.ndarray:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError("empty image")
    return image


@dataclass(frozen=True)
class EntityCrop:
    """Pixels cut from an input image at a grounded box."""

    source_index: int
    box: BoundingBox
    pixels: np.ndarray


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    color: str
    x: int
    y: int
    size: int

    def __post_init__(self):
        if self.kind not in SHAPES:
            raise ValueError(f"unknown shape {self.kind!r}")
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.size < 1:
            raise ValueError("shape size must be >= 1 px")


@dataclass(frozen=True)
class SceneSpec:
    """Deterministic description of one synthetic image."""

    width: int
    height: int
    shapes: tuple[ShapeSpec, ...] = ()
    background: float = 1.0

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "background": self.background,
            "shapes": [
                {"kind": s.kind, "color": s.color, "x": s.x, "y": s.y, "size": s.size}
                for s in self.shapes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            width=d["width"],
            height=d["height"],
            background=d.get("background", 1.0),
            shapes=tuple(ShapeSpec(**s) for s in d["shapes"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def shape_pixel_box(shape: ShapeSpec) -> tuple[int, int, int, int]:
    """Exact pixel extent (x0, y0, x1, y1) of a rasterized shape."""
    return (shape.x, shape.y, shape.x + shape.size, shape.y + shape.size)


def synth_scene(spec: SceneSpec, unique: bool = True) -> tuple[np.ndarray, list[tuple[int, int, int, int]]]:
    """Rasterize a scene; returns the image and one exact pixel box per shape.

    With ``unique`` set, two shapes sharing kind and color may not overlap
    (their ground-truth identity would be ambiguous).
    """
    img = np.full((spec.height, spec.width, 3), spec.background, dtype=np.float32)
    boxes = []
    for s in spec.shapes:
        x0, y0, x1, y1 = shape_pixel_box(s)
        if x0 < 0 or y0 < 0 or x1 > spec.width or y1 > spec.height:
            raise ValueError(f"shape {s} outside {spec.width}x{spec.height} frame")
        boxes.append((x0, y0, x1, y1))
    if unique:
        for i, a in enumerate(spec.shapes):
            for j in range(i + 1, len(spec.shapes)):
                b = spec.shapes[j]
                if (a.kind, a.color) == (b.kind, b.color) and _boxes_overlap(boxes[i], boxes[j]):
                    raise ValueError(f"overlapping identical shapes at {i} and {j}")
    for s, (x0, y0, x1, y1) in zip(spec.shapes, boxes):
        color = np.array(COLORS[s.color], dtype=np.float32)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        if s.kind == "square":
            mask = np.ones(yy.shape, dtype=bool)
        elif s.kind == "circle":
            cy, cx = (y0 + y1 - 1) / 2.0, (x0 + x1 - 1) / 2.0
            r = s.size / 2.0
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            # Pin the four extreme pixels so the returned box is the exact extent.
            mask[0, (x1 - x0) // 2] = True
            mask[-1, (x1 - x0) // 2] = True
            mask[(y1 - y0) // 2, 0] = True
            mask[(y1 - y0) // 2, -1] = True
        else:  # triangle with apex at top-center, base at bottom
            h = max(y1 - y0 - 1, 1)
            half = (xx - (x0 + x1 - 1) / 2.0)
            width_at = (yy - y0) / h * (s.size / 2.0)
            mask = np.abs(half) <= np.maximum(width_at, 0.0)
            mask[0, (x1 - x0) // 2] = True
            mask[-1, 0] = True
            mask[-1, -1] = True
        img[y0:y1, x0:x1][mask] = color
    return img, boxes


def _boxes_overlap(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> bool:
    return not (a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1])


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel-center alignment."""
    check_image(image)
    in_h, in_w = image.shape[:2]
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * in_h / out_h - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * in_w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    y1 = np.clip(y0 + 1, 0, in_h - 1)
    x1 = np.clip(x0 + 1, 0, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bot = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def extract_crop(
    image: np.ndarray, box: BoundingBox, min_side: int = DEFAULT_MIN_SIDE, source_index: int = 0
) -> EntityCrop:
    """Cut the denormalized box out of the image and enforce the minimum side.

    If the crop's shorter side is below ``min_side``, it is bilinearly
    upscaled, preserving aspect ratio, until the shorter side equals it.
    """
    check_image(image)
    h, w = image.shape[:2]
    px0, py0, px1, py1 = denormalize_box(box, w, h)
    if px1 <= px0 or py1 <= py0:
        raise ValueError(f"degenerate box {box.as_tuple()} on {w}x{h} image")
    if px0 < 0 or py0 < 0 or px1 > w or py1 > h:
        raise ValueError(f"box {box.as_tuple()} outside {w}x{h} image")
    pixels = image[py0:py1, px0:px1]
    ch, cw = pixels.shape[:2]
    short = min(ch, cw)
    if short < min_side:
        scale = min_side / short
        out_h = min_side if ch == short else int(round(ch * scale))
        out_w = min_side if cw == short else int(round(cw * scale))
        pixels = bilinear_resize(pixels, out_h, out_w)
    return EntityCrop(source_index=source_index, box=box, pixels=pixels)


def patch_grid(height: int, width: int, patch: int = DEFAULT_PATCH) -> tuple[int, int]:
    """Token grid (rows, cols) for an image of the given size."""
    if height < patch or width < patch:
        raise ValueError(f"image {height}x{width} smaller than one {patch}px patch")
    return (math.ceil(height / patch), math.ceil(width / patch))


def image_patches(image: np.ndarray, patch: int = DEFAULT_PATCH) -> np.ndarray:
    """Non-overlapping p x p patches, row-major, flattened to (n, p*p*3).

    Partial edge patches are zero-padded to full size, matching the
    ceil-division token count.
    """
    check_image(image)
    h, w = image.shape[:2]
    rows, cols = patch_grid(h, w, patch)
    padded = np.zeros((rows * patch, cols * patch, 3), dtype=np.float32)
    padded[:h, :w] = image
    tiles = padded.reshape(rows, patch, cols, patch, 3).transpose(0, 2, 1, 3, 4)
    return tiles.reshape(rows * cols, patch * patch * 3)


def token_count(height: int, width: int, patch: int = DEFAULT_PATCH) -> int:
    rows, cols = patch_grid(height, width, patch)
    return rows * cols


def save_png(image: np.ndarray, path) -> None:
    from PIL import Image as PILImage

    check_image(image)
    arr = np.clip(image * 255.0 + 0.5, 0, 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def crop_box_of_own_frame(crop: EntityCrop) -> BoundingBox:
    """Normalizing a crop against its own frame is always the full box."""
    h, w = crop.pixels.shape[:2]
    return normalize_box((0, 0, w, h), w, h)
