from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mmreason.grammar import BoundingBox, normalize_box
from mmreason.imaging import (
    SceneSpec,
    ShapeSpec,
    crop_box_of_own_frame,
    extract_crop,
    image_patches,
    load_png,
    patch_grid,
    save_png,
    synth_scene,
    token_count,
)


def reference_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Naive per-pixel bilinear resampler with half-pixel centers (oracle)."""
    in_h, in_w = image.shape[:2]
    out = np.zeros((out_h, out_w, 3), dtype=np.float64)
    for oy in range(out_h):
        for ox in range(out_w):
            sy = (oy + 0.5) * in_h / out_h - 0.5
            sx = (ox + 0.5) * in_w / out_w - 0.5
            y0 = min(max(int(np.floor(sy)), 0), in_h - 1)
            x0 = min(max(int(np.floor(sx)), 0), in_w - 1)
            y1 = min(y0 + 1, in_h - 1)
            x1 = min(x0 + 1, in_w - 1)
            wy = min(max(sy - y0, 0.0), 1.0)
            wx = min(max(sx - x0, 0.0), 1.0)
            out[oy, ox] = (
                image[y0, x0] * (1 - wy) * (1 - wx)
                + image[y0, x1] * (1 - wy) * wx
                + image[y1, x0] * wy * (1 - wx)
                + image[y1, x1] * wy * wx
            )
    return out


def full_box() -> BoundingBox:
    return BoundingBox(0, 0, 1000, 1000)


class TestSynthScene:
    def test_empty_spec(self):
        img, boxes = synth_scene(SceneSpec(32, 32))
        assert img.shape == (32, 32, 3)
        assert boxes == []
        assert np.all(img == 1.0)

    def test_square_extent(self):
        spec = SceneSpec(32, 32, (ShapeSpec("square", "red", 5, 5, 10),))
        img, boxes = synth_scene(spec)
        assert boxes == [(5, 5, 15, 15)]
        assert not np.all(img[5:15, 5:15] == 1.0)
        assert np.all(img[:5] == 1.0) and np.all(img[:, :5] == 1.0)

    def test_extents_exact_for_all_kinds(self):
        for kind in ("square", "circle", "triangle"):
            spec = SceneSpec(40, 40, (ShapeSpec(kind, "blue", 8, 4, 12),))
            img, (box,) = synth_scene(spec)
            x0, y0, x1, y1 = box
            painted = np.any(img != 1.0, axis=2)
            ys, xs = np.where(painted)
            assert (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1) == (x0, y0, x1, y1)

    def test_disjoint_shapes(self):
        spec = SceneSpec(32, 32, (
            ShapeSpec("square", "red", 2, 2, 8),
            ShapeSpec("circle", "blue", 20, 20, 8),
        ))
        _, (a, b) = synth_scene(spec)
        assert a[2] <= b[0] and a[3] <= b[1]

    def test_overlapping_identical_rejected(self):
        spec = SceneSpec(32, 32, (
            ShapeSpec("square", "red", 2, 2, 10),
            ShapeSpec("square", "red", 6, 6, 10),
        ))
        with pytest.raises(ValueError):
            synth_scene(spec, unique=True)
        synth_scene(spec, unique=False)

    def test_out_of_frame_rejected(self):
        with pytest.raises(ValueError):
            synth_scene(SceneSpec(16, 16, (ShapeSpec("square", "red", 10, 10, 10),)))

    def test_deterministic(self):
        spec = SceneSpec(32, 32, (ShapeSpec("triangle", "green", 4, 4, 12),))
        a, _ = synth_scene(spec)
        b, _ = synth_scene(spec)
        assert np.array_equal(a, b)

    def test_spec_json_round_trip(self):
        spec = SceneSpec(32, 32, (ShapeSpec("circle", "red", 3, 7, 9),), background=0.5)
        again = SceneSpec.from_dict(spec.to_dict())
        assert again == spec


class TestExtractCrop:
    def test_full_frame_identity(self):
        img, _ = synth_scene(SceneSpec(64, 64, (ShapeSpec("square", "red", 8, 8, 16),)))
        crop = extract_crop(img, full_box(), min_side=32)
        assert np.array_equal(crop.pixels, img)

    def test_bilinear_oracle(self):
        rng = np.random.default_rng(3)
        img = rng.random((64, 64, 3), dtype=np.float32)
        box = normalize_box((0, 0, 8, 8), 64, 64)
        crop = extract_crop(img, box, min_side=16)
        assert crop.pixels.shape == (16, 16, 3)
        expected = reference_bilinear(img[:8, :8].astype(np.float64), 16, 16)
        np.testing.assert_allclose(crop.pixels, expected, atol=1e-5)

    def test_zero_area_box_rejected(self):
        img = np.ones((64, 64, 3), dtype=np.float32)
        with pytest.raises(ValueError):
            extract_crop(img, BoundingBox(100, 100, 100, 100), min_side=8)

    def test_min_side_upscale_preserves_aspect(self):
        img = np.ones((100, 100, 3), dtype=np.float32)
        box = normalize_box((0, 0, 10, 30), 100, 100)
        crop = extract_crop(img, box, min_side=32)
        h, w = crop.pixels.shape[:2]
        assert min(h, w) == 32
        assert abs(h / w - 3.0) * w <= 1  # aspect ratio within 1 px
        assert h >= 30 and w >= 10  # upscaling never shrinks

    def test_crop_renormalizes_to_full_frame(self):
        img = np.ones((50, 80, 3), dtype=np.float32)
        box = normalize_box((10, 10, 40, 30), 80, 50)
        crop = extract_crop(img, box, min_side=8)
        assert crop_box_of_own_frame(crop).as_tuple() == (0, 0, 1000, 1000)

    def test_no_upscale_when_large_enough(self):
        img = np.ones((64, 64, 3), dtype=np.float32)
        box = normalize_box((0, 0, 40, 48), 64, 64)
        crop = extract_crop(img, box, min_side=32)
        assert crop.pixels.shape == (48, 40, 3)


class TestPatches:
    def test_four_patches_for_double_patch_image(self):
        img = np.ones((16, 16, 3), dtype=np.float32)
        assert token_count(16, 16, patch=8) == 4
        assert image_patches(img, patch=8).shape == (4, 8 * 8 * 3)

    def test_all_zero_image_zero_tokens(self):
        img = np.zeros((16, 16, 3), dtype=np.float32)
        assert np.all(image_patches(img, patch=8) == 0.0)

    def test_identity_on_single_pixel_patches(self):
        rng = np.random.default_rng(5)
        img = rng.random((3, 2, 3), dtype=np.float32)
        patches = image_patches(img, patch=1)
        # Row-major: token k is pixel (k // 2, k % 2).
        for k in range(6):
            np.testing.assert_array_equal(patches[k], img[k // 2, k % 2])

    def test_too_small_image_rejected(self):
        with pytest.raises(ValueError):
            patch_grid(4, 20, patch=8)

    @given(st.integers(8, 90), st.integers(8, 90), st.integers(2, 9))
    def test_ceil_division_count(self, h, w, p):
        if h < p or w < p:
            return
        rows, cols = patch_grid(h, w, p)
        assert rows == -(-h // p) and cols == -(-w // p)
        img = np.zeros((h, w, 3), dtype=np.float32)
        assert image_patches(img, p).shape[0] == rows * cols


class TestPng:
    def test_round_trip(self, tmp_path):
        img, _ = synth_scene(SceneSpec(32, 32, (ShapeSpec("square", "purple", 4, 4, 10),)))
        path = tmp_path / "scene.png"
        save_png(img, path)
        back = load_png(path)
        assert back.shape == img.shape
        assert np.abs(back - img).max() <= 1.0 / 255.0 + 1e-6
