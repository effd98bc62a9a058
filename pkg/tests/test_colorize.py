"""False-color rendering: fixed colormap anchors, normalization, PNG output."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from PIL import Image

from greaten.colorize import (
    disparity_to_color,
    error_to_color,
    save_png,
    turbo_colormap,
)

# The colormap is a fixed polynomial; these anchors pin it so the rendering
# can never drift silently between runs or releases.
ANCHORS = {
    0.00: (0.13572138, 0.09140261, 0.10667330),
    0.25: (0.14831316, 0.74046542, 0.88072330),
    0.50: (0.58852206, 0.98186438, 0.31316870),
    0.75: (1.00000000, 0.50173495, 0.11398552),
    1.00: (0.56585921, 0.05038886, 0.00000000),
}


class TestTurboColormap:
    def test_frozen_anchor_colors(self):
        xs = np.array(sorted(ANCHORS))
        expected = np.array([ANCHORS[x] for x in sorted(ANCHORS)])
        assert_allclose(turbo_colormap(xs), expected, atol=1e-6)

    def test_out_of_range_values_clamp_to_endpoints(self):
        rgb = turbo_colormap(np.array([-3.0, 0.0, 1.0, 42.0]))
        assert_array_equal(rgb[0], rgb[1])
        assert_array_equal(rgb[2], rgb[3])

    def test_output_stays_inside_unit_cube(self):
        xs = np.linspace(0.0, 1.0, 513)
        rgb = turbo_colormap(xs)
        assert rgb.shape == (513, 3)
        assert rgb.min() >= 0.0 and rgb.max() <= 1.0

    def test_preserves_leading_shape(self):
        rgb = turbo_colormap(np.zeros((4, 6)))
        assert rgb.shape == (4, 6, 3)


class TestDisparityToColor:
    def test_normalizes_by_max_disparity(self):
        disparity = np.array([[0.0, 16.0, 32.0]])
        rgb = disparity_to_color(disparity, 32.0)
        expected = (turbo_colormap(np.array([[0.0, 0.5, 1.0]])) * 255.0 + 0.5).astype(
            np.uint8
        )
        assert_array_equal(rgb, expected)
        assert rgb.dtype == np.uint8

    def test_same_disparity_same_color_regardless_of_image_content(self):
        a = disparity_to_color(np.full((3, 3), 10.0), 64.0)
        b = disparity_to_color(np.pad(np.full((1, 1), 10.0), 1, constant_values=60.0), 64.0)
        assert_array_equal(a[1, 1], b[1, 1])

    def test_rejects_nonpositive_max(self):
        with pytest.raises(ValueError, match="max_disparity"):
            disparity_to_color(np.zeros((2, 2)), 0.0)


class TestErrorToColor:
    def test_saturates_at_max_error(self):
        at_cap = error_to_color(np.array([[5.0]]))
        beyond = error_to_color(np.array([[11.0]]))
        assert_array_equal(at_cap, beyond)

    def test_uses_absolute_error(self):
        assert_array_equal(
            error_to_color(np.array([[-2.5]])), error_to_color(np.array([[2.5]]))
        )

    def test_rejects_nonpositive_max(self):
        with pytest.raises(ValueError, match="max_error"):
            error_to_color(np.zeros((2, 2)), max_error=-1.0)


class TestSavePng:
    def test_round_trips_color_image(self, tmp_path):
        rng = np.random.default_rng(0)
        image = rng.integers(0, 256, size=(8, 10, 3), dtype=np.uint8)
        path = tmp_path / "img.png"
        save_png(path, image)
        assert_array_equal(np.asarray(Image.open(path)), image)

    def test_round_trips_grayscale(self, tmp_path):
        image = np.arange(20, dtype=np.uint8).reshape(4, 5)
        path = tmp_path / "gray.png"
        save_png(path, image)
        assert_array_equal(np.asarray(Image.open(path)), image)

    def test_rejects_non_uint8(self, tmp_path):
        with pytest.raises(ValueError, match="uint8"):
            save_png(tmp_path / "bad.png", np.zeros((2, 2), dtype=np.float32))
