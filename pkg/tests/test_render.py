"""Palette, colorize and PPM round-trip checks."""

import numpy as np
import pytest

from leopart import render


def test_palette_shape_and_background():
    assert render.PALETTE.shape == (64, 3)
    assert np.array_equal(render.PALETTE[0], [0, 0, 0])
    # all 64 colors distinct
    assert len({tuple(c) for c in render.PALETTE}) == 64


def test_palette_is_stable_across_builds():
    assert np.array_equal(render.PALETTE, render._build_palette())


def test_colorize_lookup_and_wraparound():
    labels = np.array([[0, 1], [63, 64]])
    image = render.colorize(labels)
    assert np.array_equal(image[0, 0], render.PALETTE[0])
    assert np.array_equal(image[0, 1], render.PALETTE[1])
    assert np.array_equal(image[1, 1], render.PALETTE[0])  # 64 wraps to 0


def test_colorize_rejects_bad_input():
    with pytest.raises(ValueError):
        render.colorize(np.zeros((2, 2, 2), dtype=int))
    with pytest.raises(ValueError):
        render.colorize(np.array([[-1, 0]]))


def test_ppm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    image = rng.integers(0, 256, size=(5, 7, 3)).astype(np.uint8)
    path = tmp_path / "img.ppm"
    render.write_ppm(image, path)
    data = path.read_bytes()
    assert data.startswith(b"P6\n7 5\n255\n")
    assert np.array_equal(render.read_ppm(path), image)


def test_render_all_background_is_single_color(tmp_path):
    path = tmp_path / "bg.ppm"
    render.render_label_map(np.zeros((4, 4), dtype=int), path)
    image = render.read_ppm(path)
    assert np.all(image == 0)


def test_render_scale(tmp_path):
    labels = np.array([[1, 2]])
    path = tmp_path / "scaled.ppm"
    render.render_label_map(labels, path, scale=3)
    image = render.read_ppm(path)
    assert image.shape == (3, 6, 3)
    assert np.all(image[:, :3] == render.PALETTE[1])
    assert np.all(image[:, 3:] == render.PALETTE[2])
    with pytest.raises(ValueError):
        render.render_label_map(labels, path, scale=0)
