"""Rendering label maps to PPM images with a fixed 64-color palette.

The palette is deterministic (documented below) so renders are comparable
across runs: color 0 is black (background); colors 1..63 walk a fixed-seed
shuffle of a 4x4x4 RGB lattice. Labels above 63 wrap around.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

PALETTE_SIZE = 64


def _build_palette() -> np.ndarray:
    levels = np.array([40, 110, 180, 250], dtype=np.int64)
    colors = np.stack(np.meshgrid(levels, levels, levels, indexing="ij"),
                      axis=-1).reshape(-1, 3)
    # keep black first for background, shuffle the rest reproducibly
    rest = colors[1:][np.random.default_rng(41).permutation(len(colors) - 1)]
    palette = np.concatenate([[(0, 0, 0)], rest]).astype(np.uint8)
    return palette


PALETTE = _build_palette()


def colorize(label_map: np.ndarray) -> np.ndarray:
    """(H, W) integer labels -> (H, W, 3) uint8 colors from the palette."""
    labels = np.asarray(label_map)
    if labels.ndim != 2:
        raise ValueError(f"expected a 2-d label map, got shape {labels.shape}")
    if np.any(labels < 0):
        raise ValueError("labels must be non-negative")
    return PALETTE[labels.astype(np.intp) % PALETTE_SIZE]


def write_ppm(image: np.ndarray, path: str | Path) -> None:
    """Write an (H, W, 3) uint8 array as a binary PPM (P6) file."""
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {image.shape}")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    """Read back a binary PPM written by :func:`write_ppm`."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM file")
    w, h = (int(v) for v in parts[1].split())
    if parts[2] != b"255":
        raise ValueError(f"{path}: unsupported max value {parts[2]!r}")
    pixels = np.frombuffer(parts[3][:h * w * 3], dtype=np.uint8)
    return pixels.reshape(h, w, 3).copy()


def render_label_map(label_map: np.ndarray, path: str | Path,
                     scale: int = 1) -> None:
    """Colorize a label map and write it as PPM, optionally upscaled."""
    if scale < 1:
        raise ValueError("scale must be >= 1")
    image = colorize(label_map)
    if scale > 1:
        image = np.repeat(np.repeat(image, scale, axis=0), scale, axis=1)
    write_ppm(image, path)
