"""Attention-map processing into binary foreground hints.

The chain is: average the per-head maps, smooth with a small normalized
Gaussian kernel, then keep the top cells until a fixed fraction of the
total mass is covered.
"""

from __future__ import annotations

import numpy as np

from . import crops

DEFAULT_KERNEL = 7
DEFAULT_SIGMA = 1.5
DEFAULT_RHO = 0.6


def merge_heads(stack: np.ndarray) -> np.ndarray:
    """Element-wise mean over the leading head axis of an (h, H, W) stack."""
    stack = np.asarray(stack)
    if stack.ndim == 2:
        stack = stack[None]
    if stack.ndim != 3 or stack.shape[0] < 1:
        raise ValueError(f"attention stack must be (heads, H, W), got {stack.shape}")
    if np.any(stack < 0):
        raise ValueError("attention entries must be non-negative")
    return stack.mean(axis=0)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Truncated 2-D Gaussian, normalized to sum to 1."""
    if size % 2 != 1:
        raise ValueError("kernel size must be odd")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    ax = np.arange(size) - size // 2
    k1 = np.exp(-(ax**2) / (2.0 * sigma**2))
    kernel = np.outer(k1, k1)
    return kernel / kernel.sum()


def gaussian_smooth(grid: np.ndarray, kernel: int = DEFAULT_KERNEL,
                    sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """2-D convolution with a normalized Gaussian; edges use reflect padding.

    Reflection is edge-inclusive (``symmetric`` in numpy terms) so it is
    well-defined even when the pad exceeds the grid size.
    """
    grid = np.asarray(grid, dtype=np.float64)
    k = gaussian_kernel(kernel, sigma)
    pad = kernel // 2
    padded = grid
    # np.pad "symmetric" cannot reflect past one full copy per call; repeat
    # until the requested pad is covered (tiny grids only).
    remaining = pad
    while remaining > 0:
        step_h = min(remaining, padded.shape[0])
        step_w = min(remaining, padded.shape[1])
        step = min(step_h, step_w)
        padded = np.pad(padded, step, mode="symmetric")
        remaining -= step
    h, w = grid.shape
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kernel, kernel))
    return np.einsum("ijkl,kl->ij", windows[:h, :w], k)


def threshold_mass(grid: np.ndarray, rho: float = DEFAULT_RHO) -> np.ndarray:
    """Binary mask keeping the largest cells until rho of the mass is covered.

    Cells are ranked by value descending with row-major order breaking ties,
    and included until the cumulative sum first reaches ``rho * total``.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if np.any(grid < 0):
        raise ValueError("map entries must be non-negative")
    total = grid.sum()
    if total <= 0:
        raise ValueError("cannot threshold an all-zero map")
    if not (0.0 < rho <= 1.0):
        raise ValueError("rho must be in (0, 1]")
    flat = grid.ravel()
    order = np.argsort(-flat, kind="stable")  # stable keeps row-major tie order
    cum = np.cumsum(flat[order])
    n_keep = int(np.searchsorted(cum, rho * total - 1e-12 * total) + 1)
    mask = np.zeros(flat.shape, dtype=np.uint8)
    mask[order[:n_keep]] = 1
    return mask.reshape(grid.shape)


def foreground_mask(stack: np.ndarray, kernel: int = DEFAULT_KERNEL,
                    sigma: float = DEFAULT_SIGMA, rho: float = DEFAULT_RHO) -> np.ndarray:
    """Full average -> smooth -> threshold chain on a head stack."""
    return threshold_mass(gaussian_smooth(merge_heads(stack), kernel, sigma), rho)


def align_mask(mask: np.ndarray, box, out_h: int, out_w: int) -> np.ndarray:
    """Resample a binary mask into a box, re-binarizing at 0.5."""
    sampled = crops.align(mask.astype(np.float64), box, out_h, out_w)
    return (sampled >= 0.5).astype(np.uint8)
