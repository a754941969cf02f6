"""Token encoder, projection head and prototype scoring with manual backprop.

Parameters live in flat ``{name: array}`` dicts so the optimizer and the
finite-difference harness can treat them uniformly. Tokens are rows; all
forward functions return the caches their backward twins need.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

NORM_GUARD = 1e-12
SQRT2 = np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

DEFAULT_HIDDEN = 2048
DEFAULT_OUT = 256
DEFAULT_PROTOTYPES = 300


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / SQRT2)) + x * np.exp(-0.5 * x * x) * INV_SQRT_2PI


def l2_normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms < NORM_GUARD):
        raise FloatingPointError("degenerate pre-normalization vector (norm < 1e-12)")
    return x / norms, norms


def l2_normalize_rows_backward(g: np.ndarray, y: np.ndarray, norms: np.ndarray) -> np.ndarray:
    return (g - y * np.sum(g * y, axis=1, keepdims=True)) / norms


@dataclass
class ModelDims:
    raw_dim: int
    token_dim: int
    hidden_dim: int = DEFAULT_HIDDEN
    out_dim: int = DEFAULT_OUT
    n_prototypes: int = DEFAULT_PROTOTYPES


def init_params(dims: ModelDims, rng: np.random.Generator,
                dtype=np.float32) -> dict[str, np.ndarray]:
    """Student parameters: per-token affine encoder, 3-layer head, prototypes."""

    def affine(prefix: str, n_in: int, n_out: int) -> dict[str, np.ndarray]:
        w = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))
        return {f"{prefix}.w": w.astype(dtype), f"{prefix}.b": np.zeros(n_out, dtype=dtype)}

    params: dict[str, np.ndarray] = {}
    params.update(affine("encoder", dims.raw_dim, dims.token_dim))
    params.update(affine("head.l1", dims.token_dim, dims.hidden_dim))
    params.update(affine("head.l2", dims.hidden_dim, dims.hidden_dim))
    params.update(affine("head.l3", dims.hidden_dim, dims.out_dim))
    protos = rng.normal(size=(dims.n_prototypes, dims.out_dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    params["prototypes"] = protos.astype(dtype)
    return params


def encoder_forward(raw: np.ndarray, params: dict[str, np.ndarray], prefix: str = "") -> np.ndarray:
    return raw @ params[f"{prefix}encoder.w"] + params[f"{prefix}encoder.b"]


def encoder_backward(g: np.ndarray, raw: np.ndarray, prefix: str = "") -> dict[str, np.ndarray]:
    return {f"{prefix}encoder.w": raw.T @ g, f"{prefix}encoder.b": g.sum(axis=0)}


def head_forward(tokens: np.ndarray, params: dict[str, np.ndarray],
                 prefix: str = "") -> tuple[np.ndarray, dict]:
    """Three affine layers with GELU gates, then a row-wise L2 bottleneck."""
    p = lambda name: params[f"{prefix}head.{name}"]
    h1 = tokens @ p("l1.w") + p("l1.b")
    a1 = gelu(h1)
    h2 = a1 @ p("l2.w") + p("l2.b")
    a2 = gelu(h2)
    h3 = a2 @ p("l3.w") + p("l3.b")
    z, norms = l2_normalize_rows(h3)
    cache = {"tokens": tokens, "h1": h1, "a1": a1, "h2": h2, "a2": a2,
             "norms": norms, "z": z}
    return z, cache


def head_backward(gz: np.ndarray, cache: dict, params: dict[str, np.ndarray],
                  prefix: str = "") -> tuple[np.ndarray, dict[str, np.ndarray]]:
    p = lambda name: params[f"{prefix}head.{name}"]
    gh3 = l2_normalize_rows_backward(gz, cache["z"], cache["norms"])
    grads = {
        f"{prefix}head.l3.w": cache["a2"].T @ gh3,
        f"{prefix}head.l3.b": gh3.sum(axis=0),
    }
    ga2 = gh3 @ p("l3.w").T
    gh2 = ga2 * gelu_grad(cache["h2"])
    grads[f"{prefix}head.l2.w"] = cache["a1"].T @ gh2
    grads[f"{prefix}head.l2.b"] = gh2.sum(axis=0)
    ga1 = gh2 @ p("l2.w").T
    gh1 = ga1 * gelu_grad(cache["h1"])
    grads[f"{prefix}head.l1.w"] = cache["tokens"].T @ gh1
    grads[f"{prefix}head.l1.b"] = gh1.sum(axis=0)
    g_tokens = gh1 @ p("l1.w").T
    return g_tokens, grads


def project(tokens: np.ndarray, params: dict[str, np.ndarray], prefix: str = "") -> np.ndarray:
    """Head forward without caches; rows come back unit-norm."""
    z, _ = head_forward(tokens, params, prefix)
    return z


def forward_crop(raw_grid: np.ndarray, params: dict[str, np.ndarray],
                 prefix: str = "") -> tuple[np.ndarray, dict]:
    """raw (raw_dim, h, w) grid -> prototype logits grid (K, h, w) with caches."""
    _, h, w = raw_grid.shape
    raw = raw_grid.reshape(raw_grid.shape[0], h * w).T  # tokens as rows
    tokens = encoder_forward(raw, params, prefix)
    z, cache = head_forward(tokens, params, prefix)
    logits = z @ params["prototypes"].T
    cache.update({"raw": raw, "grid_hw": (h, w)})
    return logits.T.reshape(-1, h, w), cache


def backward_crop(g_logits_grid: np.ndarray, cache: dict,
                  params: dict[str, np.ndarray], prefix: str = "") -> dict[str, np.ndarray]:
    """Backprop a (K, h, w) logits gradient to encoder/head/prototype grads."""
    h, w = cache["grid_hw"]
    g_logits = g_logits_grid.reshape(-1, h * w).T  # (n_tokens, K)
    grads = {"prototypes": g_logits.T @ cache["z"]}
    gz = g_logits @ params["prototypes"]
    g_tokens, head_grads = head_backward(gz, cache, params, prefix)
    grads.update(head_grads)
    grads.update(encoder_backward(g_tokens, cache["raw"], prefix))
    return grads


def accumulate(into: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               strip_prefix: str = "") -> None:
    for name, g in grads.items():
        key = name.removeprefix(strip_prefix)
        if key in into:
            into[key] = into[key] + g
        else:
            into[key] = g.copy()
