"""Masked swapped-prediction loss over aligned crop pairs.

Teacher assignments of each global crop are the targets; every other crop
predicts them inside the pairwise intersection, resampled to a fixed
resolution. Gradients are accumulated by hand through the softmax
cross-entropy, the alignment resampling, the prototype scoring, the head
and the token encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention, crops, model, sinkhorn

ALIGN_SIZE = 7


@dataclass
class CropView:
    """One crop of an image: its box and the raw token grid extracted for it."""

    box: crops.CropBox
    raw: np.ndarray  # (raw_dim, h, w)

    @property
    def grid_hw(self) -> tuple[int, int]:
        return self.raw.shape[1], self.raw.shape[2]


@dataclass
class PairDiagnostics:
    n_pairs_total: int = 0
    n_pairs_contributing: int = 0
    n_empty_intersections: int = 0
    n_fully_masked: int = 0


def softmax_cross_entropy_grid(logits: np.ndarray, targets: np.ndarray,
                               mask: np.ndarray, tau: float) -> tuple[float, np.ndarray, int]:
    """Per-cell CE between temperature-softmaxed logits and target rows.

    ``logits``/``targets`` are (K, h, w); ``mask`` is (h, w) in {0, 1}. The
    loss is the mean over cells with nonzero mask; the returned gradient is
    with respect to ``logits`` and already includes that mean.
    """
    n_active = int(mask.sum())
    if n_active == 0:
        return 0.0, np.zeros_like(logits), 0
    s = logits / tau
    s = s - s.max(axis=0, keepdims=True)
    log_norm = np.log(np.exp(s).sum(axis=0, keepdims=True))
    log_p = s - log_norm
    ce = -(targets * log_p).sum(axis=0)
    loss = float((ce * mask).sum() / n_active)
    p = np.exp(log_p)
    g = (p - targets) * (mask / (tau * n_active))
    return loss, g.astype(logits.dtype, copy=False), n_active


def pair_loss(pred_logits: np.ndarray, target_q: np.ndarray,
              box_pred, box_target, fg_mask: np.ndarray | None,
              tau: float, out_size: int = ALIGN_SIZE) -> tuple[float, np.ndarray, int]:
    """Masked cross-entropy of one (predictor, target) crop pair.

    ``box_pred`` is the intersection in predictor-local coordinates,
    ``box_target`` the same region in target-local coordinates. ``fg_mask``
    is a binary grid at the target crop's resolution, or None for no
    weighting. Returns (loss, d loss / d pred_logits grid, active cells).
    """
    aligned_pred = crops.align(pred_logits, box_pred, out_size, out_size)
    aligned_q = crops.align(target_q, box_target, out_size, out_size)
    if fg_mask is None:
        mask = np.ones((out_size, out_size))
    else:
        mask = attention.align_mask(fg_mask, box_target, out_size, out_size).astype(np.float64)
    loss, g_aligned, n_active = softmax_cross_entropy_grid(aligned_pred, aligned_q, mask, tau)
    _, h, w = pred_logits.shape
    g_pred = crops.align_backward(g_aligned, box_pred, h, w)
    return loss, g_pred, n_active


def compute_targets(views: list[CropView], teacher_params: dict[str, np.ndarray],
                    prototypes: np.ndarray, queue: sinkhorn.FeatureQueue | None,
                    epsilon: float, n_iters: int) -> tuple[list[np.ndarray], np.ndarray]:
    """Sinkhorn targets for every global crop, jointly over the batch + queue.

    Returns one (K, h, w) row-stochastic grid per global view plus the
    teacher feature rows (for the caller to push onto the queue afterwards).
    """
    global_views = [v for v in views if v.box.kind == "global"]
    feats = []
    shapes = []
    for view in global_views:
        _, h, w = view.raw.shape
        raw = view.raw.reshape(view.raw.shape[0], h * w).T
        tokens = model.encoder_forward(raw, teacher_params)
        z = model.project(tokens, teacher_params)
        feats.append(z)
        shapes.append((h, w))
    rows = np.concatenate(feats, axis=0)
    queue_rows = queue.active_rows() if queue is not None else None
    if queue_rows is not None and len(queue_rows) == 0:
        queue_rows = None
    batch = sinkhorn.FeatureBatch.from_rows(rows, queue_rows)
    q = sinkhorn.assign(batch, prototypes, epsilon=epsilon, n_iters=n_iters).q
    grids = []
    offset = 0
    for h, w in shapes:
        n = h * w
        grids.append(q[offset:offset + n].T.reshape(-1, h, w).astype(rows.dtype))
        offset += n
    return grids, rows


def loss_given_targets(views: list[CropView], boxmat: crops.BoxMatrix,
                       params: dict[str, np.ndarray],
                       target_grids: list[np.ndarray],
                       masks: list[np.ndarray | None],
                       tau: float, out_size: int = ALIGN_SIZE,
                       ) -> tuple[float, dict[str, np.ndarray], PairDiagnostics]:
    """Swapped-prediction loss and parameter gradients with fixed targets.

    ``target_grids``/``masks`` carry one entry per global view, in view
    order. The loss sums over ordered pairs (global target j, predictor
    i != j) and is normalized by the number of contributing pairs.
    """
    global_idx = [i for i, v in enumerate(views) if v.box.kind == "global"]
    diag = PairDiagnostics()
    forwards = [model.forward_crop(v.raw, params) for v in views]
    logit_grads = [np.zeros_like(f[0]) for f in forwards]
    raw_loss = 0.0
    for g_pos, j in enumerate(global_idx):
        for i in range(len(views)):
            if i == j:
                continue
            diag.n_pairs_total += 1
            box_pred = boxmat[i, j]
            box_target = boxmat[j, i]
            if box_pred is None or box_target is None:
                diag.n_empty_intersections += 1
                continue
            loss, g_pred, n_active = pair_loss(
                forwards[i][0], target_grids[g_pos], box_pred, box_target,
                masks[g_pos], tau, out_size,
            )
            if n_active == 0:
                diag.n_fully_masked += 1
                continue
            diag.n_pairs_contributing += 1
            raw_loss += loss
            logit_grads[i] += g_pred
    n = max(diag.n_pairs_contributing, 1)
    total = raw_loss / n
    grads: dict[str, np.ndarray] = {}
    for (logits, cache), g_grid in zip(forwards, logit_grads):
        if not np.any(g_grid):
            continue
        model.accumulate(grads, model.backward_crop(g_grid / n, cache, params))
    for name, p in params.items():
        if name not in grads:
            grads[name] = np.zeros_like(p)
    return total, grads, diag


def total_loss(views: list[CropView], boxmat: crops.BoxMatrix,
               student_params: dict[str, np.ndarray],
               teacher_params: dict[str, np.ndarray],
               queue: sinkhorn.FeatureQueue | None,
               masks: list[np.ndarray | None],
               tau: float, epsilon: float, n_iters: int,
               out_size: int = ALIGN_SIZE,
               ) -> tuple[float, dict[str, np.ndarray], PairDiagnostics, np.ndarray]:
    """Full swapped-prediction step: Sinkhorn targets (no grad) + student loss.

    Returns the teacher's global-crop feature rows so the trainer can push
    them onto the queue after the step.
    """
    target_grids, teacher_rows = compute_targets(
        views, teacher_params, student_params["prototypes"], queue, epsilon, n_iters)
    loss, grads, diag = loss_given_targets(
        views, boxmat, student_params, target_grids, masks, tau, out_size)
    return loss, grads, diag, teacher_rows
