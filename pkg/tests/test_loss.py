"""Hand oracles and finite-difference checks for the swapped-prediction loss."""

import numpy as np
import pytest

from leopart import crops, loss, model, sinkhorn


def rel_err(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def random_simplex_grid(rng, k, h, w):
    q = rng.uniform(0.1, 1.0, size=(k, h, w))
    return q / q.sum(axis=0, keepdims=True)


# ------------------------------------------------- softmax cross entropy


def test_cross_entropy_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    k, h, w, tau = 5, 4, 3, 0.1
    logits = rng.normal(size=(k, h, w))
    targets = random_simplex_grid(rng, k, h, w)
    mask = (rng.uniform(size=(h, w)) < 0.7).astype(np.float64)
    mask[0, 0] = 1.0  # keep at least one active cell
    got, _, n_active = loss.softmax_cross_entropy_grid(logits, targets, mask, tau)

    total, count = 0.0, 0
    for r in range(h):
        for c in range(w):
            if mask[r, c] == 0:
                continue
            s = [logits[j, r, c] / tau for j in range(k)]
            norm = sum(np.exp(v) for v in s)
            ce = -sum(targets[j, r, c] * np.log(np.exp(s[j]) / norm) for j in range(k))
            total += ce
            count += 1
    assert n_active == count
    assert got == pytest.approx(total / count, abs=1e-6)


def test_cross_entropy_perfect_prediction_is_near_zero():
    k, h, w = 6, 2, 2
    hot = np.zeros((k, h, w))
    hot[2] = 1.0
    logits = 30.0 * hot  # softmax at tau=1 puts ~all mass on channel 2
    val, g, _ = loss.softmax_cross_entropy_grid(logits, hot, np.ones((h, w)), 1.0)
    assert val < 1e-8
    assert np.max(np.abs(g)) < 1e-8


def test_cross_entropy_uniform_is_log_k():
    k, h, w = 7, 3, 3
    logits = np.zeros((k, h, w))
    targets = np.full((k, h, w), 1.0 / k)
    val, _, _ = loss.softmax_cross_entropy_grid(logits, targets, np.ones((h, w)), 0.1)
    assert val == pytest.approx(np.log(k), rel=1e-12)


def test_cross_entropy_shift_invariance():
    rng = np.random.default_rng(1)
    k, h, w = 4, 3, 2
    logits = rng.normal(size=(k, h, w))
    targets = random_simplex_grid(rng, k, h, w)
    mask = np.ones((h, w))
    base, g0, _ = loss.softmax_cross_entropy_grid(logits, targets, mask, 0.1)
    shifted, g1, _ = loss.softmax_cross_entropy_grid(logits + 3.7, targets, mask, 0.1)
    assert shifted == pytest.approx(base, rel=1e-10)
    assert np.allclose(g0, g1, atol=1e-10)


def test_cross_entropy_empty_mask_contributes_nothing():
    logits = np.ones((3, 2, 2))
    targets = np.full((3, 2, 2), 1 / 3)
    val, g, n = loss.softmax_cross_entropy_grid(logits, targets, np.zeros((2, 2)), 0.1)
    assert (val, n) == (0.0, 0)
    assert np.all(g == 0.0)


def test_cross_entropy_grad_matches_fd():
    rng = np.random.default_rng(2)
    k, h, w, tau = 5, 3, 3, 0.25
    logits = rng.normal(size=(k, h, w))
    targets = random_simplex_grid(rng, k, h, w)
    mask = (rng.uniform(size=(h, w)) < 0.6).astype(np.float64)
    mask[1, 1] = 1.0
    _, g, _ = loss.softmax_cross_entropy_grid(logits, targets, mask, tau)
    eps = 1e-6
    fd = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        lp = logits.copy(); lp[idx] += eps
        lm = logits.copy(); lm[idx] -= eps
        up, _, _ = loss.softmax_cross_entropy_grid(lp, targets, mask, tau)
        dn, _, _ = loss.softmax_cross_entropy_grid(lm, targets, mask, tau)
        fd[idx] = (up - dn) / (2 * eps)
    assert rel_err(g, fd) < 1e-7


# ------------------------------------------------- pair loss


def test_pair_loss_identity_boxes_match_direct_ce():
    """With full boxes and matching grids, alignment is exact resampling-free."""
    rng = np.random.default_rng(3)
    k, n = 4, 7
    logits = rng.normal(size=(k, n, n))
    q = random_simplex_grid(rng, k, n, n)
    got, _, n_active = loss.pair_loss(logits, q, crops.FULL_BOX, crops.FULL_BOX,
                                      None, tau=0.1, out_size=n)
    direct, _, _ = loss.softmax_cross_entropy_grid(logits, q, np.ones((n, n)), 0.1)
    assert n_active == n * n
    assert got == pytest.approx(direct, rel=1e-10)


def test_pair_loss_grad_matches_fd_through_alignment():
    rng = np.random.default_rng(4)
    k = 3
    logits = rng.normal(size=(k, 5, 5))
    q = random_simplex_grid(rng, k, 4, 4)
    box_pred = (0.1, 0.2, 0.8, 0.9)
    box_target = (0.0, 0.25, 0.7, 0.95)
    fg = np.ones((4, 4))
    fg[0, :] = 0.0
    _, g, _ = loss.pair_loss(logits, q, box_pred, box_target, fg, tau=0.2, out_size=3)
    eps = 1e-6
    fd = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        lp = logits.copy(); lp[idx] += eps
        lm = logits.copy(); lm[idx] -= eps
        up, _, _ = loss.pair_loss(lp, q, box_pred, box_target, fg, tau=0.2, out_size=3)
        dn, _, _ = loss.pair_loss(lm, q, box_pred, box_target, fg, tau=0.2, out_size=3)
        fd[idx] = (up - dn) / (2 * eps)
    assert rel_err(g, fd) < 1e-6


# ------------------------------------------------- full loss plumbing


def overlapping_views(rng, raw_dim, n_global=2, n_local=2, g=3, l=3):
    """Crop views whose boxes all pairwise intersect."""
    boxes = []
    for i in range(n_global):
        boxes.append(crops.CropBox(0.05 * i, 0.05 * i, 0.7 + 0.05 * i,
                                   0.7 + 0.05 * i, kind="global"))
    for i in range(n_local):
        boxes.append(crops.CropBox(0.2 + 0.04 * i, 0.25, 0.6 + 0.04 * i, 0.65,
                                   kind="local"))
    views = [loss.CropView(box=b, raw=rng.normal(size=(raw_dim, g, g))
                           if b.kind == "global" else rng.normal(size=(raw_dim, l, l)))
             for b in boxes]
    return views, crops.box_matrix(boxes)


def make_params(raw_dim=8, k=5, seed=0):
    dims = model.ModelDims(raw_dim=raw_dim, token_dim=raw_dim, hidden_dim=16,
                           out_dim=8, n_prototypes=k)
    rng = np.random.default_rng(seed)
    return (model.init_params(dims, rng, dtype=np.float64),
            model.init_params(dims, rng, dtype=np.float64))


def test_pair_counts_two_globals():
    rng = np.random.default_rng(5)
    student, teacher = make_params()
    views, boxmat = overlapping_views(rng, 8, n_global=2, n_local=0)
    masks = [None, None]
    total, grads, diag, _ = loss.total_loss(
        views, boxmat, student, teacher, None, masks,
        tau=0.1, epsilon=0.05, n_iters=3, out_size=3)
    assert diag.n_pairs_total == 2
    assert diag.n_pairs_contributing == 2
    assert np.isfinite(total)
    assert set(grads) == set(student)


def test_pair_counts_two_globals_four_locals():
    rng = np.random.default_rng(6)
    student, teacher = make_params()
    views, boxmat = overlapping_views(rng, 8, n_global=2, n_local=4)
    masks = [None, None]
    _, _, diag, _ = loss.total_loss(
        views, boxmat, student, teacher, None, masks,
        tau=0.1, epsilon=0.05, n_iters=3, out_size=3)
    # each of 2 targets is predicted by the 5 other crops
    assert diag.n_pairs_total == 10
    assert diag.n_pairs_contributing == 10


def test_disjoint_pairs_are_skipped():
    rng = np.random.default_rng(7)
    student, teacher = make_params()
    boxes = [
        crops.CropBox(0.0, 0.0, 0.45, 0.45, kind="global"),
        crops.CropBox(0.0, 0.0, 0.5, 0.5, kind="global"),
        crops.CropBox(0.6, 0.6, 0.9, 0.9, kind="local"),  # off in a corner
    ]
    views = [loss.CropView(box=b, raw=rng.normal(size=(8, 3, 3))) for b in boxes]
    _, _, diag, _ = loss.total_loss(
        views, crops.box_matrix(boxes), student, teacher, None, [None, None],
        tau=0.1, epsilon=0.05, n_iters=3, out_size=3)
    assert diag.n_pairs_total == 4
    assert diag.n_empty_intersections == 2
    assert diag.n_pairs_contributing == 2


def test_targets_are_row_stochastic_grids():
    rng = np.random.default_rng(8)
    _, teacher = make_params()
    student, _ = make_params(seed=1)
    views, _ = overlapping_views(rng, 8, n_global=2, n_local=1)
    grids, rows = loss.compute_targets(views, teacher, student["prototypes"],
                                       None, epsilon=0.05, n_iters=3)
    assert len(grids) == 2
    for grid in grids:
        assert np.allclose(grid.sum(axis=0), 1.0, atol=1e-6)
    assert rows.shape == (2 * 9, 8)
    assert np.allclose(np.linalg.norm(rows, axis=1), 1.0, atol=1e-5)


def test_total_loss_leaves_teacher_untouched():
    rng = np.random.default_rng(9)
    student, teacher = make_params()
    before = {k: v.copy() for k, v in teacher.items()}
    views, boxmat = overlapping_views(rng, 8)
    loss.total_loss(views, boxmat, student, teacher, None, [None, None],
                    tau=0.1, epsilon=0.05, n_iters=3)
    for name, v in teacher.items():
        assert np.array_equal(v, before[name])
    # no gradient entries for teacher-only scopes
    _, grads, _, _ = loss.total_loss(views, boxmat, student, teacher, None,
                                     [None, None], tau=0.1, epsilon=0.05, n_iters=3)
    assert set(grads) == set(student)


def test_queue_rows_change_targets():
    rng = np.random.default_rng(10)
    student, teacher = make_params()
    views, _ = overlapping_views(rng, 8, n_global=2, n_local=0)
    empty = loss.compute_targets(views, teacher, student["prototypes"], None,
                                 epsilon=0.05, n_iters=3)[0]
    queue = sinkhorn.FeatureQueue(capacity=32)
    extra = rng.normal(size=(32, 8))
    extra /= np.linalg.norm(extra, axis=1, keepdims=True)
    queue.push(extra.astype(np.float32))
    with_queue = loss.compute_targets(views, teacher, student["prototypes"], queue,
                                      epsilon=0.05, n_iters=3)[0]
    assert not np.allclose(empty[0], with_queue[0], atol=1e-6)


def test_full_gradient_suite_matches_fd():
    """All student parameters through the complete loss, FD in f64."""
    rng = np.random.default_rng(11)
    student, teacher = make_params(raw_dim=8, k=5, seed=12)
    views, boxmat = overlapping_views(rng, 8, n_global=2, n_local=2)
    mask = np.ones((3, 3))
    mask[0, 0] = 0.0
    masks = [mask, mask.copy()]
    target_grids, _ = loss.compute_targets(views, teacher, student["prototypes"],
                                           None, epsilon=0.05, n_iters=3)
    _, grads, diag = loss.loss_given_targets(views, boxmat, student, target_grids,
                                             masks, tau=0.1, out_size=3)
    assert diag.n_pairs_contributing == 6

    def scalar(ps):
        val, _, _ = loss.loss_given_targets(views, boxmat, ps, target_grids,
                                            masks, tau=0.1, out_size=3)
        return val

    eps = 1e-6
    for name, p in student.items():
        fd = np.zeros_like(p)
        flat, fdflat = p.reshape(-1), fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = scalar(student)
            flat[i] = orig - eps
            dn = scalar(student)
            flat[i] = orig
            fdflat[i] = (up - dn) / (2 * eps)
        assert rel_err(grads[name], fd) < 1e-4, name
