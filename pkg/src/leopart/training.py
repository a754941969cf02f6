"""Training loop: crop sampling, teacher targets, student updates, EMA.

Determinism contract: every random draw is keyed by (seed, purpose, epoch,
image) so a run resumed from a checkpoint at any step boundary reproduces
the uninterrupted run bit-for-bit (single-threaded).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import attention, crops, loss as loss_mod, model, optim, sinkhorn, tensor_io


@dataclass
class TrainConfig:
    temperature: float = 0.1
    lr_head: float = 1e-4
    lr_encoder: float = 1e-5
    weight_decay: float = 0.0
    epochs: int = 50
    batch_size: int = 32
    ema_start: float = optim.EMA_START
    n_prototypes: int = model.DEFAULT_PROTOTYPES
    epsilon: float = sinkhorn.DEFAULT_EPSILON
    sinkhorn_iters: int = sinkhorn.DEFAULT_ITERS
    queue_capacity: int = sinkhorn.QUEUE_CAPACITY
    fg_masking: str = "fg"  # "all", "fg" or "bg"
    hidden_dim: int = model.DEFAULT_HIDDEN
    out_dim: int = model.DEFAULT_OUT
    token_dim: int | None = None  # None: same as the raw token dim
    align_size: int = loss_mod.ALIGN_SIZE
    global_grid: int = 7
    local_grid: int = 5
    n_global: int = 2
    n_local: int = 4
    global_scale: tuple[float, float] = (0.4, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.4)
    min_intersection: float = 0.01
    aspect: tuple[float, float] = (3 / 4, 4 / 3)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.fg_masking not in ("all", "fg", "bg"):
            raise ValueError(f"unknown fg_masking mode {self.fg_masking!r}")

    def crop_spec(self) -> crops.CropSpec:
        return crops.CropSpec(
            n_global=self.n_global, n_local=self.n_local,
            global_scale=self.global_scale, local_scale=self.local_scale,
            min_intersection=self.min_intersection, aspect=self.aspect,
        )

    def hash(self) -> str:
        return tensor_io.config_hash(repr(sorted(asdict(self).items())))


def make_views(raw_grid: np.ndarray, boxes: list[crops.CropBox],
               cfg: TrainConfig) -> list[loss_mod.CropView]:
    views = []
    for box in boxes:
        g = cfg.global_grid if box.kind == "global" else cfg.local_grid
        views.append(loss_mod.CropView(box=box, raw=crops.align(raw_grid, box, g, g)))
    return views


def crop_masks(attn_stack: np.ndarray | None, boxes: list[crops.CropBox],
               cfg: TrainConfig) -> list[np.ndarray | None]:
    """One foreground mask per global crop from the image attention stack."""
    masks: list[np.ndarray | None] = []
    for box in boxes:
        if box.kind != "global":
            continue
        if cfg.fg_masking == "all" or attn_stack is None:
            masks.append(None)
            continue
        g = cfg.global_grid
        cropped = crops.align(attn_stack.astype(np.float64), box, g, g)
        fg = attention.foreground_mask(np.maximum(cropped, 0.0))
        masks.append(fg if cfg.fg_masking == "fg" else (1 - fg).astype(np.uint8))
    return masks


@dataclass
class TrainState:
    student: dict[str, np.ndarray]
    teacher: dict[str, np.ndarray]
    adam: optim.AdamState
    queue: sinkhorn.FeatureQueue
    step: int = 0
    losses: list[tuple[int, float]] = field(default_factory=list)


def init_state(cfg: TrainConfig, raw_dim: int) -> TrainState:
    dims = model.ModelDims(
        raw_dim=raw_dim,
        token_dim=cfg.token_dim or raw_dim,
        hidden_dim=cfg.hidden_dim,
        out_dim=cfg.out_dim,
        n_prototypes=cfg.n_prototypes,
    )
    rng = np.random.default_rng([cfg.seed, 7])
    student = model.init_params(dims, rng)
    teacher = {k: v.copy() for k, v in student.items() if not k.startswith("prototypes")}
    return TrainState(
        student=student,
        teacher=teacher,
        adam=optim.AdamState(),
        queue=sinkhorn.FeatureQueue(capacity=cfg.queue_capacity),
    )


def _lr_table(cfg: TrainConfig, step: int, total_steps: int) -> dict[str, float]:
    head_lr = optim.cosine_decay(cfg.lr_head, step, total_steps)
    enc_lr = optim.cosine_decay(cfg.lr_encoder, step, total_steps)
    return {"__head__": head_lr, "__encoder__": enc_lr}


def train_step(images: list[tuple[np.ndarray, np.ndarray | None]],
               state: TrainState, cfg: TrainConfig, total_steps: int,
               crop_seeds: list[list[int]]) -> float:
    """One optimizer step over a batch of (raw_grid, attention_stack) images."""
    batch_loss = 0.0
    batch_grads: dict[str, np.ndarray] = {}
    for (raw_grid, attn), seed in zip(images, crop_seeds):
        boxes, boxmat = crops.sample_crops(cfg.crop_spec(), np.random.default_rng(seed))
        views = make_views(raw_grid.astype(np.float32), boxes, cfg)
        masks = crop_masks(attn, boxes, cfg)
        img_loss, grads, _, teacher_rows = loss_mod.total_loss(
            views, boxmat, state.student, state.teacher, state.queue, masks,
            tau=cfg.temperature, epsilon=cfg.epsilon, n_iters=cfg.sinkhorn_iters,
            out_size=cfg.align_size,
        )
        state.queue.push(teacher_rows.astype(np.float32))
        batch_loss += img_loss
        model.accumulate(batch_grads, grads)
    n = len(images)
    batch_loss /= n
    for name in batch_grads:
        batch_grads[name] = batch_grads[name] / n

    lrs = _lr_table(cfg, state.step, total_steps)
    lr = {name: lrs["__encoder__"] if name.startswith("encoder.") else lrs["__head__"]
          for name in state.student}
    optim.adam_step(state.student, batch_grads, state.adam, lr, cfg.weight_decay)
    optim.ema_update(state.teacher, state.student,
                     optim.ema_momentum(state.step, total_steps, cfg.ema_start))
    state.step += 1
    state.losses.append((state.step, batch_loss))
    return batch_loss


def _load_image(manifest: tensor_io.DatasetManifest, idx: int) -> tuple[np.ndarray, np.ndarray | None]:
    rec = manifest.records[idx]
    return (
        manifest.load_features(rec).astype(np.float32),
        manifest.load_attention(rec),
    )


def train(manifest: tensor_io.DatasetManifest, cfg: TrainConfig,
          resume: tensor_io.Checkpoint | None = None,
          stop_after: int | None = None,
          ) -> tuple[tensor_io.Checkpoint, list[tuple[int, float]]]:
    """Full training run; returns the final checkpoint and the loss curve.

    ``stop_after`` interrupts the run once that many optimizer steps have
    completed (counted from step 0), leaving a resumable checkpoint.
    """
    n_images = len(manifest)
    if n_images == 0:
        raise ValueError("empty dataset")
    first = manifest.load_features(manifest.records[0])
    steps_per_epoch = (n_images + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch

    if resume is not None:
        state = state_from_checkpoint(resume, cfg, raw_dim=first.shape[0])
    else:
        state = init_state(cfg, raw_dim=first.shape[0])

    start_epoch = state.step // steps_per_epoch
    for epoch in range(start_epoch, cfg.epochs):
        order = np.random.default_rng([cfg.seed, 11, epoch]).permutation(n_images)
        for b_start in range(0, n_images, cfg.batch_size):
            batch_pos = b_start // cfg.batch_size
            step_index = epoch * steps_per_epoch + batch_pos
            if step_index < state.step:
                continue  # already done before a resume
            if stop_after is not None and state.step >= stop_after:
                return checkpoint_from_state(state, cfg), state.losses
            idxs = order[b_start:b_start + cfg.batch_size]
            images = [_load_image(manifest, int(i)) for i in idxs]
            seeds = [[cfg.seed, 13, epoch, int(i)] for i in idxs]
            train_step(images, state, cfg, total_steps, seeds)
    return checkpoint_from_state(state, cfg), state.losses


def checkpoint_from_state(state: TrainState, cfg: TrainConfig) -> tensor_io.Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    for name, p in state.student.items():
        tensors[f"student/{name}"] = p.astype(np.float32)
    for name, p in state.teacher.items():
        tensors[f"teacher/{name}"] = p.astype(np.float32)
    for name, p in state.adam.m.items():
        tensors[f"adam_m/{name}"] = p.astype(np.float32)
    for name, p in state.adam.v.items():
        tensors[f"adam_v/{name}"] = p.astype(np.float32)
    queue_rows = state.queue.snapshot()
    if len(queue_rows):
        tensors["queue/rows"] = queue_rows.astype(np.float32)
    return tensor_io.Checkpoint(tensors=tensors, step=state.step, config_hash=cfg.hash())


def state_from_checkpoint(ckpt: tensor_io.Checkpoint, cfg: TrainConfig,
                          raw_dim: int) -> TrainState:
    if ckpt.config_hash != cfg.hash():
        raise ValueError("checkpoint config hash does not match the given config")
    state = init_state(cfg, raw_dim)
    student, teacher = {}, {}
    adam = optim.AdamState(t=ckpt.step)
    queue = sinkhorn.FeatureQueue(capacity=cfg.queue_capacity)
    for name, t in ckpt.tensors.items():
        scope, _, rest = name.partition("/")
        if scope == "student":
            student[rest] = t.copy()
        elif scope == "teacher":
            teacher[rest] = t.copy()
        elif scope == "adam_m":
            adam.m[rest] = t.copy()
        elif scope == "adam_v":
            adam.v[rest] = t.copy()
        elif scope == "queue":
            queue.push(t)
    state.student = student
    state.teacher = teacher
    state.adam = adam
    state.queue = queue
    state.step = ckpt.step
    return state


def embed_features(raw_grid: np.ndarray, params: dict[str, np.ndarray],
                   use_head: bool = False) -> np.ndarray:
    """Encoder (optionally + head) features of one image grid, (D, H', W')."""
    _, h, w = raw_grid.shape
    raw = raw_grid.reshape(raw_grid.shape[0], h * w).T.astype(np.float32)
    tokens = model.encoder_forward(raw, params)
    if use_head:
        tokens = model.project(tokens, params)
    return tokens.T.reshape(-1, h, w)


def write_loss_curve(losses: list[tuple[int, float]], path) -> None:
    lines = ["step,loss"] + [f"{s},{v:.8f}" for s, v in losses]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
