"""Joint optimization of segmentation and self-supervised depth.

One step draws a labelled segmentation batch and a batch of unlabelled
triplets, runs each through its own encoder pass, sums the two objectives and
backpropagates once. Gradient scaling happens at the junctions between the
shared encoder and the two decoders, so the encoder sees
``(1 - lam) * G_depth + lam * G_seg``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .geometry import Intrinsics, pose_to_matrix, reproject_grid
from .losses import (BETA, LossReport, class_weights, label_histogram, multiscale_depth_loss,
                     one_hot, photometric_loss, smoothness_loss, weighted_cross_entropy)
from .network import ConfigError, Model, ScaleJunction
from .tensor import ContractError, Tensor

MODES = ("multi", "seg", "depth")
LOG_HEADER = "epoch,step,j_ce,j_ph,j_sm,j_depth"


class TrainingError(ContractError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class TrainConfig:
    lam: float = 0.5
    lr: float = 1e-4
    decayed_lr: float = 1e-5
    epochs: int = 8
    decay_epoch: int | None = None  # default: 3/4 of the epochs
    seg_batch: int = 6
    depth_batch: int = 6
    seed: int = 0
    num_scales: int = 4
    flip: bool = True
    brightness: float = 0.2
    contrast: float = 0.2
    mode: str = "multi"
    beta: float = BETA
    max_steps: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("lr", "decayed_lr", "epochs", "seg_batch", "depth_batch", "num_scales"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.brightness < 0 or self.contrast < 0 or self.beta < 0:
            raise ConfigError("augmentation ranges and beta must be non-negative")
        if self.decay_epoch is None:
            self.decay_epoch = int(round(0.75 * self.epochs))

    def junction(self) -> ScaleJunction | None:
        return ScaleJunction(self.lam) if self.mode == "multi" else None

    @property
    def pose_scale(self) -> float:
        # pose gradients come from the depth objective only
        return 1.0 - self.lam if self.mode == "multi" else 1.0


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Step schedule with a single decay at ``config.decay_epoch``."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    return config.lr if epoch < config.decay_epoch else config.decayed_lr


class AdamState:
    """First/second moment buffers, one pair per parameter."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params, grads, state: AdamState, lr: float, names=None) -> None:
    """Bias-corrected Adam update in place. Parameters with a ``None``
    gradient keep their value and moments; the step counter still advances.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError("params, grads and optimizer state disagree in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise T.DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            label = names[i] if names else f"#{i}"
            raise TrainingError(f"non-finite gradient for parameter {label}; step aborted")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.data.dtype, copy=False)


# -- batches -----------------------------------------------------------------

@dataclass
class SegBatch:
    images: np.ndarray  # (N, 3, H, W) gray values, possibly jittered
    labels: np.ndarray  # (N, H, W)


@dataclass
class TripletBatch:
    inputs: np.ndarray  # (N, 3 frames, 3, H, W) network input, possibly jittered
    targets: np.ndarray  # (N, 3 frames, 3, H, W) unjittered, [0, 1] scale
    intrinsics: Intrinsics


def color_jitter(images: np.ndarray, rng: np.random.Generator, brightness: float, contrast: float) -> np.ndarray:
    """Per-sample brightness and contrast factors; all leading frames of one
    sample share the same factors. ``images`` is (N, ..., H, W) gray values.
    """
    n = images.shape[0]
    b = rng.uniform(1.0 - brightness, 1.0 + brightness, n)
    c = rng.uniform(1.0 - contrast, 1.0 + contrast, n)
    shape = (n,) + (1,) * (images.ndim - 1)
    out = images * b.reshape(shape)
    mean = out.reshape(n, -1).mean(axis=1).reshape(shape)
    return np.clip((out - mean) * c.reshape(shape) + mean, 0.0, 255.0)


def make_seg_batch(images, labels, rng, config: TrainConfig, dtype=np.float32) -> SegBatch:
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels)
    if config.flip:
        flips = rng.random(len(x)) < 0.5
        x = np.where(flips[:, None, None, None], x[..., ::-1], x)
        y = np.where(flips[:, None, None], y[..., ::-1], y)
    if config.brightness or config.contrast:
        x = color_jitter(x, rng, config.brightness, config.contrast)
    return SegBatch(x.astype(dtype), np.ascontiguousarray(y))


def make_triplet_batch(frames, K: Intrinsics, rng, config: TrainConfig, dtype=np.float32) -> TripletBatch:
    """``frames`` is (N, 3, 3, H, W) uint8. A single flip decision covers the
    whole batch so that one set of intrinsics stays valid."""
    x = np.asarray(frames, dtype=np.float64)
    if config.flip and rng.random() < 0.5:
        x = np.ascontiguousarray(x[..., ::-1])
        K = K.flipped(x.shape[-1])
    targets = x / 255.0
    inputs = x
    if config.brightness or config.contrast:
        inputs = color_jitter(x, rng, config.brightness, config.contrast)
    return TripletBatch(inputs.astype(dtype), targets.astype(dtype), K)


# -- objectives --------------------------------------------------------------

def seg_objective(model: Model, batch: SegBatch, junction: ScaleJunction | None) -> Tensor:
    probs = model.forward_seg(batch.images, junction)
    target = one_hot(batch.labels, model.config.num_classes, dtype=model.dtype)
    return weighted_cross_entropy(probs, target, model.class_weights)


def depth_objective(model: Model, batch: TripletBatch, junction: ScaleJunction | None,
                    pose_scale: float = 1.0, num_scales: int = 4, beta: float = BETA):
    """Multi-scale photometric + smoothness objective on a triplet batch.

    Depth at each scale is upsampled to full resolution before warping, so
    every scale is compared against the full-resolution target. Smoothness is
    evaluated at the native resolution of each scale.
    """
    x_t = batch.inputs[:, 1]
    out = model.forward_depth(x_t, junction)
    mats = [pose_to_matrix(model.forward_pose(x_t, batch.inputs[:, k], pose_scale)) for k in (0, 2)]
    target = Tensor(batch.targets[:, 1])
    sources = [Tensor(batch.targets[:, k]) for k in (0, 2)]
    ph, sm = [], []
    image_s = target
    for s in range(num_scales):
        depth = out.depths[s]
        for _ in range(s):
            depth = T.upsample2x(depth)
        warped = [T.grid_sample(src, reproject_grid(depth, m, batch.intrinsics)) for src, m in zip(sources, mats)]
        ph.append(photometric_loss(target, warped))
        sm.append(smoothness_loss(out.disparities[s], image_s))
        if s + 1 < num_scales:
            image_s = T.downsample2x(image_s)
    return multiscale_depth_loss(ph, sm, beta)


def train_step(model: Model, state: AdamState, seg_batch: SegBatch | None,
               triplet_batch: TripletBatch | None, config: TrainConfig, lr: float) -> LossReport:
    """Forward both tasks, one backward through the junctions, one Adam step."""
    if seg_batch is None and triplet_batch is None:
        raise ContractError("train_step needs at least one batch")
    model.train()
    model.zero_grad()
    junction = config.junction()
    report = LossReport()
    loss = None
    if seg_batch is not None:
        ce = seg_objective(model, seg_batch, junction)
        report.j_ce = ce.item()
        loss = ce
    if triplet_batch is not None:
        total, rep = depth_objective(model, triplet_batch, junction, config.pose_scale,
                                     config.num_scales, config.beta)
        report.j_ph, report.j_sm, report.j_depth, report.per_scale = rep.j_ph, rep.j_sm, rep.j_depth, rep.per_scale
        loss = total if loss is None else loss + total
    if not math.isfinite(loss.item()):
        raise TrainingError(f"non-finite loss: j_ce={report.j_ce!r} j_ph={report.j_ph!r} j_sm={report.j_sm!r}")
    T.backward(loss)
    named = list(model.named_parameters())
    adam_step([p for _, p in named], [p.grad for _, p in named], state, lr, [n for n, _ in named])
    return report


# -- loop --------------------------------------------------------------------

@dataclass
class TrainResult:
    reports: list[tuple[int, int, LossReport]] = field(default_factory=list)
    steps: int = 0
    epoch_end: list[dict] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for _, _, r in self.reports])

    def epoch_means(self, name: str) -> np.ndarray:
        epochs = np.array([e for e, _, _ in self.reports])
        values = self.column(name)
        return np.array([values[epochs == e].mean() for e in np.unique(epochs)])


def _stream(seed: int, source: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), source]))


def _batches(n: int, batch: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless shuffled index batches; incomplete tail batches are dropped."""
    if n < batch:
        raise ConfigError(f"pool of {n} items is smaller than batch size {batch}")
    while True:
        order = rng.permutation(n)
        for i in range(n // batch):
            yield order[i * batch:(i + 1) * batch]


def train(model: Model, seg_images, seg_labels, triplet_frames, intrinsics: Intrinsics,
          config: TrainConfig, log_path=None,
          on_epoch_end: Callable[[int, Model], dict | None] | None = None) -> TrainResult:
    """Train in place.

    ``seg_images`` (N, 3, H, W) and ``seg_labels`` (N, H, W) form the labelled
    pool; ``triplet_frames`` (M, 3, 3, H, W) the unlabelled one. Each source
    has its own random stream, so the segmentation batches are identical
    whether or not depth batches are drawn alongside them.
    """
    use_seg = config.mode in ("multi", "seg")
    use_depth = config.mode in ("multi", "depth")
    seg_rng, depth_rng = _stream(config.seed, 1), _stream(config.seed, 2)
    if use_seg:
        hist = label_histogram(seg_labels, model.config.num_classes)
        model.class_weights = class_weights(hist)
        seg_iter = _batches(len(seg_images), config.seg_batch, seg_rng)
        steps_per_epoch = len(seg_images) // config.seg_batch
    if use_depth:
        depth_iter = _batches(len(triplet_frames), config.depth_batch, depth_rng)
        if not use_seg:
            steps_per_epoch = len(triplet_frames) // config.depth_batch
    state = AdamState(model.parameters())
    result = TrainResult()
    log = open(log_path, "w") if log_path is not None else None
    try:
        if log:
            log.write(LOG_HEADER + "\n")
        for epoch in range(config.epochs):
            lr = lr_schedule(epoch, config)
            for step in range(steps_per_epoch):
                if config.max_steps is not None and result.steps >= config.max_steps:
                    break
                sb = tb = None
                if use_seg:
                    idx = next(seg_iter)
                    sb = make_seg_batch(seg_images[idx], seg_labels[idx], seg_rng, config, model.dtype)
                if use_depth:
                    idx = next(depth_iter)
                    tb = make_triplet_batch(triplet_frames[idx], intrinsics, depth_rng, config, model.dtype)
                try:
                    report = train_step(model, state, sb, tb, config, lr)
                except TrainingError as exc:
                    raise TrainingError(f"epoch {epoch} step {step}: {exc}") from exc
                result.reports.append((epoch, step, report))
                result.steps += 1
                if log:
                    log.write(report.csv_row(epoch, step) + "\n")
            if on_epoch_end is not None:
                extra = on_epoch_end(epoch, model)
                if extra is not None:
                    result.epoch_end.append(extra)
    finally:
        if log:
            log.close()
    model.eval()
    return result


def median_depth_error(model: Model, frames: np.ndarray, depths: np.ndarray, batch: int = 8) -> float:
    """Median absolute relative depth error after per-image median scaling
    (monocular depth is only defined up to scale)."""
    was_training = model.training
    model.eval()
    errs = []
    with T.no_grad():
        for i in range(0, len(frames), batch):
            pred = model.forward_depth(np.asarray(frames[i:i + batch], dtype=np.float64)).depths[0].data[:, 0]
            gt = np.asarray(depths[i:i + batch], dtype=np.float64)
            for p, g in zip(pred, gt):
                p = p * (np.median(g) / np.median(p))
                errs.append(np.median(np.abs(p - g) / g))
    model.training = was_training
    return float(np.median(errs))


def load_pools(dataset, split: str = "train"):
    """Segmentation and triplet pools from a synthetic dataset split."""
    items = dataset.split(split)
    if not items:
        raise ConfigError(f"dataset has no {split!r} triplets")
    seg_images = np.stack([t.center for t in items])
    seg_labels = np.stack([t.labels[1] for t in items])
    frames = np.stack([t.frames for t in items])
    return seg_images, seg_labels, frames, items[0].intrinsics


def write_log(path, result: TrainResult) -> Path:
    path = Path(path)
    lines = [LOG_HEADER] + [r.csv_row(e, s) for e, s, r in result.reports]
    path.write_text("\n".join(lines) + "\n")
    return path
