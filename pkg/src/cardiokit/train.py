"""Training loop: Adam over mini-batches, cosine learning-rate annealing,
in-plane augmentation, and the dynamic per-class weight update.

Everything is deterministic given TrainConfig.rng_seed: the seed spawns
separate streams for shuffling, augmentation, and dropout, so repeated runs
produce bitwise-identical metric traces.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import ClassWeights, LossConfig, hard_dice, one_hot, total_loss, update_class_weights
from .unet import UNet

IN_PLANE_MAX_ROTATION_DEG = 15.0
IN_PLANE_MAX_TRANSLATION_PX = 10.0
MAX_SHEAR = 0.1


class EmptyDataset(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    lr0: float = 5e-4
    rng_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine annealing from lr0 at step 0 to 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass(frozen=True)
class AugmentParams:
    """One sampled in-plane transform; neutral values leave the input alone."""

    flip_x: bool = False
    flip_y: bool = False
    angle_deg: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    shear: float = 0.0

    @property
    def is_identity(self) -> bool:
        return (not self.flip_x and not self.flip_y and self.angle_deg == 0.0
                and self.tx == 0.0 and self.ty == 0.0 and self.shear == 0.0)


def sample_augment_params(rng: np.random.Generator) -> AugmentParams:
    """Draw order is part of the determinism contract: flip_x, flip_y,
    rotation, tx, ty, shear."""
    return AugmentParams(
        flip_x=bool(rng.random() < 0.5),
        flip_y=bool(rng.random() < 0.5),
        angle_deg=float(rng.uniform(-IN_PLANE_MAX_ROTATION_DEG, IN_PLANE_MAX_ROTATION_DEG)),
        tx=float(rng.uniform(-IN_PLANE_MAX_TRANSLATION_PX, IN_PLANE_MAX_TRANSLATION_PX)),
        ty=float(rng.uniform(-IN_PLANE_MAX_TRANSLATION_PX, IN_PLANE_MAX_TRANSLATION_PX)),
        shear=float(rng.uniform(-MAX_SHEAR, MAX_SHEAR)),
    )


def apply_inplane_transform(arr: np.ndarray, params: AugmentParams,
                            is_label: bool) -> np.ndarray:
    """Flip, rotate, shear, and translate in the (x, y) plane about the
    center; the same transform applies to every z slice (and frame).

    Images are sampled bilinearly, labels by nearest neighbor; samples that
    fall outside the input are filled with 0 (background).
    """
    arr = np.asarray(arr)
    if params.is_identity:
        return arr.copy()
    src = arr
    if params.flip_x:
        src = src[::-1]
    if params.flip_y:
        src = src[:, ::-1]
    if params.angle_deg == 0.0 and params.tx == 0.0 and params.ty == 0.0 \
            and params.shear == 0.0:
        return src.copy()

    nx, ny = arr.shape[0], arr.shape[1]
    cx, cy = (nx - 1) / 2.0, (ny - 1) / 2.0
    theta = math.radians(params.angle_deg)
    # forward map: p_out = R(theta) @ S(shear) @ (p_in - c) + c + t;
    # sampling inverts it: p_in = S^-1 @ R^-1 @ (p_out - c - t) + c
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    ox, oy = np.meshgrid(np.arange(nx, dtype=np.float64),
                         np.arange(ny, dtype=np.float64), indexing="ij")
    ux = ox - cx - params.tx
    uy = oy - cy - params.ty
    rx = cos_t * ux + sin_t * uy
    ry = -sin_t * ux + cos_t * uy
    sx = rx - params.shear * ry  # S(shear): x' = x + shear*y
    sy = ry
    ix = sx + cx
    iy = sy + cy

    if is_label:
        ri = np.rint(ix).astype(np.int64)
        rj = np.rint(iy).astype(np.int64)
        inside = (ri >= 0) & (ri < nx) & (rj >= 0) & (rj < ny)
        out = np.zeros_like(src)
        ric = np.clip(ri, 0, nx - 1)
        rjc = np.clip(rj, 0, ny - 1)
        sampled = src[ric, rjc]
        out[inside] = sampled[inside]
        return out

    i0 = np.floor(ix).astype(np.int64)
    j0 = np.floor(iy).astype(np.int64)
    fx = ix - i0
    fy = iy - j0
    trailing = (1,) * (src.ndim - 2)
    acc = np.zeros(src.shape, dtype=np.float64)
    for di, wx in ((0, 1.0 - fx), (1, fx)):
        for dj, wy in ((0, 1.0 - fy), (1, fy)):
            ii = i0 + di
            jj = j0 + dj
            valid = (ii >= 0) & (ii < nx) & (jj >= 0) & (jj < ny)
            w = (wx * wy * valid).reshape(valid.shape + trailing)
            acc += w * src[np.clip(ii, 0, nx - 1), np.clip(jj, 0, ny - 1)]
    return acc.astype(arr.dtype)


def augment(image: np.ndarray, labels: np.ndarray,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Apply one randomly sampled in-plane transform to a paired crop."""
    image = np.asarray(image)
    labels = np.asarray(labels)
    if image.shape[:2] != labels.shape[:2]:
        raise ValueError(f"paired in-plane shapes differ: {image.shape} vs {labels.shape}")
    params = sample_augment_params(rng)
    return (apply_inplane_transform(image, params, is_label=False),
            apply_inplane_transform(labels, params, is_label=True))


class Adam:
    """Adaptive-moment optimizer (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params: list[Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)).astype(p.data.dtype)


def _split_dice(net: UNet, split) -> np.ndarray:
    """Global per-class hard Dice of argmax predictions over a split."""
    inter = np.zeros(4, dtype=np.int64)
    psum = np.zeros(4, dtype=np.int64)
    gsum = np.zeros(4, dtype=np.int64)
    with ad.no_grad():
        for image, labels in split:
            x = np.asarray(image, dtype=net.dtype)[np.newaxis, ..., np.newaxis]
            probs = ad.softmax_channels(net(x, training=False)).data[..., 0]
            pred = probs.argmax(axis=0)
            for c in range(4):
                pc = pred == c
                gc = np.asarray(labels) == c
                inter[c] += int((pc & gc).sum())
                psum[c] += int(pc.sum())
                gsum[c] += int(gc.sum())
    support = psum + gsum
    out = np.ones(4, dtype=np.float64)
    nz = support > 0
    out[nz] = 2.0 * inter[nz] / support[nz]
    return out


def train(net: UNet, dataset, train_cfg: TrainConfig, loss_cfg: LossConfig,
          heldout=None, augment_data: bool = True) -> tuple[UNet, list[dict]]:
    """Train in place and return (net, per-epoch metrics).

    dataset / heldout: sequences of (image (X,Y,Z) float, labels (X,Y,Z) int)
    pairs; crops must satisfy the network's divisibility requirement.  Each
    metrics entry records the epoch's mean batch loss, the weight vector
    used that epoch, end-of-epoch per-class Dice on the training split, and
    on the held-out split when one is given.
    """
    items = list(dataset)
    if not items:
        raise EmptyDataset("training dataset is empty")
    held = list(heldout) if heldout is not None else None

    root = np.random.default_rng(train_cfg.rng_seed)
    shuffle_rng = np.random.default_rng(root.integers(2**63))
    aug_rng = np.random.default_rng(root.integers(2**63))
    net._dropout_rng = np.random.default_rng(root.integers(2**63))

    optimizer = Adam(net.parameters())
    n = len(items)
    steps_per_epoch = (n + train_cfg.batch_size - 1) // train_cfg.batch_size
    total_steps = train_cfg.epochs * steps_per_epoch
    weights = ClassWeights.uniform(loss_cfg.n_weighted_classes)
    weight_class_range = range(0 if loss_cfg.include_background else 1, 4)

    metrics: list[dict] = []
    step = 0
    for epoch in range(train_cfg.epochs):
        order = shuffle_rng.permutation(n)
        batch_losses = []
        for start in range(0, n, train_cfg.batch_size):
            images, labels = [], []
            for idx in order[start : start + train_cfg.batch_size]:
                img, lab = items[idx]
                if augment_data:
                    img, lab = augment(img, lab, aug_rng)
                images.append(np.asarray(img, dtype=net.dtype))
                labels.append(np.asarray(lab))
            x = np.stack(images, axis=-1)[np.newaxis]
            g = one_hot(np.stack(labels, axis=-1), dtype=net.dtype)

            lr = cosine_lr(step, total_steps, train_cfg.lr0)
            logits = net(Tensor(x), training=True)
            probs = ad.softmax_channels(logits)
            loss = total_loss(probs, g, weights, loss_cfg)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step(lr)
            step += 1
            batch_losses.append(loss.item())

        train_dice = _split_dice(net, items)
        entry = {
            "epoch": epoch,
            "loss": float(np.mean(batch_losses)),
            "weights": tuple(weights.w),
            "train_dice": tuple(float(d) for d in train_dice),
            "heldout_dice": (tuple(float(d) for d in _split_dice(net, held))
                             if held is not None else None),
            "lr_last": lr,
        }
        metrics.append(entry)
        if loss_cfg.kind == "dynamic_focal_dice":
            weights = update_class_weights(
                [train_dice[c] for c in weight_class_range], loss_cfg.weight_floor
            )
    return net, metrics
