"""Segmentation losses: Focal Dice family and cross-entropy.

The per-class Focal Dice loss is

    L_c = 1 - ( (2 * sum(P_c * G_c) + eps) / (sum(P_c^2) + sum(G_c^2) + eps) )^(1/beta)

and the total loss is the weight-normalized sum (1/sum w_c) * sum w_c * L_c.
With beta=1 this reduces to the squared-denominator soft Dice loss.  The
dynamic variant re-derives the weights each epoch as w_c = max(1 - Dice_c, w_min)
from the previous epoch's hard Dice scores.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .volume import N_CLASSES, ShapeMismatch

LOSS_KINDS = ("cross_entropy", "dice", "focal_dice", "dynamic_focal_dice")


class AllZeroWeights(Exception):
    pass


class ScoreOutOfRange(Exception):
    pass


@dataclass(frozen=True)
class LossConfig:
    kind: str = "dynamic_focal_dice"
    beta: float = 2.0
    epsilon: float = 1e-5
    weight_floor: float = 0.05
    include_background: bool = True

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0.0 <= self.weight_floor < 1.0:
            raise ValueError(f"weight_floor must be in [0,1), got {self.weight_floor}")

    @property
    def n_weighted_classes(self) -> int:
        return N_CLASSES if self.include_background else N_CLASSES - 1


@dataclass(frozen=True)
class ClassWeights:
    """Non-negative per-class weights; at least one must be positive."""

    w: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "w", tuple(float(x) for x in self.w))
        if any(x < 0 for x in self.w):
            raise ValueError(f"weights must be non-negative, got {self.w}")
        if not any(x > 0 for x in self.w):
            raise AllZeroWeights("at least one class weight must be positive")

    @classmethod
    def uniform(cls, n: int = N_CLASSES) -> "ClassWeights":
        return cls((1.0,) * n)

    def __len__(self):
        return len(self.w)


def one_hot(labels: np.ndarray, n_classes: int = N_CLASSES, dtype=np.float32) -> np.ndarray:
    """(X, Y, Z) or (X, Y, Z, N) integer labels -> (C, X, Y, Z, N) one-hot."""
    lab = np.asarray(labels)
    if lab.ndim == 3:
        lab = lab[..., np.newaxis]
    if lab.ndim != 4:
        raise ShapeMismatch(f"labels must be 3D or 4D, got shape {lab.shape}")
    out = np.zeros((n_classes,) + lab.shape, dtype=dtype)
    for c in range(n_classes):
        out[c] = lab == c
    return out


def focal_dice_class(p_c, g_c, beta: float, epsilon: float) -> Tensor:
    """Focal Dice loss of one class channel; differentiable in P_c."""
    if not isinstance(p_c, Tensor):
        p_c = Tensor(p_c)
    if not isinstance(g_c, Tensor):
        g_c = Tensor(np.asarray(g_c, dtype=p_c.data.dtype))
    if p_c.data.shape != g_c.data.shape:
        raise ShapeMismatch(f"P_c shape {p_c.data.shape} != G_c shape {g_c.data.shape}")
    inter = (p_c * g_c).sum()
    denom = (p_c * p_c).sum() + (g_c * g_c).sum()
    ratio = (2.0 * inter + epsilon) / (denom + epsilon)
    return 1.0 - ratio ** (1.0 / beta)


def _weights_array(weights) -> np.ndarray:
    if isinstance(weights, ClassWeights):
        arr = np.asarray(weights.w, dtype=np.float64)
    else:
        arr = np.asarray(weights, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"weights must be a vector, got shape {arr.shape}")
    if np.any(arr < 0):
        raise ValueError(f"weights must be non-negative, got {arr}")
    if arr.sum() == 0:
        raise AllZeroWeights("class weights sum to zero")
    return arr


def total_loss(P, G_onehot, weights, cfg: LossConfig) -> Tensor:
    """Weighted per-class Focal Dice (or cross-entropy) over a batch.

    P and G_onehot are (C, X, Y, Z, N); the loss is a mean over the batch's
    voxels (per-class sums run over all spatial and batch axes).
    """
    if not isinstance(P, Tensor):
        P = Tensor(P)
    G = G_onehot.data if isinstance(G_onehot, Tensor) else np.asarray(G_onehot)
    if P.data.shape != G.shape:
        raise ShapeMismatch(f"P shape {P.data.shape} != G shape {G.shape}")
    if P.data.ndim != 5 or P.data.shape[0] != N_CLASSES:
        raise ShapeMismatch(f"expected ({N_CLASSES}, X, Y, Z, N), got {P.data.shape}")

    if cfg.kind == "cross_entropy":
        # weights are validated but not applied: plain mean per-voxel NLL
        _weights_array(weights)
        n_voxels = int(np.prod(P.data.shape[1:]))
        g = G.astype(P.data.dtype)
        return -(Tensor(g) * ad.log(P)).sum() / float(n_voxels)

    w = _weights_array(weights)
    if len(w) != cfg.n_weighted_classes:
        raise ValueError(
            f"{cfg.kind} with include_background={cfg.include_background} "
            f"needs {cfg.n_weighted_classes} weights, got {len(w)}"
        )
    beta = 1.0 if cfg.kind == "dice" else cfg.beta
    first = 0 if cfg.include_background else 1
    total = None
    for i, c in enumerate(range(first, N_CLASSES)):
        if w[i] == 0.0:
            continue
        l_c = focal_dice_class(
            ad.take_channel(P, c), G[c].astype(P.data.dtype), beta, cfg.epsilon
        )
        term = l_c * float(w[i])
        total = term if total is None else total + term
    return total / float(w.sum())


def update_class_weights(prev_epoch_dice, w_min: float = 0.05) -> ClassWeights:
    """w_c = max(1 - Dice_c, w_min) from the previous epoch's Dice scores."""
    scores = np.asarray(prev_epoch_dice, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ValueError(f"dice scores must be a non-empty vector, got shape {scores.shape}")
    if np.any(~np.isfinite(scores)) or np.any(scores < 0) or np.any(scores > 1):
        raise ScoreOutOfRange(f"dice scores must lie in [0,1], got {scores}")
    return ClassWeights(tuple(max(1.0 - float(s), float(w_min)) for s in scores))


def hard_dice(pred_labels: np.ndarray, true_labels: np.ndarray,
              n_classes: int = N_CLASSES) -> np.ndarray:
    """Per-class Dice of integer label maps; a class absent from both maps
    scores 1.0.  Accepts arrays of any matching shape."""
    p = np.asarray(pred_labels)
    t = np.asarray(true_labels)
    if p.shape != t.shape:
        raise ShapeMismatch(f"label shapes differ: {p.shape} vs {t.shape}")
    out = np.empty(n_classes, dtype=np.float64)
    for c in range(n_classes):
        pc = p == c
        tc = t == c
        support = int(pc.sum()) + int(tc.sum())
        out[c] = 1.0 if support == 0 else 2.0 * int((pc & tc).sum()) / support
    return out
