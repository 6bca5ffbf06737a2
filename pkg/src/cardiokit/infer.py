"""Sliding-window whole-stack inference on a crop plan.

Each depth window of the plan is cropped, run through the network, and its
softmax probabilities written back to the cropped grid with the padded
slices discarded; slices covered by several windows get the mean of their
probabilities.  Labels are the per-voxel argmax (ties resolve to the lower
class index).
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .roi import CropPlan, IndexOutOfRange, apply_crop
from .unet import UNet
from .volume import LabelVolume, Volume4D


def predict_frames(net: UNet, v: Volume4D, plan: CropPlan,
                   frames: Sequence[int]) -> list[tuple[np.ndarray, LabelVolume]]:
    """Segment several cine frames in one batched pass per depth window.

    Returns one (probs (4, patch, patch, Z), labels) pair per requested
    frame; identical results to separate predict_volume calls.
    """
    for frame in frames:
        if not 0 <= frame < v.dims[3]:
            raise IndexOutOfRange(f"frame {frame} outside 0..{v.dims[3] - 1}")
    depth = plan.original_dims[2]
    nf = len(frames)
    acc = np.zeros((nf, 4, plan.patch, plan.patch, depth), dtype=np.float64)
    coverage = np.zeros(depth, dtype=np.int64)

    with ad.no_grad():
        for wi, window in enumerate(plan.depth_windows):
            crop = apply_crop(v, plan, wi)
            x = np.stack([crop.frame(f).astype(net.dtype) for f in frames],
                         axis=3)[np.newaxis]
            probs = ad.softmax_channels(net(x, training=False)).data
            n_valid = plan.target_depth - window.pad_before - window.pad_after
            valid = probs[:, :, :, window.pad_before : window.pad_before + n_valid, :]
            zs = window.z_offset + np.arange(n_valid)
            acc[:, :, :, :, zs] += np.moveaxis(valid, 4, 0)
            coverage[zs] += 1

    out = []
    for fi in range(nf):
        probs = (acc[fi] / coverage).astype(np.float64)
        labels = probs.argmax(axis=0).astype(np.uint8)
        out.append((probs, LabelVolume(labels, v.spacing)))
    return out


def predict_volume(net: UNet, v: Volume4D, plan: CropPlan,
                   frame: int) -> tuple[np.ndarray, LabelVolume]:
    """Segment one cine frame; returns (probs (4, patch, patch, Z), labels).

    Both outputs live on the plan's cropped in-plane grid at the volume's
    full depth Z.  The caller is responsible for intensity normalization.
    """
    return predict_frames(net, v, plan, [frame])[0]
