"""Segmentation cleanup and geometry restoration.

Largest-connected-component analysis removes spurious islands per anatomical
class, restore_to_original places cropped label maps back onto the source
grid, and stack_phases assembles the two cardiac phases into one 4D volume.

Scan order throughout is the package's flat voxel order: x fastest, then y,
then z (offset x + X*(y + Y*z)).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .roi import CropPlan
from .volume import LabelVolume, ShapeMismatch

__all__ = [
    "PlanMismatch",
    "ShapeMismatch",
    "ComponentLabeling",
    "connected_components_3d",
    "lcca",
    "restore_to_original",
    "stack_phases",
]


class PlanMismatch(Exception):
    pass


def _offsets(connectivity: int) -> list[tuple[int, int, int]]:
    if connectivity not in (6, 18, 26):
        raise ValueError(f"connectivity must be 6, 18, or 26, got {connectivity}")
    offs = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                if dx == dy == dz == 0:
                    continue
                manhattan = abs(dx) + abs(dy) + abs(dz)
                if connectivity == 6 and manhattan != 1:
                    continue
                if connectivity == 18 and manhattan > 2:
                    continue
                offs.append((dx, dy, dz))
    return offs


@dataclass(frozen=True)
class ComponentLabeling:
    """Dense component ids per voxel (0 outside the mask) plus their sizes."""

    component_id: np.ndarray
    component_sizes: np.ndarray

    def __post_init__(self):
        ids = self.component_id
        sizes = np.asarray(self.component_sizes, dtype=np.int64)
        object.__setattr__(self, "component_sizes", sizes)
        k = int(ids.max()) if ids.size else 0
        if sizes.shape != (k,):
            raise ValueError("sizes must have one entry per component id")
        if k and sizes.sum() != np.count_nonzero(ids):
            raise ValueError("sizes must sum to the labeled voxel count")

    @property
    def n_components(self) -> int:
        return int(self.component_sizes.shape[0])


def _dilate(m: np.ndarray, offs: list[tuple[int, int, int]]) -> np.ndarray:
    X, Y, Z = m.shape
    p = np.pad(m, 1)
    out = m.copy()
    for dx, dy, dz in offs:
        out |= p[1 + dx : 1 + dx + X, 1 + dy : 1 + dy + Y, 1 + dz : 1 + dz + Z]
    return out


def connected_components_3d(mask: np.ndarray, connectivity: int = 26) -> ComponentLabeling:
    """Label connected regions of a binary mask.

    Ids are assigned in order of each component's first voxel in scan order,
    so the labeling is fully deterministic.  Each component is traced by a
    breadth-first search over flat voxel indices, so the total work is one
    neighbor visit per voxel rather than one volume pass per growth step.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3 or 0 in mask.shape:
        raise ValueError(f"need a nonempty 3D mask, got shape {mask.shape}")
    X, Y, Z = mask.shape
    offs = _offsets(connectivity)
    deltas = np.array([dx + X * dy + X * Y * dz for dx, dy, dz in offs], dtype=np.int64)

    # flat scan order: x fastest, then y, then z
    remaining = mask.ravel(order="F").copy()
    ids_flat = np.zeros(remaining.size, dtype=np.int32)
    sizes: list[int] = []
    seeds = np.flatnonzero(remaining)
    for seed in seeds:
        if not remaining[seed]:
            continue
        remaining[seed] = False
        frontier = np.array([seed], dtype=np.int64)
        members = [frontier]
        while frontier.size:
            x = frontier % X
            yz = frontier // X
            y = yz % Y
            z = yz // Y
            grown = []
            for (dx, dy, dz), delta in zip(offs, deltas):
                ok = np.ones(frontier.size, dtype=bool)
                if dx:
                    ok &= (x > 0) if dx < 0 else (x < X - 1)
                if dy:
                    ok &= (y > 0) if dy < 0 else (y < Y - 1)
                if dz:
                    ok &= (z > 0) if dz < 0 else (z < Z - 1)
                cand = frontier[ok] + delta
                grown.append(cand[remaining[cand]])
            frontier = np.unique(np.concatenate(grown)) if grown else frontier[:0]
            if frontier.size:
                remaining[frontier] = False
                members.append(frontier)
        comp = np.concatenate(members)
        sizes.append(int(comp.size))
        ids_flat[comp] = len(sizes)
    ids = ids_flat.reshape(mask.shape, order="F")
    return ComponentLabeling(np.ascontiguousarray(ids), np.array(sizes, dtype=np.int64))


def lcca(labels: LabelVolume, connectivity: int = 26) -> LabelVolume:
    """Keep only the largest connected component of each foreground class.

    Classes are cleaned independently; removed voxels become background.
    Size ties go to the component whose first voxel comes earliest in scan
    order (the lowest component id).
    """
    if labels.is_4d:
        raise ValueError("lcca operates on a single 3D phase")
    out = labels.labels.copy()
    for c in (1, 2, 3):
        mask = out == c
        if not mask.any():
            continue
        comp = connected_components_3d(mask, connectivity)
        if comp.n_components <= 1:
            continue
        winner = int(np.argmax(comp.component_sizes)) + 1  # argmax takes first max
        out[mask & (comp.component_id != winner)] = 0
    return LabelVolume(out, labels.spacing)


def restore_to_original(cropped: LabelVolume, plan: CropPlan, window_index: int = 0) -> LabelVolume:
    """Place a cropped label map back onto the original grid.

    Accepts either one depth window (depth = target_depth; its mirror-padded
    slices are dropped) or a merged crop covering the full stack (depth = Z).
    Voxels outside the crop window are background.
    """
    if cropped.is_4d:
        raise PlanMismatch("restore expects a 3D label crop")
    X, Y, Z = plan.original_dims
    cw, ch, cd = cropped.dims
    if (cw, ch) != (plan.patch, plan.patch):
        raise PlanMismatch(f"in-plane dims {(cw, ch)} do not match patch {plan.patch}")

    if cd == Z:
        block = cropped.labels
        z_offset = 0
    elif cd == plan.target_depth:
        if not (0 <= window_index < len(plan.depth_windows)):
            raise PlanMismatch(f"window {window_index} of {len(plan.depth_windows)}")
        w = plan.depth_windows[window_index]
        block = cropped.labels[:, :, w.pad_before : cd - w.pad_after]
        z_offset = w.z_offset
    else:
        raise PlanMismatch(f"depth {cd} matches neither stack depth {Z} nor target {plan.target_depth}")

    out = np.zeros((X, Y, Z), dtype=np.uint8)
    sx0, sx1 = max(plan.x0, 0), min(plan.x0 + plan.patch, X)
    sy0, sy1 = max(plan.y0, 0), min(plan.y0 + plan.patch, Y)
    if sx0 < sx1 and sy0 < sy1:
        out[sx0:sx1, sy0:sy1, z_offset : z_offset + block.shape[2]] = block[
            sx0 - plan.x0 : sx1 - plan.x0, sy0 - plan.y0 : sy1 - plan.y0
        ]
    return LabelVolume(out, cropped.spacing)


def stack_phases(ed: LabelVolume, es: LabelVolume) -> LabelVolume:
    """Stack the ED and ES label maps along time: frame 0 = ED, frame 1 = ES."""
    if ed.is_4d or es.is_4d:
        raise ShapeMismatch("phases must be 3D label maps")
    if ed.dims != es.dims:
        raise ShapeMismatch(f"dims differ: {ed.dims} vs {es.dims}")
    if ed.spacing != es.spacing:
        raise ShapeMismatch("spacings differ")
    return LabelVolume(np.stack([ed.labels, es.labels], axis=3), ed.spacing)
