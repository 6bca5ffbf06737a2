"""Core image data model: 4D scalar volumes, label maps, and voxel geometry.

Index-order contract used throughout the package: the flattened voxel
(x, y, z, t) lives at offset ``x + X*(y + Y*(z + Z*t))``, i.e. x varies
fastest.  Arrays are held as numpy ndarrays of shape (X, Y, Z[, T]); the
flat order above corresponds to ``reshape(-1, order="F")``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_CLASSES = 4  # 0=background, 1=RV, 2=Myo, 3=LV
BACKGROUND, RV, MYO, LV = 0, 1, 2, 3


class ShapeMismatch(Exception):
    """Array shapes violate an operation's contract."""


@dataclass(frozen=True)
class VoxelSpacing:
    """Physical voxel size: dx/dy/dz in millimetres, dt in seconds (0 = unknown)."""

    dx: float
    dy: float
    dz: float
    dt: float = 0.0

    def __post_init__(self):
        # quantize to float32: NIfTI pixdim is float32, and exact round trips
        # through the file format require the model to match
        for name in ("dx", "dy", "dz", "dt"):
            object.__setattr__(self, name, float(np.float32(getattr(self, name))))
        if not (self.dx > 0 and self.dy > 0 and self.dz > 0):
            raise ValueError(f"spacing must be positive, got {(self.dx, self.dy, self.dz)}")
        if not self.dt >= 0:
            raise ValueError(f"dt must be >= 0, got {self.dt}")

    @property
    def voxel_volume_mm3(self) -> float:
        return self.dx * self.dy * self.dz


@dataclass(frozen=True)
class Volume4D:
    """Scalar cine volume with dims (X, Y, Z, T) and physical spacing.

    ``data`` has shape (X, Y, Z, T); all values must be finite.
    3D inputs are accepted and promoted to T=1.
    """

    data: np.ndarray
    spacing: VoxelSpacing

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 3:
            arr = arr[..., np.newaxis]
        if arr.ndim != 4:
            raise ValueError(f"expected 3 or 4 dims, got shape {arr.shape}")
        if arr.size == 0:
            raise ValueError("empty volume")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]

    def frame(self, t: int) -> np.ndarray:
        """The (X, Y, Z) array of a single temporal frame."""
        return self.data[:, :, :, t]


@dataclass(frozen=True)
class LabelVolume:
    """Integer class map over a 3D or 4D grid; values in {0, 1, 2, 3}."""

    labels: np.ndarray
    spacing: VoxelSpacing

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim not in (3, 4):
            raise ValueError(f"expected 3 or 4 dims, got shape {arr.shape}")
        if arr.size == 0:
            raise ValueError("empty label volume")
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.all(arr == np.round(arr)):
                raise ValueError("labels must be integers")
            arr = arr.astype(np.uint8)
        if arr.min() < 0 or arr.max() >= N_CLASSES:
            raise ValueError(f"labels must lie in 0..{N_CLASSES - 1}")
        object.__setattr__(self, "labels", arr.astype(np.uint8, copy=False))

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.labels.shape)

    @property
    def is_4d(self) -> bool:
        return self.labels.ndim == 4

    def frame(self, t: int) -> "LabelVolume":
        if not self.is_4d:
            raise ValueError("frame() requires a 4D label volume")
        return LabelVolume(self.labels[:, :, :, t], self.spacing)


@dataclass(frozen=True)
class StudyMeta:
    """End-diastole / end-systole frame indices plus an opaque patient id."""

    ed_frame: int
    es_frame: int
    patient_id: str = ""

    def __post_init__(self):
        if self.ed_frame < 0 or self.es_frame < 0:
            raise ValueError("frame indices must be non-negative")
        if self.ed_frame == self.es_frame:
            raise ValueError("ed_frame and es_frame must differ")

    def validate_against(self, n_frames: int) -> None:
        if self.ed_frame >= n_frames or self.es_frame >= n_frames:
            raise ValueError(
                f"frame indices {(self.ed_frame, self.es_frame)} out of range for T={n_frames}"
            )


def normalize_intensity(v: Volume4D, lo_pct: float = 1.0, hi_pct: float = 99.0) -> Volume4D:
    """Percentile-clipped per-volume z-score.

    Intensities are clipped to the [lo_pct, hi_pct] percentiles and then
    standardized to zero mean / unit variance over all voxels.  A volume
    that is constant (before or after clipping) maps to all zeros.
    """
    arr = v.data.astype(np.float64)
    lo, hi = np.percentile(arr, [lo_pct, hi_pct])
    clipped = np.clip(arr, lo, hi)
    std = clipped.std()
    if std == 0.0:
        out = np.zeros_like(clipped, dtype=np.float32)
    else:
        out = ((clipped - clipped.mean()) / std).astype(np.float32)
    return Volume4D(out, v.spacing)
