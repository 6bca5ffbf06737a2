"""Diagnostic feature extraction from a two-phase cardiac segmentation.

Produces the 20-entry feature vector: cavity and wall volumes at ED and ES,
ejection fractions, volume ratios, and myocardial wall thickness statistics.
Degenerate denominators yield 0 plus a warning code instead of failing, so a
complete vector always reaches the classifier.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .volume import LV, MYO, RV, LabelVolume, StudyMeta, VoxelSpacing

FEATURE_NAMES = (
    "lv_vol_ed_ml",
    "lv_vol_es_ml",
    "rv_vol_ed_ml",
    "rv_vol_es_ml",
    "myo_vol_ed_ml",
    "myo_vol_es_ml",
    "lv_ef_pct",
    "rv_ef_pct",
    "lv_rv_ratio_ed",
    "lv_rv_ratio_es",
    "myo_lv_ratio_ed",
    "myo_lv_ratio_es",
    "mwt_max_mean_ed_mm",
    "mwt_max_mean_es_mm",
    "mwt_std_mean_ed_mm",
    "mwt_std_mean_es_mm",
    "mwt_mean_std_ed_mm",
    "mwt_mean_std_es_mm",
    "mwt_std_std_ed_mm",
    "mwt_std_std_es_mm",
)

DEFAULT_MIN_MYO_PIXELS = 8


class NoMeasurableSlices(Exception):
    pass


@dataclass(frozen=True)
class SliceThickness:
    """Wall thickness summary for one short-axis slice."""

    slice_index: int
    mean_mwt: float
    std_mwt: float
    n_samples: int

    def __post_init__(self):
        if self.mean_mwt < 0 or self.std_mwt < 0:
            raise ValueError("thickness statistics must be >= 0")
        if self.n_samples < 1:
            raise ValueError("need at least one inner-contour sample")


@dataclass(frozen=True)
class FeatureVector20:
    """The 20 features in canonical order plus any degeneracy warnings."""

    values: np.ndarray
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.shape != (20,):
            raise ValueError(f"expected 20 features, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("features must be finite")
        if np.any(v[:6] < 0):
            raise ValueError("volumes must be >= 0")
        if np.any(v[6:8] > 100):
            raise ValueError("ejection fraction cannot exceed 100")

    def as_dict(self) -> dict[str, float]:
        return {name: float(x) for name, x in zip(FEATURE_NAMES, self.values)}


def class_volume(labels: LabelVolume, class_id: int) -> float:
    """Volume of one class in mL: voxel count times voxel size."""
    if class_id not in (1, 2, 3):
        raise ValueError(f"class_id must be 1, 2, or 3, got {class_id}")
    count = int((labels.labels == class_id).sum())
    return count * labels.spacing.voxel_volume_mm3 / 1000.0


def ejection_fraction(edv: float, esv: float) -> tuple[float, Optional[str]]:
    """Percent volume change 100*(EDV-ESV)/EDV; (0, warning) when EDV = 0."""
    if edv < 0 or esv < 0:
        raise ValueError("volumes must be >= 0")
    if edv == 0:
        return 0.0, "degenerate_volume"
    return 100.0 * (edv - esv) / edv, None


def _any4(m: np.ndarray, outside: bool = False) -> np.ndarray:
    """True where some 4-neighbor of the pixel is set; pad controls OOB."""
    p = np.pad(m, 1, constant_values=outside)
    return p[:-2, 1:-1] | p[2:, 1:-1] | p[1:-1, :-2] | p[1:-1, 2:]


def myo_contours(slice_labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inner and outer myocardium contour pixels of one 2D slice.

    Inner: myocardium pixels 4-adjacent to the LV cavity.  Outer: myocardium
    pixels 4-adjacent to anything that is neither myocardium nor LV (pixels
    beyond the image border count as background).  Returns two (n, 2) arrays
    of (x, y) coordinates; either may be empty.
    """
    lab = np.asarray(slice_labels)
    if lab.ndim != 2:
        raise ValueError(f"need a 2D slice, got shape {lab.shape}")
    myo = lab == MYO
    lv = lab == LV
    inner = myo & _any4(lv)
    outer = myo & _any4(~(myo | lv), outside=True)
    return np.argwhere(inner), np.argwhere(outer)


def slice_wall_thickness(
    slice_labels: np.ndarray,
    spacing: VoxelSpacing,
    slice_index: int = 0,
    min_myo_pixels: int = DEFAULT_MIN_MYO_PIXELS,
) -> Optional[SliceThickness]:
    """Wall thickness statistics for one slice, or None when unmeasurable.

    Thickness at each inner-contour pixel is the minimum distance in mm to
    any outer-contour pixel plus one pixel pitch, so a wall k pixels across
    measures k pixel pitches thick (center-to-center distance alone would
    under-count by the two half-pixel extents at the contours).  Slices whose
    myocardium has fewer than min_myo_pixels pixels, or which lack either
    contour, are skipped.
    """
    lab = np.asarray(slice_labels)
    if (lab == MYO).sum() < min_myo_pixels:
        return None
    inner, outer = myo_contours(lab)
    if inner.shape[0] == 0 or outer.shape[0] == 0:
        return None
    delta = inner[:, None, :] - outer[None, :, :]
    d2 = (delta[..., 0] * spacing.dx) ** 2 + (delta[..., 1] * spacing.dy) ** 2
    pitch = (spacing.dx + spacing.dy) / 2.0
    t = np.sqrt(d2.min(axis=1)) + pitch
    return SliceThickness(slice_index, float(t.mean()), float(t.std()), int(t.size))


def mwt_statistics(
    labels: LabelVolume,
    spacing: Optional[VoxelSpacing] = None,
    min_myo_pixels: int = DEFAULT_MIN_MYO_PIXELS,
) -> tuple[float, float, float, float]:
    """Summary wall-thickness statistics across measurable slices.

    Returns (max of slice means, std of slice means, mean of slice stds,
    std of slice stds), population std throughout.  Raises
    NoMeasurableSlices when no slice yields a measurement.
    """
    if labels.is_4d:
        raise ValueError("mwt_statistics operates on a single 3D phase")
    sp = spacing or labels.spacing
    per_slice = []
    for z in range(labels.dims[2]):
        st = slice_wall_thickness(labels.labels[:, :, z], sp, z, min_myo_pixels)
        if st is not None:
            per_slice.append(st)
    if not per_slice:
        raise NoMeasurableSlices("no slice has a measurable myocardial wall")
    means = np.array([s.mean_mwt for s in per_slice])
    stds = np.array([s.std_mwt for s in per_slice])
    return float(means.max()), float(means.std()), float(stds.mean()), float(stds.std())


def _ratio(num: float, den: float, warning_code: str, warnings: list[str]) -> float:
    if den == 0:
        warnings.append(warning_code)
        return 0.0
    return num / den


def extract_features(
    seg4d: LabelVolume,
    meta: Optional[StudyMeta] = None,
    spacing: Optional[VoxelSpacing] = None,
    min_myo_pixels: int = DEFAULT_MIN_MYO_PIXELS,
) -> FeatureVector20:
    """All 20 features from a two-phase segmentation (frame 0 ED, frame 1 ES).

    meta is carried for provenance only; the phases must already be ordered.
    Degenerate denominators and unmeasurable walls produce 0-valued features
    plus warning codes rather than errors.
    """
    if not seg4d.is_4d or seg4d.dims[3] != 2:
        raise ValueError(f"expected a (X, Y, Z, 2) segmentation, got dims {seg4d.dims}")
    sp = spacing or seg4d.spacing
    ed = LabelVolume(seg4d.labels[:, :, :, 0], sp)
    es = LabelVolume(seg4d.labels[:, :, :, 1], sp)
    warnings: list[str] = []

    lv_ed, lv_es = class_volume(ed, LV), class_volume(es, LV)
    rv_ed, rv_es = class_volume(ed, RV), class_volume(es, RV)
    myo_ed, myo_es = class_volume(ed, MYO), class_volume(es, MYO)

    lv_ef, w = ejection_fraction(lv_ed, lv_es)
    if w:
        warnings.append(f"lv_ef_{w}")
    rv_ef, w = ejection_fraction(rv_ed, rv_es)
    if w:
        warnings.append(f"rv_ef_{w}")

    ratios = [
        _ratio(lv_ed, rv_ed, "lv_rv_ratio_ed_degenerate", warnings),
        _ratio(lv_es, rv_es, "lv_rv_ratio_es_degenerate", warnings),
        _ratio(myo_ed, lv_ed, "myo_lv_ratio_ed_degenerate", warnings),
        _ratio(myo_es, lv_es, "myo_lv_ratio_es_degenerate", warnings),
    ]

    mwt = {}
    for phase, lab in (("ed", ed), ("es", es)):
        try:
            mwt[phase] = mwt_statistics(lab, sp, min_myo_pixels)
        except NoMeasurableSlices:
            warnings.append(f"no_measurable_slices_{phase}")
            mwt[phase] = (0.0, 0.0, 0.0, 0.0)

    values = np.array(
        [
            lv_ed, lv_es, rv_ed, rv_es, myo_ed, myo_es,
            lv_ef, rv_ef,
            ratios[0], ratios[1], ratios[2], ratios[3],
            mwt["ed"][0], mwt["es"][0],
            mwt["ed"][1], mwt["es"][1],
            mwt["ed"][2], mwt["es"][2],
            mwt["ed"][3], mwt["es"][3],
        ],
        dtype=np.float64,
    )
    return FeatureVector20(values, tuple(warnings))


def features_csv(rows: Sequence[tuple[str, FeatureVector20]]) -> str:
    """CSV with a case column and the 20 canonical feature names as header."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("case",) + FEATURE_NAMES)
    for case_id, fv in rows:
        writer.writerow([case_id] + [repr(float(x)) for x in fv.values])
    return buf.getvalue()
