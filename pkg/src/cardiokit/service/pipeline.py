"""Analysis orchestration: raw cine volume in, diagnosis report out.

Stage order: intensity normalization, LV localization and crop planning,
per-phase segmentation, largest-component cleanup and restoration to the
original grid, feature extraction, two-stage classification.  Any failure
is wrapped in PipelineError carrying the stage name so callers can report
where the run died.
"""
from __future__ import annotations

import io
import time
from dataclasses import dataclass

import numpy as np
from PIL import Image

from ..classify import DiagnosisLabel, ModelBundle, load_bundle, two_stage_predict
from ..features import extract_features
from ..infer import predict_frames
from ..postproc import lcca, restore_to_original, stack_phases
from ..roi import RoiParams, locate_lv_center, plan_crops
from ..unet import UNet, load_checkpoint
from ..volume import LabelVolume, StudyMeta, Volume4D, normalize_intensity


class PipelineError(Exception):
    """A pipeline stage failed; carries the stage name and the cause."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


# fixed per-label explanation paragraphs shown alongside the prediction
EXPLANATIONS = {
    DiagnosisLabel.NOR: (
        "No structural abnormality was detected. Ventricular volumes, "
        "ejection fractions, and myocardial wall thickness all fall in "
        "typical ranges for this acquisition."
    ),
    DiagnosisLabel.DCM: (
        "The pattern is consistent with dilated cardiomyopathy: the left "
        "ventricular cavity is enlarged and its ejection fraction reduced, "
        "while the myocardial wall is not thickened."
    ),
    DiagnosisLabel.HCM: (
        "The pattern is consistent with hypertrophic cardiomyopathy: the "
        "myocardial wall is abnormally thick relative to the cavity size, "
        "with preserved or elevated ejection fraction."
    ),
    DiagnosisLabel.MINF: (
        "The pattern is consistent with a prior myocardial infarction: "
        "regional wall thinning and reduced contraction lower the left "
        "ventricular ejection fraction."
    ),
    DiagnosisLabel.ARV: (
        "The pattern is consistent with an abnormal right ventricle: the "
        "right ventricular cavity is enlarged or contracts poorly relative "
        "to the left ventricle."
    ),
}

# RGB overlay colors per class (background stays grayscale)
_CLASS_COLORS = {1: (220, 70, 70), 2: (80, 200, 110), 3: (90, 130, 235)}
_OVERLAY_ALPHA = 0.45


@dataclass(frozen=True)
class ModelAssets:
    """Trained models plus ROI geometry, loaded once and shared read-only."""

    net: UNet
    bundle: ModelBundle
    roi: RoiParams


def load_assets(seg_path: str, clf_path: str, roi: RoiParams | None = None) -> ModelAssets:
    with open(seg_path, "rb") as fh:
        net, _training_meta = load_checkpoint(fh.read())
    with open(clf_path, "rb") as fh:
        bundle = load_bundle(fh.read())
    return ModelAssets(net=net, bundle=bundle, roi=roi or RoiParams(target_depth=12))


def overlay_png(gray_slice: np.ndarray, label_slice: np.ndarray) -> bytes:
    """Blend class colors over a grayscale slice; returns PNG bytes.

    Arrays are (X, Y); the image is written row=y, col=x so orientation
    matches the usual viewer convention.
    """
    g = np.asarray(gray_slice, dtype=np.float64)
    lo, hi = float(g.min()), float(g.max())
    scale = (g - lo) / (hi - lo) if hi > lo else np.zeros_like(g)
    rgb = np.repeat((scale * 255.0)[:, :, np.newaxis], 3, axis=2)
    lab = np.asarray(label_slice)
    for cls, color in _CLASS_COLORS.items():
        m = lab == cls
        if m.any():
            rgb[m] = (1 - _OVERLAY_ALPHA) * rgb[m] + _OVERLAY_ALPHA * np.array(color)
    img = Image.fromarray(np.transpose(rgb, (1, 0, 2)).astype(np.uint8), "RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def _fallback_phases(net: UNet, v: Volume4D, plan, warnings: list[str]) -> tuple[int, int]:
    """Pick ED/ES as the frames with the largest/smallest LV volume."""
    results = predict_frames(net, v, plan, list(range(v.dims[3])))
    lv_counts = [int((lab.labels == 3).sum()) for _probs, lab in results]
    ed = int(np.argmax(lv_counts))
    es = int(np.argmin(lv_counts))
    warnings.append("phase_fallback_used")
    if ed == es:
        ed, es = 0, 1
        warnings.append("phase_fallback_degenerate")
    return ed, es


def analyze_volume(
    v_raw: Volume4D, meta: dict, assets: ModelAssets
) -> tuple[dict, LabelVolume, dict[str, bytes]]:
    """Run the full pipeline on one study.

    meta may carry ed_frame/es_frame (ints) and patient_id; missing phase
    indices trigger the LV-volume fallback.  Returns the report payload,
    the stacked two-phase segmentation, and the overlay PNGs by name.
    """
    t_start = time.perf_counter()
    warnings: list[str] = []

    try:
        norm = normalize_intensity(v_raw)
    except Exception as e:
        raise PipelineError("normalize", e)

    try:
        center, _votes = locate_lv_center(norm, assets.roi)
        plan = plan_crops(v_raw.dims[:3], center, assets.roi)
    except Exception as e:
        raise PipelineError("roi", e)

    try:
        if v_raw.dims[3] < 2:
            raise ValueError("need at least two cine frames for ED and ES")
        ed = meta.get("ed_frame")
        es = meta.get("es_frame")
        if ed is None or es is None:
            ed, es = _fallback_phases(assets.net, norm, plan, warnings)
        study_meta = StudyMeta(int(ed), int(es), str(meta.get("patient_id", "")))
        study_meta.validate_against(v_raw.dims[3])
        (p_ed, lab_ed), (p_es, lab_es) = predict_frames(
            assets.net, norm, plan, [study_meta.ed_frame, study_meta.es_frame]
        )
    except PipelineError:
        raise
    except Exception as e:
        raise PipelineError("segmentation", e)

    try:
        seg_frames = [
            restore_to_original(lcca(lab), plan) for lab in (lab_ed, lab_es)
        ]
        seg4d = stack_phases(seg_frames[0], seg_frames[1])
    except Exception as e:
        raise PipelineError("postprocess", e)

    try:
        features = extract_features(seg4d, meta=study_meta)
        warnings.extend(features.warnings)
    except Exception as e:
        raise PipelineError("features", e)

    try:
        diagnosis = two_stage_predict(features.values, assets.bundle)
    except Exception as e:
        raise PipelineError("classification", e)

    overlays: dict[str, bytes] = {}
    overlay_names: dict[str, list[str]] = {"ed": [], "es": []}
    try:
        for phase, frame, seg in (
            ("ed", study_meta.ed_frame, seg_frames[0]),
            ("es", study_meta.es_frame, seg_frames[1]),
        ):
            img3d = norm.frame(frame)
            for z in range(img3d.shape[2]):
                name = f"{phase}_z{z:02d}.png"
                overlays[name] = overlay_png(img3d[:, :, z], seg.labels[:, :, z])
                overlay_names[phase].append(name)
    except Exception as e:
        raise PipelineError("overlays", e)

    report = {
        "final": diagnosis.final.value,
        "initial": diagnosis.initial.value,
        "probabilities": dict(diagnosis.probabilities),
        "expert_used": diagnosis.expert_used,
        "decision_value": diagnosis.decision_value,
        "features": features.as_dict(),
        "feature_warnings": list(features.warnings),
        "explanation": EXPLANATIONS[diagnosis.final],
        "warnings": warnings,
        "ed_frame": study_meta.ed_frame,
        "es_frame": study_meta.es_frame,
        "lv_center": [int(center[0]), int(center[1])],
        "overlays": overlay_names,
        "elapsed_seconds": time.perf_counter() - t_start,
    }
    return report, seg4d, overlays
