"""Deterministic synthetic cine phantom with five disease archetypes.

Each case is a short-axis stack of an annular left ventricle (bright blood
cavity inside a mid-gray myocardial ring) with a crescent right ventricle
hugging the wall, contracting over the cardiac cycle and tapering toward the
apex.  Archetypes differ in cavity size, wall-thickness profile, contraction,
and RV scale: DCM dilates the LV with a uniformly thin wall, MINF carves a
focal raised-cosine thinning into an otherwise normal wall, HCM thickens the
wall around a small cavity, ARV dilates a poorly contracting RV, and NOR
sits mid-range.  Parameter ranges are chosen so the archetypes separate in
the diagnostic feature space; the phantom exists to validate the pipeline,
not to model MR physics.

All geometry is computed in pixel units; wall thicknesses given in mm are
converted with the mean in-plane pitch.  Randomness (center jitter first,
then the noise field) comes from a single generator seeded per case, so
every case is bitwise reproducible.
"""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, replace

import numpy as np

from .classify import CLASS_ORDER, DiagnosisLabel
from .nifti import write_nifti_gz
from .volume import LV, MYO, RV, LabelVolume, StudyMeta, VoxelSpacing, Volume4D

INTENSITY_BACKGROUND = 0.1
INTENSITY_MYO = 0.5
INTENSITY_BLOOD = 0.9


class GeometryOverflow(Exception):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and noise parameters for one synthetic case."""

    archetype: DiagnosisLabel
    dims: tuple[int, int, int, int] = (128, 128, 10, 8)
    spacing: VoxelSpacing = VoxelSpacing(1.5625, 1.5625, 10.0)
    seed: int = 0
    r_ed_px: float = 18.0  # LV cavity radius at end-diastole
    wall_base_mm: float = 9.0
    wall_focal_dip_mm: float = 0.0  # depth of the focal thinning, 0 = none
    wall_focal_center_rad: float = 2.0
    wall_focal_width_rad: float = 1.5
    contraction_fraction: float = 0.30  # radial cavity contraction at ES
    rv_scale: float = 1.0
    rv_contraction: float = 0.24
    center_jitter_px: float = 4.0
    noise_sigma: float = 0.06  # fraction of the dynamic range
    apex_taper: float = 0.25
    wall_thicken: float = 0.25  # wall growth factor at peak contraction
    wall_focal_z_falloff: float = 0.9  # how fast the dip fades toward the stack ends

    def __post_init__(self):
        X, Y, Z, T = self.dims
        if min(X, Y) < 16 or Z < 1 or T < 2:
            raise ValueError(f"dims too small: {self.dims}")
        if self.r_ed_px <= 0 or self.wall_base_mm <= 0 or self.rv_scale <= 0:
            raise ValueError("radii and thicknesses must be positive")
        if not (0 < self.contraction_fraction < 1):
            raise ValueError("contraction fraction must lie in (0, 1)")
        if not (0 <= self.rv_contraction < 1):
            raise ValueError("rv contraction must lie in [0, 1)")
        if not (0 <= self.wall_focal_dip_mm <= self.wall_base_mm):
            raise ValueError("focal dip cannot exceed the base wall thickness")
        if self.wall_focal_width_rad <= 0:
            raise ValueError("focal width must be positive")
        if self.noise_sigma < 0 or self.center_jitter_px < 0:
            raise ValueError("noise and jitter must be >= 0")
        if not (0 <= self.apex_taper < 1) or self.wall_thicken < 0:
            raise ValueError("bad taper or wall thickening factor")
        if not (0 <= self.wall_focal_z_falloff <= 1):
            raise ValueError("focal z falloff must lie in [0, 1]")


@dataclass(frozen=True)
class PhantomCase:
    image: Volume4D
    truth: LabelVolume
    label: DiagnosisLabel
    meta: StudyMeta
    case_id: str = ""
    seed: int = 0


def _wall_px(spec: PhantomSpec, theta: np.ndarray, systole: float, zfrac: float) -> np.ndarray:
    """Angular wall-thickness profile in pixels at contraction phase s(t).

    The focal dip is a raised cosine in angle, fading toward the stack ends
    (cos^2 in the normalized slice position) so the infarct stays localized
    in all three dimensions.
    """
    pitch = (spec.spacing.dx + spec.spacing.dy) / 2.0
    wall_mm = np.full_like(theta, spec.wall_base_mm)
    if spec.wall_focal_dip_mm > 0:
        delta = np.angle(np.exp(1j * (theta - spec.wall_focal_center_rad)))
        inside = np.abs(delta) <= spec.wall_focal_width_rad / 2.0
        z_gain = np.cos(np.pi * (zfrac - 0.5) * spec.wall_focal_z_falloff) ** 2
        dip = spec.wall_focal_dip_mm * z_gain * np.cos(np.pi * delta / spec.wall_focal_width_rad) ** 2
        wall_mm = wall_mm - np.where(inside, dip, 0.0)
    wall = wall_mm * (1.0 + spec.wall_thicken * systole) / pitch
    return np.maximum(wall, 1.0)  # 1-px floor


def rasterize_masks(spec: PhantomSpec, center: tuple[float, float]) -> np.ndarray:
    """Ground-truth class masks for every slice and frame.

    Per frame t the cavity radius is r_ED * (1 - cf * sin^2(pi t / T)); the
    wall follows the angular profile and thickens with contraction; slices
    taper linearly toward the apex (last slice).  The RV is the part of an
    offset disc not covered by the LV or wall.  Raises GeometryOverflow when
    any structure reaches the in-plane border.
    """
    X, Y, Z, T = spec.dims
    cx, cy = center
    xs, ys = np.meshgrid(np.arange(X, dtype=np.float64), np.arange(Y, dtype=np.float64), indexing="ij")
    rho = np.hypot(xs - cx, ys - cy)
    theta = np.arctan2(ys - cy, xs - cx)

    truth = np.zeros((X, Y, Z, T), dtype=np.uint8)
    for t in range(T):
        systole = np.sin(np.pi * t / T) ** 2
        r_t = spec.r_ed_px * (1.0 - spec.contraction_fraction * systole)
        rv_r_t = spec.rv_scale * spec.r_ed_px * 0.55 * (1.0 - spec.rv_contraction * systole)
        for z in range(Z):
            zfrac = z / (Z - 1) if Z > 1 else 0.5
            taper = 1.0 - spec.apex_taper * zfrac
            r_cav = r_t * taper
            wall = _wall_px(spec, theta, systole, zfrac)
            lv = rho <= r_cav
            myo = (rho <= r_cav + wall) & ~lv

            rv_r = rv_r_t * taper
            wall_at_pi = float(_wall_px(spec, np.array(np.pi), systole, zfrac))
            rv_cx = cx - (r_cav + wall_at_pi + 0.25 * rv_r)
            rv = (np.hypot(xs - rv_cx, ys - cy) <= rv_r) & ~lv & ~myo

            frame = truth[:, :, z, t]
            frame[lv] = LV
            frame[myo] = MYO
            frame[rv] = RV

    border = (
        truth[0].any() or truth[-1].any() or truth[:, 0].any() or truth[:, -1].any()
    )
    if border:
        raise GeometryOverflow("phantom structures reach the in-plane border")
    return truth


def generate_phantom(spec: PhantomSpec) -> PhantomCase:
    """Build one case: truth masks, three-plateau image, noise, and meta."""
    X, Y, Z, T = spec.dims
    rng = np.random.default_rng(spec.seed)
    jx, jy = rng.uniform(-spec.center_jitter_px, spec.center_jitter_px, size=2)
    center = (X / 2.0 + jx, Y / 2.0 + jy)

    truth = rasterize_masks(spec, center)
    img = np.full(truth.shape, INTENSITY_BACKGROUND, dtype=np.float64)
    img[truth == MYO] = INTENSITY_MYO
    img[(truth == LV) | (truth == RV)] = INTENSITY_BLOOD
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=truth.shape)

    lv_per_frame = (truth == LV).reshape(-1, T).sum(axis=0)
    ed = int(np.argmax(lv_per_frame))
    es = int(np.argmin(lv_per_frame))
    meta = StudyMeta(ed_frame=ed, es_frame=es)

    return PhantomCase(
        image=Volume4D(img.astype(np.float32), spec.spacing),
        truth=LabelVolume(truth, spec.spacing),
        label=spec.archetype,
        meta=meta,
        seed=spec.seed,
    )


# Sampling ranges per archetype, tuned so classes separate in feature space
# (MINF vs DCM split by the ES wall-thickness statistics, HCM by thick wall
# and small cavity, ARV by RV size and poor RV contraction).  Extents stay
# inside the default 128-px grid for every combination.
ARCHETYPE_RANGES: dict[DiagnosisLabel, dict[str, tuple[float, float]]] = {
    DiagnosisLabel.DCM: {
        "r_ed_px": (24.0, 28.0),
        "wall_base_mm": (4.0, 5.0),
        "wall_focal_dip_mm": (0.0, 0.0),
        "contraction_fraction": (0.10, 0.15),
        "rv_scale": (0.90, 1.05),
        "rv_contraction": (0.20, 0.28),
    },
    DiagnosisLabel.MINF: {
        "r_ed_px": (19.0, 22.0),
        "wall_base_mm": (9.0, 11.0),
        "wall_focal_dip_mm": (5.0, 6.5),
        "contraction_fraction": (0.16, 0.21),
        "rv_scale": (0.90, 1.05),
        "rv_contraction": (0.20, 0.28),
    },
    DiagnosisLabel.HCM: {
        "r_ed_px": (12.0, 15.0),
        "wall_base_mm": (13.0, 16.0),
        "wall_focal_dip_mm": (0.0, 0.0),
        "contraction_fraction": (0.30, 0.38),
        "rv_scale": (0.90, 1.05),
        "rv_contraction": (0.20, 0.28),
    },
    DiagnosisLabel.NOR: {
        "r_ed_px": (17.0, 20.0),
        "wall_base_mm": (8.0, 10.0),
        "wall_focal_dip_mm": (0.0, 0.0),
        "contraction_fraction": (0.30, 0.35),
        "rv_scale": (0.90, 1.05),
        "rv_contraction": (0.20, 0.28),
    },
    DiagnosisLabel.ARV: {
        "r_ed_px": (17.0, 20.0),
        "wall_base_mm": (8.0, 10.0),
        "wall_focal_dip_mm": (0.0, 0.0),
        "contraction_fraction": (0.30, 0.35),
        "rv_scale": (1.60, 1.90),
        "rv_contraction": (0.05, 0.12),
    },
}


def generate_cohort(n_per_class: int, seed: int = 0, **overrides) -> list[PhantomCase]:
    """n_per_class cases per archetype, parameters sampled from the ranges.

    Child seeds are spawned deterministically from the cohort seed, so the
    same seed always yields a bitwise-identical cohort.  Keyword overrides
    are forwarded to every PhantomSpec (e.g. dims for smaller studies).
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    children = np.random.SeedSequence(seed).spawn(5 * n_per_class)
    cases = []
    for ci, label in enumerate(CLASS_ORDER):
        ranges = ARCHETYPE_RANGES[label]
        for i in range(n_per_class):
            child = children[ci * n_per_class + i]
            rng = np.random.default_rng(child)
            params = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in ranges.items()}
            if params["wall_focal_dip_mm"] > 0:
                params["wall_focal_center_rad"] = float(rng.uniform(-np.pi, np.pi))
                params["wall_focal_width_rad"] = float(rng.uniform(1.3, 1.7))
            spec = PhantomSpec(
                archetype=label,
                seed=int(rng.integers(0, 2**63)),
                **params,
                **overrides,
            )
            case = generate_phantom(spec)
            cases.append(replace(case, case_id=f"{label.value.lower()}_{i:03d}"))
    return cases


def cohort_manifest(cases: list[PhantomCase]) -> str:
    """CSV manifest: case id, diagnosis label, ED/ES frame indices, seed."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("case", "label", "ed_frame", "es_frame", "seed"))
    for c in cases:
        writer.writerow((c.case_id, c.label.value, c.meta.ed_frame, c.meta.es_frame, c.seed))
    return buf.getvalue()


def emit_cohort(cases: list[PhantomCase], out_dir: str) -> list[str]:
    """Write image/truth NIfTI pairs plus manifest.csv; returns paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, c in enumerate(cases):
        cid = c.case_id or f"case_{i:03d}"
        img_path = os.path.join(out_dir, f"{cid}_img.nii.gz")
        seg_path = os.path.join(out_dir, f"{cid}_seg.nii.gz")
        with open(img_path, "wb") as f:
            f.write(write_nifti_gz(c.image))
        with open(seg_path, "wb") as f:
            f.write(write_nifti_gz(c.truth))
        paths += [img_path, seg_path]
    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest, "w") as f:
        f.write(cohort_manifest(cases))
    paths.append(manifest)
    return paths
