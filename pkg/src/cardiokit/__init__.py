"""Cardiac cine-MRI analysis toolkit.

Pipeline stages, each importable on its own: NIfTI IO (`nifti`), intensity
and label containers (`volume`), LV localization (`roi`), a reverse-mode
autodiff engine (`autodiff`) under a residual 3D U-Net (`unet`) trained with
Dice-family losses (`losses`, `train`), sliding-window inference (`infer`),
connected-component cleanup (`postproc`), diagnostic features (`features`),
the two-stage forest+SVM classifier (`forest`, `svm`, `classify`), synthetic
phantoms for validation (`phantom`), and the HTTP platform (`service`).
"""
from .classify import (
    CLASS_ORDER,
    DiagnosisLabel,
    DiagnosisReport,
    ModelBundle,
    load_bundle,
    save_bundle,
    train_bundle,
    two_stage_predict,
)
from .features import FEATURE_NAMES, FeatureVector20, extract_features
from .infer import predict_frames, predict_volume
from .losses import LOSS_KINDS, ClassWeights, LossConfig, hard_dice, total_loss
from .nifti import NiftiError, read_nifti, write_nifti, write_nifti_gz
from .phantom import PhantomSpec, generate_cohort, generate_phantom
from .postproc import connected_components_3d, lcca, restore_to_original, stack_phases
from .roi import RoiParams, apply_crop, locate_lv_center, plan_crops
from .train import TrainConfig, train
from .unet import NetConfig, UNet, load_checkpoint, save_checkpoint
from .volume import (
    LabelVolume,
    StudyMeta,
    Volume4D,
    VoxelSpacing,
    normalize_intensity,
)

__version__ = "0.1.0"

__all__ = [
    "CLASS_ORDER",
    "ClassWeights",
    "DiagnosisLabel",
    "DiagnosisReport",
    "FEATURE_NAMES",
    "FeatureVector20",
    "LOSS_KINDS",
    "LabelVolume",
    "LossConfig",
    "ModelBundle",
    "NetConfig",
    "NiftiError",
    "PhantomSpec",
    "RoiParams",
    "StudyMeta",
    "TrainConfig",
    "UNet",
    "Volume4D",
    "VoxelSpacing",
    "apply_crop",
    "connected_components_3d",
    "extract_features",
    "generate_cohort",
    "generate_phantom",
    "hard_dice",
    "lcca",
    "load_bundle",
    "load_checkpoint",
    "locate_lv_center",
    "normalize_intensity",
    "plan_crops",
    "predict_frames",
    "predict_volume",
    "read_nifti",
    "restore_to_original",
    "save_bundle",
    "save_checkpoint",
    "stack_phases",
    "total_loss",
    "train",
    "train_bundle",
    "two_stage_predict",
    "write_nifti",
    "write_nifti_gz",
]
