"""Two-stage diagnosis: random forest over all features, RBF-SVM expert
re-adjudicating MINF/DCM calls from two wall-thickness features.

The forest votes over the full 20-feature vector and reports per-class
probabilities; when its call is MINF or DCM, an SVM trained only on MINF
and DCM cases re-decides the label from two expert features.  The expert
never touches HCM/NOR/ARV calls.  MINF maps to the SVM's +1 side and DCM to
-1, so a zero decision value resolves to DCM.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .forest import Forest, ForestParams, Tree, UntrainedModel, forest_predict, train_forest
from .serialization import CorruptBundle, VersionMismatch, pack_container, unpack_container
from .svm import SvmModel, SvmParams, svm_predict, train_svm

BUNDLE_MAGIC = b"CKCL"
BUNDLE_VERSION = 1


class DiagnosisLabel(str, Enum):
    DCM = "DCM"
    MINF = "MINF"
    HCM = "HCM"
    NOR = "NOR"
    ARV = "ARV"


# fixed order used for tie-breaking and probability vectors
CLASS_ORDER = (
    DiagnosisLabel.DCM,
    DiagnosisLabel.MINF,
    DiagnosisLabel.HCM,
    DiagnosisLabel.NOR,
    DiagnosisLabel.ARV,
)

# 0-based indices into the canonical 20-feature vector.
# Default expert pair: max of slice-wise mean MWT (ES) and mean of
# slice-wise std MWT (ES).  The alternative pair swaps to the ED-phase
# dispersion features (mean of slice-wise stds, std of slice-wise means).
EXPERT_FEATURES_ES = (13, 17)
EXPERT_FEATURES_ED = (16, 14)
DEFAULT_EXPERT_FEATURES = EXPERT_FEATURES_ES

_SVM_LABEL = {DiagnosisLabel.MINF: 1, DiagnosisLabel.DCM: -1}


def label_index(label: DiagnosisLabel) -> int:
    return CLASS_ORDER.index(label)


@dataclass(frozen=True)
class ModelBundle:
    forest: Forest
    svm: SvmModel
    expert_features: tuple[int, int] = DEFAULT_EXPERT_FEATURES
    version: int = BUNDLE_VERSION

    def __post_init__(self):
        ef = tuple(int(i) for i in self.expert_features)
        object.__setattr__(self, "expert_features", ef)
        if len(ef) != 2 or not all(0 <= i < self.forest.n_features for i in ef):
            raise ValueError(f"expert feature indices out of range: {ef}")
        a = self.svm.alphas
        if np.any(a < 0) or np.any(a > self.svm.penalty + 1e-9):
            raise ValueError("SVM duals violate 0 <= alpha <= C")
        balance = float((a * self.svm.support_y).sum())
        if abs(balance) > self.svm.smo_tol:
            raise ValueError(f"SVM duals violate sum(alpha*y)=0: residual {balance}")


@dataclass(frozen=True)
class DiagnosisReport:
    final: DiagnosisLabel
    initial: DiagnosisLabel
    probabilities: dict[str, float]
    expert_used: bool
    decision_value: float | None = None


def train_bundle(X, labels, forest_params: ForestParams = ForestParams(),
                 svm_params: SvmParams = SvmParams(),
                 expert_features: tuple[int, int] = DEFAULT_EXPERT_FEATURES) -> ModelBundle:
    """Fit both stages: the forest on every case, the expert SVM on the
    MINF/DCM cases restricted to the two expert feature columns."""
    X = np.asarray(X, dtype=np.float64)
    y_idx = np.asarray([label_index(DiagnosisLabel(l)) for l in labels], dtype=np.int64)
    forest = train_forest(X, y_idx, forest_params, n_classes=len(CLASS_ORDER))

    expert_mask = np.isin(
        y_idx, [label_index(DiagnosisLabel.MINF), label_index(DiagnosisLabel.DCM)]
    )
    X2 = X[expert_mask][:, list(expert_features)]
    y2 = np.where(y_idx[expert_mask] == label_index(DiagnosisLabel.MINF), 1, -1)
    svm = train_svm(X2, y2, svm_params)
    return ModelBundle(forest=forest, svm=svm, expert_features=tuple(expert_features))


def two_stage_predict(x, bundle: ModelBundle) -> DiagnosisReport:
    """Forest first; MINF/DCM calls are re-decided by the expert SVM."""
    values = np.asarray(getattr(x, "values", x), dtype=np.float64)
    idx, probs = forest_predict(bundle.forest, values)
    initial = CLASS_ORDER[idx]
    prob_map = {label.value: float(p) for label, p in zip(CLASS_ORDER, probs)}
    if initial not in (DiagnosisLabel.MINF, DiagnosisLabel.DCM):
        return DiagnosisReport(final=initial, initial=initial,
                               probabilities=prob_map, expert_used=False)
    sign, decision = svm_predict(bundle.svm, values[list(bundle.expert_features)])
    final = DiagnosisLabel.MINF if sign > 0 else DiagnosisLabel.DCM
    return DiagnosisReport(final=final, initial=initial, probabilities=prob_map,
                           expert_used=True, decision_value=decision)


def save_bundle(bundle: ModelBundle) -> bytes:
    arrays: dict[str, np.ndarray] = {}
    for t, tree in enumerate(bundle.forest.trees):
        arrays[f"tree{t}.feature"] = tree.feature
        arrays[f"tree{t}.threshold"] = tree.threshold
        arrays[f"tree{t}.left"] = tree.left
        arrays[f"tree{t}.right"] = tree.right
        arrays[f"tree{t}.counts"] = tree.counts
    arrays["svm.support_x"] = bundle.svm.support_x
    arrays["svm.support_y"] = bundle.svm.support_y
    arrays["svm.alphas"] = bundle.svm.alphas
    arrays["svm.mu"] = bundle.svm.mu
    arrays["svm.sigma"] = bundle.svm.sigma
    fp = bundle.forest.params
    meta = {
        "n_trees": len(bundle.forest.trees),
        "n_classes": bundle.forest.n_classes,
        "n_features": bundle.forest.n_features,
        "forest_params": {
            "n_trees": fp.n_trees,
            "max_depth": fp.max_depth,
            "min_split": fp.min_split,
            "features_per_split": fp.features_per_split,
            "rng_seed": fp.rng_seed,
        },
        "svm": {
            "bias": bundle.svm.bias,
            "gamma": bundle.svm.gamma,
            "penalty": bundle.svm.penalty,
            "smo_tol": bundle.svm.smo_tol,
        },
        "expert_features": list(bundle.expert_features),
    }
    return pack_container(BUNDLE_MAGIC, BUNDLE_VERSION, meta, arrays)


def load_bundle(data: bytes) -> ModelBundle:
    meta, arrays = unpack_container(data, BUNDLE_MAGIC, BUNDLE_VERSION)
    try:
        trees = []
        for t in range(meta["n_trees"]):
            trees.append(Tree(
                feature=arrays[f"tree{t}.feature"],
                threshold=arrays[f"tree{t}.threshold"],
                left=arrays[f"tree{t}.left"],
                right=arrays[f"tree{t}.right"],
                counts=arrays[f"tree{t}.counts"],
            ))
        forest = Forest(
            trees=tuple(trees),
            n_classes=int(meta["n_classes"]),
            n_features=int(meta["n_features"]),
            params=ForestParams(**meta["forest_params"]),
        )
        sv = meta["svm"]
        svm = SvmModel(
            support_x=arrays["svm.support_x"],
            support_y=arrays["svm.support_y"],
            alphas=arrays["svm.alphas"],
            bias=float(sv["bias"]),
            gamma=float(sv["gamma"]),
            mu=arrays["svm.mu"],
            sigma=arrays["svm.sigma"],
            penalty=float(sv["penalty"]),
            smo_tol=float(sv["smo_tol"]),
        )
        return ModelBundle(forest=forest, svm=svm,
                           expert_features=tuple(meta["expert_features"]))
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptBundle(f"bundle contents are inconsistent: {e}") from None


__all__ = [
    "BUNDLE_VERSION",
    "CLASS_ORDER",
    "DEFAULT_EXPERT_FEATURES",
    "EXPERT_FEATURES_ED",
    "EXPERT_FEATURES_ES",
    "CorruptBundle",
    "DiagnosisLabel",
    "DiagnosisReport",
    "ModelBundle",
    "UntrainedModel",
    "VersionMismatch",
    "label_index",
    "load_bundle",
    "save_bundle",
    "train_bundle",
    "two_stage_predict",
]
