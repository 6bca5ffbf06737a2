"""End-to-end quickstart: train briefly on synthetic studies, analyze one.

Generates a small phantom cohort, fits the segmentation network for a few
epochs, fits the two-stage classifier on reference-label features, then runs
the full analysis pipeline (localize -> segment -> clean up -> features ->
diagnose) on a fresh study and prints the report.  Runs on one CPU core in
about three minutes; overlays land in ./demo_out/.
"""
import os
import time

import numpy as np

from cardiokit.classify import DiagnosisLabel, train_bundle
from cardiokit.features import extract_features
from cardiokit.forest import ForestParams
from cardiokit.losses import LossConfig
from cardiokit.phantom import PhantomSpec, generate_cohort, generate_phantom
from cardiokit.roi import RoiParams, apply_crop, plan_crops
from cardiokit.service.pipeline import ModelAssets, analyze_volume
from cardiokit.train import TrainConfig, train
from cardiokit.unet import NetConfig, UNet
from cardiokit.volume import LabelVolume, normalize_intensity


def truth_center(case):
    lv = np.argwhere(case.truth.frame(case.meta.ed_frame).labels == 3)
    return int(lv[:, 0].mean()), int(lv[:, 1].mean())


def main():
    print("generating a 10-study training cohort ...")
    cohort = generate_cohort(2, seed=1)

    crop_rp = RoiParams(patch=64, target_depth=8, depth_stride=8)
    pairs = []
    features, labels = [], []
    for case in cohort:
        norm = normalize_intensity(case.image)
        plan = plan_crops(case.image.dims[:3], truth_center(case), crop_rp)
        img_crop = apply_crop(norm, plan, 0)
        lab_crop = apply_crop(case.truth, plan, 0)
        for f in (case.meta.ed_frame, case.meta.es_frame):
            pairs.append((img_crop.frame(f), lab_crop.frame(f).labels))
        ed = case.truth.frame(case.meta.ed_frame).labels
        es = case.truth.frame(case.meta.es_frame).labels
        fv = extract_features(LabelVolume(np.stack([ed, es], axis=3),
                                          case.truth.spacing))
        features.append(fv.values)
        labels.append(case.label)

    print("training the segmenter (10 epochs on 20 crops) ...")
    net = UNet(NetConfig(levels=2, base_channels=8), rng_seed=0)
    t0 = time.time()
    net, metrics = train(net, pairs,
                         TrainConfig(epochs=10, batch_size=4, lr0=2e-3, rng_seed=0),
                         LossConfig(kind="dynamic_focal_dice"))
    d = metrics[-1]["train_dice"]
    print(f"  {time.time()-t0:.0f}s, train Dice RV={d[1]:.2f} "
          f"Myo={d[2]:.2f} LV={d[3]:.2f}")

    print("training the two-stage classifier on reference features ...")
    bundle = train_bundle(np.stack(features), labels,
                          ForestParams(n_trees=50, rng_seed=0))

    print("analyzing a fresh study ...")
    case = generate_phantom(PhantomSpec(archetype=DiagnosisLabel.MINF, seed=321))
    assets = ModelAssets(net=net, bundle=bundle, roi=RoiParams(target_depth=12))
    meta = {"ed_frame": case.meta.ed_frame, "es_frame": case.meta.es_frame}
    report, seg4d, overlays = analyze_volume(case.image, meta, assets)

    print(f"\n  diagnosis: {report['final']} "
          f"(initial {report['initial']}, expert_used={report['expert_used']})")
    print(f"  true archetype: {case.label.value}")
    print("  probabilities:",
          {k: round(v, 3) for k, v in report["probabilities"].items()})
    fd = report["features"]
    print(f"  LV EF {fd['lv_ef_pct']:.1f}%  RV EF {fd['rv_ef_pct']:.1f}%  "
          f"max wall {fd['mwt_max_mean_ed_mm']:.1f} mm")
    print(f"  analyze took {report['elapsed_seconds']:.2f}s")

    os.makedirs("demo_out", exist_ok=True)
    for name, png in overlays.items():
        with open(os.path.join("demo_out", name), "wb") as fh:
            fh.write(png)
    print(f"  wrote {len(overlays)} overlay PNGs to ./demo_out/")


if __name__ == "__main__":
    main()
