"""Train the segmenter on one cohort, score it on a held-out cohort.

Mirrors the evaluation the release gate uses: crops around the reference
center for training, the production path (localization, sliding depth
windows, largest-component cleanup, restore to the original grid) for
held-out scoring.  Pass --per-class/--epochs to trade time for quality;
the defaults run in roughly three minutes on one core.
"""
import argparse
import time

import numpy as np

from cardiokit.infer import predict_volume
from cardiokit.losses import LossConfig, hard_dice
from cardiokit.phantom import generate_cohort
from cardiokit.postproc import lcca, restore_to_original
from cardiokit.roi import RoiParams, apply_crop, locate_lv_center, plan_crops
from cardiokit.train import TrainConfig, train
from cardiokit.unet import NetConfig, UNet
from cardiokit.volume import normalize_intensity

CLASS_NAMES = ("RV", "Myo", "LV")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--per-class", type=int, default=2,
                    help="training studies per diagnosis (held-out uses the same)")
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    train_cases = generate_cohort(args.per_class, seed=100 + args.seed)
    held_cases = generate_cohort(args.per_class, seed=200 + args.seed)
    print(f"{len(train_cases)} training studies, {len(held_cases)} held out")

    crop_rp = RoiParams(patch=64, target_depth=8, depth_stride=8)
    pairs = []
    for case in train_cases:
        norm = normalize_intensity(case.image)
        lv = np.argwhere(case.truth.frame(case.meta.ed_frame).labels == 3)
        center = (int(lv[:, 0].mean()), int(lv[:, 1].mean()))
        plan = plan_crops(case.image.dims[:3], center, crop_rp)
        img_crop = apply_crop(norm, plan, 0)
        lab_crop = apply_crop(case.truth, plan, 0)
        for f in (case.meta.ed_frame, case.meta.es_frame):
            pairs.append((img_crop.frame(f), lab_crop.frame(f).labels))

    net = UNet(NetConfig(levels=2, base_channels=8), rng_seed=args.seed)
    t0 = time.time()
    net, metrics = train(net, pairs,
                         TrainConfig(epochs=args.epochs, batch_size=4, lr0=2e-3,
                                     rng_seed=args.seed),
                         LossConfig(kind="dynamic_focal_dice"))
    print(f"trained {args.epochs} epochs on {len(pairs)} crops "
          f"in {time.time()-t0:.0f}s, final loss {metrics[-1]['loss']:.4f}")

    eval_rp = RoiParams(patch=128, target_depth=12, depth_stride=8)
    per_class = []
    t0 = time.time()
    for case in held_cases:
        norm = normalize_intensity(case.image)
        center, _ = locate_lv_center(norm, eval_rp)
        plan = plan_crops(case.image.dims[:3], center, eval_rp)
        for f in (case.meta.ed_frame, case.meta.es_frame):
            _, lab = predict_volume(net, norm, plan, f)
            lab = restore_to_original(lcca(lab), plan)
            per_class.append(hard_dice(lab.labels, case.truth.frame(f).labels)[1:])
    per_class = np.array(per_class)
    print(f"scored {len(per_class)} held-out frames in {time.time()-t0:.0f}s\n")

    print("held-out Dice")
    for i, name in enumerate(CLASS_NAMES):
        col = per_class[:, i]
        print(f"  {name:4s} mean {col.mean():.3f}  min {col.min():.3f}  "
              f"max {col.max():.3f}")
    print(f"  mean foreground {per_class.mean():.3f}")


if __name__ == "__main__":
    main()
