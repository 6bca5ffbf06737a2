"""Command line interface.

Subcommands: phantom-gen, train-seg, train-clf, analyze, features, eval,
serve.  Returns 0 on success; usage problems exit 2 (argparse) and stage
failures exit 1 with an "error [stage]: ..." line on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from .classify import (
    CLASS_ORDER,
    EXPERT_FEATURES_ED,
    EXPERT_FEATURES_ES,
    DiagnosisLabel,
    label_index,
    load_bundle,
    save_bundle,
    train_bundle,
    two_stage_predict,
)
from .features import FeatureVector20, extract_features, features_csv
from .forest import ForestParams
from .infer import predict_frames
from .losses import LossConfig, hard_dice
from .nifti import read_nifti
from .phantom import emit_cohort, generate_cohort
from .postproc import lcca, restore_to_original, stack_phases
from .roi import RoiParams, apply_crop, locate_lv_center, plan_crops
from .service.pipeline import PipelineError, analyze_volume, load_assets
from .svm import SvmParams
from .train import TrainConfig, train
from .unet import NetConfig, UNet, load_checkpoint, save_checkpoint
from .volume import LabelVolume, Volume4D, normalize_intensity

LOSS_FLAGS = {
    "ce": "cross_entropy",
    "dice": "dice",
    "focal": "focal_dice",
    "dynamic-focal": "dynamic_focal_dice",
}
CLASS_NAMES = ("background", "RV", "Myo", "LV")


@dataclass(frozen=True)
class CohortCase:
    case_id: str
    label: DiagnosisLabel
    ed_frame: int
    es_frame: int
    image: Volume4D
    truth: LabelVolume


def load_cohort(data_dir: str, limit: int | None = None) -> list[CohortCase]:
    """Read a phantom-gen output directory back into memory."""
    manifest = os.path.join(data_dir, "manifest.csv")
    if not os.path.isfile(manifest):
        raise FileNotFoundError(f"no manifest.csv in {data_dir}")
    cases = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            with open(os.path.join(data_dir, f"{row['case']}_img.nii.gz"), "rb") as f:
                image = read_nifti(f.read())
            with open(os.path.join(data_dir, f"{row['case']}_seg.nii.gz"), "rb") as f:
                seg_v = read_nifti(f.read())
            cases.append(
                CohortCase(
                    case_id=row["case"],
                    label=DiagnosisLabel(row["label"]),
                    ed_frame=int(row["ed_frame"]),
                    es_frame=int(row["es_frame"]),
                    image=image,
                    truth=LabelVolume(seg_v.data, seg_v.spacing),
                )
            )
            if limit is not None and len(cases) >= limit:
                break
    return cases


def _case_crop_pairs(case: CohortCase, rp: RoiParams, use_roi: bool
                     ) -> list[tuple[np.ndarray, np.ndarray]]:
    """ED and ES (image, label) crops for one case, first depth window."""
    norm = normalize_intensity(case.image)
    if use_roi:
        center, _ = locate_lv_center(norm, rp)
    else:
        center = (case.image.dims[0] // 2, case.image.dims[1] // 2)
    plan = plan_crops(case.image.dims[:3], center, rp)
    img_crop = apply_crop(norm, plan, 0)
    lab_crop = apply_crop(case.truth, plan, 0)
    pairs = []
    for f in (case.ed_frame, case.es_frame):
        pairs.append((img_crop.frame(f), lab_crop.frame(f).labels))
    return pairs


def _dice_table(dice_by_class: np.ndarray) -> str:
    lines = ["class       dice"]
    for name, d in zip(CLASS_NAMES[1:], dice_by_class[1:]):
        lines.append(f"{name:<10}  {d:.4f}")
    lines.append(f"{'mean_fg':<10}  {float(np.mean(dice_by_class[1:])):.4f}")
    return "\n".join(lines)


def cmd_phantom_gen(args) -> int:
    cases = generate_cohort(args.per_class, seed=args.seed)
    paths = emit_cohort(cases, args.out)
    print(f"wrote {len(cases)} cases ({len(paths)} files) to {args.out}")
    return 0


def cmd_train_seg(args) -> int:
    if args.patch % 2**args.levels:
        raise ValueError(f"--patch must be divisible by {2 ** args.levels}")
    if args.depth % 2**args.levels:
        raise ValueError(f"--depth must be divisible by {2 ** args.levels}")
    cases = load_cohort(args.data, args.limit)
    rp = RoiParams(patch=args.patch, target_depth=args.depth,
                   depth_stride=args.depth)
    pairs: list[tuple[np.ndarray, np.ndarray]] = []
    heldout: list[tuple[np.ndarray, np.ndarray]] = []
    n_holdout = args.holdout
    for i, case in enumerate(cases):
        is_heldout = n_holdout > 0 and i >= len(cases) - n_holdout
        dest = heldout if is_heldout else pairs
        dest.extend(_case_crop_pairs(case, rp, not args.no_roi))
    net = UNet(NetConfig(levels=args.levels, base_channels=args.base),
               rng_seed=args.seed)
    loss_cfg = LossConfig(kind=LOSS_FLAGS[args.loss])
    train_cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch,
                            lr0=args.lr, rng_seed=args.seed)
    net, metrics = train(net, pairs, train_cfg, loss_cfg,
                         heldout=heldout or None)
    with open(args.out, "wb") as fh:
        fh.write(save_checkpoint(net))
    last = metrics[-1]
    roi_state = "off" if args.no_roi else "on"
    print(f"train-seg loss={args.loss} roi={roi_state} epochs={args.epochs} "
          f"items={len(pairs)} heldout={len(heldout)}")
    dice = np.array(last["heldout_dice"] if heldout else last["train_dice"])
    print(_dice_table(dice))
    print(f"final_loss {last['loss']:.4f}")
    print(f"checkpoint {args.out}")
    return 0


def _truth_features(case: CohortCase) -> FeatureVector20:
    seg4d = stack_phases(case.truth.frame(case.ed_frame),
                         case.truth.frame(case.es_frame))
    return extract_features(seg4d)


def cmd_train_clf(args) -> int:
    cases = load_cohort(args.data, args.limit)
    X = np.stack([_truth_features(c).values for c in cases])
    labels = [c.label for c in cases]
    expert = EXPERT_FEATURES_ED if args.expert == "ed" else EXPERT_FEATURES_ES
    bundle = train_bundle(
        X, labels,
        ForestParams(n_trees=args.trees, rng_seed=args.seed),
        SvmParams(),
        expert_features=expert,
    )
    with open(args.out, "wb") as fh:
        fh.write(save_bundle(bundle))
    correct = sum(
        two_stage_predict(x, bundle).final == l for x, l in zip(X, labels)
    )
    print(f"train-clf cases={len(cases)} trees={args.trees} expert={args.expert}")
    print(f"train_accuracy {correct / len(cases):.4f}")
    print(f"bundle {args.out}")
    return 0


def cmd_analyze(args) -> int:
    with open(args.volume, "rb") as fh:
        v = read_nifti(fh.read())
    assets = load_assets(args.seg, args.clf)
    meta: dict = {}
    if args.ed is not None and args.es is not None:
        meta = {"ed_frame": args.ed, "es_frame": args.es}
    report, _seg4d, overlays = analyze_volume(v, meta, assets)
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if args.overlays_dir:
        os.makedirs(args.overlays_dir, exist_ok=True)
        for name, png in overlays.items():
            with open(os.path.join(args.overlays_dir, name), "wb") as fh:
                fh.write(png)
    print(f"final {report['final']}  initial {report['initial']}  "
          f"expert_used {report['expert_used']}")
    print(f"elapsed {report['elapsed_seconds']:.2f}s")
    print(f"report {args.out}")
    return 0


def cmd_features(args) -> int:
    with open(args.labels, "rb") as fh:
        v = read_nifti(fh.read())
    lab = LabelVolume(v.data, v.spacing)
    if not lab.is_4d:
        raise ValueError("need a 4D label volume with at least two frames")
    ed, es = args.ed, args.es
    seg4d = stack_phases(lab.frame(ed), lab.frame(es))
    fv = extract_features(seg4d)
    text = features_csv([(os.path.basename(args.labels), fv)])
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"features {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval(args) -> int:
    cases = load_cohort(args.data, args.limit)
    with open(args.seg, "rb") as fh:
        net, _training_meta = load_checkpoint(fh.read())
    bundle = None
    if args.clf:
        with open(args.clf, "rb") as fh:
            bundle = load_bundle(fh.read())
    rp = RoiParams(patch=args.patch, target_depth=args.depth,
                   depth_stride=args.depth)
    dices = []
    confusion = np.zeros((5, 5), dtype=np.int64)
    for case in cases:
        norm = normalize_intensity(case.image)
        if args.no_roi:
            center = (case.image.dims[0] // 2, case.image.dims[1] // 2)
        else:
            center, _ = locate_lv_center(norm, rp)
        plan = plan_crops(case.image.dims[:3], center, rp)
        results = predict_frames(net, norm, plan,
                                 [case.ed_frame, case.es_frame])
        restored = [restore_to_original(lcca(lab), plan) for _p, lab in results]
        seg4d = stack_phases(restored[0], restored[1])
        truth4d = stack_phases(case.truth.frame(case.ed_frame),
                               case.truth.frame(case.es_frame))
        dices.append(hard_dice(seg4d.labels, truth4d.labels))
        if bundle is not None:
            fv = extract_features(seg4d)
            pred = two_stage_predict(fv.values, bundle).final
            confusion[label_index(case.label), label_index(pred)] += 1
    mean_dice = np.mean(dices, axis=0)
    roi_state = "off" if args.no_roi else "on"
    print(f"eval cases={len(cases)} roi={roi_state}")
    print(_dice_table(mean_dice))
    if bundle is not None:
        names = [l.value for l in CLASS_ORDER]
        print("confusion (rows=truth, cols=predicted)")
        print("        " + " ".join(f"{n:>5}" for n in names))
        for i, n in enumerate(names):
            print(f"{n:>6}  " + " ".join(f"{confusion[i, j]:>5}" for j in range(5)))
        acc = confusion.trace() / confusion.sum() if confusion.sum() else 0.0
        print(f"accuracy {acc:.4f}")
    return 0


def cmd_serve(args) -> int:
    from .service.app import ServiceConfig, serve

    base = ServiceConfig.from_env()
    config = ServiceConfig(
        data_dir=args.data_dir or base.data_dir,
        seg_model=args.seg or base.seg_model,
        clf_model=args.clf or base.clf_model,
        upload_cap_bytes=base.upload_cap_bytes,
        token_ttl_seconds=base.token_ttl_seconds,
        host=args.host or base.host,
        port=args.port if args.port is not None else base.port,
    )
    serve(config)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cardiokit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="emit a synthetic labeled cohort")
    p.add_argument("--per-class", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="./cohort")
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("train-seg", help="train the segmentation network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="./seg.ckpt")
    p.add_argument("--loss", choices=sorted(LOSS_FLAGS), default="dynamic-focal")
    p.add_argument("--no-roi", action="store_true")
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--patch", type=int, default=64)
    p.add_argument("--depth", type=int, default=8)
    p.add_argument("--levels", type=int, default=2)
    p.add_argument("--base", type=int, default=8)
    p.add_argument("--holdout", type=int, default=0,
                   help="cases reserved for held-out Dice")
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("train-clf", help="train the two-stage classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="./clf.bundle")
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--expert", choices=("es", "ed"), default="es")
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_train_clf)

    p = sub.add_parser("analyze", help="full pipeline on one volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--seg", required=True)
    p.add_argument("--clf", required=True)
    p.add_argument("--ed", type=int, default=None)
    p.add_argument("--es", type=int, default=None)
    p.add_argument("--out", default="./report.json")
    p.add_argument("--overlays-dir", default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("features", help="emit the 20-feature CSV")
    p.add_argument("--labels", required=True)
    p.add_argument("--ed", type=int, default=0)
    p.add_argument("--es", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("eval", help="Dice and confusion matrix on a cohort")
    p.add_argument("--data", required=True)
    p.add_argument("--seg", required=True)
    p.add_argument("--clf", default=None)
    p.add_argument("--no-roi", action="store_true")
    p.add_argument("--patch", type=int, default=64)
    p.add_argument("--depth", type=int, default=8)
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--data-dir", default=None)
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--seg", default=None)
    p.add_argument("--clf", default=None)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as e:
        print(f"error [{e.stage}]: {e.cause}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"error [{type(e).__name__}]: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
