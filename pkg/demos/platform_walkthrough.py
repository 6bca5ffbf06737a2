"""Walk the patient/doctor flow against an in-process service instance.

Trains throwaway models on small phantoms, then drives the HTTP API exactly
as the two clients would: the patient registers, uploads a study, runs the
analysis, and shares the report; the doctor reads it and leaves a comment;
the patient picks the comment up as a notification.  State lands in a
temporary directory that is removed at the end.
"""
import json
import shutil
import tempfile

import numpy as np

from fastapi.testclient import TestClient

from cardiokit.classify import DiagnosisLabel, train_bundle
from cardiokit.features import extract_features
from cardiokit.forest import ForestParams
from cardiokit.losses import LossConfig
from cardiokit.nifti import write_nifti_gz
from cardiokit.phantom import PhantomSpec, generate_phantom
from cardiokit.roi import RoiParams, apply_crop, plan_crops
from cardiokit.service.app import ServiceConfig, create_app
from cardiokit.service.pipeline import ModelAssets
from cardiokit.train import TrainConfig, train
from cardiokit.unet import NetConfig, UNet
from cardiokit.volume import LabelVolume, normalize_intensity

SMALL = dict(dims=(64, 64, 6, 4), r_ed_px=10.0, wall_base_mm=7.0,
             center_jitter_px=2.0)


def small_phantom(archetype, seed):
    return generate_phantom(PhantomSpec(archetype=archetype, seed=seed, **SMALL))


def build_assets():
    print("training throwaway models on small phantoms ...")
    rp = RoiParams(r_min=4, r_max=20, patch=32, target_depth=8, depth_stride=8)
    pairs, features, labels = [], [], []
    for i, archetype in enumerate(DiagnosisLabel):
        for j in range(2):
            case = small_phantom(archetype, seed=10 * i + j)
            norm = normalize_intensity(case.image)
            lv = np.argwhere(case.truth.frame(case.meta.ed_frame).labels == 3)
            center = (int(lv[:, 0].mean()), int(lv[:, 1].mean()))
            plan = plan_crops(case.image.dims[:3], center, rp)
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
    net = UNet(NetConfig(levels=2, base_channels=8), rng_seed=0)
    net, _ = train(net, pairs, TrainConfig(epochs=3, batch_size=4, lr0=2e-3),
                   LossConfig(kind="dynamic_focal_dice"))
    bundle = train_bundle(np.stack(features), labels,
                          ForestParams(n_trees=50, rng_seed=0))
    return ModelAssets(net=net, bundle=bundle, roi=rp)


def step(label, response):
    body = response.json() if response.content else {}
    print(f"  {label}: {response.status_code}")
    return body


def main():
    data_dir = tempfile.mkdtemp(prefix="cardiokit_demo_")
    client = TestClient(create_app(ServiceConfig(data_dir=data_dir),
                                   assets=build_assets()))
    print(f"service up, state in {data_dir}\n")

    print("patient flow")
    step("register patient", client.post("/api/auth/register", json={
        "name": "morgan", "password": "demo-pass-1", "role": "patient"}))
    step("register doctor", client.post("/api/auth/register", json={
        "name": "dr-lee", "password": "demo-pass-2", "role": "doctor"}))
    p = client.post("/api/auth/login",
                    json={"name": "morgan", "password": "demo-pass-1"}).json()
    d = client.post("/api/auth/login",
                    json={"name": "dr-lee", "password": "demo-pass-2"}).json()
    ph = {"Authorization": f"Bearer {p['token']}"}
    dh = {"Authorization": f"Bearer {d['token']}"}

    case = small_phantom(DiagnosisLabel.DCM, seed=99)
    study = step("upload study", client.post(
        "/api/studies", headers=ph,
        files={"volume": ("study.nii.gz", write_nifti_gz(case.image))},
        data={"meta": json.dumps({"ed_frame": case.meta.ed_frame,
                                  "es_frame": case.meta.es_frame})}))
    sid = study["id"]

    report = step("analyze", client.post(f"/api/studies/{sid}/analyze", headers=ph))
    print(f"    -> {report['final']} in {report['elapsed_seconds']:.2f}s, "
          f"probabilities {dict((k, round(v, 2)) for k, v in report['probabilities'].items())}")
    step("share with doctor", client.post(
        f"/api/studies/{sid}/share", headers=ph, json={"doctor_id": d["user"]["id"]}))

    print("doctor flow")
    step("read report", client.get(f"/api/studies/{sid}/report", headers=dh))
    step("comment", client.post(f"/api/reports/{sid}/comments", headers=dh, json={
        "body": "ventricular dilation is consistent; recommend follow-up",
        "kind": "recommendation"}))

    print("patient checks notifications")
    notes = client.get("/api/notifications", headers=ph).json()
    for n in notes:
        print(f"    {n['author_name']}: {n['body']}")

    shutil.rmtree(data_dir)
    print("\ndone, state removed")


if __name__ == "__main__":
    main()
