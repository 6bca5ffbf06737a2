"""HTTP service contract: auth, upload, analyze, share, comments,
notifications, deletion, persistence across restarts, and secret hygiene."""
import json
import os
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from cardiokit.classify import DiagnosisLabel, train_bundle, save_bundle
from cardiokit.forest import ForestParams
from cardiokit.nifti import read_nifti, write_nifti_gz
from cardiokit.phantom import PhantomSpec, generate_phantom
from cardiokit.roi import RoiParams
from cardiokit.service.app import ServiceConfig, create_app
from cardiokit.service.pipeline import load_assets
from cardiokit.service.storage import DocumentStore
from cardiokit.unet import NetConfig, UNet, save_checkpoint
from cardiokit.volume import Volume4D, VoxelSpacing

CLASS_ORDER_NAMES = ("DCM", "MINF", "HCM", "NOR", "ARV")


def _tiny_bundle():
    rng = np.random.default_rng(5)
    X, labels = [], []
    for name in CLASS_ORDER_NAMES:
        c = CLASS_ORDER_NAMES.index(name)
        for _ in range(6):
            row = rng.normal(0, 0.3, 20)
            row[0] = c * 5.0
            row[13] = 8.0 - 4.0 * (name == "DCM")
            row[17] = 3.0 - 2.5 * (name == "DCM")
            X.append(np.abs(row) if c < 2 else row)
            labels.append(DiagnosisLabel(name))
    X = np.stack(X)
    X[:, :6] = np.abs(X[:, :6])
    X[:, 6:8] = np.clip(X[:, 6:8], 0, 99)
    return train_bundle(X, labels, ForestParams(n_trees=10, rng_seed=1))


@pytest.fixture(scope="session")
def model_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("models")
    net = UNet(NetConfig(levels=2, base_channels=4), rng_seed=0)
    seg = root / "seg.ckpt"
    seg.write_bytes(save_checkpoint(net))
    clf = root / "clf.bundle"
    clf.write_bytes(save_bundle(_tiny_bundle()))
    return str(seg), str(clf)


@pytest.fixture(scope="session")
def phantom_nifti():
    spec = PhantomSpec(
        archetype=DiagnosisLabel.NOR,
        dims=(64, 64, 6, 4),
        r_ed_px=10.0,
        wall_base_mm=7.0,
        center_jitter_px=2.0,
        seed=11,
    )
    case = generate_phantom(spec)
    return write_nifti_gz(case.image), case.meta


SMALL_ROI = RoiParams(r_min=4, r_max=20, patch=32, target_depth=8, depth_stride=8)


def make_app(data_dir, model_files, **overrides):
    seg, clf = model_files
    config = ServiceConfig(
        data_dir=str(data_dir),
        seg_model=seg,
        clf_model=clf,
        **overrides,
    )
    assets = load_assets(seg, clf, roi=SMALL_ROI)
    return TestClient(create_app(config, assets=assets))


def register_and_login(client, name, role, password="open-sesame-9"):
    r = client.post(
        "/api/auth/register",
        json={"name": name, "password": password, "role": role},
    )
    assert r.status_code == 200, r.text
    r = client.post("/api/auth/login", json={"name": name, "password": password})
    assert r.status_code == 200, r.text
    body = r.json()
    return body["token"], body["user"]


def bearer(token):
    return {"Authorization": f"Bearer {token}"}


def upload(client, token, nifti_bytes, meta=None):
    return client.post(
        "/api/studies",
        headers=bearer(token),
        files={"volume": ("study.nii.gz", nifti_bytes, "application/octet-stream")},
        data={"meta": json.dumps(meta or {})},
    )


# auth

def test_register_login_and_bad_credentials(tmp_path, model_files):
    client = make_app(tmp_path, model_files)
    token, user = register_and_login(client, "ada", "patient")
    assert user["role"] == "patient"
    r = client.get("/api/studies", headers=bearer(token))
    assert r.status_code == 200 and r.json() == []
    r = client.post("/api/auth/login", json={"name": "ada", "password": "wrong"})
    assert r.status_code == 401
    assert "token" not in r.json()
    r = client.post(
        "/api/auth/register",
        json={"name": "ada", "password": "x1234567", "role": "doctor"},
    )
    assert r.status_code == 409


def test_register_validation(tmp_path, model_files):
    client = make_app(tmp_path, model_files)
    bad = [
        {"name": "", "password": "pw123456", "role": "patient"},
        {"name": "bob", "password": "", "role": "patient"},
        {"name": "bob", "password": "pw123456", "role": "wizard"},
    ]
    for payload in bad:
        assert client.post("/api/auth/register", json=payload).status_code == 400
    r = client.post("/api/auth/register", content=b"not json{",
                    headers={"Content-Type": "application/json"})
    assert r.status_code == 400


def test_expired_token_rejected(tmp_path, model_files):
    client = make_app(tmp_path, model_files, token_ttl_seconds=0.05)
    token, _ = register_and_login(client, "eph", "patient")
    time.sleep(0.12)
    r = client.get("/api/studies", headers=bearer(token))
    assert r.status_code == 401


def test_every_protected_endpoint_requires_auth(tmp_path, model_files):
    client = make_app(tmp_path, model_files)
    routes = [
        ("GET", "/api/studies"),
        ("GET", "/api/studies/abc"),
        ("POST", "/api/studies/abc/analyze"),
        ("GET", "/api/studies/abc/report"),
        ("GET", "/api/studies/abc/overlays/x.png"),
        ("GET", "/api/studies/abc/segmentation"),
        ("POST", "/api/studies/abc/share"),
        ("DELETE", "/api/studies/abc/share/def"),
        ("DELETE", "/api/studies/abc"),
        ("POST", "/api/reports/abc/comments"),
        ("GET", "/api/reports/abc/comments"),
        ("GET", "/api/notifications"),
    ]
    for method, path in routes:
        r = client.request(method, path)
        assert r.status_code == 401, (method, path, r.status_code)
        r = client.request(method, path, headers=bearer("0" * 32))
        assert r.status_code == 401, (method, path, r.status_code)
    # multipart upload checks auth before reading the body
    r = client.post("/api/studies", files={"volume": ("x", b"zz")})
    assert r.status_code == 401
    # public endpoints stay public
    assert client.get("/api/doctors").status_code == 200


# upload

def test_upload_flow_and_role_gate(tmp_path, model_files, phantom_nifti):
    client = make_app(tmp_path, model_files)
    nifti, meta = phantom_nifti
    p_token, _ = register_and_login(client, "pat", "patient")
    d_token, _ = register_and_login(client, "doc", "doctor")

    r = upload(client, p_token, nifti,
               {"ed_frame": meta.ed_frame, "es_frame": meta.es_frame})
    assert r.status_code == 200, r.text
    study = r.json()
    assert study["status"] == "uploaded"
    assert study["dims"] == [64, 64, 6, 4]

    r = client.get("/api/studies", headers=bearer(p_token))
    assert [s["id"] for s in r.json()] == [study["id"]]

    r = upload(client, d_token, nifti)
    assert r.status_code == 403


def test_corrupt_upload_leaves_no_record(tmp_path, model_files):
    client = make_app(tmp_path, model_files)
    token, _ = register_and_login(client, "pat", "patient")
    r = upload(client, token, b"definitely not nifti")
    assert r.status_code == 400
    assert client.get("/api/studies", headers=bearer(token)).json() == []
    store = DocumentStore(str(tmp_path))
    assert store.ids("studies") == []
    assert store.blob_ids("volumes") == []


def test_upload_cap(tmp_path, model_files, phantom_nifti):
    client = make_app(tmp_path, model_files, upload_cap_bytes=1000)
    token, _ = register_and_login(client, "pat", "patient")
    r = upload(client, token, phantom_nifti[0])
    assert r.status_code == 413


def test_upload_frame_validation(tmp_path, model_files, phantom_nifti):
    client = make_app(tmp_path, model_files)
    token, _ = register_and_login(client, "pat", "patient")
    nifti = phantom_nifti[0]
    assert upload(client, token, nifti, {"ed_frame": 0}).status_code == 400
    assert upload(client, token, nifti, {"ed_frame": 0, "es_frame": 0}).status_code == 400
    assert upload(client, token, nifti, {"ed_frame": 0, "es_frame": 99}).status_code == 400
    assert upload(client, token, nifti, {"ed_frame": "0", "es_frame": 1}).status_code == 400


# analyze

def analyzed_study(client, token, phantom_nifti, meta_override=None):
    nifti, meta = phantom_nifti
    meta_dict = {"ed_frame": meta.ed_frame, "es_frame": meta.es_frame}
    if meta_override is not None:
        meta_dict = meta_override
    study = upload(client, token, nifti, meta_dict).json()
    r = client.post(f"/api/studies/{study['id']}/analyze", headers=bearer(token))
    assert r.status_code == 200, r.text
    return study, r.json()


def test_analyze_report_contract(tmp_path, model_files, phantom_nifti):
    client = make_app(tmp_path, model_files)
    token, _ = register_and_login(client, "pat", "patient")
    study, report = analyzed_study(client, token, phantom_nifti)

    assert report["final"] in CLASS_ORDER_NAMES
    assert report["initial"] in CLASS_ORDER_NAMES
    probs = report["probabilities"]
    assert sorted(probs) == sorted(CLASS_ORDER_NAMES)
    assert abs(sum(probs.values()) - 1.0) <= 1e-6
    assert len(report["features"]) == 20
    assert report["explanation"]
    assert report["elapsed_seconds"] > 0
    assert len(report["overlays"]["ed"]) == 6
    assert client.get(f"/api/studies/{study['id']}",
                      headers=bearer(token)).json()["status"] == "analyzed"

    name = report["overlays"]["ed"][0]
    r = client.get(f"/api/studies/{study['id']}/overlays/{name}",
                   headers=bearer(token))
    assert r.status_code == 200
    assert r.content[:8] == b"\x89PNG\r\n\x1a\n"

    r = client.get(f"/api/studies/{study['id']}/segmentation",
                   headers=bearer(token))
    assert r.status_code == 200
    seg = read_nifti(r.content)
    assert seg.dims == (64, 64, 6, 2)


def test_analyze_is_idempotent(tmp_path, model_files, phantom_nifti):
    client = make_app(tmp_path, model_files)
    token, _ = register_and_login(client, "pat", "patient")
    study, first = analyzed_study(client, token, phantom_nifti)
    r = client.post(f"/api/studies/{study['id']}/analyze", headers=bearer(token))
    assert r.status_code == 200
    assert r.json() == first


def test_blank_volume_fails_at_roi_stage(tmp_path, model_files):
    client = make_app(tmp_path, model_files)
    token, _ = register_and_login(client, "pat", "patient")
    blank = Volume4D(np.zeros((64, 64, 6, 4), dtype=np.float32),
                     VoxelSpacing(1.5, 1.5, 10.0))
    nifti = write_nifti_gz(blank)
    study = upload(client, token, nifti, {"ed_frame": 0, "es_frame": 2}).json()
    r = client.post(f"/api/studies/{study['id']}/analyze", headers=bearer(token))
    assert r.status_code == 422
    assert r.json()["stage"] == "roi"
    r = client.get(f"/api/studies/{study['id']}", headers=bearer(token))
    assert r.json()["status"] == "failed"
    # analyzing a failed study reports the stored failure, not a rerun
    r = client.post(f"/api/studies/{study['id']}/analyze", headers=bearer(token))
    assert r.status_code == 422
    assert r.json()["stage"] == "roi"


def test_analyze_requires_owner(tmp_path, model_files, phantom_nifti):
    client = make_app(tmp_path, model_files)
    p1, _ = register_and_login(client, "p1", "patient")
    p2, _ = register_and_login(client, "p2", "patient")
    nifti, meta = phantom_nifti
    study = upload(client, p1, nifti,
                   {"ed_frame": meta.ed_frame, "es_frame": meta.es_frame}).json()
    r = client.post(f"/api/studies/{study['id']}/analyze", headers=bearer(p2))
    assert r.status_code == 403


# sharing, comments, notifications

def test_share_comment_notification_flow(tmp_path, model_files, phantom_nifti):
    client = make_app(tmp_path, model_files)
    p_token, patient = register_and_login(client, "pat", "patient")
    d_token, doctor = register_and_login(client, "doc", "doctor")
    study, _report = analyzed_study(client, p_token, phantom_nifti)
    sid = study["id"]

    # before sharing the doctor can see nothing
    assert client.get(f"/api/studies/{sid}/report",
                      headers=bearer(d_token)).status_code == 403
    r = client.post(f"/api/studies/{sid}/share", headers=bearer(p_token),
                    json={"doctor_id": doctor["id"]})
    assert r.status_code == 200
    assert doctor["id"] in r.json()["shared_with"]

    r = client.get(f"/api/studies/{sid}/report", headers=bearer(d_token))
    assert r.status_code == 200
    assert [s["id"] for s in client.get("/api/studies",
                                        headers=bearer(d_token)).json()] == [sid]

    # share with a patient id -> no such doctor
    r = client.post(f"/api/studies/{sid}/share", headers=bearer(p_token),
                    json={"doctor_id": patient["id"]})
    assert r.status_code == 404

    r = client.post(f"/api/reports/{sid}/comments", headers=bearer(d_token),
                    json={"body": "wall thinning noted", "kind": "recommendation"})
    assert r.status_code == 200
    comment = r.json()

    # exactly once in the owner's notifications; cleared on read
    notes = client.get("/api/notifications", headers=bearer(p_token)).json()
    assert [n["id"] for n in notes] == [comment["id"]]
    assert client.get("/api/notifications", headers=bearer(p_token)).json() == []

    # patient role cannot comment; comment body is validated
    r = client.post(f"/api/reports/{sid}/comments", headers=bearer(p_token),
                    json={"body": "hi"})
    assert r.status_code == 403
    r = client.post(f"/api/reports/{sid}/comments", headers=bearer(d_token),
                    json={"body": "", "kind": "recommendation"})
    assert r.status_code == 400
    r = client.post(f"/api/reports/{sid}/comments", headers=bearer(d_token),
                    json={"body": "x", "kind": "gossip"})
    assert r.status_code == 400

    # revoke -> access gone
    r = client.delete(f"/api/studies/{sid}/share/{doctor['id']}",
                      headers=bearer(p_token))
    assert r.status_code == 200
    assert client.get(f"/api/studies/{sid}/report",
                      headers=bearer(d_token)).status_code == 403


def test_unshared_doctor_cannot_comment(tmp_path, model_files, phantom_nifti):
    client = make_app(tmp_path, model_files)
    p_token, _ = register_and_login(client, "pat", "patient")
    d_token, _ = register_and_login(client, "doc", "doctor")
    study, _ = analyzed_study(client, p_token, phantom_nifti)
    r = client.post(f"/api/reports/{study['id']}/comments", headers=bearer(d_token),
                    json={"body": "hello", "kind": "recommendation"})
    assert r.status_code == 403


def test_delete_study(tmp_path, model_files, phantom_nifti):
    client = make_app(tmp_path, model_files)
    p_token, patient = register_and_login(client, "pat", "patient")
    d_token, doctor = register_and_login(client, "doc", "doctor")
    study, report = analyzed_study(client, p_token, phantom_nifti)
    sid = study["id"]
    client.post(f"/api/studies/{sid}/share", headers=bearer(p_token),
                json={"doctor_id": doctor["id"]})
    client.post(f"/api/reports/{sid}/comments", headers=bearer(d_token),
                json={"body": "note", "kind": "model_feedback"})

    # doctor cannot delete someone else's study
    assert client.delete(f"/api/studies/{sid}",
                         headers=bearer(d_token)).status_code == 403
    assert client.delete(f"/api/studies/{sid}",
                         headers=bearer(p_token)).status_code == 200
    assert client.get(f"/api/studies/{sid}",
                      headers=bearer(p_token)).status_code == 404
    assert client.get(f"/api/studies/{sid}/report",
                      headers=bearer(p_token)).status_code == 404
    assert client.delete(f"/api/studies/{sid}",
                         headers=bearer(p_token)).status_code == 404
    assert client.get("/api/notifications", headers=bearer(p_token)).json() == []

    store = DocumentStore(str(tmp_path))
    assert store.ids("studies") == []
    assert store.ids("reports") == []
    assert store.ids("comments") == []
    assert store.blob_ids("volumes") == []
    assert store.blob_ids("segmentations") == []
    assert store.blob_ids("overlays") == []


# persistence and hygiene

def test_kill_and_restart_between_every_step(tmp_path, model_files, phantom_nifti):
    """A fresh app instance over the same data directory sees every
    committed record; bearer tokens survive because sessions persist."""
    nifti, meta = phantom_nifti

    client = make_app(tmp_path, model_files)
    p_token, _ = register_and_login(client, "pat", "patient")
    d_token, doctor = register_and_login(client, "doc", "doctor")

    client = make_app(tmp_path, model_files)  # restart
    study = upload(client, p_token, nifti,
                   {"ed_frame": meta.ed_frame, "es_frame": meta.es_frame}).json()

    client = make_app(tmp_path, model_files)  # restart
    r = client.post(f"/api/studies/{study['id']}/analyze", headers=bearer(p_token))
    assert r.status_code == 200
    report = r.json()

    client = make_app(tmp_path, model_files)  # restart
    assert client.get(f"/api/studies/{study['id']}/report",
                      headers=bearer(p_token)).json() == report
    r = client.post(f"/api/studies/{study['id']}/share", headers=bearer(p_token),
                    json={"doctor_id": doctor["id"]})
    assert r.status_code == 200

    client = make_app(tmp_path, model_files)  # restart
    r = client.post(f"/api/reports/{study['id']}/comments", headers=bearer(d_token),
                    json={"body": "persisted", "kind": "recommendation"})
    assert r.status_code == 200

    client = make_app(tmp_path, model_files)  # restart
    notes = client.get("/api/notifications", headers=bearer(p_token)).json()
    assert len(notes) == 1 and notes[0]["body"] == "persisted"


def test_no_plaintext_secrets_on_disk(tmp_path, model_files):
    client = make_app(tmp_path, model_files)
    password = "hunter2-very-secret"
    r = client.post("/api/auth/register",
                    json={"name": "scan", "password": password, "role": "patient"})
    assert r.status_code == 200
    token = client.post("/api/auth/login",
                        json={"name": "scan", "password": password}).json()["token"]
    assert client.get("/api/studies", headers=bearer(token)).status_code == 200

    hits = []
    for dirpath, _dirs, files in os.walk(tmp_path):
        for name in files:
            blob = open(os.path.join(dirpath, name), "rb").read()
            if password.encode() in blob or token.encode() in blob:
                hits.append(os.path.join(dirpath, name))
    assert hits == []


def test_doctor_listing_is_public_and_complete(tmp_path, model_files):
    client = make_app(tmp_path, model_files)
    register_and_login(client, "dr-b", "doctor")
    register_and_login(client, "dr-a", "doctor")
    register_and_login(client, "pat", "patient")
    names = [d["name"] for d in client.get("/api/doctors").json()]
    assert names == ["dr-a", "dr-b"]
