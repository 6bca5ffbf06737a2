"""HTTP/JSON API: accounts, study upload, analysis, sharing, comments.

All request bodies are JSON except the multipart upload.  Errors come back
as {"error": ..., "stage"?: ...} with conventional status codes: 400 parse,
401 auth, 403 role/access, 404 missing, 409 conflict, 413 too large,
422 failed analysis.  Auth is a bearer token from /api/auth/login.
"""
from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass

from fastapi import FastAPI, File, Form, Request, UploadFile
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response

from ..nifti import NiftiError, read_nifti, write_nifti
from .auth import Accounts, BadCredentials, ExpiredSession, NameTaken
from .pipeline import ModelAssets, PipelineError, analyze_volume, load_assets
from .storage import DocumentStore, new_id

COMMENT_KINDS = ("recommendation", "model_feedback")


@dataclass(frozen=True)
class ServiceConfig:
    data_dir: str = "./cardiokit_data"
    seg_model: str | None = None
    clf_model: str | None = None
    upload_cap_bytes: int = 64 * 2**20
    token_ttl_seconds: float = 24 * 3600
    host: str = "127.0.0.1"
    port: int = 8000

    @classmethod
    def from_env(cls, env=None) -> "ServiceConfig":
        env = os.environ if env is None else env
        return cls(
            data_dir=env.get("CARDIOKIT_DATA_DIR", "./cardiokit_data"),
            seg_model=env.get("CARDIOKIT_SEG_MODEL"),
            clf_model=env.get("CARDIOKIT_CLF_MODEL"),
            upload_cap_bytes=int(float(env.get("CARDIOKIT_UPLOAD_CAP_MB", "64")) * 2**20),
            token_ttl_seconds=float(env.get("CARDIOKIT_TOKEN_TTL_HOURS", "24")) * 3600,
            host=env.get("CARDIOKIT_HOST", "127.0.0.1"),
            port=int(env.get("CARDIOKIT_PORT", "8000")),
        )


class ApiError(Exception):
    def __init__(self, status: int, error: str, stage: str | None = None):
        super().__init__(error)
        self.status = status
        self.error = error
        self.stage = stage


def _study_view(study: dict) -> dict:
    out = {k: v for k, v in study.items() if k != "owner_name"}
    out["owner_name"] = study.get("owner_name", "")
    return out


def create_app(config: ServiceConfig | None = None,
               assets: ModelAssets | None = None) -> FastAPI:
    config = config or ServiceConfig.from_env()
    store = DocumentStore(config.data_dir)
    accounts = Accounts(store, token_ttl=config.token_ttl_seconds)
    if assets is None and config.seg_model and config.clf_model:
        assets = load_assets(config.seg_model, config.clf_model)

    app = FastAPI(title="cardiokit", docs_url=None, redoc_url=None)
    app.state.store = store
    app.state.accounts = accounts
    app.state.assets = assets
    app.state.config = config
    analyze_guard = threading.Lock()
    analyze_locks: dict[str, threading.Lock] = {}

    def _analyze_lock(study_id: str) -> threading.Lock:
        with analyze_guard:
            lock = analyze_locks.get(study_id)
            if lock is None:
                lock = analyze_locks[study_id] = threading.Lock()
            return lock

    @app.exception_handler(ApiError)
    async def _api_error(_req, exc: ApiError):
        body = {"error": exc.error}
        if exc.stage:
            body["stage"] = exc.stage
        return JSONResponse(body, status_code=exc.status)

    @app.exception_handler(RequestValidationError)
    async def _validation_error(_req, exc: RequestValidationError):
        return JSONResponse({"error": f"bad request: {exc.errors()[:1]}"}, status_code=400)

    async def _json_body(request: Request) -> dict:
        try:
            data = await request.json()
        except Exception:
            raise ApiError(400, "body must be valid JSON")
        if not isinstance(data, dict):
            raise ApiError(400, "body must be a JSON object")
        return data

    def _auth(request: Request) -> dict:
        header = request.headers.get("authorization", "")
        if not header.lower().startswith("bearer "):
            raise ApiError(401, "missing bearer token")
        try:
            return accounts.resolve(header[7:].strip())
        except ExpiredSession as e:
            raise ApiError(401, f"session invalid: {e}")

    def _require_role(user: dict, role: str) -> None:
        if user["role"] != role:
            raise ApiError(403, f"requires {role} role")

    def _get_study(study_id: str) -> dict:
        study = store.get("studies", study_id) if study_id else None
        if study is None:
            raise ApiError(404, "no such study")
        return study

    def _require_view(study: dict, user: dict) -> None:
        if user["id"] == study["owner_id"]:
            return
        if user["role"] == "doctor" and user["id"] in study["shared_with"]:
            return
        raise ApiError(403, "no access to this study")

    def _require_owner(study: dict, user: dict) -> None:
        if user["id"] != study["owner_id"]:
            raise ApiError(403, "only the study owner may do this")

    # auth

    @app.post("/api/auth/register")
    async def register(request: Request):
        data = await _json_body(request)
        try:
            user = accounts.register(
                str(data.get("name", "")),
                str(data.get("password", "")),
                str(data.get("role", "")),
                data.get("profile_link"),
            )
        except NameTaken:
            raise ApiError(409, "name already registered")
        except ValueError as e:
            raise ApiError(400, str(e))
        return {"id": user["id"], "name": user["name"], "role": user["role"]}

    @app.post("/api/auth/login")
    async def login(request: Request):
        data = await _json_body(request)
        try:
            token, user = accounts.login(
                str(data.get("name", "")), str(data.get("password", ""))
            )
        except BadCredentials:
            raise ApiError(401, "bad credentials")
        return {
            "token": token,
            "user": {"id": user["id"], "name": user["name"], "role": user["role"]},
        }

    @app.get("/api/doctors")
    def doctors():
        return accounts.doctors()

    # studies

    @app.post("/api/studies")
    def upload_study(request: Request, volume: UploadFile = File(...),
                     meta: str = Form("{}")):
        user = _auth(request)
        _require_role(user, "patient")
        data = volume.file.read(config.upload_cap_bytes + 1)
        if len(data) > config.upload_cap_bytes:
            raise ApiError(413, "volume exceeds the upload size cap")
        try:
            meta_dict = json.loads(meta) if meta else {}
        except ValueError:
            raise ApiError(400, "meta must be valid JSON")
        if not isinstance(meta_dict, dict):
            raise ApiError(400, "meta must be a JSON object")
        try:
            v = read_nifti(data)
        except NiftiError as e:
            raise ApiError(400, f"volume parse failed: {e}")
        ed, es = meta_dict.get("ed_frame"), meta_dict.get("es_frame")
        if (ed is None) != (es is None):
            raise ApiError(400, "provide both ed_frame and es_frame or neither")
        if ed is not None:
            if not all(isinstance(f, int) and not isinstance(f, bool) for f in (ed, es)):
                raise ApiError(400, "ed_frame and es_frame must be integers")
            if ed == es:
                raise ApiError(400, "ed_frame and es_frame must differ")
            if not (0 <= ed < v.dims[3] and 0 <= es < v.dims[3]):
                raise ApiError(400, f"frame indices out of range for T={v.dims[3]}")
        study_id = new_id()
        store.put_blob("volumes", study_id, data)
        study = {
            "id": study_id,
            "owner_id": user["id"],
            "owner_name": user["name"],
            "status": "uploaded",
            "meta": {
                "ed_frame": ed,
                "es_frame": es,
                "patient_id": str(meta_dict.get("patient_id", "")),
            },
            "dims": list(v.dims),
            "spacing": [v.spacing.dx, v.spacing.dy, v.spacing.dz],
            "shared_with": [],
            "error": None,
            "created": time.time(),
        }
        store.put("studies", study_id, study)
        return _study_view(study)

    @app.get("/api/studies")
    def list_studies(request: Request):
        user = _auth(request)
        out = []
        for sid in store.ids("studies"):
            study = store.get("studies", sid)
            if study is None:
                continue
            mine = study["owner_id"] == user["id"]
            shared = user["role"] == "doctor" and user["id"] in study["shared_with"]
            if mine or shared:
                out.append(_study_view(study))
        out.sort(key=lambda s: s["created"])
        return out

    @app.get("/api/studies/{study_id}")
    def get_study(study_id: str, request: Request):
        user = _auth(request)
        study = _get_study(study_id)
        _require_view(study, user)
        return _study_view(study)

    @app.post("/api/studies/{study_id}/analyze")
    def analyze_study(study_id: str, request: Request):
        user = _auth(request)
        study = _get_study(study_id)
        _require_owner(study, user)
        if assets is None:
            raise ApiError(503, "analysis models are not configured")
        with _analyze_lock(study_id):
            study = _get_study(study_id)
            if study["status"] == "analyzed":
                return store.get("reports", study_id)
            if study["status"] == "failed":
                err = study["error"] or {}
                raise ApiError(422, err.get("error", "analysis failed"),
                               stage=err.get("stage"))
            data = store.get_blob("volumes", study_id)
            if data is None:
                raise ApiError(404, "volume bytes are missing")
            try:
                v = read_nifti(data)
            except NiftiError as e:
                raise ApiError(500, f"stored volume unreadable: {e}")
            try:
                report, seg4d, overlays = analyze_volume(v, study["meta"], assets)
            except PipelineError as e:
                study["status"] = "failed"
                study["error"] = {"stage": e.stage, "error": str(e.cause)}
                store.put("studies", study_id, study)
                raise ApiError(422, str(e.cause), stage=e.stage)
            report = {"study_id": study_id, "created": time.time(), **report}
            store.put_blob("segmentations", study_id, write_nifti(seg4d))
            for name, png in overlays.items():
                store.put_blob("overlays", f"{study_id}.{name}", png)
            store.put("reports", study_id, report)
            study["status"] = "analyzed"
            store.put("studies", study_id, study)
            return report

    @app.get("/api/studies/{study_id}/report")
    def get_report(study_id: str, request: Request):
        user = _auth(request)
        study = _get_study(study_id)
        _require_view(study, user)
        report = store.get("reports", study_id)
        if report is None:
            raise ApiError(404, "study has no report yet")
        return report

    @app.get("/api/studies/{study_id}/overlays/{name}")
    def get_overlay(study_id: str, name: str, request: Request):
        user = _auth(request)
        study = _get_study(study_id)
        _require_view(study, user)
        png = store.get_blob("overlays", f"{study_id}.{name}")
        if png is None:
            raise ApiError(404, "no such overlay")
        return Response(content=png, media_type="image/png")

    @app.get("/api/studies/{study_id}/segmentation")
    def get_segmentation(study_id: str, request: Request):
        user = _auth(request)
        study = _get_study(study_id)
        _require_view(study, user)
        blob = store.get_blob("segmentations", study_id)
        if blob is None:
            raise ApiError(404, "study has no segmentation yet")
        return Response(content=blob, media_type="application/octet-stream")

    @app.post("/api/studies/{study_id}/share")
    async def share_study(study_id: str, request: Request):
        user = _auth(request)
        study = _get_study(study_id)
        _require_owner(study, user)
        data = await _json_body(request)
        doctor = accounts.get_user(str(data.get("doctor_id", "")))
        if doctor is None or doctor["role"] != "doctor":
            raise ApiError(404, "no such doctor")
        if doctor["id"] not in study["shared_with"]:
            study["shared_with"].append(doctor["id"])
            store.put("studies", study_id, study)
        return _study_view(study)

    @app.delete("/api/studies/{study_id}/share/{doctor_id}")
    def revoke_share(study_id: str, doctor_id: str, request: Request):
        user = _auth(request)
        study = _get_study(study_id)
        _require_owner(study, user)
        if doctor_id in study["shared_with"]:
            study["shared_with"].remove(doctor_id)
            store.put("studies", study_id, study)
        return _study_view(study)

    @app.delete("/api/studies/{study_id}")
    def delete_study(study_id: str, request: Request):
        user = _auth(request)
        study = _get_study(study_id)
        _require_owner(study, user)
        for cid in store.ids("comments"):
            c = store.get("comments", cid)
            if c and c["study_id"] == study_id:
                store.delete("comments", cid)
        for name in store.blob_ids("overlays"):
            if name.startswith(study_id + "."):
                store.delete_blob("overlays", name)
        store.delete("reports", study_id)
        store.delete_blob("segmentations", study_id)
        store.delete_blob("volumes", study_id)
        store.delete("studies", study_id)
        return {"deleted": study_id}

    # comments and notifications

    @app.post("/api/reports/{study_id}/comments")
    async def add_comment(study_id: str, request: Request):
        user = _auth(request)
        _require_role(user, "doctor")
        study = _get_study(study_id)
        _require_view(study, user)
        if store.get("reports", study_id) is None:
            raise ApiError(404, "no such report")
        data = await _json_body(request)
        body = str(data.get("body", "")).strip()
        kind = data.get("kind", "recommendation")
        if not body:
            raise ApiError(400, "comment body must be non-empty")
        if kind not in COMMENT_KINDS:
            raise ApiError(400, f"kind must be one of {COMMENT_KINDS}")
        comment = {
            "id": new_id(),
            "study_id": study_id,
            "owner_id": study["owner_id"],
            "author_id": user["id"],
            "author_name": user["name"],
            "body": body,
            "kind": kind,
            "created": time.time(),
            "unread": True,
        }
        store.put("comments", comment["id"], comment)
        return comment

    @app.get("/api/reports/{study_id}/comments")
    def list_comments(study_id: str, request: Request):
        user = _auth(request)
        study = _get_study(study_id)
        _require_view(study, user)
        out = [
            c
            for cid in store.ids("comments")
            if (c := store.get("comments", cid)) and c["study_id"] == study_id
        ]
        out.sort(key=lambda c: c["created"])
        return out

    @app.get("/api/notifications")
    def notifications(request: Request):
        user = _auth(request)
        _require_role(user, "patient")
        out = []
        for cid in store.ids("comments"):
            c = store.get("comments", cid)
            if c and c["owner_id"] == user["id"] and c["unread"]:
                c["unread"] = False
                store.put("comments", cid, c)
                out.append(c)
        out.sort(key=lambda c: c["created"])
        return out

    return app


def serve(config: ServiceConfig | None = None) -> None:
    """Run the API under uvicorn (blocking)."""
    import uvicorn

    config = config or ServiceConfig.from_env()
    uvicorn.run(create_app(config), host=config.host, port=config.port)
