"""Single-directory document store with atomic writes.

One JSON file per record lives at <root>/<collection>/<id>.json; binary
payloads (volumes, overlays) at <root>/<collection>/<id>.bin.  Every write
lands in a temp file in the same directory and is moved into place with
os.replace, so a reader never sees a half-written file and a kill between
any two operations preserves exactly the committed records.  Leftover temp
files from an interrupted write are swept on open.
"""
from __future__ import annotations

import json
import os
import re
import secrets
import threading

_ID_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]{0,127}$")


class BadRecordId(Exception):
    """Record id contains characters that are not filesystem-safe."""


def new_id() -> str:
    return secrets.token_hex(8)


def _check_id(doc_id: str) -> str:
    if not isinstance(doc_id, str) or not _ID_RE.match(doc_id):
        raise BadRecordId(f"bad record id: {doc_id!r}")
    return doc_id


class DocumentStore:
    """Keyed JSON documents and binary blobs, grouped by collection."""

    def __init__(self, root: str):
        self.root = os.path.abspath(root)
        os.makedirs(self.root, exist_ok=True)
        self._guard = threading.Lock()
        self._locks: dict[tuple[str, str], threading.Lock] = {}
        self._sweep_temp_files()

    def _sweep_temp_files(self) -> None:
        for dirpath, _dirs, files in os.walk(self.root):
            for name in files:
                if ".tmp-" in name:
                    try:
                        os.unlink(os.path.join(dirpath, name))
                    except OSError:
                        pass

    def _dir(self, collection: str) -> str:
        _check_id(collection)
        path = os.path.join(self.root, collection)
        os.makedirs(path, exist_ok=True)
        return path

    def _lock_for(self, collection: str, doc_id: str) -> threading.Lock:
        key = (collection, doc_id)
        with self._guard:
            lock = self._locks.get(key)
            if lock is None:
                lock = self._locks[key] = threading.Lock()
            return lock

    def _write_atomic(self, path: str, data: bytes) -> None:
        tmp = f"{path}.tmp-{os.getpid()}-{secrets.token_hex(4)}"
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)

    def put(self, collection: str, doc_id: str, doc: dict) -> None:
        path = os.path.join(self._dir(collection), _check_id(doc_id) + ".json")
        payload = json.dumps(doc, sort_keys=True).encode()
        with self._lock_for(collection, doc_id):
            self._write_atomic(path, payload)

    def get(self, collection: str, doc_id: str) -> dict | None:
        path = os.path.join(self._dir(collection), _check_id(doc_id) + ".json")
        try:
            with open(path, "rb") as fh:
                return json.loads(fh.read())
        except FileNotFoundError:
            return None

    def delete(self, collection: str, doc_id: str) -> bool:
        path = os.path.join(self._dir(collection), _check_id(doc_id) + ".json")
        with self._lock_for(collection, doc_id):
            try:
                os.unlink(path)
                return True
            except FileNotFoundError:
                return False

    def ids(self, collection: str) -> list[str]:
        names = os.listdir(self._dir(collection))
        return sorted(n[:-5] for n in names if n.endswith(".json"))

    def put_blob(self, collection: str, doc_id: str, data: bytes) -> None:
        path = os.path.join(self._dir(collection), _check_id(doc_id) + ".bin")
        with self._lock_for(collection, doc_id):
            self._write_atomic(path, data)

    def get_blob(self, collection: str, doc_id: str) -> bytes | None:
        path = os.path.join(self._dir(collection), _check_id(doc_id) + ".bin")
        try:
            with open(path, "rb") as fh:
                return fh.read()
        except FileNotFoundError:
            return None

    def delete_blob(self, collection: str, doc_id: str) -> bool:
        path = os.path.join(self._dir(collection), _check_id(doc_id) + ".bin")
        with self._lock_for(collection, doc_id):
            try:
                os.unlink(path)
                return True
            except FileNotFoundError:
                return False

    def blob_ids(self, collection: str) -> list[str]:
        names = os.listdir(self._dir(collection))
        return sorted(n[:-4] for n in names if n.endswith(".bin"))
