"""Accounts and sessions: salted scrypt credentials, opaque bearer tokens.

Raw passwords are hashed with per-user random salts and never stored.
Session tokens are 128-bit random values; only their SHA-256 digest is
persisted, so a scan of the record store reveals neither passwords nor
usable tokens.  Tokens expire after a configurable lifetime (24 h default).
"""
from __future__ import annotations

import hashlib
import hmac
import secrets
import threading
import time

from .storage import DocumentStore, new_id

SCRYPT_N = 2**14
SCRYPT_R = 8
SCRYPT_P = 1
TOKEN_TTL_SECONDS = 24 * 3600
ROLES = ("patient", "doctor")


class NameTaken(Exception):
    """Another account already uses this name."""


class BadCredentials(Exception):
    """Unknown name or wrong password."""


class ExpiredSession(Exception):
    """Token is unknown, malformed, or past its expiry."""


def hash_password(password: str) -> dict:
    salt = secrets.token_bytes(16)
    digest = hashlib.scrypt(
        password.encode(), salt=salt, n=SCRYPT_N, r=SCRYPT_R, p=SCRYPT_P
    )
    return {
        "salt": salt.hex(),
        "hash": digest.hex(),
        "n": SCRYPT_N,
        "r": SCRYPT_R,
        "p": SCRYPT_P,
    }


def verify_password(password: str, credential: dict) -> bool:
    digest = hashlib.scrypt(
        password.encode(),
        salt=bytes.fromhex(credential["salt"]),
        n=int(credential["n"]),
        r=int(credential["r"]),
        p=int(credential["p"]),
    )
    return hmac.compare_digest(digest.hex(), credential["hash"])


def new_token() -> str:
    return secrets.token_hex(16)


def _token_key(token: str) -> str:
    return hashlib.sha256(token.encode()).hexdigest()


def _name_key(name: str) -> str:
    return "n" + hashlib.sha256(name.encode()).hexdigest()


class Accounts:
    """User registry plus session table over a document store."""

    def __init__(self, store: DocumentStore, token_ttl: float = TOKEN_TTL_SECONDS):
        self.store = store
        self.token_ttl = float(token_ttl)
        self._register_lock = threading.Lock()

    def register(self, name: str, password: str, role: str,
                 profile_link: str | None = None) -> dict:
        if not isinstance(name, str) or not name.strip():
            raise ValueError("name must be a non-empty string")
        if not isinstance(password, str) or not password:
            raise ValueError("password must be a non-empty string")
        if role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        if profile_link is not None and not isinstance(profile_link, str):
            raise ValueError("profile_link must be a string")
        name = name.strip()
        with self._register_lock:
            if self.store.get("user_names", _name_key(name)) is not None:
                raise NameTaken(name)
            user = {
                "id": new_id(),
                "name": name,
                "role": role,
                "credential": hash_password(password),
                "profile_link": profile_link,
                "created": time.time(),
            }
            self.store.put("users", user["id"], user)
            self.store.put("user_names", _name_key(name), {"user_id": user["id"]})
        return user

    def login(self, name: str, password: str) -> tuple[str, dict]:
        pointer = self.store.get("user_names", _name_key(str(name).strip()))
        user = self.store.get("users", pointer["user_id"]) if pointer else None
        if user is None or not verify_password(str(password), user["credential"]):
            raise BadCredentials()
        token = new_token()
        session = {
            "user_id": user["id"],
            "expires_at": time.time() + self.token_ttl,
        }
        self.store.put("sessions", _token_key(token), session)
        return token, user

    def resolve(self, token: str) -> dict:
        if not isinstance(token, str) or not token:
            raise ExpiredSession("missing token")
        key = _token_key(token)
        session = self.store.get("sessions", key)
        if session is None:
            raise ExpiredSession("unknown token")
        if session["expires_at"] < time.time():
            self.store.delete("sessions", key)
            raise ExpiredSession("token expired")
        user = self.store.get("users", session["user_id"])
        if user is None:
            raise ExpiredSession("account removed")
        return user

    def get_user(self, user_id: str) -> dict | None:
        return self.store.get("users", user_id)

    def doctors(self) -> list[dict]:
        out = []
        for uid in self.store.ids("users"):
            user = self.store.get("users", uid)
            if user and user["role"] == "doctor":
                out.append(
                    {
                        "id": user["id"],
                        "name": user["name"],
                        "profile_link": user.get("profile_link"),
                    }
                )
        return sorted(out, key=lambda u: u["name"])
