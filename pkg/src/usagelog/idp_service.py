"""Minimal identity provider: log in, get a credential for a public key, fetch the issuer key.

The service knows nothing about exchanges; nodes verify credentials offline
with the public key served at ``GET /publickey``.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import secrets
import threading
from dataclasses import dataclass, field
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any

from . import crypto_core as cc
from .identity_vc import VerifiableCredential, issue_credential

PBKDF2_ROUNDS = 200_000


class IdpError(Exception):
    code = "idp-error"


class BadCredentials(IdpError):
    code = "bad-credentials"


class InvalidToken(IdpError):
    code = "invalid-token"


def hash_secret(secret: str, salt: bytes | None = None, rounds: int = PBKDF2_ROUNDS) -> str:
    salt = salt if salt is not None else secrets.token_bytes(16)
    digest = hashlib.pbkdf2_hmac("sha256", secret.encode(), salt, rounds)
    return f"pbkdf2-sha256${rounds}${salt.hex()}${digest.hex()}"


def check_secret(secret: str, stored: str) -> bool:
    try:
        scheme, rounds, salt, digest = stored.split("$")
    except ValueError:
        return False
    if scheme != "pbkdf2-sha256":
        return False
    candidate = hashlib.pbkdf2_hmac("sha256", secret.encode(), bytes.fromhex(salt), int(rounds))
    return hmac.compare_digest(candidate.hex(), digest)


def load_users(path: str | Path) -> dict[str, str]:
    """User table file: ``[{"user_id": ..., "secret_hash": ...}, ...]``."""
    return {row["user_id"]: row["secret_hash"] for row in json.loads(Path(path).read_text())}


def add_user(path: str | Path, user_id: str, secret: str) -> None:
    path = Path(path)
    rows = json.loads(path.read_text()) if path.exists() else []
    rows = [row for row in rows if row["user_id"] != user_id]
    rows.append({"user_id": user_id, "secret_hash": hash_secret(secret)})
    path.write_text(json.dumps(rows, indent=2) + "\n")


@dataclass
class IdentityProvider:
    users: dict[str, str]
    key: cc.KeyPair = field(default_factory=lambda: cc.generate_keypair(cc.DEFAULT_KEY_BITS))
    _tokens: dict[str, str] = field(default_factory=dict, repr=False)
    _issued: dict[str, VerifiableCredential] = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def login(self, user_id: str, secret: str) -> str:
        stored = self.users.get(user_id)
        # hash anyway so unknown users cost the same as wrong secrets
        ok = check_secret(secret, stored or hash_secret("", b"\0" * 16))
        if stored is None or not ok:
            raise BadCredentials("unknown user or wrong secret")
        token = secrets.token_hex(32)
        with self._lock:
            self._tokens[token] = user_id
        return token

    def logout(self, token: str) -> None:
        with self._lock:
            self._tokens.pop(token, None)

    def issue(self, token: str, user_public_key: bytes) -> VerifiableCredential:
        with self._lock:
            user_id = self._tokens.get(token)
        if user_id is None:
            raise InvalidToken("unknown or expired token")
        cc.decode_public_key(user_public_key)
        credential = issue_credential(self.key, user_id, user_public_key)
        with self._lock:
            self._issued[user_id] = credential
        return credential

    def public_key(self) -> bytes:
        return self.key.public_key

    def current_credential(self, user_id: str) -> VerifiableCredential | None:
        """The latest credential issued to ``user_id``; re-issuance replaces the binding."""
        with self._lock:
            return self._issued.get(user_id)


def _make_handler(idp: IdentityProvider) -> type[BaseHTTPRequestHandler]:
    class Handler(BaseHTTPRequestHandler):
        server_version = "usagelog-idp/1"

        def log_message(self, format: str, *args: Any) -> None:
            pass

        def _reply(self, status: int, body: dict) -> None:
            data = json.dumps(body).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _body(self) -> dict:
            length = int(self.headers.get("Content-Length", "0"))
            return json.loads(self.rfile.read(length) or b"{}")

        def do_GET(self) -> None:
            if self.path == "/publickey":
                self._reply(HTTPStatus.OK, {"public_key": idp.public_key().hex()})
            else:
                self._reply(HTTPStatus.NOT_FOUND, {"error": "not-found"})

        def do_POST(self) -> None:
            try:
                body = self._body()
                if self.path == "/login":
                    self._reply(HTTPStatus.OK, {"token": idp.login(str(body["user_id"]), str(body["secret"]))})
                elif self.path == "/logout":
                    idp.logout(str(body["token"]))
                    self._reply(HTTPStatus.OK, {})
                elif self.path == "/credential":
                    credential = idp.issue(str(body["token"]), bytes.fromhex(body["public_key"]))
                    self._reply(HTTPStatus.OK, credential.to_json())
                else:
                    self._reply(HTTPStatus.NOT_FOUND, {"error": "not-found"})
            except BadCredentials as exc:
                self._reply(HTTPStatus.UNAUTHORIZED, {"error": exc.code})
            except InvalidToken as exc:
                self._reply(HTTPStatus.FORBIDDEN, {"error": exc.code})
            except (KeyError, ValueError, json.JSONDecodeError):
                self._reply(HTTPStatus.BAD_REQUEST, {"error": "bad-request"})

    return Handler


def make_server(idp: IdentityProvider, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    return ThreadingHTTPServer((host, port), _make_handler(idp))


class IdpClient:
    """Tiny stdlib HTTP client for the three endpoints."""

    def __init__(self, base_url: str) -> None:
        self.base_url = base_url.rstrip("/")

    def _call(self, method: str, path: str, body: dict | None = None) -> dict:
        import urllib.error
        import urllib.request

        data = json.dumps(body).encode() if body is not None else None
        request = urllib.request.Request(self.base_url + path, data=data, method=method,
                                         headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(request, timeout=30) as response:
                return json.loads(response.read())
        except urllib.error.HTTPError as exc:
            error = json.loads(exc.read() or b"{}").get("error", "idp-error")
            raise {"bad-credentials": BadCredentials, "invalid-token": InvalidToken}.get(error, IdpError)(error) from None

    def login(self, user_id: str, secret: str) -> str:
        return self._call("POST", "/login", {"user_id": user_id, "secret": secret})["token"]

    def logout(self, token: str) -> None:
        self._call("POST", "/logout", {"token": token})

    def issue(self, token: str, user_public_key: bytes) -> VerifiableCredential:
        return VerifiableCredential.from_json(self._call("POST", "/credential", {"token": token, "public_key": user_public_key.hex()}))

    def public_key(self) -> bytes:
        return bytes.fromhex(self._call("GET", "/publickey")["public_key"])
