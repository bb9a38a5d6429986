"""Administrator credentials and bearer sessions for the HTTP API.

Single-role model: whoever logs in is the administrator.  Passwords are
stored as salted PBKDF2-SHA256 hashes, never in the clear and never
logged.  Login failures are throttled per source address, and an
expired session token is indistinguishable from one that never existed.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import secrets
import threading
import time

PBKDF2_ITERATIONS = 100_000
SESSION_TTL = 12 * 3600.0
MIN_PASSWORD_LEN = 8
THROTTLE_LIMIT = 5
THROTTLE_WINDOW = 60.0


class AuthError(Exception):
    pass


class InvalidCredentials(AuthError):
    """Covers both unknown user and wrong password, indistinguishably."""


class Throttled(AuthError):
    pass


class WeakPassword(AuthError):
    pass


def _hash_password(password: str, salt: bytes) -> bytes:
    return hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), salt, PBKDF2_ITERATIONS)


class CredentialStore:
    """``username:salt_hex:hash_hex`` lines, rewritten atomically."""

    def __init__(self, path: str | None = None):
        self._path = path
        self._users: dict[str, tuple[bytes, bytes]] = {}
        self._lock = threading.Lock()
        # equalizes verification time for unknown usernames
        self._decoy_salt = secrets.token_bytes(16)
        if path and os.path.exists(path):
            self._load(path)

    def _load(self, path: str):
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                username, salt_hex, hash_hex = line.split(":")
                self._users[username] = (bytes.fromhex(salt_hex), bytes.fromhex(hash_hex))

    def _persist(self):
        if not self._path:
            return
        tmp = f"{self._path}.tmp.{os.getpid()}"
        with open(tmp, "w", encoding="utf-8") as fh:
            for username, (salt, digest) in self._users.items():
                fh.write(f"{username}:{salt.hex()}:{digest.hex()}\n")
        os.replace(tmp, self._path)

    def ensure_user(self, username: str, password: str) -> bool:
        """Create the user if absent; True when it was created."""
        with self._lock:
            if username in self._users:
                return False
            salt = secrets.token_bytes(16)
            self._users[username] = (salt, _hash_password(password, salt))
            self._persist()
            return True

    def verify(self, username: str, password: str) -> bool:
        with self._lock:
            salt, expected = self._users.get(username, (self._decoy_salt, b"\x00" * 32))
        return hmac.compare_digest(_hash_password(password, salt), expected)

    def set_password(self, username: str, password: str) -> None:
        if len(password) < MIN_PASSWORD_LEN:
            raise WeakPassword(f"password must be at least {MIN_PASSWORD_LEN} characters")
        with self._lock:
            salt = secrets.token_bytes(16)
            self._users[username] = (salt, _hash_password(password, salt))
            self._persist()


class SessionManager:
    def __init__(self, ttl: float = SESSION_TTL, clock=time.time):
        self.ttl = ttl
        self.clock = clock
        self._sessions: dict[str, tuple[str, float]] = {}  # token -> (user, expires)
        self._lock = threading.Lock()

    def create(self, username: str) -> tuple[str, float]:
        token = secrets.token_urlsafe(16)  # 128 bits
        expires_at = self.clock() + self.ttl
        with self._lock:
            self._sessions[token] = (username, expires_at)
        return token, expires_at

    def validate(self, token: str | None) -> str | None:
        if not token:
            return None
        now = self.clock()
        with self._lock:
            entry = self._sessions.get(token)
            if entry is None:
                return None
            username, expires_at = entry
            if now > expires_at:
                del self._sessions[token]
                return None
            return username

    def invalidate_all_except(self, keep_token: str) -> int:
        with self._lock:
            doomed = [t for t in self._sessions if t != keep_token]
            for t in doomed:
                del self._sessions[t]
            return len(doomed)


class LoginThrottle:
    """At most `limit` failed attempts per source per sliding window."""

    def __init__(self, limit: int = THROTTLE_LIMIT, window: float = THROTTLE_WINDOW, clock=time.time):
        self.limit = limit
        self.window = window
        self.clock = clock
        self._failures: dict[str, list[float]] = {}
        self._lock = threading.Lock()

    def check(self, source: str) -> None:
        now = self.clock()
        with self._lock:
            recent = [t for t in self._failures.get(source, []) if now - t < self.window]
            self._failures[source] = recent
            if len(recent) >= self.limit:
                raise Throttled(f"too many login failures from {source}")

    def record_failure(self, source: str) -> None:
        with self._lock:
            self._failures.setdefault(source, []).append(self.clock())
