import pytest

from conftest import FakeClock

from c2ms.auth import (
    CredentialStore,
    LoginThrottle,
    SessionManager,
    Throttled,
    WeakPassword,
)


def test_credentials_never_stored_in_clear(tmp_path):
    path = tmp_path / "credentials"
    store = CredentialStore(str(path))
    store.ensure_user("admin", "hunter22secret")
    content = path.read_text()
    assert "hunter22secret" not in content
    assert content.startswith("admin:")
    assert store.verify("admin", "hunter22secret")
    assert not store.verify("admin", "wrong")
    assert not store.verify("ghost", "hunter22secret")


def test_credentials_reload_from_disk(tmp_path):
    path = tmp_path / "credentials"
    CredentialStore(str(path)).ensure_user("admin", "hunter22secret")
    reloaded = CredentialStore(str(path))
    assert reloaded.verify("admin", "hunter22secret")


def test_set_password_rejects_short(tmp_path):
    store = CredentialStore(str(tmp_path / "c"))
    store.ensure_user("admin", "longenough")
    with pytest.raises(WeakPassword):
        store.set_password("admin", "seven77")
    store.set_password("admin", "eight888")
    assert store.verify("admin", "eight888")
    assert not store.verify("admin", "longenough")


def test_session_expiry_indistinguishable_from_unknown():
    clock = FakeClock()
    sessions = SessionManager(ttl=100, clock=clock)
    token, expires_at = sessions.create("admin")
    assert expires_at == clock() + 100
    assert sessions.validate(token) == "admin"
    clock.advance(101)
    assert sessions.validate(token) is None
    assert sessions.validate("never-existed") is None
    assert sessions.validate(None) is None


def test_invalidate_all_except():
    sessions = SessionManager()
    keep, _ = sessions.create("admin")
    others = [sessions.create("admin")[0] for _ in range(3)]
    assert sessions.invalidate_all_except(keep) == 3
    assert sessions.validate(keep) == "admin"
    assert all(sessions.validate(t) is None for t in others)


def test_throttle_window_slides():
    clock = FakeClock()
    throttle = LoginThrottle(limit=5, window=60, clock=clock)
    for _ in range(5):
        throttle.check("1.2.3.4")
        throttle.record_failure("1.2.3.4")
    with pytest.raises(Throttled):
        throttle.check("1.2.3.4")
    throttle.check("5.6.7.8")  # other sources unaffected
    clock.advance(61)
    throttle.check("1.2.3.4")  # failures aged out
