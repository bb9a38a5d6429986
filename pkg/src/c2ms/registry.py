"""Authoritative host-to-cloudlet mapping, mutable at runtime.

A cloudlet is a named group of hosts.  Hosts not claimed by any cloudlet
belong to the implicit ``Initial`` pool, which is never stored.  Each
host belongs to at most one explicit cloudlet, so group aggregates never
double-count.

The registry is deliberately inert toward the fleet: no operation here
opens a socket or signals any agent.  Grouping is resolved by readers
(the aggregator, the API) at query time, which is what makes membership
changes take effect instantly with zero agent reconfiguration and zero
daemon restarts.

State persists in a "clusters" file, one cloudlet per line::

    # comment
    MySQL: node01 node02
    MPI: node03

written atomically (temp file + rename) on every successful mutation.
"""

from __future__ import annotations

import os
import re
import threading
from dataclasses import dataclass

from . import protocol

INITIAL = "Initial"
_NAME_RE = re.compile(r"^[A-Za-z0-9_-]+$")


class RegistryError(Exception):
    pass


class InvalidName(RegistryError):
    pass


class ReservedName(RegistryError):
    pass


class DuplicateName(RegistryError):
    pass


class UnknownCloudlet(RegistryError):
    pass


class UnknownHost(RegistryError):
    pass


class AlreadyMember(RegistryError):
    def __init__(self, hostname: str, cloudlet: str):
        super().__init__(f"{hostname} is already a member of {cloudlet}")
        self.hostname = hostname
        self.cloudlet = cloudlet


class NotAMember(RegistryError):
    pass


class ParseError(RegistryError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class DisjointnessViolation(RegistryError):
    def __init__(self, hostname: str):
        super().__init__(f"host {hostname} listed under more than one cloudlet")
        self.hostname = hostname


@dataclass(frozen=True)
class Cloudlet:
    name: str
    members: tuple[str, ...]


@dataclass(frozen=True)
class RegistrySnapshot:
    cloudlets: tuple[Cloudlet, ...]
    revision: int

    def member_map(self) -> dict[str, str]:
        return {h: c.name for c in self.cloudlets for h in c.members}


def validate_cloudlet_name(name: str) -> None:
    if not _NAME_RE.match(name or ""):
        raise InvalidName(f"invalid cloudlet name {name!r}")
    if name == INITIAL:
        raise ReservedName(f"{INITIAL!r} is the implicit pool and cannot be created")


class CloudletRegistry:
    """In-memory registry with an optional clusters file behind it.

    Mutations are serialized under one lock and are all-or-nothing: the
    in-memory state and the file only change together, and the revision
    counter is bumped exactly once per successful mutation.
    """

    def __init__(self, path: str | None = None, strict_hosts: bool = False, known_hosts=None):
        self._path = path
        self._strict = strict_hosts
        self._known_hosts = known_hosts  # callable returning an iterable of hostnames
        self._cloudlets: dict[str, list[str]] = {}
        self._owner: dict[str, str] = {}
        self._revision = 0
        self._lock = threading.RLock()
        if path and os.path.exists(path):
            self._cloudlets = self._parse_file(path)
            self._owner = {h: c for c, hosts in self._cloudlets.items() for h in hosts}

    # -- reads -------------------------------------------------------------

    @property
    def revision(self) -> int:
        with self._lock:
            return self._revision

    def snapshot(self) -> RegistrySnapshot:
        with self._lock:
            return RegistrySnapshot(
                cloudlets=tuple(
                    Cloudlet(name, tuple(hosts)) for name, hosts in self._cloudlets.items()
                ),
                revision=self._revision,
            )

    def cloudlet_names(self) -> list[str]:
        with self._lock:
            return list(self._cloudlets)

    def members(self, name: str) -> list[str]:
        with self._lock:
            if name not in self._cloudlets:
                raise UnknownCloudlet(name)
            return list(self._cloudlets[name])

    def member_of(self, hostname: str) -> str | None:
        with self._lock:
            return self._owner.get(hostname)

    def initial_pool(self, known_hosts) -> list[str]:
        """Every known host not claimed by an explicit cloudlet."""
        with self._lock:
            return sorted(h for h in known_hosts if h not in self._owner)

    # -- mutations -----------------------------------------------------------

    def create_cloudlet(self, name: str) -> RegistrySnapshot:
        validate_cloudlet_name(name)
        with self._lock:
            if name in self._cloudlets:
                raise DuplicateName(name)
            next_state = {c: list(h) for c, h in self._cloudlets.items()}
            next_state[name] = []
            return self._commit(next_state)

    def delete_cloudlet(self, name: str) -> RegistrySnapshot:
        with self._lock:
            if name not in self._cloudlets:
                raise UnknownCloudlet(name)
            next_state = {c: list(h) for c, h in self._cloudlets.items() if c != name}
            return self._commit(next_state)

    def add_member(self, cloudlet: str, hostname: str, pre_registered: bool = False) -> RegistrySnapshot:
        if not protocol.valid_hostname(hostname):
            raise InvalidName(f"invalid hostname {hostname!r}")
        with self._lock:
            if cloudlet not in self._cloudlets:
                raise UnknownCloudlet(cloudlet)
            owner = self._owner.get(hostname)
            if owner is not None:
                raise AlreadyMember(hostname, owner)
            if self._strict and not pre_registered:
                known = set(self._known_hosts()) if self._known_hosts else set()
                if hostname not in known:
                    raise UnknownHost(hostname)
            next_state = {c: list(h) for c, h in self._cloudlets.items()}
            next_state[cloudlet].append(hostname)
            return self._commit(next_state)

    def remove_member(self, cloudlet: str, hostname: str) -> RegistrySnapshot:
        with self._lock:
            if cloudlet not in self._cloudlets:
                raise UnknownCloudlet(cloudlet)
            if hostname not in self._cloudlets[cloudlet]:
                raise NotAMember(f"{hostname} is not a member of {cloudlet}")
            next_state = {c: list(h) for c, h in self._cloudlets.items()}
            next_state[cloudlet].remove(hostname)
            return self._commit(next_state)

    def move_member(self, hostname: str, from_cloudlet: str, to_cloudlet: str) -> RegistrySnapshot:
        """Atomic move: observers never see the host in both or neither."""
        with self._lock:
            for name in (from_cloudlet, to_cloudlet):
                if name not in self._cloudlets:
                    raise UnknownCloudlet(name)
            if hostname not in self._cloudlets[from_cloudlet]:
                raise NotAMember(f"{hostname} is not a member of {from_cloudlet}")
            next_state = {c: list(h) for c, h in self._cloudlets.items()}
            next_state[from_cloudlet].remove(hostname)
            next_state[to_cloudlet].append(hostname)
            return self._commit(next_state)

    def _commit(self, next_state: dict[str, list[str]]) -> RegistrySnapshot:
        # write the file first; if that fails the in-memory state is untouched
        if self._path:
            self._write_file(self._path, next_state)
        self._cloudlets = next_state
        self._owner = {h: c for c, hosts in next_state.items() for h in hosts}
        self._revision += 1
        return self.snapshot()

    # -- clusters file -------------------------------------------------------

    @staticmethod
    def _parse_file(path: str) -> dict[str, list[str]]:
        cloudlets: dict[str, list[str]] = {}
        seen: dict[str, str] = {}
        with open(path, encoding="utf-8") as fh:
            for line_no, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                name, sep, rest = line.partition(":")
                if not sep:
                    raise ParseError(line_no, f"expected 'name: hosts', got {raw!r}")
                name = name.strip()
                try:
                    validate_cloudlet_name(name)
                except RegistryError as exc:
                    raise ParseError(line_no, str(exc)) from exc
                if name in cloudlets:
                    raise ParseError(line_no, f"cloudlet {name} defined twice")
                hosts = rest.split()
                for host in hosts:
                    if not protocol.valid_hostname(host):
                        raise ParseError(line_no, f"invalid hostname {host!r}")
                    if host in seen:
                        raise DisjointnessViolation(host)
                    seen[host] = name
                cloudlets[name] = hosts
        return cloudlets

    @staticmethod
    def _write_file(path: str, state: dict[str, list[str]]) -> None:
        lines = []
        for name, hosts in state.items():
            lines.append(name + ":" + "".join(" " + h for h in hosts) + "\n")
        tmp = f"{path}.tmp.{os.getpid()}"
        with open(tmp, "w", encoding="utf-8", newline="") as fh:
            fh.writelines(lines)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str, **kwargs) -> "CloudletRegistry":
        registry = cls(path=None, **kwargs)
        registry._cloudlets = cls._parse_file(path)
        registry._owner = {h: c for c, hosts in registry._cloudlets.items() for h in hosts}
        registry._path = path
        return registry

    def persist(self, path: str | None = None) -> None:
        with self._lock:
            self._write_file(path or self._path, self._cloudlets)
