"""Grouped command execution over hosts, serially or in parallel.

A job runs one command string over an ordered set of targets and always
produces exactly one result per target: an exit code, a timeout, or a
transport error.  Failures are isolated; one dead host never disturbs
the others.  Parallel jobs keep at most ``fanout_limit`` executions in
flight so a big cloudlet cannot exhaust file descriptors.

Two transports: Ssh for real fleets (key-based auth only, no prompts)
and Local, which spawns the command on this machine once per target so
the serial-vs-parallel behaviour can be exercised without a fleet.

Command strings are passed to the target shell verbatim.  This is an
administrator-only tool by design; there is NO quoting or injection
filtering between the operator and the remote shell.
"""

from __future__ import annotations

import enum
import itertools
import subprocess
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

DEFAULT_FANOUT_LIMIT = 64
DEFAULT_TARGET_TIMEOUT = 30.0
DEFAULT_RESULT_TTL = 3600.0
STREAM_CAP = 1 << 20  # 1 MiB per stream, then truncation


class ControlError(Exception):
    pass


class EmptyTargets(ControlError):
    pass


class EmptyCommand(ControlError):
    pass


class UnknownJob(ControlError):
    pass


class MismatchedJobs(ControlError):
    pass


class PaletteParseError(ControlError):
    pass


class ExecutionMode(enum.Enum):
    SERIAL = "serial"
    PARALLEL = "parallel"

    @classmethod
    def parse(cls, text: str) -> "ExecutionMode":
        try:
            return cls(text.lower())
        except ValueError:
            raise ControlError(f"mode must be serial or parallel, got {text!r}") from None


class JobState(enum.Enum):
    PENDING = "pending"
    RUNNING = "running"
    DONE = "done"


@dataclass
class HostResult:
    hostname: str
    exit_code: int | None = None
    timed_out: bool = False
    error: str | None = None
    stdout: bytes = b""
    stderr: bytes = b""
    stdout_truncated: bool = False
    stderr_truncated: bool = False
    duration: float = 0.0

    @property
    def ok(self) -> bool:
        return self.exit_code == 0 and not self.timed_out and self.error is None

    def to_json_dict(self) -> dict:
        return {
            "hostname": self.hostname,
            "exit_code": self.exit_code,
            "timed_out": self.timed_out,
            "error": self.error,
            "stdout": self.stdout.decode("utf-8", "replace"),
            "stderr": self.stderr.decode("utf-8", "replace"),
            "stdout_truncated": self.stdout_truncated,
            "stderr_truncated": self.stderr_truncated,
            "duration": self.duration,
        }


class LocalTransport:
    """Runs the command on this machine once per target (benchmarks, CI)."""

    kind = "local"

    def argv(self, hostname: str, command: str) -> list[str]:
        return ["/bin/sh", "-c", command]

    def classify(self, exit_code: int, stderr: bytes) -> str | None:
        return None


class SshTransport:
    """``ssh [host] [command]`` with key-based, non-interactive auth."""

    kind = "ssh"

    def __init__(self, user: str | None = None, identity: str | None = None,
                 connect_timeout: float = 5.0, port: int | None = None):
        self.user = user
        self.identity = identity
        self.connect_timeout = connect_timeout
        self.port = port

    def argv(self, hostname: str, command: str) -> list[str]:
        argv = [
            "ssh",
            "-o", "BatchMode=yes",  # never prompt; keys must be exchanged
            "-o", "StrictHostKeyChecking=accept-new",
            "-o", f"ConnectTimeout={int(self.connect_timeout)}",
        ]
        if self.identity:
            argv += ["-i", self.identity]
        if self.port:
            argv += ["-p", str(self.port)]
        argv.append(f"{self.user}@{hostname}" if self.user else hostname)
        argv.append(command)
        return argv

    def classify(self, exit_code: int, stderr: bytes) -> str | None:
        if exit_code == 255:  # ssh reserves 255 for its own failures
            detail = stderr.decode("utf-8", "replace").strip().splitlines()
            return detail[0] if detail else "ssh transport failure"
        return None


def _drain_capped(stream, cap: int = STREAM_CAP) -> tuple[bytes, bool]:
    """Read to EOF keeping the first `cap` bytes; the rest is discarded."""
    chunks: list[bytes] = []
    kept = 0
    truncated = False
    while True:
        chunk = stream.read(65536)
        if not chunk:
            break
        if kept < cap:
            take = chunk[: cap - kept]
            chunks.append(take)
            kept += len(take)
            if len(take) < len(chunk):
                truncated = True
        else:
            truncated = True
    return b"".join(chunks), truncated


def run_one(transport, hostname: str, command: str, timeout: float) -> HostResult:
    """Execute the command for a single target; never raises."""
    t0 = time.perf_counter()
    try:
        proc = subprocess.Popen(
            transport.argv(hostname, command),
            stdin=subprocess.DEVNULL,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
        )
    except OSError as exc:
        return HostResult(hostname, error=f"spawn failed: {exc}", duration=time.perf_counter() - t0)

    captured = {}

    def reader(name, stream):
        captured[name] = _drain_capped(stream)

    threads = [
        threading.Thread(target=reader, args=("out", proc.stdout), daemon=True),
        threading.Thread(target=reader, args=("err", proc.stderr), daemon=True),
    ]
    for t in threads:
        t.start()

    timed_out = False
    try:
        exit_code = proc.wait(timeout=timeout)
    except subprocess.TimeoutExpired:
        timed_out = True
        proc.kill()
        exit_code = proc.wait()
    for t in threads:
        t.join(timeout=5)
    stdout, out_trunc = captured.get("out", (b"", False))
    stderr, err_trunc = captured.get("err", (b"", False))
    duration = time.perf_counter() - t0

    if timed_out:
        return HostResult(hostname, exit_code=None, timed_out=True, stdout=stdout, stderr=stderr,
                          stdout_truncated=out_trunc, stderr_truncated=err_trunc, duration=duration)
    error = transport.classify(exit_code, stderr)
    if error is not None:
        return HostResult(hostname, exit_code=exit_code, error=error, stdout=stdout, stderr=stderr,
                          stdout_truncated=out_trunc, stderr_truncated=err_trunc, duration=duration)
    return HostResult(hostname, exit_code=exit_code, stdout=stdout, stderr=stderr,
                      stdout_truncated=out_trunc, stderr_truncated=err_trunc, duration=duration)


@dataclass
class CommandJob:
    job_id: str
    targets: tuple[str, ...]
    command: str
    mode: ExecutionMode
    fanout_limit: int
    per_target_timeout: float
    state: JobState = JobState.PENDING
    results: dict[str, HostResult] = field(default_factory=dict)
    submitted_at: float = 0.0
    started_at: float | None = None
    finished_at: float | None = None
    max_in_flight: int = 0
    done: threading.Event = field(default_factory=threading.Event)

    @property
    def wall_seconds(self) -> float | None:
        if self.started_at is None or self.finished_at is None:
            return None
        return self.finished_at - self.started_at

    def ordered_results(self) -> list[HostResult]:
        return [self.results[t] for t in self.targets if t in self.results]


@dataclass(frozen=True)
class SpeedupReport:
    serial_s: float
    parallel_s: float

    @property
    def speedup(self) -> float:
        return self.serial_s / self.parallel_s


class ControlEngine:
    """Submits jobs, runs them in the background, retains results for a TTL."""

    def __init__(self, transport=None, fanout_limit: int = DEFAULT_FANOUT_LIMIT,
                 per_target_timeout: float = DEFAULT_TARGET_TIMEOUT,
                 result_ttl: float = DEFAULT_RESULT_TTL):
        self.transport = transport if transport is not None else LocalTransport()
        self.fanout_limit = fanout_limit
        self.per_target_timeout = per_target_timeout
        self.result_ttl = result_ttl
        self._jobs: dict[str, CommandJob] = {}
        self._lock = threading.Lock()
        self._seq = itertools.count(1)

    def submit(self, targets, command: str, mode: ExecutionMode,
               transport=None, fanout_limit: int | None = None,
               per_target_timeout: float | None = None) -> str:
        deduped = list(dict.fromkeys(targets))
        if not deduped:
            raise EmptyTargets("no targets given")
        if not command or not command.strip():
            raise EmptyCommand("no command given")
        if fanout_limit is not None and fanout_limit < 1:
            raise ControlError("fanout_limit must be >= 1")
        job = CommandJob(
            job_id=f"job-{next(self._seq):06d}",
            targets=tuple(deduped),
            command=command,
            mode=mode,
            fanout_limit=fanout_limit or self.fanout_limit,
            per_target_timeout=per_target_timeout or self.per_target_timeout,
            submitted_at=time.time(),
        )
        with self._lock:
            self._purge_expired_locked()
            self._jobs[job.job_id] = job
        transport = transport if transport is not None else self.transport
        runner = threading.Thread(target=self._run_job, args=(job, transport),
                                  name=job.job_id, daemon=True)
        runner.start()
        return job.job_id

    def _run_job(self, job: CommandJob, transport):
        job.state = JobState.RUNNING
        job.started_at = time.time()
        in_flight = 0
        flight_lock = threading.Lock()

        def execute(target):
            nonlocal in_flight
            with flight_lock:
                in_flight += 1
                job.max_in_flight = max(job.max_in_flight, in_flight)
            try:
                result = run_one(transport, target, job.command, job.per_target_timeout)
            finally:
                with flight_lock:
                    in_flight -= 1
            job.results[target] = result

        if job.mode is ExecutionMode.SERIAL:
            for target in job.targets:
                execute(target)
        else:
            workers = min(job.fanout_limit, len(job.targets))
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(execute, job.targets))
        job.finished_at = time.time()
        job.state = JobState.DONE
        job.done.set()

    def get_job(self, job_id: str) -> CommandJob:
        with self._lock:
            job = self._jobs.get(job_id)
        if job is None:
            raise UnknownJob(job_id)
        return job

    def await_results(self, job_id: str, timeout: float | None = None) -> list[HostResult]:
        job = self.get_job(job_id)
        if not job.done.wait(timeout):
            raise TimeoutError(f"{job_id} still running")
        return job.ordered_results()

    def speedup_report(self, serial_job_id: str, parallel_job_id: str) -> SpeedupReport:
        serial, parallel = self.get_job(serial_job_id), self.get_job(parallel_job_id)
        for job in (serial, parallel):
            if job.state is not JobState.DONE:
                raise MismatchedJobs(f"{job.job_id} has not finished")
        if serial.targets != parallel.targets or serial.command != parallel.command:
            raise MismatchedJobs("jobs must share identical targets and command")
        return SpeedupReport(serial.wall_seconds, parallel.wall_seconds)

    def _purge_expired_locked(self):
        now = time.time()
        expired = [
            job_id
            for job_id, job in self._jobs.items()
            if job.finished_at is not None and now - job.finished_at > self.result_ttl
        ]
        for job_id in expired:
            del self._jobs[job_id]


# -- popular-commands palette --------------------------------------------------


@dataclass(frozen=True)
class PaletteEntry:
    label: str
    command: str  # may contain a {} placeholder the UI fills in
    destructive: bool = False

    def to_json_dict(self) -> dict:
        return {"label": self.label, "command": self.command, "destructive": self.destructive}


DEFAULT_PALETTE = (
    PaletteEntry("Uptime", "uptime"),
    PaletteEntry("Disk usage", "df -h"),
    PaletteEntry("Reboot", "sudo reboot", destructive=True),
    PaletteEntry("Package update", "sudo apt-get update && sudo apt-get -y upgrade", destructive=True),
    PaletteEntry("Service restart", "sudo systemctl restart {}", destructive=True),
)


def popular_commands(path: str | None = None) -> list[PaletteEntry]:
    """Palette file: ``label | command template`` with an optional
    ``| destructive`` third field; the shipped defaults when no file."""
    if path is None:
        return list(DEFAULT_PALETTE)
    entries: list[PaletteEntry] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split("|")]
            if len(parts) == 2:
                label, command = parts
                destructive = False
            elif len(parts) == 3 and parts[2] == "destructive":
                label, command = parts[0], parts[1]
                destructive = True
            else:
                raise PaletteParseError(f"{path}:{line_no}: expected 'label | command [| destructive]'")
            if not label or not command:
                raise PaletteParseError(f"{path}:{line_no}: empty label or command")
            entries.append(PaletteEntry(label, command, destructive))
    return entries
